"""Tests for output files, manifests, snapshots and the thermodynamic cache."""

import json

import numpy as np
import pytest

from latgas.config import ThermoConfig
from latgas.disorder import DisorderLaw
from latgas.lattice import make_torus
from latgas.results import (
    MANIFEST_NAME,
    ResultStore,
    cached_thermo_table,
    decode_occupancy,
    encode_occupancy,
    format_value,
    read_snapshots,
    read_table,
    thermo_key,
    write_snapshots,
)


class TestFormatting:
    """Test CSV cell rendering."""

    def test_float_round_trips(self):
        """Test floats are written with enough digits to read back exactly."""
        value = 0.1 + 0.2

        assert float(format_value(value)) == value

    def test_other_types(self):
        """Test booleans, integers and missing values."""
        assert format_value(True) == "1"
        assert format_value(np.int64(7)) == "7"
        assert format_value(None) == ""
        assert format_value("bond") == "bond"


class TestResultStore:
    """Test tables and manifests."""

    def test_write_rows(self, tmp_path):
        """Test rows land in the file and the manifest lists it."""
        store = ResultStore(tmp_path / "out", "thermo")
        store.write_rows("table.csv", [{"m": 0.5, "chi": 0.25}, {"m": 0.75, "chi": 0.1875}])

        rows = read_table(tmp_path / "out" / "table.csv")
        assert [float(row["chi"]) for row in rows] == [0.25, 0.1875]
        assert store.files == ["table.csv"]

    def test_failed_table_leaves_no_file(self, tmp_path):
        """Test an exception inside the block removes the partial file."""
        store = ResultStore(tmp_path, "thermo")

        with pytest.raises(RuntimeError):
            with store.table("broken.csv", ["m"]) as write:
                write({"m": 0.5})
                raise RuntimeError("interrupted")

        assert not (tmp_path / "broken.csv").exists()
        assert not (tmp_path / "broken.csv.partial").exists()
        assert store.files == []

    def test_missing_columns_are_blank(self, tmp_path):
        """Test a row without a column writes an empty cell."""
        store = ResultStore(tmp_path, "thermo")
        store.write_rows("sparse.csv", [{"m": 0.5}], columns=["m", "chi"])

        assert read_table(tmp_path / "sparse.csv") == [{"m": "0.5", "chi": ""}]

    def test_manifest_is_deterministic(self, tmp_path):
        """Test two manifests for the same run are byte-identical and carry the config."""
        config = ThermoConfig(densities=[0.5], out=tmp_path)
        texts = []
        for name in ("first", "second"):
            store = ResultStore(tmp_path / name, "thermo")
            store.write_rows("thermo.csv", [{"m": 0.5}])
            texts.append(store.write_manifest(config, {"max_relation_error": 1e-9}).read_text())

        manifest = json.loads(texts[0])
        assert texts[0] == texts[1]
        assert manifest["command"] == "thermo"
        assert manifest["outputs"] == ["thermo.csv"]
        assert manifest["config"]["densities"] == [0.5]
        assert MANIFEST_NAME not in manifest["outputs"]


class TestSnapshots:
    """Test the packed snapshot format."""

    def test_occupancy_codec(self, rng):
        """Test packing keeps the occupations of a length not divisible by eight."""
        eta = rng.integers(0, 2, 13).astype(np.int8)

        assert decode_occupancy(encode_occupancy(eta), 13).tolist() == eta.tolist()

    def test_file_round_trip(self, tmp_path, rng):
        """Test snapshots and header fields read back."""
        geometry = make_torus([4, 5])
        snapshots = [(0.0, rng.integers(0, 2, 20).astype(np.int8)), (0.5, rng.integers(0, 2, 20).astype(np.int8))]
        write_snapshots(tmp_path / "run.snap", geometry, snapshots, {"seed": 3})

        loaded_geometry, header, loaded = read_snapshots(tmp_path / "run.snap")

        assert list(loaded_geometry.dims) == [4, 5]
        assert header["seed"] == 3
        assert [t for t, _ in loaded] == [0.0, 0.5]
        assert all(a.tolist() == b.tolist() for (_, a), (_, b) in zip(snapshots, loaded))

    def test_corrupt_counts(self, tmp_path):
        """Test a header disagreeing with the payload is refused."""
        geometry = make_torus([8])
        path = write_snapshots(tmp_path / "run.snap", geometry, [(0.0, np.ones(8, dtype=np.int8))])
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header["particles"] = [7]
        path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")

        with pytest.raises(ValueError):
            read_snapshots(path)


class TestThermoCache:
    """Test reuse of thermodynamic tables."""

    def test_key_depends_on_law_and_grid(self, two_point_law, uniform_law):
        """Test different laws or grids give different keys."""
        assert thermo_key(two_point_law, [0.5]) == thermo_key(DisorderLaw.discrete([-1, 1], [0.5, 0.5]), [0.5])
        assert thermo_key(two_point_law, [0.5]) != thermo_key(uniform_law, [0.5])
        assert thermo_key(two_point_law, [0.5]) != thermo_key(two_point_law, [0.25])

    def test_second_call_reads_cache(self, tmp_path, two_point_law, monkeypatch):
        """Test the cached table is read back with the same values."""
        densities = [0.2, 0.5, 0.8]
        first = cached_thermo_table(two_point_law, densities, tmp_path)
        files = list(tmp_path.glob("thermo-*.csv"))

        def fail(*args, **kwargs):
            raise AssertionError("table rebuilt despite cache")

        monkeypatch.setattr("latgas.results.build_thermo_table", fail)
        second = cached_thermo_table(two_point_law, densities, tmp_path)

        assert len(files) == 1
        assert second.lam.tolist() == first.lam.tolist()
        assert second.chi.tolist() == first.chi.tolist()

    def test_no_cache_directory(self, two_point_law, tmp_path):
        """Test no files are written without a cache."""
        cached_thermo_table(two_point_law, [0.5])

        assert list(tmp_path.glob("thermo-*.csv")) == []
