"""Output files: CSV tables, run manifests, bit-packed snapshots and the thermo cache.

Every file a command writes goes through a :class:`ResultStore`, which records it
in the run manifest. Floats are written with ``.17g`` so a table read back gives
the same doubles, and manifests carry no timestamps so identical runs produce
identical bytes.
"""

import base64
import csv
import hashlib
import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from pydantic import BaseModel

from latgas import __version__
from latgas.disorder import DisorderLaw
from latgas.gibbs import ThermoTable, build_thermo_table
from latgas.lattice import TorusGeometry, make_torus

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def format_value(value: Any) -> str:
    """Render one CSV cell."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    if value is None:
        return ""
    return str(value)


def _jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        value = float(value)
    if isinstance(value, float) and not np.isfinite(value):
        return repr(value)
    if isinstance(value, Path):
        return str(value)
    return value


def dump_json(data: Any) -> str:
    return json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n"


@dataclass
class ResultStore:
    """Directory of one command's outputs plus its manifest."""

    out: Path
    command: str
    files: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.out = Path(self.out)
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def register(self, name: str) -> None:
        if name not in self.files:
            self.files.append(name)

    @contextmanager
    def table(self, name: str, columns: list[str]):
        """Stream rows into ``name``; the file appears only if the block succeeds.

        Yields a function taking one row (a dict keyed by column).
        """
        target = self.path(name)
        partial = target.with_name(target.name + ".partial")
        handle = open(partial, "w", newline="")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)

        def write(row: dict) -> None:
            writer.writerow([format_value(row.get(column)) for column in columns])

        try:
            yield write
            handle.close()
            os.replace(partial, target)
            self.register(name)
        except Exception:
            handle.close()
            partial.unlink(missing_ok=True)
            raise

    def write_rows(self, name: str, rows: Iterable[dict], columns: list[str] | None = None) -> Path:
        rows = list(rows)
        if columns is None:
            columns = []
            for row in rows:
                columns.extend(key for key in row if key not in columns)
        with self.table(name, columns) as write:
            for row in rows:
                write(row)
        logger.info(f"Wrote {len(rows)} rows to {self.path(name)}")
        return self.path(name)

    def write_json(self, name: str, data: Any) -> Path:
        self.path(name).write_text(dump_json(data))
        self.register(name)
        return self.path(name)

    def write_manifest(self, config: BaseModel, summary: dict | None = None) -> Path:
        """Echo the resolved config, code version and the list of outputs."""
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": config,
            "outputs": sorted(self.files),
            "summary": summary or {},
        }
        self.path(MANIFEST_NAME).write_text(dump_json(manifest))
        return self.path(MANIFEST_NAME)


def read_table(path: Path) -> list[dict]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


# --- snapshots --------------------------------------------------------------


def encode_occupancy(eta: np.ndarray) -> str:
    return base64.b64encode(np.packbits(np.asarray(eta, dtype=np.uint8)).tobytes()).decode("ascii")


def decode_occupancy(text: str, n_sites: int) -> np.ndarray:
    packed = np.frombuffer(base64.b64decode(text), dtype=np.uint8)
    return np.unpackbits(packed, count=n_sites).astype(np.int8)


def write_snapshots(path: Path, geometry: TorusGeometry, snapshots: list[tuple[float, np.ndarray]], meta: dict | None = None) -> Path:
    """One JSON header line, then one base64 line of packed occupancy per snapshot.

    Sites are packed in flat index order, most significant bit first.
    """
    header = {
        "dims": list(geometry.dims),
        "n_sites": geometry.n_sites,
        "times": [float(t) for t, _ in snapshots],
        "particles": [int(np.sum(eta)) for _, eta in snapshots],
        **(meta or {}),
    }
    lines = [json.dumps(_jsonable(header), sort_keys=True)]
    lines.extend(encode_occupancy(eta) for _, eta in snapshots)
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_snapshots(path: Path) -> tuple[TorusGeometry, dict, list[tuple[float, np.ndarray]]]:
    """Inverse of :func:`write_snapshots`; returns (geometry, header, snapshots).

    Raises:
        ValueError: If the particle counts in the header do not match the payload.
    """
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    geometry = make_torus(header["dims"])
    snapshots = []
    for t, count, text in zip(header["times"], header["particles"], lines[1:]):
        eta = decode_occupancy(text, geometry.n_sites)
        if int(eta.sum()) != count:
            raise ValueError(f"snapshot at t={t} has {int(eta.sum())} particles, header says {count}")
        snapshots.append((float(t), eta))
    return geometry, header, snapshots


# --- thermodynamic cache ----------------------------------------------------


def thermo_key(law: DisorderLaw, densities) -> str:
    document = {"law": law.model_dump(mode="json"), "m": [f"{float(m):.17g}" for m in densities]}
    return hashlib.sha256(json.dumps(document, sort_keys=True).encode()).hexdigest()[:20]


THERMO_COLUMNS = ["m", "lambda0", "chi", "relation_error", "clamped"]


def _thermo_from_rows(law: DisorderLaw, rows: list[dict]) -> ThermoTable:
    column = {name: np.array([float(row[name]) for row in rows]) for name in THERMO_COLUMNS}
    return ThermoTable(law, column["m"], column["lambda0"], column["chi"], column["relation_error"], column["clamped"].astype(bool))


def cached_thermo_table(law: DisorderLaw, densities, cache: Path | None = None) -> ThermoTable:
    """Thermodynamic table for ``law``, reused from ``cache`` when present there."""
    if cache is None:
        return build_thermo_table(law, densities)
    cache = Path(cache)
    target = cache / f"thermo-{thermo_key(law, densities)}.csv"
    if target.exists():
        logger.info(f"Using cached thermodynamic table {target}")
        return _thermo_from_rows(law, read_table(target))
    table = build_thermo_table(law, densities)
    cache.mkdir(parents=True, exist_ok=True)
    ResultStore(cache, "thermo-cache").write_rows(target.name, table.rows(), THERMO_COLUMNS)
    return table
