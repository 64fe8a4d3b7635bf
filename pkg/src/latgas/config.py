"""Configuration management using Pydantic Settings.

Runtime settings (threads, caps, tolerances) come from the environment; each
subcommand reads a JSON experiment document validated by the models below.
"""

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from latgas.disorder import DisorderLaw
from latgas.dynamics import RateFamily
from latgas.lattice import TorusGeometry, make_torus


class RuntimeSettings(BaseSettings):
    """Process-wide runtime settings."""

    model_config = SettingsConfigDict(env_prefix="LATGAS_")

    threads: int = 1
    log_level: str = "INFO"
    debug: bool = False  # per-chunk conservation checks in the event loop
    cache: Path | None = None  # directory for reusable thermodynamic tables


class CapSettings(BaseSettings):
    """Sizes above which exact enumeration is refused."""

    model_config = SettingsConfigDict(env_prefix="LATGAS_CAP_")

    grand_enumeration_sites: int = 22
    canonical_sector_states: int = 5_000_000
    dense_sector_states: int = 200_000
    dense_eigen_states: int = 3000
    exact_conditional_sites: int = 26
    window_sites: int = 22


class ToleranceSettings(BaseSettings):
    """Numerical tolerances."""

    model_config = SettingsConfigDict(env_prefix="LATGAS_TOL_")

    root: float = 1e-10
    quadrature: float = 1e-10
    cg: float = 1e-10
    detailed_balance: float = 1e-12
    invariant: float = 1e-12


class Settings(BaseSettings):
    """Main application settings."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    runtime: RuntimeSettings = Field(default_factory=RuntimeSettings)
    caps: CapSettings = Field(default_factory=CapSettings)
    tolerances: ToleranceSettings = Field(default_factory=ToleranceSettings)


def get_settings() -> Settings:
    """Get application settings."""
    return Settings()


# --- experiment documents -------------------------------------------------


class _Schema(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeometryConfig(_Schema):
    dims: list[int]

    def build(self) -> TorusGeometry:
        return make_torus(self.dims)


LawConfig = DisorderLaw


class RateConfig(_Schema):
    kind: Literal["random_trap", "metropolis", "long_jump", "custom_table"] = "metropolis"
    alphabet: list[float] | None = None
    table: list | None = None

    @model_validator(mode="after")
    def _table_needs_alphabet(self) -> "RateConfig":
        if self.kind == "custom_table" and (self.alphabet is None or self.table is None):
            raise ValueError("custom_table rates need both alphabet and table")
        return self

    def build(self, validate: bool = True) -> RateFamily:
        if self.kind == "custom_table":
            return RateFamily.custom(self.alphabet, self.table, validate=validate)
        return RateFamily.builtin(self.kind)


class ExperimentConfig(_Schema):
    """Keys shared by every subcommand."""

    seed: int = Field(default=0, ge=0, lt=2**64)
    threads: int = Field(default_factory=lambda: get_settings().runtime.threads, ge=1)
    out: Path = Path("out")


def _default_law() -> DisorderLaw:
    return DisorderLaw.uniform(1.0)


class ValidateRatesConfig(ExperimentConfig):
    rates: RateConfig = RateConfig()
    bound: float = Field(default=1.0, gt=0)
    grid: int = Field(default=200, ge=2)
    tolerance: float = 1e-12


class ThermoConfig(ExperimentConfig):
    law: LawConfig = Field(default_factory=_default_law)
    densities: list[float] = Field(default_factory=lambda: [k / 20 for k in range(1, 20)])
    bins: int | None = None  # check the binned law instead of the declared one
    tolerance: float = 1e-6

    @model_validator(mode="after")
    def _increasing_grid(self) -> "ThermoConfig":
        if any(b <= a for a, b in zip(self.densities, self.densities[1:])):
            raise ValueError("densities must be strictly increasing")
        return self


class GapScalingConfig(ExperimentConfig):
    law: LawConfig = Field(default_factory=_default_law)
    rates: RateConfig = RateConfig()
    d: int = Field(default=1, ge=1, le=3)
    sizes: list[int] = Field(default_factory=lambda: list(range(2, 13)))
    samples: int = Field(default=20, ge=1)
    sectors: Literal["all", "half"] = "all"


class DiffusionConfig(ExperimentConfig):
    law: LawConfig = Field(default_factory=lambda: DisorderLaw.discrete([-1.0, 1.0], [0.5, 0.5]))
    rates: RateConfig = RateConfig()
    d: int = Field(default=1, ge=1, le=3)
    densities: list[float] = Field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    support: Literal["bond", "cube"] = "cube"
    radius: int = Field(default=1, ge=0)
    n_dis: int = Field(default=200, ge=2)
    bins: int = Field(default=5, ge=1)
    disorder_mode: Literal["iid", "translates", "exact"] = "iid"
    eta_mode: Literal["exact", "sampled", "auto"] = "auto"
    n_eta: int = Field(default=64, ge=1)
    jackknife_blocks: int = Field(default=20, ge=2)
    nested: bool = True  # also report the values for all smaller supports


class HydroConfig(ExperimentConfig):
    law: LawConfig = Field(default_factory=lambda: DisorderLaw.constant(0.0))
    rates: RateConfig = RateConfig()
    d: int = Field(default=1, ge=1, le=3)
    side: int = Field(default=512, ge=4)
    horizon: float = Field(default=0.1, gt=0)
    checkpoints: list[float] = Field(default_factory=lambda: [0.0, 0.05, 0.1])
    mean: float = 0.5
    amplitude: float = 0.25
    mode: int = 1
    block: int = Field(default=16, ge=1)
    ensemble: int = Field(default=10, ge=1)
    resolution: int | None = None
    scheme: Literal["euler", "heun"] = "euler"
    diffusion_constant: float | None = 1.0
    diffusion_table: Path | None = None
    diffusion: DiffusionConfig | None = None
    energy_blocks: list[int] = Field(default_factory=lambda: [4, 16])

    @model_validator(mode="after")
    def _check_profile(self) -> "HydroConfig":
        if not 0 < self.mean - abs(self.amplitude) <= self.mean + abs(self.amplitude) < 1:
            raise ValueError("initial profile must stay inside (0, 1)")
        if any(t < 0 or t > self.horizon for t in self.checkpoints):
            raise ValueError("checkpoints must lie in [0, horizon]")
        return self


class FluctuationsConfig(ExperimentConfig):
    law: LawConfig = Field(default_factory=lambda: DisorderLaw.discrete([-1.0, 1.0], [0.5, 0.5]))
    d: int = Field(default=1, ge=1, le=3)
    density: float = Field(default=0.5, gt=0, lt=1)
    sizes: list[int] = Field(default_factory=lambda: [3, 5, 7, 9, 11])
    s: int | None = None  # conditioning scale; defaults to n
    samples: int = Field(default=2000, ge=2)
    mode: Literal["exact", "sampled"] = "exact"
    draws: int = Field(default=200, ge=1)

    @model_validator(mode="after")
    def _odd_sizes(self) -> "FluctuationsConfig":
        if any(n % 2 == 0 for n in self.sizes) or (self.s is not None and self.s % 2 == 0):
            raise ValueError("block sizes must be odd")
        return self


class SampleConfig(ExperimentConfig):
    geometry: GeometryConfig = GeometryConfig(dims=[16])
    law: LawConfig = Field(default_factory=_default_law)
    ensemble: Literal["grand", "canonical"] = "grand"
    density: float = Field(default=0.5, gt=0, lt=1)
    draws: int = Field(default=1, ge=1)
    chemical_potential: Literal["annealed", "empirical"] = "annealed"


class SpectralH1Config(ExperimentConfig):
    law: LawConfig = Field(default_factory=_default_law)
    rates: RateConfig = RateConfig()
    d: int = Field(default=1, ge=1, le=2)
    ell: int = Field(default=4, ge=1)
    n: int = Field(default=1, ge=1)
    density: float = Field(default=0.5, gt=0, lt=1)
    axis: int = 0
    current_axis: int = 0
    samples: int = Field(default=4, ge=1)
    betas: list[float] = Field(default_factory=lambda: [1e-3, 1e-2])


COMMAND_CONFIGS: dict[str, type[ExperimentConfig]] = {
    "validate-rates": ValidateRatesConfig,
    "thermo": ThermoConfig,
    "gap-scaling": GapScalingConfig,
    "diffusion": DiffusionConfig,
    "hydro": HydroConfig,
    "fluctuations": FluctuationsConfig,
    "sample": SampleConfig,
    "spectral-h1": SpectralH1Config,
}


def load_experiment(command: str, path: Path | None = None, **overrides) -> ExperimentConfig:
    """Read and validate the JSON document for ``command``; flags override keys.

    Raises:
        pydantic.ValidationError: If the document does not match the schema.
    """
    data = json.loads(Path(path).read_text()) if path is not None else {}
    data.update({key: value for key, value in overrides.items() if value is not None})
    return COMMAND_CONFIGS[command].model_validate(data)
