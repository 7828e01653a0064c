"""Experiment configuration as plain ``key = value`` text."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields, replace

__all__ = ["ConfigError", "ExperimentConfig", "PROFILES", "load_config"]


class ConfigError(ValueError):
    pass


# n = 14450 in the full profile; alpha-heavy so the offsets sin(alpha) of each
# fan resolve the mesh (see README)
PROFILES = {
    "full": {"mesh_nodes": 6027, "n_beta": 50, "n_alpha": 289},
    "desk": {"mesh_nodes": 800, "n_beta": 32, "n_alpha": 64},
}

METRICS = ("euclidean", "paper_bump")
VARIANTS = ("plain", "attenuated", "weighted")
TRUTHS = ("prior", "bump")
_POSITIVE = ("mesh_nodes", "n_beta", "n_alpha", "quad_step", "epsilon", "sigma", "nu", "ell",
             "n_draws", "replicates", "resolution", "psi_rate")


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "full"
    metric: str = "euclidean"
    mesh_nodes: int = 6027
    mesh_file: str = ""
    n_beta: int = 50
    n_alpha: int = 289
    quad_step: float = 1e-3
    epsilon: float = 1e-3
    sigma: float = 1.0
    nu: float = 1.5
    ell: float = 0.2
    phantom: str = "shepp_logan"
    variant: str = "plain"
    attenuation: float = 0.0
    seed: int = 0
    output: str = "out"
    n_draws: int = 2000
    level: float = 0.9
    replicates: int = 200
    truth: str = "prior"
    psi_x1: float = 0.0
    psi_x2: float = 0.0
    psi_rate: float = 4.0
    resolution: int = 256

    def __post_init__(self):
        for name in _POSITIVE:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.mesh_nodes < 16:
            raise ConfigError("mesh_nodes must be at least 16")
        if self.n_beta < 2 or self.n_alpha < 2:
            raise ConfigError("n_beta and n_alpha must be at least 2")
        if self.quad_step > 0.1:
            raise ConfigError("quad_step must not exceed 0.1")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.truth not in TRUTHS:
            raise ConfigError(f"truth must be one of {TRUTHS}")
        if self.replicates < 100:
            raise ConfigError("replicates must be at least 100")
        if self.n_draws < 100:
            raise ConfigError("n_draws must be at least 100")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "ExperimentConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        return cls(profile=profile, **{**PROFILES[profile], **overrides})

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)

    def to_text(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = _parse(types[key], val, key)
        if base is None:
            profile = values.get("profile", "full")
            if profile not in PROFILES:
                raise ConfigError(f"unknown profile {profile!r}")
            base = cls(profile=profile, **PROFILES[profile])
        return dataclasses.replace(base, **values)


def _format(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _parse(typ, val: str, key: str):
    try:
        if typ in ("int", int):
            return int(val)
        if typ in ("float", float):
            return float(val)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {val!r}") from None
    return val


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_text(fh.read())
