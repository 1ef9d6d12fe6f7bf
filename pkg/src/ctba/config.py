"""Run configuration as flat ``key = value`` text.

The canonical form lists every field once, in declaration order, so a
parsed file re-serialises to exactly the same bytes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Union, get_type_hints

from .correspondence import AssociationConfig
from .optimizer import OptimizerConfig


class ConfigError(ValueError):
    """Malformed or out-of-range configuration."""


@dataclass(frozen=True)
class RunConfig:
    scan_dir: str = ""
    initial_poses: str = ""
    output_dir: str = ""
    subsample_cell: float = 0.15
    search_grid: float = 0.30
    normal_k: int = 30
    tau: float = 30.0
    n_matches: int = 10
    n_buffer: int = 1000
    n_iter: int = 100
    gm_sigma: float = 0.3
    max_corr_dist: float = 0.5
    seed: int = 0
    convergence_threshold: float = 1e-5
    threads: int = 1
    robust: bool = True
    resample_candidates: bool = True
    search_scale: float = 1.0
    search_scale_decay: float = 0.5
    max_curvature: Optional[float] = None
    max_plane_rms: Optional[float] = None
    max_normal_angle: Optional[float] = None
    deskewed_normals: bool = False

    def __post_init__(self):
        for name in ("subsample_cell", "search_grid", "tau", "gm_sigma", "max_corr_dist", "convergence_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("normal_k", "n_matches", "n_buffer", "n_iter", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.normal_k < 3:
            raise ConfigError("normal_k must be >= 3")
        if self.search_scale < 1.0 or not 0.0 < self.search_scale_decay < 1.0:
            raise ConfigError("search_scale must be >= 1 and search_scale_decay in (0, 1)")
        for name in ("max_curvature", "max_plane_rms", "max_normal_angle"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be > 0 when set")

    def association(self) -> AssociationConfig:
        return AssociationConfig(
            tau=self.tau,
            n_matches=self.n_matches,
            search_voxel=self.search_grid,
            max_corr_dist=self.max_corr_dist,
            max_normal_angle_deg=self.max_normal_angle,
            seed=self.seed,
            resample_every_iteration=self.resample_candidates,
            deskewed_normals=self.deskewed_normals,
            normal_k=self.normal_k,
            max_curvature=self.max_curvature,
            max_plane_rms=self.max_plane_rms,
        )

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            max_iterations=self.n_iter,
            convergence_threshold=self.convergence_threshold,
            gm_sigma=self.gm_sigma,
            robust=self.robust,
            search_scale=self.search_scale,
            search_scale_decay=self.search_scale_decay,
        )

    def preprocess_params(self) -> dict:
        """Parameters that determine the preprocessed scans (cache key)."""
        return {
            "subsample_cell": self.subsample_cell,
            "normal_k": self.normal_k,
            "max_curvature": self.max_curvature,
        }

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in _TYPES:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            values[key] = parse_value(key, value, f"{source}:{lineno}")
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_text(path.read_text(), str(path))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def updated(self, **overrides) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


_TYPES = get_type_hints(RunConfig)


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, text: str, where: str = ""):
    """Parse ``text`` as the declared type of ``key``."""
    typ = _TYPES[key]
    optional = getattr(typ, "__origin__", None) is Union
    if optional:
        if text.lower() == "none":
            return None
        typ = next(t for t in typ.__args__ if t is not type(None))
    try:
        if typ is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return text.lower() == "true"
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {text!r} ({exc})") from None


def field_names() -> list[str]:
    return [f.name for f in fields(RunConfig)]
