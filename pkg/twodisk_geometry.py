"""
Two-disk geometry: configuration, region classification and contrasts.

The plane is split into the inclusions B1, B2 (open disks of radii r1, r2,
centered at c1 = (eps/2 + r1, 0) and c2 = (-eps/2 - r2, 0)) and the matrix
B0. Points are handled as Python complex numbers throughout the library;
`as_point` accepts (x1, x2) pairs as well.
"""

import json
import logging
import math
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from twodisk_errors import AmbiguousEvaluationError, InvalidConfigurationError

logger = logging.getLogger(__name__)

PointLike = Union[complex, float, Sequence[float]]

# Environment variables consulted by load_config, keyed by config field.
ENV_OVERRIDES = {
    "eps": "TWODISK_EPS",
    "r1": "TWODISK_R1",
    "r2": "TWODISK_R2",
    "k1": "TWODISK_K1",
    "k2": "TWODISK_K2",
}


class RegionTag(str, Enum):
    MATRIX = "Matrix"
    INCLUSION1 = "Inclusion1"
    INCLUSION2 = "Inclusion2"

    @property
    def index(self) -> int:
        """Region index j used by the potentials (0 = matrix)."""
        return {RegionTag.MATRIX: 0, RegionTag.INCLUSION1: 1, RegionTag.INCLUSION2: 2}[self]

    @classmethod
    def from_index(cls, j: int) -> "RegionTag":
        return (cls.MATRIX, cls.INCLUSION1, cls.INCLUSION2)[j]


class Region(BaseModel):
    """Classification result: a tag plus the interface the point sits on, if any."""

    model_config = ConfigDict(frozen=True)

    tag: RegionTag
    on_boundary: Optional[int] = Field(default=None, description="Disk index (1 or 2) of the interface the point lies on")

    def with_side(self, side: RegionTag) -> "Region":
        return Region(tag=side, on_boundary=self.on_boundary)


class TwoDiskConfig(BaseModel):
    """
    Geometry (eps, r1, r2) and conductivities (k1, k2) of the two-disk problem.

    Immutable and hashable, so it can key caches and travel to worker processes.
    """

    model_config = ConfigDict(frozen=True)

    eps: float = Field(description="Gap width between the disks")
    r1: float = Field(default=1.0, description="Radius of disk 1 (right)")
    r2: float = Field(default=1.0, description="Radius of disk 2 (left)")
    k1: float = Field(default=1.0, description="Conductivity inside disk 1")
    k2: float = Field(default=1.0, description="Conductivity inside disk 2")

    @field_validator("eps")
    def validate_eps(cls, v):
        if not (0.0 < v < 0.5):
            raise ValueError("eps must be between 0 and 1/2 (exclusive)")
        return v

    @field_validator("r1", "r2")
    def validate_radius(cls, v):
        if not (0.0 < v < 10.0):
            raise ValueError("radii must be between 0 and 10 (exclusive)")
        return v

    @field_validator("k1", "k2")
    def validate_conductivity(cls, v):
        if not (0.0 < v < math.inf):
            raise ValueError("conductivities must be positive and finite")
        return v

    @model_validator(mode="after")
    def validate_separation(self):
        # Unit radii: the whole range eps < 1/2 is admissible.
        if (self.r1, self.r2) != (1.0, 1.0) and self.eps > min(self.r1, self.r2) / 10.0:
            raise ValueError("eps must not exceed min(r1, r2)/10 for general radii")
        return self

    @property
    def alpha(self) -> float:
        return contrast_parameter(self.k1)

    @property
    def beta(self) -> float:
        return contrast_parameter(self.k2)

    @property
    def c1(self) -> complex:
        return complex(self.eps / 2.0 + self.r1, 0.0)

    @property
    def c2(self) -> complex:
        return complex(-self.eps / 2.0 - self.r2, 0.0)

    @property
    def alpha_beta(self) -> float:
        return self.alpha * self.beta

    def center(self, which: int) -> complex:
        return self.c1 if which == 1 else self.c2

    def radius(self, which: int) -> float:
        return self.r1 if which == 1 else self.r2

    def conductivity(self, which: int) -> float:
        return (1.0, self.k1, self.k2)[which]

    def contrast_of(self, which: int) -> float:
        return self.alpha if which == 1 else self.beta

    @property
    def length_scale(self) -> float:
        return max(self.r1, self.r2)


def as_point(p: PointLike) -> complex:
    """Convert a complex number or an (x1, x2) pair to a complex point."""
    if isinstance(p, (complex, float, int)):
        return complex(p)
    x1, x2 = p
    return complex(float(x1), float(x2))


def contrast_parameter(k: float) -> float:
    """
    Map a conductivity k > 0 to (k - 1)/(k + 1).

    Raises:
        InvalidConfigurationError: If k is not positive and finite.
    """
    if not (0.0 < k < math.inf):
        raise InvalidConfigurationError(f"conductivity must be positive and finite, got {k}")
    return (k - 1.0) / (k + 1.0)


def conductivity_from_contrast(alpha: float) -> float:
    """Inverse of contrast_parameter."""
    return (1.0 + alpha) / (1.0 - alpha)


def contrast(cfg: TwoDiskConfig) -> Tuple[float, float]:
    """Return the contrast parameters (alpha, beta) of a configuration."""
    return contrast_parameter(cfg.k1), contrast_parameter(cfg.k2)


def default_tolerance(cfg: TwoDiskConfig) -> float:
    return 1e-12 * cfg.length_scale


def classify(p: PointLike, cfg: TwoDiskConfig, tol: Optional[float] = None) -> Region:
    """
    Classify a point into Inclusion1, Inclusion2 or Matrix.

    The tag uses strict inequalities (|p - c_i| < r_i), so interface points are
    tagged Matrix; `on_boundary` names the interface when the point is within
    `tol` of it.
    """
    z = as_point(p)
    if tol is None:
        tol = default_tolerance(cfg)
    if tol < 0 or tol >= cfg.eps / 4.0:
        raise ValueError("tol must be between 0 and eps/4")

    d1 = abs(z - cfg.c1)
    d2 = abs(z - cfg.c2)
    if d1 < cfg.r1:
        tag = RegionTag.INCLUSION1
    elif d2 < cfg.r2:
        tag = RegionTag.INCLUSION2
    else:
        tag = RegionTag.MATRIX

    on_boundary = None
    if abs(d1 - cfg.r1) <= tol:
        on_boundary = 1
    elif abs(d2 - cfg.r2) <= tol:
        on_boundary = 2
    return Region(tag=tag, on_boundary=on_boundary)


def resolve_region(p: PointLike, cfg: TwoDiskConfig, hint: Optional[RegionTag] = None,
                   tol: Optional[float] = None) -> Region:
    """
    Classify p, honoring a caller-supplied side hint for interface points.

    A hint is only accepted for the two sides of the interface the point is on.
    """
    region = classify(p, cfg, tol)
    if hint is None:
        return region
    if region.on_boundary is None:
        if hint != region.tag:
            raise AmbiguousEvaluationError(f"side hint {hint.value} disagrees with region {region.tag.value}")
        return region
    allowed = {RegionTag.MATRIX, RegionTag.from_index(region.on_boundary)}
    if hint not in allowed:
        raise AmbiguousEvaluationError(f"side hint {hint.value} is not adjacent to interface {region.on_boundary}")
    return region.with_side(hint)


def coefficient(p: PointLike, cfg: TwoDiskConfig, hint: Optional[RegionTag] = None) -> float:
    """
    Conductivity a(p): k1 in B1, k2 in B2, 1 in the matrix.

    Raises:
        AmbiguousEvaluationError: If p is on an interface and no hint is given.
    """
    region = classify(p, cfg)
    if region.on_boundary is not None and hint is None:
        raise AmbiguousEvaluationError(f"point {p} lies on interface {region.on_boundary}; pass a side hint")
    if hint is not None:
        region = resolve_region(p, cfg, hint)
    return cfg.conductivity(region.tag.index)


def distance_to_interfaces(p: PointLike, cfg: TwoDiskConfig) -> Tuple[float, int]:
    """Distance from p to the nearest interface circle and that circle's index."""
    z = as_point(p)
    d1 = abs(abs(z - cfg.c1) - cfg.r1)
    d2 = abs(abs(z - cfg.c2) - cfg.r2)
    return (d1, 1) if d1 <= d2 else (d2, 2)


def interface_normal(s: PointLike, which: int, cfg: TwoDiskConfig) -> complex:
    """Outward unit normal of disk `which` at (or radially through) s."""
    v = as_point(s) - cfg.center(which)
    return v / abs(v)


def effective_gap_parameter(cfg: TwoDiskConfig) -> float:
    """tau = sqrt(2 (1/r1 + 1/r2) eps); equals 2 sqrt(eps) for unit radii."""
    return math.sqrt(2.0 * (1.0 / cfg.r1 + 1.0 / cfg.r2) * cfg.eps)


def blowup_factor(cfg: TwoDiskConfig) -> float:
    """Predicted gradient growth 1/(1 - (1 - sqrt(eps))|alpha beta|)."""
    return 1.0 / (1.0 - (1.0 - math.sqrt(cfg.eps)) * abs(cfg.alpha_beta))


def general_blowup_factor(cfg: TwoDiskConfig) -> float:
    """Radius-aware growth 1/(1 - (1 - tau/2)|alpha beta|); matches blowup_factor for unit radii."""
    return 1.0 / (1.0 - (1.0 - effective_gap_parameter(cfg) / 2.0) * abs(cfg.alpha_beta))


def reflected(cfg: TwoDiskConfig) -> TwoDiskConfig:
    """Mirror configuration: disks swapped, x1 negated."""
    return TwoDiskConfig(eps=cfg.eps, r1=cfg.r2, r2=cfg.r1, k1=cfg.k2, k2=cfg.k1)


def _parse_config_file(path: Path) -> Dict[str, Any]:
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise InvalidConfigurationError(f"Failed to parse JSON config {path}: {str(e)}")
        if not isinstance(data, dict):
            raise InvalidConfigurationError(f"config {path} must hold a single JSON object")
        return data
    return {k: v for k, v in dotenv_values(path).items() if v is not None}


CONFIG_KEYS = {"eps", "r1", "r2", "k1", "k2"}
SOURCE_KEYS = {"source", "source_center_x", "source_center_y", "source_radius", "source_strength"}
POLICY_KEYS = {"tol", "max_terms"}


def load_settings(path: Optional[Union[str, Path]] = None, use_env: bool = True) -> Dict[str, Any]:
    """
    Read raw settings from a config file and the environment.

    Environment variables (TWODISK_*) override file values. Returns a flat
    dict of validated-later values; unknown keys are rejected.
    """
    values: Dict[str, Any] = {}
    if path is not None:
        values.update(_parse_config_file(Path(path)))
    unknown = set(values) - CONFIG_KEYS - SOURCE_KEYS - POLICY_KEYS
    if unknown:
        raise InvalidConfigurationError(f"unknown config keys: {sorted(unknown)}")

    if use_env:
        load_dotenv()
        for key, env_name in ENV_OVERRIDES.items():
            env_value = os.getenv(env_name)
            if env_value is not None:
                values[key] = env_value
        for key in ("tol", "max_terms"):
            env_value = os.getenv(f"TWODISK_{key.upper()}")
            if env_value is not None:
                values[key] = env_value
    return values


def config_from_settings(values: Dict[str, Any], **overrides: Any) -> TwoDiskConfig:
    """Build a TwoDiskConfig from raw settings; explicit overrides win."""
    merged = {k: values[k] for k in CONFIG_KEYS if k in values}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = TwoDiskConfig(**merged)
    except ValidationError as e:
        raise InvalidConfigurationError(f"Invalid two-disk configuration: {str(e)}")
    logger.debug(f"Loaded configuration {cfg}")
    return cfg


def load_config(path: Optional[Union[str, Path]] = None, use_env: bool = True, **overrides: Any) -> TwoDiskConfig:
    """
    Load a TwoDiskConfig from a key=value or JSON file.

    Args:
        path: Config file; missing radii default to 1.
        use_env: Apply TWODISK_* environment overrides.
        **overrides: Values that take precedence over file and environment.

    Returns:
        The validated configuration.

    Raises:
        InvalidConfigurationError: On unknown keys or invalid values.

    Examples:
        eps = 0.1
        k1 = 5
        k2 = 5
    """
    return config_from_settings(load_settings(path, use_env), **overrides)
