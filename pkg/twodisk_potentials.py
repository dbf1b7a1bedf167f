"""
Log-kernel potentials of a piecewise source and the representation-formula
solution of D_i(a D_i u) = D_i f_i + f3.

For a source component on region j,

    h_j(z) = int_{B_j} D_{y_i} log|z - y| f_i(y) dy
    g_j(z) = int_{B_j} log|z - y| f3(y) dy

and the solution is assembled from the Green's-function branches of the
greens module with log|F(x) - y| replaced by g_j(F(x)) - h_j(F(x)). The
returned field is the representation formula divided by 2*pi, so it solves
the equation with the true Laplacian.

Quadrature: a Gauss-Legendre (radius) x trapezoid (angle) rule on disks;
near or inside the integration disk a polar rule centered at the evaluation
point; an adaptive quadtree for matrix-region sources that touch an
inclusion. Gradients of h_j are integrated by parts so only weakly singular
kernels appear.
"""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import integrate

from twodisk_errors import (
    AmbiguousEvaluationError,
    InvalidConfigurationError,
    QuadratureError,
    TooCloseToInterfaceError,
    TruncationError,
)
from twodisk_geometry import (
    PointLike,
    Region,
    RegionTag,
    TwoDiskConfig,
    as_point,
    classify,
    distance_to_interfaces,
    effective_gap_parameter,
    resolve_region,
)
from twodisk_greens import (
    CenterTerm,
    ConstantTerm,
    HeadTerm,
    ImageTerm,
    SeriesPolicy,
    family_limit,
    family_map,
    green_expansion,
    sum_reflection_series,
    use_acceleration,
)
from twodisk_moebius import inversion, pullback_gradient

logger = logging.getLogger(__name__)

ComplexField = Callable[[np.ndarray], np.ndarray]


class QuadratureSettings(BaseModel):
    """Quadrature resolution for the log-kernel potentials."""

    model_config = ConfigDict(frozen=True)

    n_r: int = Field(default=32, description="Gauss-Legendre points in radius (disk rule)")
    n_theta: int = Field(default=64, description="Trapezoid points in angle (disk rule)")
    near_n_r: int = Field(default=16, description="Radial points of the polar near-field rule")
    near_n_theta: int = Field(default=32, description="Angular points of the polar near-field rule")
    cutoff_factor: float = Field(default=2.0, description="Near-field cutoff in units of the largest cell size")
    boundary_n: int = Field(default=256, description="Trapezoid points on an interface circle")
    cell_order: int = Field(default=6, description="Gauss points per direction in a quadtree cell")
    max_depth: int = Field(default=7, description="Maximum quadtree refinement depth")
    adaptive_tol: float = Field(default=1e-6, description="Tolerance of the quadtree level-difference estimate")
    tol: float = Field(default=1e-6, description="Refined-rule difference above which a quadrature warning is logged")
    fd_step: float = Field(default=1e-2, description="Upper bound on the finite-difference step (length units)")
    cache_size: int = Field(default=100_000, description="LRU entries for potentials at mapped points")

    @field_validator("n_r", "n_theta", "near_n_r", "near_n_theta", "boundary_n", "cell_order")
    def validate_counts(cls, v):
        if v < 2:
            raise ValueError("quadrature point counts must be at least 2")
        return v

    @field_validator("max_depth")
    def validate_depth(cls, v):
        if not (1 <= v <= 12):
            raise ValueError("max_depth must be between 1 and 12")
        return v

    def refined(self, factor: int = 2) -> "QuadratureSettings":
        return self.model_copy(update={
            "n_r": self.n_r * factor, "n_theta": self.n_theta * factor,
            "near_n_r": self.near_n_r * factor, "near_n_theta": self.near_n_theta * factor,
            "cell_order": self.cell_order + 2 * (factor - 1),
        })


# ---------------------------------------------------------------------------
# Sources
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RadialBump:
    """mass-normalized c * exp(-1/(1 - |z - center|^2 / radius^2)) on the disk, 0 outside."""

    center: complex
    radius: float
    mass: float = 1.0

    @property
    def amplitude(self) -> float:
        return self.mass / _bump_integral(self.radius)

    def _s(self, z: np.ndarray) -> np.ndarray:
        return np.abs(np.asarray(z) - self.center) ** 2 / self.radius ** 2

    def __call__(self, z: np.ndarray) -> np.ndarray:
        s = self._s(z)
        out = np.zeros(np.shape(s))
        inside = s < 1.0
        out[inside] = self.amplitude * np.exp(-1.0 / (1.0 - s[inside]))
        return out

    def gradient(self, z: np.ndarray) -> np.ndarray:
        """d/dx1 + i d/dx2 of the bump."""
        z = np.asarray(z, dtype=complex)
        s = self._s(z)
        out = np.zeros(np.shape(s), dtype=complex)
        inside = s < 1.0
        value = self.amplitude * np.exp(-1.0 / (1.0 - s[inside]))
        out[inside] = -value / (1.0 - s[inside]) ** 2 * 2.0 * (z[inside] - self.center) / self.radius ** 2
        return out


@lru_cache(maxsize=64)
def _bump_integral(radius: float) -> float:
    value, _ = integrate.quad(lambda r: r * math.exp(-1.0 / (1.0 - (r / radius) ** 2)) if r < radius else 0.0,
                              0.0, radius, epsabs=1e-15, epsrel=1e-13, limit=200)
    return 2.0 * math.pi * value


@dataclass(frozen=True)
class BumpField:
    """Vector field direction * bump (direction as a complex number)."""

    bump: RadialBump
    direction: complex = 1.0 + 0j

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.direction * self.bump(z)

    def gradient(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        g = self.bump.gradient(z)
        return self.direction * g.real, self.direction * g.imag


@dataclass(frozen=True)
class ConstantField:
    """Constant vector field on a closed disk, zero outside."""

    value: complex
    center: complex
    radius: float

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        return np.where(np.abs(z - self.center) <= self.radius * (1.0 + 1e-9), self.value, 0j)

    def gradient(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        zeros = np.zeros(np.shape(z), dtype=complex)
        return zeros, zeros


@dataclass(frozen=True)
class ConstantScalar:
    value: float
    center: complex
    radius: float

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        return np.where(np.abs(z - self.center) <= self.radius * (1.0 + 1e-9), self.value, 0.0)


@dataclass(frozen=True)
class SourceComponent:
    """
    Source data on one region: vector field f = f1 + i f2 and scalar f3.

    `field_gradient` returns (df/dx1, df/dx2); central differences are used
    when it is missing.
    """

    center: complex
    radius: float
    field: Optional[ComplexField] = None
    scalar: Optional[Callable[[np.ndarray], np.ndarray]] = None
    field_gradient: Optional[Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]] = None

    def field_values(self, z: np.ndarray) -> np.ndarray:
        if self.field is None:
            return np.zeros(np.shape(z), dtype=complex)
        return np.asarray(self.field(z), dtype=complex)

    def scalar_values(self, z: np.ndarray) -> np.ndarray:
        if self.scalar is None:
            return np.zeros(np.shape(z))
        return np.asarray(self.scalar(z), dtype=float)

    def field_derivatives(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if self.field is None:
            zeros = np.zeros(np.shape(z), dtype=complex)
            return zeros, zeros
        if self.field_gradient is not None:
            d1, d2 = self.field_gradient(z)
            return np.asarray(d1, dtype=complex), np.asarray(d2, dtype=complex)
        step = 1e-6 * max(self.radius, 1e-3)
        d1 = (self.field_values(z + step) - self.field_values(z - step)) / (2.0 * step)
        d2 = (self.field_values(z + 1j * step) - self.field_values(z - 1j * step)) / (2.0 * step)
        return d1, d2


@dataclass(frozen=True)
class PiecewiseSource:
    """Region-wise source data; regions without an entry carry no source."""

    components: Dict[int, SourceComponent] = field(default_factory=dict)

    @property
    def is_zero(self) -> bool:
        return all(c.field is None and c.scalar is None for c in self.components.values())

    @property
    def support(self) -> Tuple[complex, float]:
        """Bounding disk (center, radius) of all component supports."""
        if not self.components:
            return 0j, 0.0
        centers = np.array([c.center for c in self.components.values()])
        mid = complex(np.mean(centers))
        return mid, max(abs(c.center - mid) + c.radius for c in self.components.values())

    def scaled(self, factor: float) -> "PiecewiseSource":
        return PiecewiseSource({j: SourceComponent(
            c.center, c.radius,
            field=_Scaled(c.field, factor) if c.field is not None else None,
            scalar=_Scaled(c.scalar, factor) if c.scalar is not None else None,
            field_gradient=_ScaledPair(c.field_gradient, factor) if c.field_gradient is not None else None,
        ) for j, c in self.components.items()})

    def plus(self, other: "PiecewiseSource") -> "PiecewiseSource":
        if set(self.components) & set(other.components):
            raise ValueError("sources overlap in a region; merge the components explicitly")
        return PiecewiseSource({**self.components, **other.components})


@dataclass(frozen=True)
class _Scaled:
    inner: Callable
    factor: float

    def __call__(self, z):
        return self.factor * self.inner(z)


@dataclass(frozen=True)
class _ScaledPair:
    inner: Callable
    factor: float

    def __call__(self, z):
        a, b = self.inner(z)
        return self.factor * a, self.factor * b


def _require_inside(center: complex, radius: float, cfg: TwoDiskConfig, j: int) -> None:
    if j == 0:
        for i in (1, 2):
            if abs(center - cfg.center(i)) < radius + cfg.radius(i):
                raise InvalidConfigurationError(f"source disk at {center} (radius {radius}) meets inclusion {i}")
    elif abs(center - cfg.center(j)) + radius > cfg.radius(j):
        raise InvalidConfigurationError(f"source disk at {center} (radius {radius}) leaves inclusion {j}")


def lower_bound_source(cfg: TwoDiskConfig, center: Optional[PointLike] = None, radius: float = 0.1) -> PiecewiseSource:
    """
    Unit-integral bump f1 centered at (-3, 0) (radius 1/10), f2 = f3 = 0.

    The bump is even in x2; with the gap on the right of it, D1 of the
    negated h_0 is negative on the gap segment.
    """
    p = as_point((-3.0, 0.0) if center is None else center)
    _require_inside(p, radius, cfg, 0)
    bump = BumpField(RadialBump(p, radius, 1.0))
    return PiecewiseSource({0: SourceComponent(p, radius, field=bump, field_gradient=bump.gradient)})


def constant_disk1_source(cfg: TwoDiskConfig, strength: float = 1.0) -> PiecewiseSource:
    """Constant field strength * e1 on the whole of disk 1."""
    f = ConstantField(complex(strength), cfg.c1, cfg.r1)
    return PiecewiseSource({1: SourceComponent(cfg.c1, cfg.r1, field=f, field_gradient=f.gradient)})


def radial_bump_source(cfg: TwoDiskConfig, center: PointLike = (0.0, 2.0), radius: float = 0.3,
                       mass: float = 1.0) -> PiecewiseSource:
    """Scalar volume term f3: a radial bump of the given mass."""
    p = as_point(center)
    j = classify(p, cfg).tag.index
    _require_inside(p, radius, cfg, j)
    return PiecewiseSource({j: SourceComponent(p, radius, scalar=RadialBump(p, radius, mass))})


class SourceSpec(BaseModel):
    """Named source preset plus parameters; picklable, rebuilt per worker."""

    model_config = ConfigDict(frozen=True)

    preset: Literal["lower_bound", "constant_disk1", "radial_bump", "zero"] = Field(default="lower_bound")
    center_x: Optional[float] = Field(default=None, description="Bump center x1 (presets with a bump)")
    center_y: Optional[float] = Field(default=None, description="Bump center x2")
    radius: Optional[float] = Field(default=None, description="Bump radius")
    strength: float = Field(default=1.0, description="Overall scale of the source")

    @property
    def center(self) -> Optional[complex]:
        if self.center_x is None and self.center_y is None:
            return None
        return complex(self.center_x or 0.0, self.center_y or 0.0)

    def build(self, cfg: TwoDiskConfig) -> PiecewiseSource:
        if self.preset == "zero":
            return PiecewiseSource()
        if self.preset == "lower_bound":
            src = lower_bound_source(cfg, self.center, self.radius or 0.1)
        elif self.preset == "constant_disk1":
            return constant_disk1_source(cfg, self.strength)
        else:
            src = radial_bump_source(cfg, self.center if self.center is not None else (0.0, 2.0),
                                     self.radius or 0.3)
        return src if self.strength == 1.0 else src.scaled(self.strength)

    @classmethod
    def from_settings(cls, values: Dict[str, object]) -> "SourceSpec":
        return cls(
            preset=values.get("source", "lower_bound"),
            center_x=values.get("source_center_x"),
            center_y=values.get("source_center_y"),
            radius=values.get("source_radius"),
            strength=values.get("source_strength", 1.0),
        )


def check_support(src: PiecewiseSource, n: int = 64) -> bool:
    """Sample rings outside each declared support; every component must vanish there."""
    theta = 2.0 * np.pi * np.arange(n) / n
    for comp in src.components.values():
        for factor in (1.01, 1.2, 2.0):
            ring = comp.center + factor * comp.radius * np.exp(1j * theta)
            if np.any(comp.field_values(ring) != 0) or np.any(comp.scalar_values(ring) != 0):
                return False
    return True


# ---------------------------------------------------------------------------
# Quadrature rules
# ---------------------------------------------------------------------------

@dataclass
class QuadratureGrid:
    """Nodes and weights of one region's integration domain."""

    nodes: np.ndarray
    weights: np.ndarray
    disk: Optional[Tuple[complex, float]] = None  # polar-capable domain
    support: Optional[Tuple[complex, float]] = None  # support disk of a holed (quadtree) domain
    holes: Tuple[Tuple[complex, float], ...] = ()
    cutoff: float = 0.0
    boundary_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))
    boundary_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    boundary_normals: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))
    coarse: Optional["QuadratureGrid"] = None  # quadtree one level shallower

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weights))


def disk_rule(center: complex, radius: float, n_r: int, n_theta: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre in r (with the r dr Jacobian) times trapezoid in angle."""
    x, w = np.polynomial.legendre.leggauss(n_r)
    r = 0.5 * radius * (x + 1.0)
    wr = 0.5 * radius * w * r
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    nodes = center + np.outer(r, np.exp(1j * theta)).ravel()
    weights = np.repeat(wr, n_theta) * (2.0 * np.pi / n_theta)
    return nodes, weights


def circle_rule(center: complex, radius: float, n: int, outward: float = 1.0):
    theta = 2.0 * np.pi * np.arange(n) / n
    normals = outward * np.exp(1j * theta)
    return center + radius * np.exp(1j * theta), np.full(n, 2.0 * np.pi * radius / n), normals


def polar_rule(z: complex, center: complex, radius: float, n_r: int, n_theta: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Polar rule centered at z covering the disk (center, radius).

    Inside the disk r = r_out(theta) s^2 with s Gauss-Legendre on [0, 1];
    outside, the visible angular window is swept with theta = theta0 + delta sin(phi).
    """
    d = z - center
    xs, ws = np.polynomial.legendre.leggauss(n_r)
    s = 0.5 * (xs + 1.0)
    wsg = 0.5 * ws
    if abs(d) < radius:
        theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
        e = np.exp(1j * theta)
        b = -(d * np.conj(e)).real
        r_out = b + np.sqrt(b * b + radius * radius - abs(d) ** 2)
        r = np.outer(r_out, s * s)
        jac = np.outer(r_out, 2.0 * s) * r
        nodes = z + r * e[:, None]
        weights = jac * wsg[None, :] * (2.0 * np.pi / n_theta)
        return nodes.ravel(), weights.ravel()

    theta0 = np.angle(-d)
    delta = math.asin(min(1.0, radius / abs(d)))
    xp, wp = np.polynomial.legendre.leggauss(n_theta)
    phi = 0.5 * math.pi * xp
    theta = theta0 + delta * np.sin(phi)
    dtheta = delta * np.cos(phi) * 0.5 * math.pi * wp
    rel = theta - theta0
    b = abs(d) * np.cos(rel)
    disc = np.sqrt(np.maximum(radius * radius - (abs(d) * np.sin(rel)) ** 2, 0.0))
    r_in, r_out = b - disc, b + disc
    r = r_in[:, None] + np.outer(r_out - r_in, s)
    nodes = z + r * np.exp(1j * theta)[:, None]
    weights = (dtheta * (r_out - r_in))[:, None] * wsg[None, :] * r
    return nodes.ravel(), weights.ravel()


def _ray_interval(z: complex, e: complex, center: complex, radius: float) -> Optional[Tuple[float, float]]:
    """Parameters t >= 0 with |z + t e - center| < radius, or None."""
    d = z - center
    b = (d * np.conj(e)).real
    disc = b * b - (abs(d) ** 2 - radius * radius)
    if disc <= 0.0:
        return None
    root = math.sqrt(disc)
    lo, hi = -b - root, -b + root
    if hi <= 0.0:
        return None
    return max(lo, 0.0), hi


def _subtract(segments: List[Tuple[float, float]], hole: Tuple[float, float]) -> List[Tuple[float, float]]:
    out = []
    for a, b in segments:
        if hole[1] <= a or hole[0] >= b:
            out.append((a, b))
            continue
        if hole[0] > a:
            out.append((a, hole[0]))
        if hole[1] < b:
            out.append((hole[1], b))
    return out


def _radial_nodes(a: float, b: float, s: np.ndarray, ws: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Radius nodes on [a, b] and weights including the polar Jacobian r."""
    if a == 0.0:
        r = b * s * s
        return r, b * 2.0 * s * ws * r
    if b / a > 4.0:
        r = a * (b / a) ** s
        return r, r * math.log(b / a) * ws * r
    r = a + (b - a) * s
    return r, (b - a) * ws * r


def region_polar_rule(z: complex, center: complex, radius: float, holes: Sequence[Tuple[complex, float]],
                      n_r: int, n_theta: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Polar rule centered at z over the disk (center, radius) minus the hole disks.

    The angular range is split at every circle's tangent directions seen from z
    and each piece gets a sine-graded Gauss rule, so the square-root behaviour
    of the ray lengths at tangency is integrated accurately. Along each ray the
    matrix segments are integrated separately.
    """
    xs, ws = np.polynomial.legendre.leggauss(n_r)
    s, ws = 0.5 * (xs + 1.0), 0.5 * ws
    breaks = []
    for c, r in [(center, radius), *holes]:
        d = abs(z - c)
        if d > r:
            theta0, delta = np.angle(c - z), math.asin(r / d)
            breaks.extend([(theta0 - delta) % (2.0 * math.pi), (theta0 + delta) % (2.0 * math.pi)])
    if breaks:
        breaks = sorted(breaks)
        pieces = list(zip(breaks, breaks[1:] + [breaks[0] + 2.0 * math.pi]))
        xp, wp = np.polynomial.legendre.leggauss(n_theta)
        thetas, dthetas = [], []
        for lo, hi in pieces:
            if hi - lo <= 0.0:
                continue
            mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
            thetas.append(mid + half * np.sin(0.5 * math.pi * xp))
            dthetas.append(half * np.cos(0.5 * math.pi * xp) * 0.5 * math.pi * wp)
        theta, dtheta = np.concatenate(thetas), np.concatenate(dthetas)
    else:
        theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
        dtheta = np.full(n_theta, 2.0 * np.pi / n_theta)

    nodes, weights = [], []
    for t, dt in zip(theta, dtheta):
        e = complex(math.cos(t), math.sin(t))
        support = _ray_interval(z, e, center, radius)
        if support is None:
            continue
        segments = [support]
        for c, r in holes:
            hole = _ray_interval(z, e, c, r)
            if hole is not None:
                segments = _subtract(segments, hole)
        for a, b in segments:
            if b - a <= 0.0:
                continue
            r, w = _radial_nodes(a, b, s, ws)
            nodes.append(z + r * e)
            weights.append(w * dt)
    if not nodes:
        return np.zeros(0, dtype=complex), np.zeros(0)
    return np.concatenate(nodes), np.concatenate(weights)


def _quadtree_rule(center: complex, radius: float, cfg: TwoDiskConfig, order: int,
                   max_depth: int) -> Tuple[np.ndarray, np.ndarray]:
    """Adaptive quadtree over the support disk minus both inclusions."""
    gx, gw = np.polynomial.legendre.leggauss(order)
    disks = [(cfg.c1, cfg.r1), (cfg.c2, cfg.r2)]
    nodes, weights = [], []
    cells = [(center, 2.0 * radius)]
    for depth in range(max_depth + 1):
        refined = []
        for cc, size in cells:
            half_diag = size / math.sqrt(2.0)
            if abs(cc - center) - half_diag >= radius:
                continue
            if any(abs(cc - c) + half_diag <= r for c, r in disks):
                continue
            clean = abs(cc - center) + half_diag <= radius and all(abs(cc - c) - half_diag >= r for c, r in disks)
            if not clean and depth < max_depth:
                q = size / 4.0
                refined.extend((cc + complex(sx * q, sy * q), size / 2.0) for sx in (-1, 1) for sy in (-1, 1))
                continue
            pts = cc + 0.5 * size * (gx[:, None] + 1j * gx[None, :])
            wts = (0.5 * size) ** 2 * np.outer(gw, gw)
            pts, wts = pts.ravel(), wts.ravel()
            if not clean:
                keep = np.abs(pts - center) < radius
                for c, r in disks:
                    keep &= np.abs(pts - c) >= r
                pts, wts = pts[keep], wts[keep]
            nodes.append(pts)
            weights.append(wts)
        cells = refined
        if not cells:
            break
    if not nodes:
        return np.zeros(0, dtype=complex), np.zeros(0)
    return np.concatenate(nodes), np.concatenate(weights)


def build_grid(j: int, comp: SourceComponent, cfg: TwoDiskConfig, quad: QuadratureSettings) -> QuadratureGrid:
    """Quadrature grid for the component on region j."""
    c, R = comp.center, comp.radius
    if j in (1, 2):
        cj, rj = cfg.center(j), cfg.radius(j)
        if abs(c - cj) + R < rj:
            return _disk_grid(c, R, quad)
        grid = _disk_grid(cj, rj, quad)
        grid.boundary_nodes, grid.boundary_weights, grid.boundary_normals = circle_rule(cj, rj, quad.boundary_n)
        return grid

    if all(abs(c - cfg.center(i)) >= R + cfg.radius(i) for i in (1, 2)):
        return _disk_grid(c, R, quad)

    logger.debug(f"matrix-region source at {c} meets an inclusion; using the adaptive quadtree")
    nodes, weights = _quadtree_rule(c, R, cfg, quad.cell_order, quad.max_depth)
    coarse_nodes, coarse_weights = _quadtree_rule(c, R, cfg, quad.cell_order, quad.max_depth - 1)
    bnodes, bweights, bnormals, holes = [], [], [], []
    for i in (1, 2):
        if abs(c - cfg.center(i)) < R + cfg.radius(i):
            n_, w_, nu_ = circle_rule(cfg.center(i), cfg.radius(i), quad.boundary_n, outward=-1.0)
            bnodes.append(n_)
            bweights.append(w_)
            bnormals.append(nu_)
            holes.append((cfg.center(i), cfg.radius(i)))
    grid = QuadratureGrid(nodes, weights, support=(c, R), holes=tuple(holes), cutoff=quad.cutoff_factor * R / 4.0,
                          boundary_nodes=np.concatenate(bnodes), boundary_weights=np.concatenate(bweights),
                          boundary_normals=np.concatenate(bnormals))
    grid.coarse = QuadratureGrid(coarse_nodes, coarse_weights, boundary_nodes=grid.boundary_nodes,
                                 boundary_weights=grid.boundary_weights, boundary_normals=grid.boundary_normals)
    return grid


def _disk_grid(center: complex, radius: float, quad: QuadratureSettings) -> QuadratureGrid:
    nodes, weights = disk_rule(center, radius, quad.n_r, quad.n_theta)
    cell = max(2.0 * math.pi * radius / quad.n_theta, 0.5 * math.pi * radius / quad.n_r)
    return QuadratureGrid(nodes, weights, disk=(center, radius), cutoff=quad.cutoff_factor * cell)


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------

@dataclass
class PotentialValues:
    """h, grad h, g, grad g at a batch of points (gradients as g1 + i g2)."""

    h: np.ndarray
    dh: np.ndarray
    g: np.ndarray
    dg: np.ndarray


def _kernel_sums(z: np.ndarray, nodes: np.ndarray, weights: np.ndarray, comp: SourceComponent,
                 cache: Optional[Tuple] = None) -> PotentialValues:
    if cache is None:
        f = comp.field_values(nodes)
        d1, d2 = comp.field_derivatives(nodes)
        f3 = comp.scalar_values(nodes)
    else:
        f, d1, d2, f3 = cache
    diff = nodes[None, :] - z[:, None]
    r2 = np.abs(diff) ** 2
    wr = weights[None, :] / r2
    h = np.sum(wr * (diff * np.conj(f)[None, :]).real, axis=1)
    dh = np.sum(wr * ((diff * np.conj(d1)[None, :]).real + 1j * (diff * np.conj(d2)[None, :]).real), axis=1)
    g = np.sum(weights[None, :] * 0.5 * np.log(r2) * f3[None, :], axis=1)
    dg = np.sum(-wr * diff * f3[None, :], axis=1)
    return PotentialValues(h, dh, g, dg)


def _boundary_correction(z: np.ndarray, grid: QuadratureGrid, comp: SourceComponent) -> np.ndarray:
    """-oint D_{y_i} log|z - y| f_i nu ds, the boundary term of the integrated-by-parts grad h."""
    if grid.boundary_nodes.size == 0 or comp.field is None:
        return np.zeros(z.shape, dtype=complex)
    f = comp.field_values(grid.boundary_nodes)
    diff = grid.boundary_nodes[None, :] - z[:, None]
    kern = (diff * np.conj(f)[None, :]).real / np.abs(diff) ** 2
    return -np.sum(kern * (grid.boundary_weights * grid.boundary_normals)[None, :], axis=1)


class PotentialEvaluator:
    """
    Potentials of one source, with an LRU cache keyed by (region, point).

    Not shared between threads; create one per worker.
    """

    def __init__(self, cfg: TwoDiskConfig, src: PiecewiseSource, quad: Optional[QuadratureSettings] = None):
        self.cfg = cfg
        self.src = src
        self.quad = quad or QuadratureSettings()
        self.grids: Dict[int, QuadratureGrid] = {}
        self._node_data: Dict[int, Tuple] = {}
        self._cache: "OrderedDict[Tuple[int, complex], Tuple[float, complex, float, complex]]" = OrderedDict()
        self.max_quad_error = 0.0
        self._quad_errors: Dict[int, float] = {}
        for j, comp in src.components.items():
            if comp.field is None and comp.scalar is None:
                continue
            grid = build_grid(j, comp, cfg, self.quad)
            self.grids[j] = grid
            d1, d2 = comp.field_derivatives(grid.nodes)
            self._node_data[j] = (comp.field_values(grid.nodes), d1, d2, comp.scalar_values(grid.nodes))

    @property
    def regions(self):
        return sorted(self.grids)

    def mass(self, j: int) -> float:
        """int f3 over region j."""
        if j not in self.grids:
            return 0.0
        return float(np.sum(self.grids[j].weights * self._node_data[j][3]))

    def _compute(self, j: int, z: np.ndarray) -> PotentialValues:
        grid, comp = self.grids[j], self.src.components[j]
        out = PotentialValues(np.zeros(z.shape), np.zeros(z.shape, dtype=complex),
                              np.zeros(z.shape), np.zeros(z.shape, dtype=complex))
        near = np.zeros(z.shape, dtype=bool)
        domain = grid.disk or grid.support
        if domain is not None:
            near = np.abs(z - domain[0]) - domain[1] < grid.cutoff
        far_idx = np.nonzero(~near)[0]
        for chunk in np.array_split(far_idx, max(1, far_idx.size // 256)) if far_idx.size else []:
            vals = _kernel_sums(z[chunk], grid.nodes, grid.weights, comp, self._node_data[j])
            out.h[chunk], out.dh[chunk], out.g[chunk], out.dg[chunk] = vals.h, vals.dh, vals.g, vals.dg
        for i in np.nonzero(near)[0]:
            if grid.disk is not None:
                nodes, weights = polar_rule(z[i], grid.disk[0], grid.disk[1],
                                            self.quad.near_n_r, self.quad.near_n_theta)
            else:
                nodes, weights = region_polar_rule(z[i], grid.support[0], grid.support[1], grid.holes,
                                                   self.quad.near_n_r, self.quad.near_n_theta)
            vals = _kernel_sums(z[i:i + 1], nodes, weights, comp)
            out.h[i], out.dh[i], out.g[i], out.dg[i] = vals.h[0], vals.dh[0], vals.g[0], vals.dg[0]
        out.dh = out.dh + _boundary_correction(z, grid, comp)

        if grid.coarse is not None and far_idx.size:
            zf = z[far_idx]
            coarse = _kernel_sums(zf, grid.coarse.nodes, grid.coarse.weights, comp)
            err = float(np.max(np.abs(coarse.h - out.h[far_idx]) + np.abs(coarse.g - out.g[far_idx])))
            self.max_quad_error = max(self.max_quad_error, err)
            if err > self.quad.adaptive_tol:
                raise QuadratureError(f"quadtree refinement not converged (estimate {err:.3e})",
                                      partial_value=out.h - out.g, error_estimate=err)
        return out

    def evaluate(self, j: int, points) -> PotentialValues:
        """Potentials of region j at the given points, served from the cache when possible."""
        z = np.atleast_1d(np.asarray(points, dtype=complex))
        if j not in self.grids:
            zeros = np.zeros(z.shape)
            return PotentialValues(zeros, zeros.astype(complex), zeros.copy(), zeros.astype(complex))
        missing = [i for i, p in enumerate(z) if (j, complex(p)) not in self._cache]
        if missing:
            computed = self._compute(j, z[missing])
            for n, i in enumerate(missing):
                self._cache[(j, complex(z[i]))] = (computed.h[n], computed.dh[n], computed.g[n], computed.dg[n])
                if len(self._cache) > self.quad.cache_size:
                    self._cache.popitem(last=False)
        rows = []
        for p in z:
            key = (j, complex(p))
            self._cache.move_to_end(key)
            rows.append(self._cache[key])
        h, dh, g, dg = (np.array(col) for col in zip(*rows))
        return PotentialValues(h, dh, g, dg)

    def combined(self, j: int, point: complex) -> Tuple[float, complex]:
        """(g_j - h_j, grad(g_j - h_j)) at one point."""
        vals = self.evaluate(j, [point])
        return float(vals.g[0] - vals.h[0]), complex(vals.dg[0] - vals.dh[0])

    def quadrature_error(self, j: int) -> float:
        """
        Largest difference of (h, grad h, g, grad g) against a 2x refined rule
        at the support center and two points outside it. Computed once per region.
        """
        if j not in self.grids:
            return 0.0
        if j in self._quad_errors:
            return max(self._quad_errors[j], self.max_quad_error)
        comp = self.src.components[j]
        points = [comp.center, comp.center + 1.5 * comp.radius, comp.center + 3.0 * comp.radius]
        fine = PotentialEvaluator(self.cfg, PiecewiseSource({j: comp}), self.quad.refined())
        try:
            a, b = self.evaluate(j, points), fine.evaluate(j, points)
            err = float(np.max(np.abs(a.h - b.h) + np.abs(a.dh - b.dh) + np.abs(a.g - b.g) + np.abs(a.dg - b.dg)))
        except QuadratureError as e:
            err = float("inf") if e.error_estimate is None else e.error_estimate
        err = max(err, self.max_quad_error)
        if err > self.quad.tol:
            logger.warning(f"quadrature on region {j} differs from the refined rule by {err:.3e} "
                           f"(tol {self.quad.tol:.1e}); increase n_r / n_theta")
        self._quad_errors[j] = err
        return err


def potential_h(j: int, x: PointLike, src: PiecewiseSource, cfg: TwoDiskConfig,
                quad: Optional[QuadratureSettings] = None) -> float:
    """h_j(x) = int_{B_j} D_{y_i} log|x - y| f_i(y) dy."""
    return float(PotentialEvaluator(cfg, src, quad).evaluate(j, [as_point(x)]).h[0])


def potential_g(j: int, x: PointLike, src: PiecewiseSource, cfg: TwoDiskConfig,
                quad: Optional[QuadratureSettings] = None) -> float:
    """g_j(x) = int_{B_j} log|x - y| f3(y) dy."""
    return float(PotentialEvaluator(cfg, src, quad).evaluate(j, [as_point(x)]).g[0])


def potential_h_gradient(j: int, x: PointLike, src: PiecewiseSource, cfg: TwoDiskConfig,
                         quad: Optional[QuadratureSettings] = None) -> complex:
    return complex(PotentialEvaluator(cfg, src, quad).evaluate(j, [as_point(x)]).dh[0])


def potential_g_gradient(j: int, x: PointLike, src: PiecewiseSource, cfg: TwoDiskConfig,
                         quad: Optional[QuadratureSettings] = None) -> complex:
    return complex(PotentialEvaluator(cfg, src, quad).evaluate(j, [as_point(x)]).dg[0])


# ---------------------------------------------------------------------------
# Representation formula
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    value: Union[float, complex, np.ndarray]  # gradients as g1 + i g2; tensors as arrays
    region: Region
    terms_used: int = 0
    tail_estimate: float = 0.0
    quad_error: float = 0.0

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.value.real, self.value.imag])


def _term_contribution(term: HeadTerm, l: int, x: complex, j: int, ev: PotentialEvaluator,
                       gradient: bool) -> Union[float, complex]:
    cfg = ev.cfg
    if isinstance(term, ConstantTerm):
        return 0j if gradient else term.coef * ev.mass(j)
    if isinstance(term, CenterTerm):
        c, r = cfg.center(term.disk), cfg.radius(term.disk)
        phi = inversion(term.disk, cfg)
        mass = ev.mass(j)
        if x == c:
            if gradient:
                return _term_contribution(term, l, x + 1e-7 * r, j, ev, True)
            return term.coef * mass * 2.0 * math.log(r)
        q, dq = ev.combined(j, phi(x))
        if gradient:
            return term.coef * (complex(pullback_gradient(phi, x, dq)) + mass * np.conj(1.0 / (x - c)))
        return term.coef * (q + mass * math.log(abs(x - c)))

    T = family_map(cfg, term.family, l)
    fx = T(x)
    if term.target is None:
        q, dq = ev.combined(j, fx)
        return term.coef * complex(pullback_gradient(T, x, dq)) if gradient else term.coef * q
    mass = ev.mass(j)
    if mass == 0.0:
        return 0j if gradient else 0.0
    if gradient:
        return term.coef * mass * complex(pullback_gradient(T, x, np.conj(1.0 / (fx - term.target))))
    return term.coef * mass * math.log(abs(fx - term.target))


def _representation(x: complex, region: Region, ev: PotentialEvaluator, policy: SeriesPolicy,
                    gradient: bool) -> Tuple[Union[float, complex], int, float]:
    cfg = ev.cfg
    total: Union[float, complex] = 0j if gradient else 0.0
    terms, tail = 0, 0.0
    tau = effective_gap_parameter(cfg)
    for j in ev.regions:
        expansion = green_expansion(region.tag, RegionTag.from_index(j), cfg)
        head = sum((_term_contribution(t, t.l if isinstance(t, ImageTerm) else 0, x, j, ev, gradient)
                    for t in expansion.head), 0j if gradient else 0.0)
        total = total + head
        if not expansion.series:
            continue

        def group(l: int, expansion=expansion, j=j):
            return sum((_term_contribution(t, l, x, j, ev, gradient) for t in expansion.series),
                       0j if gradient else 0.0)

        limit = None
        if not gradient and use_acceleration(cfg, policy):
            limit = 0.0
            for t in expansion.series:
                p = family_limit(cfg, t.family)
                if t.target is None:
                    limit += t.coef * ev.combined(j, p)[0]
                elif ev.mass(j) != 0.0:
                    limit += t.coef * ev.mass(j) * math.log(abs(p - t.target))
        a_priori = abs(cfg.alpha_beta) / ((1.0 + tau) ** 2 if gradient else 1.0)
        try:
            result = sum_reflection_series(group, expansion.start, expansion.ratio, policy, limit, a_priori)
        except TruncationError as e:
            e.partial_value = (total + e.partial_value) / (2.0 * math.pi)
            raise
        total = total + result.value
        terms = max(terms, result.terms_used)
        tail = max(tail, result.tail_estimate)
    return total, terms, tail


def _quad_error(ev: PotentialEvaluator, cfg: TwoDiskConfig) -> float:
    per_region = max((ev.quadrature_error(j) for j in ev.regions), default=0.0)
    return per_region / (1.0 - abs(cfg.alpha_beta)) / (2.0 * math.pi)


def solve_u(x: PointLike, cfg: TwoDiskConfig, src: PiecewiseSource, policy: Optional[SeriesPolicy] = None,
            quad: Optional[QuadratureSettings] = None, x_hint: Optional[RegionTag] = None,
            evaluator: Optional[PotentialEvaluator] = None) -> EvalReport:
    """
    Solution of D_i(a D_i u) = D_i f_i + f3 at x from the representation formula.

    Args:
        x: Evaluation point.
        cfg: Geometry and conductivities.
        src: Compactly supported piecewise source.
        policy: Series truncation policy.
        quad: Quadrature settings (ignored when an evaluator is passed).
        x_hint: Side of the interface when x lies on one.
        evaluator: Reusable potential evaluator for batches of points.

    Returns:
        EvalReport with the value, x's region, series terms used, the tail estimate and the
        refined-rule quadrature estimate, all in solution units.

    Raises:
        TruncationError: If a series does not converge within max_terms.
        QuadratureError: If adaptive quadrature does not converge.
    """
    policy = policy or SeriesPolicy()
    x = as_point(x)
    region = resolve_region(x, cfg, x_hint)
    ev = evaluator or PotentialEvaluator(cfg, src, quad)
    value, terms, tail = _representation(x, region, ev, policy, gradient=False)
    quad_error = _quad_error(ev, cfg)
    return EvalReport(float(value) / (2.0 * math.pi), region, terms, tail / (2.0 * math.pi), quad_error)


def grad_u(x: PointLike, cfg: TwoDiskConfig, src: PiecewiseSource, policy: Optional[SeriesPolicy] = None,
           quad: Optional[QuadratureSettings] = None, x_hint: Optional[RegionTag] = None,
           evaluator: Optional[PotentialEvaluator] = None) -> EvalReport:
    """Analytic gradient of solve_u (as g1 + i g2)."""
    policy = policy or SeriesPolicy()
    x = as_point(x)
    region = resolve_region(x, cfg, x_hint)
    if region.on_boundary is not None and x_hint is None:
        raise AmbiguousEvaluationError(f"x = {x} lies on interface {region.on_boundary}; pass a side hint")
    ev = evaluator or PotentialEvaluator(cfg, src, quad)
    value, terms, tail = _representation(x, region, ev, policy, gradient=True)
    quad_error = _quad_error(ev, cfg)
    return EvalReport(complex(value) / (2.0 * math.pi), region, terms, tail / (2.0 * math.pi), quad_error)


def finite_difference_step(x: complex, cfg: TwoDiskConfig, quad: QuadratureSettings) -> float:
    """Step for differentiating the gradient: at most fd_step and a tenth of the distance to an interface."""
    dist, _ = distance_to_interfaces(x, cfg)
    h = min(quad.fd_step * cfg.length_scale, dist / 10.0)
    if h < 1e-6 * cfg.length_scale:
        raise TooCloseToInterfaceError(f"x = {x} is {dist:.3e} from an interface; no usable step")
    return h


def higher_deriv_u(x: PointLike, m: int, cfg: TwoDiskConfig, src: PiecewiseSource,
                   policy: Optional[SeriesPolicy] = None, quad: Optional[QuadratureSettings] = None,
                   evaluator: Optional[PotentialEvaluator] = None) -> EvalReport:
    """
    m-th derivative tensor of u, shape (2,)*m, by Richardson-extrapolated
    central differences of the analytic gradient.

    `quad_error` is the larger of the Richardson correction and the
    refined-rule quadrature estimate.
    """
    if not (2 <= m <= 4):
        raise ValueError("m must be between 2 and 4")
    policy = policy or SeriesPolicy()
    quad = quad or QuadratureSettings()
    x = as_point(x)
    region = resolve_region(x, cfg)
    if region.on_boundary is not None:
        raise TooCloseToInterfaceError(f"x = {x} lies on an interface")
    ev = evaluator or PotentialEvaluator(cfg, src, quad)
    h = finite_difference_step(x, cfg, quad)
    stats = {"terms": 0, "tail": 0.0, "correction": 0.0}

    def gradient(p: complex) -> np.ndarray:
        rep = grad_u(p, cfg, src, policy, x_hint=region.tag, evaluator=ev)
        stats["terms"] = max(stats["terms"], rep.terms_used)
        stats["tail"] = max(stats["tail"], rep.tail_estimate)
        return rep.vector

    def derivative(p: complex, order: int) -> np.ndarray:
        if order == 1:
            return gradient(p)
        slices = []
        for axis in (1.0 + 0j, 1j):
            def central(step: float) -> np.ndarray:
                return (derivative(p + step * axis, order - 1) - derivative(p - step * axis, order - 1)) / (2.0 * step)
            coarse, fine = central(h), central(h / 2.0)
            extrapolated = (4.0 * fine - coarse) / 3.0
            stats["correction"] = max(stats["correction"], float(np.max(np.abs(extrapolated - fine))))
            slices.append(extrapolated)
        return np.stack(slices, axis=-1)

    tensor = derivative(x, m)
    return EvalReport(tensor, region, stats["terms"], stats["tail"], max(stats["correction"], _quad_error(ev, cfg)))
