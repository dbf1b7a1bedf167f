"""
Inversion maps across the disk boundaries and their compositions.

A ConjMoebius is z -> (a w + b)/(c w + d) with w = conj(z) when the parity
bit is set. The inversions Phi1, Phi2 carry parity; their two-fold products
Phi2 Phi1 and Phi1 Phi2 are ordinary Moebius maps. Iterates of these
products are evaluated in closed form: in the normalized frame
w = scale*z + shift each product reads w -> -r1^2 r2^2 / w + trace, whose
l-th power is diagonalized by its two fixed points.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from twodisk_errors import DegenerateMapError, NearPoleError, PoleError
from twodisk_geometry import RegionTag, TwoDiskConfig, classify, effective_gap_parameter

logger = logging.getLogger(__name__)

ComplexLike = Union[complex, np.ndarray]

NEAR_POLE_FACTOR = 1e-14
MAP_IDENTITY_TOL = 1e-11
FIXED_POINT_TOL = 1e-12
CLOSED_FORM_TOL = 1e-9


class Pair(str, Enum):
    PHI2_PHI1 = "phi2phi1"
    PHI1_PHI2 = "phi1phi2"


@dataclass(frozen=True)
class ConjMoebius:
    a: complex
    b: complex
    c: complex
    d: complex
    conj: bool = False

    def __post_init__(self):
        if self.det == 0:
            raise DegenerateMapError(f"map matrix is singular: {self.matrix.tolist()}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.c, self.d]], dtype=complex)

    @property
    def det(self) -> complex:
        return self.a * self.d - self.b * self.c

    @property
    def scale(self) -> float:
        return max(abs(self.c), abs(self.d))

    @classmethod
    def from_matrix(cls, m: np.ndarray, conj: bool = False) -> "ConjMoebius":
        # Entries are rescaled so the largest has modulus one; the action is unchanged.
        m = np.asarray(m, dtype=complex)
        norm = np.max(np.abs(m))
        if norm == 0 or not np.isfinite(norm):
            raise DegenerateMapError(f"map matrix is not usable: {m.tolist()}")
        m = m / norm
        return cls(complex(m[0, 0]), complex(m[0, 1]), complex(m[1, 0]), complex(m[1, 1]), conj)

    @classmethod
    def identity(cls) -> "ConjMoebius":
        return cls(1.0 + 0j, 0j, 0j, 1.0 + 0j, False)

    def _input(self, z: ComplexLike) -> ComplexLike:
        return np.conj(z) if self.conj else z

    def _denominator(self, z: ComplexLike) -> ComplexLike:
        return self.c * self._input(z) + self.d

    def __call__(self, z: ComplexLike) -> ComplexLike:
        return self.apply(z)

    def apply(self, z: ComplexLike) -> ComplexLike:
        """Evaluate the map; raises PoleError at the pole z = -d/c."""
        w = self._input(z)
        den = self.c * w + self.d
        if np.any(den == 0):
            raise PoleError(f"evaluation at the pole of the map (z = {z})")
        out = (self.a * w + self.b) / den
        return complex(out) if np.ndim(out) == 0 else out

    def derivative(self, z: ComplexLike, m: int = 1) -> ComplexLike:
        """
        m-th complex derivative of w -> (a w + b)/(c w + d), taken at w = input(z).

        For anti-holomorphic maps this is the derivative with respect to conj(z).
        """
        if m < 1:
            raise ValueError("derivative order must be at least 1")
        den = self._denominator(z)
        if np.any(np.abs(den) < NEAR_POLE_FACTOR * self.scale):
            raise NearPoleError(f"|denominator| below {NEAR_POLE_FACTOR}*scale at z = {z}")
        sign = -1.0 if (m - 1) % 2 else 1.0
        out = sign * math.factorial(m) * self.det * self.c ** (m - 1) / den ** (m + 1)
        return complex(out) if np.ndim(out) == 0 else out

    def inverse(self) -> "ConjMoebius":
        inv = np.array([[self.d, -self.b], [-self.c, self.a]], dtype=complex)
        if self.conj:
            inv = np.conj(inv)
        return ConjMoebius.from_matrix(inv, self.conj)


def compose(g: ConjMoebius, f: ConjMoebius) -> ConjMoebius:
    """
    Return g o f.

    If g carries parity, the coefficients of f are conjugated before the
    matrix product; the parity bits add mod 2.

    Raises:
        DegenerateMapError: If the product matrix is singular.
    """
    mf = np.conj(f.matrix) if g.conj else f.matrix
    product = g.matrix @ mf
    det = product[0, 0] * product[1, 1] - product[0, 1] * product[1, 0]
    if det == 0:
        raise DegenerateMapError("composition produced a singular matrix")
    return ConjMoebius.from_matrix(product, g.conj != f.conj)


def compose_all(*maps: ConjMoebius) -> ConjMoebius:
    """compose_all(f1, f2, ..., fn) = f1 o f2 o ... o fn."""
    result = ConjMoebius.identity()
    for m in maps:
        result = compose(result, m)
    return result


def pullback_gradient(T: ConjMoebius, z: ComplexLike, grad_at_image: ComplexLike) -> ComplexLike:
    """
    Gradient of phi o T at z, given grad phi = g1 + i g2 at T(z).

    Holomorphic T: conj(T') * g. Anti-holomorphic T(z) = M(conj z): M' * conj(g).
    """
    dT = T.derivative(z, 1)
    if T.conj:
        return dT * np.conj(grad_at_image)
    return np.conj(dT) * grad_at_image


def inversion(which: int, cfg: TwoDiskConfig) -> ConjMoebius:
    """
    Inversion across the boundary circle of disk `which`.

    Phi(z) = r^2 / (conj(z) - c) + c, i.e. the matrix (c, r^2 - c^2; 1, -c)
    acting on conj(z).
    """
    if which not in (1, 2):
        raise ValueError("which must be 1 or 2")
    c = cfg.center(which)
    r = cfg.radius(which)
    return ConjMoebius(c, r * r - c * c, 1.0 + 0j, -c, True)


@dataclass(frozen=True)
class NormalizedFrame:
    """Affine change of variables w = scale*z + shift."""

    scale: complex
    shift: complex

    def __post_init__(self):
        if self.scale == 0:
            raise DegenerateMapError("frame scale must be nonzero")

    def to_frame(self, z: ComplexLike) -> ComplexLike:
        return self.scale * z + self.shift

    def from_frame(self, w: ComplexLike) -> ComplexLike:
        return (w - self.shift) / self.scale

    @property
    def forward(self) -> ConjMoebius:
        return ConjMoebius(self.scale, self.shift, 0j, 1.0 + 0j)

    @property
    def backward(self) -> ConjMoebius:
        return ConjMoebius(1.0 + 0j, -self.shift, 0j, self.scale)


@dataclass(frozen=True)
class NormalizedPair:
    """A product map in its normalized frame: w -> -product/w + trace."""

    frame: NormalizedFrame
    trace: float
    product: float
    gap_term: float

    @property
    def discriminant_root(self) -> float:
        # sqrt(trace^2/4 - product) with trace^2/4 - product = (|trace|/2 - R)(|trace|/2 + R),
        # the first factor supplied exactly as gap_term.
        R = math.sqrt(self.product)
        return math.sqrt(self.gap_term * (abs(self.trace) / 2.0 + R))

    def fixed_points(self) -> Tuple[float, float]:
        """(attracting, repelling) fixed points in the frame; the large root first."""
        big = self.trace / 2.0 + math.copysign(self.discriminant_root, self.trace)
        return big, self.product / big

    def apply(self, w: ComplexLike) -> ComplexLike:
        return -self.product / w + self.trace


def normalized_pair(pair: Pair, eps: float, r1: float, r2: float) -> NormalizedPair:
    """
    Normalized frame of Phi2 Phi1 or Phi1 Phi2 from raw geometry.

    With s = r1 + r2 + eps and K = 2 r1 r2 + 2 (r1 + r2) eps + eps^2:
    Phi2 Phi1 has frame s z - (r1 + eps/2) s + r1^2 and trace -K;
    Phi1 Phi2 has frame s z + (r2 + eps/2) s - r2^2 and trace +K.
    The fixed points multiply to r1^2 r2^2 in either frame.
    """
    s = r1 + r2 + eps
    K = 2.0 * r1 * r2 + 2.0 * (r1 + r2) * eps + eps * eps
    gap_term = (r1 + r2) * eps + eps * eps / 2.0
    if Pair(pair) == Pair.PHI2_PHI1:
        frame = NormalizedFrame(complex(s), complex(-(r1 + eps / 2.0) * s + r1 * r1))
        trace = -K
    else:
        frame = NormalizedFrame(complex(s), complex((r2 + eps / 2.0) * s - r2 * r2))
        trace = K
    return NormalizedPair(frame=frame, trace=trace, product=(r1 * r2) ** 2, gap_term=gap_term)


def pair_map(pair: Pair, cfg: TwoDiskConfig) -> ConjMoebius:
    """The product map by explicit composition of the two inversions."""
    phi1, phi2 = inversion(1, cfg), inversion(2, cfg)
    if Pair(pair) == Pair.PHI2_PHI1:
        return compose(phi2, phi1)
    return compose(phi1, phi2)


def fixed_points(pair: Pair, cfg: TwoDiskConfig) -> Tuple[complex, complex]:
    """
    Fixed points of a product map in physical coordinates.

    Returns:
        (lambda_in_B1, lambda_in_B2)
    """
    npair = normalized_pair(pair, cfg.eps, cfg.r1, cfg.r2)
    pts = [complex(npair.frame.from_frame(w)) for w in npair.fixed_points()]
    in_b1 = [p for p in pts if classify(p, cfg).tag == RegionTag.INCLUSION1]
    in_b2 = [p for p in pts if classify(p, cfg).tag == RegionTag.INCLUSION2]
    if len(in_b1) != 1 or len(in_b2) != 1:
        raise DegenerateMapError(f"fixed points {pts} are not split between the disks")
    return in_b1[0], in_b2[0]


def attracting_fixed_point(pair: Pair, cfg: TwoDiskConfig) -> complex:
    """Limit of the iterates: in B2 for Phi2 Phi1, in B1 for Phi1 Phi2."""
    npair = normalized_pair(pair, cfg.eps, cfg.r1, cfg.r2)
    return complex(npair.frame.from_frame(npair.fixed_points()[0]))


def multiplier(pair: Pair, cfg: TwoDiskConfig) -> float:
    """Derivative of the product map at its attracting fixed point."""
    npair = normalized_pair(pair, cfg.eps, cfg.r1, cfg.r2)
    p, q = npair.fixed_points()
    return q / p


@lru_cache(maxsize=4096)
def iterate_closed_form(pair: Pair, l: int, cfg: TwoDiskConfig) -> ConjMoebius:
    """
    l-fold power of a product map, in physical coordinates, at O(1) cost.

    In the frame, with attracting/repelling fixed points p, q and multiplier
    mu = q/p, the power satisfies (T^l w - p)/(T^l w - q) = mu^l (w - p)/(w - q).
    mu^l is floored at the smallest normal double so that the matrix stays
    invertible; the map is then constant to machine precision.
    """
    if l < 0:
        raise ValueError("iterate index must be nonnegative")
    if l == 0:
        return ConjMoebius.identity()
    npair = normalized_pair(pair, cfg.eps, cfg.r1, cfg.r2)
    p, q = npair.fixed_points()
    mu_l = max((q / p) ** l, np.finfo(float).tiny)
    in_frame = np.array([[p - q * mu_l, p * q * (mu_l - 1.0)],
                         [1.0 - mu_l, p * mu_l - q]], dtype=complex)
    frame = npair.frame
    physical = frame.backward.matrix @ in_frame @ frame.forward.matrix
    return ConjMoebius.from_matrix(physical, False)


def iterate_derivative(pair: Pair, l: int, m: int, z: ComplexLike, cfg: TwoDiskConfig) -> ComplexLike:
    """m-th complex derivative of the l-th iterate at z."""
    return iterate_closed_form(pair, l, cfg).derivative(z, m)


def attracting_disk(pair: Pair) -> int:
    return 2 if Pair(pair) == Pair.PHI2_PHI1 else 1


def disk_lattice(cfg: TwoDiskConfig, which: int, n_radii: int = 4, n_angles: int = 8) -> np.ndarray:
    """Fixed sample lattice inside disk `which` (radii up to 0.9 r)."""
    c, r = cfg.center(which), cfg.radius(which)
    rho = np.linspace(0.0, 0.9, n_radii)
    theta = 2.0 * np.pi * np.arange(n_angles) / n_angles
    pts = c + r * np.outer(rho[1:], np.exp(1j * theta)).ravel()
    return np.concatenate([[c], pts])


@dataclass
class DecayCertificate:
    rows: List[Tuple[int, float, Optional[float]]] = field(default_factory=list)
    bound: float = 0.0
    limsup: float = 0.0

    @property
    def passed(self) -> bool:
        return self.limsup <= self.bound + 0.01


def decay_certificate(pair: Pair, cfg: TwoDiskConfig, m: int = 1, l_max: int = 200) -> DecayCertificate:
    """
    Sample sup |D^m T^l| over a lattice in the attracting disk for l = 0..l_max.

    The limsup of consecutive ratios is estimated over the upper half of the
    l range and compared with (1 + tau)^-2.
    """
    if l_max > 10_000:
        raise ValueError("l_max must not exceed 10^4")
    pts = disk_lattice(cfg, attracting_disk(pair))
    samples = []
    for l in range(l_max + 1):
        if l == 0:
            samples.append(1.0 if m == 1 else 0.0)
            continue
        samples.append(float(np.max(np.abs(iterate_derivative(pair, l, m, pts, cfg)))))

    cert = DecayCertificate(bound=(1.0 + effective_gap_parameter(cfg)) ** -2)
    ratios = []
    for l in range(l_max + 1):
        ratio = None
        if l < l_max and samples[l] > 1e-200 and samples[l + 1] > 1e-200:
            ratio = samples[l + 1] / samples[l]
            if l >= l_max // 2:
                ratios.append(ratio)
        cert.rows.append((l, samples[l], ratio))
    cert.limsup = max(ratios) if ratios else 0.0
    logger.debug(f"decay certificate {pair} m={m}: limsup {cert.limsup:.6f} vs bound {cert.bound:.6f}")
    return cert


def _random_points(rng: np.random.Generator, cfg: TwoDiskConfig, n: int, extent: float = 4.0) -> np.ndarray:
    pts = (rng.uniform(-extent, extent, n) + 1j * rng.uniform(-extent, extent, n)) * cfg.length_scale
    keep = (np.abs(pts - cfg.c1) > 1e-3 * cfg.r1) & (np.abs(pts - cfg.c2) > 1e-3 * cfg.r2)
    return pts[keep]


def _matrix_points(rng: np.random.Generator, cfg: TwoDiskConfig, n: int) -> np.ndarray:
    pts = _random_points(rng, cfg, 4 * n)
    inside = (np.abs(pts - cfg.c1) <= cfg.r1) | (np.abs(pts - cfg.c2) <= cfg.r2)
    return pts[~inside][:n]


def run_invariant_suite(cfg: TwoDiskConfig, seed: int = 0,
                        maps: Optional[Dict[int, ConjMoebius]] = None) -> Dict[str, Dict[str, object]]:
    """
    Map-algebra checks: involution, boundary fixing, parity, closed form vs
    brute force, mapping invariance, fixed points and decay.

    `maps` may replace the inversions (used to inject a corrupted map).

    Limits: fixed-point residuals FIXED_POINT_TOL; involution and boundary
    fixing MAP_IDENTITY_TOL, relative to max(1, |z|) and the length scale;
    closed form against 20 brute-force iterates CLOSED_FORM_TOL.

    Returns:
        {check name: {"passed": bool, "max_error": float}}
    """
    rng = np.random.default_rng(seed)
    phi = maps or {1: inversion(1, cfg), 2: inversion(2, cfg)}
    results: Dict[str, Dict[str, object]] = {}

    def record(name: str, error: float, limit: float):
        results[name] = {"passed": bool(error <= limit), "max_error": float(error), "limit": limit}

    pts = _random_points(rng, cfg, 1000)
    err = max(float(np.max(np.abs(phi[i](phi[i](pts)) - pts) / np.maximum(1.0, np.abs(pts)))) for i in (1, 2))
    record("involution", err, MAP_IDENTITY_TOL)

    theta = 2.0 * np.pi * rng.uniform(0.0, 1.0, 100)
    err = 0.0
    for i in (1, 2):
        bnd = cfg.center(i) + cfg.radius(i) * np.exp(1j * theta)
        err = max(err, float(np.max(np.abs(phi[i](bnd) - bnd))) / cfg.length_scale)
    record("boundary_fixing", err, MAP_IDENTITY_TOL)

    sequence = [phi[1], phi[2], phi[1], phi[2], phi[1]]
    parity_ok = all(compose_all(*sequence[:n]).conj == (n % 2 == 1) for n in range(1, len(sequence) + 1))
    results["parity"] = {"passed": parity_ok, "max_error": 0.0 if parity_ok else 1.0, "limit": 0.0}

    sample = cfg.c2 + 0.8 * cfg.r2 * (rng.uniform(-0.7, 0.7, 50) + 1j * rng.uniform(-0.7, 0.7, 50))
    step = compose(phi[2], phi[1])
    err = 0.0
    current = sample.copy()
    for l in range(1, 21):
        current = step(current)
        closed = iterate_closed_form(Pair.PHI2_PHI1, l, cfg)(sample)
        err = max(err, float(np.max(np.abs(closed - current))) / cfg.length_scale)
    record("closed_form_vs_brute_force", err, CLOSED_FORM_TOL)

    outside = _matrix_points(rng, cfg, 50)
    violations = 0
    for l in range(1, 101):
        for pair, tag in ((Pair.PHI2_PHI1, RegionTag.INCLUSION2), (Pair.PHI1_PHI2, RegionTag.INCLUSION1)):
            images = iterate_closed_form(pair, l, cfg)(outside)
            violations += sum(classify(complex(z), cfg).tag != tag for z in images)
    results["mapping_invariance"] = {"passed": violations == 0, "max_error": float(violations), "limit": 0.0}

    err = 0.0
    for pair in Pair:
        T = compose(phi[2], phi[1]) if pair == Pair.PHI2_PHI1 else compose(phi[1], phi[2])
        try:
            for lam in fixed_points(pair, cfg):
                err = max(err, abs(T(lam) - lam) / cfg.length_scale)
        except Exception as e:
            logger.warning(f"fixed point check failed for {pair.value}: {str(e)}")
            err = math.inf
    record("fixed_point_residual", err, FIXED_POINT_TOL)

    npair = normalized_pair(Pair.PHI2_PHI1, cfg.eps, cfg.r1, cfg.r2)
    p, q = npair.fixed_points()
    record("fixed_point_product", abs(p * q - npair.product) / npair.product, 1e-10)

    cert = decay_certificate(Pair.PHI2_PHI1, cfg, m=1, l_max=120)
    results["decay_certificate"] = {"passed": cert.passed, "max_error": cert.limsup, "limit": cert.bound + 0.01}
    return results
