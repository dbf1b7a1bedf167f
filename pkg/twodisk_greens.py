"""
Auxiliary function and Green's function of the two-disk conductivity operator.

Normalization: Laplacian of log|x - y| is the Dirac mass at y; the physical
Green's function is PHYS_SCALE times the one evaluated here.

Every region branch is expressed as an ImageExpansion: a few head terms plus
a series whose l-th group is weighted by (alpha*beta)^l. A term is
coef * log|F_l(x) - t| where F_l belongs to one of four image families

    A_l = (Phi1 Phi2)^l        B_l = (Phi2 Phi1)^l
    C_l = (Phi2 Phi1)^l Phi2   D_l = (Phi1 Phi2)^l Phi1

and t is either the source point y or a fixed point (a disk center).
The potentials module reuses the same expansions with log|. - y| replaced by
the log-kernel potentials of the source.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from twodisk_errors import (
    AmbiguousEvaluationError,
    InvalidContourError,
    PoleError,
    SingularEvaluationError,
    TruncationError,
)
from twodisk_geometry import (
    PointLike,
    Region,
    RegionTag,
    TwoDiskConfig,
    as_point,
    classify,
    effective_gap_parameter,
    interface_normal,
    resolve_region,
)
from twodisk_moebius import (
    ConjMoebius,
    Pair,
    attracting_fixed_point,
    compose,
    inversion,
    iterate_closed_form,
    pullback_gradient,
)

logger = logging.getLogger(__name__)

PHYS_SCALE = -1.0 / (2.0 * math.pi)

Quantity = Literal["value", "gradient", "derivative"]


class TailMode(str, Enum):
    GEOMETRIC = "geometric-extrapolation"
    FIXED_N = "fixed-N"


class SeriesPolicy(BaseModel):
    """Truncation settings for the (alpha*beta)^l reflection series."""

    model_config = ConfigDict(frozen=True)

    tol: float = Field(default=1e-10, description="Absolute tolerance on the dropped tail")
    max_terms: int = Field(default=10_000, description="Cap on the number of series groups")
    tail_mode: TailMode = Field(default=TailMode.GEOMETRIC, description="Tail estimation strategy")
    accelerate: Literal["auto", "on", "off"] = Field(
        default="auto", description="Subtract the fixed-point limit from value series"
    )
    accelerate_threshold: int = Field(
        default=10_000, description="Planned term count above which 'auto' acceleration switches on"
    )
    bound: float = Field(default=10.0, description="Running bound B on the series group size used for planning")

    @field_validator("tol")
    def validate_tol(cls, v):
        if not v > 0:
            raise ValueError("tol must be positive")
        return v

    @field_validator("max_terms")
    def validate_max_terms(cls, v):
        if v < 1:
            raise ValueError("max_terms must be at least 1")
        return v


class Family(str, Enum):
    A = "phi1phi2^l"
    B = "phi2phi1^l"
    C = "phi2phi1^l.phi2"
    D = "phi1phi2^l.phi1"


@lru_cache(maxsize=16384)
def family_map(cfg: TwoDiskConfig, family: Family, l: int) -> ConjMoebius:
    """The l-th member of an image family, in physical coordinates."""
    if family == Family.A:
        return iterate_closed_form(Pair.PHI1_PHI2, l, cfg)
    if family == Family.B:
        return iterate_closed_form(Pair.PHI2_PHI1, l, cfg)
    if family == Family.C:
        return compose(iterate_closed_form(Pair.PHI2_PHI1, l, cfg), inversion(2, cfg))
    return compose(iterate_closed_form(Pair.PHI1_PHI2, l, cfg), inversion(1, cfg))


def family_limit(cfg: TwoDiskConfig, family: Family) -> complex:
    """Point the family converges to as l grows."""
    if family in (Family.A, Family.D):
        return attracting_fixed_point(Pair.PHI1_PHI2, cfg)
    return attracting_fixed_point(Pair.PHI2_PHI1, cfg)


@dataclass(frozen=True)
class ImageTerm:
    coef: float
    family: Family
    target: Optional[complex] = None  # None: the source point
    l: int = 0  # head terms only

    def scaled(self, factor: float, target: Optional[complex] = None) -> "ImageTerm":
        return ImageTerm(self.coef * factor, self.family, target if target is not None else self.target, self.l)


@dataclass(frozen=True)
class CenterTerm:
    """
    coef * (log|Phi(x) - y| + log|x - c|), written without the log singularity:
    2 log r + log|1 + (c - y) conj(x - c) / r^2|.
    """

    coef: float
    disk: int


@dataclass(frozen=True)
class ConstantTerm:
    coef: float


HeadTerm = Union[ImageTerm, CenterTerm, ConstantTerm]


@dataclass(frozen=True)
class ImageExpansion:
    head: Tuple[HeadTerm, ...]
    series: Tuple[ImageTerm, ...]
    start: int
    ratio: float


def _drop_zero(terms: Sequence) -> Tuple:
    return tuple(t for t in terms if t.coef != 0.0)


def aux_expansion(x_tag: RegionTag, y_tag: RegionTag, cfg: TwoDiskConfig,
                  target: Optional[complex] = None) -> ImageExpansion:
    """Branch of the auxiliary function for x in x_tag and a source in y_tag."""
    a, b = cfg.alpha, cfg.beta
    k1, k2 = cfg.k1, cfg.k2
    kap1, kap2 = 1.0 - a, 1.0 - b
    cross = 4.0 / ((k1 + 1.0) * (k2 + 1.0))
    M, I1, I2 = RegionTag.MATRIX, RegionTag.INCLUSION1, RegionTag.INCLUSION2
    F = Family
    t = target

    head: Sequence[HeadTerm] = ()
    start = 0
    if y_tag == M:
        if x_tag == I1:
            series = [ImageTerm(kap1, F.A, t), ImageTerm(-kap1 * b, F.C, t)]
        elif x_tag == M:
            head = [ImageTerm(1.0, F.A, t), ImageTerm(-b, F.C, t), ImageTerm(-a, F.D, t)]
            series = [ImageTerm(1.0, F.A, t), ImageTerm(1.0, F.B, t),
                      ImageTerm(-b, F.C, t), ImageTerm(-a, F.D, t)]
            start = 1
        else:
            series = [ImageTerm(kap2, F.B, t), ImageTerm(-kap2 * a, F.D, t)]
    elif y_tag == I1:
        if x_tag == I1:
            head = [ImageTerm(1.0 / k1, F.A, t), ImageTerm(a / k1, F.D, t)]
            series = [ImageTerm(-4.0 * b / (k1 + 1.0) ** 2, F.C, t)]
        elif x_tag == M:
            series = [ImageTerm(kap1, F.B, t), ImageTerm(-kap1 * b, F.C, t)]
        else:
            series = [ImageTerm(cross, F.B, t)]
    else:
        if x_tag == I1:
            series = [ImageTerm(cross, F.A, t)]
        elif x_tag == M:
            series = [ImageTerm(kap2, F.A, t), ImageTerm(-kap2 * a, F.D, t)]
        else:
            head = [ImageTerm(1.0 / k2, F.A, t), ImageTerm(b / k2, F.C, t)]
            series = [ImageTerm(-4.0 * a / (k2 + 1.0) ** 2, F.D, t)]
    return ImageExpansion(_drop_zero(head), _drop_zero(series), start, cfg.alpha_beta)


def green_expansion(x_tag: RegionTag, y_tag: RegionTag, cfg: TwoDiskConfig) -> ImageExpansion:
    """
    Branch of the Green's function.

    For a source in disk j the auxiliary function is corrected by
    alpha_j/(1 - alpha_j) times its value with the source at c_j. When x is
    in the same disk the two log singularities at c_j are merged into a
    CenterTerm, so the branch is finite at the center.
    """
    base = aux_expansion(x_tag, y_tag, cfg)
    if y_tag == RegionTag.MATRIX:
        return base
    j = y_tag.index
    c, r, k = cfg.center(j), cfg.radius(j), cfg.conductivity(j)
    a = cfg.contrast_of(j)
    gamma = a / (1.0 - a)
    corr = aux_expansion(x_tag, y_tag, cfg, target=c)
    series = base.series + tuple(term.scaled(gamma) for term in corr.series)

    if x_tag == y_tag:
        head = (ImageTerm(1.0 / k, Family.A),
                CenterTerm(a / k, j),
                ConstantTerm(2.0 * a * a / ((1.0 - a) * k) * math.log(r)))
    else:
        head = base.head + tuple(term.scaled(gamma) for term in corr.head)
    return ImageExpansion(_drop_zero(head), _drop_zero(series), base.start, base.ratio)


def image_expansion(x_tag: RegionTag, y_tag: RegionTag, cfg: TwoDiskConfig, green: bool = True) -> ImageExpansion:
    """Branch of the Green's function (green=True) or of the auxiliary function."""
    return green_expansion(x_tag, y_tag, cfg) if green else aux_expansion(x_tag, y_tag, cfg)


@dataclass
class SeriesResult:
    value: Union[float, complex]
    terms_used: int
    tail_estimate: float
    accelerated: bool = False


def geometric_tail(magnitudes: Sequence[float]) -> float:
    """Tail estimate |t_N| rho/(1 - rho) with rho the largest recent term ratio."""
    last = list(magnitudes)[-5:]
    if last[-1] == 0.0 and all(m == 0.0 for m in last):
        return 0.0
    ratios = []
    for prev, nxt in zip(last[:-1], last[1:]):
        if prev == 0.0:
            if nxt == 0.0:
                continue
            return math.inf
        ratios.append(nxt / prev)
    if not ratios:
        return math.inf
    rho = max(ratios)
    if rho >= 1.0:
        return math.inf
    return last[-1] * rho / (1.0 - rho)


def plan_terms(ratio: float, tau: float, tol: float, bound: float, quantity: Quantity = "value",
               max_terms: Optional[int] = None) -> int:
    """
    Smallest N with q^N * bound <= tol, where q = |ratio| for values and
    |ratio| (1 + tau)^-2 for gradients and higher derivatives.
    """
    if abs(ratio) >= 1.0:
        raise ValueError("|alpha*beta| must be below 1")
    if ratio == 0.0:
        return 1
    q = abs(ratio) if quantity == "value" else abs(ratio) / (1.0 + tau) ** 2
    n = max(1, math.ceil(math.log(tol / bound) / math.log(q)))
    if max_terms is not None and n > max_terms:
        raise TruncationError(f"planned {n} terms exceed max_terms={max_terms}", terms_used=0)
    return n


def plan_truncation(cfg: TwoDiskConfig, policy: SeriesPolicy, quantity: Quantity = "value") -> int:
    """A-priori number of series groups needed for `quantity` at policy.tol."""
    return plan_terms(cfg.alpha_beta, effective_gap_parameter(cfg), policy.tol, policy.bound,
                      quantity, policy.max_terms)


def use_acceleration(cfg: TwoDiskConfig, policy: SeriesPolicy) -> bool:
    if policy.accelerate != "auto":
        return policy.accelerate == "on"
    if cfg.alpha_beta == 0.0:
        return False
    planned = plan_terms(cfg.alpha_beta, effective_gap_parameter(cfg), policy.tol, policy.bound, "value")
    if planned > policy.accelerate_threshold:
        logger.debug(f"value series needs {planned} terms; subtracting the fixed-point limit")
        return True
    return False


def _tail(magnitudes: Sequence[float], q: float) -> float:
    if len(magnitudes) >= 2:
        return geometric_tail(magnitudes)
    return magnitudes[-1] * q / (1.0 - q)


def sum_reflection_series(group: Callable[[int], Union[float, complex]], start: int, ratio: float,
                          policy: SeriesPolicy, limit: Optional[Union[float, complex]] = None,
                          a_priori_ratio: Optional[float] = None) -> SeriesResult:
    """
    Sum ratio^l * group(l) for l >= start.

    With `limit` given, the series is rewritten as
    sum ratio^l (group(l) - limit) + limit * ratio^start / (1 - ratio).

    Raises:
        TruncationError: If the tail estimate is still above tol after max_terms groups.
    """
    if ratio == 0.0:
        if start == 0:
            return SeriesResult(group(0), 1, 0.0)
        return SeriesResult(0.0, 0, 0.0)

    total: Union[float, complex] = 0.0
    magnitudes = []
    tail = math.inf
    fixed = policy.tail_mode == TailMode.FIXED_N
    q = abs(ratio) if a_priori_ratio is None else min(abs(a_priori_ratio), abs(ratio))
    # short runs estimate from what they have; 5 terms once available
    min_terms = min(5, policy.max_terms)
    for n in range(policy.max_terms):
        l = start + n
        c = group(l)
        if limit is not None:
            c = c - limit
        term = ratio ** l * c
        total = total + term
        magnitudes.append(abs(term))
        if n + 1 >= min_terms:
            tail = _tail(magnitudes, q)
            if not fixed and tail <= policy.tol:
                break
    else:
        if not fixed:
            raise TruncationError(
                f"reflection series not converged after {policy.max_terms} terms (tail {tail:.3e})",
                partial_value=total, terms_used=policy.max_terms, tail_estimate=tail)

    used = len(magnitudes)
    if len(magnitudes) < 5:
        tail = _tail(magnitudes, q)
    if a_priori_ratio is not None and len(magnitudes) >= 2 and magnitudes[-2] > 0:
        empirical = magnitudes[-1] / magnitudes[-2]
        if empirical > a_priori_ratio * 1.05:
            logger.debug(f"empirical term ratio {empirical:.4f} above a-priori {a_priori_ratio:.4f}")
    if limit is not None:
        total = total + limit * ratio ** start / (1.0 - ratio)
    return SeriesResult(total, used, tail, limit is not None)


@dataclass
class GreensEval:
    value: Union[float, complex]  # gradients as g1 + i g2
    terms_used: int
    tail_estimate: float
    x_region: Region
    y_region: Region

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.value.real, self.value.imag]) if isinstance(self.value, complex) else np.array([self.value])


def _image_point(term: ImageTerm, l: int, x: complex, cfg: TwoDiskConfig) -> Tuple[ConjMoebius, complex]:
    T = family_map(cfg, term.family, l)
    try:
        return T, T(x)
    except PoleError:
        raise SingularEvaluationError(f"image map {term.family.value}[{l}] is singular at x = {x}")


def _term_value(term: HeadTerm, l: int, x: complex, y: complex, cfg: TwoDiskConfig) -> float:
    if isinstance(term, ConstantTerm):
        return term.coef
    if isinstance(term, CenterTerm):
        c, r = cfg.center(term.disk), cfg.radius(term.disk)
        return term.coef * (2.0 * math.log(r) + math.log(abs(1.0 + (c - y) * (x.conjugate() - c) / r ** 2)))
    _, fx = _image_point(term, l, x, cfg)
    t = y if term.target is None else term.target
    if fx == t:
        raise SingularEvaluationError(f"evaluation at the source point (x = {x})")
    return term.coef * math.log(abs(fx - t))


def _term_gradient(term: HeadTerm, l: int, x: complex, y: complex, cfg: TwoDiskConfig) -> complex:
    if isinstance(term, ConstantTerm):
        return 0j
    if isinstance(term, CenterTerm):
        c, r = cfg.center(term.disk), cfg.radius(term.disk)
        w = (c - y) / r ** 2
        return term.coef * w / (1.0 + w * (x.conjugate() - c))
    T, fx = _image_point(term, l, x, cfg)
    t = y if term.target is None else term.target
    if fx == t:
        raise SingularEvaluationError(f"evaluation at the source point (x = {x})")
    return term.coef * complex(pullback_gradient(T, x, np.conj(1.0 / (fx - t))))


def evaluate_expansion(expansion: ImageExpansion, x: complex, y: complex, cfg: TwoDiskConfig,
                       policy: SeriesPolicy, gradient: bool = False) -> SeriesResult:
    """Head terms plus the truncated reflection series, for the value or the x-gradient."""
    evaluate = _term_gradient if gradient else _term_value
    head = sum((evaluate(term, term.l if isinstance(term, ImageTerm) else 0, x, y, cfg)
                for term in expansion.head), 0j if gradient else 0.0)
    if not expansion.series:
        return SeriesResult(head, 0, 0.0)

    def group(l: int):
        return sum((evaluate(term, l, x, y, cfg) for term in expansion.series), 0j if gradient else 0.0)

    limit = None
    if not gradient and use_acceleration(cfg, policy):
        limit = sum(term.coef * math.log(abs(family_limit(cfg, term.family) - (y if term.target is None else term.target)))
                    for term in expansion.series)
    tau = effective_gap_parameter(cfg)
    a_priori = abs(expansion.ratio) if not gradient else abs(expansion.ratio) / (1.0 + tau) ** 2
    try:
        result = sum_reflection_series(group, expansion.start, expansion.ratio, policy, limit, a_priori)
    except TruncationError as e:
        e.partial_value = head + e.partial_value
        raise
    result.value = head + result.value
    return result


def _regions(x: complex, y: complex, cfg: TwoDiskConfig, x_hint: Optional[RegionTag],
             y_hint: Optional[RegionTag], gradient: bool) -> Tuple[Region, Region]:
    if x == y:
        raise SingularEvaluationError(f"x and y coincide at {x}")
    x_region = resolve_region(x, cfg, x_hint)
    if gradient and x_region.on_boundary is not None and x_hint is None:
        raise AmbiguousEvaluationError(f"x = {x} lies on interface {x_region.on_boundary}; pass a side hint")
    y_region = resolve_region(y, cfg, y_hint)
    return x_region, y_region


def eval_aux(x: PointLike, y: PointLike, cfg: TwoDiskConfig, policy: Optional[SeriesPolicy] = None,
             x_hint: Optional[RegionTag] = None, y_hint: Optional[RegionTag] = None) -> GreensEval:
    """
    Evaluate the auxiliary function at (x, y).

    Raises:
        SingularEvaluationError: If x = y, or x is the center of the source's
            disk (where the auxiliary function is infinite).
        TruncationError: If the series does not converge within max_terms.
    """
    policy = policy or SeriesPolicy()
    x, y = as_point(x), as_point(y)
    x_region, y_region = _regions(x, y, cfg, x_hint, y_hint, False)
    expansion = aux_expansion(x_region.tag, y_region.tag, cfg)
    result = evaluate_expansion(expansion, x, y, cfg, policy)
    return GreensEval(float(result.value), result.terms_used, result.tail_estimate, x_region, y_region)


def eval_G(x: PointLike, y: PointLike, cfg: TwoDiskConfig, policy: Optional[SeriesPolicy] = None,
           x_hint: Optional[RegionTag] = None, y_hint: Optional[RegionTag] = None) -> GreensEval:
    """
    Evaluate the Green's function G(x, y).

    Finite at both disk centers; continuous in x across the interfaces.
    """
    policy = policy or SeriesPolicy()
    x, y = as_point(x), as_point(y)
    x_region, y_region = _regions(x, y, cfg, x_hint, y_hint, False)
    expansion = green_expansion(x_region.tag, y_region.tag, cfg)
    result = evaluate_expansion(expansion, x, y, cfg, policy)
    return GreensEval(float(result.value), result.terms_used, result.tail_estimate, x_region, y_region)


def grad_x_G(x: PointLike, y: PointLike, cfg: TwoDiskConfig, policy: Optional[SeriesPolicy] = None,
             x_hint: Optional[RegionTag] = None, y_hint: Optional[RegionTag] = None) -> GreensEval:
    """Gradient of G in x, returned as the complex number g1 + i g2."""
    policy = policy or SeriesPolicy()
    x, y = as_point(x), as_point(y)
    x_region, y_region = _regions(x, y, cfg, x_hint, y_hint, True)
    expansion = green_expansion(x_region.tag, y_region.tag, cfg)
    result = evaluate_expansion(expansion, x, y, cfg, policy, gradient=True)
    return GreensEval(complex(result.value), result.terms_used, result.tail_estimate, x_region, y_region)


@dataclass
class InterfaceJump:
    value_jump: float
    flux_jump: float
    inside_normal_derivative: float
    outside_normal_derivative: float
    tail_estimate: float


def richardson_limit(f: Callable[[float], float], h: float) -> float:
    """Limit of f(h) as h -> 0 from samples at h, h/2, h/4 (errors through O(h^2) removed)."""
    f1, f2, f4 = f(h), f(h / 2.0), f(h / 4.0)
    r1, r2 = 2.0 * f2 - f1, 2.0 * f4 - f2
    return (4.0 * r2 - r1) / 3.0


def interface_jump(y: PointLike, s: PointLike, which: int, cfg: TwoDiskConfig,
                   policy: Optional[SeriesPolicy] = None, h: Optional[float] = None) -> InterfaceJump:
    """
    Jumps of G and of a * dG/dnu across the boundary of disk `which` at s.

    One-sided limits are extrapolated from points s +/- h nu.
    """
    policy = policy or SeriesPolicy()
    y = as_point(y)
    nu = interface_normal(s, which, cfg)
    s = cfg.center(which) + cfg.radius(which) * nu
    h = cfg.eps / 100.0 if h is None else h
    if not (1e-8 < h < cfg.eps / 10.0):
        raise ValueError("h must be between 1e-8 and eps/10")
    if abs(abs(y - cfg.center(which)) - cfg.radius(which)) <= 4.0 * h:
        raise ValueError("source point must be off the interface")

    outside, inside = RegionTag.MATRIX, RegionTag.from_index(which)
    tails = []

    def value(side: RegionTag, sign: float) -> Callable[[float], float]:
        def f(step: float) -> float:
            res = eval_G(s + sign * step * nu, y, cfg, policy, x_hint=side)
            tails.append(res.tail_estimate)
            return res.value
        return f

    def normal_derivative(side: RegionTag, sign: float) -> Callable[[float], float]:
        def f(step: float) -> float:
            res = grad_x_G(s + sign * step * nu, y, cfg, policy, x_hint=side)
            tails.append(res.tail_estimate)
            return (res.value * nu.conjugate()).real
        return f

    v_out = richardson_limit(value(outside, 1.0), h)
    v_in = richardson_limit(value(inside, -1.0), h)
    d_out = richardson_limit(normal_derivative(outside, 1.0), h)
    d_in = richardson_limit(normal_derivative(inside, -1.0), h)
    a_in = cfg.conductivity(which)
    return InterfaceJump(
        value_jump=abs(v_out - v_in),
        flux_jump=abs(d_out - a_in * d_in),
        inside_normal_derivative=d_in,
        outside_normal_derivative=d_out,
        tail_estimate=max(tails),
    )


def flux_around_source(y: PointLike, rho: float, cfg: TwoDiskConfig, policy: Optional[SeriesPolicy] = None,
                       n: int = 256) -> float:
    """
    Trapezoid approximation of the contour integral of a * dG/dnu on |x - y| = rho.

    Raises:
        InvalidContourError: If the circle meets an interface or encloses a disk center.
    """
    policy = policy or SeriesPolicy()
    y = as_point(y)
    for i in (1, 2):
        d = abs(y - cfg.center(i))
        if abs(d - cfg.radius(i)) <= rho:
            raise InvalidContourError(f"contour of radius {rho} around {y} crosses interface {i}")
        if d <= rho:
            raise InvalidContourError(f"contour of radius {rho} around {y} encloses the center of disk {i}")
    region = classify(y, cfg)
    a = cfg.conductivity(region.tag.index)
    theta = 2.0 * np.pi * np.arange(n) / n
    total = 0.0
    for nu in np.exp(1j * theta):
        g = grad_x_G(y + rho * nu, y, cfg, policy, x_hint=region.tag).value
        total += (g * nu.conjugate()).real
    return a * total * rho * 2.0 * np.pi / n


def symmetry_defect(x: PointLike, y: PointLike, cfg: TwoDiskConfig, policy: Optional[SeriesPolicy] = None) -> float:
    """|G(x, y) - G(y, x)|; measured, not assumed to vanish."""
    return abs(eval_G(x, y, cfg, policy).value - eval_G(y, x, cfg, policy).value)
