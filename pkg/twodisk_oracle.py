"""
Finite-volume reference solver for D_i(a D_i u) = D_i f_i + f3 on a box.

Cell-centered five-point scheme with harmonic-mean face coefficients. The
assembled matrix is the negative of the discrete operator, so it is
symmetric positive definite for Dirichlet data and is solved with
preconditioned conjugate gradients.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Literal, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from twodisk_errors import ResolutionError, ShapeMismatchError, SolverError, TwoDiskError
from twodisk_geometry import TwoDiskConfig
from twodisk_greens import SeriesPolicy
from twodisk_potentials import PiecewiseSource, PotentialEvaluator, QuadratureSettings, solve_u

logger = logging.getLogger(__name__)

Box = Tuple[float, float, float, float]
BoundaryCondition = Literal["dirichlet-from-series", "zero-dirichlet"]

DEFAULT_BOX: Box = (-4.0, 4.0, -4.0, 4.0)
MIN_CELLS = 64
MIN_GAP_CELLS = 6
MIN_MARGIN = 0.5


@dataclass
class FvGrid:
    """Cell-centered grid, its coefficients and (after a solve) the solution; arrays are indexed [iy, ix]."""

    box: Box
    n: int
    hx: float
    hy: float
    centers: np.ndarray
    coefficient: np.ndarray
    face_x: np.ndarray  # (n, n+1) vertical faces, boundary columns hold the adjacent cell value
    face_y: np.ndarray  # (n+1, n) horizontal faces
    source: np.ndarray = None  # integrated div f + f3 per cell
    boundary: Dict[str, np.ndarray] = field(default_factory=dict)
    solution: Optional[np.ndarray] = None
    iterations: int = 0
    residual: float = 0.0
    runtime_s: float = 0.0

    @property
    def h(self) -> float:
        return max(self.hx, self.hy)

    def boundary_points(self) -> Dict[str, np.ndarray]:
        x0, x1, y0, y1 = self.box
        xs = self.centers[0, :].real
        ys = self.centers[:, 0].imag
        return {
            "west": x0 + 1j * ys, "east": x1 + 1j * ys,
            "south": xs + 1j * y0, "north": xs + 1j * y1,
        }


@dataclass
class ComparisonReport:
    l2_rel: float
    linf_rel: float
    n_compared: int

    def to_dict(self) -> Dict[str, float]:
        return {"l2_rel": self.l2_rel, "linf_rel": self.linf_rel, "n_compared": self.n_compared}


def region_indices(points: np.ndarray, cfg: TwoDiskConfig) -> np.ndarray:
    """0 (matrix), 1 or 2 for every point; closed disks win."""
    out = np.zeros(points.shape, dtype=int)
    out[np.abs(points - cfg.c1) <= cfg.r1] = 1
    out[np.abs(points - cfg.c2) <= cfg.r2] = 2
    return out


def interface_distance(points: np.ndarray, cfg: TwoDiskConfig) -> np.ndarray:
    return np.minimum(np.abs(np.abs(points - cfg.c1) - cfg.r1), np.abs(np.abs(points - cfg.c2) - cfg.r2))


def _piecewise(src: PiecewiseSource, cfg: TwoDiskConfig, points: np.ndarray, scalar: bool) -> np.ndarray:
    regions = region_indices(points, cfg)
    out = np.zeros(points.shape, dtype=float if scalar else complex)
    for j, comp in src.components.items():
        mask = regions == j
        if not np.any(mask):
            continue
        out[mask] = comp.scalar_values(points[mask]) if scalar else comp.field_values(points[mask])
    return out


def build_grid(cfg: TwoDiskConfig, box: Box = DEFAULT_BOX, n: int = 256,
               src: Optional[PiecewiseSource] = None) -> FvGrid:
    """
    Cell geometry and face coefficients.

    Raises:
        ResolutionError: If n < 64, fewer than 6 cells span the gap, or the
            disks or source support come closer than 0.5 to the box edge.
    """
    if n < MIN_CELLS:
        raise ResolutionError(f"n must be at least {MIN_CELLS}, got {n}")
    x0, x1, y0, y1 = box
    if x1 <= x0 or y1 <= y0:
        raise ResolutionError(f"degenerate box {box}")
    hx, hy = (x1 - x0) / n, (y1 - y0) / n
    if cfg.eps / max(hx, hy) < MIN_GAP_CELLS:
        raise ResolutionError(f"gap eps={cfg.eps} spans {cfg.eps / max(hx, hy):.2f} cells; need {MIN_GAP_CELLS}")

    disks = [(cfg.c1, cfg.r1), (cfg.c2, cfg.r2)]
    if src is not None:
        disks += [(c.center, c.radius) for c in src.components.values()]
    for c, r in disks:
        margin = min(c.real - r - x0, x1 - c.real - r, c.imag - r - y0, y1 - c.imag - r)
        if margin < MIN_MARGIN:
            raise ResolutionError(f"disk at {c} (radius {r}) is {margin:.3f} from the box edge")

    xs = x0 + (np.arange(n) + 0.5) * hx
    ys = y0 + (np.arange(n) + 0.5) * hy
    centers = xs[None, :] + 1j * ys[:, None]
    coefficient = np.choose(region_indices(centers, cfg), [1.0, cfg.k1, cfg.k2])

    face_x = np.empty((n, n + 1))
    face_x[:, 1:n] = 2.0 * coefficient[:, :-1] * coefficient[:, 1:] / (coefficient[:, :-1] + coefficient[:, 1:])
    face_x[:, 0], face_x[:, n] = coefficient[:, 0], coefficient[:, -1]
    face_y = np.empty((n + 1, n))
    face_y[1:n, :] = 2.0 * coefficient[:-1, :] * coefficient[1:, :] / (coefficient[:-1, :] + coefficient[1:, :])
    face_y[0, :], face_y[n, :] = coefficient[0, :], coefficient[-1, :]
    return FvGrid(box, n, hx, hy, centers, coefficient, face_x, face_y)


def assemble_matrix(grid: FvGrid) -> sp.csr_matrix:
    """Negative discrete operator with Dirichlet half-cell closures on the box edge."""
    n, hx, hy = grid.n, grid.hx, grid.hy
    index = np.arange(n * n).reshape(n, n)
    tx = grid.face_x * (hy / hx)
    ty = grid.face_y * (hx / hy)
    diag = tx[:, :-1] + tx[:, 1:] + ty[:-1, :] + ty[1:, :]
    diag[:, 0] += tx[:, 0]
    diag[:, -1] += tx[:, -1]
    diag[0, :] += ty[0, :]
    diag[-1, :] += ty[-1, :]

    rows = [index.ravel()]
    cols = [index.ravel()]
    vals = [diag.ravel()]
    for a, b, t in ((index[:, :-1], index[:, 1:], tx[:, 1:n]), (index[:-1, :], index[1:, :], ty[1:n, :])):
        rows += [a.ravel(), b.ravel()]
        cols += [b.ravel(), a.ravel()]
        vals += [-t.ravel(), -t.ravel()]
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n))


def source_term(grid: FvGrid, src: PiecewiseSource, cfg: TwoDiskConfig) -> np.ndarray:
    """Integral of div f + f3 over each cell: face-midpoint differencing of f, 2x2 Gauss average of f3."""
    x0, _, y0, _ = grid.box
    n, hx, hy = grid.n, grid.hx, grid.hy
    xs = grid.centers[0, :].real
    ys = grid.centers[:, 0].imag
    xf = x0 + np.arange(n + 1) * hx
    yf = y0 + np.arange(n + 1) * hy
    fx = _piecewise(src, cfg, xf[None, :] + 1j * ys[:, None], scalar=False).real
    fy = _piecewise(src, cfg, xs[None, :] + 1j * yf[:, None], scalar=False).imag
    div = hy * (fx[:, 1:] - fx[:, :-1]) + hx * (fy[1:, :] - fy[:-1, :])

    g = 0.5 / math.sqrt(3.0)
    f3 = np.zeros((n, n))
    for sx in (-g, g):
        for sy in (-g, g):
            f3 += 0.25 * _piecewise(src, cfg, grid.centers + complex(sx * hx, sy * hy), scalar=True)
    return div + f3 * hx * hy


def series_boundary_values(grid: FvGrid, cfg: TwoDiskConfig, src: PiecewiseSource,
                           policy: Optional[SeriesPolicy] = None,
                           quad: Optional[QuadratureSettings] = None) -> Dict[str, np.ndarray]:
    """Dirichlet data from the representation formula at the boundary face midpoints."""
    ev = PotentialEvaluator(cfg, src, quad)
    return {side: np.array([solve_u(p, cfg, src, policy, evaluator=ev).value for p in pts])
            for side, pts in grid.boundary_points().items()}


def _boundary_rhs(grid: FvGrid) -> np.ndarray:
    n, hx, hy = grid.n, grid.hx, grid.hy
    rhs = np.zeros((n, n))
    b = grid.boundary
    rhs[:, 0] += 2.0 * grid.face_x[:, 0] * (hy / hx) * b["west"]
    rhs[:, -1] += 2.0 * grid.face_x[:, n] * (hy / hx) * b["east"]
    rhs[0, :] += 2.0 * grid.face_y[0, :] * (hx / hy) * b["south"]
    rhs[-1, :] += 2.0 * grid.face_y[n, :] * (hx / hy) * b["north"]
    return rhs


def solve_system(grid: FvGrid, source: np.ndarray, boundary: Optional[Dict[str, np.ndarray]] = None,
                 rtol: float = 1e-10, maxiter: Optional[int] = None) -> FvGrid:
    """
    Solve A u = -source + boundary terms with Jacobi-preconditioned CG.

    Raises:
        SolverError: If CG stops before the relative residual reaches rtol.
    """
    n = grid.n
    grid.source = source
    grid.boundary = boundary or {side: np.zeros(n) for side in ("west", "east", "south", "north")}
    start = time.perf_counter()
    A = assemble_matrix(grid)
    b = (-source + _boundary_rhs(grid)).ravel()

    if not np.any(b):
        grid.solution = np.zeros((n, n))
        grid.runtime_s = time.perf_counter() - start
        return grid

    inv_diag = 1.0 / A.diagonal()
    M = LinearOperator(A.shape, matvec=lambda v: inv_diag * v, dtype=float)
    count = {"it": 0}

    def callback(_):
        count["it"] += 1

    maxiter = maxiter or 20 * n * n
    x, info = cg(A, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=M, callback=callback)
    residual = float(np.linalg.norm(b - A @ x) / np.linalg.norm(b))
    grid.iterations, grid.residual = count["it"], residual
    grid.runtime_s = time.perf_counter() - start
    if info != 0:
        raise SolverError(f"CG did not converge in {count['it']} iterations (residual {residual:.3e})",
                          iterations=count["it"], residual=residual)
    if count["it"] > 5 * n:
        logger.warning(f"CG needed {count['it']} iterations for n={n}")
    logger.debug(f"CG converged in {count['it']} iterations, residual {residual:.3e}")
    grid.solution = x.reshape(n, n)
    return grid


def fv_solve(cfg: TwoDiskConfig, src: PiecewiseSource, box: Box = DEFAULT_BOX, n: int = 256,
             bc: BoundaryCondition = "dirichlet-from-series", policy: Optional[SeriesPolicy] = None,
             quad: Optional[QuadratureSettings] = None,
             boundary_values: Optional[Dict[str, np.ndarray]] = None) -> FvGrid:
    """
    Finite-volume solution of the transmission problem on a box.

    Args:
        cfg: Geometry and conductivities.
        src: Piecewise source.
        box: (x_min, x_max, y_min, y_max).
        n: Cells per side.
        bc: "dirichlet-from-series" takes boundary data from solve_u;
            "zero-dirichlet" sets u = 0 on the box edge.
        policy: Series policy for the boundary data.
        quad: Quadrature settings for the boundary data.
        boundary_values: Precomputed boundary data per side (west, east, south, north).

    Returns:
        The solved FvGrid.

    Raises:
        ResolutionError: If the grid does not resolve the gap or the box is too tight.
        SolverError: If CG does not converge.
    """
    grid = build_grid(cfg, box, n, src)
    source = source_term(grid, src, cfg)
    if boundary_values is None and bc == "dirichlet-from-series" and not src.is_zero:
        logger.info(f"computing series boundary data at {4 * n} points")
        boundary_values = series_boundary_values(grid, cfg, src, policy, quad)
    elif bc not in ("dirichlet-from-series", "zero-dirichlet"):
        raise ValueError(f"bc must be dirichlet-from-series or zero-dirichlet, got {bc}")
    return solve_system(grid, source, boundary_values)


def face_fluxes(grid: FvGrid) -> Tuple[np.ndarray, np.ndarray]:
    """
    Discrete a du/dn times face length on every face, in the +x / +y direction.

    Boundary faces use the half-cell difference to the Dirichlet data.
    """
    if grid.solution is None:
        raise ValueError("grid has no solution yet")
    u, n, hx, hy = grid.solution, grid.n, grid.hx, grid.hy
    b = grid.boundary
    flux_x = np.empty((n, n + 1))
    flux_x[:, 1:n] = grid.face_x[:, 1:n] * (u[:, 1:] - u[:, :-1]) * (hy / hx)
    flux_x[:, 0] = 2.0 * grid.face_x[:, 0] * (u[:, 0] - b["west"]) * (hy / hx)
    flux_x[:, n] = 2.0 * grid.face_x[:, n] * (b["east"] - u[:, -1]) * (hy / hx)
    flux_y = np.empty((n + 1, n))
    flux_y[1:n, :] = grid.face_y[1:n, :] * (u[1:, :] - u[:-1, :]) * (hx / hy)
    flux_y[0, :] = 2.0 * grid.face_y[0, :] * (u[0, :] - b["south"]) * (hx / hy)
    flux_y[n, :] = 2.0 * grid.face_y[n, :] * (b["north"] - u[-1, :]) * (hx / hy)
    return flux_x, flux_y


def cell_balance(grid: FvGrid) -> np.ndarray:
    """Net outward flux minus the cell source; zero up to the solver residual."""
    flux_x, flux_y = face_fluxes(grid)
    net = flux_x[:, 1:] - flux_x[:, :-1] + flux_y[1:, :] - flux_y[:-1, :]
    return net - grid.source


def sample_series(grid: FvGrid, cfg: TwoDiskConfig, src: PiecewiseSource, policy: Optional[SeriesPolicy] = None,
                  quad: Optional[QuadratureSettings] = None, stride: int = 1) -> np.ndarray:
    """solve_u at every stride-th cell center; other cells and failed points are NaN."""
    out = np.full((grid.n, grid.n), np.nan)
    ev = PotentialEvaluator(cfg, src, quad)
    failures = 0
    for iy in range(0, grid.n, stride):
        for ix in range(0, grid.n, stride):
            try:
                out[iy, ix] = solve_u(grid.centers[iy, ix], cfg, src, policy, evaluator=ev).value
            except TwoDiskError as e:
                failures += 1
                logger.debug(f"series sample failed at {grid.centers[iy, ix]}: {str(e)}")
    if failures:
        logger.warning(f"{failures} series samples failed and are excluded")
    return out


def compare(series_field: np.ndarray, fv: FvGrid, exclusion_cells: int = 2,
            cfg: Optional[TwoDiskConfig] = None) -> ComparisonReport:
    """
    Mean-adjusted relative L2 and Linf differences between two fields on the same cells.

    Cells within exclusion_cells*h of an interface and NaN samples are skipped.

    Raises:
        ShapeMismatchError: If the field does not match the grid.
    """
    reference = fv.solution
    if reference is None or np.shape(series_field) != reference.shape:
        raise ShapeMismatchError(f"field shape {np.shape(series_field)} does not match grid "
                                 f"{None if reference is None else reference.shape}")
    if exclusion_cells < 0:
        raise ValueError("exclusion_cells must be non-negative")
    mask = np.isfinite(series_field) & np.isfinite(reference)
    if cfg is not None and exclusion_cells:
        mask &= interface_distance(fv.centers, cfg) > exclusion_cells * fv.h
    count = int(np.count_nonzero(mask))
    if count == 0:
        return ComparisonReport(float("nan"), float("nan"), 0)
    a = series_field[mask] - np.mean(series_field[mask])
    b = reference[mask] - np.mean(reference[mask])
    diff = a - b
    l2_norm, linf_norm = np.linalg.norm(a), np.max(np.abs(a))
    l2 = float(np.linalg.norm(diff) / l2_norm) if l2_norm > 0 else float(np.linalg.norm(diff))
    linf = float(np.max(np.abs(diff)) / linf_norm) if linf_norm > 0 else float(np.max(np.abs(diff)))
    return ComparisonReport(l2, linf, count)


def observed_order(coarse_error: float, fine_error: float, refinement: float = 2.0) -> float:
    """Convergence order from errors at two resolutions."""
    if coarse_error <= 0 or fine_error <= 0:
        raise ValueError("errors must be positive")
    return math.log(coarse_error / fine_error) / math.log(refinement)


def manufactured_source(grid: FvGrid, grad_exact: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """
    Cell source for f := a grad u* sampled at the face midpoints, so that u* solves the scheme to O(h^2).

    grad_exact returns du/dx1 + i du/dx2.
    """
    x0, _, y0, _ = grid.box
    n, hx, hy = grid.n, grid.hx, grid.hy
    xs = grid.centers[0, :].real
    ys = grid.centers[:, 0].imag
    xf = x0 + np.arange(n + 1) * hx
    yf = y0 + np.arange(n + 1) * hy
    fx = grid.face_x * grad_exact(xf[None, :] + 1j * ys[:, None]).real
    fy = grid.face_y * grad_exact(xs[None, :] + 1j * yf[:, None]).imag
    return hy * (fx[:, 1:] - fx[:, :-1]) + hx * (fy[1:, :] - fy[:-1, :])
