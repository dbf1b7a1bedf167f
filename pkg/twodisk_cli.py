#!/usr/bin/env python3
"""
Command-line driver: map checks, Green's function audits, gradient sweeps
with rate fits, and the finite-volume comparison.

Usage:
    python twodisk_cli.py [global flags] <subcommand> [flags]

Every sweep point runs as an independent job; rows are sorted before they are
written so the CSV is reproducible. JSON reports carry "schema_version".
"""

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from twodisk_errors import InvalidConfigurationError, TwoDiskError
from twodisk_geometry import (
    CONFIG_KEYS,
    RegionTag,
    TwoDiskConfig,
    as_point,
    blowup_factor,
    config_from_settings,
    effective_gap_parameter,
    general_blowup_factor,
    load_settings,
)
from twodisk_greens import (
    SeriesPolicy,
    eval_aux,
    eval_G,
    flux_around_source,
    grad_x_G,
    interface_jump,
    symmetry_defect,
)
from twodisk_moebius import ConjMoebius, inversion, run_invariant_suite
from twodisk_oracle import compare, fv_solve, sample_series
from twodisk_potentials import (
    PotentialEvaluator,
    QuadratureSettings,
    SourceSpec,
    grad_u,
    higher_deriv_u,
    solve_u,
)

logger = logging.getLogger("twodisk")

SCHEMA_VERSION = 1
DEFAULT_EPS = (0.32, 0.16, 0.08, 0.04, 0.02, 0.01)
DEFAULT_K = (1.0, 10.0, 100.0, 1000.0, 10000.0)
DEFAULT_TAU = (0.1, 0.14, 0.2, 0.28, 0.4)
DEFAULT_RADII = ((1.0, 1.0), (2.0, 0.5), (5.0, 5.0))
COLLAPSE_FACTOR = 3.0
FIT_TAIL_FRACTION = 0.01


class RateFit(BaseModel):
    """Least-squares line through (log eps, log value) plus the spread of the compensated quantity."""

    slope: float
    intercept: float
    r_squared: float
    band_ratio: float
    points: int

    @classmethod
    def fit(cls, x: Sequence[float], y: Sequence[float], compensated: Optional[Sequence[float]] = None) -> "RateFit":
        if len(x) < 2:
            raise ValueError("a rate fit needs at least two points")
        lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
        slope, intercept = np.polyfit(lx, ly, 1)
        residual = ly - (slope * lx + intercept)
        total = np.sum((ly - np.mean(ly)) ** 2)
        r2 = 1.0 - float(np.sum(residual ** 2)) / float(total) if total > 0 else 1.0
        comp = np.asarray(compensated if compensated is not None else y, dtype=float)
        return cls(slope=float(slope), intercept=float(intercept), r_squared=min(max(r2, 0.0), 1.0),
                   band_ratio=float(np.max(comp) / np.min(comp)), points=len(x))


class SweepSpec(BaseModel):
    """Parameter grid of a sweep; k and radius lists are paired element-wise."""

    model_config = ConfigDict(frozen=True)

    eps_list: Tuple[float, ...] = Field(default=DEFAULT_EPS, description="Gap widths")
    k1_list: Tuple[float, ...] = Field(default=DEFAULT_K, description="Conductivities of disk 1")
    k2_list: Tuple[float, ...] = Field(default=DEFAULT_K, description="Conductivities of disk 2, paired with k1_list")
    r1_list: Tuple[float, ...] = Field(default=(1.0,), description="Radii of disk 1")
    r2_list: Tuple[float, ...] = Field(default=(1.0,), description="Radii of disk 2, paired with r1_list")
    source: SourceSpec = Field(default_factory=SourceSpec)
    policy: SeriesPolicy = Field(default_factory=SeriesPolicy)
    quad: QuadratureSettings = Field(default_factory=QuadratureSettings)

    @field_validator("eps_list", "k1_list", "k2_list", "r1_list", "r2_list")
    def validate_non_empty(cls, v):
        if len(v) == 0:
            raise ValueError("sweep lists must be non-empty")
        return v

    @model_validator(mode="after")
    def validate_pairs(self):
        if len(self.k1_list) != len(self.k2_list):
            raise ValueError("k1_list and k2_list must have the same length")
        if len(self.r1_list) != len(self.r2_list):
            raise ValueError("r1_list and r2_list must have the same length")
        return self

    def configs(self) -> List[TwoDiskConfig]:
        """All configurations of the grid; raises InvalidConfigurationError on the first invalid one."""
        out = []
        for r1, r2 in zip(self.r1_list, self.r2_list):
            for k1, k2 in zip(self.k1_list, self.k2_list):
                for eps in self.eps_list:
                    out.append(config_from_settings({}, eps=eps, r1=r1, r2=r2, k1=k1, k2=k2))
        return out


# ---------------------------------------------------------------------------
# Jobs (top level so that worker processes can unpickle them)
# ---------------------------------------------------------------------------

def probe_points(cfg: TwoDiskConfig) -> Dict[str, complex]:
    """Origin plus one point in each inclusion, half a radius from the gap."""
    return {
        "origin": 0j,
        "inclusion1": cfg.c1 - cfg.r1 / 2.0,
        "inclusion2": cfg.c2 + cfg.r2 / 2.0,
    }


def _config_columns(cfg: TwoDiskConfig) -> Dict[str, Any]:
    return {"eps": cfg.eps, "r1": cfg.r1, "r2": cfg.r2, "k1": cfg.k1, "k2": cfg.k2,
            "tau": effective_gap_parameter(cfg)}


def gradient_job(job: Tuple[TwoDiskConfig, SourceSpec, SeriesPolicy, QuadratureSettings, Tuple[str, ...]]) -> List[Dict[str, Any]]:
    """|Du| at the requested probes with the compensated quantities."""
    cfg, source, policy, quad, probes = job
    rows = []
    try:
        src = source.build(cfg)
        ev = PotentialEvaluator(cfg, src, quad)
    except TwoDiskError as e:
        return [{**_config_columns(cfg), "probe": name, "status": f"error: {str(e)}"} for name in probes]

    points = probe_points(cfg)
    for name in probes:
        row = {**_config_columns(cfg), "probe": name}
        try:
            rep = grad_u(points[name], cfg, src, policy, evaluator=ev)
            du = abs(rep.value)
            comp = du / blowup_factor(cfg)
            k_factor = 1.0 if name == "origin" else cfg.conductivity(rep.region.tag.index) + 1.0
            row.update({
                "x1": points[name].real, "x2": points[name].imag,
                "du1": rep.value.real, "du2": rep.value.imag, "du_abs": du,
                "blowup": blowup_factor(cfg),
                "compensated": comp,
                "compensated_k": comp * k_factor,
                "compensated_general": du / general_blowup_factor(cfg),
                "compensated_insulating": du * (math.sqrt(cfg.eps) + min(cfg.k1, cfg.k2)),
                "terms_used": rep.terms_used, "tail_estimate": rep.tail_estimate,
                "quad_error": rep.quad_error, "status": "ok",
            })
        except TwoDiskError as e:
            logger.error(f"gradient job failed for {cfg} at {name}: {str(e)}")
            row["status"] = f"error: {str(e)}"
        rows.append(row)
    return rows


def higher_deriv_job(job: Tuple[TwoDiskConfig, SourceSpec, SeriesPolicy, QuadratureSettings, int]) -> List[Dict[str, Any]]:
    cfg, source, policy, quad, m = job
    row = {**_config_columns(cfg), "m": m}
    try:
        rep = higher_deriv_u(0j, m, cfg, source.build(cfg), policy, quad)
        row.update({"dmu_norm": float(np.linalg.norm(rep.value)), "terms_used": rep.terms_used,
                    "tail_estimate": rep.tail_estimate, "quad_error": rep.quad_error, "status": "ok"})
    except TwoDiskError as e:
        logger.error(f"higher-derivative job failed for {cfg}: {str(e)}")
        row["status"] = f"error: {str(e)}"
    return [row]


def lower_bound_job(job: Tuple[TwoDiskConfig, SourceSpec, SeriesPolicy, QuadratureSettings]) -> List[Dict[str, Any]]:
    """D1u(0) and the largest D1h on the segment |x1| <= eps + eps^2/4, where h is minus the matrix h-potential."""
    cfg, source, policy, quad = job
    row = _config_columns(cfg)
    try:
        src = source.build(cfg)
        ev = PotentialEvaluator(cfg, src, quad)
        rep = grad_u(0j, cfg, src, policy, evaluator=ev)
        half = cfg.eps + cfg.eps ** 2 / 4.0
        segment = np.linspace(-half, half, 20)
        d1h = float(np.max(-ev.evaluate(0, segment.astype(complex)).dh.real))
        ab = cfg.alpha_beta
        row.update({
            "d1u": rep.value.real, "d2u": rep.value.imag,
            "compensated": abs(rep.value.real) * (1.0 - (1.0 - math.sqrt(cfg.eps)) * ab),
            "d1h_max_on_gap": d1h,
            "terms_used": rep.terms_used, "tail_estimate": rep.tail_estimate, "quad_error": rep.quad_error,
            "status": "ok",
        })
    except TwoDiskError as e:
        logger.error(f"lower-bound job failed for {cfg}: {str(e)}")
        row["status"] = f"error: {str(e)}"
    return [row]


def run_jobs(fn: Callable[[Any], List[Dict[str, Any]]], jobs: Iterable[Any], workers: int = 1) -> List[Dict[str, Any]]:
    """Run jobs serially or on a process pool; the row order is independent of completion order."""
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        results = [fn(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, jobs))
    rows = [row for batch in results for row in batch]
    return sorted(rows, key=_row_key)


def _row_key(row: Dict[str, Any]) -> Tuple:
    return tuple(str(row.get(k, "")) if k == "probe" else float(row.get(k, 0.0))
                 for k in ("r1", "r2", "k1", "k2", "eps", "probe", "m"))


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def write_csv(rows: List[Dict[str, Any]], path: Path) -> None:
    columns: List[str] = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns, restval="", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _json_default(value: Any) -> Any:
    if isinstance(value, complex):
        return [value.real, value.imag]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    raise TypeError(f"cannot serialize {type(value).__name__}")


def emit(command: str, report: Dict[str, Any], rows: Optional[List[Dict[str, Any]]], args: argparse.Namespace) -> None:
    """Write <command>.csv / <command>.json under --out and print the report."""
    report = {"schema_version": SCHEMA_VERSION, "command": command, **report}
    text = json.dumps(report, indent=2, sort_keys=True, default=_json_default)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if rows is not None:
            write_csv(rows, out / f"{command}.csv")
        (out / f"{command}.json").write_text(text + "\n", encoding="utf-8")
        logger.info(f"wrote {command} results to {out}")
    if args.json:
        print(text)
    else:
        _print_summary(command, report, rows)


def _print_summary(command: str, report: Dict[str, Any], rows: Optional[List[Dict[str, Any]]]) -> None:
    print("\n" + "=" * 80)
    print(command)
    print("=" * 80)
    for key, value in report.items():
        if key in ("schema_version", "command", "checks", "rows"):
            continue
        print(f"{key}: {json.dumps(value, default=_json_default)}")
    if "checks" in report:
        for name, check in report["checks"].items():
            mark = "✓" if check["passed"] else "✗"
            print(f"{mark} {name}: max_error={check['max_error']:.3e} (limit {check['limit']:.3e})")
    if rows is not None:
        failed = sum(1 for r in rows if r.get("status", "ok") != "ok")
        print(f"rows: {len(rows)} ({failed} failed)")


def _failures(rows: List[Dict[str, Any]]) -> int:
    return sum(1 for r in rows if r.get("status") != "ok")


def _fit_rows(rows: List[Dict[str, Any]], value_key: str, comp_key: str) -> Optional[RateFit]:
    usable = [r for r in rows if r.get("status") == "ok" and r[value_key] > 0
              and r.get("tail_estimate", 0.0) < FIT_TAIL_FRACTION * r[value_key]]
    if len(usable) < 2:
        return None
    return RateFit.fit([r["eps"] for r in usable], [r[value_key] for r in usable], [r[comp_key] for r in usable])


def _band(values: Sequence[float]) -> Optional[float]:
    values = [v for v in values if v > 0]
    return max(values) / min(values) if values else None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _parse_point(text: str) -> complex:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected x1,x2 but got {text!r}")
    return as_point(parts)


def _parse_floats(text: str) -> Tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _parse_radii(text: str) -> Tuple[Tuple[float, float], ...]:
    pairs = []
    for chunk in text.split(";"):
        r = _parse_floats(chunk)
        if len(r) != 2:
            raise argparse.ArgumentTypeError(f"expected r1,r2 pairs separated by ';' but got {text!r}")
        pairs.append((r[0], r[1]))
    return tuple(pairs)


def _region_hint(text: Optional[str]) -> Optional[RegionTag]:
    return RegionTag(text) if text else None


def cmd_maps_check(cfg: TwoDiskConfig, args: argparse.Namespace, policy: SeriesPolicy, quad: QuadratureSettings) -> int:
    maps = None
    if args.corrupt:
        m = inversion(1, cfg).matrix.copy()
        m[0, 1] += 1e-6
        maps = {1: ConjMoebius.from_matrix(m, conj=True), 2: inversion(2, cfg)}
    checks = run_invariant_suite(cfg, seed=args.seed, maps=maps)
    passed = all(c["passed"] for c in checks.values())
    emit("maps-check", {"config": cfg, "passed": passed, "checks": checks}, None, args)
    return 0 if passed else 1


def cmd_green_eval(cfg: TwoDiskConfig, args: argparse.Namespace, policy: SeriesPolicy, quad: QuadratureSettings) -> int:
    evaluate = {"G": eval_G, "aux": eval_aux, "grad": grad_x_G}[args.quantity]
    res = evaluate(args.x, args.y, cfg, policy, x_hint=_region_hint(args.x_side), y_hint=_region_hint(args.y_side))
    emit("green-eval", {
        "config": cfg, "quantity": args.quantity, "x": args.x, "y": args.y, "value": res.value,
        "terms_used": res.terms_used, "tail_estimate": res.tail_estimate,
        "x_region": res.x_region.tag.value, "y_region": res.y_region.tag.value,
    }, None, args)
    return 0


def audit_sources(cfg: TwoDiskConfig) -> Dict[str, complex]:
    """One source point per region, away from the interfaces and centers."""
    return {
        "matrix": complex(0.0, 1.5 * cfg.length_scale),
        "inclusion1": cfg.c1 + 0.4 * cfg.r1 * complex(0.6, 0.8),
        "inclusion2": cfg.c2 + 0.4 * cfg.r2 * complex(-0.6, 0.8),
    }


def cmd_jump_audit(cfg: TwoDiskConfig, args: argparse.Namespace, policy: SeriesPolicy, quad: QuadratureSettings) -> int:
    rows = []
    theta = 2.0 * np.pi * (np.arange(args.points) + 0.5) / args.points
    for source_name, y in audit_sources(cfg).items():
        for which in (1, 2):
            for t in theta:
                s = cfg.center(which) + cfg.radius(which) * np.exp(1j * t)
                row = {"source": source_name, "disk": which, "theta": float(t)}
                try:
                    jump = interface_jump(y, s, which, cfg, policy)
                    row.update({"value_jump": jump.value_jump, "flux_jump": jump.flux_jump,
                                "tail_estimate": jump.tail_estimate, "status": "ok"})
                except TwoDiskError as e:
                    row["status"] = f"error: {str(e)}"
                rows.append(row)

    fluxes, defects = {}, {}
    rho = 0.1 * min(cfg.r1, cfg.r2)
    for source_name, y in audit_sources(cfg).items():
        fluxes[source_name] = flux_around_source(y, rho, cfg, policy)
        defects[source_name] = symmetry_defect(y, 0.5j * cfg.length_scale, cfg, policy)
    ok = [r for r in rows if r["status"] == "ok"]
    max_value = max((r["value_jump"] for r in ok), default=math.nan)
    max_flux = max((r["flux_jump"] for r in ok), default=math.nan)
    flux_error = max(abs(f - 2.0 * math.pi) for f in fluxes.values())
    passed = (len(ok) == len(rows) and max_value <= args.jump_tol and max_flux <= args.jump_tol
              and flux_error <= args.jump_tol)
    emit("jump-audit", {
        "config": cfg, "passed": passed, "max_value_jump": max_value, "max_flux_jump": max_flux,
        "flux_around_source": fluxes, "flux_error": flux_error, "symmetry_defect": defects,
    }, rows, args)
    return 0 if passed else 1


def cmd_solve(cfg: TwoDiskConfig, args: argparse.Namespace, policy: SeriesPolicy, quad: QuadratureSettings) -> int:
    source = _source_spec(args)
    src = source.build(cfg)
    ev = PotentialEvaluator(cfg, src, quad)
    rows = []
    for x in args.x or [0j]:
        row = {"x1": x.real, "x2": x.imag}
        try:
            value = solve_u(x, cfg, src, policy, evaluator=ev)
            grad = grad_u(x, cfg, src, policy, evaluator=ev, x_hint=value.region.tag)
            row.update({"region": value.region.tag.value, "u": value.value, "du1": grad.value.real,
                        "du2": grad.value.imag, "terms_used": value.terms_used,
                        "tail_estimate": value.tail_estimate, "quad_error": value.quad_error, "status": "ok"})
        except TwoDiskError as e:
            row["status"] = f"error: {str(e)}"
        rows.append(row)
    emit("solve", {"config": cfg, "source": source, "points": rows}, rows, args)
    return 1 if _failures(rows) else 0


def _sweep_from_args(args: argparse.Namespace, policy: SeriesPolicy, quad: QuadratureSettings,
                     source: Optional[SourceSpec] = None) -> SweepSpec:
    k1 = args.k1_list or args.k_list
    k2 = args.k2_list or args.k_list
    try:
        return SweepSpec(eps_list=args.eps_list, k1_list=k1, k2_list=k2,
                         source=source or _source_spec(args), policy=policy, quad=quad)
    except ValidationError as e:
        raise InvalidConfigurationError(f"Invalid sweep: {str(e)}")


def cmd_rate_sweep(cfg: TwoDiskConfig, args: argparse.Namespace, policy: SeriesPolicy, quad: QuadratureSettings) -> int:
    spec = _sweep_from_args(args, policy, quad, SourceSpec(preset="lower_bound"))
    jobs = [(c, spec.source, spec.policy, spec.quad, ("origin", "inclusion1", "inclusion2")) for c in spec.configs()]
    rows = run_jobs(gradient_job, jobs, args.workers)

    fits = {}
    for k1, k2 in zip(spec.k1_list, spec.k2_list):
        origin = [r for r in rows if r["probe"] == "origin" and (r["k1"], r["k2"]) == (k1, k2)]
        fit = _fit_rows(origin, "du_abs", "compensated")
        if fit is not None:
            fits[f"k1={k1:g},k2={k2:g}"] = fit
    largest = max(zip(spec.k1_list, spec.k2_list), key=lambda k: k[0] * k[1])
    ok = [r for r in rows if r.get("status") == "ok"]
    emit("rate-sweep", {
        "fits": fits,
        "largest_k_fit": fits.get(f"k1={largest[0]:g},k2={largest[1]:g}"),
        "band_ratio_matrix": _band([r["compensated"] for r in ok if r["probe"] == "origin"]),
        "band_ratio_inclusions": _band([r["compensated_k"] for r in ok if r["probe"] != "origin"]),
        "failures": _failures(rows),
    }, rows, args)
    return 1 if _failures(rows) else 0


def collapse_source(cfg: TwoDiskConfig, radius: float = 0.1) -> SourceSpec:
    """Lower-bound bump at (-3, 0), or one unit left of disk 2 when that point is too close to it."""
    default = complex(-3.0, 0.0)
    if abs(default - cfg.c2) >= cfg.r2 + radius + 0.5:
        return SourceSpec(preset="lower_bound")
    center = cfg.c2 - cfg.r2 - 1.0
    return SourceSpec(preset="lower_bound", center_x=center.real, center_y=0.0)


def cmd_radii_collapse(cfg: TwoDiskConfig, args: argparse.Namespace, policy: SeriesPolicy, quad: QuadratureSettings) -> int:
    jobs = []
    for r1, r2 in args.radii:
        for tau in args.tau_list:
            eps = tau * tau / (2.0 * (1.0 / r1 + 1.0 / r2))
            for k in (1.0, args.k):
                c = config_from_settings({}, eps=eps, r1=r1, r2=r2, k1=k, k2=k)
                jobs.append((c, collapse_source(c), policy, quad, ("origin",)))
    rows = run_jobs(gradient_job, jobs, args.workers)

    reference = {(r["r1"], r["r2"], r["eps"]): r for r in rows if r["k1"] == 1.0 and r.get("status") == "ok"}
    table = []
    for r in rows:
        ref = reference.get((r["r1"], r["r2"], r["eps"]))
        if r["k1"] != args.k or r.get("status") != "ok" or ref is None:
            continue
        table.append({**r, "du_reference": ref["du_abs"], "amplification": r["du_abs"] / ref["du_abs"]})

    spreads, monotone = {}, {}
    for tau in args.tau_list:
        values = [t["amplification"] for t in table if math.isclose(t["tau"], tau, rel_tol=1e-9)]
        spreads[f"{tau:g}"] = _band(values)
    for r1, r2 in args.radii:
        curve = sorted((t["tau"], t["amplification"]) for t in table if (t["r1"], t["r2"]) == (r1, r2))
        monotone[f"{r1:g},{r2:g}"] = all(b[1] <= a[1] for a, b in zip(curve, curve[1:]))
    collapsed = all(s is not None and s <= COLLAPSE_FACTOR for s in spreads.values())
    emit("radii-collapse", {
        "k": args.k, "collapse_factor": COLLAPSE_FACTOR, "spread_by_tau": spreads,
        "collapsed": collapsed, "monotone_in_tau": monotone, "failures": _failures(rows),
    }, table, args)
    return 0 if collapsed and not _failures(rows) else 1


def cmd_higher_deriv(cfg: TwoDiskConfig, args: argparse.Namespace, policy: SeriesPolicy, quad: QuadratureSettings) -> int:
    spec = _sweep_from_args(args, policy, quad)
    jobs = [(c, spec.source, spec.policy, spec.quad, args.m) for c in spec.configs()]
    rows = run_jobs(higher_deriv_job, jobs, args.workers)
    fits, variation = {}, {}
    for k1, k2 in zip(spec.k1_list, spec.k2_list):
        subset = [r for r in rows if (r["k1"], r["k2"]) == (k1, k2)]
        label = f"k1={k1:g},k2={k2:g}"
        fit = _fit_rows(subset, "dmu_norm", "dmu_norm")
        if fit is not None:
            fits[label] = fit
            variation[label] = fit.band_ratio - 1.0
    emit("higher-deriv", {"m": args.m, "expected_slope": -args.m / 2.0, "fits": fits, "variation": variation,
                          "failures": _failures(rows)}, rows, args)
    return 1 if _failures(rows) else 0


def cmd_lower_bound(cfg: TwoDiskConfig, args: argparse.Namespace, policy: SeriesPolicy, quad: QuadratureSettings) -> int:
    spec = _sweep_from_args(args, policy, quad, SourceSpec(preset="lower_bound"))
    if min(spec.k1_list + spec.k2_list) < 1.0:
        raise InvalidConfigurationError("lower-bound requires k1, k2 >= 1")
    jobs = [(c, spec.source, spec.policy, spec.quad) for c in spec.configs()]
    rows = run_jobs(lower_bound_job, jobs, args.workers)
    ok = [r for r in rows if r.get("status") == "ok"]
    negative = all(r["d1u"] < 0 for r in ok)
    gap_negative = all(r["d1h_max_on_gap"] < 0 for r in ok)
    emit("lower-bound", {
        "d1u_negative": negative, "d1h_negative_on_gap": gap_negative,
        "compensated_min": min((r["compensated"] for r in ok), default=None),
        "compensated_max": max((r["compensated"] for r in ok), default=None),
        "failures": _failures(rows),
    }, rows, args)
    return 0 if negative and gap_negative and not _failures(rows) else 1


def cmd_oracle_compare(cfg: TwoDiskConfig, args: argparse.Namespace, policy: SeriesPolicy, quad: QuadratureSettings) -> int:
    policy = policy.model_copy(update={"accelerate": "on"})
    source = _source_spec(args)
    src = source.build(cfg)
    start = time.perf_counter()
    fv = fv_solve(cfg, src, tuple(args.box), args.n, args.bc, policy, quad)
    series = sample_series(fv, cfg, src, policy, quad, stride=args.stride)
    report = compare(series, fv, args.exclude_cells, cfg)
    passed = report.n_compared > 0 and report.l2_rel <= args.max_l2
    emit("oracle-compare", {
        "config": cfg, "source": source, **report.to_dict(), "n": args.n, "box": list(args.box), "bc": args.bc,
        "max_l2_rel": args.max_l2, "passed": passed,
        "iterations": fv.iterations, "residual": fv.residual, "runtime_s": time.perf_counter() - start,
    }, None, args)
    return 0 if passed else 1


COMMANDS: Dict[str, Callable[..., int]] = {
    "maps-check": cmd_maps_check,
    "green-eval": cmd_green_eval,
    "jump-audit": cmd_jump_audit,
    "solve": cmd_solve,
    "rate-sweep": cmd_rate_sweep,
    "radii-collapse": cmd_radii_collapse,
    "higher-deriv": cmd_higher_deriv,
    "lower-bound": cmd_lower_bound,
    "oracle-compare": cmd_oracle_compare,
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_geometry(p: argparse.ArgumentParser) -> None:
    for key in sorted(CONFIG_KEYS):
        p.add_argument(f"--{key}", type=float, default=None, help=f"Override {key}")


def _add_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source", default=None, help="Source preset (default: config file, else lower_bound)",
                   choices=["lower_bound", "constant_disk1", "radial_bump", "zero"])
    p.add_argument("--source-center", type=_parse_point, default=None, help="Bump center x1,x2")
    p.add_argument("--source-radius", type=float, default=None)
    p.add_argument("--source-strength", type=float, default=None)


def _add_sweep(p: argparse.ArgumentParser, eps: Sequence[float] = DEFAULT_EPS, k: Sequence[float] = DEFAULT_K) -> None:
    p.add_argument("--eps-list", type=_parse_floats, default=tuple(eps), help="Comma-separated gap widths")
    p.add_argument("--k-list", type=_parse_floats, default=tuple(k), help="Comma-separated k1 = k2 values")
    p.add_argument("--k1-list", type=_parse_floats, default=None, help="k1 values, paired with --k2-list")
    p.add_argument("--k2-list", type=_parse_floats, default=None, help="k2 values, paired with --k1-list")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twodisk", description="Two-disk conductivity Green's function tools")
    parser.add_argument("--config", default=None, help="Config file (key = value lines or JSON)")
    parser.add_argument("--tol", type=float, default=None, help="Series tail tolerance")
    parser.add_argument("--max-terms", type=int, default=None, help="Cap on series groups")
    parser.add_argument("--out", default=None, help="Directory for CSV/JSON artifacts")
    parser.add_argument("--workers", type=int, default=1, help="Worker processes for sweeps")
    parser.add_argument("--json", action="store_true", help="Print the JSON report")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--seed", type=int, default=0, help="Seed for randomized checks")
    parser.add_argument("--accelerate", choices=["auto", "on", "off"], default="auto",
                        help="Fixed-point acceleration of value series")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("maps-check", help="Run the map-algebra invariant suite")
    _add_geometry(p)
    p.add_argument("--corrupt", action="store_true", help="Negative control: perturb the first inversion")

    p = sub.add_parser("green-eval", help="Evaluate G, the auxiliary function or grad_x G")
    _add_geometry(p)
    p.add_argument("--x", type=_parse_point, required=True)
    p.add_argument("--y", type=_parse_point, required=True)
    p.add_argument("--quantity", choices=["G", "aux", "grad"], default="G")
    p.add_argument("--x-side", choices=[t.value for t in RegionTag], default=None)
    p.add_argument("--y-side", choices=[t.value for t in RegionTag], default=None)

    p = sub.add_parser("jump-audit", help="Interface continuity, flux and symmetry audit")
    _add_geometry(p)
    p.add_argument("--points", type=int, default=40, help="Boundary points per disk")
    p.add_argument("--jump-tol", type=float, default=1e-5)

    p = sub.add_parser("solve", help="Evaluate u and grad u for a source preset")
    _add_geometry(p)
    _add_source(p)
    p.add_argument("--x", type=_parse_point, action="append", default=None, help="Point x1,x2 (repeatable)")

    p = sub.add_parser("rate-sweep", help="|Du| over eps and k with log-log fits")
    _add_sweep(p)

    p = sub.add_parser("radii-collapse", help="|Du(0)| amplification against tau for several radii")
    p.add_argument("--radii", type=_parse_radii, default=DEFAULT_RADII, help="r1,r2 pairs separated by ';'")
    p.add_argument("--tau-list", type=_parse_floats, default=DEFAULT_TAU)
    p.add_argument("--k", type=float, default=1e4, help="k1 = k2 of the amplified run")

    p = sub.add_parser("higher-deriv", help="|D^m u(0)| over eps with log-log fits")
    _add_sweep(p, k=(1.0, 1e4))
    _add_source(p)
    p.add_argument("--m", type=int, choices=[2, 3], default=2)

    p = sub.add_parser("lower-bound", help="Sign and size of D1u(0)")
    _add_sweep(p, eps=(0.1, 0.01), k=(1.0, 10.0, 1000.0))

    p = sub.add_parser("oracle-compare", help="Compare the series solution with the finite-volume solver")
    _add_geometry(p)
    _add_source(p)
    p.add_argument("--n", type=int, default=600)
    p.add_argument("--box", type=_parse_floats, default=(-4.0, 4.0, -4.0, 4.0), help="x0,x1,y0,y1")
    p.add_argument("--bc", choices=["dirichlet-from-series", "zero-dirichlet"], default="dirichlet-from-series")
    p.add_argument("--exclude-cells", type=int, default=2)
    p.add_argument("--stride", type=int, default=4, help="Sample every stride-th cell with the series")
    p.add_argument("--max-l2", type=float, default=0.03, help="Largest accepted mean-adjusted relative L2 difference")
    return parser


def _source_spec(args: argparse.Namespace) -> SourceSpec:
    """Source preset from the flags, falling back to the config file."""
    settings = getattr(args, "settings", {})
    if getattr(args, "source", None) is None and any(k.startswith("source") for k in settings):
        return SourceSpec.from_settings(settings)
    center = getattr(args, "source_center", None)
    strength = getattr(args, "source_strength", None)
    return SourceSpec(
        preset=getattr(args, "source", None) or "lower_bound",
        center_x=center.real if center is not None else None,
        center_y=center.imag if center is not None else None,
        radius=getattr(args, "source_radius", None),
        strength=1.0 if strength is None else strength,
    )


def resolve_settings(args: argparse.Namespace) -> Tuple[Optional[TwoDiskConfig], SeriesPolicy, QuadratureSettings]:
    """Merge file, environment and flag values; flags win."""
    values = load_settings(args.config)
    policy_values = {"accelerate": args.accelerate}
    for key, flag in (("tol", args.tol), ("max_terms", args.max_terms)):
        if flag is not None:
            policy_values[key] = flag
        elif key in values:
            policy_values[key] = values[key]
    try:
        policy = SeriesPolicy(**policy_values)
    except ValidationError as e:
        raise InvalidConfigurationError(f"Invalid series policy: {str(e)}")

    cfg = None
    if hasattr(args, "eps"):
        overrides = {key: getattr(args, key) for key in CONFIG_KEYS}
        cfg = config_from_settings(values, **overrides)
    args.settings = values
    return cfg, policy, QuadratureSettings()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )
    try:
        cfg, policy, quad = resolve_settings(args)
        return COMMANDS[args.command](cfg, args, policy, quad)
    except InvalidConfigurationError as e:
        logger.error(f"Configuration error: {str(e)}")
        return 2
    except TwoDiskError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
