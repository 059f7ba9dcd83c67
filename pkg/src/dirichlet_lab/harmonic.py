"""Monte Carlo estimators built on exit sampling: boundary-data solutions
u(x) = E_x psi(X_tau), harmonic-measure histograms, mean exit times,
boundary-regularity verdicts, soft-solution stage convergence and Harnack
ratio reports.

All estimators are pure folds over exit batches in fixed path order, so a
given (seed, stream) is bitwise reproducible.  Truncated paths are excluded
from every estimator and counted; runs with more than 0.1% truncation fail
loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .diffusion import SimConfig, ExitBatch, sample_exit_batch, sample_exit_batch_from, survival_from_boundary
from .expr import Expression, parse
from .geometry import Domain, SIDE_CODES

REL_TRUNCATION_BUDGET = 1e-3


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float
    n_samples: int
    truncated: int = 0

    def ci(self, k: float = 3.0) -> tuple[float, float]:
        return self.value - k * self.std_error, self.value + k * self.std_error


def estimate_from_values(values: np.ndarray, truncated: int = 0) -> Estimate:
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise EstimatorError("estimator received non-finite sample values")
    n = len(values)
    if n == 0:
        raise EstimatorError("estimator received no samples")
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return Estimate(float(values.mean()), se, n, truncated)


# --------------------------------------------------------------------------
# boundary data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryData:
    """psi on the labeled boundary: a base expression over (x, y, z, theta,
    side) plus optional per-component override expressions."""

    base: Expression
    overrides: dict = dataclass_field(default_factory=dict)

    @staticmethod
    def from_json(spec) -> "BoundaryData":
        if isinstance(spec, str):
            return BoundaryData(parse(spec))
        base = parse(spec["psi"]) if isinstance(spec.get("psi"), str) else spec["psi"]
        overrides = {
            name: parse(text) if isinstance(text, str) else text
            for name, text in spec.get("overrides", {}).items()
        }
        return BoundaryData(base, overrides)

    @staticmethod
    def constant(c: float) -> "BoundaryData":
        return BoundaryData(parse(repr(float(c))))

    def scaled(self, factor: float) -> "BoundaryData":
        fac = repr(float(factor))
        base = parse(f"({fac})*({self.base.to_source()})")
        overrides = {
            k: parse(f"({fac})*({e.to_source()})") for k, e in self.overrides.items()
        }
        return BoundaryData(base, overrides)

    def evaluate(self, positions: np.ndarray, sides: np.ndarray,
                 components: np.ndarray, component_names: tuple,
                 center: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(positions)
        n = len(pts)
        env = {
            "x": pts[:, 0],
            "y": pts[:, 1] if pts.shape[1] > 1 else np.zeros(n),
            "z": pts[:, 2] if pts.shape[1] > 2 else np.zeros(n),
            "theta": np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])
            if pts.shape[1] > 1 else np.zeros(n),
            "side": np.where(np.asarray(sides) == SIDE_CODES["tip"], 0.0,
                             np.asarray(sides, dtype=float)),
            "u": np.zeros(n),
        }
        vals = np.broadcast_to(np.asarray(self.base.evaluate(env), dtype=float), (n,)).copy()
        for name, e in self.overrides.items():
            if name not in component_names:
                continue
            code = component_names.index(name)
            mask = np.asarray(components) == code
            if np.any(mask):
                sub = {k: (v[mask] if np.ndim(v) else v) for k, v in env.items()}
                vals[mask] = np.broadcast_to(
                    np.asarray(e.evaluate(sub), dtype=float), (int(mask.sum()),))
        return vals


def boundary_values_for_batch(domain: Domain, psi: BoundaryData, batch: ExitBatch) -> np.ndarray:
    ok = batch.ok
    return psi.evaluate(batch.points[ok], batch.sides[ok], batch.components[ok],
                        batch.component_names, domain.angular_center)


def quadrature_grid(domain: Domain, n_side: int = 32):
    """Cell centers of a regular grid over the bounding box that fall inside
    the domain, with their cell volumes as weights.  Used to mix E_x[.] into
    the volume-averaged quantities (the m-integrated measures)."""
    lo, hi = domain.bounding_box
    steps = (hi - lo) / n_side
    axes = [lo[k] + steps[k] * (np.arange(n_side) + 0.5) for k in range(domain.dim)]
    grids = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([g.ravel() for g in grids], axis=1)
    keep = domain.inside_many(centers)
    centers = centers[keep]
    weights = np.full(len(centers), float(np.prod(steps)))
    return centers, weights


# --------------------------------------------------------------------------
# core estimators
# --------------------------------------------------------------------------


def pwb_solve(domain: Domain, field, psi: BoundaryData, x0, cfg: SimConfig,
              n_paths: int, stream: int = 0) -> Estimate:
    """Monte Carlo mean of psi at the exit point: the PWB / soft solution
    value at x0."""
    batch = sample_exit_batch(domain, field, x0, cfg, n_paths, stream=stream)
    return pwb_from_batch(domain, psi, batch)


def pwb_from_batch(domain: Domain, psi: BoundaryData, batch: ExitBatch) -> Estimate:
    batch.require_truncation_budget(REL_TRUNCATION_BUDGET)
    vals = boundary_values_for_batch(domain, psi, batch)
    return estimate_from_values(vals, truncated=int(batch.truncated.sum()))


def delta_estimate(domain: Domain, field, x0, cfg: SimConfig, n_paths: int,
                   stream: int = 0) -> Estimate:
    """Mean exit time E_x tau (the Green potential of 1)."""
    batch = sample_exit_batch(domain, field, x0, cfg, n_paths, stream=stream)
    batch.require_truncation_budget(REL_TRUNCATION_BUDGET)
    return estimate_from_values(batch.exit_times[batch.ok],
                                truncated=int(batch.truncated.sum()))


# --------------------------------------------------------------------------
# harmonic measure histograms
# --------------------------------------------------------------------------


@dataclass
class BoundaryCell:
    component: str
    side: Optional[str]
    lo: float
    hi: float
    kind: str  # "angle" | "slit_param" | "point"

    def label(self) -> str:
        side = f"/{self.side}" if self.side else ""
        return f"{self.component}{side}[{self.lo:.4f},{self.hi:.4f})"


@dataclass
class HarmonicMeasureHistogram:
    cells: list
    counts: np.ndarray
    masses: np.ndarray
    std_errors: np.ndarray
    x0: np.ndarray
    n_samples: int

    def total_mass(self) -> float:
        return float(self.masses.sum())


def make_cells(domain: Domain, n_angular: int = 36, n_slit: int = 8) -> list:
    cells = [
        BoundaryCell("outer", None, -np.pi + 2 * np.pi * k / n_angular,
                     -np.pi + 2 * np.pi * (k + 1) / n_angular, "angle")
        for k in range(n_angular)
    ]
    names = getattr(domain, "components", ("outer",))
    if "slit" in names:
        L = float(np.linalg.norm(domain.b - domain.a))
        for side in ("above", "below"):
            cells += [
                BoundaryCell("slit", side, L * k / n_slit, L * (k + 1) / n_slit,
                             "slit_param")
                for k in range(n_slit)
            ]
        cells.append(BoundaryCell("slit", "tip", 0.0, 0.0, "point"))
    if "puncture" in names:
        cells.append(BoundaryCell("puncture", None, 0.0, 0.0, "point"))
    return cells


def _assign_cells(domain: Domain, cells: list, batch: ExitBatch) -> np.ndarray:
    ok = batch.ok
    pts = batch.points[ok]
    comps = batch.components[ok]
    sides = batch.sides[ok]
    names = batch.component_names
    center = domain.angular_center
    n_ang = sum(1 for c in cells if c.kind == "angle")
    out = np.full(len(pts), -1, dtype=np.int64)

    theta = np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])
    ang_idx = np.clip(((theta + np.pi) / (2 * np.pi) * n_ang).astype(np.int64), 0, n_ang - 1)

    for i, name in enumerate(names):
        mask = comps == i
        if not np.any(mask):
            continue
        if name in ("outer", "offset") or name.startswith("hole"):
            out[mask] = ang_idx[mask]
        elif name == "slit":
            tangent = (domain.b - domain.a)
            L = np.linalg.norm(tangent)
            along = (pts[mask] - domain.a) @ (tangent / L)
            n_slit = sum(1 for c in cells if c.kind == "slit_param" and c.side == "above")
            k = np.clip((along / L * n_slit).astype(np.int64), 0, n_slit - 1)
            above_cell0 = n_ang
            below_cell0 = n_ang + n_slit
            tip_cell = next(j for j, c in enumerate(cells) if c.kind == "point" and c.component == "slit")
            sub = np.where(sides[mask] == SIDE_CODES["above"], above_cell0 + k,
                           np.where(sides[mask] == SIDE_CODES["below"], below_cell0 + k, tip_cell))
            out[mask] = sub
        elif name == "puncture":
            tip_cell = next(j for j, c in enumerate(cells) if c.kind == "point" and c.component == "puncture")
            out[mask] = tip_cell
    if np.any(out < 0):
        raise EstimatorError("an exit point fell outside the boundary binning")
    return out


def harmonic_measure(domain: Domain, field, x0, cfg: SimConfig, n_paths: int,
                     n_angular: int = 36, n_slit: int = 8, stream: int = 0,
                     batch: ExitBatch | None = None) -> HarmonicMeasureHistogram:
    """Normalized exit-cell histogram with per-cell binomial standard errors;
    every non-truncated path lands in exactly one cell so the masses sum to
    one."""
    if batch is None:
        batch = sample_exit_batch(domain, field, x0, cfg, n_paths, stream=stream)
    batch.require_truncation_budget(REL_TRUNCATION_BUDGET)
    cells = make_cells(domain, n_angular, n_slit)
    idx = _assign_cells(domain, cells, batch)
    counts = np.bincount(idx, minlength=len(cells)).astype(np.int64)
    n = int(counts.sum())
    masses = counts / n
    se = np.sqrt(masses * (1 - masses) / n)
    return HarmonicMeasureHistogram(cells, counts, masses, se,
                                    np.asarray(x0, dtype=float), n)


# --------------------------------------------------------------------------
# boundary regularity
# --------------------------------------------------------------------------


def regularity_test(domain: Domain, field, z, cfg: SimConfig, n_paths: int = 4000,
                    t0_factors: Sequence[float] = (1e-2, 1e-3, 1e-4),
                    stream: int = 0) -> dict:
    """Classify a boundary point by the decay of P_z(tau_D > t0).

    Paths start at z itself.  Verdicts: "regular" when the survival estimate
    at the smallest t0 is below 0.05 with its 3-sigma CI excluding 0.2;
    "irregular" when every stage exceeds 0.5 with CI excluding 0.3;
    "inconclusive" otherwise.
    """
    z = np.asarray(z, dtype=float)
    delta_ref = domain.diameter ** 2 / (2.0 * domain.dim * field.lam)
    stages = []
    for si, fac in enumerate(t0_factors):
        t0 = fac * delta_ref
        dt = t0 / 256.0
        survived, total = survival_from_boundary(
            domain, field, z, t0, dt, n_paths, seed=cfg.seed,
            stream=stream * 97 + si, chunk_size=cfg.chunk_size)
        p = survived / total
        se = float(np.sqrt(max(p * (1 - p), 1.0 / total) / total))
        stages.append({"t0": t0, "p_hat": p, "std_error": se, "n": total})
    last = stages[-1]
    regular = last["p_hat"] < 0.05 and last["p_hat"] + 3 * last["std_error"] < 0.2
    irregular = all(s["p_hat"] > 0.5 and s["p_hat"] - 3 * s["std_error"] > 0.3
                    for s in stages)
    verdict = "regular" if regular else ("irregular" if irregular else "inconclusive")
    return {"verdict": verdict, "stages": stages, "point": z.tolist()}


# --------------------------------------------------------------------------
# soft-solution diagnostics
# --------------------------------------------------------------------------


def soft_solution_check(domain: Domain, field, psi: BoundaryData, x0,
                        cfg: SimConfig, n_paths: int, n_stages: int = 4,
                        cache_nodes: int = 128, inner_paths: int = 1000,
                        u_eval: Callable[[np.ndarray], np.ndarray] | None = None,
                        stream: int = 0) -> dict:
    """Exhaustion-stage averages of u over the moving boundary, their limit
    against the full-domain value, and the Doob sup-ratio when an evaluable
    u is supplied.

    Stage n integrates u over the exit law of D_n by nested sampling: outer
    exits from D_n, inner pwb values cached on a node set sampled from the
    exit law itself, nearest-node interpolation in between.
    """
    x0 = np.asarray(x0, dtype=float)
    reference = pwb_solve(domain, field, psi, x0, cfg, n_paths, stream=stream + 11)
    stages = []
    for n in range(1, n_stages + 1):
        sub = domain.exhaustion(n)
        if not sub.inside(x0):
            continue
        outer = sample_exit_batch(sub, field, x0, cfg, n_paths, stream=stream + 100 + n)
        outer.require_truncation_budget(REL_TRUNCATION_BUDGET)
        pts = outer.points[outer.ok]
        nodes = pts[: min(cache_nodes, len(pts))]
        node_vals = np.empty(len(nodes))
        node_ses = np.empty(len(nodes))
        for j, p in enumerate(nodes):
            est = pwb_solve(domain, field, psi, p, cfg, inner_paths,
                            stream=stream + 1000 + 61 * n + j)
            node_vals[j] = est.value
            node_ses[j] = est.std_error
        tree = cKDTree(nodes)
        _, nearest = tree.query(pts)
        vals = node_vals[nearest]
        est = estimate_from_values(vals, truncated=int(outer.truncated.sum()))
        stages.append({
            "n": n,
            "value": est.value,
            "std_error": float(np.sqrt(est.std_error ** 2 + float(np.mean(node_ses)) ** 2)),
            "n_samples": est.n_samples,
        })
    report = {
        "stages": stages,
        "reference": reference,
        "converged_gap": abs(stages[-1]["value"] - reference.value) if stages else None,
    }
    if u_eval is not None:
        batch = sample_exit_batch(domain, field, x0, cfg, n_paths,
                                  sup_fn=u_eval, stream=stream + 7)
        batch.require_truncation_budget(REL_TRUNCATION_BUDGET)
        psi_vals = boundary_values_for_batch(domain, psi, batch)
        sup_sq = batch.sup_functional[batch.ok] ** 2
        num = estimate_from_values(sup_sq)
        den = estimate_from_values(psi_vals ** 2)
        if den.value <= 0:
            raise EstimatorError("Doob ratio undefined: E|psi|^2 estimate is zero")
        ratio = num.value / den.value
        rel_se = np.sqrt((num.std_error / max(num.value, 1e-300)) ** 2
                         + (den.std_error / den.value) ** 2)
        report["doob_ratio"] = ratio
        report["doob_rel_std_error"] = float(rel_se)
        report["doob_bound_ok"] = ratio <= 4.0 * (1.0 + 3.0 * rel_se)
    return report


# --------------------------------------------------------------------------
# Harnack comparison
# --------------------------------------------------------------------------


def harnack_check(domain: Domain, field, psi: BoundaryData, center, r: float,
                  cfg: SimConfig, n_paths: int, n_probes: int = 8,
                  stream: int = 0) -> dict:
    """Max over probe pairs in B(center, r) of u(x)/u(y) for nonnegative psi.

    The ratio matrix is invariant (bitwise for power-of-two rescalings) under
    psi -> c psi when exit samples are reused, by linearity of the mean.
    """
    center = np.asarray(center, dtype=float)
    if domain.distance_to_boundary(center) <= 2 * r:
        raise EstimatorError("harnack_check requires B(center, 2r) inside the domain")
    angles = 2 * np.pi * np.arange(n_probes) / n_probes
    probes = np.vstack([center, center + 0.9 * r *
                        np.stack([np.cos(angles), np.sin(angles)], axis=1)])
    batches = [sample_exit_batch(domain, field, p, cfg, n_paths, stream=stream + 31 * i)
               for i, p in enumerate(probes)]
    return harnack_from_batches(domain, psi, probes, batches)


def harnack_from_batches(domain: Domain, psi: BoundaryData, probes, batches) -> dict:
    values = []
    errors = []
    for batch in batches:
        est = pwb_from_batch(domain, psi, batch)
        values.append(est.value)
        errors.append(est.std_error)
    values = np.array(values)
    errors = np.array(errors)
    if np.any(np.abs(values) <= 3 * errors):
        raise EstimatorError("a probe value is indistinguishable from zero")
    if np.any(values < 0):
        raise EstimatorError("harnack_check requires nonnegative boundary data")
    ratio = values[:, None] / values[None, :]
    return {
        "probes": np.asarray(probes),
        "values": values,
        "std_errors": errors,
        "ratio_matrix": ratio,
        "max_ratio": float(ratio.max()),
    }


# --------------------------------------------------------------------------
# tower / harmonicity spot check
# --------------------------------------------------------------------------


def tower_check(domain: Domain, field, psi: BoundaryData, x0, n_exh: int,
                cfg: SimConfig, n_paths: int, stream: int = 0) -> dict:
    """Two-stage estimate E_x u(X_{tau_V}) for V = exhaustion(n) against the
    direct value, sharing no samples; agreement within combined errors is the
    harmonicity (tower) property."""
    x0 = np.asarray(x0, dtype=float)
    sub = domain.exhaustion(n_exh)
    if not sub.inside(x0):
        raise EstimatorError("probe point lies outside the exhaustion member")
    outer = sample_exit_batch(sub, field, x0, cfg, n_paths, stream=stream + 1)
    outer.require_truncation_budget(REL_TRUNCATION_BUDGET)
    mids = outer.points[outer.ok]
    inner = sample_exit_batch_from(domain, field, mids, cfg, stream=stream + 2)
    inner.require_truncation_budget(REL_TRUNCATION_BUDGET)
    vals = boundary_values_for_batch(domain, psi, inner)
    nested = estimate_from_values(vals)
    direct = pwb_solve(domain, field, psi, x0, cfg, n_paths, stream=stream + 3)
    gap = abs(nested.value - direct.value)
    combined = float(np.hypot(nested.std_error, direct.std_error))
    return {"nested": nested, "direct": direct, "gap": gap,
            "combined_std_error": combined, "ok": gap <= 3 * combined}
