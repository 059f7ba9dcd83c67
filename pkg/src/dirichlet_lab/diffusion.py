"""Exit sampling for the divergence-form diffusion.

The generator convention is A = div(a grad), with no 1/2 factor: for a = I
the process is Brownian motion running at twice standard speed.  Closed-form
facts used throughout follow that convention: mean exit time of a ball of
radius R started at the center is R^2 / (2 d), and a walk-on-spheres jump of
radius r contributes r^2 / (2 d) to the exit-time estimator (r^2 / (2 d c)
for a = c I).

Two schemes:

* walk-on-spheres ("wos"), exact in law for isotropic constant coefficients:
  jump to a uniform point of the largest inscribed sphere, absorb inside a
  thin shell of relative width ``eps_shell`` and project to the nearest
  boundary point, taking the side label from the approach direction;
* Euler-Maruyama ("em") for C^1 fields: x += b dt + sigma_bar sqrt(2 dt) xi
  with b = div a, local steps dt_loc = min(dt, 0.1 d(x)^2 / upper), segment
  exit classification on every step, and an optional Brownian-bridge
  crossing test with probability exp(-2 d1 d2 / (2 tr(a) dt_loc)).

Determinism: path i belongs to chunk i // chunk_size; chunk c draws from a
counter-based Philox stream keyed by (seed, stream, c) in a fixed per
iteration order, so batches are bitwise reproducible for a given config
regardless of how chunks are scheduled.  Reductions over paths must follow
chunk order.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Callable, Iterator, Optional

import numpy as np

from .geometry import Domain, BoundaryPoint, SIDE_NAMES

MASK64 = (1 << 64) - 1


class SimulationError(RuntimeError):
    pass


class TruncationError(SimulationError):
    """Raised when the truncated-path budget (0.1%) is exceeded."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 1e-3
    eps_shell: float = 1e-4          # absorption shell, relative to diameter
    max_steps: int = 1_000_000
    seed: int = 0
    scheme: str = "wos"              # "wos" | "em"
    bridge_correction: bool = True
    chunk_size: int = 8192

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not (0 < self.eps_shell < 0.1):
            raise ValueError("eps_shell must lie in (0, 0.1)")
        if self.max_steps < 1000:
            raise ValueError("max_steps must be at least 1000")
        if self.scheme not in ("wos", "em"):
            raise ValueError(f"unknown scheme '{self.scheme}'")

    @staticmethod
    def from_json(spec: dict) -> "SimConfig":
        keys = ("dt", "eps_shell", "max_steps", "seed", "scheme",
                "bridge_correction", "chunk_size")
        return SimConfig(**{k: spec[k] for k in keys if k in spec})


@dataclass(frozen=True)
class ExitRecord:
    exit_point: BoundaryPoint
    exit_time: float
    steps: int
    path_integral: Optional[float] = None
    sup_functional: Optional[float] = None
    hit_puncture: bool = False
    truncated: bool = False


@dataclass
class ExitBatch:
    """Column-oriented batch of exit records (one row per path)."""

    points: np.ndarray          # (n, d)
    components: np.ndarray      # int32 index into component_names
    sides: np.ndarray           # int8 side code
    exit_times: np.ndarray
    steps: np.ndarray
    truncated: np.ndarray
    hit_puncture: np.ndarray
    component_names: tuple
    path_integral: Optional[np.ndarray] = None
    sup_functional: Optional[np.ndarray] = None
    # boundary-window statistics of a tracked function (path-limit detection)
    window_count: Optional[np.ndarray] = None
    window_sum: Optional[np.ndarray] = None
    window_min: Optional[np.ndarray] = None
    window_max: Optional[np.ndarray] = None
    window_last: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return len(self.exit_times)

    @property
    def ok(self) -> np.ndarray:
        return ~self.truncated

    def truncation_fraction(self) -> float:
        return float(self.truncated.sum()) / max(self.n, 1)

    def require_truncation_budget(self, budget: float = 1e-3):
        frac = self.truncation_fraction()
        if frac > budget:
            raise TruncationError(
                f"{self.truncated.sum()} of {self.n} paths truncated "
                f"({frac:.2%} > {budget:.2%} budget)"
            )

    def records(self) -> Iterator[ExitRecord]:
        for i in range(self.n):
            yield ExitRecord(
                exit_point=BoundaryPoint(
                    self.points[i],
                    self.component_names[self.components[i]],
                    SIDE_NAMES[int(self.sides[i])],
                ),
                exit_time=float(self.exit_times[i]),
                steps=int(self.steps[i]),
                path_integral=None if self.path_integral is None else float(self.path_integral[i]),
                sup_functional=None if self.sup_functional is None else float(self.sup_functional[i]),
                hit_puncture=bool(self.hit_puncture[i]),
                truncated=bool(self.truncated[i]),
            )


def chunk_rng(seed: int, stream: int, chunk: int) -> np.random.Generator:
    """Counter-based stream: Philox keyed by (seed, stream, chunk)."""
    key = np.array(
        [seed & MASK64, ((stream & 0xFFFFFFFF) << 32) | (chunk & 0xFFFFFFFF)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def sample_exit(domain: Domain, field, x0, cfg: SimConfig,
                integral_fn=None, sup_fn=None) -> ExitRecord:
    """Simulate a single path; convenience wrapper over the batch sampler."""
    batch = sample_exit_batch(domain, field, x0, cfg, 1,
                              integral_fn=integral_fn, sup_fn=sup_fn)
    return next(batch.records())


def sample_exit_batch(
    domain: Domain,
    field,
    x0,
    cfg: SimConfig,
    n_paths: int,
    integral_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    sup_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    stream: int = 0,
    window_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    window_width: float | None = None,
) -> ExitBatch:
    """Sample ``n_paths`` independent exits started at ``x0``.

    ``integral_fn``/``sup_fn`` request the running path functionals
    int_0^tau f(X_r) dr and sup_t |g(X_t)|.  Results are deterministic in
    (cfg.seed, stream, path index) and independent of scheduling.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    if not domain.inside(x0):
        raise SimulationError(f"start point {x0.tolist()} is not inside the domain")
    if cfg.scheme == "wos":
        scale = field.isotropic_scale
        if scale is None:
            raise SimulationError(
                "walk-on-spheres requires isotropic constant coefficients; use scheme='em'"
            )
        runner = _wos_chunk
        extra = {"scale": scale}
    else:
        if not field.supports_sde:
            raise SimulationError(
                "Euler-Maruyama requires a differentiable coefficient field"
            )
        runner = _em_chunk
        extra = {"field": field, "boundary_start": False, "time_cap": None}
    window = (window_fn, window_width) if window_fn is not None else None

    chunks = []
    for c, k in _chunk_sizes(n_paths, cfg.chunk_size):
        rng = chunk_rng(cfg.seed, stream, c)
        starts = np.tile(x0, (k, 1))
        chunks.append(runner(domain, starts, cfg, rng, integral_fn, sup_fn,
                             window=window, **extra))
    return _concat_chunks(domain, chunks, integral_fn, sup_fn, window)


def sample_exit_batch_from(
    domain: Domain,
    field,
    starts: np.ndarray,
    cfg: SimConfig,
    integral_fn=None,
    sup_fn=None,
    stream: int = 0,
    window_fn=None,
    window_width: float | None = None,
) -> ExitBatch:
    """Like :func:`sample_exit_batch` with one distinct start point per path."""
    starts = np.asarray(starts, dtype=float)
    if not np.all(domain.inside_many(starts)):
        raise SimulationError("all start points must be inside the domain")
    if cfg.scheme == "wos":
        scale = field.isotropic_scale
        if scale is None:
            raise SimulationError("walk-on-spheres requires isotropic constant coefficients")
        runner, extra = _wos_chunk, {"scale": scale}
    else:
        runner, extra = _em_chunk, {"field": field, "boundary_start": False, "time_cap": None}
    window = (window_fn, window_width) if window_fn is not None else None
    chunks = []
    pos = 0
    for c, k in _chunk_sizes(len(starts), cfg.chunk_size):
        rng = chunk_rng(cfg.seed, stream, c)
        chunks.append(runner(domain, starts[pos:pos + k].copy(), cfg, rng,
                             integral_fn, sup_fn, window=window, **extra))
        pos += k
    return _concat_chunks(domain, chunks, integral_fn, sup_fn, window)


def survival_from_boundary(
    domain: Domain,
    field,
    z,
    t_cap: float,
    dt: float,
    n_paths: int,
    seed: int,
    stream: int = 0,
    chunk_size: int = 8192,
    max_steps: int = 200_000,
) -> tuple[int, int]:
    """Start paths at the boundary point ``z`` and count how many are still
    inside at time ``t_cap``.  Returns (survived, total).

    The first step skips exit checks (a boundary start would otherwise exit
    with bridge probability one); afterwards exits are detected as usual.
    """
    cfg = SimConfig(dt=dt, eps_shell=1e-4, max_steps=max_steps, seed=seed,
                    scheme="em", bridge_correction=True, chunk_size=chunk_size)
    z = np.asarray(z, dtype=float)
    survived = 0
    for c, k in _chunk_sizes(n_paths, chunk_size):
        rng = chunk_rng(seed, stream, c)
        starts = np.tile(z, (k, 1))
        batch = _em_chunk(domain, starts, cfg, rng, None, None, field=field,
                          boundary_start=True, time_cap=t_cap, window=None)
        survived += int(batch["survived"].sum())
    return survived, n_paths


# --------------------------------------------------------------------------
# chunk runners
# --------------------------------------------------------------------------


def _chunk_sizes(n: int, chunk_size: int):
    c = 0
    while n > 0:
        k = min(chunk_size, n)
        yield c, k
        n -= k
        c += 1


def _new_chunk_state(domain, starts, integral_fn, sup_fn):
    k, dim = starts.shape
    state = {
        "x": starts,
        "t": np.zeros(k),
        "steps": np.zeros(k, dtype=np.int64),
        "done": np.zeros(k, dtype=bool),
        "trunc": np.zeros(k, dtype=bool),
        "hitp": np.zeros(k, dtype=bool),
        "survived": np.zeros(k, dtype=bool),
        "pos": np.zeros((k, dim)),
        "comp": np.zeros(k, dtype=np.int32),
        "side": np.zeros(k, dtype=np.int8),
        "integ": np.zeros(k) if integral_fn is not None else None,
        "sup": np.abs(sup_fn(starts)) if sup_fn is not None else None,
        "win_cnt": None,
        "win_sum": None,
        "win_min": None,
        "win_max": None,
        "win_last": None,
    }
    return state


def _init_window(state, k):
    state["win_cnt"] = np.zeros(k, dtype=np.int64)
    state["win_sum"] = np.zeros(k)
    state["win_min"] = np.full(k, np.inf)
    state["win_max"] = np.full(k, -np.inf)
    state["win_last"] = np.full((k, 6), np.nan)


def _reset_window(state, g_idx):
    """Drop window stats for paths that moved back out of the shell, so the
    accumulators cover only the final approach."""
    state["win_cnt"][g_idx] = 0
    state["win_sum"][g_idx] = 0.0
    state["win_min"][g_idx] = np.inf
    state["win_max"][g_idx] = -np.inf
    state["win_last"][g_idx] = np.nan


def _update_window(state, g_idx, values):
    """Fold tracked values at near-boundary points into per-path stats."""
    state["win_cnt"][g_idx] += 1
    state["win_sum"][g_idx] += values
    state["win_min"][g_idx] = np.minimum(state["win_min"][g_idx], values)
    state["win_max"][g_idx] = np.maximum(state["win_max"][g_idx], values)
    buf = state["win_last"][g_idx]
    buf[:, :-1] = buf[:, 1:]
    buf[:, -1] = values
    state["win_last"][g_idx] = buf


def _check_polar_capture(domain, state, idx):
    polar = domain.polar_points
    if len(polar) == 0 or idx.size == 0:
        return
    cap = domain.puncture_capture_radius
    comp_code = (
        domain.components.index("puncture") if "puncture" in domain.components else 0
    )
    x = state["x"][idx]
    for p in polar:
        captured = np.linalg.norm(x - p, axis=1) < cap
        if np.any(captured):
            hit = idx[captured]
            state["done"][hit] = True
            state["hitp"][hit] = True
            state["pos"][hit] = p
            state["comp"][hit] = comp_code
            state["side"][hit] = 0


def _finish_truncated(state, idx):
    state["done"][idx] = True
    state["trunc"][idx] = True
    state["pos"][idx] = state["x"][idx]


def _wos_chunk(domain, starts, cfg, rng, integral_fn, sup_fn, scale, window=None):
    k, dim = starts.shape
    st = _new_chunk_state(domain, starts, integral_fn, sup_fn)
    if window is not None:
        _init_window(st, k)
        win_fn, win_w = window
    eps_abs = cfg.eps_shell * domain.diameter
    denom = 2.0 * dim * scale
    for it in range(cfg.max_steps):
        normals = rng.standard_normal((k, dim))
        idx = np.flatnonzero(~st["done"])
        if idx.size == 0:
            break
        d = domain.wos_distance_many(st["x"][idx])
        if window is not None:
            near = d < win_w
            stale = ~near & (st["win_cnt"][idx] > 0)
            if np.any(stale):
                _reset_window(st, idx[stale])
            if np.any(near):
                g = idx[near]
                _update_window(st, g, win_fn(st["x"][g]))
        absorb = d <= eps_abs
        if np.any(absorb):
            a_idx = idx[absorb]
            pos, comp, side = domain.project_boundary_many(st["x"][a_idx])
            st["pos"][a_idx] = pos
            st["comp"][a_idx] = comp
            st["side"][a_idx] = side
            st["done"][a_idx] = True
        m_idx = idx[~absorb]
        if m_idx.size:
            r = d[~absorb]
            if integral_fn is not None:
                st["integ"][m_idx] += integral_fn(st["x"][m_idx]) * r * r / denom
            st["t"][m_idx] += r * r / denom
            dirs = normals[m_idx]
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            st["x"][m_idx] += r[:, None] * dirs
            st["steps"][m_idx] += 1
            if sup_fn is not None:
                st["sup"][m_idx] = np.maximum(st["sup"][m_idx], np.abs(sup_fn(st["x"][m_idx])))
            _check_polar_capture(domain, st, m_idx)
    _finish_truncated(st, np.flatnonzero(~st["done"]))
    return st


def _em_chunk(domain, starts, cfg, rng, integral_fn, sup_fn, field,
              boundary_start, time_cap, window=None):
    k, dim = starts.shape
    st = _new_chunk_state(domain, starts, integral_fn, sup_fn)
    if window is not None:
        _init_window(st, k)
        win_fn, win_w = window
    c_dt = 0.1 / field.upper
    dt_floor = min(c_dt * (1e-3 * domain.diameter) ** 2, cfg.dt)
    for it in range(cfg.max_steps):
        normals = rng.standard_normal((k, dim))
        unif = rng.random(k)
        idx = np.flatnonzero(~st["done"])
        if idx.size == 0:
            break
        xa = st["x"][idx]
        d1 = np.maximum(domain.wos_distance_many(xa), 0.0)
        if window is not None:
            near = d1 < win_w
            stale = ~near & (st["win_cnt"][idx] > 0)
            if np.any(stale):
                _reset_window(st, idx[stale])
            if np.any(near):
                g = idx[near]
                _update_window(st, g, win_fn(st["x"][g]))
        dt_loc = np.minimum(np.maximum(c_dt * d1 * d1, dt_floor), cfg.dt)
        sig = field.sigma_bar_many(xa)
        b = field.drift_many(xa)
        noise = np.einsum("nij,nj->ni", sig, normals[idx])
        x_new = xa + b * dt_loc[:, None] + np.sqrt(2.0 * dt_loc)[:, None] * noise
        if integral_fn is not None:
            st["integ"][idx] += integral_fn(xa) * dt_loc
        st["t"][idx] += dt_loc
        st["steps"][idx] += 1

        inside = domain.inside_many(x_new)
        first = boundary_start and it == 0

        if not first:
            ex = np.flatnonzero(~inside)
            for j in ex:
                g = idx[j]
                try:
                    _, bp = domain.crossing_parameter(st["x"][g], x_new[j])
                    st["pos"][g] = bp.position
                    st["comp"][g] = domain.components.index(bp.component)
                    st["side"][g] = _side_code(bp.side)
                except Exception:
                    pos, comp, side = domain.project_boundary_many(x_new[j][None, :])
                    st["pos"][g] = pos[0]
                    st["comp"][g] = comp[0]
                    st["side"][g] = side[0]
                st["done"][g] = True
            # crossings of two-sided interior sheets (slit) with both
            # endpoints inside
            icross, ipos, icomp, iside = domain.interior_crossing_many(xa, x_new)
            icross &= inside & ~st["done"][idx]
            if np.any(icross):
                g = idx[icross]
                st["pos"][g] = ipos[icross]
                st["comp"][g] = icomp[icross]
                st["side"][g] = iside[icross]
                st["done"][g] = True
        else:
            # first step from a boundary start: classify_exit would reject the
            # on-boundary segment origin, so exits land on the nearest
            # boundary point; interior-sheet and bridge checks are skipped
            ex = np.flatnonzero(~inside)
            if ex.size:
                g = idx[ex]
                pos, comp, side = domain.project_boundary_many(x_new[ex])
                st["pos"][g] = pos
                st["comp"][g] = comp
                st["side"][g] = side
                st["done"][g] = True

        if time_cap is not None:
            cap = np.flatnonzero((st["t"][idx] >= time_cap) & ~st["done"][idx])
            if cap.size:
                g = idx[cap]
                st["survived"][g] = True
                st["done"][g] = True
                st["pos"][g] = st["x"][g]

        # Brownian-bridge crossing test for surviving in-domain steps
        live = np.flatnonzero(~st["done"][idx] & inside)
        if live.size and cfg.bridge_correction and not first:
            xl = x_new[live]
            d2 = np.maximum(domain.wos_distance_many(xl), 0.0)
            tr_a = (sig[live] ** 2).sum(axis=(1, 2))
            p_cross = np.exp(-2.0 * d1[live] * d2 / (2.0 * tr_a * dt_loc[live]))
            fire = unif[idx][live] < p_cross
            if np.any(fire):
                f_idx = idx[live[fire]]
                use_new = d2[fire] < d1[live][fire]
                probe = np.where(use_new[:, None], xl[fire], st["x"][f_idx])
                pos, comp, side = domain.project_boundary_many(probe)
                st["pos"][f_idx] = pos
                st["comp"][f_idx] = comp
                st["side"][f_idx] = side
                st["done"][f_idx] = True

        move = np.flatnonzero(~st["done"][idx]) if idx.size else np.empty(0, np.int64)
        if move.size:
            m_idx = idx[move]
            st["x"][m_idx] = x_new[move]
            if sup_fn is not None:
                st["sup"][m_idx] = np.maximum(st["sup"][m_idx], np.abs(sup_fn(st["x"][m_idx])))
            _check_polar_capture(domain, st, m_idx)
    _finish_truncated(st, np.flatnonzero(~st["done"]))
    return st


def _side_code(side) -> int:
    from .geometry import SIDE_CODES

    return SIDE_CODES[side]


def _concat_chunks(domain, chunks, integral_fn, sup_fn, window=None) -> ExitBatch:
    def cat(key):
        return np.concatenate([c[key] for c in chunks])

    return ExitBatch(
        points=cat("pos"),
        components=cat("comp"),
        sides=cat("side"),
        exit_times=cat("t"),
        steps=cat("steps"),
        truncated=cat("trunc"),
        hit_puncture=cat("hitp"),
        component_names=tuple(domain.components),
        path_integral=cat("integ") if integral_fn is not None else None,
        sup_functional=cat("sup") if sup_fn is not None else None,
        window_count=cat("win_cnt") if window is not None else None,
        window_sum=cat("win_sum") if window is not None else None,
        window_min=cat("win_min") if window is not None else None,
        window_max=cat("win_max") if window is not None else None,
        window_last=cat("win_last") if window is not None else None,
    )
