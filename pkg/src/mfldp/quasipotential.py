"""Quasipotential, Freidlin-Wentzell graph weights and the stationary rate
function.

Paths are piecewise linear with ``K`` segments of equal duration and pinned
endpoints; interior knots are optimized by projected gradient descent
(Barzilai-Borwein steps with Armijo backtracking).  The path duration is
optimized outside by golden-section search on ``log T``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .action import PathGrid, construction_path, constant_velocity_controls, path_cost, segment_costs
from .mckean_vlasov import (
    EquilibriumCatalog,
    find_equilibria,
    omega_limit_check,
    require_point_limits,
    tangent_basis,
    validation,
)
from .model import Model

log = logging.getLogger(__name__)

FD_STEP = 1e-7
REL_TOL = 1e-7
STALL_WINDOW = 10
MAX_ITER = 3000
T_MIN = 0.1
T_MAX = 100.0
GOLDEN_TOL = 0.05
RESTARTS = 5
MAX_FW_CLASSES = 7
PENALTY_SHARE = 0.01


class UnsupportedClassCount(ValueError):
    pass


def project_simplex(x: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    x = np.atleast_2d(x)
    u = -np.sort(-x, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    k = np.arange(1, x.shape[1] + 1)
    cond = u - css / k > 0
    rho = x.shape[1] - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(x.shape[0]), rho] / (rho + 1)
    return np.maximum(x - theta[:, None], 0.0)


# ---------------------------------------------------------------------------
# penalty barrier around excluded points


@dataclass(frozen=True)
class Barrier:
    """Smooth bump w * (1 - d^2/radius^2)^2 on the distance ``d`` from each
    excluded point to each segment, integrated with the segment duration."""

    points: np.ndarray
    radius: float
    weight: float

    def segment_penalty(self, a: np.ndarray, b: np.ndarray, dt) -> np.ndarray:
        if len(self.points) == 0:
            return np.zeros(a.shape[0])
        d = b - a
        dd = np.maximum(np.einsum("nk,nk->n", d, d), 1e-300)
        out = np.zeros(a.shape[0])
        for c in self.points:
            s = np.clip(np.einsum("nk,nk->n", c - a, d) / dd, 0.0, 1.0)
            gap = a + s[:, None] * d - c
            dist2 = np.einsum("nk,nk->n", gap, gap)
            out += np.where(dist2 < self.radius**2, (1.0 - dist2 / self.radius**2) ** 2, 0.0)
        return self.weight * dt * out


# ---------------------------------------------------------------------------
# inner problem: fixed duration


@dataclass
class OptimizeResult:
    path: PathGrid
    cost: float
    penalty: float
    iterations: int
    converged: bool
    history: list = field(repr=False, default_factory=list)


def _objective(m, knots, dt, barrier):
    c = segment_costs(m, knots[:-1], knots[1:], dt)
    pen = barrier.segment_penalty(knots[:-1], knots[1:], dt) if barrier is not None else 0.0
    return float(np.sum(c)), float(np.sum(pen))


def _gradient(m, knots, dt, barrier, basis, base_seg):
    """Forward differences of the objective in tangent coordinates of each interior knot."""
    K = knots.shape[0] - 1
    r = knots.shape[1]
    n_dir = basis.shape[1]
    inner = knots[1:-1]
    h = np.full((K - 1, n_dir), FD_STEP)
    pert = inner[:, None, :] + h[:, :, None] * basis.T[None, :, :]
    flip = (pert < 0).any(axis=2)
    h[flip] = -FD_STEP
    pert = inner[:, None, :] + h[:, :, None] * basis.T[None, :, :]
    left_a = np.repeat(knots[:-2], n_dir, axis=0)
    right_b = np.repeat(knots[2:], n_dir, axis=0)
    p = pert.reshape(-1, r)
    a = np.concatenate([left_a, p])
    b = np.concatenate([p, right_b])
    c = segment_costs(m, a, b, dt)
    if barrier is not None:
        c = c + barrier.segment_penalty(a, b, dt)
    n = p.shape[0]
    new = c[:n] + c[n:]
    old = np.repeat(base_seg[:-1] + base_seg[1:], n_dir)
    with np.errstate(invalid="ignore"):
        g = ((new - old) / h.ravel()).reshape(K - 1, n_dir)
    g[~np.isfinite(g)] = 0.0
    return g @ basis.T  # (K-1, r) ambient tangent vectors


def _segments(m, knots, dt, barrier):
    c = segment_costs(m, knots[:-1], knots[1:], dt)
    if barrier is not None:
        c = c + barrier.segment_penalty(knots[:-1], knots[1:], dt)
    return c


def optimize_path(m: Model, nu, xi, K: int = 20, T: float = 1.0, init: PathGrid | None = None,
                  barrier: Barrier | None = None, max_iter: int = MAX_ITER) -> OptimizeResult:
    """Minimize the action over interior knots of a K-segment path of duration T.

    Starts from ``init`` (resampled to K segments and duration T) or from the
    constant-velocity construction path.  Every accepted step decreases the
    objective; ``history`` records the objective after each iteration.
    Stops once the objective fell by less than a relative 1e-7 over the last
    10 iterations.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    if T <= 0:
        raise ValueError("T must be positive")
    nu = np.asarray(nu, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if init is None:
        init = construction_path(constant_velocity_controls(m, nu, xi, T), K)
    knots = init.resample(K, T).knots.copy() if (init.K != K or abs(init.T - T) > 1e-12) else init.knots.copy()
    knots[0], knots[-1] = nu, xi
    knots[1:-1] = project_simplex(knots[1:-1])
    dt = T / K
    basis = tangent_basis(m.r)

    seg = _segments(m, knots, dt, barrier)
    value = float(seg.sum())
    if not math.isfinite(value):
        bad = int(np.flatnonzero(~np.isfinite(seg))[0])
        raise FloatingPointError(f"initial path has infinite cost on segment {bad} "
                                 f"({knots[bad].tolist()} -> {knots[bad + 1].tolist()})")
    history = [value]
    grad = _gradient(m, knots, dt, barrier, basis, seg)
    gnorm = np.abs(grad).max()
    step = 0.1 * np.abs(xi - nu).sum() / max(gnorm, 1e-12) if gnorm > 0 else 0.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if gnorm == 0.0:
            converged = True
            break
        accepted = False
        for _ in range(40):
            trial = knots.copy()
            trial[1:-1] = project_simplex(knots[1:-1] - step * grad)
            tseg = _segments(m, trial, dt, barrier)
            tval = float(tseg.sum())
            decrease = float(np.sum(grad * (knots[1:-1] - trial[1:-1])))
            if math.isfinite(tval) and tval <= value - 1e-4 * decrease and tval <= value:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        new_grad = _gradient(m, trial, dt, barrier, basis, tseg)
        s = (trial[1:-1] - knots[1:-1]).ravel()
        y = (new_grad - grad).ravel()
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else step * 2.0
        knots, seg, value, grad = trial, tseg, tval, new_grad
        gnorm = np.abs(grad).max()
        history.append(value)
        if len(history) > STALL_WINDOW:
            ref = history[-1 - STALL_WINDOW]
            if ref - value <= REL_TOL * max(abs(value), 1e-12):
                converged = True
                break
    path = PathGrid.uniform(knots, T)
    cost = float(segment_costs(m, knots[:-1], knots[1:], dt).sum())
    return OptimizeResult(path, cost, value - cost, it, converged, history)


# ---------------------------------------------------------------------------
# outer problem: free duration


@dataclass
class QuasipotentialResult:
    value: float
    path: PathGrid
    T: float
    evaluations: list
    restart_costs: list
    construction_bound: float
    penalty: float = 0.0
    warnings: list = field(default_factory=list)

    @property
    def spread(self) -> float:
        finite = [c for c in self.restart_costs if math.isfinite(c)]
        return float(max(finite) - min(finite)) if finite else float("nan")

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "T": self.T,
            "penalty": self.penalty,
            "construction_bound": self.construction_bound,
            "restart_costs": self.restart_costs,
            "restart_spread": self.spread,
            "evaluations": [{"T": t, "cost": c} for t, c in self.evaluations],
            "warnings": list(self.warnings),
        }


def _objective_total(res: OptimizeResult) -> float:
    return res.cost + res.penalty


def quasipotential(m: Model, nu, xi, K: int = 20, T_min: float = T_MIN, T_max: float = T_MAX,
                   restarts: int = RESTARTS, seed: int = 0, barrier: Barrier | None = None,
                   golden_tol: float = GOLDEN_TOL) -> QuasipotentialResult:
    """Approximate V(xi | nu) = inf_T S_T(xi | nu).

    Golden-section search on log T with warm starts, then a rescaling sweep
    around the incumbent and ``restarts`` seeded perturbed restarts.  The
    result is an upper bound on the true quasipotential up to quadrature
    error.
    """
    nu = np.asarray(nu, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if np.abs(nu - xi).sum() <= 1e-12:
        path = PathGrid.uniform(np.stack([nu] * (K + 1)), 1.0)
        return QuasipotentialResult(0.0, path, 1.0, [], [0.0], 0.0)
    cache: dict = {}
    incumbent: list = [None]

    def run(logT, init=None):
        key = round(logT, 12)
        if key in cache and init is None:
            return cache[key]
        T = math.exp(logT)
        start = init if init is not None else (incumbent[0].path if incumbent[0] is not None else None)
        res = optimize_path(m, nu, xi, K, T, init=start, barrier=barrier)
        if init is None:
            cache[key] = res
        if incumbent[0] is None or _objective_total(res) < _objective_total(incumbent[0]):
            incumbent[0] = res
        return res

    lo, hi = math.log(T_min), math.log(T_max)
    g = (math.sqrt(5) - 1) / 2
    c = hi - g * (hi - lo)
    d = lo + g * (hi - lo)
    fc = _objective_total(run(c))
    fd = _objective_total(run(d))
    while hi - lo > golden_tol:
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - g * (hi - lo)
            fc = _objective_total(run(c))
        else:
            lo, c, fc = c, d, fd
            d = lo + g * (hi - lo)
            fd = _objective_total(run(d))

    best = incumbent[0]
    warnings = []
    # rescaling refinement: same geometry run at nearby speeds, then polished
    for alpha in (0.5, 0.8, 1.25, 2.0):
        T = best.path.T / alpha
        if not (T_min <= T <= T_max):
            continue
        res = run(math.log(T), init=best.path)
        if _objective_total(res) < _objective_total(best):
            best = res
    # seeded restarts from perturbed interiors
    rng = np.random.Generator(np.random.Philox(seed))
    basis = tangent_basis(m.r)
    scale = 0.05 * float(np.abs(xi - nu).sum())
    restart_costs = [_objective_total(best)]
    for _ in range(restarts):
        knots = best.path.knots.copy()
        noise = rng.standard_normal((K - 1, basis.shape[1])) @ basis.T
        knots[1:-1] = project_simplex(knots[1:-1] + scale * noise)
        start = PathGrid(best.path.times, knots)
        try:
            res = optimize_path(m, nu, xi, K, best.path.T, init=start, barrier=barrier)
        except FloatingPointError:
            restart_costs.append(math.inf)
            continue
        restart_costs.append(_objective_total(res))
        if _objective_total(res) < _objective_total(best):
            best = res
    T_best = best.path.T
    if T_best >= T_max * math.exp(-golden_tol):
        warnings.append(f"optimal duration hit the upper end of the search ({T_max:g})")
    if T_best <= T_min * math.exp(golden_tol):
        warnings.append(f"optimal duration hit the lower end of the search ({T_min:g})")
    bound = constant_velocity_controls(m, nu, xi, T_best).bound
    evals = sorted((float(math.exp(k)), _objective_total(v)) for k, v in cache.items())
    return QuasipotentialResult(best.cost, best.path, T_best, evals, restart_costs, bound, best.penalty, warnings)


# ---------------------------------------------------------------------------
# Freidlin-Wentzell layer


def v_matrix(vtilde) -> np.ndarray:
    """Min-plus closure: V(i,j) = min over chains i -> k1 -> ... -> j of summed Vtilde."""
    v = np.array(vtilde, dtype=float)
    n = v.shape[0]
    if v.shape != (n, n):
        raise ValueError("need a square matrix")
    np.fill_diagonal(v, 0.0)
    for k in range(n):
        v = np.minimum(v, v[:, k : k + 1] + v[k : k + 1, :])
    return v


def in_trees(l: int, i: int):
    """All graphs on {0..l-1} where every j != i has one outgoing edge, i has
    none, and there are no cycles.  Yields dicts j -> successor."""
    others = [j for j in range(l) if j != i]
    choices = [[k for k in range(l) if k != j] for j in others]
    for succ in itertools.product(*choices):
        graph = dict(zip(others, succ))
        ok = True
        for j in others:
            seen = set()
            x = j
            while x != i:
                if x in seen:
                    ok = False
                    break
                seen.add(x)
                x = graph[x]
            if not ok:
                break
        if ok:
            yield graph


def fw_weights(V) -> tuple[np.ndarray, np.ndarray]:
    """W(K_i) = min over in-trees to i of summed V along edges; s = W - min W."""
    V = np.asarray(V, dtype=float)
    l = V.shape[0]
    if l > MAX_FW_CLASSES:
        raise UnsupportedClassCount(
            f"{l} classes: graph enumeration supports at most {MAX_FW_CLASSES}; "
            "a minimum-arborescence algorithm would be needed for more"
        )
    W = np.full(l, np.inf)
    for i in range(l):
        for graph in in_trees(l, i):
            W[i] = min(W[i], sum(V[j, k] for j, k in graph.items()))
    s = W - W.min()
    return W, s


@dataclass
class FWCatalog:
    catalog: EquilibriumCatalog
    representatives: np.ndarray
    classes: list
    Vtilde: np.ndarray
    V: np.ndarray
    W: np.ndarray
    s_offsets: np.ndarray
    details: dict = field(default_factory=dict, repr=False)
    notes: list = field(default_factory=list)

    @property
    def l(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        def enc(a):
            return [[None if not math.isfinite(x) else float(x) for x in row] for row in np.atleast_2d(a)]

        return {
            "l": self.l,
            "representatives": self.representatives.tolist(),
            "catalog_indices": self.classes,
            "Vtilde": enc(self.Vtilde),
            "V": enc(self.V),
            "W": [None if not math.isfinite(x) else float(x) for x in self.W],
            "s_offsets": [float(x) for x in self.s_offsets],
            "entries": {f"{i},{j}": d for (i, j), d in self.details.items()},
            "notes": list(self.notes),
            "catalog": self.catalog.to_dict(),
        }


def default_barrier(m: Model, reps: np.ndarray, exclude: list, radius: float | None = None,
                    weight: float | None = None) -> Barrier:
    if radius is None:
        if len(reps) > 1:
            d = np.linalg.norm(reps[:, None, :] - reps[None, :, :], axis=2)
            radius = 0.5 * float(d[np.triu_indices(len(reps), 1)].min())
        else:
            radius = 0.0
    if weight is None:
        weight = 1e3 * validation(m).C_hat
    return Barrier(reps[exclude], radius, weight)


def v_tilde_matrix(m: Model, reps: np.ndarray, K: int = 20, seed: int = 0, restarts: int = RESTARTS,
                   radius: float | None = None, weight: float | None = None):
    """Quasipotential between representatives, avoiding the others.

    Returns (matrix, details).  An entry is +inf when the barrier still
    contributes more than 1% of the objective at the optimum.
    """
    reps = np.atleast_2d(np.asarray(reps, dtype=float))
    l = len(reps)
    out = np.zeros((l, l))
    details = {}
    for i in range(l):
        for j in range(l):
            if i == j:
                continue
            others = [k for k in range(l) if k not in (i, j)]
            barrier = default_barrier(m, reps, others, radius, weight) if others else None
            res = quasipotential(m, reps[i], reps[j], K=K, seed=seed, restarts=restarts, barrier=barrier)
            share = res.penalty / max(res.value + res.penalty, 1e-300)
            blocked = share > PENALTY_SHARE
            out[i, j] = math.inf if blocked else res.value
            details[(i, j)] = {**res.to_dict(), "penalty_share": share, "blocked": blocked}
    return out, details


def build_fw_catalog(m: Model, catalog: EquilibriumCatalog | None = None, include_unstable: bool = False,
                     K: int = 20, seed: int = 0, restarts: int = RESTARTS, check_limits: bool = True) -> FWCatalog:
    """Equivalence classes (stable equilibria by default), Vtilde, V, W and offsets."""
    catalog = find_equilibria(m) if catalog is None else catalog
    notes = []
    if check_limits:
        report = omega_limit_check(m, catalog)
        require_point_limits(report)
    classes = list(range(len(catalog.points))) if include_unstable else catalog.stable_indices
    if not classes:
        raise ValueError("no stable equilibria to build classes from")
    reps = catalog.points[classes]
    vt, details = v_tilde_matrix(m, reps, K=K, seed=seed, restarts=restarts)
    V = v_matrix(vt)
    W, s = fw_weights(V)
    if not include_unstable:
        notes.append("classes are the stable equilibria; saddles and repellers are not classes")
    return FWCatalog(catalog, reps, classes, vt, V, W, s, details, notes)


@dataclass
class RateValue:
    value: float
    argmin_class: int
    per_class: list
    paths: list = field(repr=False, default_factory=list)


def rate_function(m: Model, xi, fw: FWCatalog | None = None, K: int = 20, seed: int = 0,
                  restarts: int = RESTARTS) -> RateValue:
    """s(xi) = min over classes l of [s_l + V(xi | rep_l)]."""
    xi = np.asarray(xi, dtype=float)
    fw = build_fw_catalog(m, K=K, seed=seed, restarts=restarts) if fw is None else fw
    per_class = []
    paths = []
    for k, rep in enumerate(fw.representatives):
        res = quasipotential(m, rep, xi, K=K, seed=seed, restarts=restarts)
        per_class.append(float(fw.s_offsets[k] + res.value))
        paths.append(res)
    k = int(np.argmin(per_class))
    return RateValue(per_class[k], k, per_class, paths)
