"""Finite-horizon action of occupation paths.

The cost of a velocity ``v`` at occupation ``xi`` is the value of a concave
dual over node potentials ``phi`` (gauge ``phi[0] = 0``); the optimal tilted
rates are ``l = lam * exp(phi[dst] - phi[src])``.  Path costs integrate the
slice cost along piecewise-linear knot paths with Simpson's rule on each
segment.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .kernels import STATUS_INFEASIBLE, STATUS_NOT_CONVERGED, STATUS_OK
from .mckean_vlasov import validation
from .model import Model

FLOOR = 1e-9
PHI_CAP = 200.0
NEWTON_TOL = 1e-13
NEWTON_MAX_ITER = 100
# sup_{x in [0,1]} x |log x|
XLOGX_SUP = 1.0 / math.e


def tau(u):
    """e^u - u - 1."""
    u = np.asarray(u, dtype=float)
    return np.expm1(u) - u


def tau_star(u):
    """Legendre conjugate of ``tau``: (u+1)log(u+1) - u, 1 at -1, +inf below."""
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(u > -1.0, (u + 1.0) * np.log1p(np.maximum(u, -1.0 + 1e-300)) - u, np.inf)
    out = np.where(u == -1.0, 1.0, out)
    return out[()] if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# single time slice


@dataclass
class SliceSolution:
    cost: float
    phi: np.ndarray
    rates: np.ndarray
    dual: float
    primal: float
    gap: float
    residual: float
    status: int
    diagnosis: str = ""

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.cost)


def _floored(xis: np.ndarray, floor: float) -> np.ndarray:
    if floor <= 0:
        return xis
    x = np.maximum(xis, floor)
    return x / x.sum(axis=1, keepdims=True)


def _mkv_velocity(m: Model, xis: np.ndarray, lam: np.ndarray) -> np.ndarray:
    flux = xis[:, m.src] * lam
    out = np.zeros_like(xis)
    np.add.at(out.T, m.dst, flux.T)
    np.subtract.at(out.T, m.src, flux.T)
    return out


def _raw_solve(m: Model, xis, vels, lam, floor, cap, phis=None):
    xf = _floored(xis, floor)
    ws = np.ascontiguousarray(xf[:, m.src] * lam)
    thetas = np.ascontiguousarray(vels - _mkv_velocity(m, xf, lam))
    if phis is None:
        phis = np.zeros_like(thetas)
    dual, primal, resid, _, status = kernels.slice_solve_batch(
        thetas, ws, m.src, m.dst, float(cap), NEWTON_TOL, NEWTON_MAX_ITER, phis)
    return xf, phis, dual, primal, resid, status


def solve_slices(m: Model, xis, vels, lam=None, floor: float = FLOOR, cap: float = PHI_CAP):
    """Batched slice solve for velocities ``vels`` (full velocity, not the
    deviation from the drift) at occupations ``xis``.

    Returns a dict of arrays: cost (inf when infeasible), phi, rates, dual,
    primal, residual, status, boundary (True where the boundary test declared
    the velocity infeasible).

    When a coordinate of ``xi`` sits below the floor, the problem is re-solved
    with the floor lowered 100-fold.  For a velocity that is feasible on the
    boundary the outflow from floored states shrinks at least like the square
    root of the floor; for an infeasible one it stays put.  Outflow ratios
    below 3 are therefore reported as infeasible.
    """
    xis = np.ascontiguousarray(np.atleast_2d(xis), dtype=float)
    vels = np.ascontiguousarray(np.atleast_2d(vels), dtype=float)
    if lam is None:
        lam = m.rates_batch(xis)
    xf, phis, dual, primal, resid, status = _raw_solve(m, xis, vels, lam, floor, cap)
    cost = np.where(status == STATUS_INFEASIBLE, np.inf, dual)
    boundary = np.zeros(len(xis), dtype=bool)
    low = (xis < floor).any(axis=1) & (status == STATUS_OK) & (floor > 0)
    if low.any():
        idx = np.flatnonzero(low)
        xf2, _, _, _, _, status2 = _raw_solve(m, xis[idx], vels[idx], lam[idx], floor / 100.0, cap * 1.5)
        phis2 = np.zeros((len(idx), m.r))
        _, phis2, _, _, _, status2 = _raw_solve(m, xis[idx], vels[idx], lam[idx], floor / 100.0, cap * 1.5)
        for n, k in enumerate(idx):
            mask = xis[k, m.src] < floor
            out1 = float(np.sum(xf[k, m.src] * lam[k] * np.exp(phis[k, m.dst] - phis[k, m.src]) * mask))
            out2 = float(np.sum(xf2[n, m.src] * lam[k] * np.exp(phis2[n, m.dst] - phis2[n, m.src]) * mask))
            if status2[n] == STATUS_INFEASIBLE or (out1 > 1e-7 and out1 < 3.0 * out2):
                boundary[k] = True
                cost[k] = np.inf
    rates = lam * np.exp(phis[:, m.dst] - phis[:, m.src])
    return {
        "cost": cost,
        "phi": phis,
        "rates": rates,
        "dual": dual,
        "primal": primal,
        "residual": resid,
        "status": status,
        "boundary": boundary,
        "xi": xf,
    }


def slice_cost(m: Model, xi, theta, velocity: bool = False, floor: float = FLOOR,
               cap: float = PHI_CAP) -> SliceSolution:
    """Cost of one time slice.

    With ``velocity=False`` (default) ``theta`` is the deviation from the
    McKean-Vlasov drift and the result is the dual norm of ``theta`` at
    ``xi``.  With ``velocity=True`` ``theta`` is the full velocity.  In both
    cases the recovered rates move mass at net velocity
    ``theta + A*_xi xi`` (resp. ``theta``).
    """
    xi = np.asarray(xi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if abs(theta.sum()) > 1e-12 * max(1.0, np.abs(theta).max()):
        raise ValueError("slice velocity must sum to zero")
    lam = m.rates_batch(xi[None, :])
    vel = theta[None, :] if velocity else theta[None, :] + _mkv_velocity(m, xi[None, :], lam)
    out = solve_slices(m, xi[None, :], vel, lam=lam, floor=floor, cap=cap)
    status = int(out["status"][0])
    diagnosis = ""
    if out["boundary"][0]:
        diagnosis = "velocity needs outflow from an empty state (boundary infeasible)"
        status = STATUS_INFEASIBLE
    elif status == STATUS_INFEASIBLE:
        diagnosis = f"dual potentials exceeded cap {cap:g}; velocity not realizable"
    elif status == STATUS_NOT_CONVERGED:
        diagnosis = "Newton ascent did not converge"
    cost = float(out["cost"][0])
    dual = float(out["dual"][0])
    primal = float(out["primal"][0])
    return SliceSolution(
        cost=cost,
        phi=out["phi"][0],
        rates=out["rates"][0],
        dual=dual,
        primal=primal,
        gap=abs(primal - dual),
        residual=float(out["residual"][0]),
        status=status,
        diagnosis=diagnosis,
    )


def net_flow(m: Model, xi, rates) -> np.ndarray:
    """Velocity sum_e xi[src] l_e (delta_dst - delta_src)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    return _mkv_velocity(m, xi, np.atleast_2d(rates))[0] if xi.shape[0] == 1 else _mkv_velocity(m, xi, rates)


# ---------------------------------------------------------------------------
# paths


@dataclass
class PathGrid:
    """Piecewise-linear path through ``knots`` at ``times``."""

    times: np.ndarray
    knots: np.ndarray
    cache: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.knots = np.asarray(self.knots, dtype=float)
        if self.times.ndim != 1 or self.knots.shape[0] != self.times.shape[0]:
            raise ValueError("need one knot per time")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("knot times must increase")

    @classmethod
    def uniform(cls, knots, T: float) -> "PathGrid":
        knots = np.asarray(knots, dtype=float)
        return cls(np.linspace(0.0, T, knots.shape[0]), knots)

    @property
    def T(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def K(self) -> int:
        return self.knots.shape[0] - 1

    @property
    def nu(self) -> np.ndarray:
        return self.knots[0]

    @property
    def xi(self) -> np.ndarray:
        return self.knots[-1]

    def at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([np.interp(t, self.times, self.knots[:, i]) for i in range(self.knots.shape[1])], axis=1)

    def resample(self, K: int, T: float | None = None) -> "PathGrid":
        """Same geometry on ``K`` uniform segments, optionally over a new duration."""
        new_t = np.linspace(self.times[0], self.times[-1], K + 1)
        pts = self.at(new_t)
        T = self.T if T is None else T
        return PathGrid.uniform(pts, T)

    def to_csv(self) -> str:
        r = self.knots.shape[1]
        lines = ["t," + ",".join(f"mu{i}" for i in range(r))]
        for t, row in zip(self.times, self.knots):
            lines.append(f"{float(t)!r}," + ",".join(repr(float(x)) for x in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "PathGrid":
        rows = [ln for ln in text.strip().splitlines() if ln.strip()]
        header = [h.strip() for h in rows[0].split(",")]
        if header[0] != "t" or any(h != f"mu{i}" for i, h in enumerate(header[1:])):
            raise ValueError("path CSV header must be t,mu0,...,mu{r-1}")
        data = np.array([[float(x) for x in ln.split(",")] for ln in rows[1:]])
        return cls(data[:, 0], data[:, 1:])


SIMPSON = np.array([1.0, 4.0, 1.0]) / 6.0


def _segment_nodes(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # (n_seg, 3, r): start, midpoint, end
    return np.stack([a, 0.5 * (a + b), b], axis=1)


def segment_solve(m: Model, a, b, dt, floor: float = FLOOR):
    """Solve the three Simpson nodes of each segment a[k] -> b[k] of duration dt[k]."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (a.shape[0],))
    n, r = a.shape
    vel = (b - a) / dt[:, None]
    nodes = _segment_nodes(a, b).reshape(3 * n, r)
    vels = np.repeat(vel, 3, axis=0)
    out = solve_slices(m, nodes, vels, floor=floor)
    node_cost = out["cost"].reshape(n, 3)
    with np.errstate(invalid="ignore"):
        seg = dt * (node_cost @ SIMPSON)
    return seg, out, nodes


def segment_costs(m: Model, a, b, dt, floor: float = FLOOR) -> np.ndarray:
    return segment_solve(m, a, b, dt, floor)[0]


@dataclass
class PathCost:
    cost: float
    segment_costs: np.ndarray
    node_rates: np.ndarray
    node_points: np.ndarray
    infeasible_segment: int | None
    mass_flow: float

    def __float__(self):
        return self.cost


def path_cost(m: Model, path: PathGrid, floor: float = FLOOR, details: bool = False):
    """Action of a piecewise-linear path.

    On each segment the velocity is constant; the slice cost is evaluated at
    the two ends and the midpoint of the segment and combined with Simpson's
    rule.  Returns a float, or a ``PathCost`` when ``details`` is set
    (per-segment costs, optimal rates at the Simpson nodes, index of the
    first infeasible segment, and the integrated tilted mass flow
    ``int sum_e mu[src] l_e dt``).
    """
    dt = np.diff(path.times)
    seg, out, nodes = segment_solve(m, path.knots[:-1], path.knots[1:], dt, floor)
    bad = np.flatnonzero(~np.isfinite(seg))
    total = float(seg.sum()) if bad.size == 0 else math.inf
    if not details:
        return total
    n = len(dt)
    rates = out["rates"].reshape(n, 3, m.n_edges)
    flow_nodes = (out["xi"][:, m.src] * out["rates"]).sum(axis=1).reshape(n, 3)
    mass_flow = float(np.sum(dt * (flow_nodes @ SIMPSON)))
    path.cache = {"segment_costs": seg, "node_rates": rates}
    return PathCost(total, seg, rates, nodes.reshape(n, 3, m.r), int(bad[0]) if bad.size else None, mass_flow)


# ---------------------------------------------------------------------------
# control schedules


@dataclass
class ControlSchedule:
    """Time-dependent tilted rates on the model edges.

    ``kind == "sampled"``: ``node_rates[k]`` holds the rates at the start,
    midpoint and end of segment ``k``; linear in between.
    ``kind == "transport"``: leg ``k`` moves ``flows[k, e]`` units of mass
    along edge ``e`` at constant velocity; the rate is
    ``flows / (duration * mu(t)[src])``.
    """

    edges: tuple
    times: np.ndarray
    kind: str
    knots: np.ndarray
    node_rates: np.ndarray | None = None
    flows: np.ndarray | None = None

    @property
    def T(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def n_segments(self) -> int:
        return len(self.times) - 1

    def _locate(self, t: float) -> tuple[int, float]:
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.n_segments - 1))
        s = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        return k, float(np.clip(s, 0.0, 1.0))

    def mu_at(self, t: float) -> np.ndarray:
        k, s = self._locate(t)
        return (1 - s) * self.knots[k] + s * self.knots[k + 1]

    def rates_at(self, t: float) -> np.ndarray:
        k, s = self._locate(t)
        if self.kind == "sampled":
            nr = self.node_rates[k]
            if s <= 0.5:
                return nr[0] + (nr[1] - nr[0]) * (s / 0.5)
            return nr[1] + (nr[2] - nr[1]) * ((s - 0.5) / 0.5)
        dur = self.times[k + 1] - self.times[k]
        mu = self.mu_at(t)
        src = np.array([e[0] for e in self.edges])
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(self.flows[k] > 0, self.flows[k] / (dur * mu[src]), 0.0)
        return out

    def velocity_at(self, t: float) -> np.ndarray:
        """L(t)* mu(t) for the rates and path of this schedule."""
        mu = self.mu_at(t)
        l = self.rates_at(t)
        v = np.zeros_like(mu)
        for (i, j), rate in zip(self.edges, l):
            v[i] -= mu[i] * rate
            v[j] += mu[i] * rate
        return v

    def to_csv(self, n_per_segment: int = 1) -> str:
        lines = ["t,edge,rate"]
        for k in range(self.n_segments):
            for s in np.linspace(0.0, 1.0, n_per_segment + 1)[:-1]:
                t = self.times[k] + s * (self.times[k + 1] - self.times[k])
                for (i, j), rate in zip(self.edges, self.rates_at(t)):
                    lines.append(f"{float(t)!r},{i}-{j},{float(rate)!r}")
        return "\n".join(lines) + "\n"


def schedule_from_path(m: Model, path: PathGrid, floor: float = FLOOR) -> tuple[ControlSchedule, PathCost]:
    """Optimal tilted rates of a knot path, sampled at the Simpson nodes."""
    pc = path_cost(m, path, floor=floor, details=True)
    sched = ControlSchedule(m.edges, path.times.copy(), "sampled", path.knots.copy(), node_rates=pc.node_rates)
    return sched, pc


def control_cost(m: Model, sched: ControlSchedule, n_quad: int = 40) -> float:
    """Cost int sum_e mu[src] lam_e tau*(l_e/lam_e - 1) dt for the given
    rates along the schedule's own path (Gauss-Legendre on each segment)."""
    x, w = np.polynomial.legendre.leggauss(n_quad)
    x = (x + 1) / 2
    w = w / 2
    total = 0.0
    for k in range(sched.n_segments):
        t0, t1 = sched.times[k], sched.times[k + 1]
        ts = t0 + x * (t1 - t0)
        mus = np.array([sched.mu_at(t) for t in ts])
        ls = np.array([sched.rates_at(t) for t in ts])
        lam = m.rates_batch(mus)
        with np.errstate(divide="ignore", invalid="ignore"):
            integrand = mus[:, m.src] * lam * tau_star(ls / lam - 1.0)
        integrand = np.where(mus[:, m.src] > 0, integrand, 0.0).sum(axis=1)
        total += (t1 - t0) * float(w @ integrand)
    return total


def _xlogx(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)), 0.0)


def leg_bound(nu, xi, T: float, C: float, c: float) -> float:
    """Upper bound on the action of the constant-velocity leg nu -> xi in time T."""
    nu = np.asarray(nu, dtype=float)
    xi = np.asarray(xi, dtype=float)
    d = np.abs(nu - xi)
    l1 = float(d.sum())
    r = nu.shape[0]
    return float(
        np.sum(np.abs(_xlogx(d)))
        + np.sum(np.abs(_xlogx(xi) - _xlogx(nu)))
        + l1 * abs(math.log(T))
        + l1 * (abs(math.log(C)) + abs(math.log(c)) + XLOGX_SUP + 2.0)
        + C * T * r * r
    )


def _shortest_path(adj: dict, i: int, j: int) -> list[int]:
    prev = {i: None}
    q = deque([i])
    while q:
        u = q.popleft()
        if u == j:
            break
        for v in adj.get(u, ()):
            if v not in prev:
                prev[v] = u
                q.append(v)
    if j not in prev:
        raise ValueError(f"no admissible route from {i} to {j}")
    route = [j]
    while prev[route[-1]] is not None:
        route.append(prev[route[-1]])
    return route[::-1]


def transport_plan(nu, xi) -> dict:
    """Proportional allocation: excess of i is split over deficits j in
    proportion to their size.  Returns {(i, j): mass}."""
    diff = np.asarray(xi, dtype=float) - np.asarray(nu, dtype=float)
    deficit = np.maximum(diff, 0.0)
    total = deficit.sum()
    plan = {}
    if total <= 0:
        return plan
    for i in np.flatnonzero(diff < 0):
        excess = -diff[i]
        for j in np.flatnonzero(diff > 0):
            plan[(int(i), int(j))] = float(excess * deficit[j] / total)
    return plan


@dataclass
class Construction:
    schedule: ControlSchedule
    bound: float
    legs: int
    leg_bounds: list


def constant_velocity_controls(m: Model, nu, xi, T: float, C: float | None = None,
                               c: float | None = None) -> Construction:
    """Explicit rates steering nu to xi in time T at piecewise-constant velocity.

    If every excess-to-deficit pair is an edge, one leg suffices.  Otherwise
    each pair's mass is routed along a shortest admissible path and moved one
    hop per leg; all legs get equal duration.  The returned bound sums the
    per-leg analytic bound.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    nu = np.asarray(nu, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if C is None or c is None:
        rep = validation(m)
        C = rep.C_hat if C is None else C
        c = rep.c_hat if c is None else c
    index = {e: k for k, e in enumerate(m.edges)}
    plan = transport_plan(nu, xi)
    if not plan:
        sched = ControlSchedule(m.edges, np.array([0.0, T]), "transport", np.stack([nu, xi]),
                                flows=np.zeros((1, m.n_edges)))
        b = leg_bound(nu, xi, T, C, c)
        return Construction(sched, b, 0, [b])

    if all(pair in index for pair in plan):
        flows = np.zeros((1, m.n_edges))
        for pair, mass in plan.items():
            flows[0, index[pair]] = mass
        knots = np.stack([nu, xi])
    else:
        adj: dict = {}
        for i, j in m.edges:
            adj.setdefault(i, []).append(j)
        legs = []
        for (i, j), mass in sorted(plan.items()):
            route = _shortest_path(adj, i, j)
            for u, v in zip(route[:-1], route[1:]):
                f = np.zeros(m.n_edges)
                f[index[(u, v)]] = mass
                legs.append(f)
        flows = np.array(legs)
        knots = [nu]
        for f in flows:
            nxt = knots[-1].copy()
            np.subtract.at(nxt, m.src, f)
            np.add.at(nxt, m.dst, f)
            knots.append(np.maximum(nxt, 0.0))
        knots[-1] = xi.copy()
        knots = np.array(knots)
    n_legs = flows.shape[0]
    times = np.linspace(0.0, T, n_legs + 1)
    sched = ControlSchedule(m.edges, times, "transport", knots, flows=flows)
    bounds = [leg_bound(knots[k], knots[k + 1], T / n_legs, C, c) for k in range(n_legs)]
    return Construction(sched, float(sum(bounds)), n_legs, bounds)


def construction_path(cons: Construction, K: int) -> PathGrid:
    """Knot path of a construction: each leg split into equal sub-segments,
    then resampled to ``K`` uniform segments if the count differs."""
    sched = cons.schedule
    n_legs = sched.n_segments
    per_leg = max(1, int(math.ceil(K / n_legs)))
    pts = []
    for k in range(n_legs):
        s = np.linspace(0.0, 1.0, per_leg + 1)[:-1]
        pts.append((1 - s)[:, None] * sched.knots[k] + s[:, None] * sched.knots[k + 1])
    pts.append(sched.knots[-1][None, :])
    pts = np.concatenate(pts)
    path = PathGrid(np.linspace(0.0, sched.T, pts.shape[0]), pts)
    return path if path.K == K else path.resample(K)


def rescale_path(path: PathGrid, controls: ControlSchedule | None, alpha: float):
    """Run the same path ``alpha`` times faster: new duration T/alpha, rates
    ``alpha * l(alpha t)``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    t0 = path.times[0]
    new_path = PathGrid(t0 + (path.times - t0) / alpha, path.knots.copy())
    if controls is None:
        return new_path, None
    c0 = controls.times[0]
    new_times = c0 + (controls.times - c0) / alpha
    if controls.kind == "sampled":
        new_ctrl = replace(controls, times=new_times, node_rates=alpha * controls.node_rates)
    else:
        # flows are masses per leg; shorter legs already imply alpha-times rates
        new_ctrl = replace(controls, times=new_times, flows=controls.flows.copy())
    return new_path, new_ctrl


def rescaling_bound(cost: float, mass_flow: float, alpha: float, C: float, r: int, T: float) -> float:
    """Right-hand side of the time-rescaling cost inequality."""
    return cost + abs(math.log(alpha)) * mass_flow + abs(1 - alpha) / alpha * C * r * T
