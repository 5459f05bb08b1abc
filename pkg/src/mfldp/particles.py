"""Exact simulation of the N-particle empirical-measure chain.

The lumped chain moves ``counts -> counts - e_i + e_j`` at rate
``N * xi(i) * lam_ij(xi) = counts[i] * lam_ij(counts / N)``.  Uniform draws
come from a counter-based Philox generator; replicas get independent child
seeds from ``numpy.random.SeedSequence``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.sparse import csr_matrix
from scipy.sparse.linalg import spsolve

from . import kernels
from .mckean_vlasov import find_equilibria
from .model import Model

CHUNK = 1 << 16
EXACT_MAX_R = 3
EXACT_MAX_N = 400
DEFAULT_RESOLUTION = 20
MAX_CELLS = 5_000_000


class SimulationError(RuntimeError):
    pass


def philox(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def replica_seeds(seed, replicas: int) -> list:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(replicas)


def lattice_point(x, N: int) -> np.ndarray:
    """Nearest lattice point of M_1^(N) by largest-remainder rounding."""
    x = np.asarray(x, dtype=float)
    raw = x * N
    counts = np.floor(raw).astype(np.int64)
    short = N - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _check_counts(m: Model, counts, N=None) -> tuple[np.ndarray, int]:
    counts = np.array(counts, dtype=np.int64)
    if counts.shape != (m.r,) or counts.min() < 0:
        raise ValueError("counts must be r nonnegative integers")
    total = int(counts.sum())
    if N is not None and total != N:
        raise ValueError(f"counts sum to {total}, not N = {N}")
    if total < 1:
        raise ValueError("need at least one particle")
    return counts, total


def transition_rates(m: Model, counts) -> np.ndarray:
    """Per-edge jump rates counts[i] * lam_ij(counts / N)."""
    counts, N = _check_counts(m, counts)
    lam = m.rates_batch(counts[None, :] / N)[0]
    return counts[m.src] * lam


def gillespie_step(m: Model, counts, rng: np.random.Generator):
    """One jump: returns (holding time, next counts, edge index)."""
    counts, N = _check_counts(m, counts)
    rates = transition_rates(m, counts)
    total = float(rates.sum())
    if not total > 0:
        raise SimulationError(f"total jump rate is zero at counts {counts.tolist()}")
    hold = rng.exponential(1.0 / total)
    e = int(rng.choice(len(rates), p=rates / total))
    nxt = counts.copy()
    nxt[m.src[e]] -= 1
    nxt[m.dst[e]] += 1
    return hold, nxt, e


@dataclass
class Trajectory:
    """Event log of one run.  ``states[0]`` is the initial state and
    ``states[k + 1]`` the state right after event ``k``."""

    N: int
    times: np.ndarray
    edges: np.ndarray
    states: np.ndarray
    horizon: float
    seed: int
    edge_list: tuple = ()

    @property
    def n_events(self) -> int:
        return len(self.times)

    def at(self, t) -> np.ndarray:
        """Occupation measure at times ``t`` (right-continuous)."""
        k = np.searchsorted(self.times, np.atleast_1d(t), side="right")
        return self.states[k] / self.N

    def to_csv(self) -> str:
        r = self.states.shape[1]
        lines = ["t,edge," + ",".join(f"n{i}" for i in range(r))]
        lines.append("0.0,," + ",".join(str(int(c)) for c in self.states[0]))
        for t, e, s in zip(self.times, self.edges, self.states[1:]):
            i, j = self.edge_list[e]
            lines.append(f"{float(t)!r},{i}-{j}," + ",".join(str(int(c)) for c in s))
        return "\n".join(lines) + "\n"


def simulate(m: Model, N: int, init, horizon: float, seed: int) -> Trajectory:
    """Run the chain from ``init`` (counts) up to ``horizon``."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    counts, _ = _check_counts(m, init, N)
    start = counts.copy()
    rng = philox(seed)
    p = m.program
    times, edges = [], []
    t = 0.0
    while t < horizon:
        uniforms = rng.random(CHUNK)
        rec_t = np.empty(CHUNK // 2)
        rec_e = np.empty(CHUNK // 2, dtype=np.int64)
        t, _, n_rec, status = kernels.ssa_run(*p, counts, N, t, float(horizon), uniforms, 0, rec_t, rec_e, 0)
        times.append(rec_t[:n_rec])
        edges.append(rec_e[:n_rec])
        if status == 2:
            raise SimulationError(f"total jump rate is zero at counts {counts.tolist()}")
        if status == 0:
            break
    times = np.concatenate(times) if times else np.empty(0)
    edges = np.concatenate(edges) if edges else np.empty(0, dtype=np.int64)
    delta = np.zeros((len(edges), m.r), dtype=np.int64)
    delta[np.arange(len(edges)), m.src[edges]] -= 1
    delta[np.arange(len(edges)), m.dst[edges]] += 1
    states = np.vstack([start[None, :], start + np.cumsum(delta, axis=0)])
    return Trajectory(N, times, edges, states, float(horizon), int(seed), m.edges)


# ---------------------------------------------------------------------------
# occupation measures


@dataclass
class OccupationMeasure:
    """Occupation time per lattice point (``exact``) or per simplex cell."""

    N: int
    resolution: int
    exact: bool
    cells: np.ndarray  # (n, r) integer coordinates, summing to ``resolution`` for exact lattices
    times: np.ndarray
    visits: np.ndarray
    horizon: float
    burn_in: float
    replicas: int
    events: int
    notes: list = field(default_factory=list)

    @property
    def points(self) -> np.ndarray:
        pts = self.cells / self.resolution
        if not self.exact:
            pts[:, 0] = np.maximum(1.0 - pts[:, 1:].sum(axis=1), 0.0)
            pts /= pts.sum(axis=1, keepdims=True)
        return pts

    def probabilities(self) -> np.ndarray:
        return self.times / self.times.sum()

    def mode(self) -> np.ndarray:
        return self.cells[int(np.argmax(self.times))]

    def ball_mass(self, target, radius: float) -> tuple[float, int]:
        """(probability, entries) of the closed L1 ball around ``target``."""
        inside = np.abs(self.points - np.asarray(target, dtype=float)).sum(axis=1) <= radius + 1e-12
        return float(self.times[inside].sum() / self.times.sum()), int(self.visits[inside].sum())

    def to_csv(self) -> str:
        r = self.cells.shape[1]
        lines = [",".join(f"c{i}" for i in range(r)) + ",time,probability,entries"]
        prob = self.probabilities()
        for c, t, p, v in zip(self.cells, self.times, prob, self.visits):
            lines.append(",".join(str(int(x)) for x in c) + f",{float(t)!r},{float(p)!r},{int(v)}")
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "N": self.N,
            "exact_lattice": self.exact,
            "resolution": self.resolution,
            "horizon": self.horizon,
            "burn_in": self.burn_in,
            "replicas": self.replicas,
            "events": self.events,
            "occupied_cells": int(len(self.times)),
            "mode": self.mode().tolist(),
            "notes": list(self.notes),
        }


def default_burn_in(m: Model, x=None) -> float:
    """Ten relaxation times of the linearized drift at the nearest stable equilibrium."""
    cat = find_equilibria(m)
    tau = cat.relaxation_time(x)
    return 10.0 * tau if math.isfinite(tau) else 10.0


def _grid_shape(m: Model, N: int, resolution: int | None):
    exact = resolution is None and m.r <= EXACT_MAX_R and N <= EXACT_MAX_N
    res = N if exact else (resolution or DEFAULT_RESOLUTION)
    if resolution is not None and resolution == N:
        exact = True
    strides = np.zeros(m.r, dtype=np.int64)
    size = 1
    for k in range(1, m.r):
        strides[k] = size
        size *= res + 1
    if size > MAX_CELLS:
        raise ValueError(f"histogram would need {size} cells; lower the resolution")
    return exact, res, strides, size


def _occupation_run(m, N, init, t0, t1, seed_seq, res, strides, size):
    counts = np.array(init, dtype=np.int64)
    rng = philox(seed_seq)
    p = m.program
    hist = np.zeros(size)
    visits = np.zeros(size, dtype=np.int64)
    scratch_h = np.zeros(size)
    scratch_v = np.zeros(size, dtype=np.int64)
    events = 0
    # burn-in: same kernel into a scratch histogram
    for stop, h, v in ((t0, scratch_h, scratch_v), (t1, hist, visits)):
        t = 0.0 if stop == t0 else t0
        while True:
            uniforms = rng.random(CHUNK)
            t, _, n_ev, status = kernels.ssa_occupation(*p, counts, N, t, float(stop), uniforms, 0,
                                                        res, strides, h, v)
            if stop == t1:
                events += n_ev
            if status == 2:
                raise SimulationError(f"total jump rate is zero at counts {counts.tolist()}")
            if status == 0:
                break
    return hist, visits, events


def stationary_histogram(m: Model, N: int, burn_in: float | None, sample: float, seed: int,
                         replicas: int = 1, init=None, resolution: int | None = None,
                         workers: int | None = None) -> OccupationMeasure:
    """Occupation time over [burn_in, burn_in + sample], summed over replicas.

    Exact lattice points are used when r <= 3 and N <= 400 (unless a
    resolution is given); otherwise counts are rounded to a simplex grid of
    the given resolution.  ``burn_in=None`` uses ``default_burn_in``.
    """
    if sample <= 0:
        raise ValueError("sample must be positive")
    if replicas < 1:
        raise ValueError("need at least one replica")
    notes = []
    if init is None:
        cat = find_equilibria(m)
        x0 = cat.stable[0] if cat.l else np.full(m.r, 1.0 / m.r)
        init = lattice_point(x0, N)
    init, _ = _check_counts(m, init, N)
    if burn_in is None:
        burn_in = default_burn_in(m, init / N)
        notes.append(f"burn-in {burn_in:.6g} = 10 x relaxation time of the linearized drift")
    if burn_in < 0:
        raise ValueError("burn_in must be nonnegative")
    exact, res, strides, size = _grid_shape(m, N, resolution)
    seeds = replica_seeds(seed, replicas)

    def job(k):
        return _occupation_run(m, N, init, float(burn_in), float(burn_in + sample), seeds[k], res, strides, size)

    if replicas == 1:
        results = [job(0)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(replicas)))
    hist = np.zeros(size)
    visits = np.zeros(size, dtype=np.int64)
    events = 0
    for h, v, n in results:  # fixed order keeps sums reproducible
        hist += h
        visits += v
        events += n
    occupied = np.flatnonzero(hist > 0)
    coords = np.zeros((len(occupied), m.r), dtype=np.int64)
    rem = occupied.copy()
    for k in range(1, m.r):
        coords[:, k] = rem % (res + 1)
        rem //= res + 1
    coords[:, 0] = res - coords[:, 1:].sum(axis=1)
    if not exact:
        coords[:, 0] = np.maximum(coords[:, 0], 0)
    return OccupationMeasure(N, res, exact, coords, hist[occupied], visits[occupied],
                             float(sample * replicas), float(burn_in), replicas, events, notes)


# ---------------------------------------------------------------------------
# exact stationary law (small lattices)


def lattice_points(r: int, N: int) -> np.ndarray:
    from .model import simplex_grid

    return np.rint(simplex_grid(r, N) * N).astype(np.int64)


def exact_stationary(m: Model, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Stationary law of the chain on the full lattice.  Returns
    (counts array, probabilities).  Two-state models use the birth-death
    product formula in log space; larger ones a sparse linear solve."""
    pts = lattice_points(m.r, N)
    if m.r == 2:
        # order by count of state 1: k = 0..N
        k = np.arange(N + 1)
        cnt = np.stack([N - k, k], axis=1)
        lam = m.rates_batch(cnt / N)
        up = np.zeros(N + 1)
        down = np.zeros(N + 1)
        for e, (i, j) in enumerate(m.edges):
            if (i, j) == (0, 1):
                up = cnt[:, 0] * lam[:, e]
            else:
                down = cnt[:, 1] * lam[:, e]
        with np.errstate(divide="ignore"):
            logp = np.concatenate([[0.0], np.cumsum(np.log(up[:-1]) - np.log(down[1:]))])
        logp -= logp.max()
        p = np.exp(logp)
        return cnt, p / p.sum()
    index = {tuple(c): n for n, c in enumerate(pts)}
    lam = m.rates_batch(pts / N)
    rows, cols, vals = [], [], []
    for n, c in enumerate(pts):
        for e, (i, j) in enumerate(m.edges):
            if c[i] == 0:
                continue
            nb = c.copy()
            nb[i] -= 1
            nb[j] += 1
            rows.append(n)
            cols.append(index[tuple(nb)])
            vals.append(c[i] * lam[n, e])
    size = len(pts)
    q = csr_matrix((vals, (rows, cols)), shape=(size, size))
    q = q - csr_matrix((np.asarray(q.sum(axis=1)).ravel(), (range(size), range(size))), shape=(size, size))
    a = q.T.tolil()
    a[0, :] = 1.0
    b = np.zeros(size)
    b[0] = 1.0
    p = spsolve(a.tocsr(), b)
    p = np.maximum(p, 0.0)
    return pts, p / p.sum()


def exact_ball_mass(m: Model, N: int, target, radius: float) -> float:
    pts, p = exact_stationary(m, N)
    inside = np.abs(pts / N - np.asarray(target, dtype=float)).sum(axis=1) <= radius + 1e-12
    return float(p[inside].sum())


# ---------------------------------------------------------------------------
# LDP slope


@dataclass
class SlopeEstimate:
    N_list: list
    p_hat: list
    neg_log_p: list
    entries: list
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    one_sided: bool
    effective_samples: list
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "N": self.N_list,
            "p_hat": self.p_hat,
            "neg_log_p": self.neg_log_p,
            "ball_entries": self.entries,
            "effective_samples": self.effective_samples,
            "slope": self.slope,
            "intercept": self.intercept,
            "ci95": [self.ci_low, self.ci_high],
            "one_sided": self.one_sided,
            "notes": list(self.notes),
        }


def fit_slope(N_list, y) -> tuple[float, float, float, float]:
    """Least-squares line y = a + s N; returns (s, a, s_lo, s_hi) with a 95% t band."""
    x = np.asarray(N_list, dtype=float)
    y = np.asarray(y, dtype=float)
    fit = stats.linregress(x, y)
    dof = len(x) - 2
    half = stats.t.ppf(0.975, dof) * fit.stderr if dof > 0 else np.inf
    return float(fit.slope), float(fit.intercept), float(fit.slope - half), float(fit.slope + half)


def ldp_slope(m: Model, target, radius: float, N_list, burn_in: float | None, sample: float, seed: int,
              replicas: int = 1) -> SlopeEstimate:
    """Regress -log p_hat_N(ball) on N; the slope estimates the stationary
    rate function at ``target`` (its infimum over the ball, for finite radius).

    When some p_hat_N is zero, that N contributes the one-sided bound
    -log p_N >= log(n_eff / 3) (no hit in n_eff roughly independent
    windows, 95%), and the returned slope is flagged as one-sided.
    """
    target = np.asarray(target, dtype=float)
    if len(N_list) < 3:
        raise ValueError("need at least three values of N")
    if np.any(target <= 0):
        raise ValueError("target must lie in the simplex interior")
    cat = find_equilibria(m)
    relax = cat.relaxation_time()
    relax = relax if math.isfinite(relax) else 1.0
    p_hat, y, entries, n_eff = [], [], [], []
    one_sided = False
    notes = []
    per_n = replica_seeds(seed, len(N_list))
    for k, N in enumerate(N_list):
        occ = stationary_histogram(m, int(N), burn_in, sample, per_n[k], replicas=replicas)
        p, ent = occ.ball_mass(target, radius)
        eff = occ.horizon / relax
        p_hat.append(p)
        entries.append(ent)
        n_eff.append(eff)
        if p > 0:
            y.append(-math.log(p))
        else:
            one_sided = True
            y.append(math.log(max(eff, 3.0) / 3.0))
            notes.append(f"N={N}: no occupation of the ball; using lower bound -log p >= {y[-1]:.4g}")
    slope, intercept, lo, hi = fit_slope(N_list, y)
    if one_sided:
        notes.append("slope computed with lower bounds at unobserved N; treat as a one-sided estimate")
    return SlopeEstimate(list(map(int, N_list)), p_hat, y, entries, slope, intercept, lo, hi, one_sided,
                         n_eff, notes)
