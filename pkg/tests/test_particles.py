import math

import numpy as np
import pytest
from scipy.stats import binom, multinomial

from mfldp.harness import lln_deviation
from mfldp.model import Model
from mfldp.particles import (
    SimulationError,
    exact_ball_mass,
    exact_stationary,
    gillespie_step,
    lattice_point,
    ldp_slope,
    philox,
    replica_seeds,
    simulate,
    stationary_histogram,
    transition_rates,
)


def test_single_edge_from_corner(const2, rng):
    hold, nxt, _ = gillespie_step(const2, [10, 0], rng)
    assert transition_rates(const2, [10, 0]).sum() == 10.0
    assert nxt.tolist() == [9, 1] and hold > 0
    _, nxt, _ = gillespie_step(const2, [0, 10], rng)
    assert transition_rates(const2, [0, 10]).sum() == 20.0
    assert nxt.tolist() == [1, 9]


def test_jump_probabilities(const2):
    assert transition_rates(const2, [1, 1]).tolist() == [1.0, 2.0]
    rng = philox(99)
    n = 100_000
    back = 0
    holds = np.empty(n)
    for k in range(n):
        holds[k], nxt, _ = gillespie_step(const2, [1, 1], rng)
        back += nxt[0] == 2
    p = 2 / 3
    assert abs(back / n - p) <= 3 * math.sqrt(p * (1 - p) / n)
    # exponential holding time with total rate 3
    assert abs(holds.mean() - 1 / 3) <= 3 * (1 / 3) / math.sqrt(n)


def test_zero_total_rate_aborts(rng):
    m = Model(2, {(0, 1): "1.0"})
    with pytest.raises(SimulationError):
        gillespie_step(m, [0, 5], rng)


def test_horizon_zero(csma):
    tr = simulate(csma, 30, [10, 10, 10], 0.0, seed=1)
    assert tr.n_events == 0
    assert tr.states.tolist() == [[10, 10, 10]]


def test_determinism(csma):
    a = simulate(csma, 200, [100, 50, 50], 5.0, seed=11)
    b = simulate(csma, 200, [100, 50, 50], 5.0, seed=11)
    assert a.to_csv() == b.to_csv()
    c = simulate(csma, 200, [100, 50, 50], 5.0, seed=12)
    assert a.to_csv() != c.to_csv()


@pytest.mark.parametrize("model_name", ["const2", "sis", "csma"])
def test_conservation_and_admissibility(model_name, request):
    m = request.getfixturevalue(model_name)
    N = 60
    tr = simulate(m, N, lattice_point(np.full(m.r, 1 / m.r), N), 20.0, seed=3)
    assert tr.n_events > 100
    assert np.all(tr.states.sum(axis=1) == N) and tr.states.min() >= 0
    assert np.all(np.diff(tr.times) >= 0) and tr.times[-1] <= 20.0
    edges = set(m.edges)
    diff = np.diff(tr.states, axis=0)
    for d in diff:
        assert np.abs(d).sum() == 2
        assert (int(np.flatnonzero(d == -1)[0]), int(np.flatnonzero(d == 1)[0])) in edges


def test_replica_seeds_split():
    a = replica_seeds(5, 3)
    b = replica_seeds(5, 3)
    assert [s.generate_state(2).tolist() for s in a] == [s.generate_state(2).tolist() for s in b]
    assert len({tuple(s.generate_state(2)) for s in a}) == 3


def test_law_of_large_numbers(const2):
    # sup over t = 0, 1, ..., 10 of the L1 distance to the closed-form limit
    N = 1000
    passes = 0
    for seed in range(20):
        tr = simulate(const2, N, [500, 500], 10.0, seed=seed)
        passes += lln_deviation(const2, tr) <= 0.08
    assert passes >= 19


def test_lln_against_closed_form(const2):
    tr = simulate(const2, 1000, [500, 500], 10.0, seed=0)
    t = np.arange(0, 11)
    exact = 2 / 3 + (0.5 - 2 / 3) * np.exp(-3 * t)
    got = tr.at(t)[:, 0]
    assert np.max(2 * np.abs(got - exact)) <= 0.08


def test_stationary_mode(const2):
    occ = stationary_histogram(const2, 100, None, 2000.0, seed=1)
    assert occ.exact
    assert np.abs(occ.mode() - [67, 33]).max() <= 2
    assert occ.probabilities().sum() == pytest.approx(1.0, abs=1e-12)
    assert occ.times.sum() == pytest.approx(occ.horizon, rel=1e-9)
    assert occ.times.min() >= 0


def test_stationary_binomial(const2):
    N = 50
    occ = stationary_histogram(const2, N, None, 5000.0, seed=2)
    pmf = np.zeros(N + 1)
    pmf[occ.cells[:, 1]] = occ.probabilities()
    oracle = binom.pmf(np.arange(N + 1), N, 1 / 3)
    assert 0.5 * np.abs(pmf - oracle).sum() <= 0.05


def test_replicas_merge_deterministically(const2):
    a = stationary_histogram(const2, 40, 5.0, 200.0, seed=4, replicas=3, workers=3)
    b = stationary_histogram(const2, 40, 5.0, 200.0, seed=4, replicas=3, workers=1)
    assert a.to_csv() == b.to_csv()
    assert a.horizon == pytest.approx(600.0)


def test_noninteracting_multinomial():
    m = Model(3, {(0, 1): "1.0", (1, 2): "0.5", (2, 0): "2.0", (1, 0): "0.7"})
    A = np.zeros((3, 3))
    for (i, j), k in zip(m.edges, range(m.n_edges)):
        A[i, j] = m.lam([1 / 3] * 3)[k]
    np.fill_diagonal(A, -A.sum(axis=1))
    w, v = np.linalg.eig(A.T)
    p = np.real(v[:, np.argmin(np.abs(w))])
    p /= p.sum()
    N = 20
    pts, probs = exact_stationary(m, N)
    oracle = multinomial.pmf(pts, N, p)
    assert np.max(np.abs(probs - oracle)) <= 1e-12
    tvs = []
    for sample in (200.0, 5000.0):
        occ = stationary_histogram(m, N, None, sample, seed=8)
        emp = dict(zip(map(tuple, occ.cells), occ.probabilities()))
        tvs.append(0.5 * sum(abs(emp.get(tuple(c), 0.0) - q) for c, q in zip(pts, oracle)))
    assert tvs[1] < tvs[0] and tvs[1] <= 0.05


def test_exact_stationary_binomial(const2):
    pts, probs = exact_stationary(const2, 200)
    oracle = binom.pmf(pts[:, 1], 200, 1 / 3)
    assert np.max(np.abs(probs - oracle)) <= 1e-12


def test_exact_stationary_matches_simulation(csma):
    pts, probs = exact_stationary(csma, 30)
    assert probs.sum() == pytest.approx(1.0)
    occ = stationary_histogram(csma, 30, None, 5000.0, seed=9)
    emp = dict(zip(map(tuple, occ.cells), occ.probabilities()))
    tv = 0.5 * sum(abs(emp.get(tuple(c), 0.0) - q) for c, q in zip(pts, probs))
    assert tv <= 0.08


def test_ball_probabilities_decrease(const2):
    # exact binomial oracle at the listed N
    p = [exact_ball_mass(const2, N, [0.5, 0.5], 0.05) for N in (50, 100, 200, 400)]
    assert all(a > b for a, b in zip(p, p[1:]))


def test_slope_at_equilibrium(const2):
    est = ldp_slope(const2, [2 / 3, 1 / 3], 0.05, [50, 100, 200, 400], None, 2000.0, seed=0)
    assert not est.one_sided
    assert abs(est.slope) <= 0.01


def test_slope_one_sided_when_unobserved(const2):
    est = ldp_slope(const2, [0.1, 0.9], 0.02, [50, 100, 200], None, 50.0, seed=0)
    assert est.one_sided
    assert any("lower bound" in n for n in est.notes)


def test_slope_preconditions(const2):
    with pytest.raises(ValueError):
        ldp_slope(const2, [0.5, 0.5], 0.05, [50, 100], None, 10.0, seed=0)
    with pytest.raises(ValueError):
        ldp_slope(const2, [1.0, 0.0], 0.05, [50, 100, 200], None, 10.0, seed=0)
