import itertools
import math

import networkx as nx
import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from conftest import kl
from mfldp.action import PathGrid, constant_velocity_controls, construction_path, path_cost
from mfldp.mckean_vlasov import UnsupportedDynamics, find_equilibria, integrate
from mfldp.models import rotational_model
from mfldp.quasipotential import (
    UnsupportedClassCount,
    build_fw_catalog,
    default_barrier,
    fw_weights,
    in_trees,
    optimize_path,
    project_simplex,
    quasipotential,
    rate_function,
    v_matrix,
    v_tilde_matrix,
)

P = np.array([2 / 3, 1 / 3])
INF = math.inf


# ---------------------------------------------------------------------------
# graph layer


def test_v_matrix_hand_example():
    vt = [[0, 5, INF], [1, 0, 1], [INF, 2, 0]]
    V = v_matrix(vt)
    assert V[0, 2] == 6.0
    assert V[2, 0] == 3.0
    assert np.array_equal(v_matrix(V), V)


def test_v_matrix_two_classes():
    vt = np.array([[0, 0.3], [0.7, 0]])
    assert np.array_equal(v_matrix(vt), vt)


def _brute_closure(vt):
    l = len(vt)
    V = np.array(vt, dtype=float)
    for i, j in itertools.product(range(l), repeat=2):
        if i == j:
            V[i, j] = 0.0
            continue
        mids = [k for k in range(l) if k not in (i, j)]
        best = vt[i][j]
        for n in range(1, len(mids) + 1):
            for seq in itertools.permutations(mids, n):
                chain = [i, *seq, j]
                best = min(best, sum(vt[a][b] for a, b in zip(chain, chain[1:])))
        V[i, j] = best
    return V


def test_v_matrix_matches_chain_enumeration(rng):
    for l in (3, 4, 5):
        for _ in range(10):
            vt = rng.uniform(0.1, 3.0, (l, l))
            vt[rng.random((l, l)) < 0.3] = INF
            np.fill_diagonal(vt, 0.0)
            V = v_matrix(vt)
            assert np.allclose(V, _brute_closure(vt.tolist()), rtol=0, atol=1e-12)
            assert np.allclose(v_matrix(V), V, rtol=0, atol=1e-12)
            for i, j, k in itertools.product(range(l), repeat=3):
                assert V[i, j] <= V[i, k] + V[k, j] + 1e-12
            assert np.all(V <= vt)


def test_fw_two_classes():
    a, b = 0.4, 0.9
    W, s = fw_weights([[0, a], [b, 0]])
    assert W.tolist() == [b, a]
    assert s.tolist() == [b - min(a, b), a - min(a, b)]


def test_fw_three_classes_graph_family():
    graphs = sorted(sorted(g.items()) for g in in_trees(3, 0))
    assert graphs == sorted([[(1, 0), (2, 0)], [(1, 0), (2, 1)], [(1, 2), (2, 0)]])


def test_fw_three_classes_by_hand():
    V = np.array([[0, 1, 4], [2, 0, 3], [5, 6, 0]], dtype=float)
    W, s = fw_weights(V)
    # W_0 = min(2+5, 2+6, 3+5); W_1 = min(1+5, 1+6, 4+6); W_2 = min(1+3, 4+3, 4+2)
    assert W.tolist() == [7.0, 6.0, 4.0]
    assert s.tolist() == [3.0, 2.0, 0.0]


def _arborescence_weight(V, i):
    # minimum spanning arborescence of reversed edges rooted at i
    l = len(V)
    g = nx.DiGraph()
    for a, b in itertools.permutations(range(l), 2):
        if b != i and a != b and math.isfinite(V[b][a]):
            g.add_edge(a, b, weight=V[b][a])
    if l == 1:
        return 0.0
    try:
        arb = nx.minimum_spanning_arborescence(g, preserve_attrs=True)
    except nx.NetworkXException:
        return INF
    if arb.number_of_nodes() != l or arb.in_degree(i) != 0:
        return INF
    return float(sum(d["weight"] for _, _, d in arb.edges(data=True)))


def test_fw_matches_arborescence_oracle(rng):
    for l in range(2, 7):
        for _ in range(5):
            V = rng.uniform(0.1, 5.0, (l, l)).round(3)
            np.fill_diagonal(V, 0.0)
            W, s = fw_weights(V)
            for i in range(l):
                assert W[i] == pytest.approx(_arborescence_weight(V, i), abs=1e-12)
            assert s.min() == 0.0


@pytest.mark.parametrize("l, count", [(2, 1), (3, 3), (4, 16), (5, 125)])
def test_in_tree_counts(l, count):
    # Cayley: l^(l-2) rooted trees per root
    assert sum(1 for _ in in_trees(l, 0)) == count


def test_fw_rejects_many_classes():
    with pytest.raises(UnsupportedClassCount, match="arborescence"):
        fw_weights(np.zeros((8, 8)))


# ---------------------------------------------------------------------------
# path optimization


def test_project_simplex():
    assert np.allclose(project_simplex(np.array([0.5, 0.5])), [0.5, 0.5])
    assert np.allclose(project_simplex(np.array([1.5, -0.5])), [1.0, 0.0])
    x = project_simplex(np.array([0.2, 0.9, -0.3]))
    assert x.min() >= 0 and abs(x.sum() - 1) <= 1e-15


def test_equal_endpoints(const2):
    res = optimize_path(const2, P, P, K=10, T=1.0)
    assert res.cost == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(res.path.knots, P, atol=1e-12)
    assert quasipotential(const2, P, P).value == 0.0


def test_optimizer_monotone(const2):
    res = optimize_path(const2, P, [0.5, 0.5], K=20, T=2.0)
    h = np.array(res.history)
    assert len(h) > 2
    assert np.all(np.diff(h) <= 1e-15)
    assert res.converged
    # cache audit: the returned cost is the independently recomputed path cost
    assert res.cost == pytest.approx(path_cost(const2, PathGrid(res.path.times, res.path.knots)), rel=1e-12)


@pytest.mark.parametrize("xi", [[0.5, 0.5], [0.9, 0.1], [0.1, 0.9]])
def test_sanov(const2, xi):
    res = quasipotential(const2, P, xi)
    assert res.value == pytest.approx(kl(xi, P), rel=0.05)
    assert res.value <= res.construction_bound
    cons = constant_velocity_controls(const2, P, xi, res.T)
    assert res.value <= path_cost(const2, construction_path(cons, 20)) + 1e-12


def test_downhill_is_free(sis):
    nu = np.array([0.4, 0.6])
    end = integrate(sis, nu, 3.0, 1e-3).final
    assert quasipotential(sis, nu, end).value <= 1e-3


def test_knot_refinement(const2):
    xi = [0.5, 0.5]
    a = optimize_path(const2, P, xi, K=20, T=3.0).cost
    b = optimize_path(const2, P, xi, K=40, T=3.0).cost
    assert b <= a + 1e-4


# ---------------------------------------------------------------------------
# bistable model


def _lagrangian(x, v):
    # scalar control problem for the share x of state 1
    up = (1 - x) * (0.1 + 2 * x * x)
    down = x * (0.1 + 2 * (1 - x) ** 2)
    phi = math.log((v + math.sqrt(v * v + 4 * up * down)) / (2 * up))
    return v * phi - up * math.expm1(phi) - down * math.expm1(-phi)


def dp_oracle(x0, x1, cells=2000):
    """Accumulate the cheapest crossing cost cell by cell from x0 to x1
    (a monotone path suffices in one dimension)."""
    edges = np.linspace(x0, x1, cells + 1)
    h = abs(x1 - x0)
    sign = 1.0 if x1 > x0 else -1.0
    value = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (a + b)
        res = minimize_scalar(lambda s: _lagrangian(mid, sign * math.exp(s)) / math.exp(s),
                              bounds=(-25, 5), method="bounded", options={"xatol": 1e-10})
        value += res.fun * h / cells
    return value


@pytest.fixture(scope="module")
def sis_fw(sis):
    return build_fw_catalog(sis)


def test_sis_classes(sis_fw):
    assert sis_fw.l == 2
    assert sis_fw.Vtilde.shape == (2, 2)
    assert np.array_equal(np.diag(sis_fw.Vtilde), [0.0, 0.0])


def test_sis_symmetry_and_oracle(sis_fw):
    v12, v21 = sis_fw.Vtilde[0, 1], sis_fw.Vtilde[1, 0]
    assert 0 < v12 < INF and 0 < v21 < INF
    assert abs(v12 - v21) <= 0.02 * max(v12, v21)
    lo, hi = sorted(sis_fw.representatives[:, 1])
    oracle = dp_oracle(lo, 0.5)
    assert oracle == pytest.approx(0.18448, rel=2e-3)
    for v in (v12, v21):
        assert abs(v - oracle) <= 0.10 * oracle
    assert np.all(sis_fw.V <= sis_fw.Vtilde)
    assert np.abs(sis_fw.s_offsets).max() <= 5e-3
    assert sis_fw.s_offsets.min() == 0.0


def test_sis_rate_function(sis, sis_fw):
    for k, rep in enumerate(sis_fw.representatives):
        rv = rate_function(sis, rep, fw=sis_fw)
        assert rv.value == pytest.approx(sis_fw.s_offsets[k], abs=1e-9)


def test_barrier_blocks_passage_through_excluded_point(sis):
    cat = find_equilibria(sis)
    reps = cat.points
    barrier = default_barrier(sis, reps, [1])
    res = quasipotential(sis, reps[0], reps[2], barrier=barrier, restarts=1)
    assert res.penalty / (res.value + res.penalty) > 0.01


def test_one_class_matrix(const2):
    vt, _ = v_tilde_matrix(const2, P[None, :])
    assert vt.tolist() == [[0.0]]


def test_zero_at_equilibrium(const2):
    fw = build_fw_catalog(const2)
    assert fw.l == 1 and fw.s_offsets.tolist() == [0.0]
    assert rate_function(const2, fw.representatives[0], fw=fw).value <= 1e-6


def test_unsupported_dynamics_propagates():
    with pytest.raises(UnsupportedDynamics):
        build_fw_catalog(rotational_model())
