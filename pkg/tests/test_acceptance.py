"""Acceptance criteria 1-11.

Each test prints one line ``[criterion n] PASS|FAIL (seconds) detail`` and
then asserts the criterion, including its runtime budget.  Run directly
(``python tests/test_acceptance.py``) for the summary lines alone.
"""

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from mfldp.action import (
    PathGrid,
    constant_velocity_controls,
    construction_path,
    control_cost,
    net_flow,
    path_cost,
    rescale_path,
    rescaling_bound,
    schedule_from_path,
    slice_cost,
    tau,
    tau_star,
)
from mfldp.harness import ExperimentConfig, run_experiment
from mfldp.mckean_vlasov import find_equilibria, integrate
from mfldp.model import Model, validate_model
from mfldp.models import const2_model, csma_model, sis_bistable_model
from mfldp.particles import exact_ball_mass, fit_slope, ldp_slope
from mfldp.quasipotential import (
    build_fw_catalog,
    fw_weights,
    in_trees,
    optimize_path,
    quasipotential,
    rate_function,
    v_matrix,
)

sys.path.insert(0, str(Path(__file__).parent))
from test_quasipotential import dp_oracle  # noqa: E402

P = np.array([2 / 3, 1 / 3])
RESULTS = {}


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def _kl(x, p):
    x = np.asarray(x, dtype=float)
    return float(np.sum(x * np.log(x / p)))


def _record(n, ok, elapsed, budget, detail):
    ok = bool(ok) and (budget is None or elapsed < budget)
    limit = "" if budget is None else f" / {budget:g}s"
    line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s{limit}) {detail}"
    RESULTS[n] = line
    print("\n" + line, file=sys.__stdout__, flush=True)
    return ok


def criterion_1():
    t0 = time.perf_counter()
    exact = tau_star(-1.0) == 1.0 and tau_star(0.0) == 0.0
    v = np.linspace(-10, 10, 200_001)
    tv = tau(v)
    u = _rng(1).uniform(-1, 5, 200)
    err = max(abs(tau_star(x) - np.max(x * v - tv)) for x in u)
    ok = exact and err <= 1e-4
    return ok, time.perf_counter() - t0, 1.0, f"exact values {exact}, max Legendre error {err:.2e} (tol 1e-4)"


def _random_models(rng):
    for r in (2, 3, 4):
        for _ in range(3):
            rates = {}
            for i in range(r):
                for j in range(r):
                    if i != j and (j == (i + 1) % r or rng.random() < 0.5):
                        rates[(i, j)] = f"{rng.uniform(0.2, 2):.3f} + {rng.uniform(0, 1):.3f}*mu[{j}]*mu[{i}]"
            yield Model(r, rates)
    yield csma_model(4)


def criterion_2():
    t0 = time.perf_counter()
    rng = _rng(2)
    models = list(_random_models(rng))
    gap = resid = 0.0
    for k in range(100):
        m = models[k % len(models)]
        xi = rng.dirichlet(np.ones(m.r))
        theta = rng.standard_normal(m.r) * rng.uniform(0.01, 0.5)
        theta -= theta.mean()
        sol = slice_cost(m, xi, theta)
        gap = max(gap, abs(sol.primal - sol.dual))
        resid = max(resid, float(np.abs(net_flow(m, xi, sol.rates) - theta - m.drift(xi)).max()))
    m = sis_bistable_model()
    phis = np.linspace(-10, 10, 2_000_001)
    grid_err = 0.0
    for _ in range(20):
        xi = rng.dirichlet([2, 2])
        d = rng.uniform(-0.5, 0.5)
        lam = m.lam(xi)
        brute = np.max(d * phis - xi[0] * lam[0] * tau(phis) - xi[1] * lam[1] * tau(-phis))
        grid_err = max(grid_err, abs(slice_cost(m, xi, [-d, d]).cost - brute))
    ok = gap <= 1e-7 and grid_err <= 1e-5 and resid <= 1e-8
    return ok, time.perf_counter() - t0, 10.0, (
        f"max duality gap {gap:.1e} (tol 1e-7), flow residual {resid:.1e}, r=2 grid error {grid_err:.1e} (tol 1e-5)")


def criterion_3():
    t0 = time.perf_counter()
    m = const2_model()
    costs = []
    for dt in (1e-3, 5e-4):
        ode = integrate(m, [1.0, 0.0], 5.0, dt)
        costs.append(path_cost(m, PathGrid(ode.times, ode.mus)))
    ratio = costs[1] / costs[0]
    ok = costs[0] <= 1e-4 and ratio <= 0.55
    return ok, time.perf_counter() - t0, 5.0, (
        f"cost {costs[0]:.2e} at dt=1e-3 (tol 1e-4), {costs[1]:.2e} at dt=5e-4, ratio {ratio:.2f}")


def criterion_4():
    t0 = time.perf_counter()
    rng = _rng(4)
    worst_vel = 0.0
    worst_ratio = 0.0
    n = 0
    for m in (sis_bistable_model(), csma_model(3)):
        for k in range(25):
            nu = rng.dirichlet(np.ones(m.r)) if k % 5 else np.eye(m.r)[k % m.r]
            xi = rng.dirichlet(np.ones(m.r))
            T = float(np.exp(rng.uniform(np.log(0.2), np.log(5.0))))
            cons = constant_velocity_controls(m, nu, xi, T)
            s = cons.schedule
            for j in range(s.n_segments):
                a, b = s.times[j], s.times[j + 1]
                want = (s.knots[j + 1] - s.knots[j]) / (b - a)
                for f in (0.0, 0.25, 0.5, 0.9):
                    worst_vel = max(worst_vel, float(np.abs(s.velocity_at(a + f * (b - a)) - want).max()))
            realized = max(control_cost(m, s), path_cost(m, construction_path(cons, 20)))
            worst_ratio = max(worst_ratio, realized / cons.bound)
            n += 1
    ok = worst_vel <= 1e-8 and worst_ratio <= 1.0
    return ok, time.perf_counter() - t0, 30.0, (
        f"{n} triples, max velocity error {worst_vel:.1e} (tol 1e-8), max cost/bound {worst_ratio:.3f} (<= 1)")


SANOV_POINTS = [[0.5, 0.5], [0.9, 0.1], [0.1, 0.9], [0.3, 0.7], [0.8, 0.2]]


def criterion_5():
    t0 = time.perf_counter()
    m = const2_model()
    errs = []
    for xi in SANOV_POINTS:
        v = quasipotential(m, P, xi, K=20).value
        errs.append(abs(v / _kl(xi, P) - 1))
    ok = max(errs) <= 0.05
    return ok, time.perf_counter() - t0, 300.0, (
        "relative errors " + ", ".join(f"{e:.4f}" for e in errs) + " (tol 0.05)")


def criterion_6():
    t0 = time.perf_counter()
    m = const2_model()
    target, radius, N_list = [0.5, 0.5], 0.05, [50, 100, 200, 400]
    s = rate_function(m, target).value
    est = ldp_slope(m, target, radius, N_list, None, 20000.0, seed=6, replicas=4)
    rel = abs(est.slope / s - 1)
    exact = [exact_ball_mass(m, n, target, radius) for n in N_list]
    ex_slope = fit_slope(N_list, [-math.log(p) for p in exact])[0]
    ex_rel = abs(ex_slope / s - 1)
    ok = rel <= 0.2 and not est.one_sided and ex_rel <= 0.2
    detail = (f"rate function {s:.4f}; simulated slope {est.slope:.4f} (rel {rel:.3f}, "
              f"{'one-sided' if est.one_sided else 'two-sided'}, p_hat {[f'{p:.2e}' for p in est.p_hat]}); "
              f"exact binomial slope {ex_slope:.4f} (rel {ex_rel:.3f}), exact p_N "
              f"{[f'{p:.2e}' for p in exact]} (tol 0.2)")
    return ok, time.perf_counter() - t0, 600.0, detail


def criterion_7():
    t0 = time.perf_counter()
    m = const2_model()
    eq = find_equilibria(m).stable[0]
    s0 = rate_function(m, eq).value
    return s0 <= 1e-6, time.perf_counter() - t0, 60.0, f"s at equilibrium {eq.round(6).tolist()} = {s0:.1e} (tol 1e-6)"


def criterion_8():
    t0 = time.perf_counter()
    ok = True
    # 2x2: in-trees are the single edges
    a, b = 0.7, 0.2
    W, s = fw_weights([[0, a], [b, 0]])
    ok &= W.tolist() == [b, a] and s.tolist() == [b - min(a, b), a - min(a, b)]
    # 3x3 against exhaustive enumeration of functional graphs
    V = np.array([[0, 1, 4], [2, 0, 3], [5, 6, 0]], dtype=float)
    W, s = fw_weights(V)
    brute = []
    for i in range(3):
        others = [j for j in range(3) if j != i]
        best = math.inf
        for succ in np.ndindex(3, 3):
            g = dict(zip(others, succ))
            if any(g[j] == j for j in others):
                continue
            acyclic = all(_reaches(g, j, i) for j in others)
            if acyclic:
                best = min(best, sum(V[j, g[j]] for j in others))
        brute.append(float(best))
    ok &= W.tolist() == brute == [7.0, 6.0, 4.0]
    ok &= sum(1 for _ in in_trees(3, 0)) == 3
    ok &= s.min() == 0.0
    vt = [[0, 5, math.inf], [1, 0, 1], [math.inf, 2, 0]]
    C = v_matrix(vt)
    ok &= C[0, 2] == 6.0 and np.array_equal(v_matrix(C), C)
    return ok, time.perf_counter() - t0, 1.0, f"W {W.tolist()} vs enumeration {brute}; closure V(1,3) = {C[0, 2]:g}"


def _reaches(g, j, root):
    seen = set()
    while j != root:
        if j in seen:
            return False
        seen.add(j)
        j = g[j]
    return True


def criterion_9():
    t0 = time.perf_counter()
    m = sis_bistable_model()
    fw = build_fw_catalog(m)
    v12, v21 = fw.Vtilde[0, 1], fw.Vtilde[1, 0]
    sym = abs(v12 - v21) / max(v12, v21)
    lo = float(min(fw.representatives[:, 1]))
    oracle = dp_oracle(lo, 0.5)
    dp_err = max(abs(v12 - oracle), abs(v21 - oracle)) / oracle
    s_err = float(np.abs(fw.s_offsets).max())
    ok = fw.l == 2 and sym <= 0.02 and dp_err <= 0.10 and s_err <= 5e-3
    return ok, time.perf_counter() - t0, 600.0, (
        f"l={fw.l}, Vtilde = ({v12:.5f}, {v21:.5f}), asymmetry {sym:.4f} (tol 0.02), "
        f"DP oracle {oracle:.5f} rel {dp_err:.4f} (tol 0.10), max |s| {s_err:.1e} (tol 5e-3)")


def criterion_10():
    t0 = time.perf_counter()
    m = const2_model()
    rep = validate_model(m)
    worst = -math.inf
    checks = 0
    for xi, T in (([0.5, 0.5], 2.0), ([0.9, 0.1], 1.0), ([0.2, 0.8], 3.0)):
        path = optimize_path(m, P, xi, K=20, T=T).path
        sched, pc = schedule_from_path(m, path)
        for alpha in (0.5, 2.0, 4.0):
            new_path, new_sched = rescale_path(path, sched, alpha)
            rhs = rescaling_bound(pc.cost, pc.mass_flow, alpha, rep.C_hat, m.r, path.T)
            lhs = max(path_cost(m, new_path), control_cost(m, new_sched))
            worst = max(worst, lhs - rhs)
            checks += 1
    return worst <= 0, time.perf_counter() - t0, 30.0, f"{checks} checks, max(lhs - rhs) = {worst:.3e} (<= 0)"


def criterion_11():
    t0 = time.perf_counter()
    configs = [
        ExperimentConfig("simulate", {"builtin": "csma"}, {"N": 300, "horizon": 5.0}, seed=11),
        ExperimentConfig("stationary", {"builtin": "const2"}, {"N": 100, "sample": 500.0, "replicas": 3}, seed=11),
        ExperimentConfig("ldp-slope", {"builtin": "const2"},
                         {"target": [0.6, 0.4], "radius": 0.05, "N_list": [20, 40, 60], "sample": 200.0}, seed=11),
        ExperimentConfig("mkv", {"builtin": "sis-bistable"}, {"mode": "equilibria"}, seed=11),
        ExperimentConfig("action", {"builtin": "csma"},
                         {"mode": "construct", "from": [0.6, 0.2, 0.2], "to": [0.2, 0.6, 0.2]}, seed=11),
        ExperimentConfig("qp", {"builtin": "const2"},
                         {"mode": "compute", "from": [0.6666666666666666, 0.3333333333333333], "to": [0.5, 0.5],
                          "restarts": 2}, seed=11),
    ]
    same = 0
    with tempfile.TemporaryDirectory() as tmp:
        for k, cfg in enumerate(configs):
            outs = []
            for run in ("a", "b"):
                d = Path(tmp) / f"{k}{run}"
                run_experiment(cfg, d)
                outs.append({f.name: f.read_bytes() for f in sorted(d.iterdir()) if f.suffix in (".csv", ".json")
                             and f.name != "manifest.json"})
            same += outs[0] == outs[1] and len(outs[0]) == 2
    return same == len(configs), time.perf_counter() - t0, None, (
        f"{same}/{len(configs)} configs byte-identical across two runs")


CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 12)}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    ok, elapsed, budget, detail = CRITERIA[n]()
    assert _record(n, ok, elapsed, budget, detail), RESULTS[n]


if __name__ == "__main__":
    failed = 0
    for n, fn in CRITERIA.items():
        ok, elapsed, budget, detail = fn()
        failed += not _record(n, ok, elapsed, budget, detail)
    sys.exit(1 if failed else 0)
