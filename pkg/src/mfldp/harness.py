"""Experiment configs and runners.

A config is a TOML document::

    task = "stationary"
    seed = 7

    [model]
    builtin = "const2"        # or: path = "my_model.toml", or inline r/edges
    params = {}

    [params]
    N = 100
    sample = 2000.0

Each run writes ``result.csv``, ``summary.json`` and ``manifest.json`` into
its output directory.  CSV and JSON outputs depend only on the config, so
identical configs give byte-identical files; the manifest additionally
records versions, wall time and output hashes.
"""

from __future__ import annotations

import hashlib
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, action, mckean_vlasov, particles, quasipotential
from .kernels import BACKEND
from .model import Model, ModelError, load_model, model_from_dict, model_to_dict, simplex_point, validate_model
from .models import builtin

TASKS = ("simulate", "stationary", "ldp-slope", "mkv", "action", "qp", "report")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str
    model: dict
    params: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {list(TASKS)}")
        if not isinstance(self.model, dict) or not ({"builtin", "path", "r"} & set(self.model)):
            raise ConfigError("model table needs 'builtin', 'path' or an inline 'r' and 'edges'")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(task=d["task"], model=dict(d["model"]), params=dict(d.get("params", {})),
                       seed=int(d.get("seed", 0)), out=d.get("out"))
        except KeyError as exc:
            raise ConfigError(f"config is missing {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        import tomli

        path = Path(path)
        cfg = cls.from_dict(tomli.loads(path.read_text()))
        if "path" in cfg.model and not Path(cfg.model["path"]).is_absolute():
            cfg.model["path"] = str(path.parent / cfg.model["path"])
        return cfg

    def to_dict(self) -> dict:
        d = {"task": self.task, "model": self.model, "params": self.params, "seed": self.seed}
        if self.out is not None:
            d["out"] = self.out
        return d

    def dumps(self) -> str:
        """TOML text for this config (flat params only)."""
        lines = [f'task = "{self.task}"', f"seed = {self.seed}"]
        if self.out is not None:
            lines.append(f'out = "{self.out}"')
        lines += ["", "[model]"]
        lines += [f"{k} = {_toml_value(v)}" for k, v in self.model.items()]
        lines += ["", "[params]"]
        lines += [f"{k} = {_toml_value(v)}" for k, v in self.params.items()]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items()) + "}"
    return repr(v)


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else ("inf" if x > 0 else "-inf" if x < 0 else "nan")
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def resolve_model(spec: dict) -> Model:
    if "builtin" in spec:
        return builtin(spec["builtin"], **spec.get("params", {}))
    if "path" in spec:
        return load_model(spec["path"])
    return model_from_dict(spec)


# ---------------------------------------------------------------------------
# tasks: each returns (csv text, summary dict)


def _point(x, r):
    x = simplex_point(x)
    if x.shape != (r,):
        raise ConfigError(f"point {x.tolist()} does not have {r} coordinates")
    return x


def _init_counts(m, N, p):
    if "init" in p:
        init = np.asarray(p["init"], dtype=float)
        if np.all(init == np.round(init)) and init.sum() == N:
            return init.astype(np.int64)
        return particles.lattice_point(_point(init, m.r), N)
    cat = mckean_vlasov.find_equilibria(m)
    x0 = cat.stable[0] if cat.l else np.full(m.r, 1.0 / m.r)
    return particles.lattice_point(x0, N)


def task_simulate(m, p, seed):
    N = int(p.get("N", 100))
    tr = particles.simulate(m, N, _init_counts(m, N, p), float(p.get("horizon", 10.0)), seed)
    final = tr.states[-1]
    return tr.to_csv(), {"N": N, "events": tr.n_events, "horizon": tr.horizon, "final_counts": final.tolist()}


def task_stationary(m, p, seed):
    N = int(p.get("N", 100))
    occ = particles.stationary_histogram(
        m, N, p.get("burn_in"), float(p.get("sample", 1000.0)), seed,
        replicas=int(p.get("replicas", 1)), init=_init_counts(m, N, p), resolution=p.get("resolution"))
    return occ.to_csv(), occ.summary()


def _slope_csv(est):
    lines = ["N,p_hat,neg_log_p,ball_entries,effective_samples"]
    for row in zip(est.N_list, est.p_hat, est.neg_log_p, est.entries, est.effective_samples):
        lines.append(f"{row[0]},{float(row[1])!r},{float(row[2])!r},{row[3]},{float(row[4])!r}")
    return "\n".join(lines) + "\n"


def task_ldp_slope(m, p, seed):
    est = particles.ldp_slope(m, _point(p["target"], m.r), float(p.get("radius", 0.05)),
                              [int(n) for n in p.get("N_list", [50, 100, 200, 400])], p.get("burn_in"),
                              float(p.get("sample", 1000.0)), seed, replicas=int(p.get("replicas", 1)))
    return _slope_csv(est), est.to_dict()


def _path_csv(times, mus):
    lines = ["t," + ",".join(f"mu{i}" for i in range(mus.shape[1]))]
    for t, row in zip(times, mus):
        lines.append(f"{float(t)!r}," + ",".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def task_mkv(m, p, seed):
    mode = p.get("mode", "integrate")
    if mode == "integrate":
        dt = float(p.get("dt", mckean_vlasov.default_dt(m)))
        path = mckean_vlasov.integrate(m, _point(p["nu"], m.r), float(p.get("horizon", 10.0)), dt)
        stride = max(1, int(p.get("stride", 1)))
        summary = {"final": path.final.tolist(), "max_clip": path.max_clip, "halvings": path.halvings,
                   "ok": path.ok, "dt": dt}
        return _path_csv(path.times[::stride], path.mus[::stride]), summary
    if mode == "equilibria":
        cat = mckean_vlasov.find_equilibria(m, starts=int(p.get("starts", 20)), seed=seed)
        report = mckean_vlasov.omega_limit_check(m, cat)
        lines = ["index,label," + ",".join(f"mu{i}" for i in range(m.r)) + ",max_real_eig"]
        for k, (pt, lab, ev) in enumerate(zip(cat.points, cat.labels, cat.eigenvalues)):
            top = float(np.max(np.real(ev))) if len(ev) else float("nan")
            lines.append(f"{k},{lab}," + ",".join(repr(float(x)) for x in pt) + f",{top!r}")
        return "\n".join(lines) + "\n", {**cat.to_dict(), "omega_limit": report.to_dict()}
    raise ConfigError(f"unknown mkv mode {mode!r}")


def task_action(m, p, seed):
    mode = p.get("mode", "construct")
    if mode == "eval":
        path = action.PathGrid.from_csv(Path(p["path"]).read_text())
        pc = action.path_cost(m, path, details=True)
        lines = ["segment,cost"] + [f"{k},{float(c)!r}" for k, c in enumerate(pc.segment_costs)]
        return "\n".join(lines) + "\n", {"cost": pc.cost, "infeasible_segment": pc.infeasible_segment,
                                         "mass_flow": pc.mass_flow}
    if mode == "construct":
        nu, xi, T = _point(p["from"], m.r), _point(p["to"], m.r), float(p.get("T", 1.0))
        cons = action.constant_velocity_controls(m, nu, xi, T)
        path = action.construction_path(cons, int(p.get("K", 20)))
        cost = action.path_cost(m, path)
        return cons.schedule.to_csv(int(p.get("samples_per_leg", 10))), {
            "bound": cons.bound, "legs": cons.legs, "leg_bounds": cons.leg_bounds, "path_cost": cost}
    raise ConfigError(f"unknown action mode {mode!r}")


def _fw_summary(fw):
    return fw.to_dict()


def task_qp(m, p, seed):
    mode = p.get("mode", "compute")
    K = int(p.get("K", 20))
    restarts = int(p.get("restarts", quasipotential.RESTARTS))
    if mode == "compute":
        res = quasipotential.quasipotential(m, _point(p["from"], m.r), _point(p["to"], m.r), K=K,
                                            restarts=restarts, seed=seed)
        return res.path.to_csv(), res.to_dict()
    if mode == "fw-catalog":
        fw = quasipotential.build_fw_catalog(m, include_unstable=bool(p.get("include_unstable", False)), K=K,
                                             seed=seed, restarts=restarts)
        lines = ["i,j,Vtilde,V"]
        for i in range(fw.l):
            for j in range(fw.l):
                lines.append(f"{i},{j},{float(fw.Vtilde[i, j])!r},{float(fw.V[i, j])!r}")
        return "\n".join(lines) + "\n", _fw_summary(fw)
    if mode == "rate":
        xis = p["xi"]
        xis = [xis] if not isinstance(xis[0], (list, tuple)) else xis
        fw = quasipotential.build_fw_catalog(m, K=K, seed=seed, restarts=restarts)
        lines = [",".join(f"xi{i}" for i in range(m.r)) + ",s"]
        values = []
        for x in xis:
            rv = quasipotential.rate_function(m, _point(x, m.r), fw=fw, K=K, seed=seed, restarts=restarts)
            values.append(rv.value)
            lines.append(",".join(repr(float(v)) for v in x) + f",{float(rv.value)!r}")
        return "\n".join(lines) + "\n", {"s": values, "fw": _fw_summary(fw)}
    raise ConfigError(f"unknown qp mode {mode!r}")


def lln_deviation(m, tr, sample_dt: float = 1.0, dt: float = 1e-3) -> float:
    """sup over t = 0, sample_dt, 2 sample_dt, ... of the L1 distance between
    the simulated occupation measure and the deterministic limit."""
    ode = mckean_vlasov.integrate(m, tr.states[0] / tr.N, tr.horizon, dt)
    ts = np.arange(0.0, tr.horizon + 1e-9, sample_dt)
    idx = np.rint(ts / dt).astype(int)
    return float(np.abs(tr.at(ts) - ode.mus[idx]).sum(axis=1).max())


REPORT_DEFAULTS = {
    "lln_N": 1000,
    "lln_horizon": 10.0,
    "lln_tol": 0.08,
    "lln_sample_dt": 1.0,
    "zero_tol": 1e-6,
    "target": [0.55, 0.45],
    "radius": 0.02,
    "N_list": [50, 100, 150, 200],
    "sample": 20000.0,
    "replicas": 4,
    "sanov_tol": 0.05,
    "slope_tol": 0.20,
}


def task_report(m, p, seed):
    """End-to-end check of four properties on one model:
    law of large numbers, zero rate at the equilibrium, agreement of the
    quasipotential with relative entropy (constant-rate models only), and
    agreement of the simulated LDP slope with the rate function."""
    q = {**REPORT_DEFAULTS, **p}
    seeds = np.random.SeedSequence(seed).spawn(2)
    rows = []
    gates = {}
    cat = mckean_vlasov.find_equilibria(m)
    fw = quasipotential.build_fw_catalog(m, catalog=cat)
    eq = fw.representatives[int(np.argmin(fw.s_offsets))]

    # law of large numbers
    N = int(q["lln_N"])
    nu = np.full(m.r, 1.0 / m.r) if "lln_init" not in q else _point(q["lln_init"], m.r)
    counts = particles.lattice_point(nu, N)
    tr = particles.simulate(m, N, counts, float(q["lln_horizon"]), int(seeds[0].generate_state(1)[0]))
    dev = lln_deviation(m, tr, float(q["lln_sample_dt"]))
    gates["lln"] = {"value": dev, "tol": q["lln_tol"], "pass": dev <= q["lln_tol"]}

    # zero at the selected equilibrium
    s0 = quasipotential.rate_function(m, eq, fw=fw, seed=seed).value
    gates["zero_at_equilibrium"] = {"value": s0, "tol": q["zero_tol"], "pass": s0 <= q["zero_tol"]}

    # relative entropy (only meaningful when rates are constant)
    target = _point(q["target"], m.r)
    s_target = quasipotential.rate_function(m, target, fw=fw, seed=seed).value
    lam = m.rates_batch(np.vstack([target, eq, np.full(m.r, 1.0 / m.r)]))
    if np.allclose(lam, lam[0], rtol=0, atol=1e-14):
        kl = float(np.sum(target * np.log(target / eq)))
        rel = abs(s_target / kl - 1.0)
        gates["sanov"] = {"value": s_target, "oracle": kl, "rel_error": rel, "tol": q["sanov_tol"],
                          "pass": rel <= q["sanov_tol"]}
    else:
        gates["sanov"] = {"skipped": "rates depend on the state; no product-form oracle", "pass": None}

    # simulated slope against the rate function
    est = particles.ldp_slope(m, target, float(q["radius"]), [int(n) for n in q["N_list"]], q.get("burn_in"),
                              float(q["sample"]), seeds[1], replicas=int(q["replicas"]))
    rel = abs(est.slope / s_target - 1.0) if s_target > 0 else math.inf
    gate = {"slope": est.slope, "ci95": [est.ci_low, est.ci_high], "rate_function": s_target,
            "rel_error": rel, "tol": q["slope_tol"], "one_sided": est.one_sided,
            "pass": (rel <= q["slope_tol"]) and not est.one_sided}
    if m.r <= 3 and max(est.N_list) <= 400:
        exact = [particles.exact_ball_mass(m, n, target, float(q["radius"])) for n in est.N_list]
        ex_slope = particles.fit_slope(est.N_list, [-math.log(x) for x in exact])[0]
        gate["exact_finite_N_slope"] = ex_slope
        gate["exact_rel_error"] = abs(ex_slope / s_target - 1.0)
    gates["ldp_slope"] = gate

    for name, g in gates.items():
        rows.append(f"{name},{'' if g['pass'] is None else int(bool(g['pass']))}")
    summary = {"gates": gates, "equilibrium": eq.tolist(), "slope": est.to_dict(),
               "fw": {"s_offsets": fw.s_offsets.tolist(), "l": fw.l}}
    return "gate,pass\n" + "\n".join(rows) + "\n", summary


RUNNERS = {
    "simulate": task_simulate,
    "stationary": task_stationary,
    "ldp-slope": task_ldp_slope,
    "mkv": task_mkv,
    "action": task_action,
    "qp": task_qp,
    "report": task_report,
}


def _versions() -> dict:
    import scipy

    out = {"mfldp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
           "python": platform.python_version(), "backend": BACKEND}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:
        out["numba"] = None
    return out


@dataclass
class RunResult:
    out_dir: Path
    summary: dict
    manifest: dict


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Validate the model, run the task and write its outputs.

    The manifest is written even when the task fails; the exception is then
    re-raised.
    """
    out_dir = Path(out_dir or cfg.out or f"runs/{cfg.task}-{cfg.digest()[:12]}")
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("result.csv", "summary.json"):
        (out_dir / name).unlink(missing_ok=True)
    manifest = {"config": cfg.to_dict(), "config_sha256": cfg.digest(), "versions": _versions(),
                "seed": cfg.seed, "task": cfg.task}
    t0 = time.perf_counter()
    summary = None
    try:
        m = resolve_model(cfg.model)
        report = validate_model(m)
        manifest["validation"] = report.to_dict()
        if not report.passed:
            raise ModelError("model fails validation: " + "; ".join(report.notes))
        csv_text, summary = RUNNERS[cfg.task](m, cfg.params, cfg.seed)
        summary = {"task": cfg.task, "model": model_to_dict(m), "result": summary}
        (out_dir / "result.csv").write_text(csv_text)
        (out_dir / "summary.json").write_text(canonical_json(summary))
        manifest["status"] = "ok"
    except Exception as exc:
        manifest["status"] = "error"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest["wall_time_s"] = time.perf_counter() - t0
        manifest["outputs"] = {
            f.name: hashlib.sha256(f.read_bytes()).hexdigest()
            for f in sorted(out_dir.iterdir())
            if f.name in ("result.csv", "summary.json")
        }
        (out_dir / "manifest.json").write_text(canonical_json(manifest))
    return RunResult(out_dir, summary, manifest)
