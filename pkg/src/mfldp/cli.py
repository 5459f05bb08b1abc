"""Command-line entry point.

Every subcommand builds an experiment config and runs it, so a command line
and the equivalent ``run --config`` file produce the same outputs.

Exit codes: 0 ok, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .expr import RateDomainError, RateExprSyntaxError
from .harness import ConfigError, ExperimentConfig, canonical_json, run_experiment
from .mckean_vlasov import UnsupportedDynamics
from .model import ModelError
from .models import BUILTINS
from .particles import SimulationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _floats(text: str) -> list:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def _ints(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def _param(text: str):
    key, _, value = text.partition("=")
    if not key or not _:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _model_spec(args) -> dict:
    params = dict(args.model_param or [])
    if args.model in BUILTINS:
        return {"builtin": args.model, "params": params} if params else {"builtin": args.model}
    if Path(args.model).exists():
        return {"path": str(Path(args.model).resolve())}
    raise ConfigError(f"--model {args.model!r} is neither a built-in ({sorted(BUILTINS)}) nor a file")


def _common(p: argparse.ArgumentParser, replicas: bool = False):
    p.add_argument("--model", default="const2", help="built-in name or model TOML file")
    p.add_argument("--model-param", action="append", type=_param, metavar="KEY=VALUE",
                   help="built-in model parameter (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    if replicas:
        p.add_argument("--replicas", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfldp", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check irreducibility, rate bounds and Lipschitz estimate")
    p.add_argument("--model", default="const2")
    p.add_argument("--model-param", action="append", type=_param, metavar="KEY=VALUE")
    p.add_argument("--resolution", type=int)

    p = sub.add_parser("simulate", help="simulate the N-particle chain")
    _common(p)
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--init", type=_floats, help="initial counts or weights")
    p.add_argument("--horizon", type=float, default=10.0)

    p = sub.add_parser("stationary", help="occupation histogram of the stationary chain")
    _common(p, replicas=True)
    p.add_argument("--N", type=int, default=100)
    p.add_argument("--burn-in", type=float)
    p.add_argument("--sample", type=float, default=1000.0)
    p.add_argument("--resolution", type=int)

    p = sub.add_parser("ldp-slope", help="regress -log P(ball) on N")
    _common(p, replicas=True)
    p.add_argument("--target", type=_floats, required=True)
    p.add_argument("--radius", type=float, default=0.05)
    p.add_argument("--N-list", type=_ints, default=[50, 100, 200, 400])
    p.add_argument("--burn-in", type=float)
    p.add_argument("--sample", type=float, default=1000.0)

    p = sub.add_parser("mkv", help="deterministic limit")
    mkv = p.add_subparsers(dest="mode", required=True)
    q = mkv.add_parser("integrate")
    _common(q)
    q.add_argument("--nu", type=_floats, required=True)
    q.add_argument("--horizon", type=float, default=10.0)
    q.add_argument("--dt", type=float)
    q.add_argument("--stride", type=int, default=1)
    q = mkv.add_parser("equilibria")
    _common(q)
    q.add_argument("--starts", type=int, default=20)

    p = sub.add_parser("action", help="path costs and explicit controls")
    act = p.add_subparsers(dest="mode", required=True)
    q = act.add_parser("eval")
    _common(q)
    q.add_argument("--path", required=True, help="CSV with header t,mu0,...")
    q = act.add_parser("construct")
    _common(q)
    q.add_argument("--from", dest="from_", type=_floats, required=True)
    q.add_argument("--to", type=_floats, required=True)
    q.add_argument("--T", type=float, default=1.0)
    q.add_argument("--K", type=int, default=20)

    p = sub.add_parser("qp", help="quasipotential and stationary rate function")
    qp = p.add_subparsers(dest="mode", required=True)
    q = qp.add_parser("compute")
    _common(q)
    q.add_argument("--from", dest="from_", type=_floats, required=True)
    q.add_argument("--to", type=_floats, required=True)
    q.add_argument("--K", type=int, default=20)
    q.add_argument("--restarts", type=int, default=5)
    q = qp.add_parser("fw-catalog")
    _common(q)
    q.add_argument("--K", type=int, default=20)
    q.add_argument("--restarts", type=int, default=5)
    q.add_argument("--include-unstable", action="store_true")
    q = qp.add_parser("rate")
    _common(q)
    q.add_argument("--xi", type=_floats, required=True)
    q.add_argument("--K", type=int, default=20)
    q.add_argument("--restarts", type=int, default=5)

    p = sub.add_parser("report", help="end-to-end consistency gates")
    _common(p)

    p = sub.add_parser("run", help="run an experiment config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    return ap


def _config_from_args(args) -> ExperimentConfig:
    c = args.command
    params: dict = {}
    if c == "simulate":
        params = {"N": args.N, "horizon": args.horizon}
        if args.init:
            params["init"] = args.init
    elif c == "stationary":
        params = {"N": args.N, "sample": args.sample, "replicas": args.replicas}
        if args.burn_in is not None:
            params["burn_in"] = args.burn_in
        if args.resolution is not None:
            params["resolution"] = args.resolution
    elif c == "ldp-slope":
        params = {"target": args.target, "radius": args.radius, "N_list": args.N_list, "sample": args.sample,
                  "replicas": args.replicas}
        if args.burn_in is not None:
            params["burn_in"] = args.burn_in
    elif c == "mkv":
        params = {"mode": args.mode}
        if args.mode == "integrate":
            params.update(nu=args.nu, horizon=args.horizon, stride=args.stride)
            if args.dt is not None:
                params["dt"] = args.dt
        else:
            params["starts"] = args.starts
    elif c == "action":
        params = {"mode": args.mode}
        if args.mode == "eval":
            params["path"] = str(Path(args.path).resolve())
        else:
            params.update({"from": args.from_, "to": args.to, "T": args.T, "K": args.K})
    elif c == "qp":
        params = {"mode": args.mode, "K": args.K, "restarts": args.restarts}
        if args.mode == "compute":
            params.update({"from": args.from_, "to": args.to})
        elif args.mode == "fw-catalog":
            params["include_unstable"] = args.include_unstable
        else:
            params["xi"] = args.xi
    task = "mkv" if c == "mkv" else c
    return ExperimentConfig(task=task, model=_model_spec(args), params=params, seed=args.seed, out=args.out)


def _validate(args) -> int:
    from .harness import resolve_model
    from .model import validate_model

    m = resolve_model(_model_spec(args))
    report = validate_model(m, args.resolution)
    sys.stdout.write(canonical_json(report.to_dict()))
    return EXIT_OK if report.passed else EXIT_VALIDATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "validate":
            return _validate(args)
        if args.command == "run":
            cfg = ExperimentConfig.load(args.config)
        else:
            cfg = _config_from_args(args)
        result = run_experiment(cfg, args.out)
        sys.stdout.write(canonical_json({"out": str(result.out_dir), "summary": result.summary["result"]}))
        return EXIT_OK
    except (ConfigError, ModelError, RateExprSyntaxError, RateDomainError, FileNotFoundError, ValueError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (UnsupportedDynamics, SimulationError, FloatingPointError, ArithmeticError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
