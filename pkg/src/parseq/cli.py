"""Command-line front end.

Subcommands: sample, invert, trace, bench, eval-w2, rerun.  Every file-
writing run drops a manifest.json holding the command, the fully resolved
arguments, versions, output names, and per-phase timings; `rerun` replays
a manifest and must reproduce the primary outputs byte for byte (timings
are the one excluded field).

Exit codes: 0 success, 2 usage/config error, 3 numeric divergence,
4 I/O or parse error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .errors import (
    AdjointError,
    ConfigError,
    DivergenceError,
    InsufficientDataError,
    NumericDomainError,
    ParseError,
    ShapeError,
)
from .invert import InversionConfig, invert_deq, invert_deq_stochastic, invert_naive, run_report
from .metrics import gaussian_w2, sample_moments
from .predictors import GaussianOptimalPredictor, ZeroPredictor, load_gaussian_params, load_mlp
from .sampling import draw_noise_stack, draw_x_T, solve_stack
from .schedule import identity_subsequence, make_linear_beta_schedule, select_subsequence
from .stackio import read_stack, write_residual_csv, write_stack, write_trace_csv
from .solvers import SolverConfig, default_solver_config


def _default_threads() -> int:
    return int(os.environ.get("PARSEQ_THREADS", "1"))


def _add_chain_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--predictor", default="zero",
                   help="zero | gaussian[:params.json] | mlp:weights.json")
    p.add_argument("--T", type=int, default=100, help="full chain length")
    p.add_argument("--S", type=int, default=None,
                   help="subsequence length (default: the full chain)")
    p.add_argument("--subseq", choices=["linear", "quadratic"], default=None,
                   help="subsequence spacing; requires --S")
    p.add_argument("--eta", type=float, default=0.0, help="noise scale")
    p.add_argument("--D", type=int, default=2,
                   help="state dimension for predictors without a file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: PARSEQ_THREADS or 1)")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--solver-max-iters", type=int, default=None,
                   help="iteration budget (default 15, or 50 when eta > 0)")
    p.add_argument("--solver-tol", type=float, default=1e-3)
    p.add_argument("--history-m", type=int, default=5)
    p.add_argument("--mixing-beta", type=float, default=1.0)
    p.add_argument("--ridge-lambda", type=float, default=1e-4)
    p.add_argument("--init", choices=["x_T", "zero"], default="x_T",
                   help="stack initialization for the fixed-point solve")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parseq",
        description="Parallel fixed-point sampling and inversion for diffusion chains.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw x_T and run the chain to x_0")
    _add_chain_flags(p)
    _add_solver_flags(p)
    p.add_argument("--mode", choices=["sequential", "deq-anderson", "deq-picard"],
                   default="deq-anderson")
    p.add_argument("--noise-file", default=None,
                   help="binary stack of per-transition noise rows")
    p.add_argument("--save-stack", action="store_true",
                   help="also write the full S x D stack")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("invert", help="recover x_T for a target x_0")
    _add_chain_flags(p)
    _add_solver_flags(p)
    p.add_argument("--target", required=True, help="binary stack holding the target x_0")
    p.add_argument("--method", choices=["naive", "deq", "deq-stochastic"], default="deq")
    p.add_argument("--grad", choices=["phantom", "exact"], default="phantom")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--stop-loss", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("trace", help="residual traces over independent seeds")
    _add_chain_flags(p)
    _add_solver_flags(p)
    p.add_argument("--mode", choices=["deq-anderson", "deq-picard"], default="deq-anderson")
    p.add_argument("--noise-file", default=None)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("bench", help="sequential vs parallel wall-clock report")
    _add_chain_flags(p)
    _add_solver_flags(p)
    p.add_argument("--S-list", default="5,25,100",
                   help="comma-separated subsequence lengths")
    p.add_argument("--threads-list", default="1,2,8",
                   help="comma-separated worker counts for the deq rows")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval-w2", help="moments and Wasserstein-2 against a Gaussian target")
    p.add_argument("--samples", required=True, help="binary stack of samples, one per row")
    p.add_argument("--target", required=True, help="gaussian:params.json")
    p.add_argument("--out", default=None,
                   help="directory for eval.json (default: stdout only)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rerun", help="replay a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="redirect outputs to this directory")
    p.set_defaults(func=cmd_rerun)

    return parser


def _resolved_args(ns: argparse.Namespace) -> dict:
    args = {k: v for k, v in vars(ns).items() if k != "func"}
    if args.get("threads") is None and "threads" in args:
        args["threads"] = _default_threads()
    return args


def _pool(threads: int):
    return ThreadPoolExecutor(max_workers=threads) if threads > 1 else None


def _build_chain(args: dict):
    if args["subseq"] is not None and args["S"] is None:
        raise ConfigError("--subseq requires --S")
    schedule = make_linear_beta_schedule(args["T"], eta=args["eta"])
    if args["S"] is not None:
        subsequence = select_subsequence(args["T"], args["S"], args["subseq"] or "linear")
    else:
        subsequence = identity_subsequence(args["T"])
    kind, _, path = args["predictor"].partition(":")
    if kind == "zero":
        predictor = ZeroPredictor(args["D"])
    elif kind == "gaussian" and not path:
        predictor = GaussianOptimalPredictor(
            np.zeros(args["D"]), np.ones(args["D"]), schedule
        )
    elif kind == "gaussian":
        mu, var = load_gaussian_params(path)
        predictor = GaussianOptimalPredictor(mu, var, schedule)
    elif kind == "mlp":
        if not path:
            raise ConfigError("mlp predictor needs a weights file: mlp:weights.json")
        predictor = load_mlp(path, t_max=args["T"])
    else:
        raise ConfigError(f"unknown predictor '{args['predictor']}'")
    return schedule, subsequence, predictor


def _solver_config(args: dict, method: str) -> SolverConfig:
    max_iters = args["solver_max_iters"]
    if max_iters is None:
        max_iters = default_solver_config(args["eta"]).max_iters
    return SolverConfig(
        method=method,
        max_iters=max_iters,
        tol=args["solver_tol"],
        history_m=args["history_m"],
        mixing_beta=args["mixing_beta"],
        ridge_lambda=args["ridge_lambda"],
    )


def _load_noise(args: dict, S: int, D: int) -> np.ndarray:
    if args.get("noise_file"):
        noise, _, _ = read_stack(args["noise_file"])
        if noise.shape != (S, D):
            raise ShapeError(
                f"noise file holds shape {noise.shape}, chain needs ({S}, {D})"
            )
        return noise
    if args["eta"] > 0.0:
        return draw_noise_stack(args["seed"], S, D)
    return None


def _write_manifest(out_dir: str, command: str, args: dict,
                    outputs: list[str], timings_ms: dict) -> None:
    manifest = {
        "command": command,
        "args": args,
        "seed": args.get("seed"),
        "versions": {
            "parseq": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "outputs": outputs,
        "timings_ms": {k: round(v, 3) for k, v in timings_ms.items()},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_sample(ns: argparse.Namespace) -> int:
    args = _resolved_args(ns)
    t0 = time.perf_counter()
    schedule, subsequence, predictor = _build_chain(args)
    S, D = subsequence.S, predictor.dim
    x_T = draw_x_T(args["seed"], D)
    noise = _load_noise(args, S, D)
    os.makedirs(args["out"], exist_ok=True)
    outputs = ["x0.stack"]
    timings = {}

    t1 = time.perf_counter()
    if args["mode"] == "sequential":
        from .chain import sequential_rollout

        states = sequential_rollout(x_T, schedule, subsequence, predictor, noise)
        residuals = None
    else:
        method = "picard" if args["mode"] == "deq-picard" else "anderson"
        pool = _pool(args["threads"])
        try:
            result = solve_stack(
                x_T, schedule, subsequence, predictor, noise,
                _solver_config(args, method), args["init"], pool,
            )
        finally:
            if pool is not None:
                pool.shutdown()
        states = result.states
        residuals = result.residuals
    timings["solve"] = (time.perf_counter() - t1) * 1000.0

    write_stack(os.path.join(args["out"], "x0.stack"), states[-1], args["T"], args["eta"])
    if args["save_stack"]:
        write_stack(os.path.join(args["out"], "stack.stack"), states, args["T"], args["eta"])
        outputs.append("stack.stack")
    if residuals is not None:
        write_residual_csv(os.path.join(args["out"], "residuals.csv"), residuals)
        outputs.append("residuals.csv")
    timings["total"] = (time.perf_counter() - t0) * 1000.0
    _write_manifest(args["out"], "sample", args, outputs, timings)
    return 0


def cmd_invert(ns: argparse.Namespace) -> int:
    args = _resolved_args(ns)
    t0 = time.perf_counter()
    if args["method"] in ("naive", "deq") and args["eta"] > 0.0:
        raise ConfigError(f"--method {args['method']} requires --eta 0")
    schedule, subsequence, predictor = _build_chain(args)
    target_states, _, _ = read_stack(args["target"])
    target = target_states[-1]
    if target.size != predictor.dim:
        raise ShapeError(
            f"target dimension {target.size} != predictor dimension {predictor.dim}"
        )
    method_for_solver = "picard" if args["method"] == "naive" else "anderson"
    cfg = InversionConfig(
        epochs=args["epochs"],
        lr=args["lr"],
        gradient_mode="exact_ift" if args["grad"] == "exact" else "phantom",
        tau=args["tau"],
        solver=_solver_config(args, method_for_solver),
        stop_loss=args["stop_loss"],
        seed=args["seed"],
        init=args["init"],
    )
    pool = _pool(args["threads"])
    try:
        if args["method"] == "naive":
            run = invert_naive(target, cfg, schedule, subsequence, predictor, pool)
        elif args["method"] == "deq":
            run = invert_deq(target, cfg, schedule, subsequence, predictor, pool)
        else:
            run = invert_deq_stochastic(
                target, args["eta"], cfg, schedule, subsequence, predictor, pool
            )
    finally:
        if pool is not None:
            pool.shutdown()

    os.makedirs(args["out"], exist_ok=True)
    write_stack(os.path.join(args["out"], "x_T_hat.stack"), run.x_T_hat,
                args["T"], args["eta"])
    with open(os.path.join(args["out"], "loss_trace.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in enumerate(run.loss_trace):
            writer.writerow([epoch, repr(float(loss))])
    report = run_report(run, args, "x_T_hat.stack")
    with open(os.path.join(args["out"], "run.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    timings = {"total": (time.perf_counter() - t0) * 1000.0}
    _write_manifest(args["out"], "invert", args,
                    ["x_T_hat.stack", "loss_trace.csv", "run.json"], timings)
    return 0


def cmd_trace(ns: argparse.Namespace) -> int:
    args = _resolved_args(ns)
    t0 = time.perf_counter()
    if args["runs"] < 1:
        raise ConfigError(f"--runs must be >= 1, got {args['runs']}")
    schedule, subsequence, predictor = _build_chain(args)
    S, D = subsequence.S, predictor.dim
    method = "picard" if args["mode"] == "deq-picard" else "anderson"
    solver_cfg = _solver_config(args, method)
    pool = _pool(args["threads"])
    traces = []
    try:
        for j in range(args["runs"]):
            seed = args["seed"] + j
            x_T = draw_x_T(seed, D)
            noise = draw_noise_stack(seed, S, D) if args["eta"] > 0.0 else None
            if args.get("noise_file"):
                noise, _, _ = read_stack(args["noise_file"])
            result = solve_stack(
                x_T, schedule, subsequence, predictor, noise,
                solver_cfg, args["init"], pool,
            )
            traces.append(result.residuals)
    finally:
        if pool is not None:
            pool.shutdown()
    os.makedirs(args["out"], exist_ok=True)
    write_trace_csv(os.path.join(args["out"], "trace.csv"), traces)
    timings = {"total": (time.perf_counter() - t0) * 1000.0}
    _write_manifest(args["out"], "trace", args, ["trace.csv"], timings)
    return 0


def cmd_bench(ns: argparse.Namespace) -> int:
    args = _resolved_args(ns)
    t0 = time.perf_counter()
    from .chain import sequential_rollout

    s_values = [int(s) for s in str(args["S_list"]).split(",") if s]
    thread_values = [int(n) for n in str(args["threads_list"]).split(",") if n]
    rows = []
    for S in s_values:
        run_args = dict(args, S=S, subseq=args["subseq"] or "linear")
        schedule, subsequence, predictor = _build_chain(run_args)
        D = predictor.dim
        x_T = draw_x_T(args["seed"], D)
        noise = _load_noise(run_args, subsequence.S, D)

        t1 = time.perf_counter()
        sequential_rollout(x_T, schedule, subsequence, predictor, noise)
        rows.append(["sequential", S, 1,
                     (time.perf_counter() - t1) * 1000.0, subsequence.S])

        for threads in thread_values:
            pool = _pool(threads)
            try:
                t1 = time.perf_counter()
                result = solve_stack(
                    x_T, schedule, subsequence, predictor, noise,
                    _solver_config(run_args, "anderson"), args["init"], pool,
                )
                wall = (time.perf_counter() - t1) * 1000.0
            finally:
                if pool is not None:
                    pool.shutdown()
            rows.append(["deq-anderson", S, threads, wall, result.iters])

    os.makedirs(args["out"], exist_ok=True)
    with open(os.path.join(args["out"], "bench.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "S", "threads", "wall_ms", "iters"])
        for mode, S, threads, wall, iters in rows:
            writer.writerow([mode, S, threads, f"{wall:.3f}", iters])
    timings = {"total": (time.perf_counter() - t0) * 1000.0}
    _write_manifest(args["out"], "bench", args, ["bench.csv"], timings)
    return 0


def cmd_eval(ns: argparse.Namespace) -> int:
    args = _resolved_args(ns)
    t0 = time.perf_counter()
    kind, _, path = args["target"].partition(":")
    if kind != "gaussian" or not path:
        raise ConfigError("--target must be gaussian:params.json")
    samples, _, _ = read_stack(args["samples"])
    mu, var = load_gaussian_params(path)
    moments = sample_moments(samples)
    if moments.mean.shape != mu.shape:
        raise ShapeError(
            f"samples have dimension {moments.mean.size}, target has {mu.size}"
        )
    result = {
        "moments": moments.to_dict(),
        "target": {"mu": mu.tolist(), "var": var.tolist()},
        "w2": gaussian_w2(moments.mean, moments.var_diag, mu, var),
    }
    payload = json.dumps(result, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(payload)
    if args["out"]:
        os.makedirs(args["out"], exist_ok=True)
        with open(os.path.join(args["out"], "eval.json"), "w") as fh:
            fh.write(payload)
        timings = {"total": (time.perf_counter() - t0) * 1000.0}
        _write_manifest(args["out"], "eval-w2", args, ["eval.json"], timings)
    return 0


_COMMANDS = {
    "sample": cmd_sample,
    "invert": cmd_invert,
    "trace": cmd_trace,
    "bench": cmd_bench,
    "eval-w2": cmd_eval,
}


def cmd_rerun(ns: argparse.Namespace) -> int:
    with open(ns.manifest) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"manifest is not valid JSON: {exc}") from None
    for field in ("command", "args"):
        if field not in manifest:
            raise ParseError(f"manifest missing field '{field}'")
    command = manifest["command"]
    if command not in _COMMANDS:
        raise ParseError(f"manifest names unknown command '{command}'")
    args = dict(manifest["args"])
    if ns.out is not None:
        args["out"] = ns.out
    return _COMMANDS[command](argparse.Namespace(**args))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        # Divergence surfaces as exit code 3; the overflow warnings numpy
        # would print on the way there are noise at the CLI level.
        with np.errstate(over="ignore", invalid="ignore"):
            return ns.func(ns)
    except (DivergenceError, NumericDomainError, AdjointError) as exc:
        print(f"parseq: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ParseError, InsufficientDataError, OSError) as exc:
        print(f"parseq: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, ShapeError) as exc:
        print(f"parseq: usage error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
