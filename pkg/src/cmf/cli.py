"""Command-line front end: data prep, training, evaluation, benchmarking.

Subcommands:

    synth   generate a synthetic dataset (text COO + binary cache + truth)
    train   fit a model with the als / implicit / sgd engine
    eval    score a saved model on a dataset
    bench   solver sweep (exact / cg-fp32 / cg-fp16) or ALS-vs-SGD comparison
    rerun   repeat a previous run exactly from its manifest

Every command writes a RunManifest JSON (command, fully resolved flags,
dataset fingerprints, seed, artifact paths) before producing any artifact;
rerunning from the manifest reproduces ALS outputs bitwise.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .als import AlsConfig, objective, rmse, train
from .data import (Triples, build, gen_synthetic, load_cache, load_coo,
                   save_cache, save_coo)
from .errors import CmfError, DataError, NumericalError
from .factors import load_model, save_model
from .gram import TileConfig, roofline_estimate
from .implicit import ImplicitConfig, implicit_train, preference_rmse
from .parallel import set_workers
from .report import TrainReport
from .sgd import SgdConfig, sgd_train
from .solvers import SolverConfig

THREADS_ENV = "CMF_THREADS"


class UsageError(CmfError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fingerprint(path, sr=None, triples=None) -> dict:
    fp = {"path": str(path), "sha256": _sha256(path)}
    if sr is not None:
        fp.update(m=sr.m, n=sr.n, nnz=sr.nnz)
    elif triples is not None:
        fp.update(nnz=len(triples))
    return fp


def _write_manifest(path, command, resolved, datasets, artifacts):
    manifest = {
        "tool": "cmf",
        "version": __version__,
        "command": command,
        "resolved": resolved,
        "seed": resolved.get("seed"),
        "datasets": datasets,
        "artifacts": artifacts,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def _load_triples(path, fmt, one_based):
    """Text or binary ratings; binary caches are detected by magic."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"CMFR":
        sr = load_cache(path)
        return sr.to_triples(), sr.m, sr.n
    triples, m, n = load_coo(path, fmt=fmt)
    if one_based:
        if len(triples) and (triples.user.min() < 1 or triples.item.min() < 1):
            raise DataError("--one-based given but indices below 1 found")
        triples = Triples(triples.user - 1, triples.item - 1, triples.rating)
        m, n = max(m - 1, 0), max(n - 1, 0)
    return triples, m, n


def _resolve_threads(args) -> int:
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        threads = int(env) if env else None
    if threads is not None:
        return set_workers(threads)
    return 0


def _solver_config(args) -> SolverConfig:
    if args.half and args.solver == "exact":
        raise UsageError("--half stores the Gram matrices in binary16, which "
                         "the exact solver cannot factor; use --solver cg")
    return SolverConfig(method=args.solver, cg_iters=args.cg_iters,
                        cg_tol=args.cg_tol,
                        precision="fp16" if args.half else "fp32")


def _add_data_flags(p):
    p.add_argument("--train", required=True, help="training ratings (text COO or CMFR cache)")
    p.add_argument("--test", default=None, help="held-out ratings")
    p.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    p.add_argument("--one-based", action="store_true",
                   help="input indices start at 1; shift down on ingestion")


def _add_train_flags(p):
    p.add_argument("--engine", choices=("als", "implicit", "sgd"), default="als")
    p.add_argument("--solver", choices=("exact", "cg"), default="cg")
    p.add_argument("--cg-iters", type=int, default=6)
    p.add_argument("--cg-tol", type=float, default=1e-4,
                   help="relative residual tolerance for cg early exit")
    p.add_argument("--half", action="store_true",
                   help="store Gram matrices in binary16 (cg solver only)")
    p.add_argument("--factors", type=int, default=100)
    p.add_argument("--lambda", dest="lam", type=float, default=0.05)
    p.add_argument("--alpha", type=float, default=None,
                   help="implicit confidence scale c = 1 + alpha*r")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--target-rmse", type=float, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker pool cap (overrides ${THREADS_ENV})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-scale", type=float, default=0.1)
    p.add_argument("--plain-reg", action="store_true",
                   help="use plain lambda*I instead of lambda*n_u*I (als)")
    p.add_argument("--tile", type=int, default=8)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05, help="sgd learning rate")
    p.add_argument("--decay", type=float, default=0.0,
                   help="sgd schedule lr_k = lr / (1 + decay*k)")
    p.add_argument("--sgd-mode", choices=("serial", "hogwild"), default="serial")


def build_parser() -> _Parser:
    parser = _Parser(prog="cmf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--f", type=int, required=True)
    p.add_argument("--density", type=float, required=True)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="synthetic", help="output path prefix")

    p = sub.add_parser("train", help="train a factorization model")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--model-out", default="model.cmfm")
    p.add_argument("--report-out", default="report.jsonl")

    p = sub.add_parser("eval", help="evaluate a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--train", default=None, help="also report the training objective")
    p.add_argument("--format", choices=("tsv", "csv"), default="tsv")
    p.add_argument("--one-based", action="store_true")
    p.add_argument("--lambda", dest="lam", type=float, default=0.05)

    p = sub.add_parser("bench", help="benchmark solver configurations or engines")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--mode", choices=("solvers", "compare"), default="solvers")
    p.add_argument("--out", default="bench", help="output path prefix")

    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    return parser


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    paths = {
        "coo": f"{args.out}.tsv",
        "cache": f"{args.out}.cmfr",
        "truth": f"{args.out}.truth.cmfm",
    }
    _write_manifest(f"{args.out}.manifest.json", "synth", vars(args), [], paths)
    triples, truth = gen_synthetic(args.m, args.n, args.f, args.density,
                                   args.noise, args.seed)
    sr = build(triples, args.m, args.n)
    save_coo(paths["coo"], triples)
    save_cache(paths["cache"], sr)
    save_model(paths["truth"], truth.x_true, truth.theta_true)
    print(f"wrote {len(triples)} ratings ({args.m}x{args.n}, f={args.f}) "
          f"to {paths['coo']} / {paths['cache']}")
    print(f"truth factors: {paths['truth']}  sha256={_sha256(paths['cache'])[:16]}...")
    return 0


def _load_train_test(args):
    train_triples, m1, n1 = _load_triples(args.train, args.format, args.one_based)
    datasets = [_fingerprint(args.train, triples=train_triples)]
    test_triples = None
    m2 = n2 = 0
    if args.test:
        test_triples, m2, n2 = _load_triples(args.test, args.format, args.one_based)
        datasets.append(_fingerprint(args.test, triples=test_triples))
    m, n = max(m1, m2), max(n1, n2)
    sr = build(train_triples, m, n)
    for fp in datasets:
        fp.update(m=m, n=n)
    return sr, test_triples, datasets


def _run_engine(args, sr, test_triples):
    tiles = TileConfig(tile=args.tile, batch=args.batch)
    if args.engine == "als":
        if args.alpha is not None:
            raise UsageError("--alpha only applies to --engine implicit")
        cfg = AlsConfig(f=args.factors, lam=args.lam, epochs=args.epochs,
                        solver=_solver_config(args), init_scale=args.init_scale,
                        seed=args.seed, target_rmse=args.target_rmse,
                        weighted_reg=not args.plain_reg, tiles=tiles)
        return train(sr, test_triples, cfg)
    if args.engine == "implicit":
        cfg = ImplicitConfig(f=args.factors,
                             alpha=args.alpha if args.alpha is not None else 40.0,
                             lam=args.lam, epochs=args.epochs,
                             solver=_solver_config(args), init_scale=args.init_scale,
                             seed=args.seed, tiles=tiles)
        return implicit_train(sr, cfg, test=test_triples)
    if args.half:
        raise UsageError("--half only applies to the als/implicit engines")
    if args.alpha is not None:
        raise UsageError("--alpha only applies to --engine implicit")
    cfg = SgdConfig(f=args.factors, lam=args.lam, epochs=args.epochs,
                    lr0=args.lr, decay=args.decay, mode=args.sgd_mode,
                    seed=args.seed, workers=args.threads or 1,
                    init_scale=args.init_scale, target_rmse=args.target_rmse)
    return sgd_train(sr, test_triples, cfg)


def cmd_train(args) -> int:
    _resolve_threads(args)
    sr, test_triples, datasets = _load_train_test(args)
    artifacts = {"model": args.model_out, "report": args.report_out}
    _write_manifest(f"{args.report_out}.manifest.json", "train", vars(args),
                    datasets, artifacts)
    x, theta, report = _run_engine(args, sr, test_triples)
    save_model(args.model_out, x, theta)
    report.save(args.report_out)
    last = report.epochs[-1]
    print(f"engine={args.engine} epochs={report.epochs_run} "
          f"stop={report.stop_reason} objective={last.objective:.6g}"
          + (f" rmse={last.rmse:.6f}" if last.rmse is not None else ""))
    print(f"model: {args.model_out}  report: {args.report_out}")
    return 0


def cmd_eval(args) -> int:
    x, theta = load_model(args.model)
    test_triples, tm, tn = _load_triples(args.test, args.format, args.one_based)
    if tm > x.shape[0] or tn > theta.shape[0]:
        raise DataError(
            f"model is {x.shape[0]}x{theta.shape[0]}, dataset indexes up to "
            f"{tm - 1}x{tn - 1}")
    if len(test_triples) == 0:
        raise DataError("test set is empty")
    value = rmse(x, theta, test_triples)
    print(f"rmse={value:.6f}")
    if args.train:
        train_triples, m1, n1 = _load_triples(args.train, args.format, args.one_based)
        if m1 > x.shape[0] or n1 > theta.shape[0]:
            raise DataError("model/train dataset dimension mismatch")
        sr = build(train_triples, x.shape[0], theta.shape[0])
        obj = objective(x, theta, sr, args.lam)
        print(f"objective={obj:.6g}")
    return 0


def _bench_solver_rows(args, sr, test_triples):
    configs = [
        ("exact-fp32", "exact", False),
        ("cg-fp32", "cg", False),
        ("cg-fp16", "cg", True),
    ]
    rows = []
    for label, method, half in configs:
        sub = argparse.Namespace(**vars(args))
        sub.solver, sub.half, sub.engine = method, half, "als"
        x, theta, report = _run_engine(sub, sr, test_triples)
        mean = lambda attr: float(np.mean([getattr(e, attr) for e in report.epochs]))
        rows.append({
            "config": label,
            "epochs": report.epochs_run,
            "hermitian": mean("time_hermitian"),
            "stage": mean("time_stage"),
            "accumulate": mean("time_accumulate"),
            "store": mean("time_store"),
            "bias": mean("time_bias"),
            "solve": mean("time_solve"),
            "eval": mean("time_eval"),
            "final_rmse": report.final_rmse,
            "gram_bytes": report.gram_bytes_x + report.gram_bytes_theta,
            "trajectory": report.rmse_trajectory(),
        })
    return rows


def _bench_compare_rows(args, sr, test_triples):
    rows = []
    for engine in ("als", "sgd"):
        sub = argparse.Namespace(**vars(args))
        sub.engine = engine
        sub.half = False
        x, theta, report = _run_engine(sub, sr, test_triples)
        epochs_to = None
        if args.target_rmse is not None:
            for rec in report.epochs:
                if rec.rmse is not None and rec.rmse <= args.target_rmse:
                    epochs_to = rec.epoch + 1
                    break
        rows.append({
            "config": engine,
            "epochs": report.epochs_run,
            "epoch_time": report.total_time() / max(report.epochs_run, 1),
            "final_rmse": report.final_rmse,
            "epochs_to_threshold": epochs_to,
            "trajectory": report.rmse_trajectory(),
        })
    return rows


def cmd_bench(args) -> int:
    _resolve_threads(args)
    sr, test_triples, datasets = _load_train_test(args)
    out_rows = f"{args.out}.rows.jsonl"
    _write_manifest(f"{args.out}.manifest.json", "bench", vars(args), datasets,
                    {"rows": out_rows})
    if args.mode == "solvers":
        rows = _bench_solver_rows(args, sr, test_triples)
        cols = ("config", "hermitian", "stage", "accumulate", "store", "bias",
                "solve", "eval", "final_rmse")
        est = roofline_estimate(sr.m, sr.n, sr.nnz, args.factors, f_s=args.cg_iters)
        ratio = est["solve_flops_cg"] / est["solve_flops_exact"]
        print(f"# roofline: hermitian {est['hermitian_flops']:.3g} flops "
              f"(C/M ratio {est['hermitian_cm_ratio']:.0f}); "
              f"cg/exact solve flop ratio {ratio:.3f}")
    else:
        rows = _bench_compare_rows(args, sr, test_triples)
        cols = ("config", "epochs", "epoch_time", "final_rmse", "epochs_to_threshold")
    header = "  ".join(f"{c:>11}" for c in cols)
    print(header)
    for row in rows:
        cells = []
        for c in cols:
            v = row[c]
            cells.append(f"{v:>11.4g}" if isinstance(v, float) else f"{str(v):>11}")
        print("  ".join(cells))
    with open(out_rows, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    print(f"rows: {out_rows}")
    return 0


def cmd_rerun(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    command = manifest["command"]
    resolved = dict(manifest["resolved"])
    resolved.pop("command", None)
    ns = argparse.Namespace(**resolved)
    print(f"rerunning {command} from {args.manifest}")
    return {"synth": cmd_synth, "train": cmd_train,
            "eval": cmd_eval, "bench": cmd_bench}[command](ns)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
                   "bench": cmd_bench, "rerun": cmd_rerun}[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
