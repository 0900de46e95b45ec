"""Command-line entry point: ``smoelab {train,eval,finetune,analyze,rates,gradcheck}``.

Exit codes: 0 ok, 2 usage, 3 configuration, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from collections import defaultdict
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import gradcheck, plotting, workbench
from .config import RunConfig, load_preset, preset_names
from .data import DataError
from .metrics import ROUTING_COLUMNS, MetricsSink, read_metrics, write_routing_records
from .model import load_checkpoint
from .routing import ConfigError
from .training import ALGORITHMS, evaluate, finetune, toy_classification_task, train

log = logging.getLogger("smoelab")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
OUT_ENV = "COMPETESMOE_OUT"


class RuntimeFailure(RuntimeError):
    pass


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise ConfigError(f"--out: no output directory given and ${OUT_ENV} is unset")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_config(spec: str | None, validate: bool = True) -> RunConfig:
    """``spec`` is a JSON file path or the name of a bundled preset."""
    if spec is None:
        return load_preset("nano", validate)
    if Path(spec).is_file():
        return RunConfig.from_file(spec, validate)
    if spec in preset_names():
        return load_preset(spec, validate)
    raise ConfigError(f"config: {spec!r} is neither a file nor a preset ({', '.join(preset_names())})")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args.config, validate=False)
    t = cfg.trainer
    overrides = {k: v for k, v in (("algorithm", args.algorithm), ("steps", args.steps), ("lam", args.lam),
                                   ("alpha", args.alpha), ("seed", args.seed)) if v is not None}
    cfg.trainer = replace(t, **overrides)
    cfg.validate()
    out = _out_dir(args)
    cfg.out = str(out)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    corpus = cfg.data.load()
    res = train(cfg.model, cfg.trainer, corpus, out_dir=out, require_positive_lambda=True, progress=args.verbose)
    records: list = []
    evaluate(res.model, corpus.ids("valid"), cfg.trainer.context, max_windows=cfg.trainer.eval_max_windows,
             records=records)
    (out / "routing.csv").unlink(missing_ok=True)
    write_routing_records(out / "routing.csv", cfg.trainer.algorithm, records)
    plotting.training_curves(read_metrics(out / "metrics.csv"), out / "training_curves.png")
    summary = {
        "algorithm": cfg.trainer.algorithm,
        "seed": cfg.trainer.seed,
        "steps": cfg.trainer.steps,
        "valid_bpc": res.valid.bpc,
        "test_bpc": res.test.bpc,
        "test_perplexity": res.test.perplexity,
        "best_step": res.state.best_step,
        "train_seconds": res.train_seconds,
        "entropy": {str(k): v for k, v in res.valid.entropy.items()},
        "parameters": res.model.params.num_parameters(),
        "checkpoint_sha256": sha256(res.checkpoint),
    }
    _write_json(out / "summary.json", summary)
    print(f"{cfg.trainer.algorithm}: valid bpc {res.valid.bpc:.4f}  test bpc {res.test.bpc:.4f}  "
          f"checkpoint {res.checkpoint}")
    return EXIT_OK


def _checkpoint_and_config(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"--checkpoint: file not found: {ckpt}")
    spec = args.config or (str(ckpt.parent / "config.json") if (ckpt.parent / "config.json").is_file() else None)
    cfg = _load_config(spec)
    try:
        model = load_checkpoint(ckpt)
    except ValueError as exc:
        raise ConfigError(f"--checkpoint: {exc}") from None
    return model, cfg


def cmd_eval(args) -> int:
    model, cfg = _checkpoint_and_config(args)
    corpus = cfg.data.load()
    if corpus.vocab_size != model.config.vocab_size:
        raise ConfigError(f"data: corpus vocabulary {corpus.vocab_size} does not match "
                          f"checkpoint vocabulary {model.config.vocab_size}")
    ev = evaluate(model, corpus.ids(args.split), cfg.trainer.context, max_windows=args.max_windows)
    result = {"split": args.split, "bpc": ev.bpc, "perplexity": ev.perplexity, "nll": ev.nll, "tokens": ev.tokens,
              "entropy": {str(k): v for k, v in ev.entropy.items()}}
    out = _out_dir(args)
    _write_json(out / f"eval_{args.split}.json", result)
    print(f"{args.split}: bpc {ev.bpc:.4f}  perplexity {ev.perplexity:.4f}  tokens {ev.tokens}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    model, _ = _checkpoint_and_config(args)
    seed = args.seed if args.seed is not None else 0
    length = min(32, model.config.context)
    v = model.config.vocab_size
    task_train = toy_classification_task(args.n_train, length, v, seed=seed)
    task_test = toy_classification_task(args.n_test, length, v, seed=seed + 1)
    res = finetune(model, task_train, task_test, steps=args.steps, lr=args.lr, seed=seed)
    out = _out_dir(args)
    _write_json(out / "finetune.json", asdict(res))
    print(f"finetune: accuracy {res.accuracy:.4f}  train loss {res.train_loss:.4f}  "
          f"routers unchanged {res.router_unchanged}")
    return EXIT_OK


def entropy_table(paths) -> dict[str, dict[str, float]]:
    """Mean per-token entropy keyed by method, then by router (``R<layer>``) plus ``average``."""
    sums: dict = defaultdict(lambda: defaultdict(float))
    counts: dict = defaultdict(lambda: defaultdict(int))
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise ConfigError(f"--records: file not found: {p}")
        with p.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ROUTING_COLUMNS:
                raise ConfigError(f"{p}: expected columns {ROUTING_COLUMNS}, got {reader.fieldnames}")
            for row in reader:
                key = f"R{int(row['layer'])}"
                sums[row["method"]][key] += float(row["entropy"])
                counts[row["method"]][key] += 1
    table = {}
    for method in sums:
        routers = sorted(sums[method], key=lambda r: int(r[1:]))
        means = {r: sums[method][r] / counts[method][r] for r in routers}
        means["average"] = float(np.mean(list(means.values())))
        table[method] = means
    return table


def format_table(table: dict[str, dict[str, float]]) -> str:
    routers = sorted({r for m in table.values() for r in m if r != "average"}, key=lambda r: int(r[1:]))
    cols = routers + ["average"]
    width = max([len("method")] + [len(m) for m in table])
    lines = ["  ".join([f"{'method':<{width}}"] + [f"{c:>8}" for c in cols])]
    for m, vals in table.items():
        cells = [f"{vals[c]:8.4f}" if c in vals else f"{'-':>8}" for c in cols]
        lines.append("  ".join([f"{m:<{width}}"] + cells))
    return "\n".join(lines)


def cmd_analyze(args) -> int:
    table = entropy_table(args.records)
    if not table:
        raise ConfigError("--records: no routing rows found")
    out = _out_dir(args)
    text = format_table(table)
    print(text)
    (out / "entropy_table.txt").write_text(text + "\n")
    _write_json(out / "entropy_table.json", table)
    plotting.entropy_table(table, out / "entropy_table.png")
    return EXIT_OK


RATE_COLUMNS = ["n", "trial", "ok", "loglik", "D", "hellinger", "seconds"]


def cmd_rates(args) -> int:
    if args.preset not in workbench.PRESETS:
        raise ConfigError(f"--preset: unknown {args.preset!r}; available: {sorted(workbench.PRESETS)}")
    p = dict(workbench.PRESETS[args.preset])
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config: file not found: {path}")
        try:
            extra = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
        unknown = set(extra) - set(p)
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}")
        p.update(extra)
    for key in ("trials", "restarts"):
        if getattr(args, key) is not None:
            p[key] = getattr(args, key)
    if args.n_grid:
        p["n_grid"] = args.n_grid
    G = workbench.MixingMeasure(**p["G"])
    seed = args.seed if args.seed is not None else 0
    out = _out_dir(args)
    cD, cH, rows = workbench.rate_experiment(G, p["K"], p["n_grid"], p["trials"], restarts=p["restarts"], seed=seed,
                                             workers=args.workers)
    (out / "rates.csv").unlink(missing_ok=True)
    with MetricsSink(out / "rates.csv", RATE_COLUMNS) as sink:
        for r in rows:
            sink.write({c: r.get(c, "") for c in RATE_COLUMNS})
    summary = {"preset": args.preset, "seed": seed, "K": p["K"], "k_true": G.k, "trials": p["trials"],
               "restarts": p["restarts"], "failed_fits": sum(1 for r in rows if not r["ok"])}
    for c in (cD, cH):
        summary[c.label] = {"n": c.n.tolist(), "median": c.median.tolist(), "slope": c.slope,
                            "slope_ci95": list(c.slope_ci), "intercept": c.intercept}
    _write_json(out / "rates_summary.json", summary)
    plotting.rate_curves([cD, cH], rows, out / "rates.png")
    for c in (cD, cH):
        print(f"{c.label}: slope {c.slope:.3f}  95% CI [{c.slope_ci[0]:.3f}, {c.slope_ci[1]:.3f}]")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    res = gradcheck.run_all(seed)
    out = _out_dir(args)
    failed = []
    for name, err in res.items():
        tol = gradcheck.MODEL_TOL if name.startswith("model_") else gradcheck.OP_TOL
        ok = err < tol
        if not ok:
            failed.append(name)
        print(f"{name:<20} {err:.3e}  {'ok' if ok else 'FAIL'}")
    _write_json(out / "gradcheck.json", {k: float(v) for k, v in res.items()})
    if failed:
        raise RuntimeFailure(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file or bundled preset name")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help=f"output directory (falls back to ${OUT_ENV})")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="smoelab", description="Sparse mixture-of-experts lab.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", parents=[common], help="train a character-level SMoE language model")
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--steps", type=int)
    p.add_argument("--lam", type=float, help="per-layer competition probability")
    p.add_argument("--alpha", type=float, help="task-loss weight in the router update")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="report BPC and perplexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--max-windows", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("finetune", parents=[common], help="finetune experts plus a classifier head on a toy task")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=256)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("analyze", parents=[common], help="per-router entropy table from routing CSVs")
    p.add_argument("records", nargs="+", help="routing CSV file(s)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("rates", parents=[common], help="MLE convergence-rate experiment")
    p.add_argument("--preset", default="thm2-k2")
    p.add_argument("--trials", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--n-grid", type=int, nargs="+")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_rates)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of the autodiff engine")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, RuntimeError, ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
