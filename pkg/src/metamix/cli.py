"""Command-line surface.

Subcommands: ingest, pretrain, meta-train, evaluate, run, report. Every
command takes a flat key=value config file; --seed/--threads/--out/--mode/
--variant override the corresponding keys. Exit codes: 0 success, 1 stage
failure (stage named on stderr, partial outputs preserved), 2 bad config or
source data.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiment import (
    ConfigError,
    StageError,
    load_config,
    load_dataset,
    run_experiment,
)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--threads", type=int, default=None,
                   help="parallelism for independent evaluations (1 = canonical)")
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--mode", choices=["first-order", "exact"], default=None,
                   help="meta-gradient mode override")
    p.add_argument("--variant", choices=["full", "simplified"], default=None,
                   help="restrict meta-training to one variant")


def _overrides(args) -> dict:
    ov = {
        "seed": args.seed,
        "threads": args.threads,
        "out": args.out,
        "meta.mode": args.mode,
    }
    if args.variant is not None:
        ov["meta.variants"] = args.variant
    return ov


def _config(args):
    try:
        return load_config(args.config, _overrides(args))
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(2)


def cmd_ingest(args) -> int:
    from .data import save_dump, split_users, write_exclusion_report

    cfg = _config(args)
    run_dir = Path(cfg.out_dir) / f"s{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        space, pools, _clusters, stats = load_dataset(cfg)
        if stats["samples"] == 0:
            raise ValueError("source contains no samples")
    except Exception as e:
        print(f"error: ingest failed: {e}", file=sys.stderr)
        return 2
    save_dump(run_dir / "dataset.dump", space, pools)
    _datasets, exclusions = split_users(pools, cfg.train_frac, cfg.support_frac,
                                        cfg.min_samples)
    write_exclusion_report(run_dir / "exclusions.csv", exclusions)
    with open(run_dir / "stats.csv", "w", encoding="utf-8") as f:
        f.write("key,value\n")
        for k, v in stats.items():
            f.write(f"{k},{v}\n")
    for k, v in stats.items():
        print(f"{k}: {v}")
    print(f"wrote {run_dir / 'dataset.dump'}")
    return 0


def _run(args, until: str) -> int:
    cfg = _config(args)
    try:
        result = run_experiment(cfg, until=until)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"{until} complete: {result.out_dir}")
    for name, rec in result.table_rows:
        auc_s = f"{rec.auc:.4f}" if rec.auc is not None else "undef"
        print(f"  {name:<22s} auc={auc_s} logloss={rec.mean_logloss:.5f}")
    return 0


def cmd_run(args) -> int:
    return _run(args, until="report")


def cmd_pretrain(args) -> int:
    return _run(args, until="pretrain")


def cmd_meta_train(args) -> int:
    return _run(args, until="meta_train")


def cmd_evaluate(args) -> int:
    return _run(args, until="evaluate")


def cmd_report(args) -> int:
    from .figures import render_run_figures

    cfg = _config(args)
    run_dir = Path(cfg.out_dir) / f"s{cfg.seed}"
    if not run_dir.exists():
        print(f"error: no run directory at {run_dir}", file=sys.stderr)
        return 2
    report = run_dir / "report.csv"
    if report.exists():
        print(report.read_text(encoding="utf-8"), end="")
    written = render_run_figures(run_dir)
    for p in written:
        print(f"figure: {p}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="metamix",
        description="per-user model selection over CTR predictors via meta-learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, doc in (
        ("ingest", cmd_ingest, "encode a dataset into the canonical dump + stats"),
        ("pretrain", cmd_pretrain, "pretrain the base model bank"),
        ("meta-train", cmd_meta_train, "episodic meta-training of selector (+bases)"),
        ("evaluate", cmd_evaluate, "evaluate all methods and write reports"),
        ("run", cmd_run, "full pipeline: ingest to reports and figures"),
        ("report", cmd_report, "print the report table and render figures"),
    ):
        p = sub.add_parser(name, help=doc)
        _add_common(p)
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
