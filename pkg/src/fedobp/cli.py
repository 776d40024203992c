"""Command line entry point: ``fedobp {partition,run,sweep,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from fedobp.config import ConfigError, ExperimentConfig, dump_config, load_config, validate
from fedobp.data import write_plan
from fedobp.experiment import build_partition, load_dataset, read_sweep_csv, run_experiment, run_sweep
from fedobp.metrics import MetricsFormatError, read_metrics_csv

log = logging.getLogger("fedobp")


class ReportError(RuntimeError):
    pass


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.output:
        cfg = replace(cfg, output_dir=args.output)
    validate(cfg)
    return cfg


def cmd_partition(cfg: ExperimentConfig) -> Path:
    seed = cfg.seeds[0]
    dataset = load_dataset(cfg, seed)
    plan = build_partition(cfg, dataset, seed)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "partition.csv"
    write_plan(plan, path)
    (out / "config.txt").write_text(dump_config(cfg))
    return path


def cmd_run(cfg: ExperimentConfig, threads: int = 1, resume=None, record_masks: bool = False):
    summary, _ = run_experiment(cfg, threads, resume=resume, record_masks=record_masks)
    return summary


def _parse_list(text: str | None, conv):
    if text is None:
        return None
    return tuple(conv(p) for p in text.split(",") if p.strip())


def cmd_sweep(cfg: ExperimentConfig, q_list=None, score_list=None, threads: int = 1):
    q_list = tuple(q_list or cfg.sweep_q)
    score_list = tuple(score_list or cfg.sweep_scores)
    cfg = replace(cfg, sweep_q=q_list, sweep_scores=score_list)
    validate(cfg)
    return run_sweep(cfg, q_list, score_list, threads, output_dir=cfg.output_dir)


def _load_run(summary_path: Path) -> dict:
    try:
        doc = json.loads(summary_path.read_text())
        method = doc["config"]["method"]
        mean, std = float(doc["final_mean_acc"]), float(doc["final_std_acc"])
        seeds = list(doc["seeds"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ReportError(f"{summary_path}: unreadable summary ({exc})") from None
    fractions: dict[str, list[float]] = {}
    for seed in seeds:
        metrics_path = summary_path.parent / f"seed_{seed}" / "metrics.csv"
        if not metrics_path.exists():
            raise ReportError(f"{metrics_path}: missing")
        try:
            records = read_metrics_csv(metrics_path)
        except MetricsFormatError as exc:
            raise ReportError(str(exc)) from None
        if not records:
            raise ReportError(f"{metrics_path}: no rounds recorded")
        for name, v in records[-1].personalized_fraction_by_layer.items():
            fractions.setdefault(name, []).append(v)
    return {"method": method, "mean": mean, "std": std, "n_seeds": len(seeds),
            "fractions": {k: sum(v) / len(v) for k, v in fractions.items()}}


def cmd_report(output_dir) -> str:
    """Text report over every run (``summary.json``) and sweep (``sweep.csv``) below ``output_dir``."""
    root = Path(output_dir)
    if not root.is_dir():
        raise ReportError(f"{root}: not a directory")
    runs = [_load_run(p) for p in sorted(root.rglob("summary.json"))]
    sweeps = []
    for path in sorted(root.rglob("sweep.csv")):
        try:
            sweeps.append((path, read_sweep_csv(path)))
        except ValueError as exc:
            raise ReportError(str(exc)) from None
    if not runs and not sweeps:
        raise ReportError(f"{root}: no summary.json or sweep.csv found")
    lines = []
    if runs:
        runs.sort(key=lambda r: r["method"])
        width = max(len(r["method"]) for r in runs)
        lines.append("final accuracy, mean (std) over seeds")
        for r in runs:
            lines.append(f"  {r['method']:<{width}}  {100 * r['mean']:.2f} ({100 * r['std']:.2f})  seeds={r['n_seeds']}")
        layers = list(runs[0]["fractions"])
        lines.append("final-round personalized fraction by layer")
        lines.append("  " + " " * width + "  " + "  ".join(f"{name:>10}" for name in layers))
        for r in runs:
            cells = "  ".join(f"{r['fractions'].get(name, 0.0):>10.3f}" for name in layers)
            lines.append(f"  {r['method']:<{width}}  {cells}")
    for path, rows in sweeps:
        lines.append(f"sweep {path}")
        for score in sorted({r.score for r in rows}):
            mine = [r for r in rows if r.score == score]
            best = max(mine, key=lambda r: (r.final_mean_acc, r.q))
            lines.append(f"  {score:<10} peak q={best.q!r}  acc={100 * best.final_mean_acc:.2f}"
                         f"  personalized={best.personalized_count:g}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedobp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        p.add_argument("--output", help="output directory (overrides output_dir)")
        p.add_argument("--threads", type=int, default=1, help="parallel client workers per round")

    common(sub.add_parser("partition", help="write the client partition plan"))
    p_run = sub.add_parser("run", help="train all configured seeds")
    common(p_run)
    p_run.add_argument("--resume", help="checkpoint to continue from (single seed)")
    p_run.add_argument("--masks", action="store_true", help="also export personalized-index masks")
    p_sweep = sub.add_parser("sweep", help="one run per (quantile, score)")
    common(p_sweep)
    p_sweep.add_argument("--q", help="comma separated quantiles (default: sweep.q)")
    p_sweep.add_argument("--scores", help="comma separated scores: obp,fisher,gradient (default: sweep.scores)")
    p_report = sub.add_parser("report", help="summarize an output directory")
    p_report.add_argument("output_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(cmd_report(args.output_dir))
            return 0
        cfg = _resolve(args)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "partition":
            print(cmd_partition(cfg))
        elif args.command == "run":
            if args.resume and len(cfg.seeds) != 1:
                raise ConfigError("--resume needs exactly one seed (use --seed)")
            summary = cmd_run(cfg, args.threads, args.resume, args.masks)
            print(f"{cfg.method.label}: {100 * summary.final_mean:.2f} ({100 * summary.final_std:.2f})")
        elif args.command == "sweep":
            rows = cmd_sweep(cfg, _parse_list(args.q, float), _parse_list(args.scores, str), args.threads)
            for r in rows:
                print(f"{r.score:<10} q={r.q!r:<10} acc={100 * r.final_mean_acc:.2f} personalized={r.personalized_count:g}")
    except (ConfigError, ReportError, OSError, ValueError) as exc:
        print(f"fedobp: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
