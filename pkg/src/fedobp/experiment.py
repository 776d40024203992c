"""Run driver: data preparation, multi-seed runs, quantile sweeps and their output files."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedobp.checkpoint import load_checkpoint, restore_clients, save_checkpoint
from fedobp.config import ExperimentConfig, config_hash, dump_config
from fedobp.data import Dataset, PartitionPlan, dirichlet_partition, load_idx, split_train_test, synth_dataset
from fedobp.decouple import MaskPartition, write_masks
from fedobp.federation import (
    ClientState, CommLedger, MethodSpec, ServerState, TrainHyper, init_federation, run_round,
)
from fedobp.importance import NormMode
from fedobp.metrics import (
    RoundMetrics, RunSummary, summarize_runs, write_metrics_csv, write_per_client_csv, write_summary_json,
)

log = logging.getLogger(__name__)


def load_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    d = cfg.dataset
    if d.kind == "idx":
        return load_idx(d.images, d.labels, d.num_classes)
    return synth_dataset(d.num_classes, d.per_class, d.input_shape, d.noise_sigma, seed, d.template_block)


def build_partition(cfg: ExperimentConfig, dataset: Dataset, seed: int) -> PartitionPlan:
    plan = dirichlet_partition(dataset, cfg.n_clients, cfg.alpha, seed, min_per_client=cfg.min_client_samples)
    return split_train_test(plan, cfg.test_fraction, seed, labels=dataset.labels)


@dataclass
class SeedRun:
    seed: int
    metrics: list[RoundMetrics]
    ledger: CommLedger
    server: ServerState
    clients: list[ClientState]
    masks: list[tuple[int, int, MaskPartition]] = field(default_factory=list)


def run_seed(cfg: ExperimentConfig, seed: int, threads: int = 1, resume=None,
             record_masks: bool = False) -> SeedRun:
    dataset = load_dataset(cfg, seed)
    spec = cfg.model_spec(dataset.input_shape, dataset.num_classes)
    plan = build_partition(cfg, dataset, seed)
    server, clients = init_federation(spec, dataset, plan.assignments, seed)
    if resume is not None:
        server, extras = load_checkpoint(resume, spec.layout)
        restore_clients(clients, extras)
        log.info("resumed seed %d at round %d", seed, server.round)
    hyper = TrainHyper(cfg.eta, cfg.local_epochs, cfg.batch_size)
    ledger = CommLedger()
    run = SeedRun(seed, [], ledger, server, clients)
    while server.round < cfg.rounds:
        server, m = run_round(server, clients, cfg.method, hyper, seed, spec, cfg.gamma, ledger, threads)
        run.metrics.append(m)
        if record_masks:
            run.masks.extend((m.round, cid, clients[cid].last_mask) for cid in sorted(m.personalized_counts))
        log.debug("seed %d round %d mean_acc %.4f", seed, m.round, m.mean_acc)
    run.server = server
    return run


def run_experiment(cfg: ExperimentConfig, threads: int = 1, output_dir=None, write: bool = True,
                   resume=None, record_masks: bool = False) -> tuple[RunSummary, dict[int, SeedRun]]:
    """All seeds of one configuration; writes per-seed CSVs, checkpoint and summary when ``write``."""
    out = Path(output_dir or cfg.output_dir)
    runs = {}
    for seed in cfg.seeds:
        runs[seed] = run_seed(cfg, seed, threads, resume=resume, record_masks=record_masks)
    summary = summarize_runs({s: r.metrics for s, r in runs.items()}, config_hash(cfg))
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))
        layout_names = runs[cfg.seeds[0]].server.global_model.layout.names
        for seed, run in runs.items():
            d = out / f"seed_{seed}"
            d.mkdir(exist_ok=True)
            write_metrics_csv(run.metrics, d / "metrics.csv", layout_names)
            write_per_client_csv(run.metrics, d / "per_client.csv")
            run.ledger.write_csv(d / "comm.csv")
            save_checkpoint(d / "checkpoint.bin", run.server, run.clients)
            if record_masks:
                write_masks(run.masks, d / "masks.csv")
        config_doc = {"method": cfg.method.label, "text": dump_config(cfg)}
        write_summary_json(summary, out / "summary.json", config_doc)
    return summary, runs


@dataclass(frozen=True)
class SweepRow:
    q: float
    score: str
    final_mean_acc: float
    personalized_count: float


def sweep_method(cfg: ExperimentConfig, score: str, q: float) -> MethodSpec:
    norm = cfg.method.norm if cfg.method.kind.value == "decouple" else NormMode()
    return MethodSpec.score_decouple(score, q, norm)


def run_sweep(cfg: ExperimentConfig, q_list, score_list, threads: int = 1,
              output_dir=None) -> list[SweepRow]:
    """One multi-seed run per (score, q).  ``personalized_count`` is the mean
    personalized-set size over the final round's selected clients, averaged over seeds."""
    rows = []
    for score in score_list:
        for q in q_list:
            sub = cfg.with_method(sweep_method(cfg, score, q))
            summary, runs = run_experiment(sub, threads, write=False)
            counts = []
            for run in runs.values():
                final = run.metrics[-1].personalized_counts
                counts.append(math.fsum(final.values()) / len(final))
            rows.append(SweepRow(float(q), score, summary.final_mean, float(np.mean(counts))))
            log.info("sweep %s q=%r acc=%.4f", score, q, summary.final_mean)
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))
        write_sweep_csv(rows, out / "sweep.csv")
    return rows


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["q", "score", "final_mean_acc", "personalized_count"])
        for r in rows:
            writer.writerow([repr(r.q), r.score, repr(r.final_mean_acc), repr(r.personalized_count)])


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["q", "score", "final_mean_acc", "personalized_count"]:
        raise ValueError(f"{path}: missing or wrong header")
    try:
        return [SweepRow(float(q), s, float(a), float(c)) for q, s, a, c in rows[1:]]
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
