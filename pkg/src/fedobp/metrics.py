"""Client evaluation, layer-wise mask statistics, run summaries and CSV/JSON export."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedobp.decouple import MaskPartition
from fedobp.nn import LayerLayout, ModelSpec, ParamVector, predict

BASE_COLUMNS = ["round", "mean_acc", "std_acc", "downlink_ratio", "train_loss_mean"]


@dataclass
class RoundMetrics:
    round: int
    mean_acc: float
    std_acc: float
    per_client_acc: np.ndarray
    personalized_fraction_by_layer: dict[str, float]
    downlink_ratio: float
    train_loss_mean: float
    # in-memory extras, not part of metrics.csv
    personalized_counts: dict[int, int] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RoundMetrics):
            return NotImplemented
        return (
            self.round == other.round
            and _same_float(self.mean_acc, other.mean_acc)
            and _same_float(self.std_acc, other.std_acc)
            and np.array_equal(self.per_client_acc, other.per_client_acc)
            and self.personalized_fraction_by_layer == other.personalized_fraction_by_layer
            and _same_float(self.downlink_ratio, other.downlink_ratio)
            and _same_float(self.train_loss_mean, other.train_loss_mean)
        )


def _same_float(a: float, b: float) -> bool:
    return a == b or (math.isnan(a) and math.isnan(b))


@dataclass
class RunSummary:
    config_hash: str
    rounds: dict[int, list[RoundMetrics]]  # seed -> per-round metrics
    final_mean: float
    final_std: float

    @property
    def seeds(self) -> list[int]:
        return sorted(self.rounds)


def evaluate_client(params: ParamVector, spec: ModelSpec, x_test: np.ndarray, y_test: np.ndarray) -> float:
    """Fraction of test samples whose argmax logit (lowest index on ties) equals the label."""
    if len(y_test) == 0:
        raise ValueError("empty test split")
    return float(np.mean(predict(params, spec, x_test) == np.asarray(y_test)))


def layer_counts(mask: MaskPartition, layout: LayerLayout) -> dict[str, int]:
    if mask.total != layout.total_params:
        raise ValueError(f"mask covers {mask.total} parameters, layout has {layout.total_params}")
    bounds = [layer.end for layer in layout]
    per_layer = np.bincount(np.searchsorted(bounds, mask.personalized, side="right"), minlength=len(layout))
    return {layer.name: int(c) for layer, c in zip(layout, per_layer)}


def fractions_from_counts(counts: dict[str, int]) -> dict[str, float]:
    total = sum(counts.values())
    if total == 0:
        return {name: 0.0 for name in counts}
    return {name: c / total for name, c in counts.items()}


def layer_distribution(mask: MaskPartition, layout: LayerLayout) -> dict[str, float]:
    """Share of the personalized set falling in each layer; all zeros when nothing is personalized."""
    return fractions_from_counts(layer_counts(mask, layout))


def summarize_runs(runs: dict[int, list[RoundMetrics]], config_hash: str = "") -> RunSummary:
    """Mean and sample standard deviation (0 for a single run) of the final-round mean accuracy."""
    if not runs:
        raise ValueError("no runs to summarize")
    finals = [runs[s][-1].mean_acc for s in sorted(runs)]
    mean = math.fsum(finals) / len(finals)
    std = statistics.stdev(finals) if len(finals) > 1 else 0.0
    return RunSummary(config_hash, dict(runs), mean, std)


def metrics_columns(layer_names) -> list[str]:
    return BASE_COLUMNS + [f"frac_{name}" for name in layer_names]


def write_metrics_csv(records: list[RoundMetrics], path, layer_names) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_columns(layer_names))
        for r in records:
            writer.writerow(
                [r.round, repr(r.mean_acc), repr(r.std_acc), repr(r.downlink_ratio), repr(r.train_loss_mean)]
                + [repr(r.personalized_fraction_by_layer[name]) for name in layer_names]
            )


def write_per_client_csv(records: list[RoundMetrics], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "client_id", "accuracy"])
        for r in records:
            for cid, acc in enumerate(r.per_client_acc):
                writer.writerow([r.round, cid, repr(float(acc))])


class MetricsFormatError(ValueError):
    pass


def read_metrics_csv(metrics_path, per_client_path=None) -> list[RoundMetrics]:
    """Inverse of :func:`write_metrics_csv` (and optionally :func:`write_per_client_csv`)."""
    try:
        with open(metrics_path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:len(BASE_COLUMNS)] != BASE_COLUMNS:
            raise MetricsFormatError("missing or wrong header")
        header = rows[0]
        layers = [col[len("frac_"):] for col in header[len(BASE_COLUMNS):]]
        if any(not col.startswith("frac_") for col in header[len(BASE_COLUMNS):]):
            raise MetricsFormatError("unexpected column")
        per_client: dict[int, list[float]] = {}
        if per_client_path is not None:
            with open(per_client_path, newline="") as fh:
                prow = list(csv.reader(fh))
            if not prow or prow[0] != ["round", "client_id", "accuracy"]:
                raise MetricsFormatError(f"{per_client_path}: missing or wrong header")
            for rnd, cid, acc in prow[1:]:
                per_client.setdefault(int(rnd), []).append(float(acc))
        out = []
        for row in rows[1:]:
            if len(row) != len(header):
                raise MetricsFormatError(f"row has {len(row)} fields, expected {len(header)}")
            rnd = int(row[0])
            out.append(RoundMetrics(
                round=rnd,
                mean_acc=float(row[1]),
                std_acc=float(row[2]),
                per_client_acc=np.array(per_client.get(rnd, []), dtype=np.float64),
                personalized_fraction_by_layer={name: float(v) for name, v in zip(layers, row[len(BASE_COLUMNS):])},
                downlink_ratio=float(row[3]),
                train_loss_mean=float(row[4]),
            ))
        return out
    except MetricsFormatError as exc:
        raise MetricsFormatError(f"{metrics_path}: {exc}") from None
    except (ValueError, IndexError) as exc:
        raise MetricsFormatError(f"{metrics_path}: {exc}") from None


def write_summary_json(summary: RunSummary, path, config: dict) -> None:
    finals = {str(seed): summary.rounds[seed][-1].mean_acc for seed in summary.seeds}
    doc = {
        "config_hash": summary.config_hash,
        "config": config,
        "seeds": summary.seeds,
        "final_mean_acc_by_seed": finals,
        "final_mean_acc": summary.final_mean,
        "final_std_acc": summary.final_std,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
