"""Element-wise parameter importance scores and their normalization."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from fedobp.nn import LayerLayout, ParamVector, check_same_layout

# Value given to suppressed (non-classifier) entries under classifier-only
# selection.  Every real score is >= 0, so this sits below any threshold
# computed from real scores.
SUPPRESSED = -1.0


class ScoreKind(str, enum.Enum):
    GRADIENT = "gradient"
    FISHER = "fisher"
    OBP = "obp"


class NormKind(str, enum.Enum):
    NONE = "none"
    LAYER = "layer"
    GLOBAL = "global"


@dataclass(frozen=True)
class NormMode:
    kind: NormKind = NormKind.NONE
    cls_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", NormKind(self.kind))
        if self.cls_only and self.kind is not NormKind.GLOBAL:
            raise ValueError("classifier-only selection is defined for global normalization only")

    @property
    def label(self) -> str:
        return self.kind.value + ("+cls" if self.cls_only else "")


class ScoreVector:
    """Non-negative per-parameter importances aligned with a layout."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: LayerLayout):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] != layout.total_params:
            raise ValueError(f"expected {layout.total_params} scores, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("scores must be finite")
        if np.any((values < 0) & (values != SUPPRESSED)):
            raise ValueError("scores must be non-negative")
        self.values = values
        self.layout = layout

    def __len__(self) -> int:
        return self.values.shape[0]


def score_obp(local_prev: ParamVector, global_now: ParamVector) -> ScoreVector:
    """Squared gap between a client's last uploaded model and the current global model."""
    check_same_layout(local_prev, global_now)
    diff = local_prev.values - global_now.values
    return ScoreVector(diff * diff, local_prev.layout)


def score_fisher(grad: ParamVector) -> ScoreVector:
    """Squared local-loss gradient (empirical Fisher diagonal)."""
    g = grad.values
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("gradient contains non-finite entries")
    return ScoreVector(g * g, grad.layout)


def score_gradient(merged: ParamVector, trained: ParamVector) -> ScoreVector:
    """Magnitude of the change made by the previous round of local training."""
    check_same_layout(merged, trained)
    return ScoreVector(np.abs(merged.values - trained.values), merged.layout)


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def normalize(scores: ScoreVector, mode: NormMode) -> ScoreVector:
    values = scores.values
    if mode.kind is NormKind.NONE:
        out = values.copy()
    elif mode.kind is NormKind.GLOBAL:
        out = _minmax(values)
    else:
        out = np.empty_like(values)
        for layer in scores.layout:
            out[layer.start:layer.end] = _minmax(values[layer.start:layer.end])
    if mode.cls_only:
        out[:scores.layout.classifier.start] = SUPPRESSED
    return ScoreVector(out, scores.layout)
