"""Quantile thresholding, personalized/shared index sets and model merging."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from fedobp.importance import ScoreVector
from fedobp.nn import LayerLayout, ParamVector, check_same_layout


@dataclass(frozen=True, eq=False)
class MaskPartition:
    """``personalized`` holds sorted indices kept local; the rest are shared."""

    personalized: np.ndarray
    total: int

    def __post_init__(self):
        idx = np.asarray(self.personalized, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("personalized indices must be 1-D")
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                idx = np.unique(idx)
            if idx[0] < 0 or idx[-1] >= self.total:
                raise ValueError(f"indices must lie in [0, {self.total})")
        idx.setflags(write=False)
        object.__setattr__(self, "personalized", idx)

    @classmethod
    def none(cls, total: int) -> "MaskPartition":
        return cls(np.zeros(0, dtype=np.int64), total)

    @classmethod
    def everything(cls, total: int) -> "MaskPartition":
        return cls(np.arange(total, dtype=np.int64), total)

    @classmethod
    def from_bool(cls, flags: np.ndarray) -> "MaskPartition":
        return cls(np.flatnonzero(flags), int(flags.shape[0]))

    @property
    def shared(self) -> np.ndarray:
        return np.flatnonzero(~self.as_bool())

    @property
    def n_personalized(self) -> int:
        return int(self.personalized.shape[0])

    @property
    def n_shared(self) -> int:
        return self.total - self.n_personalized

    def as_bool(self) -> np.ndarray:
        flags = np.zeros(self.total, dtype=bool)
        flags[self.personalized] = True
        return flags

    def __eq__(self, other) -> bool:
        if not isinstance(other, MaskPartition):
            return NotImplemented
        return self.total == other.total and np.array_equal(self.personalized, other.personalized)


def _check_q(q: float) -> None:
    if not 0 < q <= 1:
        raise ValueError(f"quantile must lie in (0, 1], got {q}")


def quantile_rank(q: float, n: int) -> int:
    """``ceil(q * n)`` evaluated on the decimal value of ``q``.

    Going through the shortest decimal repr keeps e.g. ``0.1 * 30`` at 3
    instead of the float product's 3.0000000000000004.
    """
    _check_q(q)
    return max(1, math.ceil(Fraction(repr(float(q))) * n))


def quantile_threshold(scores: ScoreVector, q: float) -> float:
    """The smallest score whose empirical CDF reaches ``q``: the ceil(qK)-th smallest."""
    values = scores.values
    if values.size == 0:
        raise ValueError("cannot threshold an empty score vector")
    k = quantile_rank(q, values.size)
    return float(np.partition(values, k - 1)[k - 1])


def partition(scores: ScoreVector, tau: float) -> MaskPartition:
    """Scores strictly above ``tau`` are personalized; ties at ``tau`` stay shared."""
    return MaskPartition(np.flatnonzero(scores.values > tau), len(scores))


def select_mask(scores: ScoreVector, q: float) -> MaskPartition:
    return partition(scores, quantile_threshold(scores, q))


def merge(local_prev: ParamVector, global_now: ParamVector, mask: MaskPartition) -> ParamVector:
    check_same_layout(local_prev, global_now)
    if mask.total != len(global_now):
        raise ValueError(f"mask covers {mask.total} parameters, model has {len(global_now)}")
    out = global_now.values.copy()
    out[mask.personalized] = local_prev.values[mask.personalized]
    return ParamVector(out, global_now.layout, check=False)


def apply_downlink(local_prev: ParamVector, mask: MaskPartition, shared_values: np.ndarray) -> ParamVector:
    """Client-side merge from the transmitted shared values (ordered by ascending index)."""
    if mask.total != len(local_prev):
        raise ValueError(f"mask covers {mask.total} parameters, model has {len(local_prev)}")
    shared = mask.shared
    if shared_values.shape != shared.shape:
        raise ValueError(f"expected {shared.size} shared values, got {shared_values.shape[0]}")
    out = local_prev.values.copy()
    out[shared] = shared_values
    return ParamVector(out, local_prev.layout, check=False)


def fixed_layer_mask(layout: LayerLayout, personalized_layers) -> MaskPartition:
    names = set(personalized_layers)
    unknown = names - set(layout.names)
    if unknown:
        raise KeyError(f"unknown layer name(s): {sorted(unknown)}")
    parts = [np.arange(layer.start, layer.end) for layer in layout if layer.name in names]
    idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return MaskPartition(idx, layout.total_params)


def write_masks(rows, path) -> None:
    """``rows`` yields ``(round, client_id, MaskPartition)``; one CSV line per personalized index."""
    with open(path, "w") as fh:
        fh.write("round,client_id,index\n")
        for rnd, cid, mask in rows:
            for k in mask.personalized:
                fh.write(f"{rnd},{cid},{k}\n")


def read_masks(path, total: int) -> dict[tuple[int, int], MaskPartition]:
    found: dict[tuple[int, int], list[int]] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "round,client_id,index":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            if line.strip():
                rnd, cid, k = (int(v) for v in line.split(","))
                found.setdefault((rnd, cid), []).append(k)
    return {key: MaskPartition(np.array(v, dtype=np.int64), total) for key, v in found.items()}
