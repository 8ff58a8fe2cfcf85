"""Magnitude pruning of the hidden fully connected layer.

The hidden FC weight matrix holds the bulk of the detector's parameters. To
sparsify it, all N weights are sorted by absolute value into an ascending
vector eta and the threshold is the ceil(ratio * N)-th smallest magnitude
(1-indexed). Weights with |w| >= threshold survive; the rest are zeroed and a
boolean keep-mask records the sparsity pattern so later training steps cannot
resurrect pruned weights. With distinct magnitudes this zeroes exactly
ceil(ratio * N) - 1 entries, a deliberate 1/N deviation from the nominal
ratio that comes from combining the 1-indexed order statistic with the
keep-if-at-threshold rule.

Biases are never pruned.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .tensornet import (
    DetectorSpec,
    ModelWeights,
    TrainConfig,
    TrainResult,
    train_offline,
)


@dataclass(frozen=True)
class PruneReport:
    ratio: float
    threshold: float
    zeroed_count: int
    total_count: int

    @property
    def achieved_ratio(self) -> float:
        return self.zeroed_count / self.total_count

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def pruning_threshold(weights: np.ndarray, ratio: float) -> float:
    """The ceil(ratio * N)-th smallest absolute weight (1-indexed)."""
    flat = np.asarray(weights).reshape(-1)
    if flat.size == 0:
        raise ValueError("cannot prune an empty weight vector")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"pruning ratio must lie in (0, 1), got {ratio}")
    magnitudes = np.sort(np.abs(flat))
    k = math.ceil(ratio * flat.size)
    return float(magnitudes[k - 1])


def apply_pruning(weights: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero every weight with |w| < threshold. Returns (pruned, keep_mask).

    Idempotent: pruning an already-pruned matrix with the same threshold
    changes nothing.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    weights = np.asarray(weights)
    mask = np.abs(weights) >= threshold
    return np.where(mask, weights, weights.dtype.type(0)), mask


def prune_model(model: ModelWeights, ratio: float) -> tuple[ModelWeights, PruneReport]:
    """Prune the hidden FC weight matrix of a model and attach the keep-mask."""
    threshold = pruning_threshold(model.fc1_w, ratio)
    pruned_fc1, mask = apply_pruning(model.fc1_w, threshold)
    out = model.copy()
    out.fc1_w = pruned_fc1
    out.prune_mask = mask
    report = PruneReport(
        ratio=ratio,
        threshold=threshold,
        zeroed_count=int((~mask).sum()),
        total_count=int(mask.size),
    )
    return out, report


def fine_tune(
    spec: DetectorSpec,
    model: ModelWeights,
    train_features: np.ndarray,
    train_labels: np.ndarray,
    val_features: np.ndarray,
    val_labels: np.ndarray,
    hyper: TrainConfig,
    rng: np.random.Generator,
) -> TrainResult:
    """Re-train the surviving weights for a fixed number of epochs.

    Gradients at masked positions are zeroed and the mask is re-applied after
    every step, so pruned weights stay exactly zero while everything else
    (both convolutions, surviving FC weights, output layer) updates normally.
    """
    if model.prune_mask is None:
        raise RuntimeError("fine_tune requires a pruned model (prune_mask missing)")
    # fixed-epoch schedule: disable early stopping via infinite patience
    schedule = TrainConfig(
        lr=hyper.lr,
        batch_size=hyper.batch_size,
        max_epochs=hyper.max_epochs,
        patience=hyper.max_epochs,
    )
    return train_offline(
        spec, train_features, train_labels, val_features, val_labels,
        schedule, rng, init=model, enforce_mask=True,
    )
