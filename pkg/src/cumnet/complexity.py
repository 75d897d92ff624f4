"""Multiply-accumulate accounting and training complexity.

Counting conventions:

* Conv2D: ``out_h * out_w * out_ch * in_ch * k * k`` (taps over padding count).
* Dense: ``out * in``.
* BatchNorm2D (eval, fused scale-shift): one MAC per element.
* ReLU, MaxPool2D, Flatten: zero.

Training complexity sums ``iterations * macs`` over stages.  The per-iteration
cost factor (batch size times a forward+backward multiplier) is a single
scalar, so ratios between runs do not depend on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import BatchNorm2D, Conv2D, Dense, Flatten, Layer, MaxPool2D, Network, ReLU
from .errors import AccountingError, CompositionError

TRAIN_MULTIPLIER = 3  # forward + ~2x backward


def layer_mac(layer: Layer, input_shape) -> int:
    """Dense MAC count of one layer for a single sample."""
    if isinstance(layer, Conv2D):
        _, ho, wo = layer.output_shape(input_shape)
        return ho * wo * layer.out_ch * layer.in_ch * layer.k * layer.k
    if isinstance(layer, Dense):
        return layer.out_features * layer.in_features
    if isinstance(layer, BatchNorm2D):
        return int(np.prod(input_shape))
    if isinstance(layer, (ReLU, MaxPool2D, Flatten)):
        return 0
    raise AccountingError(f"no MAC rule for layer kind {type(layer).__name__}")


def _walk(net: Network, input_shape):
    shape = tuple(net.input_shape if input_shape is None else input_shape)
    for i, layer in enumerate(net.layers):
        try:
            out = layer.output_shape(shape)
        except CompositionError as exc:
            raise CompositionError(f"layer {i} ({layer.name}): {exc}") from None
        yield layer, shape, out
        shape = out


def network_mac(net: Network, input_shape=None) -> int:
    return sum(layer_mac(layer, shape) for layer, shape, _ in _walk(net, input_shape))


def zero_aware_mac(net: Network, input_shape=None) -> int:
    """MACs left after a zero-checker skips every multiply by a zero weight.

    A batch-norm channel whose scale (gamma) is zero is skipped as well.
    """
    total = 0
    for layer, shape, out in _walk(net, input_shape):
        if isinstance(layer, Conv2D):
            total += out[1] * out[2] * int(np.count_nonzero(layer.params["weight"]))
        elif isinstance(layer, Dense):
            total += int(np.count_nonzero(layer.params["weight"]))
        elif isinstance(layer, BatchNorm2D):
            total += int(np.count_nonzero(layer.params["gamma"])) * shape[1] * shape[2]
        else:
            total += layer_mac(layer, shape)
    return total


@dataclass
class StageComplexity:
    stage: int
    iterations: int
    macs_per_forward: int
    product: int


@dataclass
class ComplexityReport:
    stages: list[StageComplexity] = field(default_factory=list)
    total: int = 0
    baseline_total: int | None = None
    ratio: float | None = None


def training_complexity(reports, baseline=None, cost_per_iteration=1) -> ComplexityReport:
    """Sum of ``iterations * macs`` over stages.

    ``reports`` are objects with ``iterations`` and ``macs`` attributes (stage
    reports).  ``cost_per_iteration`` multiplies every stage equally, e.g.
    ``TRAIN_MULTIPLIER * batch_size``; a sequence gives one factor per stage.  ``baseline`` may be another list of
    reports or a precomputed :class:`ComplexityReport`; the ratio is
    ``total / baseline_total``.
    """
    reports = list(reports)
    if not reports:
        raise AccountingError("at least one stage is required")
    costs = [cost_per_iteration] * len(reports) if np.isscalar(cost_per_iteration) else list(cost_per_iteration)
    if len(costs) != len(reports):
        raise AccountingError("one cost factor per stage expected")
    out = ComplexityReport()
    for i, (r, cost) in enumerate(zip(reports, costs)):
        it, mac = int(r.iterations), int(r.macs)
        if it < 0 or mac < 0 or int(cost) < 0:
            raise AccountingError("iterations, MACs and cost factors must be non-negative")
        prod = it * mac * int(cost)
        out.stages.append(StageComplexity(getattr(r, "stage", i + 1), it, mac, prod))
        out.total += prod
    if baseline is not None:
        if not isinstance(baseline, ComplexityReport):
            if not np.isscalar(cost_per_iteration):
                raise AccountingError("pass a precomputed baseline report when costs vary per stage")
            baseline = training_complexity(baseline, cost_per_iteration=cost_per_iteration)
        out.baseline_total = baseline.total
        out.ratio = out.total / baseline.total if baseline.total else None
    return out
