"""Class-incremental splits and the cumulative train / morph / expand / retrain loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .complexity import network_mac, zero_aware_mac
from .data import Dataset
from .engine import SGD, Network, accuracy, backward, forward_with_cache
from .engine.checkpoint import checkpoint_id, encode
from .errors import ConfigError, NumericError
from .morph import deepen_at, expand_output, morph_entries, widen_at
from .prune import PruneConfig, freeze_net2net_zero_mask, prune_filters

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- splits

@dataclass
class ClassIncrementalSplit:
    """Nested per-stage index lists into a train and a test dataset.

    Labels are remapped so that the classes introduced first get the lowest
    ids: original label ``class_order[r]`` becomes ``r``.
    """
    stage_classes: list[int]
    class_order: list[int]
    train: Dataset
    test: Dataset
    train_indices: list[np.ndarray]
    test_indices: list[np.ndarray]

    @property
    def num_stages(self) -> int:
        return len(self.stage_classes)

    def _relabel(self, ds: Dataset, idx: np.ndarray, k: int) -> Dataset:
        rank = np.empty(len(self.class_order), np.int64)
        rank[self.class_order] = np.arange(len(self.class_order))
        sub = ds.subset(idx)
        sub.y = rank[sub.y]
        sub.num_classes = k
        return sub

    def stage_data(self, i: int) -> tuple[Dataset, Dataset]:
        """(train, test) data for zero-based stage ``i``, labels in ``[0, K_i)``."""
        k = self.stage_classes[i]
        return (self._relabel(self.train, self.train_indices[i], k),
                self._relabel(self.test, self.test_indices[i], k))

    def final_only(self) -> "ClassIncrementalSplit":
        """Single-stage split over the whole data, used for scratch baselines."""
        return ClassIncrementalSplit([self.stage_classes[-1]], list(self.class_order), self.train, self.test,
                                     [self.train_indices[-1]], [self.test_indices[-1]])


def _check_schedule(stage_classes, total: int) -> list[int]:
    sc = [int(c) for c in stage_classes]
    if not sc:
        raise ConfigError("stage schedule is empty")
    if sc[0] < 1 or any(b <= a for a, b in zip(sc, sc[1:])):
        raise ConfigError(f"stage class counts must be positive and strictly increasing, got {sc}")
    if sc[-1] != total:
        raise ConfigError(f"last stage must cover all {total} classes, got {sc[-1]}")
    return sc


def split_dataset(dataset: Dataset, stage_classes, test: Dataset | None = None,
                  class_order=None) -> ClassIncrementalSplit:
    """Nest ``dataset`` (and ``test``; defaults to ``dataset``) by class prefix.

    Stage ``i`` holds every sample whose (remapped) label is below
    ``stage_classes[i]``.  ``class_order`` is a permutation of the labels; the
    natural order is the default.
    """
    test = dataset if test is None else test
    if test.num_classes != dataset.num_classes:
        raise ConfigError("train and test datasets disagree on the class count")
    total = dataset.num_classes
    sc = _check_schedule(stage_classes, total)
    order = list(range(total)) if class_order is None else [int(c) for c in class_order]
    if sorted(order) != list(range(total)):
        raise ConfigError("class_order must be a permutation of the labels")
    rank = np.empty(total, np.int64)
    rank[order] = np.arange(total)
    tr = [np.flatnonzero(rank[dataset.y] < k) for k in sc]
    te = [np.flatnonzero(rank[test.y] < k) for k in sc]
    return ClassIncrementalSplit(sc, order, dataset, test, tr, te)


# ---------------------------------------------------------------- plans

@dataclass
class TrainConfig:
    epochs: int = 30                 # cap; early stopping usually fires first
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple = ()        # epochs at which lr is multiplied by lr_gamma
    lr_gamma: float = 0.1
    patience: int = 3
    min_delta: float = 0.002         # absolute test-accuracy improvement that resets patience
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and patience >= 1 are required")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_gamma ** sum(epoch >= m for m in self.lr_milestones)


@dataclass
class MorphDirective:
    """``site`` counts weighted layers (conv and dense) from 0 in the current network."""
    op: str                          # "deepen" | "widen"
    site: int
    width: int | None = None
    seed: int | None = None
    noise: float = 1e-5

    def __post_init__(self):
        if self.op not in ("deepen", "widen"):
            raise ConfigError(f"unknown morph op {self.op!r}")
        if self.op == "widen" and self.width is None:
            raise ConfigError("widen directives need a width")


@dataclass
class StagePlan:
    classes: int
    morphs: list[MorphDirective] = field(default_factory=list)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig | None = None
    keep_zero_mask: bool = False


@dataclass
class CurriculumPlan:
    stages: list[StagePlan]

    def validate(self, split: ClassIncrementalSplit | None = None) -> None:
        if not self.stages:
            raise ConfigError("plan has no stages")
        if self.stages[0].morphs or self.stages[0].prune is not None:
            raise ConfigError("stage 1 trains the initial network; it takes no morph or prune directives")
        classes = [s.classes for s in self.stages]
        _check_schedule(classes, classes[-1])
        if split is not None and classes != split.stage_classes:
            raise ConfigError(f"plan classes {classes} do not match split {split.stage_classes}")


@dataclass
class StageReport:
    stage: int
    classes: int
    accuracy: float
    iterations: int
    macs: int
    zero_aware_macs: int
    epochs: int
    handoff_accuracy: float | None = None        # morphed net, previous test set, old logits
    pre_morph_accuracy: float | None = None      # same data, network just before morphing
    handoff_full_accuracy: float | None = None   # morphed net, previous test set, all logits
    checkpoint_id: str = ""
    checkpoint_path: str | None = None
    wall_time: float = 0.0
    history: list = field(default_factory=list)

    def row(self) -> dict:
        return {"stage": self.stage, "accuracy": self.accuracy, "handoff_accuracy": self.handoff_accuracy,
                "iterations": self.iterations, "macs": self.macs, "wall_time": self.wall_time}

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- training

def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train_stage(net: Network, train: Dataset, test: Dataset, cfg: TrainConfig,
                stage: int = 0) -> tuple[Network, int, float, list]:
    """Mini-batch SGD with early stopping on test accuracy.

    Returns ``(best network, iterations, best test accuracy, history)``;
    iterations counts every optimizer step executed, including epochs after
    the best one.  The input network is not modified.
    """
    if net.num_classes != train.num_classes:
        raise ConfigError(f"network has {net.num_classes} outputs, stage has {train.num_classes} classes")
    if len(train) == 0:
        raise ConfigError("empty training set")
    best = net.copy()
    if cfg.epochs == 0:
        return best, 0, accuracy(best, test.x, test.y), []
    work = net.copy()
    opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
    best_acc, since, iterations, history = -1.0, 0, 0, []
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, stage, epoch])
        losses = []
        for idx in _epoch_batches(len(train), cfg.batch_size, rng):
            try:
                _, cache = forward_with_cache(work, train.x[idx], "train")
                grads, loss = backward(work, cache, train.y[idx])
            except NumericError as exc:
                raise NumericError(f"stage {stage} epoch {epoch}: {exc}", last_good=best) from None
            if not math.isfinite(loss):
                raise NumericError(f"stage {stage} epoch {epoch}: loss diverged", last_good=best)
            opt.step(work, grads)
            losses.append(loss)
            iterations += 1
        acc = accuracy(work, test.x, test.y)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "test_accuracy": acc})
        log.debug("stage %d epoch %d loss %.4f acc %.4f", stage, epoch, history[-1]["loss"], acc)
        if acc > best_acc + cfg.min_delta:
            best_acc, best, since = acc, work.copy(), 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    return best, iterations, best_acc, history


def _weighted_index(net: Network, site: int) -> int:
    w = net.weighted_layers()
    if not 0 <= site < len(w):
        raise ConfigError(f"morph site {site} out of range ({len(w)} weighted layers)")
    return w[site]


def apply_morphs(net: Network, directives) -> Network:
    for d in directives:
        li = _weighted_index(net, d.site)
        if d.op == "deepen":
            net, _ = deepen_at(net, li)
        else:
            net, _ = widen_at(net, li, d.width, seed=d.seed, noise=d.noise)
    return net


def _persist(net: Network, out_dir, stage: int, tag: str):
    data = encode(net)
    path = None
    if out_dir is not None:
        path = Path(out_dir) / f"{tag}_stage{stage}.mtck"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        path = str(path)
    return checkpoint_id(data), path


def run_cumulative(plan: CurriculumPlan, split: ClassIncrementalSplit, base_net: Network,
                   out_dir=None, tag: str = "cumulative",
                   expand_scale: float | None = None) -> tuple[list[StageReport], Network]:
    """Train stage 1, then for each later stage prune, morph, expand, retrain.

    If a stage fails, the exception propagates with ``completed_reports``
    attached; checkpoints of finished stages are already on disk.
    """
    plan.validate(split)
    if base_net.num_classes != split.stage_classes[0]:
        raise ConfigError(f"base network has {base_net.num_classes} outputs, "
                          f"stage 1 has {split.stage_classes[0]} classes")
    reports: list[StageReport] = []
    net = base_net
    prev_test = None
    try:
        for i, sp in enumerate(plan.stages):
            t0 = time.perf_counter()
            train, test = split.stage_data(i)
            pre = handoff = handoff_full = None
            if i > 0:
                if sp.prune is not None:
                    net, _ = prune_filters(net, sp.prune)
                k_old = net.num_classes
                pre = accuracy(net, prev_test.x, prev_test.y, num_logits=k_old)
                n_before = len(net.morph_log)
                net = apply_morphs(net, sp.morphs)
                if sp.classes > k_old:
                    kw = {} if expand_scale is None else {"init_scale": expand_scale}
                    net, _ = expand_output(net, sp.classes - k_old, **kw)
                keep = sp.keep_zero_mask or (sp.prune is not None and sp.prune.keep_zero_mask)
                fresh = [e for e in morph_entries(net)[n_before:] if e.op == "deepen"]
                if keep and fresh:
                    net = freeze_net2net_zero_mask(net, [e.to_json() for e in fresh])
                handoff = accuracy(net, prev_test.x, prev_test.y, num_logits=k_old)
                handoff_full = accuracy(net, prev_test.x, prev_test.y)
            net, iters, acc, hist = train_stage(net, train, test, sp.train, stage=i + 1)
            cid, path = _persist(net, out_dir, i + 1, tag)
            reports.append(StageReport(
                stage=i + 1, classes=sp.classes, accuracy=acc, iterations=iters,
                macs=network_mac(net), zero_aware_macs=zero_aware_mac(net), epochs=len(hist),
                handoff_accuracy=handoff, pre_morph_accuracy=pre, handoff_full_accuracy=handoff_full,
                checkpoint_id=cid, checkpoint_path=path, wall_time=time.perf_counter() - t0, history=hist))
            log.info("%s stage %d: %d classes, acc %.4f, %d iterations", tag, i + 1, sp.classes, acc, iters)
            prev_test = test
    except Exception as exc:
        exc.completed_reports = reports
        raise
    return reports, net
