"""Noise/ablation sweeps, FGSM, mutual inference with rejection, TNR/FNR curves."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .engine import BatchNorm2D, Conv2D, Network, ReLU, input_gradient, predict
from .errors import ConfigError

NO_DECISION = -1


def _clip(x, value_range):
    if value_range is None:
        return x
    lo, hi = value_range
    return np.clip(x, lo, hi)


def _acc(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(logits.argmax(axis=1) == y)) if len(y) else 0.0


# ---------------------------------------------------------------- sweeps

def eval_gaussian_noise(net: Network, ds: Dataset, sigmas, seed: int = 0) -> list[float]:
    """Accuracy under additive i.i.d. gaussian input noise, clamped to the data range."""
    out = []
    for i, sigma in enumerate(sigmas):
        if sigma < 0:
            raise ConfigError(f"noise sigma must be non-negative, got {sigma}")
        if sigma == 0:
            x = ds.x
        else:
            rng = np.random.default_rng([seed, i])
            x = _clip(ds.x + rng.normal(0.0, sigma, ds.x.shape).astype(ds.x.dtype), ds.value_range)
        out.append(_acc(predict(net, x), ds.y))
    return out


def conv_activation_sites(net: Network) -> list[int]:
    """Indices of the ReLU layers that close conv blocks."""
    sites = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv2D):
            j = i + 1
            if j < len(net.layers) and isinstance(net.layers[j], BatchNorm2D):
                j += 1
            if j < len(net.layers) and isinstance(net.layers[j], ReLU):
                sites.append(j)
    return sites


def eval_ablation(net: Network, ds: Dataset, fractions, trials: int = 5, seed: int = 0) -> list[float]:
    """Accuracy when ``round(f * C)`` random feature maps of every conv block are zeroed.

    A fresh channel subset is drawn per trial; the result is the trial mean.
    """
    sites = conv_activation_sites(net)
    if not sites:
        raise ConfigError("network has no conv blocks to ablate")
    channels = {s: net.shapes()[s][0] for s in sites}
    out = []
    for fi, f in enumerate(fractions):
        if not 0.0 <= f <= 1.0:
            raise ConfigError(f"ablation fraction must lie in [0, 1], got {f}")
        if f == 0:
            out.append(_acc(predict(net, ds.x), ds.y))
            continue
        accs = []
        for t in range(trials):
            rng = np.random.default_rng([seed, fi, t])
            hooks = {}
            for s in sites:
                c = channels[s]
                keep = np.ones(c, np.float32)
                keep[rng.permutation(c)[:int(round(f * c))]] = 0.0
                hooks[s] = lambda a, k=keep: a * k.astype(a.dtype)[None, :, None, None]
            accs.append(_acc(predict(net, ds.x, hooks=hooks), ds.y))
        out.append(float(np.mean(accs)))
    return out


# ---------------------------------------------------------------- FGSM

def fgsm(net: Network, x: np.ndarray, y: np.ndarray, eps: float, value_range=(0.0, 1.0),
         batch_size: int = 256) -> np.ndarray:
    """``clip(x + eps * sign(grad_x loss))`` with the gradient of the attacked model in eval mode.

    The result satisfies ``|x' - x| <= eps`` elementwise when compared in float64.
    """
    if eps < 0:
        raise ConfigError(f"eps must be non-negative, got {eps}")
    if eps == 0:
        return x.copy()
    out = np.empty_like(x)
    for i in range(0, len(x), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        g, _ = input_gradient(net, xb, yb, mode="eval")
        adv = _clip(xb.astype(np.float64) + eps * np.sign(g), value_range).astype(x.dtype)
        # float32 rounding may overshoot the eps ball by half an ulp; step back toward x
        while True:
            over = np.abs(adv.astype(np.float64) - xb.astype(np.float64)) > eps
            if not over.any():
                break
            adv[over] = np.nextafter(adv[over], xb[over])
        out[i:i + batch_size] = adv
    return out


# ---------------------------------------------------------------- mutual inference

@dataclass
class EnsembleSpec:
    models: list[Network]
    known_classes: list[int] | None = None
    weights: list[float] | None = None

    def __post_init__(self):
        if not self.models:
            raise ConfigError("ensemble needs at least one model")
        if self.known_classes is None:
            self.known_classes = [m.num_classes for m in self.models]
        self.known_classes = [int(k) for k in self.known_classes]
        if len(self.known_classes) != len(self.models):
            raise ConfigError("one known-class count per model")
        if any(b < a for a, b in zip(self.known_classes, self.known_classes[1:])):
            raise ConfigError("known-class counts must be nondecreasing")
        if self.known_classes[-1] != self.models[-1].num_classes:
            raise ConfigError("the final model must know every class")
        if any(k > m.num_classes for k, m in zip(self.known_classes, self.models)):
            raise ConfigError("a model cannot know more classes than it has outputs")
        if self.weights is None:
            self.weights = [1.0] * len(self.models)
        w = np.asarray(self.weights, dtype=np.float64)
        if len(w) != len(self.models) or np.any(w < 0) or not np.any(w > 0) or not np.all(np.isfinite(w)):
            raise ConfigError("weights must be finite, non-negative, not all zero, one per model")
        self.weights = (w / w.sum()).tolist()

    @property
    def num_classes(self) -> int:
        return self.known_classes[-1]

    @classmethod
    def from_models(cls, models, validation: Dataset | None = None, weighting: str = "accuracy"):
        """Weights default to each model's accuracy on the validation samples of its own classes."""
        if weighting == "uniform" or validation is None:
            return cls(list(models))
        if weighting != "accuracy":
            raise ConfigError(f"unknown weighting {weighting!r}")
        weights = []
        for m in models:
            sel = validation.y < m.num_classes
            weights.append(_acc(predict(m, validation.x[sel]), validation.y[sel]) if sel.any() else 0.0)
        if not any(weights):
            weights = None
        return cls(list(models), weights=weights)


@dataclass
class DecisionRecord:
    input_id: int
    confidences: list          # per model max softmax; None where the model abstains
    tally: dict                # class -> summed vote weight
    outcome: int               # class index or NO_DECISION
    truth: int | None = None


@dataclass
class EnsembleOutputs:
    """Per-input, per-model quantities that do not depend on delta."""
    preds: np.ndarray          # (M, N) own-argmax of each model
    rest: np.ndarray           # (M, N) sum_{j != max} exp(l_j - l_max), float64
    participates: np.ndarray   # (M, N) model's label space contains the final-model argmax
    vote: np.ndarray           # (N,) plurality class or NO_DECISION
    tallies: list


def ensemble_outputs(spec: EnsembleSpec, x: np.ndarray) -> EnsembleOutputs:
    m, n = len(spec.models), len(x)
    preds = np.empty((m, n), np.int64)
    rest = np.empty((m, n), np.float64)
    for i, (net, k) in enumerate(zip(spec.models, spec.known_classes)):
        logits = predict(net, x)[:, :k].astype(np.float64)
        preds[i] = logits.argmax(axis=1)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        rest[i] = z.sum(axis=1) - 1.0
        rest[i] = np.maximum(rest[i], 0.0)
    final = preds[-1]
    known = np.asarray(spec.known_classes)[:, None]
    participates = known > final[None, :]
    w = np.asarray(spec.weights)
    vote = np.empty(n, np.int64)
    tallies = []
    for j in range(n):
        tally: dict[int, float] = {}
        for i in range(m):
            if participates[i, j]:
                c = int(preds[i, j])
                tally[c] = tally.get(c, 0.0) + float(w[i])
        ranked = sorted(tally.values(), reverse=True)
        top = max(tally, key=lambda c: (tally[c], -c))
        vote[j] = NO_DECISION if len(ranked) > 1 and ranked[0] == ranked[1] or ranked[0] == 0 else top
        tallies.append(tally)
    return EnsembleOutputs(preds, rest, participates, vote, tallies)


def reject_mask(rest: np.ndarray, delta: float) -> np.ndarray:
    """True where the max softmax ``1 / (1 + rest)`` is below ``delta``.

    Evaluated without forming the probability so that delta=0 rejects nothing
    and delta=1 rejects every input with finite logits.
    """
    if not 0.0 <= delta <= 1.0:
        raise ConfigError(f"delta must lie in [0, 1], got {delta}")
    if delta == 0:
        return np.zeros(rest.shape, bool)
    if delta >= 1:
        return np.ones(rest.shape, bool)
    return rest > (1.0 / delta - 1.0)


def decide(out: EnsembleOutputs, delta: float) -> np.ndarray:
    rejected = (reject_mask(out.rest, delta) & out.participates).any(axis=0)
    return np.where(rejected, NO_DECISION, out.vote)


def mutual_infer_batch(spec: EnsembleSpec, x: np.ndarray, delta: float) -> np.ndarray:
    return decide(ensemble_outputs(spec, x), delta)


def mutual_infer(spec: EnsembleSpec, x: np.ndarray, delta: float, input_id: int = 0,
                 truth: int | None = None) -> DecisionRecord:
    """Decision for a single input (shape ``input_shape`` or ``(1,) + input_shape``)."""
    x = np.asarray(x)
    if x.shape == spec.models[0].input_shape:
        x = x[None]
    out = ensemble_outputs(spec, x)
    outcome = int(decide(out, delta)[0])
    conf = [float(1.0 / (1.0 + r)) if p else None for r, p in zip(out.rest[:, 0], out.participates[:, 0])]
    return DecisionRecord(input_id, conf, out.tallies[0], outcome, truth)


# ---------------------------------------------------------------- detection

@dataclass
class DetectionCurve:
    points: list = field(default_factory=list)     # (delta, tnr, fnr)
    no_decision_rates: list = field(default_factory=list)
    n_negatives: int = 0
    n_positives: int = 0
    population: str = "clean+adversarial; negatives = wrong decision at delta=0"

    @property
    def deltas(self):
        return [p[0] for p in self.points]


def _rate(mask: np.ndarray, pop: np.ndarray) -> float:
    return float(mask[pop].mean()) if pop.any() else float("nan")


def detection_curve(spec: EnsembleSpec, clean: Dataset, adversarial: Dataset, deltas) -> DetectionCurve:
    """TNR/FNR of the rejection rule over the union of clean and adversarial inputs.

    Negatives are inputs that receive a wrong class at delta=0; positives get
    the right class at delta=0.  Inputs already undecided at delta=0 (vote
    ties) belong to neither group.
    """
    if len(clean) == 0 or len(adversarial) == 0:
        raise ConfigError("clean and adversarial sets must be nonempty")
    x = np.concatenate([clean.x, adversarial.x])
    y = np.concatenate([clean.y, adversarial.y])
    out = ensemble_outputs(spec, x)
    base = decide(out, 0.0)
    neg = (base != NO_DECISION) & (base != y)
    pos = base == y
    curve = DetectionCurve(n_negatives=int(neg.sum()), n_positives=int(pos.sum()))
    for d in deltas:
        nd = decide(out, float(d)) == NO_DECISION
        curve.points.append((float(d), _rate(nd, neg), _rate(nd, pos)))
        curve.no_decision_rates.append(float(nd.mean()))
    return curve


def detection_curves(spec: EnsembleSpec, clean: Dataset, adversarial: Dataset, deltas) -> dict:
    """Curves with mutual inference and with the final model alone."""
    alone = EnsembleSpec([spec.models[-1]])
    return {"mi": detection_curve(spec, clean, adversarial, deltas),
            "final_only": detection_curve(alone, clean, adversarial, deltas)}


def attack_table(spec: EnsembleSpec, baseline: Network | None, ds: Dataset, eps_list) -> list[dict]:
    """Accuracy under FGSM crafted against the final model (and the baseline against itself).

    Mutual-inference accuracy counts NO_DECISION outcomes as errors (delta=0).
    """
    final = spec.models[-1]
    rows = []
    for eps in eps_list:
        adv = fgsm(final, ds.x, ds.y, eps, ds.value_range)
        row = {"eps": float(eps),
               "acc_mi": float(np.mean(mutual_infer_batch(spec, adv, 0.0) == ds.y)),
               "acc_nomi": _acc(predict(final, adv), ds.y)}
        if baseline is not None:
            badv = fgsm(baseline, ds.x, ds.y, eps, ds.value_range)
            row["acc_baseline"] = _acc(predict(baseline, badv), ds.y)
        rows.append(row)
    return rows
