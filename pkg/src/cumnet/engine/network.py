"""Network container, forward/backward passes and the softmax cross-entropy loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import CompositionError, DomainError, NumericError
from .layers import BatchNorm2D, Conv2D, Dense, Flatten, Layer, MaxPool2D, ReLU


class Network:
    """Ordered layer list plus the metadata needed to morph, prune and persist it.

    ``morph_log`` and ``prune_log`` are lists of plain JSON-able dicts so the
    checkpoint header can embed them verbatim.  ``lineage`` is the ordered list
    of provenance ids (one per morph/prune/training event).
    """

    def __init__(self, layers: list[Layer], input_shape, num_classes: int, rng_seed: int = 0,
                 morph_log=None, prune_log=None, lineage=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        self.rng_seed = int(rng_seed)
        self.morph_log = list(morph_log or [])
        self.prune_log = list(prune_log or [])
        self.lineage = list(lineage or [])
        for layer in self.layers:
            if layer.name is None:
                layer.name = self.fresh_name(layer.kind)
        self.validate()

    def fresh_name(self, kind: str) -> str:
        taken = {layer.name for layer in self.layers}
        prefix = kind.lower()
        i = 0
        while f"{prefix}{i}" in taken:
            i += 1
        return f"{prefix}{i}"

    def shapes(self) -> list[tuple]:
        """Input shape of every layer, followed by the output shape."""
        out = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                out.append(layer.output_shape(out[-1]))
            except CompositionError as exc:
                raise CompositionError(f"layer {i} ({layer.name}): {exc}") from None
        return out

    def validate(self) -> None:
        shapes = self.shapes()
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise CompositionError("final layer must be a Dense classifier")
        if shapes[-1] != (self.num_classes,):
            raise CompositionError(
                f"classifier emits {shapes[-1][0]} logits but num_classes={self.num_classes}")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise CompositionError("layer names must be unique")
        for layer in self.layers:
            for pname, m in layer.frozen.items():
                if m.shape != layer.params[pname].shape:
                    raise CompositionError(f"freeze mask for {layer.name}.{pname} has wrong shape")

    def index_of(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers], self.input_shape, self.num_classes,
                       self.rng_seed, [dict(e) for e in self.morph_log],
                       [dict(e) for e in self.prune_log], list(self.lineage))

    def astype(self, dtype) -> "Network":
        new = self.copy()
        new.layers = [layer.astype(dtype) for layer in new.layers]
        return new

    def weighted_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, (Conv2D, Dense))]

    def conv_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv2D)]

    def parameter_count(self) -> int:
        return sum(p.size for layer in self.layers for p in layer.params.values())

    def __repr__(self):
        body = "\n".join(f"  [{i}] {layer.name}: {layer!r}" for i, layer in enumerate(self.layers))
        return f"Network(input={self.input_shape}, classes={self.num_classes})\n{body}"


@dataclass
class ForwardCache:
    mode: str
    layer_caches: list = field(default_factory=list)
    logits: np.ndarray | None = None


def _check_batch(net: Network, batch: np.ndarray) -> None:
    if batch.ndim != len(net.input_shape) + 1 or tuple(batch.shape[1:]) != net.input_shape:
        raise CompositionError(f"batch shape {batch.shape} does not match input {net.input_shape}")
    if batch.shape[0] < 1:
        raise CompositionError("batch must contain at least one sample")


def _run(net, batch, mode, keep, hooks=None):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    _check_batch(net, batch)
    train = mode == "train"
    x = batch
    caches = []
    with np.errstate(invalid="ignore", over="ignore"):
        for i, layer in enumerate(net.layers):
            x, cache = layer.forward(x, train)
            if hooks and i in hooks:
                x = hooks[i](x)
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite output in layer {i} ({layer.name}, {layer.kind})")
            if keep:
                caches.append(cache)
    return x, caches


def forward(net: Network, batch: np.ndarray, mode: str = "eval", hooks=None) -> np.ndarray:
    """Logits for ``batch``.

    ``hooks`` maps a layer index to a function applied to that layer's output;
    the robustness module uses it to ablate feature maps.  Train mode updates
    batch-norm running statistics.
    """
    logits, _ = _run(net, batch, mode, keep=False, hooks=hooks)
    return logits


def forward_with_cache(net: Network, batch: np.ndarray, mode: str = "train") -> tuple[np.ndarray, ForwardCache]:
    logits, caches = _run(net, batch, mode, keep=True)
    return logits, ForwardCache(mode, caches, logits)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DomainError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise DomainError(f"label index out of range for {k} classes")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    p = np.exp(z - logsum[:, None])
    p[np.arange(n), labels] -= 1.0
    return loss, p / n


def _backprop(net: Network, cache: ForwardCache, dlogits: np.ndarray):
    grads: list[dict] = [None] * len(net.layers)
    dy = dlogits.astype(cache.logits.dtype)
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dy, g = layer.backward(dy, cache.layer_caches[i])
        for pname, m in layer.frozen.items():
            g[pname] = np.where(m, np.zeros((), g[pname].dtype), g[pname])
        grads[i] = g
    return grads, dy


def backward(net: Network, cache: ForwardCache, labels) -> tuple[list[dict], float]:
    """Parameter gradients (one dict per layer) and the mean cross-entropy loss.

    Frozen positions receive a gradient of exactly zero.
    """
    loss, dlogits = cross_entropy(cache.logits, labels)
    grads, _ = _backprop(net, cache, dlogits)
    return grads, loss


def input_gradient(net: Network, batch: np.ndarray, labels, mode: str = "eval") -> tuple[np.ndarray, float]:
    """Gradient of the mean loss with respect to the input batch."""
    logits, cache = forward_with_cache(net, batch, mode)
    loss, dlogits = cross_entropy(logits, labels)
    _, dx = _backprop(net, cache, dlogits)
    return dx, loss


def predict(net: Network, x: np.ndarray, batch_size: int = 512, hooks=None) -> np.ndarray:
    """Eval-mode logits, computed in chunks."""
    out = [forward(net, x[i:i + batch_size], "eval", hooks) for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


def accuracy(net: Network, x: np.ndarray, y: np.ndarray, num_logits: int | None = None, hooks=None) -> float:
    """Top-1 accuracy; ``num_logits`` restricts the argmax to the first classes."""
    if len(y) == 0:
        return 0.0
    logits = predict(net, x, hooks=hooks)
    if num_logits is not None:
        logits = logits[:, :num_logits]
    return float(np.mean(logits.argmax(axis=1) == y))


def build_vgg(cfg, input_shape, num_classes: int, seed: int = 0, hidden=(), batch_norm: bool = True,
              kernel: int = 3) -> Network:
    """VGG-style network from a layer list such as ``[8, "M", 16, "M"]``.

    Integers are conv widths (each followed by batch-norm and ReLU), ``"M"`` is
    a 2x2 max-pool.  ``hidden`` lists the widths of Dense+ReLU layers placed
    before the classifier.  Inputs with a single dimension produce an MLP.
    """
    layers: list[Layer] = []
    shape = tuple(input_shape)
    idx = 0

    def rng():
        nonlocal idx
        idx += 1
        return np.random.default_rng([seed, idx])

    for item in cfg:
        if item == "M":
            block = [MaxPool2D(2)]
        else:
            block = [Conv2D(shape[0], int(item), kernel, rng=rng())]
            if batch_norm:
                block.append(BatchNorm2D(int(item)))
            block.append(ReLU())
        for layer in block:
            shape = layer.output_shape(shape)
        layers.extend(block)
    if len(shape) > 1:
        layers.append(Flatten())
        shape = (int(np.prod(shape)),)
    for width in hidden:
        layers.append(Dense(shape[0], int(width), rng=rng()))
        layers.append(ReLU())
        shape = (int(width),)
    layers.append(Dense(shape[0], num_classes, rng=rng()))
    return Network(layers, input_shape, num_classes, rng_seed=seed)


def reinitialize(net: Network, seed: int) -> Network:
    """Fresh network with the same layer structure but newly drawn weights."""
    layers = []
    idx = 0
    for layer in net.layers:
        if isinstance(layer, Conv2D):
            idx += 1
            new = Conv2D(layer.in_ch, layer.out_ch, layer.k, layer.stride, layer.padding,
                         rng=np.random.default_rng([seed, idx]))
        elif isinstance(layer, Dense):
            idx += 1
            new = Dense(layer.in_features, layer.out_features, rng=np.random.default_rng([seed, idx]))
        elif isinstance(layer, BatchNorm2D):
            new = BatchNorm2D(layer.channels, layer.eps, layer.momentum)
        elif isinstance(layer, MaxPool2D):
            new = MaxPool2D(layer.window, layer.stride)
        else:
            new = type(layer)()
        new.name = layer.name
        layers.append(new)
    return Network(layers, net.input_shape, net.num_classes, rng_seed=seed)
