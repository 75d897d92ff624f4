"""Finite-difference gradient checking against the engine's backward pass.

Checks run on float64 copies of the networks: central differences with a
1e-3 step lose ~4 significant digits to cancellation, which float32 cannot
afford.  Perturbations that flip a ReLU sign pattern or a max-pool argmax
are discarded (the loss is not differentiable across those kinks); the
fraction discarded is reported and bounded by callers.
"""

import numpy as np

from cumnet.engine import (BatchNorm2D, Conv2D, Dense, Flatten, MaxPool2D, Network, ReLU, backward,
                           cross_entropy, forward_with_cache, input_gradient)

from oracles import relative_error

KINDS = ("Conv2D", "BatchNorm2D", "ReLU", "MaxPool2D", "Flatten", "Dense")
STEP = 1e-3


def _signature(net, cache):
    sig = []
    for layer, c in zip(net.layers, cache.layer_caches):
        if isinstance(layer, ReLU):
            sig.append(c.copy())
        elif isinstance(layer, MaxPool2D):
            sig.append(c[1].copy())
    return sig


def _same(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def _fd(loss_and_sig, arr, base_sig, step=STEP):
    grad = np.zeros(arr.shape)
    valid = np.ones(arr.shape, bool)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp, sp = loss_and_sig()
        flat[i] = orig - step
        lm, sm = loss_and_sig()
        flat[i] = orig
        grad.reshape(-1)[i] = (lp - lm) / (2 * step)
        if not (_same(sp, base_sig) and _same(sm, base_sig)):
            valid.reshape(-1)[i] = False
    return grad, valid


def check_network(net: Network, batch=4, seed=0, mode="train", x=None, stats=None):
    """Relative error per parameter tensor (and the input) for one random batch."""
    net = net.astype(np.float64)
    rng = np.random.default_rng(seed)
    if x is None:
        x = rng.normal(size=(batch,) + net.input_shape)
    y = rng.integers(0, net.num_classes, x.shape[0])

    def loss_and_sig():
        logits, cache = forward_with_cache(net, x, mode)
        return cross_entropy(logits, y)[0], _signature(net, cache)

    logits, cache = forward_with_cache(net, x, mode)
    grads, _ = backward(net, cache, y)
    base = _signature(net, cache)
    errors = {}
    skipped = total = 0
    for i, layer in enumerate(net.layers):
        for pname, p in layer.params.items():
            num, valid = _fd(loss_and_sig, p, base)
            skipped += int((~valid).sum())
            total += valid.size
            errors[f"{i}:{layer.kind}.{pname}"] = relative_error(grads[i][pname][valid], num[valid])
    dx, _ = input_gradient(net, x, y, mode)
    num, valid = _fd(loss_and_sig, x, base)
    skipped += int((~valid).sum())
    total += valid.size
    errors["input"] = relative_error(dx[valid], num[valid])
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + skipped
        stats["total"] = stats.get("total", 0) + total
    return errors


def make_instance(kind: str, seed: int):
    """Small random network whose only non-trivial layer is ``kind``, plus its input."""
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    c = int(rng.integers(1, 4))
    h = int(rng.integers(3, 7))
    shape = (c, h, h)
    mode = "train"
    x = None
    if kind == "Conv2D":
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        conv = Conv2D(c, int(rng.integers(1, 4)), k, stride, padding=int(rng.integers(0, 2)), rng=rng)
        conv.params["bias"] = rng.normal(size=conv.out_ch).astype(np.float32)
        body = [conv]
    elif kind == "BatchNorm2D":
        bn = BatchNorm2D(c)
        bn.params["gamma"] = rng.uniform(0.5, 1.5, c).astype(np.float32)
        bn.params["beta"] = rng.normal(size=c).astype(np.float32)
        bn.buffers["running_mean"] = rng.normal(size=c).astype(np.float32)
        bn.buffers["running_var"] = rng.uniform(0.5, 2, c).astype(np.float32)
        body = [bn]
        mode = "train" if seed % 2 == 0 else "eval"
    elif kind == "ReLU":
        body = [ReLU()]
    elif kind == "MaxPool2D":
        w = int(rng.integers(2, 4))
        body = [MaxPool2D(w, int(rng.integers(1, w + 1)))]
        # Distinct values spaced well beyond the FD step keep the argmax stable.
        x = (rng.permutation(3 * c * h * h).reshape((3,) + shape) * 0.05 - 1.0)
    elif kind == "Flatten":
        body = []
    elif kind == "Dense":
        n_in = int(rng.integers(2, 8))
        shape = (n_in,)
        body = [Dense(n_in, int(rng.integers(2, 6)), rng=rng)]
    else:
        raise ValueError(kind)
    layers = list(body)
    out = shape
    for layer in layers:
        out = layer.output_shape(out)
    if len(out) > 1:
        layers.append(Flatten())
        out = (int(np.prod(out)),)
    k_cls = int(rng.integers(2, 5))
    layers.append(Dense(out[0], k_cls, rng=rng))
    if x is None:
        x = rng.normal(size=(3,) + shape)
    return Network(layers, shape, k_cls, rng_seed=seed), x, mode


def check_kind(kind: str, seed: int, stats=None):
    net, x, mode = make_instance(kind, seed)
    return check_network(net, seed=seed, mode=mode, x=x, stats=stats)
