"""SGD with momentum and weight decay that honours freeze masks."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from .network import Network


class SGD:
    """Stateful SGD; velocity buffers are keyed by (layer name, param name).

    Update: ``v = momentum * v + (g + weight_decay * w)``; ``w -= lr * v``.
    Frozen positions are restored bit-exactly after each step and their
    velocity is kept at zero.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        if momentum < 0 or weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity: dict[tuple[str, str], np.ndarray] = {}

    def step(self, net: Network, grads: list[dict]) -> Network:
        if len(grads) != len(net.layers):
            raise ConfigError("one gradient dict per layer expected")
        for layer, g in zip(net.layers, grads):
            for pname, grad in (g or {}).items():
                w = layer.params[pname]
                if grad.shape != w.shape:
                    raise ConfigError(f"gradient for {layer.name}.{pname} has shape {grad.shape}, "
                                      f"expected {w.shape}")
                if self.lr == 0:
                    continue
                d = grad.astype(w.dtype)
                if self.weight_decay:
                    d = d + w.dtype.type(self.weight_decay) * w
                key = (layer.name, pname)
                if self.momentum:
                    v = self.velocity.get(key)
                    v = d if v is None else w.dtype.type(self.momentum) * v + d
                    d = v
                new = w - w.dtype.type(self.lr) * d
                m = layer.frozen.get(pname)
                if m is not None:
                    new = np.where(m, w, new)
                    if self.momentum:
                        self.velocity[key] = np.where(m, 0, d).astype(w.dtype)
                elif self.momentum:
                    self.velocity[key] = d
                layer.params[pname] = new.astype(w.dtype, copy=False)
        return net


def sgd_step(net: Network, gradients: list[dict], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, optimizer: SGD | None = None) -> Network:
    """One SGD update applied in place; pass ``optimizer`` to carry momentum state."""
    opt = optimizer or SGD(lr, momentum, weight_decay)
    return opt.step(net, gradients)
