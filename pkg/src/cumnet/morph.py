"""Function-preserving network morphs: deepen, widen and output-class expansion.

All morphs return a new :class:`Network` and leave the input untouched.  Each
applied morph appends a JSON-able record to ``net.morph_log``; the record
stores which weight positions were created as exact zeros and which as
identity ones, so the zero mask can later be frozen.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

from .engine import BatchNorm2D, Conv2D, Dense, Flatten, MaxPool2D, Network, ReLU, predict
from .engine.layers import fan_in_uniform
from .errors import CompositionError, ConfigError, ForbiddenSiteError, MorphPreconditionError

DEFAULT_WIDEN_NOISE = 1e-5
DEFAULT_EXPAND_SCALE = 0.01


def encode_mask(mask: np.ndarray) -> dict:
    bits = np.packbits(mask.astype(bool).ravel(), bitorder="little")
    return {"shape": list(mask.shape), "bits": base64.b64encode(bits.tobytes()).decode("ascii")}


def decode_mask(obj: dict) -> np.ndarray:
    shape = tuple(obj["shape"])
    raw = np.frombuffer(base64.b64decode(obj["bits"]), dtype=np.uint8)
    n = int(np.prod(shape))
    return np.unpackbits(raw, bitorder="little")[:n].astype(bool).reshape(shape)


@dataclass
class MorphEntry:
    op: str
    site: int
    id: str = ""
    zero_positions: dict = field(default_factory=dict)      # layer name -> {param: bool array}
    identity_positions: dict = field(default_factory=dict)  # layer name -> {param: bool array}
    details: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        enc = lambda d: {ln: {p: encode_mask(m) for p, m in ps.items()} for ln, ps in d.items()}
        return {"op": self.op, "site": self.site, "id": self.id,
                "zero_positions": enc(self.zero_positions),
                "identity_positions": enc(self.identity_positions), **self.details}

    @classmethod
    def from_json(cls, obj: dict) -> "MorphEntry":
        dec = lambda d: {ln: {p: decode_mask(m) for p, m in ps.items()} for ln, ps in d.items()}
        details = {k: v for k, v in obj.items()
                   if k not in ("op", "site", "id", "zero_positions", "identity_positions")}
        return cls(obj["op"], obj["site"], obj.get("id", ""), dec(obj.get("zero_positions", {})),
                   dec(obj.get("identity_positions", {})), details)


def morph_entries(net: Network) -> list[MorphEntry]:
    return [MorphEntry.from_json(e) for e in net.morph_log]


def _record(net: Network, entry: MorphEntry) -> MorphEntry:
    entry.id = f"m{len(net.morph_log)}-{entry.op}@{entry.site}"
    net.morph_log.append(entry.to_json())
    net.lineage.append(entry.id)
    return entry


def _activation_index(net: Network, index: int) -> int:
    """Index of the ReLU that closes the block starting at ``index``."""
    j = index + 1
    if j < len(net.layers) and isinstance(net.layers[j], BatchNorm2D):
        j += 1
    if j >= len(net.layers) or not isinstance(net.layers[j], ReLU):
        raise MorphPreconditionError(
            f"layer {index} is not followed by a ReLU; identity insertion would not preserve the function")
    return j


def identity_batchnorm(channels: int) -> BatchNorm2D:
    """Batch-norm that is exactly the identity in eval mode."""
    bn = BatchNorm2D(channels)
    bn.params["gamma"] = np.sqrt(bn.buffers["running_var"] + bn.eps)
    return bn


def deepen_at(net: Network, conv_index: int) -> tuple[Network, MorphEntry]:
    """Insert an identity-initialised block right after the block at ``conv_index``.

    For a Conv2D site the new block is Conv(identity kernels) -> BatchNorm
    (identity) -> ReLU; for a Dense site it is Dense(identity) -> ReLU.  Since
    the incoming activations are ReLU outputs (non-negative), the new ReLU is a
    no-op and the network function is unchanged in eval mode.
    """
    if not 0 <= conv_index < len(net.layers):
        raise MorphPreconditionError(f"site {conv_index} out of range")
    site = net.layers[conv_index]
    if conv_index == len(net.layers) - 1:
        raise MorphPreconditionError("cannot deepen at the classifier")
    new = net.copy()
    act = _activation_index(new, conv_index)
    if isinstance(site, Conv2D):
        k, c = site.k, site.out_ch
        if k % 2 == 0 or site.padding != (k - 1) // 2:
            raise MorphPreconditionError(
                f"deepening needs an odd kernel with size-preserving padding, got k={k}, padding={site.padding}")
        conv = Conv2D(c, c, k, 1, (k - 1) // 2)
        ident = np.zeros(conv.params["weight"].shape, bool)
        ident[np.arange(c), np.arange(c), k // 2, k // 2] = True
        conv.params["weight"][ident] = 1.0
        conv.name = new.fresh_name("Conv2D")
        block = [conv]
        bn = identity_batchnorm(c)
        bn.name = new.fresh_name("BatchNorm2D")
        new.layers.insert(act + 1, conv)
        new.layers.insert(act + 2, bn)
        relu = ReLU(new.fresh_name("ReLU"))
        new.layers.insert(act + 3, relu)
        block += [bn, relu]
        target = conv
    elif isinstance(site, Dense):
        n = site.out_features
        dense = Dense(n, n)
        ident = np.eye(n, dtype=bool)
        dense.params["weight"][ident] = 1.0
        dense.name = new.fresh_name("Dense")
        new.layers.insert(act + 1, dense)
        relu = ReLU(new.fresh_name("ReLU"))
        new.layers.insert(act + 2, relu)
        block = [dense, relu]
        target = dense
    else:
        raise MorphPreconditionError(f"layer {conv_index} is {site.kind}, expected Conv2D or Dense")
    new.validate()
    entry = MorphEntry(
        "deepen", conv_index,
        zero_positions={target.name: {"weight": ~ident}},
        identity_positions={target.name: {"weight": ident}},
        details={"inserted": [layer.name for layer in block], "insert_at": act + 1},
    )
    return new, _record(new, entry)


def _next_weighted(net: Network, index: int) -> int:
    for j in range(index + 1, len(net.layers)):
        if isinstance(net.layers[j], (Conv2D, Dense)):
            return j
    raise MorphPreconditionError(f"no weighted layer after {index}")


def widen_at(net: Network, conv_index: int, new_width: int, seed: int | None = None,
             noise: float = DEFAULT_WIDEN_NOISE) -> tuple[Network, MorphEntry]:
    """Net2Net widening of the layer at ``conv_index`` to ``new_width`` units.

    Extra units copy randomly chosen existing units; the next weighted layer
    divides each incoming column by its unit's replication count so that
    the eval-mode function is preserved up to the symmetry-breaking noise.
    """
    if not 0 <= conv_index < len(net.layers):
        raise MorphPreconditionError(f"site {conv_index} out of range")
    site = net.layers[conv_index]
    if not isinstance(site, (Conv2D, Dense)):
        raise MorphPreconditionError(f"layer {conv_index} is {site.kind}, expected Conv2D or Dense")
    if conv_index == len(net.layers) - 1:
        raise ForbiddenSiteError("widening the final classifier is not allowed")
    nxt = _next_weighted(net, conv_index)
    if nxt == len(net.layers) - 1:
        raise ForbiddenSiteError("the next weighted layer is the final classifier; widening would reshape it")
    if not 0 <= noise <= 1e-4:
        raise ConfigError("widen noise must lie in [0, 1e-4]")
    old = site.out_ch if isinstance(site, Conv2D) else site.out_features
    if new_width < old:
        raise MorphPreconditionError(f"new width {new_width} < current width {old}")
    if new_width == old:
        return net.copy(), MorphEntry("widen", conv_index, details={"from": old, "to": old, "replication": []})

    if seed is None:
        seed = net.rng_seed * 7919 + len(net.morph_log)
    rng = np.random.default_rng([seed, conv_index, new_width])
    g = np.concatenate([np.arange(old), rng.integers(0, old, new_width - old)])
    counts = np.bincount(g, minlength=old).astype(np.float32)

    new = net.copy()
    shapes = new.shapes()
    s = new.layers[conv_index]
    w = s.params["weight"][g].copy()
    jitter = (1.0 + noise * rng.uniform(-1.0, 1.0, size=w[old:].shape)).astype(np.float32)
    w[old:] *= jitter
    s.params["weight"] = w
    s.params["bias"] = s.params["bias"][g].copy()
    s.frozen = {p: m[g] for p, m in s.frozen.items()}
    if isinstance(s, Conv2D):
        s.out_ch = new_width
    else:
        s.out_features = new_width

    spatial = 1
    for j in range(conv_index + 1, nxt):
        layer = new.layers[j]
        if isinstance(layer, BatchNorm2D):
            layer.params = {p: v[g].copy() for p, v in layer.params.items()}
            layer.buffers = {p: v[g].copy() for p, v in layer.buffers.items()}
            layer.frozen = {p: m[g] for p, m in layer.frozen.items()}
            layer.channels = new_width
        elif isinstance(layer, Flatten):
            spatial = int(np.prod(shapes[j][1:]))
        elif not isinstance(layer, (ReLU, MaxPool2D)):
            raise MorphPreconditionError(f"cannot widen through {layer.kind}")

    t = new.layers[nxt]
    scale = (1.0 / counts[g]).astype(np.float32)
    if isinstance(t, Conv2D):
        t.params["weight"] = t.params["weight"][:, g] * scale[None, :, None, None]
        t.frozen = {p: (m[:, g] if p == "weight" else m) for p, m in t.frozen.items()}
        t.in_ch = new_width
    else:
        out = t.out_features
        wt = t.params["weight"].reshape(out, old, spatial)
        t.params["weight"] = (wt[:, g, :] * scale[None, :, None]).reshape(out, new_width * spatial)
        t.frozen = {p: (m.reshape(out, old, spatial)[:, g, :].reshape(out, -1) if p == "weight" else m)
                    for p, m in t.frozen.items()}
        t.in_features = new_width * spatial
    new.validate()
    entry = MorphEntry("widen", conv_index, details={
        "layer": s.name, "next": t.name, "from": old, "to": new_width,
        "replication": g.tolist(), "noise": noise, "seed": seed})
    return new, _record(new, entry)


def expand_output(net: Network, k_new: int, init_scale: float = DEFAULT_EXPAND_SCALE,
                  seed: int | None = None) -> tuple[Network, MorphEntry]:
    """Grow the classifier by ``k_new`` randomly initialised rows.

    Existing rows and biases are copied unchanged; new biases are zero and
    new weights are fan-in-scaled uniform draws multiplied by ``init_scale``.
    """
    if k_new < 1:
        raise ConfigError("k_new must be at least 1")
    if init_scale < 0:
        raise ConfigError("init_scale must be non-negative")
    new = net.copy()
    cls = new.layers[-1]
    k_old, fan_in = cls.out_features, cls.in_features
    if seed is None:
        seed = net.rng_seed * 7919 + len(net.morph_log)
    rng = np.random.default_rng([seed, k_old, k_new])
    rows = fan_in_uniform(rng, (k_new, fan_in), fan_in, init_scale)
    cls.params["weight"] = np.concatenate([cls.params["weight"], rows.astype(cls.params["weight"].dtype)])
    cls.params["bias"] = np.concatenate([cls.params["bias"], np.zeros(k_new, cls.params["bias"].dtype)])
    cls.frozen = {p: np.concatenate([m, np.zeros((k_new,) + m.shape[1:], bool)]) for p, m in cls.frozen.items()}
    cls.out_features = k_old + k_new
    new.num_classes = k_old + k_new
    new.validate()
    entry = MorphEntry("expand_output", len(new.layers) - 1,
                       details={"from": k_old, "to": k_old + k_new, "init_scale": init_scale, "seed": seed})
    return new, _record(new, entry)


def verify_preservation(old: Network, new: Network, probes: int = 100, seed: int = 0) -> float:
    """Largest absolute logit difference on the shared classes over random probes."""
    if old.input_shape != new.input_shape:
        raise CompositionError(f"input shapes differ: {old.input_shape} vs {new.input_shape}")
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(probes,) + old.input_shape).astype(np.float32)
    k = min(old.num_classes, new.num_classes)
    a = predict(old, x)[:, :k].astype(np.float64)
    b = predict(new, x)[:, :k].astype(np.float64)
    return float(np.max(np.abs(a - b))) if probes else 0.0
