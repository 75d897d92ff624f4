"""L1-norm filter pruning and freezing of the zero mask left by deepening.

Pruned filters are zeroed and frozen in place rather than removed, so pruned
networks keep their shapes and stay morphable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import BatchNorm2D, Conv2D, Dense, Network
from .errors import ConfigError, LayerCollapseError, ProvenanceError
from .morph import MorphEntry, encode_mask


@dataclass(frozen=True)
class PruneConfig:
    R: float = 0.0
    scope: str = "global"          # "global" ranks all conv filters together, "layer" ranks per layer
    keep_zero_mask: bool = False
    zero_next_input: bool = False  # also zero the next conv's input-channel slices

    def __post_init__(self):
        if not 0.0 <= self.R < 1.0:
            raise ConfigError(f"pruning ratio must lie in [0, 1), got {self.R}")
        if self.scope not in ("global", "layer"):
            raise ConfigError(f"unknown pruning scope {self.scope!r}")


@dataclass
class PruneReport:
    pruned: list[tuple[int, int]] = field(default_factory=list)   # (layer index, filter index)
    masks: dict = field(default_factory=dict)                     # layer name -> {param: bool array}
    nonzero_params: int = 0
    total_params: int = 0
    nonzero_conv_params: int = 0
    total_conv_params: int = 0


def l1_filter_norms(net: Network) -> list[np.ndarray]:
    """Per conv layer, the L1 norm of each output filter (bias excluded)."""
    out = []
    for i in net.conv_layers():
        w = net.layers[i].params["weight"].astype(np.float64)
        out.append(np.array([math.fsum(np.abs(f).ravel()) for f in w]))
    if not out:
        raise ConfigError("network has no convolutional layers")
    return out


def nonzero_parameter_count(net: Network, conv_only: bool = False) -> tuple[int, int]:
    """(nonzero, total) weight counts; with ``conv_only`` just conv kernels."""
    nz = total = 0
    for layer in net.layers:
        if conv_only and not isinstance(layer, Conv2D):
            continue
        names = ("weight",) if conv_only else layer.params.keys()
        for p in names:
            arr = layer.params[p]
            nz += int(np.count_nonzero(arr))
            total += arr.size
    return nz, total


def _select(norms: list[np.ndarray], conv_idx: list[int], cfg: PruneConfig) -> list[tuple[int, int]]:
    if cfg.scope == "global":
        items = sorted((float(n), li, f) for li, layer_norms in zip(conv_idx, norms)
                       for f, n in enumerate(layer_norms))
        k = math.floor(cfg.R * len(items))
        chosen = [(li, f) for _, li, f in items[:k]]
    else:
        chosen = []
        for li, layer_norms in zip(conv_idx, norms):
            items = sorted((float(n), f) for f, n in enumerate(layer_norms))
            k = math.floor(cfg.R * len(items))
            chosen += [(li, f) for _, f in items[:k]]
    return sorted(chosen)


def _following(net: Network, index: int, kind):
    for j in range(index + 1, len(net.layers)):
        layer = net.layers[j]
        if isinstance(layer, kind):
            return j
        if isinstance(layer, (Conv2D, Dense)):
            return None
    return None


def prune_filters(net: Network, cfg: PruneConfig) -> tuple[Network, PruneReport]:
    """Zero and freeze the lowest-L1 conv filters.

    ``floor(R * filters)`` filters are chosen (globally or per layer), ties going
    to the lower (layer, filter) index.  Each pruned filter loses its kernel,
    bias and the batch-norm scale/shift of its channel, so the channel reads
    exactly 0 in both train and eval mode.  Fully connected layers are never
    touched.
    """
    new = net.copy()
    conv_idx = new.conv_layers()
    norms = l1_filter_norms(new)
    chosen = _select(norms, conv_idx, cfg)

    per_layer: dict[int, list[int]] = {}
    for li, f in chosen:
        per_layer.setdefault(li, []).append(f)
    for li, filters in per_layer.items():
        if len(filters) >= new.layers[li].out_ch:
            raise LayerCollapseError(f"pruning would remove every filter of layer {li} ({new.layers[li].name})")

    report = PruneReport(pruned=chosen)

    def zero(layer, pname, positions):
        layer.params[pname] = np.where(positions, np.zeros((), layer.params[pname].dtype), layer.params[pname])
        layer.freeze(pname, positions)
        entry = report.masks.setdefault(layer.name, {})
        entry[pname] = entry.get(pname, np.zeros(positions.shape, bool)) | positions

    for li, filters in per_layer.items():
        conv = new.layers[li]
        rows = np.zeros(conv.out_ch, bool)
        rows[filters] = True
        zero(conv, "weight", np.broadcast_to(rows[:, None, None, None], conv.params["weight"].shape).copy())
        zero(conv, "bias", rows.copy())
        bn_i = _following(new, li, BatchNorm2D)
        if bn_i is not None:
            bn = new.layers[bn_i]
            zero(bn, "gamma", rows.copy())
            zero(bn, "beta", rows.copy())
        if cfg.zero_next_input:
            nxt = _following(new, li, Conv2D)
            if nxt is not None:
                t = new.layers[nxt]
                zero(t, "weight", np.broadcast_to(rows[None, :, None, None], t.params["weight"].shape).copy())

    report.nonzero_params, report.total_params = nonzero_parameter_count(new)
    report.nonzero_conv_params, report.total_conv_params = nonzero_parameter_count(new, conv_only=True)
    if chosen:
        event_id = f"p{len(new.prune_log)}-R{cfg.R:g}-{cfg.scope}"
        new.prune_log.append({
            "id": event_id, "R": cfg.R, "scope": cfg.scope, "zero_next_input": cfg.zero_next_input,
            "filters": [[new.layers[li].name, f] for li, f in chosen],
            "masks": {ln: {p: encode_mask(m) for p, m in ps.items()} for ln, ps in report.masks.items()},
        })
        new.lineage.append(event_id)
    return new, report


def freeze_net2net_zero_mask(net: Network, morph_log=None) -> Network:
    """Freeze every position that a deepen morph created as an exact zero.

    ``morph_log`` defaults to the network's own log; it may hold JSON dicts or
    :class:`MorphEntry` objects.  Identity-1 centres stay trainable.
    """
    entries = net.morph_log if morph_log is None else morph_log
    entries = [e if isinstance(e, MorphEntry) else MorphEntry.from_json(e) for e in entries]
    deepens = [e for e in entries if e.op == "deepen"]
    if not deepens:
        raise ProvenanceError("morph log holds no deepen entries")
    new = net.copy()
    for e in deepens:
        for lname, params in e.zero_positions.items():
            try:
                layer = new.layers[new.index_of(lname)]
            except KeyError:
                raise ProvenanceError(f"layer {lname!r} from {e.id} not in network") from None
            for pname, m in params.items():
                if pname not in layer.params or layer.params[pname].shape != m.shape:
                    raise ProvenanceError(f"zero mask for {lname}.{pname} does not match the layer shape")
                if np.any(layer.params[pname][m] != 0):
                    raise ProvenanceError(f"{lname}.{pname} has trained away from its zero initialisation")
                layer.freeze(pname, m)
    new.lineage.append(f"z{len(new.lineage)}-freeze-zero-mask")
    return new
