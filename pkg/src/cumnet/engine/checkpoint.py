"""Binary checkpoint format.

Layout (little-endian throughout)::

    b"MTCK" | u32 version | u64 header length | UTF-8 JSON header
    | weight blob (float32, layer order: params then buffers)
    | mask blob (bit-packed freeze masks, layer order, params only)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import (CheckpointFormatError, CheckpointLengthError, CheckpointVersionError,
                      TruncatedCheckpointError)
from .layers import layer_from_config
from .network import Network

MAGIC = b"MTCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _layer_arrays(net: Network):
    for layer in net.layers:
        for pname in layer.param_names:
            yield layer, pname, layer.params[pname], True
        for bname in layer.buffer_names:
            yield layer, bname, layer.buffers[bname], False


def encode(net: Network) -> bytes:
    layers_meta = []
    for layer in net.layers:
        layers_meta.append({
            "kind": layer.kind,
            "name": layer.name,
            "config": layer.config(),
            "params": [[p, list(layer.params[p].shape)] for p in layer.param_names],
            "buffers": [[b, list(layer.buffers[b].shape)] for b in layer.buffer_names],
        })
    weights = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, _, a, _ in _layer_arrays(net))
    masks = [layer.mask(name).ravel() for layer, name, _, is_param in _layer_arrays(net) if is_param]
    bits = np.concatenate(masks) if masks else np.zeros(0, bool)
    mask_blob = np.packbits(bits, bitorder="little").tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "rng_seed": net.rng_seed,
        "layers": layers_meta,
        "morph_log": net.morph_log,
        "prune_log": net.prune_log,
        "lineage": net.lineage,
        "weight_bytes": len(weights),
        "mask_bits": int(bits.size),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + weights + mask_blob


def checkpoint_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def save_checkpoint(net: Network, path) -> str:
    """Write ``net`` to ``path``; returns the content-derived checkpoint id."""
    data = encode(net)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return checkpoint_id(data)


def decode(data: bytes) -> Network:
    if len(data) < _PREFIX.size:
        raise TruncatedCheckpointError("file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    body = data[_PREFIX.size:]
    if len(body) < hlen:
        raise TruncatedCheckpointError("file ends inside the header")
    try:
        header = json.loads(body[:hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None

    layers = []
    n_floats = 0
    n_bits = 0
    for meta in header["layers"]:
        layer = layer_from_config(meta["kind"], meta["config"], meta["name"])
        for pname, shape in meta["params"]:
            n_floats += int(np.prod(shape))
            n_bits += int(np.prod(shape))
        for _, shape in meta["buffers"]:
            n_floats += int(np.prod(shape))
        layers.append((layer, meta))
    expected_w = 4 * n_floats
    expected_m = (n_bits + 7) // 8
    blob = body[hlen:]
    if header.get("weight_bytes") != expected_w or header.get("mask_bits") != n_bits:
        raise CheckpointLengthError("header size fields disagree with declared layer shapes")
    if len(blob) != expected_w + expected_m:
        raise CheckpointLengthError(
            f"blob holds {len(blob)} bytes, header implies {expected_w + expected_m}")

    floats = np.frombuffer(blob[:expected_w], dtype="<f4")
    bits = np.unpackbits(np.frombuffer(blob[expected_w:], dtype=np.uint8), bitorder="little")[:n_bits]
    fpos = bpos = 0
    out_layers = []
    for layer, meta in layers:
        for pname, shape in meta["params"]:
            size = int(np.prod(shape))
            layer.params[pname] = floats[fpos:fpos + size].astype(np.float32).reshape(shape)
            m = bits[bpos:bpos + size].astype(bool).reshape(shape)
            if m.any():
                layer.frozen[pname] = m
            fpos += size
            bpos += size
        for bname, shape in meta["buffers"]:
            size = int(np.prod(shape))
            layer.buffers[bname] = floats[fpos:fpos + size].astype(np.float32).reshape(shape)
            fpos += size
        out_layers.append(layer)
    # Network() re-validates composition, including num_classes vs the classifier.
    return Network(out_layers, header["input_shape"], header["num_classes"], header["rng_seed"],
                   header.get("morph_log"), header.get("prune_log"), header.get("lineage"))


def load_checkpoint(path) -> Network:
    return decode(Path(path).read_bytes())
