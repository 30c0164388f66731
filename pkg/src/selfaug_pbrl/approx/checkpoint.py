"""Network checkpoints: one ``.ckpt`` file per network.

The file is an uncompressed NumPy ``.npz`` archive holding a JSON header
(format version, MLP spec, optional extra metadata) and the parameters as a
single flat float64 array, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .adam import AdamState
from .mlp import MLP, MLPSpec

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _pack(arrays):
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)


def _unpack(flat, shapes):
    out, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(flat[offset : offset + size].reshape(shape).copy())
        offset += size
    if offset != flat.size:
        raise CheckpointError("flat parameter array does not match the spec")
    return out


def save_network(path, net: MLP, adam: AdamState | None = None, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": FORMAT_VERSION, "spec": net.spec.to_dict(), "meta": meta or {}}
    arrays = {"params": _pack(net.params)}
    if adam is not None:
        header["adam"] = {
            "step": adam.step,
            "lr": adam.lr,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
        }
        arrays["adam_m"] = _pack(adam.m)
        arrays["adam_v"] = _pack(adam.v)
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_network(path) -> tuple[MLP, AdamState | None, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode())
            flat = data["params"]
            m = data["adam_m"] if "adam_m" in data else None
            v = data["adam_v"] if "adam_v" in data else None
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    spec = MLPSpec(**header["spec"])
    shapes = spec.param_shapes()
    net = MLP(spec, _unpack(flat, shapes))
    adam = None
    if "adam" in header and m is not None:
        adam = AdamState(m=_unpack(m, shapes), v=_unpack(v, shapes), **header["adam"])
    return net, adam, header.get("meta", {})
