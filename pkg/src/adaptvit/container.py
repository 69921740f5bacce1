"""Binary containers for checkpoints (``PRNC``) and datasets (``PRDS``).

Checkpoint layout, all integers little-endian::

    b"PRNC"                 magic
    u32  version            (1)
    u32  header_len
    header_len bytes        UTF-8 JSON: {"config": {...}, "tensors": [[name, shape], ...],
                                         "meta": {...}}
    float64 LE data         each tensor in header order, row-major

A selector checkpoint uses the same container: its tensors are prefixed
``actor.``/``critic.`` and ``meta`` records the network sizes and strategy.
Both can live in one file.

Dataset layout::

    b"PRDS"  u32 version (1)  u32 count  u32 height  u32 width  u32 channels
    u32 label_width (1)
    float32 LE pixels       count * height * width * channels
    int32 LE labels         count * label_width
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

CKPT_MAGIC = b"PRNC"
DATA_MAGIC = b"PRDS"
VERSION = 1


class FormatError(ValueError):
    pass


def save_tensors(path, config: dict, tensors: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    names = list(tensors)
    header = {"config": config, "tensors": [[n, list(np.shape(tensors[n]))] for n in names],
              "meta": meta or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", VERSION, len(hb)) + hb)
        for n in names:
            f.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_tensors(path) -> Tuple[dict, Dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    header = json.loads(raw[12: 12 + hlen])
    off = 12 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        tensors[name] = arr.reshape(shape).astype(np.float64)
        off += 8 * count
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return header["config"], tensors, header["meta"]


def save_weights(path, weights, selector=None, meta: dict | None = None) -> None:
    from .elastic import tensor_names
    tensors = {n: weights.tensors[n] for n in tensor_names(weights.config)}
    meta = dict(meta or {})
    if selector is not None:
        tensors.update(selector.params)
        meta["selector"] = {"state_dim": selector.state_dim, "action_dim": selector.action_dim,
                            "hidden": selector.hidden, "state_mode": selector.state_mode}
    save_tensors(path, weights.config.to_dict(), tensors, meta)


def load_weights(path):
    from .elastic import ElasticConfig, WeightStore, tensor_names
    cfg_d, tensors, meta = load_tensors(path)
    cfg = ElasticConfig.from_dict(cfg_d)
    ws = WeightStore(cfg, {n: tensors[n] for n in tensor_names(cfg)})
    return ws, _selector_from(tensors, meta), meta


def save_selector(path, selector, config, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["selector"] = {"state_dim": selector.state_dim, "action_dim": selector.action_dim,
                        "hidden": selector.hidden, "state_mode": selector.state_mode}
    save_tensors(path, config.to_dict(), selector.params, meta)


def load_selector(path):
    _, tensors, meta = load_tensors(path)
    nets = _selector_from(tensors, meta)
    if nets is None:
        raise FormatError(f"{path}: no selector tensors")
    return nets, meta


def _selector_from(tensors, meta):
    from .selector import SelectorNets
    info = meta.get("selector")
    if not info:
        return None
    nets = SelectorNets.__new__(SelectorNets)
    nets.state_dim, nets.action_dim, nets.hidden = info["state_dim"], info["action_dim"], info["hidden"]
    nets.state_mode = info.get("state_mode", "k_mean")
    nets.actor = {k: v for k, v in tensors.items() if k.startswith("actor.")}
    nets.critic = {k: v for k, v in tensors.items() if k.startswith("critic.")}
    return nets


def save_dataset(path, images: np.ndarray, labels: np.ndarray) -> None:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[..., None]
    n, h, w, c = x.shape
    y = np.asarray(labels).reshape(n, -1)
    with open(path, "wb") as f:
        f.write(DATA_MAGIC + struct.pack("<6I", VERSION, n, h, w, c, y.shape[1]))
        f.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(y, dtype="<i4").tobytes())


def load_dataset(path):
    raw = Path(path).read_bytes()
    if raw[:4] != DATA_MAGIC:
        raise FormatError(f"{path}: not a dataset (bad magic)")
    version, n, h, w, c, lw = struct.unpack_from("<6I", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 28
    npx = n * h * w * c
    x = np.frombuffer(raw, dtype="<f4", count=npx, offset=off).reshape(n, h, w, c)
    off += 4 * npx
    y = np.frombuffer(raw, dtype="<i4", count=n * lw, offset=off).reshape(n, lw)
    if off + 4 * n * lw != len(raw):
        raise FormatError(f"{path}: size mismatch")
    x = x.astype(np.float64)
    if c == 1:
        x = x[..., 0]
    return x, (y[:, 0] if lw == 1 else y).astype(np.int64)
