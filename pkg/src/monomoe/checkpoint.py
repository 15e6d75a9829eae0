"""Binary checkpoint container.

Layout: magic "MMOE" | format version (u32 LE) | meta length (u64 LE) |
meta JSON | tensor payloads | CRC32 (u32 LE) over everything before it.
The meta block holds the model config, bookkeeping extras, and a
manifest of (name, group, dtype, shape, offset) entries; payload bytes
round-trip bit-exactly. Writes are atomic (temp file then rename).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .model import MMoEModel, ModelConfig, param_spec

MAGIC = b"MMOE"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, corrupt, or incompatible checkpoint file."""


def _manifest_entry(name: str, group: str, arr: np.ndarray, offset: int) -> dict:
    return {"name": name, "group": group, "dtype": "f4",
            "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes}


def save_checkpoint(model: MMoEModel, path, optimizer=None, extra: dict | None = None) -> None:
    """Serialize model (and optional optimizer state) to `path`."""
    entries = []
    blobs = []
    offset = 0
    for name, t, group in model.parameters():
        arr = np.ascontiguousarray(t.data, dtype=np.float32)
        entries.append(_manifest_entry(name, group, arr, offset))
        blobs.append(arr.tobytes())
        offset += arr.nbytes

    extra = dict(extra or {})
    if optimizer is not None:
        extra["optimizer_steps"] = optimizer.step_count
        for kind, store in (("m", optimizer.m), ("v", optimizer.v)):
            for name in sorted(store):
                arr = np.ascontiguousarray(store[name], dtype=np.float32)
                entries.append(_manifest_entry(f"opt.{kind}.{name}", "OPTIMIZER",
                                               arr, offset))
                blobs.append(arr.tobytes())
                offset += arr.nbytes

    meta = {"format": FORMAT_VERSION,
            "model_config": model.cfg.to_dict(),
            "extra": extra,
            "tensors": entries}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()

    body = bytearray()
    body += MAGIC
    body += struct.pack("<I", FORMAT_VERSION)
    body += struct.pack("<Q", len(meta_bytes))
    body += meta_bytes
    for blob in blobs:
        body += blob
    body += struct.pack("<I", zlib.crc32(bytes(body)))

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(bytes(body))
    os.replace(tmp, path)


def _config_diff(stored: dict, expected: dict) -> str:
    lines = []
    for key in sorted(set(stored) | set(expected)):
        a, b = stored.get(key), expected.get(key)
        if a != b:
            lines.append(f"  {key}: checkpoint={a} expected={b}")
    stored_shapes = {n: tuple(s) for n, s, _, _ in param_spec(ModelConfig.from_dict(stored))}
    expect_shapes = {n: tuple(s) for n, s, _, _ in param_spec(ModelConfig.from_dict(expected))}
    for name in sorted(set(stored_shapes) | set(expect_shapes)):
        a, b = stored_shapes.get(name), expect_shapes.get(name)
        if a != b:
            lines.append(f"  tensor {name}: checkpoint shape {a} vs expected {b}")
    return "\n".join(lines)


def load_checkpoint(path, expect_config: ModelConfig | None = None):
    """Reconstruct (model, optimizer_state_dict | None, extra) from `path`.

    `expect_config`, when given, must match the stored config; a mismatch
    is rejected with a per-field and per-tensor shape diff.
    """
    from .training import AdamWState

    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise CheckpointError(f"truncated checkpoint: {len(raw)} bytes at offset 0")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r} at offset 0")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version} at offset 4")
    meta_len = struct.unpack_from("<Q", raw, 8)[0]
    meta_start = 16
    payload_start = meta_start + meta_len
    if payload_start + 4 > len(raw):
        raise CheckpointError(f"truncated meta block: expected {meta_len} bytes "
                              f"at offset {meta_start}")
    crc_expect = struct.unpack_from("<I", raw, len(raw) - 4)[0]
    crc_actual = zlib.crc32(raw[:-4])
    if crc_expect != crc_actual:
        raise CheckpointError(
            f"CRC mismatch over bytes 0..{len(raw) - 4}: stored {crc_expect:#010x}, "
            f"computed {crc_actual:#010x}")
    try:
        meta = json.loads(raw[meta_start:payload_start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"unreadable meta block at offset {meta_start}: {err}")

    stored_cfg = meta["model_config"]
    if expect_config is not None and expect_config.to_dict() != stored_cfg:
        raise CheckpointError("checkpoint does not match the requested config:\n"
                              + _config_diff(stored_cfg, expect_config.to_dict()))

    cfg = ModelConfig.from_dict(stored_cfg)
    model = MMoEModel(cfg, seed=0)
    spec = {name: (tuple(shape), group) for name, shape, group, _ in param_spec(cfg)}

    opt_m, opt_v = {}, {}
    seen = set()
    for entry in meta["tensors"]:
        name = entry["name"]
        start = payload_start + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(raw) - 4:
            raise CheckpointError(f"tensor {name} payload truncated at offset {start}")
        arr = np.frombuffer(raw, dtype=np.float32, count=entry["nbytes"] // 4,
                            offset=start).reshape(entry["shape"]).copy()
        if name.startswith("opt.m.") or name.startswith("opt.v."):
            target = opt_m if name[4] == "m" else opt_v
            target[name[6:]] = arr
            continue
        if name not in spec:
            raise CheckpointError(f"manifest entry {name!r} is not a model parameter")
        shape, group = spec[name]
        if tuple(entry["shape"]) != shape:
            raise CheckpointError(f"tensor {name}: stored shape {entry['shape']} "
                                  f"vs config shape {list(shape)}")
        if entry["group"] != group:
            raise CheckpointError(f"tensor {name}: stored group {entry['group']} "
                                  f"vs expected {group}")
        model.param_by_name(name).data[...] = arr
        seen.add(name)

    missing = set(spec) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)[:4]}...")

    optimizer = None
    if opt_m or opt_v or "optimizer_steps" in meta["extra"]:
        optimizer = AdamWState(m=opt_m, v=opt_v,
                               step_count=meta["extra"].get("optimizer_steps", 0))
    return model, optimizer, meta["extra"]
