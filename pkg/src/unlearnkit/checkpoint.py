"""Binary checkpoints for models, masks, adapters, and trainable flags.

Layout: magic "PLUN", format version (u32 LE), a length-prefixed UTF-8
model descriptor (JSON, so the architecture can be rebuilt), an entry
count, then per-entry records: length-prefixed name, length-prefixed role
tag ("param" | "mask" | "lora_A" | "lora_B" | "flag"), u32 ndim + dims,
and raw little-endian float32 values. Round trips are bit-exact for
float32 models.
"""

import json
import struct

import numpy as np

from .errors import ConfigError, FormatError, IntegrityError
from .layers import MultiHeadAttention
from .lora import LoraAdapter
from .models import Model, build_from_descriptor

MAGIC = b"PLUN"
VERSION = 1
ROLES = ("param", "mask", "lora_A", "lora_B", "flag")


def _write_str(f, s):
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _write_entry(f, name, role, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    _write_str(f, name)
    _write_str(f, role)
    f.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.tobytes())


def _collect_entries(model):
    entries = []
    params = list(model.named_params())
    for path, p in params:
        entries.append((path, "param", p.value))
    for path, p in params:
        if p.mask is not None:
            entries.append((path, "mask", p.mask.astype(np.float32)))
    for path, adapter in model.named_adapters():
        entries.append((path, "lora_A", adapter.a.value))
        entries.append((path, "lora_B", adapter.b.value))
        entries.append((f"{path}:lora_alpha", "flag", np.array([adapter.alpha], dtype=np.float32)))
    for path, p in params:
        entries.append((path, "flag", np.array([1.0 if p.trainable else 0.0], dtype=np.float32)))
    return entries


def save_checkpoint(model, path):
    if model.descriptor is None:
        raise ConfigError("model has no build descriptor; cannot checkpoint")
    entries = _collect_entries(model)
    header = dict(model.descriptor)
    header["name"] = model.name
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        _write_str(f, json.dumps(header, sort_keys=True))
        f.write(struct.pack("<I", len(entries)))
        for name, role, arr in entries:
            _write_entry(f, name, role, arr)


def _read_exact(f, n):
    raw = f.read(n)
    if len(raw) != n:
        raise IntegrityError(f"checkpoint truncated: wanted {n} bytes, got {len(raw)}")
    return raw


def _read_u32(f):
    return struct.unpack("<I", _read_exact(f, 4))[0]


def _read_str(f):
    n = _read_u32(f)
    return _read_exact(f, n).decode("utf-8")


def _read_entry(f):
    name = _read_str(f)
    role = _read_str(f)
    if role not in ROLES:
        raise FormatError(f"unknown entry role {role!r}")
    ndim = _read_u32(f)
    shape = tuple(_read_u32(f) for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    arr = np.frombuffer(_read_exact(f, 4 * count), dtype="<f4").reshape(shape)
    return name, role, arr


def load_checkpoint(path):
    """Rebuild a Model from a checkpoint file, including masks, adapters,
    and trainable flags."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version = _read_u32(f)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        header = json.loads(_read_str(f))
        count = _read_u32(f)
        entries = [_read_entry(f) for _ in range(count)]

    header.pop("name", None)
    model = build_from_descriptor(header)
    lora_parts = {}
    for name, role, arr in entries:
        if role == "param":
            layer, pname = model.param_owner(name)
            p = layer.params[pname]
            if p.value.shape != arr.shape:
                raise IntegrityError(f"parameter '{name}' shape {arr.shape} != model shape {p.value.shape}")
            p.value = arr.astype(np.float32).copy()
            p.grad = np.zeros_like(p.value)
        elif role == "mask":
            layer, pname = model.param_owner(name)
            p = layer.params[pname]
            if p.value.shape != arr.shape:
                raise IntegrityError(f"mask '{name}' shape {arr.shape} != parameter shape {p.value.shape}")
            p.mask = arr != 0.0
            p.mask_axis = 1 if (isinstance(layer, MultiHeadAttention) and pname == "wo") else 0
        elif role == "lora_A":
            lora_parts.setdefault(name, {})["a"] = arr.astype(np.float32).copy()
        elif role == "lora_B":
            lora_parts.setdefault(name, {})["b"] = arr.astype(np.float32).copy()
        elif role == "flag":
            if name.endswith(":lora_alpha"):
                lora_parts.setdefault(name[: -len(":lora_alpha")], {})["alpha"] = float(arr[0])
            else:
                layer, pname = model.param_owner(name)
                layer.params[pname].trainable = bool(arr[0])

    for target, parts in lora_parts.items():
        if set(parts) != {"a", "b", "alpha"}:
            raise IntegrityError(f"incomplete adapter record for '{target}'")
        layer, pname = model.param_owner(target)
        rank = parts["a"].shape[0]
        layer.adapters[pname] = LoraAdapter(parts["a"], parts["b"], rank, parts["alpha"], target)
    return model
