"""Single-file checkpoints: a fixed header, the config text, a JSON metadata
blob, a (name, shape, offset) table, then little-endian float32 payloads.

Names are written sorted and metadata with sorted keys, so loading and
re-saving a checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PROAVCKP"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    step: int = 0
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def group(self, prefix):
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def to_bytes(ckpt):
    cfg = ckpt.config_text.encode("utf-8")
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = sorted(ckpt.tensors)
    # np.array keeps 0-d shapes; ascontiguousarray would promote scalars to 1-d
    arrays = [np.array(ckpt.tensors[n].detach().cpu().numpy(), dtype="<f4", order="C") for n in names]
    out = [MAGIC, struct.pack("<IQ", ckpt.version, ckpt.step)]
    out += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(meta)), meta]
    out.append(struct.pack("<I", len(names)))
    offset = 0
    for name, arr in zip(names, arrays):
        nb = name.encode("utf-8")
        out += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
        out += [struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<Q", offset)]
        offset += arr.nbytes
    out += [a.tobytes() for a in arrays]
    return b"".join(out)


def from_bytes(buf):
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        return _parse(buf)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc


def _parse(buf):
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    version, step = take("<IQ")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n,) = take("<I")
    cfg = buf[pos:pos + n].decode("utf-8")
    pos += n
    (n,) = take("<I")
    meta = json.loads(buf[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = take("<I")
    table = []
    for _ in range(count):
        (n,) = take("<H")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        (offset,) = take("<Q")
        table.append((name, shape, offset))
    base = pos
    tensors = {}
    for name, shape, offset in table:
        count_el = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count_el, offset=base + offset).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return Checkpoint(cfg, step, tensors, meta, version)


def save_checkpoint(path, ckpt):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    return from_bytes(path.read_bytes())


def tensor_digest(tensors):
    """Order-independent SHA-256 over named tensors, for tamper checks."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
