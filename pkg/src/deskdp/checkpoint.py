"""Training checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   b"DSKDPCK\\0"
    version    u32
    hlen       u32
    header     hlen bytes of UTF-8 JSON: step, config digest, resolved config,
               loss-scale state and a tensor table (name, group, shape, offset)
    blob       raw float32 buffers referenced by the table
    checksum   32-byte SHA-256 of everything above

``group`` is ``master`` for FP32 parameters or ``velocity`` for momentum
buffers.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from deskdp.config import Config, config_digest, parse_config_dict
from deskdp.errors import CheckpointError, CheckpointFormatError, DigestError
from deskdp.precision import LossScaleState
from deskdp.tensor import FP32, Tensor

MAGIC = b"DSKDPCK\0"
VERSION = 1
_PREFIX = struct.Struct("<8sII")
_F32 = np.dtype("<f4")


@dataclass
class TrainState:
    step: int  # last completed step (1-based); 0 means untrained
    config: Config
    master: dict[str, Tensor]
    velocity: dict[str, Tensor]
    loss_scale: LossScaleState


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    table, blobs, offset = [], [], 0
    for group, tensors in (("master", state.master), ("velocity", state.velocity)):
        for name in sorted(tensors):
            raw = tensors[name].data.astype(_F32).tobytes()
            table.append({"name": name, "group": group, "shape": list(tensors[name].shape), "offset": offset,
                          "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps({
        "step": state.step,
        "digest": config_digest(state.config),
        "config": state.config.model_dump(),
        "loss_scale": dataclasses.asdict(state.loss_scale),
        "tensors": table,
    }, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def load_checkpoint(path, expect: Config | None = None, force: bool = False) -> TrainState:
    """Read a checkpoint. With ``expect`` the stored config digest must match unless ``force``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc.strerror}") from None
    if len(raw) < _PREFIX.size + 32:
        raise CheckpointFormatError(f"{path}: truncated ({len(raw)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}, not a checkpoint")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: format version {version}, this build reads {VERSION}")
    body, checksum = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointFormatError(f"{path}: checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(body[_PREFIX.size : _PREFIX.size + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    config = parse_config_dict(header["config"])
    if expect is not None and config_digest(expect) != header["digest"] and not force:
        raise DigestError(f"{path}: config digest {header['digest'][:12]} does not match the supplied "
                          f"config {config_digest(expect)[:12]}; pass --force to load anyway")
    if expect is not None:
        config = expect
    blob = body[_PREFIX.size + hlen :]
    groups: dict[str, dict[str, Tensor]] = {"master": {}, "velocity": {}}
    for entry in header["tensors"]:
        lo, hi = entry["offset"], entry["offset"] + entry["nbytes"]
        if hi > len(blob):
            raise CheckpointFormatError(f"{path}: tensor {entry['name']} runs past the end of the data")
        arr = np.frombuffer(blob[lo:hi], dtype=_F32).reshape(entry["shape"])
        groups[entry["group"]][entry["name"]] = Tensor(arr.astype(np.float32), FP32)
    return TrainState(header["step"], config, groups["master"], groups["velocity"],
                      LossScaleState(**header["loss_scale"]))
