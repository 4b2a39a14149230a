"""Binary checkpoint: JSON header, little-endian float64 payload, CRC-32 trailer.

Layout::

    b"MSPTCKPT" | uint32 header_len | header JSON | payload | uint32 crc32(payload)

The header holds the format version, the full run config, the dictionary,
the training iteration and a manifest of ``name -> shape -> byte offset``.
Optimizer momentum buffers are stored as extra ``opt.momentum.<param>``
entries so training can resume exactly.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import RunConfig
from .decoder import CharDictionary
from .errors import ConfigError, DataError
from .model import Model, param_shapes
from .training import TrainState

MAGIC = b"MSPTCKPT"
FORMAT_VERSION = 1
MOMENTUM_PREFIX = "opt.momentum."


class ChecksumError(DataError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    iteration: int = 0
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    def model(self) -> Model:
        return Model(self.config.model, self.params)

    def train_state(self) -> TrainState:
        return TrainState(self.iteration, {k: v.copy() for k, v in self.momentum.items()})


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries = list(ckpt.params.items())
    entries += [(MOMENTUM_PREFIX + k, v) for k, v in ckpt.momentum.items()]
    manifest = []
    chunks = []
    offset = 0
    for name, arr in entries:
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config_mod.to_dict(ckpt.config),
        "dictionary": CharDictionary.named(ckpt.config.model.dictionary).symbols,
        "iteration": int(ckpt.iteration),
        "manifest": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return (MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload
            + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def from_bytes(raw: bytes, source: str = "checkpoint") -> Checkpoint:
    if raw[:len(MAGIC)] != MAGIC:
        raise DataError(f"{source}: not a checkpoint file")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise DataError(f"{source}: truncated")
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: unreadable header ({exc})") from exc
    pos += hlen
    payload = raw[pos:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{source}: payload checksum mismatch; refusing to load")
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{source}: unsupported format version {header.get('format_version')}")
    try:
        cfg = config_mod.from_dict(header["config"])
    except ConfigError as exc:
        raise DataError(f"{source}: stored config invalid ({exc})") from exc
    if header.get("dictionary") != CharDictionary.named(cfg.model.dictionary).symbols:
        raise DataError(f"{source}: dictionary does not match the stored config")
    expected = param_shapes(cfg.model)
    params: dict[str, np.ndarray] = {}
    momentum: dict[str, np.ndarray] = {}
    for entry in header["manifest"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        base = name[len(MOMENTUM_PREFIX):] if name.startswith(MOMENTUM_PREFIX) else name
        if base not in expected or expected[base] != shape:
            raise DataError(f"{source}: manifest entry {name} {list(shape)} does not match "
                            f"the config-derived shapes")
        count = int(np.prod(shape)) if shape else 1
        end = off + 8 * count
        if end > len(payload):
            raise DataError(f"{source}: payload too short for {name}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).astype(np.float64)
        (momentum if name.startswith(MOMENTUM_PREFIX) else params)[base] = arr.reshape(shape)
    if set(params) != set(expected):
        raise DataError(f"{source}: missing parameters {sorted(set(expected) - set(params))}")
    return Checkpoint(cfg, params, int(header.get("iteration", 0)), momentum)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw, str(path))


def from_model(cfg: RunConfig, model: Model, state: TrainState | None = None) -> Checkpoint:
    return Checkpoint(cfg, {k: v.copy() for k, v in model.values().items()},
                      state.iteration if state else 0,
                      {k: v.copy() for k, v in state.momentum.items()} if state else {})
