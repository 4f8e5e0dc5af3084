"""Binary model container.

Layout, all integers little-endian:

    magic "FTMC" | version u32 | config u32 length + UTF-8 key=value lines |
    entry count u32 | entries

Entry: name (u16 length + UTF-8) | partition tag u8 (0=backbone, 1=ftm,
2=head, 3=buffer) | dtype u8 (0=f32) | ndim u8 | dims u32 each | raw
little-endian scalars.

Loading is all-or-nothing: any structural damage raises
CheckpointFormatError with the failing byte offset and leaves no model
behind.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .errors import CheckpointFormatError, ConfigError
from .network import ModelState, NetworkConfig, PART_BACKBONE, PART_FTM, PART_HEAD

MAGIC = b"FTMC"
VERSION = 1

_TAG_BY_PART = {PART_BACKBONE: 0, PART_FTM: 1, PART_HEAD: 2}
_PART_BY_TAG = {v: k for k, v in _TAG_BY_PART.items()}
_TAG_BUFFER = 3


def _config_text(config: NetworkConfig, meta: dict[str, str]) -> str:
    lines = [
        f"stem_channels={config.stem_channels}",
        f"stage_channels={','.join(map(str, config.stage_channels))}",
        f"blocks_per_stage={','.join(map(str, config.blocks_per_stage))}",
        f"num_classes={config.num_classes}",
        f"input_channels={config.input_channels}",
        f"ftm_sites={','.join(map(str, config.ftm_sites))}",
        f"image_size={config.image_size}",
    ]
    for key in sorted(meta):
        lines.append(f"meta.{key}={meta[key]}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> tuple[NetworkConfig, dict[str, str]]:
    fields: dict[str, str] = {}
    meta: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise ConfigError(f"malformed config line {line!r}")
        key, value = line.split("=", 1)
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            fields[key] = value

    def ints(key: str) -> tuple[int, ...]:
        raw = fields[key].strip()
        return tuple(int(v) for v in raw.split(",")) if raw else ()

    try:
        config = NetworkConfig(
            stem_channels=int(fields["stem_channels"]),
            stage_channels=ints("stage_channels"),
            blocks_per_stage=ints("blocks_per_stage"),
            num_classes=int(fields["num_classes"]),
            input_channels=int(fields["input_channels"]),
            ftm_sites=ints("ftm_sites"),
            image_size=int(fields["image_size"]),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad checkpoint config block: {exc}") from exc
    config.validate()
    return config, meta


def save_checkpoint(model: ModelState, path) -> None:
    """Serialize params, buffers, partition labels, and config losslessly."""
    chunks: list[bytes] = [MAGIC, struct.pack("<I", VERSION)]
    cfg_bytes = _config_text(model.config, model.meta).encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg_bytes)))
    chunks.append(cfg_bytes)

    entries: list[tuple[str, int, np.ndarray]] = []
    for name, tensor in model.params.items():
        entries.append((name, _TAG_BY_PART[model.partition[name]], tensor.data))
    for name, arr in model.buffers.items():
        entries.append((name, _TAG_BUFFER, arr))

    chunks.append(struct.pack("<I", len(entries)))
    for name, tag, arr in entries:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BBB", tag, 0, arr32.ndim))
        chunks.append(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        chunks.append(arr32.tobytes())

    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> ModelState:
    """Read a container back into a ModelState; inverse of save_checkpoint."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    cfg_len = r.u32("config length")
    cfg_start = r.pos
    try:
        cfg_text = r.take(cfg_len, "config block").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointFormatError("config block is not valid UTF-8", cfg_start)
    try:
        config, meta = _parse_config_text(cfg_text)
    except ConfigError as exc:
        raise CheckpointFormatError(str(exc), cfg_start)

    count = r.u32("entry count")
    seen: set[str] = set()
    order: list[tuple[str, int, np.ndarray]] = []
    for i in range(count):
        name_len = r.u16(f"entry {i} name length")
        name_at = r.pos
        name = r.take(name_len, f"entry {i} name").decode("utf-8")
        tag = r.u8(f"entry {i} partition tag")
        dtype = r.u8(f"entry {i} dtype")
        if dtype != 0:
            raise CheckpointFormatError(f"unknown dtype code {dtype}", r.pos - 1)
        ndim = r.u8(f"entry {i} ndim")
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"entry {i} dims"))
        n_scalars = int(np.prod(dims)) if ndim else 1
        raw = r.take(4 * n_scalars, f"entry {i} data")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        if tag != _TAG_BUFFER and tag not in _PART_BY_TAG:
            raise CheckpointFormatError(f"unknown partition tag {tag} for {name!r}", name_at)
        if name in seen:
            raise CheckpointFormatError(f"duplicate entry name {name!r}", name_at)
        seen.add(name)
        order.append((name, tag, arr))

    if r.pos != len(blob):
        raise CheckpointFormatError("trailing bytes after final entry", r.pos)

    param_tensors: dict[str, Tensor] = {}
    partition: dict[str, str] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, tag, arr in order:
        if tag == _TAG_BUFFER:
            buffers[name] = arr
        else:
            param_tensors[name] = Tensor(arr, requires_grad=True)
            partition[name] = _PART_BY_TAG[tag]

    return ModelState(config=config, params=param_tensors, buffers=buffers, partition=partition, meta=meta)
