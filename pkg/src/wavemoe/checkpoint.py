"""Self-describing binary checkpoints.

Layout (integers little-endian)::

    b"WMOECKPT"  u32 version  u32 header_len  header (UTF-8 JSON, sorted keys)
    repeated block:
        u16 name_len  name (UTF-8)  u8 ndim  ndim * u32 dims  prod(dims) * f32 data
    u32 crc32 of every preceding byte

The header carries ``format_version``, ``model_config``, ``train_config``,
``step``, ``rng_state`` (numpy bit-generator state), ``running`` loss
statistics and ``n_blocks``.  Block names are ``param:<name>``,
``adam_m:<name>`` and ``adam_v:<name>``.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .exceptions import ConfigMismatchError, FormatError, VersionMismatchError
from .model import ModelConfig, WaveMoE

MAGIC = b"WMOECKPT"
VERSION = 1


def _write_block(buf, name: str, tensor: torch.Tensor) -> None:
    arr = tensor.detach().cpu().numpy().astype("<f4")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def save_checkpoint(state, path, train_config=None) -> None:
    """Serialize a ``TrainState`` (weights, moments, step, rng, running stats)."""
    model: WaveMoE = state.model
    blocks = []
    for name, p in model.named_parameters():
        blocks.append((f"param:{name}", p))
    for name, _ in model.named_parameters():
        if name in state.exp_avg:
            blocks.append((f"adam_m:{name}", state.exp_avg[name]))
            blocks.append((f"adam_v:{name}", state.exp_avg_sq[name]))
    header = {
        "format_version": VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "step": state.step,
        "rng_state": state.rng.bit_generator.state if state.rng is not None else None,
        "running": state.running,
        "n_blocks": len(blocks),
    }
    meta = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<II", VERSION, len(meta)) + meta)
    for name, t in blocks:
        _write_block(buf, name, t)
    body = buf.getvalue()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint, returning ``(header, blocks)``."""
    data = Path(path).read_bytes()
    cur = _Cursor(data, path)
    if cur.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = cur.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    if len(data) < 4 or zlib.crc32(data[:-4]) != struct.unpack("<I", data[-4:])[0]:
        raise FormatError(f"{path}: checksum mismatch (corrupt or truncated file)")
    try:
        header = json.loads(cur.take(hlen))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header") from exc
    blocks = {}
    for _ in range(header.get("n_blocks", 0)):
        (nlen,) = cur.unpack("<H")
        name = cur.take(nlen).decode()
        (ndim,) = cur.unpack("<B")
        shape = cur.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(cur.take(4 * count), dtype="<f4").reshape(shape).copy()
    if cur.pos != len(data) - 4:
        raise FormatError(f"{path}: unexpected trailing bytes")
    return header, blocks


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Rebuild the ``TrainState`` stored at ``path``.

    Raises ``ConfigMismatchError`` when ``expected_config`` differs from the
    stored configuration or a block does not fit the model.
    """
    from .train import TrainConfig, TrainState

    header, blocks = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(header["model_config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: header lacks a valid model_config") from exc
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        diff = {k: (v, config.to_dict().get(k)) for k, v in expected_config.to_dict().items()
                if config.to_dict().get(k) != v}
        raise ConfigMismatchError(f"{path}: checkpoint config differs (expected, stored): {diff}")
    model = WaveMoE(config)
    m, v = {}, {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            arr = blocks.get(f"param:{name}")
            if arr is None or tuple(arr.shape) != tuple(p.shape):
                raise ConfigMismatchError(f"{path}: parameter {name} missing or misshapen")
            p.copy_(torch.from_numpy(arr))
            if f"adam_m:{name}" in blocks:
                m[name] = torch.from_numpy(blocks[f"adam_m:{name}"].copy())
                v[name] = torch.from_numpy(blocks[f"adam_v:{name}"].copy())
    rng = np.random.default_rng()
    if header.get("rng_state") is not None:
        rng.bit_generator.state = header["rng_state"]
    state = TrainState(model=model, step=int(header["step"]), exp_avg=m, exp_avg_sq=v,
                       rng=rng, running=dict(header.get("running") or {}))
    if not m:
        state.exp_avg = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
        state.exp_avg_sq = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    tc = header.get("train_config")
    state.train_config = TrainConfig.from_dict(tc) if tc else None
    return state
