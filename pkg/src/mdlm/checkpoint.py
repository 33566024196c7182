"""Binary checkpoint format.

Layout (little-endian throughout)::

    b"MDLM"  u32 version  u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 rank, u64 dims[rank], f32 values[prod(dims)]
    u32 crc32 of every preceding byte

The model architecture travels as the tensor ``meta.model_config``.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from mdlm.config import ModelConfig
from mdlm.decoder import LoRAAdapter
from mdlm.model import AudioLanguageModel
from mdlm.nn_core import LoRAPair

MAGIC = b"MDLM"
VERSION = 1
CONFIG_TENSOR = "meta.model_config"
LORA_META = "meta.lora"  # [rank, alpha, dropout, target_set index]
_TARGET_SETS = ("qv", "all_linear")


class CheckpointError(ValueError):
    """Malformed checkpoint or checksum mismatch."""


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        arr = np.asarray(value, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        if arr.ndim > 0xFF:
            raise CheckpointError(f"{name}: rank {arr.ndim} too large")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an MDLM checkpoint (bad magic)")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    version, count = struct.unpack_from("<II", payload, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", payload, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", payload, pos)
            pos += 8 * rank
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if pos + 4 * n > len(payload):
                raise CheckpointError(f"{name}: truncated tensor data")
            tensors[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(payload):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors


def save(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)


def model_tensors(model: AudioLanguageModel) -> dict[str, np.ndarray]:
    tensors = {CONFIG_TENSOR: np.asarray(model.cfg.to_vector(), dtype=np.float32)}
    adapter = model.decoder.adapter
    if adapter is not None:
        tensors[LORA_META] = np.asarray(
            [adapter.rank, adapter.alpha, adapter.dropout, _TARGET_SETS.index(adapter.target_set)], dtype=np.float32)
    tensors.update(model.state_dict())
    return tensors


def model_from_tensors(tensors: dict[str, np.ndarray]) -> AudioLanguageModel:
    if CONFIG_TENSOR not in tensors:
        raise CheckpointError(f"checkpoint lacks {CONFIG_TENSOR}")
    cfg = ModelConfig.from_vector(tensors[CONFIG_TENSOR])
    model = AudioLanguageModel(cfg, seed=0)
    if LORA_META in tensors:
        rank, alpha, dropout, target = tensors[LORA_META].tolist()
        adapter = LoRAAdapter(_TARGET_SETS[int(target)], int(rank), float(alpha), float(dropout))
        rng = np.random.default_rng(0)
        maps = model.decoder.linear_maps()
        for name in tensors:
            if name.startswith("decoder.") and name.endswith(".lora.A"):
                lin_name = name[len("decoder."):-len(".lora.A")]
                lin = maps[lin_name]
                adapter.pairs[lin_name] = LoRAPair(lin.in_dim, lin.out_dim, int(rank), float(alpha), float(dropout), rng)
        model.decoder.apply_lora(adapter)
    state = {k: v for k, v in tensors.items() if not k.startswith("meta.")}
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    return model.eval()


def save_model(path: str | Path, model: AudioLanguageModel) -> None:
    save(path, model_tensors(model))


def load_model(path: str | Path) -> AudioLanguageModel:
    return model_from_tensors(load(path))
