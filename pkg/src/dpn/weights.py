"""DPNW weight files: trained parameters plus the run configuration that built them.

Layout (little-endian): magic ``DPNW``, version u32, model kind u8, config
JSON length u32 and bytes, then one block per parameter (name length u16,
UTF-8 name, rank u8, dims u32 each, f32 data), then CRC32 of everything
before it.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .config import RunConfig
from .envs import ACTION_DIM, ChecksumError, DatasetFormatError, atomic_write
from .networks import VAE, DpnModel, InverseModel, Module, UpnModel

MAGIC = b"DPNW"
VERSION = 1
MODEL_KINDS = ("dpn", "vae", "inverse", "upn")
_PREAMBLE = struct.Struct("<4sIBI")


class WeightsFormatError(DatasetFormatError):
    pass


def model_kind(model: Module) -> str:
    for kind, cls in (("dpn", DpnModel), ("vae", VAE), ("inverse", InverseModel), ("upn", UpnModel)):
        if isinstance(model, cls):
            return kind
    raise TypeError(f"cannot serialize {type(model).__name__}")


def build_model(kind: str, cfg: RunConfig, rng: np.random.Generator | None = None) -> Module:
    """Fresh model of ``kind`` with the shapes implied by ``cfg``."""
    rng = rng or np.random.default_rng(0)
    t, obs = cfg.train, cfg.render.obs_shape
    if kind == "dpn":
        return DpnModel(obs, ACTION_DIM, t.arch, t.n_p, t.alpha_init, rng)
    if kind == "upn":
        return UpnModel(obs, ACTION_DIM, t.arch, t.n_p, t.alpha_init, rng)
    if kind == "vae":
        return VAE(obs, t.arch, rng)
    if kind == "inverse":
        return InverseModel(obs, ACTION_DIM, t.arch, rng)
    raise ValueError(f"unknown model kind {kind!r}")


def encode_weights(model: Module, cfg: RunConfig) -> bytes:
    config = cfg.to_json().encode()
    parts = [_PREAMBLE.pack(MAGIC, VERSION, MODEL_KINDS.index(model_kind(model)), len(config)),
             config]
    for name, p in model.named_parameters().items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob))


def decode_weights(blob: bytes) -> tuple[str, RunConfig, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise WeightsFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _PREAMBLE.size + 4:
        raise WeightsFormatError("file too short")
    _, version, kind, n_config = _PREAMBLE.unpack_from(blob)
    if version != VERSION:
        raise WeightsFormatError(f"DPNW version {version}, this reader supports {VERSION}")
    if kind >= len(MODEL_KINDS):
        raise WeightsFormatError(f"unknown model kind code {kind}")
    end = len(blob) - 4
    (crc,) = struct.unpack_from("<I", blob, end)
    if crc != zlib.crc32(blob[:end]):
        raise ChecksumError("CRC32 mismatch")
    pos = _PREAMBLE.size
    cfg = RunConfig.from_json(blob[pos:pos + n_config].decode())
    pos += n_config
    arrays: dict[str, np.ndarray] = {}
    try:
        while pos < end:
            (n,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", blob, pos)
            shape = struct.unpack_from(f"<{rank}I", blob, pos + 1)
            pos += 1 + 4 * rank
            count = int(np.prod(shape))
            if pos + 4 * count > end:
                raise WeightsFormatError(f"parameter {name!r} runs past the end of the file")
            arrays[name] = np.frombuffer(blob, "<f4", count, pos).astype(np.float32).reshape(shape)
            pos += 4 * count
    except struct.error as err:
        raise WeightsFormatError(f"truncated parameter block: {err}") from None
    return MODEL_KINDS[kind], cfg, arrays


def save_weights(model: Module, cfg: RunConfig, path) -> None:
    atomic_write(path, encode_weights(model, cfg))


def load_weights(path) -> tuple[str, RunConfig, Module]:
    with open(path, "rb") as fh:
        kind, cfg, arrays = decode_weights(fh.read())
    model = build_model(kind, cfg)
    model.load_arrays(arrays)
    return kind, cfg, model
