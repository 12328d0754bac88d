"""Patch-transformer backbone: linear patch embedding, learnable positional
table, pre-norm attention/FFN blocks, mean-pooled output, and a linear
projection head used only by the contrastive objective.

Checkpoint format ``UFCK`` (little-endian, no padding):
    magic ``UFCK`` | u32 version=1 | u32 config-JSON length | config JSON |
    u32 tensor count | per tensor: u16 name length, name, u8 rank,
    rank * u64 dims, float32 payload.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .config import EncoderConfig
from .data import MultichannelWindow, Window
from .errors import (
    CheckpointMagicError,
    CheckpointMismatchError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    NumericError,
    ShapeError,
)

UFCK_MAGIC = b"UFCK"
UFCK_VERSION = 1


@dataclass(frozen=True)
class EmbeddingBatch:
    """Pooled representations, plus per-token states when requested."""

    pooled: torch.Tensor  # (batch, d) or (batch, channels * d)
    tokens: torch.Tensor | None = None  # (batch, tokens, d)


class SelfAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.model_dim
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.head_dim
        self.w_query = nn.Linear(d, d)
        self.w_key = nn.Linear(d, d)
        self.w_value = nn.Linear(d, d)
        self.w_out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, attn_sink: list | None = None) -> torch.Tensor:
        b, t, d = x.shape
        h, hd = self.num_heads, self.head_dim

        def heads(proj: nn.Linear) -> torch.Tensor:
            return proj(x).view(b, t, h, hd).transpose(1, 2)  # (b, h, t, hd)

        q, k, v = heads(self.w_query), heads(self.w_key), heads(self.w_value)
        scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
        weights = torch.softmax(scores, dim=-1)
        if attn_sink is not None:
            attn_sink.append(weights.detach())
        out = (weights @ v).transpose(1, 2).reshape(b, t, d)
        return self.w_out(out)


class EncoderBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d, f = cfg.model_dim, cfg.ffn_dim
        self.norm_attn = nn.LayerNorm(d)
        self.attn = SelfAttention(cfg)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, f), nn.GELU(), nn.Linear(f, d))

    def forward(self, x: torch.Tensor, attn_sink: list | None = None) -> torch.Tensor:
        x = x + self.attn(self.norm_attn(x), attn_sink)
        return x + self.ffn(self.norm_ffn(x))


class SignalEncoder(nn.Module):
    """Backbone mapping (batch, input_length) signals to (batch, d) embeddings."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Linear(cfg.patch_size, cfg.model_dim)
        self.pos_table = nn.Parameter(torch.zeros(cfg.num_tokens, cfg.model_dim))
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.num_layers))
        self.final_norm = nn.LayerNorm(cfg.model_dim)
        self.project_head = nn.Linear(cfg.model_dim, cfg.model_dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.pos_table.dtype

    def forward(
        self, x: torch.Tensor, attn_sink: list | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (tokens, pooled); pooled is the token mean after the final norm."""
        if x.ndim != 2:
            raise ShapeError(f"expected (batch, length) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.cfg.input_length:
            raise ShapeError(
                f"input length {x.shape[1]} != configured {self.cfg.input_length}"
            )
        if not torch.isfinite(x).all():
            raise NumericError("encoder input contains non-finite values")
        b = x.shape[0]
        patches = x.reshape(b, self.cfg.num_tokens, self.cfg.patch_size)
        z = self.patch_proj(patches) + self.pos_table
        for block in self.blocks:
            z = block(z, attn_sink)
        z = self.final_norm(z)
        return z, z.mean(dim=1)

    def project(self, pooled: torch.Tensor) -> torch.Tensor:
        """Contrastive projection head; bypassed by downstream adapters."""
        return self.project_head(pooled)


def init_encoder(
    cfg: EncoderConfig, seed: int, dtype: torch.dtype = torch.float32
) -> SignalEncoder:
    """Fresh encoder with Normal(0, 0.02) weights, zero biases, unit norm gains.

    Deterministic in the seed: parameters are initialized in sorted name
    order from one generator.
    """
    model = SignalEncoder(cfg).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if ".norm" in name or name.startswith("final_norm"):
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.normal_(0.0, 0.02, generator=gen)
    return model


def count_parameters(model: nn.Module) -> int:
    """Exact learnable-value count (shape-only; independent of values)."""
    return sum(p.numel() for p in model.parameters())


def _stack_inputs(
    batch: Sequence[Window] | Sequence[MultichannelWindow] | np.ndarray,
) -> np.ndarray:
    """Normalize supported batch types to (batch, length) or (batch, channels, length)."""
    if isinstance(batch, np.ndarray):
        if batch.ndim not in (2, 3):
            raise ShapeError(f"array batch must be 2-D or 3-D, got shape {batch.shape}")
        return batch
    items = list(batch)
    if not items:
        raise ShapeError("empty batch")
    if isinstance(items[0], MultichannelWindow):
        channels = items[0].channels
        if any(mw.channels != channels for mw in items):
            raise ShapeError("multichannel batch must have a uniform channel count")
        return np.stack([mw.as_array() for mw in items])
    return np.stack([w.values for w in items])


def encode(
    model: SignalEncoder,
    batch: Sequence[Window] | Sequence[MultichannelWindow] | np.ndarray,
    chunk_size: int = 256,
    want_tokens: bool = False,
) -> EmbeddingBatch:
    """Inference-mode encoding.

    Univariate batches give pooled width d. Multichannel batches are encoded
    channel-independently and the per-channel pooled vectors concatenated in
    channel order (width channels * d).
    """
    array = _stack_inputs(batch)
    multichannel = array.ndim == 3
    x = torch.as_tensor(np.ascontiguousarray(array), dtype=model.dtype)
    if multichannel:
        b, c, length = x.shape
        x = x.reshape(b * c, length)
    pooled_chunks: list[torch.Tensor] = []
    token_chunks: list[torch.Tensor] = []
    with torch.no_grad():
        for start in range(0, x.shape[0], chunk_size):
            tokens, pooled = model(x[start : start + chunk_size])
            pooled_chunks.append(pooled)
            if want_tokens and not multichannel:
                token_chunks.append(tokens)
    pooled = torch.cat(pooled_chunks)
    if multichannel:
        pooled = pooled.reshape(b, c * model.cfg.model_dim)
    tokens = torch.cat(token_chunks) if token_chunks else None
    return EmbeddingBatch(pooled=pooled, tokens=tokens)


# ---------------------------------------------------------------------------
# UFCK checkpoints


def save_checkpoint(model: SignalEncoder, path: str | Path) -> None:
    """Serialize config and all parameters; float32 payload, sorted by name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg_json = json.dumps(
        dataclasses.asdict(model.cfg), sort_keys=True, separators=(",", ":")
    ).encode()
    state = model.state_dict()
    names = sorted(state)
    with open(path, "wb") as fh:
        fh.write(UFCK_MAGIC)
        fh.write(struct.pack("<I", UFCK_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            tensor = state[name].detach().to(torch.float32).contiguous()
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
            fh.write(tensor.numpy().astype("<f4").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.raw):
            raise CheckpointTruncatedError(
                f"{self.path}: needed {size} bytes at offset {self.offset}, "
                f"file has {len(self.raw)}"
            )
        chunk = self.raw[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_config(path: str | Path) -> EncoderConfig:
    """Parse only the config block (cheap; no tensor payloads)."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(4)
    if magic != UFCK_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {magic!r}")
    (version,) = reader.unpack("<I")
    if version != UFCK_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    (cfg_len,) = reader.unpack("<I")
    try:
        cfg_dict = json.loads(reader.take(cfg_len).decode())
        return EncoderConfig(**cfg_dict)
    except (ValueError, TypeError, ConfigurationError) as exc:
        raise CheckpointMismatchError(f"{path}: invalid config block: {exc}") from exc


def load_checkpoint(
    path: str | Path, expected_cfg: EncoderConfig | None = None
) -> SignalEncoder:
    """Rebuild a model bit-identically from a UFCK file.

    ``expected_cfg`` makes a config disagreement an error instead of a
    silent architecture switch.
    """
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(4)
    if magic != UFCK_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic {magic!r}")
    (version,) = reader.unpack("<I")
    if version != UFCK_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported version {version}")
    (cfg_len,) = reader.unpack("<I")
    try:
        cfg = EncoderConfig(**json.loads(reader.take(cfg_len).decode()))
    except (ValueError, TypeError, ConfigurationError) as exc:
        raise CheckpointMismatchError(f"{path}: invalid config block: {exc}") from exc
    if expected_cfg is not None and cfg != expected_cfg:
        raise CheckpointMismatchError(
            f"{path}: checkpoint config {cfg} != expected {expected_cfg}"
        )

    model = SignalEncoder(cfg)
    state = model.state_dict()
    (tensor_count,) = reader.unpack("<I")
    if tensor_count != len(state):
        raise CheckpointMismatchError(
            f"{path}: {tensor_count} tensors stored, model needs {len(state)}"
        )
    loaded: dict[str, torch.Tensor] = {}
    for _ in range(tensor_count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode()
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}Q") if rank else ()
        numel = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = reader.take(numel * 4)
        if name not in state:
            raise CheckpointMismatchError(f"{path}: unexpected tensor {name!r}")
        if tuple(state[name].shape) != tuple(int(d) for d in dims):
            raise CheckpointMismatchError(
                f"{path}: tensor {name!r} has dims {dims}, model expects "
                f"{tuple(state[name].shape)}"
            )
        array = np.frombuffer(payload, dtype="<f4").reshape([int(d) for d in dims])
        loaded[name] = torch.from_numpy(array.copy())
    if reader.offset != len(reader.raw):
        raise CheckpointMismatchError(
            f"{path}: {len(reader.raw) - reader.offset} trailing bytes"
        )
    missing = set(state) - set(loaded)
    if missing:
        raise CheckpointMismatchError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(loaded)
    return model
