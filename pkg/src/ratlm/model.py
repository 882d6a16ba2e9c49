"""Decoder stack: embedding, pre-norm mixer/FFN blocks with residuals, output head.

Also the analytic parameter counter and the ``RATK`` checkpoint format.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .attention import AttnMixer
from .errors import ConfigError, DataError
from .rat import RATMixer
from .recurrence import RNNMixer, init_weight
from .rope import MODES, RopeSpec
from .tensor import cross_entropy, embedding_lookup, gelu, linear, rmsnorm

MIXER_KINDS = ("rat", "attn", "swa", "rnn")

# byte-level vocabulary: 256 byte values, then separator and pad
SEP_ID = 256
PAD_ID = 257
BYTE_VOCAB = 258


def _default_rope_modes() -> dict:
    return {"rat": "chunk_index", "attn": "token_index", "swa": "token_index"}


@dataclass
class ModelConfig:
    vocab_size: int = field(default=BYTE_VOCAB, metadata={"help": "vocabulary size (258 = bytes + separator + pad)"})
    d_model: int = field(default=128, metadata={"help": "model width D"})
    n_layers: int = field(default=2, metadata={"help": "number of mixer/FFN blocks"})
    n_heads: int = field(default=2, metadata={"help": "attention heads H"})
    head_dim: int = field(default=64, metadata={"help": "per-head width; n_heads * head_dim must equal d_model"})
    chunk_size: int = field(default=16, metadata={"help": "RAT chunk length L"})
    layer_pattern: list = field(default_factory=lambda: ["rat"], metadata={"help": "mixer kinds cycled over layers: rat, attn, swa, rnn"})
    window: int = field(default=1024, metadata={"help": "sliding-window size W for swa layers"})
    rope_modes: dict = field(default_factory=_default_rope_modes, metadata={"help": "rope mode per mixer kind: token_index, chunk_index or none"})
    rope_base: float = field(default=10000.0, metadata={"help": "rope base"})
    ffn_mult: int = field(default=4, metadata={"help": "FFN hidden width multiplier"})
    init_std: float = field(default=0.02, metadata={"help": "Gaussian init std for weight matrices"})
    tie_embeddings: bool = field(default=False, metadata={"help": "reuse the embedding as output head"})
    qk_mode: str = field(default="shared", metadata={"help": "RAT query/key allocation: shared or lowrank"})
    gate_rank: int | None = field(default=None, metadata={"help": "RAT low-rank gate rank (lowrank mode; default head_dim)"})

    def __post_init__(self):
        self.layer_pattern = list(self.layer_pattern)
        self.rope_modes = {**_default_rope_modes(), **dict(self.rope_modes)}
        self.validate()

    def validate(self) -> None:
        if self.n_heads * self.head_dim != self.d_model:
            raise ConfigError(f"n_heads*head_dim = {self.n_heads}*{self.head_dim} != d_model {self.d_model}")
        if self.chunk_size < 1:
            raise ConfigError(f"chunk_size must be >= 1, got {self.chunk_size}")
        if not self.layer_pattern:
            raise ConfigError("layer_pattern must be non-empty")
        for k in self.layer_pattern:
            if k not in MIXER_KINDS:
                raise ConfigError(f"unknown mixer kind {k!r}; expected one of {MIXER_KINDS}")
        for k, m in self.rope_modes.items():
            if k not in ("rat", "attn", "swa") or m not in MODES:
                raise ConfigError(f"bad rope_modes entry {k!r}: {m!r}")
        if self.window <= 0:
            raise ConfigError(f"window must be positive, got {self.window}")
        if self.vocab_size < 1 or self.n_layers < 1 or self.ffn_mult < 1:
            raise ConfigError("vocab_size, n_layers and ffn_mult must be positive")
        if self.qk_mode not in ("shared", "lowrank"):
            raise ConfigError(f"qk_mode must be shared or lowrank, got {self.qk_mode!r}")

    @property
    def layer_kinds(self) -> list[str]:
        return [self.layer_pattern[i % len(self.layer_pattern)] for i in range(self.n_layers)]

    def rope_spec(self, kind: str) -> RopeSpec:
        return RopeSpec(self.rope_modes.get(kind, "none"), self.rope_base, self.head_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class FFN(nn.Module):
    def __init__(self, d_model: int, mult: int, init_std: float):
        super().__init__()
        self.w_in = init_weight(d_model, mult * d_model, init_std)
        self.w_out = init_weight(mult * d_model, d_model, init_std)

    def forward(self, x):
        return linear(gelu(linear(x, self.w_in)), self.w_out)


def build_mixer(kind: str, cfg: ModelConfig) -> nn.Module:
    if kind == "rat":
        return RATMixer(cfg.d_model, cfg.n_heads, cfg.chunk_size, cfg.rope_spec("rat"), cfg.init_std, cfg.qk_mode, cfg.gate_rank)
    if kind == "attn":
        return AttnMixer(cfg.d_model, cfg.n_heads, None, cfg.rope_spec("attn"), cfg.init_std)
    if kind == "swa":
        return AttnMixer(cfg.d_model, cfg.n_heads, cfg.window, cfg.rope_spec("swa"), cfg.init_std)
    if kind == "rnn":
        return RNNMixer(cfg.d_model, cfg.init_std)
    raise ConfigError(f"unknown mixer kind {kind!r}")


class Block(nn.Module):
    def __init__(self, kind: str, cfg: ModelConfig):
        super().__init__()
        self.kind = kind
        self.norm_mix = nn.Parameter(torch.ones(cfg.d_model))
        self.mixer = build_mixer(kind, cfg)
        self.norm_ffn = nn.Parameter(torch.ones(cfg.d_model))
        self.ffn = FFN(cfg.d_model, cfg.ffn_mult, cfg.init_std)

    def forward(self, x):
        x = x + self.mixer(rmsnorm(x, self.norm_mix))
        return x + self.ffn(rmsnorm(x, self.norm_ffn))


class LanguageModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.randn(cfg.vocab_size, cfg.d_model) * cfg.init_std)
        self.blocks = nn.ModuleList(Block(k, cfg) for k in cfg.layer_kinds)
        self.norm_out = nn.Parameter(torch.ones(cfg.d_model))
        if not cfg.tie_embeddings:
            self.head = init_weight(cfg.d_model, cfg.vocab_size, cfg.init_std)

    def head_weight(self) -> torch.Tensor:
        return self.embed.t() if self.cfg.tie_embeddings else self.head

    def forward(self, tokens: torch.Tensor, pad_partial: bool = False) -> torch.Tensor:
        return model_forward(tokens, self, pad_partial)

    def loss(self, tokens: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        return cross_entropy(self(tokens), targets, mask)


def model_forward(tokens: torch.Tensor, model: LanguageModel, pad_partial: bool = False) -> torch.Tensor:
    """Logits ``[B, T, vocab]``.

    RAT layers need T to be a multiple of the chunk size; with ``pad_partial``
    the input is right-padded with the pad id and the extra positions dropped
    (harmless because every mixer is causal).
    """
    cfg = model.cfg
    t_len = tokens.shape[1]
    if pad_partial and "rat" in cfg.layer_kinds and t_len % cfg.chunk_size:
        extra = cfg.chunk_size - t_len % cfg.chunk_size
        pad = torch.full((tokens.shape[0], extra), min(PAD_ID, cfg.vocab_size - 1), dtype=tokens.dtype)
        return model_forward(torch.cat([tokens, pad], dim=1), model)[:, :t_len]
    x = embedding_lookup(model.embed, tokens)
    for blk in model.blocks:
        x = blk(x)
    return linear(rmsnorm(x, model.norm_out), model.head_weight())


# --------------------------------------------------------------------------
# parameter counting
# --------------------------------------------------------------------------

def mixer_params(kind: str, d: int, head_dim: int, qk_mode: str = "shared", gate_rank: int | None = None) -> int:
    if kind in ("attn", "swa", "rnn"):
        return 4 * d * d
    if kind == "rat":
        if qk_mode == "shared":
            return 4 * d * d + 2 * d * head_dim
        r = gate_rank or head_dim
        return 4 * d * d + 4 * d * r
    raise ConfigError(f"unknown mixer kind {kind!r}")


def count_params(cfg: ModelConfig) -> dict:
    """Closed-form parameter count with a per-layer breakdown."""
    d = cfg.d_model
    layers = []
    for i, kind in enumerate(cfg.layer_kinds):
        mix = mixer_params(kind, d, cfg.head_dim, cfg.qk_mode, cfg.gate_rank)
        ffn = 2 * cfg.ffn_mult * d * d
        layers.append({"layer": i, "kind": kind, "mixer": mix, "ffn": ffn, "norms": 2 * d, "total": mix + ffn + 2 * d})
    embedding = cfg.vocab_size * d
    head = 0 if cfg.tie_embeddings else d * cfg.vocab_size
    total = embedding + head + d + sum(layer["total"] for layer in layers)
    return {"embedding": embedding, "head": head, "final_norm": d, "layers": layers, "total": total}


# --------------------------------------------------------------------------
# checkpoint
# --------------------------------------------------------------------------

MAGIC = b"RATK"
FORMAT_VERSION = 1


def _canonical_json(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: LanguageModel, path) -> None:
    """Layout: magic, u32 version, u32 len + config JSON, u32 tensor count, then per
    tensor u16 name len, name, u8 ndim, u32 dims, little-endian f32 payload."""
    cfg_bytes = _canonical_json(model.cfg.to_dict())
    named = list(model.state_dict().items())
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(cfg_bytes)))
        f.write(cfg_bytes)
        f.write(struct.pack("<I", len(named)))
        for name, t in named:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.dim()))
            f.write(struct.pack(f"<{t.dim()}I", *t.shape))
            f.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"checkpoint {self.path} is truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> LanguageModel:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise DataError(f"bad checkpoint magic {magic!r} in {path}; expected {MAGIC.decode()!r}")
    version, n_cfg = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise DataError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    cfg = ModelConfig.from_dict(json.loads(r.take(n_cfg).decode("utf-8")))
    model = LanguageModel(cfg)
    expected = model.state_dict()
    (n_tensors,) = r.unpack("<I")
    loaded = {}
    for _ in range(n_tensors):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        if name not in expected:
            raise DataError(f"unknown tensor name {name!r} in checkpoint {path}")
        if tuple(expected[name].shape) != tuple(shape):
            raise DataError(f"tensor {name!r} has shape {shape}, model expects {tuple(expected[name].shape)}")
        loaded[name] = torch.from_numpy(arr.copy()).to(expected[name].dtype)
    missing = set(expected) - set(loaded)
    if missing:
        raise DataError(f"checkpoint {path} lacks tensors {sorted(missing)}")
    if r.pos != len(data):
        raise DataError(f"checkpoint {path} has {len(data) - r.pos} trailing bytes")
    model.load_state_dict(loaded)
    return model
