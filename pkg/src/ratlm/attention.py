"""Causal softmax attention, full or sliding-window, and the shared head helpers."""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError
from .recurrence import RNNMixer, init_weight, rnn_forward  # noqa: F401  (re-export)
from .rope import RopeSpec, rope_rotate
from .tensor import linear, matmul, softmax_lse

# upper bound on score-tile elements per batch*head; keeps long prefill in memory
SCORE_TILE_ELEMS = 1 << 22


def split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(1, 2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, t, dh = x.shape
    return x.transpose(1, 2).reshape(b, t, h * dh)


def _rows_per_tile(n_keys: int) -> int:
    return max(1, SCORE_TILE_ELEMS // max(1, n_keys))


def causal_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    window: int | None = None,
    rope: RopeSpec | None = None,
    offset: int = 0,
) -> torch.Tensor:
    """Softmax attention over head-split ``[B, H, T, dh]`` tensors.

    Token ``t`` sees positions ``max(0, t - window + 1) .. t`` (all of ``0..t``
    when ``window`` is None).  Queries are processed in row tiles so the score
    matrix never has to exist in full.
    """
    if window is not None and window <= 0:
        raise ConfigError(f"attention window must be positive, got {window}")
    t_len, dh = q.shape[-2], q.shape[-1]
    pos = torch.arange(offset, offset + t_len)
    if rope is not None and rope.enabled:
        q = rope_rotate(q, rope.positions(pos, 1), rope)
        k = rope_rotate(k, rope.positions(pos, 1), rope)
    scale = 1.0 / math.sqrt(dh)
    span = t_len if window is None else min(t_len, window)
    rows = _rows_per_tile(span + 1)
    outs = []
    for s in range(0, t_len, rows):
        e = min(t_len, s + rows)
        lo = 0 if window is None else max(0, s - window + 1)
        qp = pos[s:e].unsqueeze(-1)
        kp = pos[lo:e].unsqueeze(0)
        mask = kp <= qp
        if window is not None:
            mask = mask & (kp > qp - window)
        scores = matmul(q[..., s:e, :], k[..., lo:e, :].transpose(-1, -2)) * scale
        probs, _ = softmax_lse(scores, mask)
        outs.append(matmul(probs, v[..., lo:e, :]))
    return torch.cat(outs, dim=-2) if len(outs) > 1 else outs[0]


class AttnMixer(nn.Module):
    """Multi-head attention with ``w_q, w_k, w_v, w_o`` (each D x D): 4 D^2 parameters."""

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        window: int | None = None,
        rope: RopeSpec | None = None,
        init_std: float = 0.02,
    ):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        if window is not None and window <= 0:
            raise ConfigError(f"attention window must be positive, got {window}")
        self.d_model, self.n_heads = d_model, n_heads
        self.head_dim = d_model // n_heads
        self.window = window
        self.rope = rope if rope is not None else RopeSpec("token_index", head_dim=self.head_dim)
        self.w_q = init_weight(d_model, d_model, init_std)
        self.w_k = init_weight(d_model, d_model, init_std)
        self.w_v = init_weight(d_model, d_model, init_std)
        self.w_o = init_weight(d_model, d_model, init_std)

    @property
    def kind(self) -> str:
        return "attn" if self.window is None else "swa"

    def project(self, x: torch.Tensor):
        return linear(x, self.w_q), linear(x, self.w_k), linear(x, self.w_v)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return attn_forward(x, self, self.window, self.rope)


def attn_forward(x: torch.Tensor, p: AttnMixer, window: int | None = None, rope: RopeSpec | None = None) -> torch.Tensor:
    q, k, v = p.project(x)
    h = p.n_heads
    o = causal_attention(split_heads(q, h), split_heads(k, h), split_heads(v, h), window, rope)
    return linear(merge_heads(o), p.w_o)
