"""RAT mixer: gated recurrence inside chunks, softmax attention across chunk anchors.

A sequence of length T is cut into C = T / L chunks.  Inside each chunk keys
and values are smoothed by the gated recurrence (state reset to zero at each
chunk start).  The last smoothed key/value of every chunk is its *anchor*.
Each query attends to the anchors of strictly earlier chunks plus its own
running key/value; the two parts are computed separately and merged through
their log-sum-exp values.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .attention import _rows_per_tile
from .errors import ConfigError
from .recurrence import gated_recurrence, init_weight
from .rope import RopeSpec, rope_rotate
from .tensor import NEG_INF, linear, matmul, softmax_lse


class RATMixer(nn.Module):
    """Projection parameters of one RAT layer.

    ``qk_mode="shared"`` (default): ``w_q``/``w_k`` are D x d_head and shared by
    every head, which brings the count to 4 D^2 + 2 D d_head.
    ``qk_mode="lowrank"``: full D x D query/key projections and rank-``r``
    factorised gates, 4 D^2 + 4 D r.
    """

    kind = "rat"

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        chunk_size: int,
        rope: RopeSpec | None = None,
        init_std: float = 0.02,
        qk_mode: str = "shared",
        gate_rank: int | None = None,
    ):
        super().__init__()
        if d_model % n_heads:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        if chunk_size < 1:
            raise ConfigError(f"chunk size must be >= 1, got {chunk_size}")
        if qk_mode not in ("shared", "lowrank"):
            raise ConfigError(f"qk_mode must be 'shared' or 'lowrank', got {qk_mode!r}")
        self.d_model, self.n_heads, self.chunk_size = d_model, n_heads, chunk_size
        self.head_dim = d_model // n_heads
        self.qk_mode = qk_mode
        self.rope = rope if rope is not None else RopeSpec("chunk_index", head_dim=self.head_dim)
        d, dh = d_model, self.head_dim
        qk_width = dh if qk_mode == "shared" else d
        self.w_q = init_weight(d, qk_width, init_std)
        self.w_k = init_weight(d, qk_width, init_std)
        self.w_v = init_weight(d, d, init_std)
        if qk_mode == "shared":
            self.w_g = init_weight(d, d, init_std)
            self.w_z = init_weight(d, d, init_std)
        else:
            r = gate_rank or dh
            self.w_g_a, self.w_g_b = init_weight(d, r, init_std), init_weight(r, d, init_std)
            self.w_z_a, self.w_z_b = init_weight(d, r, init_std), init_weight(r, d, init_std)
        self.w_o = init_weight(d, d, init_std)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return rat_forward_parallel(x, self, self.chunk_size, self.rope)


def rat_project(x: torch.Tensor, p: RATMixer):
    """Return ``(q, k, v, g, z)``, all ``[..., D]``; g and z already squashed."""
    q, k = linear(x, p.w_q), linear(x, p.w_k)
    if p.qk_mode == "shared":
        # every head reads the same raw query/key; the per-dimension gate later tells heads apart
        q = q.repeat(*([1] * (q.dim() - 1)), p.n_heads)
        k = k.repeat(*([1] * (k.dim() - 1)), p.n_heads)
        g = torch.sigmoid(linear(x, p.w_g))
        z = torch.sigmoid(linear(x, p.w_z))
    else:
        g = torch.sigmoid(linear(linear(x, p.w_g_a), p.w_g_b))
        z = torch.sigmoid(linear(linear(x, p.w_z_a), p.w_z_b))
    v = linear(x, p.w_v)
    return q, k, v, g, z


def merge_online_softmax(o_prev: torch.Tensor, lse_prev: torch.Tensor, s_self: torch.Tensor, v_self: torch.Tensor) -> torch.Tensor:
    """Combine a normalised partial attention output with one extra (score, value) pair.

    ``lse_prev`` may be -inf (nothing attended yet), in which case ``v_self`` is
    returned exactly.
    """
    m = torch.maximum(lse_prev, s_self)
    w_prev = torch.exp(lse_prev - m).unsqueeze(-1)
    w_self = torch.exp(s_self - m).unsqueeze(-1)
    return (w_prev * o_prev + w_self * v_self) / (w_prev + w_self)


def _anchor_positions(n_chunks: int, chunk_size: int) -> torch.Tensor:
    # token position of each chunk's final element
    return torch.arange(n_chunks) * chunk_size + chunk_size - 1


def rat_mix(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    g: torch.Tensor,
    chunk_size: int,
    n_heads: int,
    rope: RopeSpec | None = None,
    return_stats: bool = False,
):
    """Mixing core on projected ``[B, T, D]`` inputs, before the output gate.

    With ``return_stats`` also returns ``(lse_prev, s_self)`` per ``[B, H, T]``.
    """
    b, t_len, d = q.shape
    L = chunk_size
    if t_len % L:
        raise ConfigError(
            f"sequence length {t_len} is not a multiple of chunk size {L}; pad the batch to a multiple of L "
            "or choose a chunk size that divides T"
        )
    n_chunks = t_len // L
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)

    kv = torch.stack([k, v]).reshape(2, b, n_chunks, L, d)
    gg = g.reshape(1, b, n_chunks, L, d).expand(2, -1, -1, -1, -1)
    kv_t = gated_recurrence(kv, gg, dim=3)
    k_t = kv_t[0].reshape(b, t_len, d)
    v_t = kv_t[1].reshape(b, t_len, d)
    anchors_k = kv_t[0, :, :, -1]  # [B, C, D]
    anchors_v = kv_t[1, :, :, -1]

    def heads(x):
        return x.reshape(b, x.shape[1], n_heads, dh).transpose(1, 2)

    qh, kh_t, vh_t = heads(q), heads(k_t), heads(v_t)
    ak, av = heads(anchors_k), heads(anchors_v)
    tok = torch.arange(t_len)
    chunk_of = torch.div(tok, L, rounding_mode="floor")
    if rope is not None and rope.enabled:
        q_rot = rope_rotate(qh, rope.positions(tok, L), rope)
        ak = rope_rotate(ak, rope.positions(_anchor_positions(n_chunks, L), L), rope)
    else:
        q_rot = qh

    # previous-chunk anchors, strict mask (anchor index < own chunk index)
    rows = max(L, _rows_per_tile(n_chunks) // L * L)
    o_parts, lse_parts = [], []
    for s in range(0, t_len, rows):
        e = min(t_len, s + rows)
        hi = int(chunk_of[e - 1])
        if hi == 0:
            o_parts.append(qh.new_zeros(b, n_heads, e - s, dh))
            lse_parts.append(qh.new_full((b, n_heads, e - s), NEG_INF))
            continue
        mask = torch.arange(hi).unsqueeze(0) < chunk_of[s:e].unsqueeze(-1)
        scores = matmul(q_rot[..., s:e, :], ak[..., :hi, :].transpose(-1, -2)) * scale
        probs, lse = softmax_lse(scores, mask)
        o_parts.append(matmul(probs, av[..., :hi, :]))
        lse_parts.append(lse)
    o_prev = torch.cat(o_parts, dim=-2) if len(o_parts) > 1 else o_parts[0]
    lse_prev = torch.cat(lse_parts, dim=-1) if len(lse_parts) > 1 else lse_parts[0]

    # own running key: the query and key share one rotation angle, so it cancels
    s_self = (qh * kh_t).sum(-1) * scale
    out = merge_online_softmax(o_prev, lse_prev, s_self, vh_t)
    out = out.transpose(1, 2).reshape(b, t_len, d)
    if return_stats:
        return out, (lse_prev, s_self)
    return out


def rat_forward_parallel(x: torch.Tensor, p: RATMixer, chunk_size: int | None = None, rope: RopeSpec | None = None) -> torch.Tensor:
    """Training / prefill path over ``x[B, T, D]``; T must be a multiple of the chunk size."""
    L = p.chunk_size if chunk_size is None else chunk_size
    rope = p.rope if rope is None else rope
    q, k, v, g, z = rat_project(x, p)
    y = rat_mix(q, k, v, g, L, p.n_heads, rope)
    return linear(z * y, p.w_o)


def rat_reference_naive(x: torch.Tensor, p: RATMixer, chunk_size: int | None = None, rope: RopeSpec | None = None) -> torch.Tensor:
    """Token-by-token transcription of the layer: one explicit softmax per query
    over ``[rotated earlier anchors ; own rotated running key]``.  Slow; for checking only."""
    L = p.chunk_size if chunk_size is None else chunk_size
    rope = p.rope if rope is None else rope
    q, k, v, g, z = rat_project(x, p)
    b, t_len, d = x.shape
    if t_len % L:
        raise ConfigError(f"sequence length {t_len} is not a multiple of chunk size {L}")
    h, dh = p.n_heads, p.head_dim
    # sequential recurrence, reset at every chunk start
    k_steps, v_steps = [], []
    for t in range(t_len):
        if t % L == 0:
            k_prev = torch.zeros_like(k[:, 0])
            v_prev = torch.zeros_like(v[:, 0])
        else:
            k_prev, v_prev = k_steps[-1], v_steps[-1]
        k_steps.append(g[:, t] * k_prev + (1 - g[:, t]) * k[:, t])
        v_steps.append(g[:, t] * v_prev + (1 - g[:, t]) * v[:, t])
    k_t = torch.stack(k_steps, dim=1)
    v_t = torch.stack(v_steps, dim=1)

    def rot(vec, token_pos):
        if rope is None or not rope.enabled:
            return vec
        idx = rope.positions(torch.tensor(token_pos), L)
        return rope_rotate(vec, idx, rope)

    outs = []
    for t in range(t_len):
        c = t // L
        key_list, val_list = [], []
        for cp in range(c):
            end = cp * L + L - 1
            key_list.append(rot(k_t[:, end].reshape(b, h, dh), end))
            val_list.append(v_t[:, end].reshape(b, h, dh))
        key_list.append(rot(k_t[:, t].reshape(b, h, dh), t))
        val_list.append(v_t[:, t].reshape(b, h, dh))
        keys = torch.stack(key_list, dim=2)  # [B, H, n, dh]
        vals = torch.stack(val_list, dim=2)
        qt = rot(q[:, t].reshape(b, h, dh), t)
        scores = (qt.unsqueeze(2) * keys).sum(-1) / math.sqrt(dh)
        w = torch.softmax(scores, dim=-1)
        outs.append((w.unsqueeze(-1) * vals).sum(2).reshape(b, d))
    y = torch.stack(outs, dim=1)
    return linear(z * y, p.w_o)
