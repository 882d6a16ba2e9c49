"""Sequential decoding with per-layer caches.

A RAT layer keeps one anchor (final smoothed key/value) per completed chunk
plus the running key/value of the open chunk, so its cache grows with
C = T / L instead of T.  Attention layers keep per-token keys/values (the last
W of them for sliding-window layers); RNN layers keep one hidden vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .attention import AttnMixer, attn_forward, split_heads
from .errors import StateError
from .model import LanguageModel
from .rat import RATMixer, merge_online_softmax, rat_forward_parallel, rat_project
from .recurrence import RNNMixer, gated_recurrence, rnn_forward
from .rope import rope_rotate
from .tensor import NEG_INF, embedding_lookup, linear, rmsnorm, softmax_lse


class GrowBuffer:
    """Append-only ``[B, n, D]`` buffer with amortised doubling; ``keep`` bounds the live tail."""

    def __init__(self, batch: int, width: int, dtype, keep: int | None = None, capacity: int = 16):
        self.keep = keep
        self.length = 0
        self.store = torch.zeros(batch, capacity, width, dtype=dtype)

    def append(self, rows: torch.Tensor) -> None:
        """``rows`` is ``[B, n, D]``."""
        n = rows.shape[1]
        if self.keep is not None and self.length + n > self.store.shape[1] and self.length >= self.keep:
            tail = self.view().clone()
            self.store[:, : tail.shape[1]] = tail
            self.length = tail.shape[1]
        need = self.length + n
        if need > self.store.shape[1]:
            cap = max(need, 2 * self.store.shape[1])
            if self.keep is not None:
                cap = max(need, min(cap, 2 * self.keep))
            grown = self.store.new_zeros(self.store.shape[0], cap, self.store.shape[2])
            grown[:, : self.length] = self.store[:, : self.length]
            self.store = grown
        self.store[:, self.length:need] = rows
        self.length = need

    @property
    def live(self) -> int:
        return self.length if self.keep is None else min(self.length, self.keep)

    def view(self) -> torch.Tensor:
        return self.store[:, self.length - self.live:self.length]

    @property
    def nbytes(self) -> int:
        return self.store.shape[0] * self.live * self.store.shape[2] * self.store.element_size()


@dataclass
class RatState:
    anchors_k: GrowBuffer  # stored already rotated by their chunk index
    anchors_v: GrowBuffer
    cur_k: torch.Tensor
    cur_v: torch.Tensor
    l_in_chunk: int = 0
    chunk_index: int = 0

    @property
    def n_anchors(self) -> int:
        return self.anchors_k.live

    @property
    def nbytes(self) -> int:
        fixed = (self.cur_k.numel() + self.cur_v.numel()) * self.cur_k.element_size()
        return self.anchors_k.nbytes + self.anchors_v.nbytes + fixed


@dataclass
class AttnState:
    keys: GrowBuffer  # rotated by token position
    values: GrowBuffer
    position: int = 0

    @property
    def nbytes(self) -> int:
        return self.keys.nbytes + self.values.nbytes


@dataclass
class RnnState:
    h: torch.Tensor
    position: int = 0

    @property
    def nbytes(self) -> int:
        return self.h.numel() * self.h.element_size()


@dataclass
class GenCache:
    layers: list = field(default_factory=list)
    tokens_seen: int = 0


def cache_bytes(cache) -> int:
    """Exact bytes of live cache state (a whole ``GenCache`` or one layer state)."""
    if isinstance(cache, GenCache):
        return sum(s.nbytes for s in cache.layers)
    return cache.nbytes


def layer_cache_bytes(state) -> int:
    return state.nbytes


# --------------------------------------------------------------------------
# fresh states
# --------------------------------------------------------------------------

def empty_state(mixer, batch: int, dtype=None):
    dtype = dtype or mixer.w_o.dtype
    d = mixer.d_model
    if isinstance(mixer, RATMixer):
        return RatState(GrowBuffer(batch, d, dtype), GrowBuffer(batch, d, dtype),
                        torch.zeros(batch, d, dtype=dtype), torch.zeros(batch, d, dtype=dtype))
    if isinstance(mixer, AttnMixer):
        return AttnState(GrowBuffer(batch, d, dtype, keep=mixer.window), GrowBuffer(batch, d, dtype, keep=mixer.window))
    if isinstance(mixer, RNNMixer):
        return RnnState(torch.zeros(batch, d, dtype=dtype))
    raise StateError(f"no decode state for mixer {type(mixer).__name__}")


def synthetic_state(mixer, position: int, batch: int, generator: torch.Generator | None = None):
    """State equivalent in size to having consumed ``position`` tokens, filled with noise.

    Used by the latency harness to time one decode step at a far position
    without running the prefill.
    """
    st = empty_state(mixer, batch)
    d = mixer.d_model
    dtype = mixer.w_o.dtype
    if isinstance(st, RatState):
        n = position // mixer.chunk_size
        if n:
            st.anchors_k.append(torch.randn(batch, n, d, generator=generator, dtype=dtype))
            st.anchors_v.append(torch.randn(batch, n, d, generator=generator, dtype=dtype))
        st.chunk_index = n
        st.l_in_chunk = position % mixer.chunk_size
    elif isinstance(st, AttnState):
        n = position if mixer.window is None else min(position, mixer.window)
        if n:
            st.keys.append(torch.randn(batch, n, d, generator=generator, dtype=dtype))
            st.values.append(torch.randn(batch, n, d, generator=generator, dtype=dtype))
        st.position = position
    else:
        st.position = position
    return st


# --------------------------------------------------------------------------
# single-token steps
# --------------------------------------------------------------------------

def _heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    # [B, D] -> [B, H, dh]
    return x.reshape(x.shape[0], n_heads, -1)


def rat_step(x: torch.Tensor, p: RATMixer, st: RatState) -> torch.Tensor:
    """One token ``x[B, D]`` through a RAT layer; mutates ``st``."""
    L, h = p.chunk_size, p.n_heads
    q, k, v, g, z = rat_project(x, p)
    st.cur_k = g * st.cur_k + (1 - g) * k
    st.cur_v = g * st.cur_v + (1 - g) * v
    scale = 1.0 / math.sqrt(p.head_dim)
    qh = _heads(q, h)
    token_pos = st.chunk_index * L + st.l_in_chunk
    if p.rope.enabled:
        q_rot = rope_rotate(qh, p.rope.positions(torch.tensor(token_pos), L), p.rope)
    else:
        q_rot = qh
    b = x.shape[0]
    if st.n_anchors:
        ak = st.anchors_k.view().reshape(b, -1, h, p.head_dim).transpose(1, 2)  # [B, H, C, dh]
        av = st.anchors_v.view().reshape(b, -1, h, p.head_dim).transpose(1, 2)
        scores = (ak @ q_rot.unsqueeze(-1)).squeeze(-1) * scale
        probs, lse = softmax_lse(scores)
        o_prev = (probs.unsqueeze(-2) @ av).squeeze(-2)
    else:
        o_prev = qh.new_zeros(qh.shape)
        lse = qh.new_full(qh.shape[:-1], NEG_INF)
    s_self = (qh * _heads(st.cur_k, h)).sum(-1) * scale
    out = merge_online_softmax(o_prev, lse, s_self, _heads(st.cur_v, h)).reshape(b, -1)
    y = linear(z * out, p.w_o)
    # close the chunk only after its last token has produced output
    if st.l_in_chunk == L - 1:
        _append_anchor(p, st, st.cur_k, st.cur_v, st.chunk_index)
        st.cur_k = torch.zeros_like(st.cur_k)
        st.cur_v = torch.zeros_like(st.cur_v)
        st.chunk_index += 1
        st.l_in_chunk = 0
    else:
        st.l_in_chunk += 1
    return y


def _append_anchor(p: RATMixer, st: RatState, k_tilde, v_tilde, chunk_idx) -> None:
    """``k_tilde``/``v_tilde`` are ``[B, D]`` or ``[B, n, D]`` for chunks starting at ``chunk_idx``."""
    if k_tilde.dim() == 2:
        k_tilde, v_tilde = k_tilde.unsqueeze(1), v_tilde.unsqueeze(1)
    b, n, d = k_tilde.shape
    if p.rope.enabled:
        L = p.chunk_size
        anchor_tok = (torch.arange(chunk_idx, chunk_idx + n) * L + L - 1)
        kh = k_tilde.reshape(b, n, p.n_heads, p.head_dim).transpose(1, 2)
        kh = rope_rotate(kh, p.rope.positions(anchor_tok, L), p.rope)
        k_tilde = kh.transpose(1, 2).reshape(b, n, d)
    st.anchors_k.append(k_tilde)
    st.anchors_v.append(v_tilde)


def attn_step(x: torch.Tensor, p: AttnMixer, st: AttnState) -> torch.Tensor:
    h, dh = p.n_heads, p.head_dim
    q, k, v = p.project(x)
    qh, kh = _heads(q, h), _heads(k, h)
    if p.rope.enabled:
        pos = p.rope.positions(torch.tensor(st.position), 1)
        qh = rope_rotate(qh, pos, p.rope)
        kh = rope_rotate(kh, pos, p.rope)
    b = x.shape[0]
    st.keys.append(kh.reshape(b, 1, -1))
    st.values.append(v.reshape(b, 1, -1))
    keys = st.keys.view().reshape(b, -1, h, dh).transpose(1, 2)
    vals = st.values.view().reshape(b, -1, h, dh).transpose(1, 2)
    scores = (keys @ qh.unsqueeze(-1)).squeeze(-1) / math.sqrt(dh)
    probs, _ = softmax_lse(scores)
    out = (probs.unsqueeze(-2) @ vals).squeeze(-2).reshape(b, -1)
    st.position += 1
    return linear(out, p.w_o)


def rnn_step(x: torch.Tensor, p: RNNMixer, st: RnnState) -> torch.Tensor:
    v, g, z = p.project(x)
    st.h = g * st.h + (1 - g) * v
    st.position += 1
    return linear(z * st.h, p.w_o)


def mixer_step(x: torch.Tensor, mixer, st) -> torch.Tensor:
    if isinstance(mixer, RATMixer):
        if not isinstance(st, RatState):
            raise StateError("RAT layer paired with a non-RAT cache entry")
        return rat_step(x, mixer, st)
    if isinstance(mixer, AttnMixer):
        if not isinstance(st, AttnState):
            raise StateError("attention layer paired with a non-attention cache entry")
        return attn_step(x, mixer, st)
    if isinstance(mixer, RNNMixer):
        if not isinstance(st, RnnState):
            raise StateError("RNN layer paired with a non-RNN cache entry")
        return rnn_step(x, mixer, st)
    raise StateError(f"cannot step mixer {type(mixer).__name__}")


# --------------------------------------------------------------------------
# prefill
# --------------------------------------------------------------------------

def chunk_anchors(k: torch.Tensor, v: torch.Tensor, g: torch.Tensor, chunk_size: int):
    """Final smoothed key/value of each complete chunk: two ``[B, C, D]`` tensors."""
    b, t_len, d = k.shape
    n = t_len // chunk_size
    shape = (b, n, chunk_size, d)
    gg = g.reshape(shape)
    k_t = gated_recurrence(k.reshape(shape), gg, dim=2)
    v_t = gated_recurrence(v.reshape(shape), gg, dim=2)
    return k_t[:, :, -1], v_t[:, :, -1]


def mixer_prefill(x: torch.Tensor, mixer):
    """Run one mixer over ``x[B, T, D]`` and return ``(y, state)`` ready for decoding."""
    b, t_len, d = x.shape
    st = empty_state(mixer, b, x.dtype)
    if isinstance(mixer, RATMixer):
        L = mixer.chunk_size
        t_full = (t_len // L) * L
        ys = []
        if t_full:
            head = x[:, :t_full]
            ys.append(rat_forward_parallel(head, mixer))
            _, k, v, g, _ = rat_project(head, mixer)
            ak, av = chunk_anchors(k, v, g, L)
            _append_anchor(mixer, st, ak, av, 0)
            st.chunk_index = t_full // L
        # trailing partial chunk: replay token by token so the running state is exact
        for t in range(t_full, t_len):
            ys.append(rat_step(x[:, t], mixer, st).unsqueeze(1))
        return torch.cat(ys, dim=1), st
    if isinstance(mixer, AttnMixer):
        y = attn_forward(x, mixer, mixer.window, mixer.rope)
        _, k, v = mixer.project(x)
        lo = 0 if mixer.window is None else max(0, t_len - mixer.window)
        kh = split_heads(k[:, lo:], mixer.n_heads)
        if mixer.rope.enabled:
            kh = rope_rotate(kh, mixer.rope.positions(torch.arange(lo, t_len), 1), mixer.rope)
        st.keys.append(kh.transpose(1, 2).reshape(b, t_len - lo, d))
        st.values.append(v[:, lo:])
        st.position = t_len
        return y, st
    if isinstance(mixer, RNNMixer):
        y, h_last = rnn_forward(x, mixer)
        st.h = h_last
        st.position = t_len
        return y, st
    raise StateError(f"cannot prefill mixer {type(mixer).__name__}")


@torch.no_grad()
def prefill(tokens: torch.Tensor, model: LanguageModel):
    """Consume ``tokens[B, T]`` (T >= 1); return last-position logits and the cache."""
    if tokens.dim() != 2 or tokens.shape[1] < 1:
        raise StateError(f"prefill needs tokens shaped [B, T>=1], got {tuple(tokens.shape)}")
    x = embedding_lookup(model.embed, tokens)
    cache = GenCache(tokens_seen=tokens.shape[1])
    for blk in model.blocks:
        y, st = mixer_prefill(rmsnorm(x, blk.norm_mix), blk.mixer)
        cache.layers.append(st)
        x = x + y
        x = x + blk.ffn(rmsnorm(x, blk.norm_ffn))
    logits = linear(rmsnorm(x[:, -1], model.norm_out), model.head_weight())
    return logits, cache


def new_cache(model: LanguageModel, batch: int) -> GenCache:
    return GenCache([empty_state(blk.mixer, batch) for blk in model.blocks], 0)


@torch.no_grad()
def decode_step(token: torch.Tensor, cache: GenCache, model: LanguageModel):
    """Feed one token per sequence (``token[B]`` or an int); returns ``(logits[B, V], cache)``."""
    if not torch.is_tensor(token):
        token = torch.tensor([int(token)])
    token = token.reshape(-1)
    if len(cache.layers) != len(model.blocks):
        raise StateError(f"cache has {len(cache.layers)} layers, model has {len(model.blocks)}")
    x = embedding_lookup(model.embed, token)
    for blk, st in zip(model.blocks, cache.layers):
        x = x + mixer_step(rmsnorm(x, blk.norm_mix), blk.mixer, st)
        x = x + blk.ffn(rmsnorm(x, blk.norm_ffn))
    cache.tokens_seen += 1
    return linear(rmsnorm(x, model.norm_out), model.head_weight()), cache
