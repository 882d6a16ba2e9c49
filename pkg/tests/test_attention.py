import math

import pytest
import torch

from ratlm.attention import AttnMixer, attn_forward, causal_attention, merge_heads, split_heads
import ratlm.attention as attention_mod
from ratlm.errors import ConfigError
from ratlm.rope import RopeSpec

from oracles import check_grads

NOPE = RopeSpec("none", head_dim=8)


def naive_attention(q, k, v, window=None):
    B, H, T, dh = q.shape
    out = torch.zeros_like(q)
    for t in range(T):
        lo = 0 if window is None else max(0, t - window + 1)
        s = (q[:, :, t:t + 1] @ k[:, :, lo:t + 1].transpose(-1, -2)) / math.sqrt(dh)
        out[:, :, t] = (torch.softmax(s, -1) @ v[:, :, lo:t + 1])[:, :, 0]
    return out


def qkv(B=2, H=2, T=12, dh=8):
    return torch.randn(B, H, T, dh), torch.randn(B, H, T, dh), torch.randn(B, H, T, dh)


def test_split_merge_roundtrip():
    x = torch.randn(2, 5, 12)
    assert torch.equal(merge_heads(split_heads(x, 3)), x)


@pytest.mark.parametrize("window", [None, 1, 3, 12])
def test_matches_naive(window):
    q, k, v = qkv()
    assert (causal_attention(q, k, v, window, NOPE) - naive_attention(q, k, v, window)).abs().max() < 1e-5


def test_tiling_does_not_change_result(monkeypatch):
    q, k, v = qkv(T=40)
    full = causal_attention(q, k, v, 7, NOPE)
    monkeypatch.setattr(attention_mod, "SCORE_TILE_ELEMS", 16)
    assert (causal_attention(q, k, v, 7, NOPE) - full).abs().max() < 1e-6


def test_single_token_returns_value():
    q, k, v = qkv(T=1)
    assert torch.allclose(causal_attention(q, k, v), v, atol=1e-7)


def test_window_one_is_value_projection():
    p = AttnMixer(16, 2, window=1, init_std=0.3)
    x = torch.randn(2, 9, 16)
    assert torch.allclose(p(x), x @ p.w_v @ p.w_o, atol=1e-6)


def test_window_covering_sequence_is_full_attention():
    p = AttnMixer(16, 2, init_std=0.3)
    x = torch.randn(2, 9, 16)
    assert torch.allclose(attn_forward(x, p, window=9, rope=p.rope), p(x), atol=1e-6)


def test_sliding_window_locality():
    p = AttnMixer(16, 2, window=3, init_std=0.3)
    x = torch.randn(1, 12, 16)
    y = p(x)
    x2 = x.clone()
    x2[:, 2] += 5.0
    y2 = p(x2)
    changed = (y2 - y).abs().amax(-1)[0] > 1e-7
    assert changed.nonzero().flatten().tolist() == [2, 3, 4]


def test_causality():
    p = AttnMixer(16, 2, init_std=0.3)
    x = torch.randn(1, 12, 16)
    x2 = x.clone()
    x2[:, 7:] += torch.randn(1, 5, 16)
    assert (p(x2)[:, :7] - p(x)[:, :7]).abs().max() <= 1e-7


def test_rope_offset_consistent():
    rope = RopeSpec("token_index", head_dim=8)
    q, k, v = qkv(T=10)
    # relative encoding: shifting every position leaves the scores unchanged
    a = causal_attention(q, k, v, None, rope, offset=0)
    b = causal_attention(q, k, v, None, rope, offset=37)
    assert (a - b).abs().max() < 1e-5


@pytest.mark.parametrize("window", [0, -2])
def test_bad_window(window):
    with pytest.raises(ConfigError):
        AttnMixer(16, 2, window=window)
    q, k, v = qkv()
    with pytest.raises(ConfigError):
        causal_attention(q, k, v, window)


def test_param_count():
    assert sum(t.numel() for t in AttnMixer(16, 2).parameters()) == 1024


@pytest.mark.parametrize("window", [None, 3])
def test_gradient(f64, window):
    p = AttnMixer(8, 2, window=window, init_std=0.3)
    x = torch.randn(1, 6, 8, requires_grad=True)
    w = torch.randn(1, 6, 8)
    check_grads(lambda: (p(x) * w).sum(), [x, *p.parameters()])
