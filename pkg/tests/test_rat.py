import math

import pytest
import torch

from ratlm.attention import causal_attention, merge_heads, split_heads
from ratlm.cache import chunk_anchors
from ratlm.errors import ConfigError
from ratlm.rat import RATMixer, merge_online_softmax, rat_forward_parallel, rat_mix, rat_project, rat_reference_naive
from ratlm.recurrence import RNNMixer, rnn_forward
from ratlm.rope import RopeSpec, rope_rotate

from oracles import check_grads, softmax_concat


def make(D=16, H=2, L=4, std=0.3, **kw):
    return RATMixer(D, H, L, init_std=std, **kw)


class TestParams:
    def test_shared_count(self):
        p = RATMixer(16, 2, 4)
        assert sum(t.numel() for t in p.parameters()) == 4 * 256 + 2 * 16 * 8 == 1280

    def test_lowrank_count(self):
        p = RATMixer(16, 2, 4, qk_mode="lowrank", gate_rank=3)
        assert sum(t.numel() for t in p.parameters()) == 4 * 256 + 4 * 16 * 3

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            RATMixer(16, 3, 4)
        with pytest.raises(ConfigError):
            RATMixer(16, 2, 0)


class TestProject:
    def test_single_head_identity(self):
        p = make(D=8, H=1)
        x = torch.randn(2, 4, 8)
        q, k, *_ = rat_project(x, p)
        assert torch.equal(q, x @ p.w_q) and torch.equal(k, x @ p.w_k)

    def test_heads_see_same_raw_qk(self):
        p = make(D=16, H=4)
        q, k, *_ = rat_project(torch.randn(2, 4, 16), p)
        for h in range(1, 4):
            assert torch.equal(q[..., h * 4:(h + 1) * 4], q[..., :4])
            assert torch.equal(k[..., h * 4:(h + 1) * 4], k[..., :4])

    def test_gating_separates_heads(self):
        p = make(D=8, H=2, L=4)
        x = torch.randn(1, 4, 8)
        q, k, v, g, z = rat_project(x, p)
        g = torch.cat([torch.full((1, 4, 4), 0.1), torch.full((1, 4, 4), 0.9)], dim=-1)
        kt, _ = chunk_anchors(k, v, g, 4)
        assert not torch.allclose(kt[..., :4], kt[..., 4:])


class TestMerge:
    def test_empty_previous_returns_self_exactly(self):
        v = torch.randn(3, 5)
        out = merge_online_softmax(torch.zeros(3, 5), torch.full((3,), -math.inf), torch.randn(3), v)
        assert torch.equal(out, v)

    def test_fixed_point(self):
        o = torch.randn(3, 5)
        s = torch.randn(3)
        assert torch.allclose(merge_online_softmax(o, s, s, o), o, atol=1e-7)

    def test_matches_monolithic_softmax(self, f64):
        for seed in range(20):
            g = torch.Generator().manual_seed(seed)
            scores = torch.randn(4, 6, generator=g) * 5
            vals = torch.randn(4, 6, 3, generator=g)
            s_self = torch.randn(4, generator=g) * 5
            v_self = torch.randn(4, 3, generator=g)
            probs = torch.softmax(scores, -1)
            lse = torch.logsumexp(scores, -1)
            o_prev = (probs.unsqueeze(-1) * vals).sum(-2)
            out = merge_online_softmax(o_prev, lse, s_self, v_self)
            assert (out - softmax_concat(scores, vals, s_self, v_self)).abs().max() < 1e-6


class TestForward:
    def test_requires_multiple_of_chunk(self):
        with pytest.raises(ConfigError, match="pad"):
            rat_forward_parallel(torch.randn(1, 6, 16), make(L=4))

    def test_matches_naive(self):
        p = make()
        x = torch.randn(2, 32, 16)
        assert (rat_forward_parallel(x, p) - rat_reference_naive(x, p)).abs().max() < 1e-5

    @pytest.mark.parametrize("mode", ["token_index", "none"])
    def test_matches_naive_other_rope(self, mode):
        p = make(rope=RopeSpec(mode, head_dim=8))
        x = torch.randn(2, 16, 16)
        assert (rat_forward_parallel(x, p) - rat_reference_naive(x, p)).abs().max() < 1e-5

    def test_lowrank_matches_naive(self):
        p = make(qk_mode="lowrank", gate_rank=4)
        x = torch.randn(2, 16, 16)
        assert (rat_forward_parallel(x, p) - rat_reference_naive(x, p)).abs().max() < 1e-5

    def test_first_chunk_is_pure_self(self):
        p = make(L=4)
        x = torch.randn(2, 12, 16)
        _, k, v, g, z = rat_project(x, p)
        _, vt = chunk_anchors(k[:, :4], v[:, :4], g[:, :4], 4)
        y = rat_forward_parallel(x, p)
        # the last token of chunk 0 sees only its own running value
        assert torch.allclose(y[:, 3], (z[:, 3] * vt[:, 0]) @ p.w_o, atol=1e-6)

    def test_single_token(self):
        p = make(L=1)
        x = torch.randn(2, 1, 16)
        _, _, v, g, z = rat_project(x, p)
        assert torch.allclose(rat_reference_naive(x, p), (z * (1 - g) * v) @ p.w_o, atol=1e-6)

    def test_reduces_to_rnn_when_chunk_is_whole_sequence(self):
        T = 24
        p = make(L=T)
        rnn = RNNMixer(16)
        with torch.no_grad():
            for name in ("w_v", "w_g", "w_z", "w_o"):
                getattr(rnn, name).copy_(getattr(p, name))
        x = torch.randn(2, T, 16)
        assert (rat_forward_parallel(x, p) - rnn_forward(x, rnn)[0]).abs().max() < 1e-5

    def test_unit_chunks_with_open_gate_is_attention(self):
        p = make(L=1)
        x = torch.randn(2, 10, 16)
        q, k, v, g, z = rat_project(x, p)
        y_rat = (z * rat_mix(q, k, v, torch.zeros_like(g), 1, 2, p.rope)) @ p.w_o
        # chunk index == token index at L=1, so token-index rope is the same rotation
        o = causal_attention(split_heads(q, 2), split_heads(k, 2), split_heads(v, 2), None, RopeSpec("token_index", head_dim=8))
        y_attn = (z * merge_heads(o)) @ p.w_o
        assert (y_rat - y_attn).abs().max() < 1e-5


class TestCausality:
    def test_intra_chunk_future(self):
        p = make(L=4)
        x = torch.randn(1, 16, 16)
        y = p(x)
        x2 = x.clone()
        x2[:, 6] += 3.0  # chunk 1, l = 2
        y2 = p(x2)
        assert (y2[:, :6] - y[:, :6]).abs().max() <= 1e-7

    def test_inter_chunk_future(self):
        p = make(L=4)
        x = torch.randn(1, 16, 16)
        y = p(x)
        x2 = x.clone()
        x2[:, 8:] += torch.randn(1, 8, 16)
        y2 = p(x2)
        assert (y2[:, :8] - y[:, :8]).abs().max() <= 1e-7

    def test_past_chunks_enter_only_through_anchor(self):
        L, H, D = 4, 2, 16
        p = make(D=D, H=H, L=L)
        x = torch.randn(1, 16, D)
        x2 = x.clone()
        x2[:, 5] += 2.0  # chunk 1, interior token
        y2 = p(x2)

        def from_anchors(inp, ak, av):
            # naive layer output for chunks >= 2, using supplied anchors
            q, k, v, g, z = rat_project(inp, p)
            kt, vt = [], []
            for c in range(4):
                sl = slice(c * L, (c + 1) * L)
                kt.append(torch.stack([chunk_anchors(k[:, sl][:, :l + 1], v[:, sl][:, :l + 1], g[:, sl][:, :l + 1], l + 1)[0][:, 0] for l in range(L)], 1))
                vt.append(torch.stack([chunk_anchors(k[:, sl][:, :l + 1], v[:, sl][:, :l + 1], g[:, sl][:, :l + 1], l + 1)[1][:, 0] for l in range(L)], 1))
            kt, vt = torch.cat(kt, 1), torch.cat(vt, 1)
            spec = p.rope
            outs = []
            for t in range(2 * L, 4 * L):
                c = t // L
                keys = torch.stack([rope_rotate(ak[:, j].reshape(1, H, -1), j, spec) for j in range(c)] + [kt[:, t].reshape(1, H, -1)], 2)
                vals = torch.stack([av[:, j].reshape(1, H, -1) for j in range(c)] + [vt[:, t].reshape(1, H, -1)], 2)
                qt = q[:, t].reshape(1, H, -1)
                qr = rope_rotate(qt, c, spec)
                s = torch.cat([(qr.unsqueeze(2) * keys[:, :, :-1]).sum(-1), (qt * keys[:, :, -1]).sum(-1, keepdim=True)], -1)
                w = torch.softmax(s / math.sqrt(D // H), -1)
                outs.append((w.unsqueeze(-1) * vals).sum(2).reshape(1, D))
            return (z[:, 2 * L:] * torch.stack(outs, 1)) @ p.w_o

        _, k, v, g, _ = rat_project(x, p)
        ak, av = chunk_anchors(k, v, g, L)
        _, k2, v2, g2, _ = rat_project(x2, p)
        ak2, av2 = chunk_anchors(k2, v2, g2, L)
        # helper reproduces the layer, and swapping in the perturbed anchors reproduces the perturbed output
        assert (from_anchors(x, ak, av) - p(x)[:, 2 * L:]).abs().max() < 1e-5
        assert (from_anchors(x, ak2, av2) - y2[:, 2 * L:]).abs().max() < 1e-5


def test_weights_sum_to_one():
    p = make(L=4)
    x = torch.randn(2, 16, 16)
    q, k, v, g, z = rat_project(x, p)
    _, (lse_prev, s_self) = rat_mix(q, k, v, g, 4, 2, p.rope, return_stats=True)
    total = torch.logaddexp(lse_prev, s_self)
    w_self = torch.exp(s_self - total)
    # explicit anchor weights from the naive construction
    ak, av = chunk_anchors(k, v, g, 4)
    qh = split_heads(q, 2)
    for t in range(16):
        c = t // 4
        if c == 0:
            assert torch.allclose(w_self[:, :, t], torch.ones(2, 2), atol=1e-6)
            continue
        keys = rope_rotate(split_heads(ak[:, :c], 2), torch.arange(c), p.rope)
        qr = rope_rotate(qh[:, :, t], c, p.rope)
        s_prev = (keys @ qr.unsqueeze(-1)).squeeze(-1) / math.sqrt(8)
        full = torch.cat([s_prev, s_self[:, :, t:t + 1]], -1)
        w = torch.softmax(full, -1)
        assert torch.allclose(w[..., :-1].sum(-1) + w_self[:, :, t], torch.ones(2, 2), atol=1e-6)
        assert torch.allclose(w[..., :-1].sum(-1), torch.exp(lse_prev[:, :, t] - total[:, :, t]), atol=1e-6)


def test_gradient(f64):
    p = RATMixer(8, 2, 2, init_std=0.3)
    x = torch.randn(1, 8, 8, requires_grad=True)
    w = torch.randn(1, 8, 8)
    check_grads(lambda: (rat_forward_parallel(x, p) * w).sum(), [x, *p.parameters()])
