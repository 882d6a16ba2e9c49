import pytest
import torch

from ratlm.cache import (
    GenCache,
    GrowBuffer,
    RnnState,
    cache_bytes,
    decode_step,
    mixer_prefill,
    new_cache,
    prefill,
    synthetic_state,
)
from ratlm.errors import StateError
from ratlm.model import LanguageModel, ModelConfig, model_forward
from ratlm.tensor import set_deterministic


def model(L=4, pattern=("rat",), D=16, H=2, n_layers=2, window=5):
    torch.manual_seed(0)
    return LanguageModel(ModelConfig(d_model=D, n_heads=H, head_dim=D // H, chunk_size=L, n_layers=n_layers,
                                     layer_pattern=list(pattern), window=window, init_std=0.2))


def teacher_forced(m, tokens, n_prefill):
    logits, cache = prefill(tokens[:, :n_prefill], m)
    out = [logits]
    for t in range(n_prefill, tokens.shape[1]):
        logits, cache = decode_step(tokens[:, t], cache, m)
        out.append(logits)
    return torch.stack(out, 1), cache


@pytest.mark.parametrize("T,L", [(7, 4), (16, 4), (33, 8), (64, 16)])
@pytest.mark.parametrize("pattern", [("rat",), ("attn",), ("swa",), ("rnn",), ("rat", "swa")])
def test_decode_matches_parallel(T, L, pattern):
    m = model(L, pattern)
    tokens = torch.randint(0, 256, (2, T))
    ref = model_forward(tokens, m, pad_partial=True)
    for p in (1, T // 2, T):
        got, _ = teacher_forced(m, tokens, p)
        assert (got - ref[:, p - 1:]).abs().max() < 1e-4


def test_grow_buffer_doubles_and_keeps_tail():
    buf = GrowBuffer(1, 2, torch.float32, capacity=2)
    for i in range(5):
        buf.append(torch.full((1, 1, 2), float(i)))
    assert buf.store.shape[1] == 8 and buf.view()[0, :, 0].tolist() == [0, 1, 2, 3, 4]
    win = GrowBuffer(1, 2, torch.float32, keep=3, capacity=2)
    for i in range(10):
        win.append(torch.full((1, 1, 2), float(i)))
    assert win.view()[0, :, 0].tolist() == [7, 8, 9]
    assert win.store.shape[1] <= 6
    assert win.nbytes == 3 * 2 * 4


class TestRatState:
    def test_exact_chunk_boundary(self):
        m = model(L=4, n_layers=1)
        _, cache = prefill(torch.randint(0, 256, (1, 4)), m)
        st = cache.layers[0]
        assert st.n_anchors == 1 and st.l_in_chunk == 0 and st.chunk_index == 1
        assert not st.cur_k.any() and not st.cur_v.any()

    def test_one_past_boundary(self):
        m = model(L=4, n_layers=1)
        _, cache = prefill(torch.randint(0, 256, (1, 5)), m)
        st = cache.layers[0]
        assert st.n_anchors == 1 and st.l_in_chunk == 1

    @pytest.mark.parametrize("T,L", [(1, 4), (7, 4), (33, 8), (128, 16), (50, 1)])
    def test_anchor_count_is_floor(self, T, L):
        m = model(L=L, n_layers=1)
        _, cache = prefill(torch.randint(0, 256, (1, T)), m)
        assert cache.layers[0].n_anchors == T // L
        assert cache.layers[0].chunk_index == T // L

    def test_first_token_has_no_anchors(self):
        m = model(L=4, n_layers=1)
        cache = new_cache(m, 1)
        decode_step(5, cache, m)
        assert cache.layers[0].n_anchors == 0

    def test_step_function_growth(self):
        L, D = 4, 16
        m = model(L=L, pattern=("rat", "attn"))
        cache = new_cache(m, 1)
        for t in range(1, 21):
            decode_step(t, cache, m)
            rat, attn = cache.layers
            assert cache_bytes(rat) == (t // L) * 2 * D * 4 + 2 * D * 4
            assert cache_bytes(attn) == t * 2 * D * 4
            assert cache_bytes(cache) == cache_bytes(rat) + cache_bytes(attn)

    def test_rnn_and_swa_bytes(self):
        m = model(pattern=("rnn", "swa"), window=5)
        _, cache = prefill(torch.randint(0, 256, (1, 12)), m)
        assert cache_bytes(cache.layers[0]) == 16 * 4
        assert cache_bytes(cache.layers[1]) == 5 * 2 * 16 * 4


def test_decoding_deterministic():
    set_deterministic(True, 0)
    try:
        m = model(pattern=("rat", "swa"))
        tokens = torch.randint(0, 256, (1, 11))
        a, _ = teacher_forced(m, tokens, 3)
        b, _ = teacher_forced(m, tokens, 3)
        assert torch.equal(a, b)
    finally:
        set_deterministic(False)


def test_state_mismatch():
    m = model(n_layers=1)
    with pytest.raises(StateError):
        decode_step(1, GenCache([RnnState(torch.zeros(1, 16))]), m)
    with pytest.raises(StateError):
        decode_step(1, GenCache([]), m)
    with pytest.raises(StateError):
        prefill(torch.zeros(1, 0, dtype=torch.long), m)


@pytest.mark.parametrize("pattern", [("rat",), ("attn",), ("swa",), ("rnn",)])
def test_synthetic_state_size(pattern):
    m = model(L=4, pattern=pattern, n_layers=1, window=5)
    mixer = m.blocks[0].mixer
    _, real = mixer_prefill(torch.randn(1, 13, 16), mixer)
    fake = synthetic_state(mixer, 13, 1, torch.Generator().manual_seed(0))
    assert cache_bytes(fake) == cache_bytes(real)
