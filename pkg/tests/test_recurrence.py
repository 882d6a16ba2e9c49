import torch

from ratlm.recurrence import RNNMixer, gated_recurrence, rnn_forward

from oracles import check_grads


def _mixer(d=8, std=0.3):
    return RNNMixer(d, init_std=std)


def test_param_budget():
    assert sum(p.numel() for p in _mixer(16).parameters()) == 4 * 16 * 16


def test_open_gate_is_memoryless():
    p = _mixer()
    x = torch.randn(2, 5, 8)
    v, g, z = p.project(x)
    h = gated_recurrence(v, torch.zeros_like(g))
    assert torch.allclose((z * h) @ p.w_o, (z * v) @ p.w_o)


def test_single_step():
    p = _mixer()
    x = torch.randn(3, 1, 8)
    v, g, z = p.project(x)
    y, h = rnn_forward(x, p)
    assert torch.equal(h, ((1 - g) * v)[:, 0])
    assert torch.allclose(y, (z * (1 - g) * v) @ p.w_o)


def test_scan_matches_sequential():
    p = _mixer(8)
    x = torch.randn(2, 16, 8)
    y, h_last = rnn_forward(x, p)
    v, g, z = p.project(x)
    h = torch.zeros(2, 8)
    ys = []
    for t in range(16):
        h = g[:, t] * h + (1 - g[:, t]) * v[:, t]
        ys.append((z[:, t] * h) @ p.w_o)
    assert (y - torch.stack(ys, 1)).abs().max() < 1e-5
    assert (h_last - h).abs().max() < 1e-5


def test_stateful_continuation():
    p = _mixer()
    x = torch.randn(2, 12, 8)
    y_full, _ = rnn_forward(x, p)
    y1, h = rnn_forward(x[:, :5], p)
    y2, _ = rnn_forward(x[:, 5:], p, h)
    assert torch.allclose(torch.cat([y1, y2], 1), y_full, atol=1e-6)


def test_causality():
    p = _mixer()
    x = torch.randn(1, 10, 8)
    y = p(x)
    x2 = x.clone()
    x2[:, 6] += 1.0
    y2 = p(x2)
    assert (y2[:, :6] - y[:, :6]).abs().max() <= 1e-7
    assert (y2[:, 6] - y[:, 6]).abs().max() > 0


def test_convex_box():
    v = torch.rand(2, 20, 4) * 2 - 1  # box [-1, 1]
    g = torch.rand(2, 20, 4) * 0.98 + 0.01
    h0 = torch.rand(2, 4) * 2 - 1
    h = gated_recurrence(v, g, h0)
    assert h.max() <= 1 and h.min() >= -1


def test_gradient(f64):
    p = RNNMixer(8, init_std=0.3)
    x = torch.randn(1, 8, 8, requires_grad=True)
    w = torch.randn(1, 8, 8)
    check_grads(lambda: (p(x) * w).sum(), [x, *p.parameters()])
