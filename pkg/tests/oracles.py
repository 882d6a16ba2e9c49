"""Independent reference computations used as test oracles."""

import math

import torch


def sequential_scan(a, b, h0=None):
    """Literal loop over the second-to-last axis."""
    h = torch.zeros_like(b[..., 0, :]) if h0 is None else h0.clone()
    out = []
    for t in range(a.shape[-2]):
        h = a[..., t, :] * h + b[..., t, :]
        out.append(h)
    return torch.stack(out, dim=-2)


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = torch.zeros(m, n, dtype=torch.float64)
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(a[i, p]) * float(b[p, j])
            out[i, j] = s
    return out


def fd_grad(f, params, eps=1e-4):
    """Central finite differences of scalar ``f()`` w.r.t. each tensor in ``params``."""
    grads = []
    for p in params:
        g = torch.zeros_like(p)
        flat = p.data.view(-1)
        gf = g.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(f())
            flat[i] = orig - eps
            down = float(f())
            flat[i] = orig
            gf[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    return float((a - b).norm() / max(a.norm(), b.norm(), 1e-12))


def check_grads(f, params, eps=1e-4, tol=1e-3):
    """Tape gradients vs finite differences; returns the worst relative error."""
    for p in params:
        p.grad = None
    f().backward()
    tape = [torch.zeros_like(p) if p.grad is None else p.grad.clone() for p in params]
    with torch.no_grad():
        numeric = fd_grad(f, params, eps)
    worst = max(rel_err(t, n) for t, n in zip(tape, numeric))
    assert worst < tol, worst
    return worst


def softmax_concat(scores_a, values_a, score_b, value_b):
    """Monolithic softmax over concatenated score lists."""
    s = torch.cat([scores_a, score_b.unsqueeze(-1)], dim=-1)
    v = torch.cat([values_a, value_b.unsqueeze(-2)], dim=-2)
    w = torch.exp(s - s.max(-1, keepdim=True).values)
    w = w / w.sum(-1, keepdim=True)
    return (w.unsqueeze(-1) * v).sum(-2)


def log_sum_exp(xs):
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))
