"""Gated linear RNN mixer: an EMA over values with per-dimension forget and output gates."""

from __future__ import annotations

import torch
from torch import nn

from .tensor import linear, linear_scan


def init_weight(d_in: int, d_out: int, std: float) -> nn.Parameter:
    return nn.Parameter(torch.randn(d_in, d_out) * std)


def gated_recurrence(v: torch.Tensor, g: torch.Tensor, h0: torch.Tensor | None = None, dim: int = -2) -> torch.Tensor:
    """``h_t = g_t * h_{t-1} + (1 - g_t) * v_t`` for every t along ``dim``."""
    return linear_scan(g, (1 - g) * v, h0, dim=dim)


class RNNMixer(nn.Module):
    """Parameters ``w_v, w_g, w_z, w_o`` (each D x D, no biases): 4 D^2 in total."""

    kind = "rnn"

    def __init__(self, d_model: int, init_std: float = 0.02):
        super().__init__()
        self.d_model = d_model
        self.w_v = init_weight(d_model, d_model, init_std)
        self.w_g = init_weight(d_model, d_model, init_std)
        self.w_z = init_weight(d_model, d_model, init_std)
        self.w_o = init_weight(d_model, d_model, init_std)

    def project(self, x: torch.Tensor):
        v = linear(x, self.w_v)
        g = torch.sigmoid(linear(x, self.w_g))
        z = torch.sigmoid(linear(x, self.w_z))
        return v, g, z

    def forward(self, x: torch.Tensor, h0: torch.Tensor | None = None) -> torch.Tensor:
        return rnn_forward(x, self, h0)[0]


def rnn_forward(x: torch.Tensor, p: RNNMixer, h0: torch.Tensor | None = None):
    """Run the mixer over ``x[B, T, D]``; returns ``(y, h_T)`` so a caller can continue the sequence."""
    v, g, z = p.project(x)
    h = gated_recurrence(v, g, h0)
    y = linear(z * h, p.w_o)
    h_last = h[:, -1] if h.shape[1] else (h0 if h0 is not None else x.new_zeros(x.shape[0], p.d_model))
    return y, h_last
