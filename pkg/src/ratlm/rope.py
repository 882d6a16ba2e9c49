"""Rotary position encoding by token index, by chunk index, or not at all."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError

MODES = ("token_index", "chunk_index", "none")


@dataclass(frozen=True)
class RopeSpec:
    mode: str = "token_index"
    base: float = 10000.0
    head_dim: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"rope mode must be one of {MODES}, got {self.mode!r}")
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ConfigError(f"rope head_dim must be a positive even integer, got {self.head_dim}")
        if not self.base > 1:
            raise ConfigError(f"rope base must exceed 1, got {self.base}")

    @property
    def enabled(self) -> bool:
        return self.mode != "none"

    def positions(self, token_pos: torch.Tensor, chunk_size: int) -> torch.Tensor:
        """Rotation index for each token position under this mode."""
        if self.mode == "chunk_index":
            return torch.div(token_pos, chunk_size, rounding_mode="floor")
        return token_pos


def _angles(index: torch.Tensor, head_dim: int, base: float, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = index.to(torch.float64).unsqueeze(-1) * inv_freq
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def rope_rotate(x: torch.Tensor, index, spec: RopeSpec) -> torch.Tensor:
    """Rotate pairs ``(2i, 2i+1)`` of the last axis by ``index * base**(-2i/head_dim)``.

    ``index`` is an int or an integer tensor broadcastable against ``x[..., 0]``.
    """
    if x.shape[-1] != spec.head_dim:
        raise ConfigError(f"rope head_dim {spec.head_dim} does not match input width {x.shape[-1]}")
    if not torch.is_tensor(index):
        index = torch.tensor(index)
    cos, sin = _angles(index, spec.head_dim, spec.base, x.dtype)
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out_even = x_even * cos - x_odd * sin
    out_odd = x_even * sin + x_odd * cos
    return torch.stack([out_even, out_odd], dim=-1).flatten(-2)
