"""Dense-array primitives the mixers are written in.

Arrays are ``torch.Tensor``; torch autograd plays the role of the tape.  This
module adds the pieces the layers need on top of it: shape-checked matmul, a
masked softmax that also returns its log-normaliser, and a log-depth
first-order linear recurrence scan.
"""

from __future__ import annotations

import contextlib
import math
import os
import random

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DimensionError, NumericError

NEG_INF = float("-inf")


# --------------------------------------------------------------------------
# precision / determinism
# --------------------------------------------------------------------------

def set_precision(bits: int) -> None:
    """Select the global default float width (32 for runs, 64 for oracles)."""
    if bits == 32:
        torch.set_default_dtype(torch.float32)
    elif bits == 64:
        torch.set_default_dtype(torch.float64)
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


@contextlib.contextmanager
def precision(bits: int):
    old = torch.get_default_dtype()
    set_precision(bits)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def seed_everything(seed: int) -> torch.Generator:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


@contextlib.contextmanager
def denormals_flushed():
    """Treat subnormal floats as zero on CPU for the duration of the block.

    Long products of forget gates underflow into the subnormal range, where
    x86 arithmetic is several times slower; the values involved are below
    1e-38 and contribute nothing measurable.  The flag is process-global, so
    it is switched back off (the IEEE default) on exit.
    """
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def set_deterministic(enabled: bool = True, seed: int | None = None) -> None:
    """Deterministic mode: fixed seeds, one intra-op thread, no reordered reductions."""
    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    else:
        torch.use_deterministic_algorithms(False)
    if seed is not None:
        seed_everything(seed)


# --------------------------------------------------------------------------
# contractions
# --------------------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched ``a @ b``; only the leading batch axes may broadcast."""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError:
        raise DimensionError(f"matmul batch extents not broadcastable: {tuple(a.shape)} @ {tuple(b.shape)}") from None
    return a @ b


def linear(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """``x @ w`` for ``x[..., d_in]`` and a 2-D weight ``w[d_in, d_out]``."""
    if w.dim() != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"projection mismatch: input {tuple(x.shape)} vs weight {tuple(w.shape)}")
    return x @ w


# --------------------------------------------------------------------------
# softmax with log-sum-exp
# --------------------------------------------------------------------------

def softmax_lse(scores: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Masked softmax over the last axis plus its log-sum-exp.

    ``mask`` is True where an entry participates.  A row with no participating
    entries yields all-zero probabilities and ``lse = -inf`` instead of NaNs,
    and its gradients are zero.
    """
    if mask is None:
        mask = torch.ones_like(scores, dtype=torch.bool)
    elif mask.shape != scores.shape:
        mask = mask.expand_as(scores)
    live = torch.where(mask, scores, torch.zeros((), dtype=scores.dtype))
    if not torch.isfinite(live).all():
        raise NumericError("softmax_lse received non-finite scores")
    masked = torch.where(mask, scores, torch.full((), NEG_INF, dtype=scores.dtype))
    row_max = masked.amax(dim=-1, keepdim=True).detach()
    row_max = torch.where(torch.isfinite(row_max), row_max, torch.zeros((), dtype=scores.dtype))
    e = torch.exp(masked - row_max)
    total = e.sum(dim=-1, keepdim=True)
    nonempty = total > 0
    safe_total = torch.where(nonempty, total, torch.ones((), dtype=scores.dtype))
    probs = e / safe_total
    lse = torch.where(nonempty, row_max + torch.log(safe_total), torch.full((), NEG_INF, dtype=scores.dtype))
    return probs, lse.squeeze(-1)


# --------------------------------------------------------------------------
# first-order linear recurrence
# --------------------------------------------------------------------------

def linear_scan(a: torch.Tensor, b: torch.Tensor, h0: torch.Tensor | None = None, dim: int = -2) -> torch.Tensor:
    """All states of ``h_t = a_t * h_{t-1} + b_t`` along ``dim``.

    Inclusive Hillis-Steele scan with the combine
    ``(a2, b2) o (a1, b1) = (a1 * a2, a2 * b1 + b2)`` applied in time order;
    depth is ceil(log2 L).  Gradients come from differentiating the combine
    steps, so they are exact.
    """
    if a.shape != b.shape:
        raise DimensionError(f"linear_scan operands differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    dim = dim % a.dim()
    n = a.shape[dim]
    if n == 0:
        return b.clone()
    if h0 is not None:
        first = a.narrow(dim, 0, 1) * h0.unsqueeze(dim) + b.narrow(dim, 0, 1)
        b = torch.cat([first, b.narrow(dim, 1, n - 1)], dim=dim)
    offset = 1
    while offset < n:
        a_prev = a.narrow(dim, 0, n - offset)
        b_prev = b.narrow(dim, 0, n - offset)
        a_cur = a.narrow(dim, offset, n - offset)
        b_cur = b.narrow(dim, offset, n - offset)
        b = torch.cat([b.narrow(dim, 0, offset), a_cur * b_prev + b_cur], dim=dim)
        if offset * 2 < n:
            a = torch.cat([a.narrow(dim, 0, offset), a_cur * a_prev], dim=dim)
        offset *= 2
    return b


# --------------------------------------------------------------------------
# elementwise and friends
# --------------------------------------------------------------------------

def _same_shape(x: torch.Tensor, y: torch.Tensor, op: str) -> None:
    if x.shape != y.shape:
        raise DimensionError(f"{op}: shapes differ {tuple(x.shape)} vs {tuple(y.shape)}")


def add(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _same_shape(x, y, "add")
    return x + y


def mul(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _same_shape(x, y, "mul")
    return x * y


sigmoid = torch.sigmoid
exp = torch.exp


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def rmsnorm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    if gain.shape != x.shape[-1:]:
        raise DimensionError(f"rmsnorm gain {tuple(gain.shape)} does not match feature axis of {tuple(x.shape)}")
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * gain


def reshape(x: torch.Tensor, shape) -> torch.Tensor:
    if math.prod(shape) != x.numel() and -1 not in shape:
        raise DimensionError(f"cannot reshape {tuple(x.shape)} to {tuple(shape)}")
    return x.reshape(shape)


def transpose(x: torch.Tensor, d0: int, d1: int) -> torch.Tensor:
    return x.transpose(d0, d1)


def slice_(x: torch.Tensor, dim: int, start: int, stop: int) -> torch.Tensor:
    return x.narrow(dim, start, stop - start)


def concat(xs, dim: int = 0) -> torch.Tensor:
    try:
        return torch.cat(list(xs), dim=dim)
    except RuntimeError as e:
        raise DimensionError(f"concat: {e}") from None


def reduce_sum(x: torch.Tensor, dim=None, keepdim: bool = False) -> torch.Tensor:
    return x.sum() if dim is None else x.sum(dim=dim, keepdim=keepdim)


def embedding_lookup(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    from .errors import DataError

    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        bad = ((ids < 0) | (ids >= table.shape[0])).nonzero()[0].tolist()
        raise DataError(f"token id {int(ids[tuple(bad)])} at position {bad} outside vocabulary of {table.shape[0]}")
    return table[ids]


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean next-token cross-entropy; ``mask`` (bool, same shape as targets) selects counted positions."""
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    if mask is None:
        return nll.mean()
    m = mask.reshape(-1).to(nll.dtype)
    return (nll * m).sum() / m.sum().clamp_min(1.0)
