"""Closed-form cost model and a wall-clock harness for single mixing layers."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .attention import AttnMixer
from .cache import mixer_step, synthetic_state
from .errors import ConfigError
from .rat import RATMixer
from .recurrence import RNNMixer
from .tensor import denormals_flushed

CSV_COLUMNS = ["mode", "kind", "T", "L", "B", "reps", "median_ms", "p10_ms", "p90_ms", "cache_bytes", "flops_per_token"]
KINDS = ("rat", "attn", "swa", "rnn")
MODES = ("train", "prefill", "generate")


# --------------------------------------------------------------------------
# cost model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FlopCount:
    """Multiply-adds for one mixing layer at the last position of a length-T sequence."""

    projections: int
    recurrence: int
    scores: int  # query-key dot products plus the weighted value sum
    merge: int
    output_gate: int

    @property
    def total(self) -> int:
        return self.projections + self.recurrence + self.scores + self.merge + self.output_gate


def attended_keys(kind: str, T: int, L: int = 1, window: int | None = None) -> int:
    """Keys the final query of a length-T sequence scores against."""
    if kind == "attn":
        return T
    if kind == "swa":
        return min(T, window if window is not None else T)
    if kind == "rat":
        return (T - 1) // L + 1  # earlier-chunk anchors plus the running key
    if kind == "rnn":
        return 0
    raise ConfigError(f"unknown kind {kind!r}")


def flops_per_token(kind: str, T: int, L: int, D: int, H: int, window: int | None = None) -> FlopCount:
    if D % H:
        raise ConfigError(f"D={D} not divisible by H={H}")
    dh = D // H
    n_keys = attended_keys(kind, T, L, window)
    if kind in ("attn", "swa"):
        return FlopCount(4 * D * D, 0, 2 * n_keys * D, 0, 0)
    if kind == "rnn":
        return FlopCount(4 * D * D, 2 * D, 0, 0, D)
    if kind == "rat":
        return FlopCount(4 * D * D + 2 * D * dh, 4 * D, 2 * n_keys * D, 2 * D, D)
    raise ConfigError(f"unknown kind {kind!r}")


def kv_cache_bytes(kind: str, T: int, L: int, D: int, B: int = 1, itemsize: int = 4, window: int | None = None) -> int:
    """Bytes of per-token / per-chunk key-value entries after T tokens (excludes fixed state)."""
    if kind == "attn":
        n = T
    elif kind == "swa":
        n = min(T, window if window is not None else T)
    elif kind == "rat":
        n = T // L
    elif kind == "rnn":
        n = 0
    else:
        raise ConfigError(f"unknown kind {kind!r}")
    return B * n * 2 * D * itemsize


def state_bytes(kind: str, D: int, B: int = 1, itemsize: int = 4) -> int:
    """Fixed-size recurrent state: running key+value for RAT, hidden vector for RNN."""
    return B * {"rat": 2 * D, "rnn": D}.get(kind, 0) * itemsize


def cache_bytes_model(kind: str, T: int, L: int, D: int, B: int = 1, itemsize: int = 4, window: int | None = None) -> int:
    return kv_cache_bytes(kind, T, L, D, B, itemsize, window) + state_bytes(kind, D, B, itemsize)


# --------------------------------------------------------------------------
# timing
# --------------------------------------------------------------------------

@dataclass
class BenchResult:
    mode: str
    kind: str
    T: int
    L: int
    B: int
    reps: int
    median_ms: float | str
    p10_ms: float | str
    p90_ms: float | str
    cache_bytes: int
    flops_per_token: int

    @property
    def oom(self) -> bool:
        return self.median_ms == "OOM"


def summarize(samples_ms) -> tuple[float, float, float]:
    a = np.asarray(samples_ms, dtype=float)
    return float(statistics.median(a)), float(np.percentile(a, 10)), float(np.percentile(a, 90))


def time_fn(fn, reps: int = 5, warmup: int = 1) -> list[float]:
    return time_interleaved([fn], reps, warmup)[0]


def time_interleaved(fns, reps: int = 5, warmup: int = 1) -> list[list[float]]:
    """Round-robin timing so slow drift hits every candidate equally."""
    out = [[] for _ in fns]
    with denormals_flushed():
        for _ in range(warmup):
            for fn in fns:
                fn()
        for _ in range(reps):
            for i, fn in enumerate(fns):
                t0 = time.perf_counter()
                fn()
                out[i].append((time.perf_counter() - t0) * 1e3)
    return out


def build_layer(kind: str, D: int, H: int, L: int = 16, window: int | None = None, seed: int = 0):
    torch.manual_seed(seed)
    if kind == "rat":
        return RATMixer(D, H, L)
    if kind == "attn":
        return AttnMixer(D, H)
    if kind == "swa":
        return AttnMixer(D, H, window=window or 1024)
    if kind == "rnn":
        return RNNMixer(D)
    raise ConfigError(f"unknown kind {kind!r}")


def _estimate_bytes(mode: str, kind: str, T: int, L: int, D: int, B: int, window) -> int:
    if mode == "generate":
        return cache_bytes_model(kind, T, L, D, B, 4, window)
    act = B * T * D * 4 * 12
    return act * (3 if mode == "train" else 1)


def make_step(mode: str, layer, T: int, B: int, D: int, seed: int = 0):
    """Zero-argument callable performing one timed unit of work."""
    gen = torch.Generator().manual_seed(seed)
    if mode == "generate":
        state = synthetic_state(layer, T, B, gen)
        x = torch.randn(B, D, generator=gen)

        def step():
            with torch.no_grad():
                mixer_step(x, layer, state)
        return step
    x = torch.randn(B, T, D, generator=gen)
    if mode == "prefill":
        def step():
            with torch.no_grad():
                layer(x)
        return step
    xg = x.clone().requires_grad_(True)

    def step():
        layer.zero_grad(set_to_none=True)
        xg.grad = None
        layer(xg).sum().backward()
    return step


def bench(
    mode: str,
    kind: str,
    Ts,
    Ls=(16,),
    B: int = 1,
    D: int = 256,
    H: int = 4,
    reps: int = 5,
    warmup: int = 1,
    window: int | None = 1024,
    byte_cap: int | None = None,
    seed: int = 0,
) -> list[BenchResult]:
    """Time one layer (with its projections) over a grid of sequence lengths / positions.

    ``train`` times forward+backward over the whole sequence, ``prefill`` the
    forward, ``generate`` one decode step at position T with a pre-built cache.
    Grid points whose estimated memory exceeds ``byte_cap``, or that raise an
    allocation failure, become OOM rows.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    if reps < 5:
        raise ConfigError("reps must be at least 5")
    rows = []
    for T in Ts:
        for L in (Ls if kind == "rat" else (T if kind == "rnn" else 1,)):
            if kind == "rat" and mode != "generate" and T % L:
                raise ConfigError(f"T={T} not a multiple of L={L}")
            cb = cache_bytes_model(kind, T, L, D, B, 4, window)
            fl = flops_per_token(kind, T, L, D, H, window).total
            base = dict(mode=mode, kind=kind, T=T, L=L, B=B, reps=reps, cache_bytes=cb, flops_per_token=fl)
            if byte_cap is not None and _estimate_bytes(mode, kind, T, L, D, B, window) > byte_cap:
                rows.append(BenchResult(median_ms="OOM", p10_ms="OOM", p90_ms="OOM", **base))
                continue
            try:
                layer = build_layer(kind, D, H, L, window, seed)
                samples = time_fn(make_step(mode, layer, T, B, D, seed), reps, warmup)
            except (MemoryError, RuntimeError) as e:
                if isinstance(e, RuntimeError) and "memory" not in str(e).lower():
                    raise
                rows.append(BenchResult(median_ms="OOM", p10_ms="OOM", p90_ms="OOM", **base))
                continue
            med, p10, p90 = summarize(samples)
            rows.append(BenchResult(median_ms=med, p10_ms=p10, p90_ms=p90, **base))
    return rows


def parse_grid(text: str) -> dict:
    """``"T=1024,4096;L=4,16"`` -> ``{"T": [1024, 4096], "L": [4, 16]}``."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise ConfigError(f"bad grid component {part!r}; expected NAME=v1,v2")
        name, vals = part.split("=", 1)
        name = name.strip()
        if name not in ("T", "L"):
            raise ConfigError(f"grid axis must be T or L, got {name!r}")
        try:
            out[name] = [int(v) for v in vals.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"grid values for {name} must be integers: {vals!r}") from None
    if "T" not in out:
        raise ConfigError("grid needs a T axis")
    return out


def write_csv(rows, path, figure: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dict_rows = [asdict(r) if not isinstance(r, dict) else r for r in rows]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in dict_rows:
            w.writerow({k: r[k] for k in CSV_COLUMNS})
    if figure and dict_rows:
        from .plots import plot_bench

        plot_bench(dict_rows, path.with_suffix(".png"))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))

