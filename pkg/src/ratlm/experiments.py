"""Trend experiments: prefill scaling, decode flatness, PPL ordering, retrieval gap.

Each driver returns plain dicts and, given ``out_dir``, writes a CSV next to a
PNG figure.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import statistics
import sysconfig
from pathlib import Path

from .bench import build_layer, make_step, summarize, time_interleaved
from .data import Corpus, SynthTask, ingest
from .model import LanguageModel, ModelConfig
from .tensor import seed_everything
from .train import TrainSpec, train

DEFAULT_VARIANTS = {
    "attention": dict(layer_pattern=["attn"]),
    "rat_L4": dict(layer_pattern=["rat"], chunk_size=4),
    "rat_L16": dict(layer_pattern=["rat"], chunk_size=16),
    "rnn": dict(layer_pattern=["rnn"]),
}


def _write_rows(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------------------
# latency trends
# --------------------------------------------------------------------------

def prefill_scaling(Ts=(1024, 4096, 16384), L: int = 16, D: int = 128, H: int = 2, reps: int = 5,
                    warmup: int = 1, out_dir=None, seed: int = 0) -> dict:
    """Median prefill latency of one attention and one RAT layer per T, and their ratio."""
    rows = []
    for T in Ts:
        layers = [build_layer("attn", D, H, seed=seed), build_layer("rat", D, H, L, seed=seed)]
        steps = [make_step("prefill", layer, T, 1, D, seed) for layer in layers]
        attn_ms, rat_ms = time_interleaved(steps, reps, warmup)
        a, r = summarize(attn_ms), summarize(rat_ms)
        rows.append({"T": T, "attn_median_ms": a[0], "attn_p10_ms": a[1], "attn_p90_ms": a[2],
                     "rat_median_ms": r[0], "rat_p10_ms": r[1], "rat_p90_ms": r[2], "ratio": a[0] / r[0]})
    if out_dir is not None:
        from .plots import plot_bench

        out = Path(out_dir)
        _write_rows(rows, out / "prefill_scaling.csv")
        bench_rows = [{"mode": "prefill", "kind": k, "L": L if k == "rat" else 1, "T": row["T"],
                       "median_ms": row[f"{k}_median_ms"]} for row in rows for k in ("attn", "rat")]
        plot_bench(bench_rows, out / "prefill_scaling.png")
    return {"rows": rows, "ratios": [row["ratio"] for row in rows]}


def decode_flatness(kind: str = "rnn", positions=(1024, 4096, 16384), D: int = 128, H: int = 2, L: int = 16,
                    reps: int = 200, warmup: int = 20, out_dir=None, seed: int = 0) -> dict:
    """One-step decode latency at several cache positions, timed round-robin.

    ``spread`` is max/min of the medians; ``noise`` the largest p90/p10 among them.
    """
    layer = build_layer(kind, D, H, L, seed=seed)
    steps = [make_step("generate", layer, p, 1, D, seed) for p in positions]
    samples = time_interleaved(steps, reps, warmup)
    rows = []
    for p, s in zip(positions, samples):
        med, p10, p90 = summarize(s)
        rows.append({"kind": kind, "position": p, "median_ms": med, "p10_ms": p10, "p90_ms": p90})
    medians = [r["median_ms"] for r in rows]
    result = {"rows": rows, "spread": max(medians) / min(medians), "noise": max(r["p90_ms"] / r["p10_ms"] for r in rows)}
    if out_dir is not None:
        from .plots import plot_bench

        out = Path(out_dir)
        _write_rows(rows, out / f"decode_{kind}.csv")
        plot_bench([{"mode": "generate", "kind": kind, "L": L, "T": r["position"], "median_ms": r["median_ms"]}
                    for r in rows], out / f"decode_{kind}.png")
    return result


# --------------------------------------------------------------------------
# training trends
# --------------------------------------------------------------------------

def stdlib_corpus(max_bytes: int | None = None, val_fraction: float = 0.05) -> Corpus:
    """Byte corpus from the interpreter's own standard-library sources, in sorted order."""
    files = sorted(Path(sysconfig.get_paths()["stdlib"]).glob("*.py"))
    return ingest(files, val_fraction, max_bytes)


def _train_variants(source, base: dict, variants: dict, spec: TrainSpec, seeds, metric: str, out_dir) -> dict:
    results = {name: [] for name in variants}
    records = []
    for name, override in variants.items():
        for seed in seeds:
            seed_everything(seed)
            model = LanguageModel(ModelConfig(**{**base, **override}))
            run_spec = dataclasses.replace(spec, seed=seed)
            run_dir = None if out_dir is None else Path(out_dir) / f"{name}_seed{seed}"
            report = train(model, source, run_spec, out_dir=run_dir)
            value = getattr(report, metric)
            results[name].append(value)
            records.append({"variant": name, "seed": seed, metric: value, "final_train_loss": report.final_train_loss,
                            "wall_seconds": report.wall_seconds})
    return {"results": results, "records": records, "medians": {k: statistics.median(v) for k, v in results.items()}}


def ppl_ordering(corpus: Corpus | None = None, spec: TrainSpec | None = None, seeds=(0, 1, 2),
                 base: dict | None = None, variants: dict | None = None, out_dir=None) -> dict:
    """Train each variant under identical hyperparameters; report validation loss (nats) per seed."""
    corpus = corpus if corpus is not None else stdlib_corpus(max_bytes=None)
    spec = spec or TrainSpec(steps=1200, batch_tokens=4096, seq_len=256, lr_max=3e-3)
    base = base or dict(d_model=128, n_heads=2, head_dim=64, n_layers=2)
    variants = variants or DEFAULT_VARIANTS
    out = _train_variants(corpus, base, variants, spec, seeds, "val_loss", out_dir)
    if out_dir is not None:
        from .plots import plot_ordering

        _write_rows(out["records"], Path(out_dir) / "ppl_ordering.csv")
        plot_ordering(out["results"], Path(out_dir) / "ppl_ordering.png")
        (Path(out_dir) / "ppl_ordering.json").write_text(json.dumps(
            {"spec": dataclasses.asdict(spec), "base": base, "medians": out["medians"]}, indent=2))
    return out


def retrieval_gap(task: SynthTask | None = None, spec: TrainSpec | None = None, seeds=(0, 1, 2),
                  base: dict | None = None, variants: dict | None = None, out_dir=None) -> dict:
    """Train each variant on key-value retrieval; report answer accuracy per seed."""
    task = task or SynthTask(kind="kv_retrieval", seq_len=256, num_pairs=8, min_distance=128)
    spec = spec or TrainSpec(steps=1500, batch_tokens=4096, seq_len=task.seq_len, lr_max=3e-3)
    base = base or dict(d_model=128, n_heads=2, head_dim=64, n_layers=2)
    variants = variants or {"rat_L4": DEFAULT_VARIANTS["rat_L4"], "rnn": DEFAULT_VARIANTS["rnn"]}
    out = _train_variants(task, base, variants, spec, seeds, "task_accuracy", out_dir)
    if out_dir is not None:
        from .plots import plot_ordering

        _write_rows(out["records"], Path(out_dir) / "retrieval.csv")
        plot_ordering(out["results"], Path(out_dir) / "retrieval.png", ylabel="answer accuracy")
    return out
