"""Training loop: AdamW, warmup + cosine schedule, global-norm clipping, evaluation."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import Corpus, SynthTask, sample_batch, sequential_batches, synth_batch
from .errors import NumericError
from .model import LanguageModel, model_forward, save_checkpoint
from .tensor import cross_entropy, denormals_flushed, seed_everything


@dataclass
class TrainSpec:
    lr_max: float = field(default=3e-3, metadata={"help": "peak learning rate"})
    lr_min: float = field(default=1e-5, metadata={"help": "final learning rate of the cosine decay"})
    warmup_fraction: float = field(default=0.05, metadata={"help": "fraction of steps with linear warmup"})
    batch_tokens: int = field(default=4096, metadata={"help": "tokens per optimizer step"})
    seq_len: int = field(default=256, metadata={"help": "training context length"})
    weight_decay: float = field(default=0.1, metadata={"help": "decoupled weight decay (matrices only)"})
    betas: list = field(default_factory=lambda: [0.9, 0.98], metadata={"help": "AdamW betas"})
    clip_norm: float = field(default=1.0, metadata={"help": "global gradient-norm clipping threshold"})
    steps: int = field(default=500, metadata={"help": "optimizer steps"})
    seed: int = field(default=0, metadata={"help": "seed for init and batch sampling"})
    eval_batches: int = field(default=16, metadata={"help": "validation batches for the final PPL (x64 samples for task accuracy)"})
    log_every: int = field(default=10, metadata={"help": "steps between loss records"})

    @property
    def batch_size(self) -> int:
        return max(1, self.batch_tokens // self.seq_len)

    @property
    def warmup_steps(self) -> int:
        return max(1, round(self.warmup_fraction * self.steps))


def lr_at(step: int, spec: TrainSpec) -> float:
    """Linear warmup to ``lr_max`` then cosine decay reaching ``lr_min`` at the last step."""
    w = spec.warmup_steps
    if step < w:
        return spec.lr_max * (step + 1) / w
    span = spec.steps - 1 - w
    if span <= 0:
        return spec.lr_min
    progress = min(1.0, (step - w) / span)
    return spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (1 + math.cos(math.pi * progress))


def make_optimizer(model: LanguageModel, spec: TrainSpec) -> torch.optim.AdamW:
    decay = [p for p in model.parameters() if p.dim() >= 2]
    no_decay = [p for p in model.parameters() if p.dim() < 2]
    groups = [{"params": decay, "weight_decay": spec.weight_decay}, {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=spec.lr_max, betas=tuple(spec.betas), eps=1e-8)


def global_grad_norm(model: torch.nn.Module) -> float:
    norms = [p.grad.detach().pow(2).sum() for p in model.parameters() if p.grad is not None]
    return float(torch.sqrt(torch.stack(norms).sum())) if norms else 0.0


@dataclass
class RunReport:
    config: dict
    history: list = field(default_factory=list)  # rows: step, loss, lr, grad_norm
    final_train_loss: float = float("nan")
    val_loss: float | None = None
    val_ppl: float | None = None
    task_accuracy: float | None = None
    wall_seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, out_dir, name: str = "report", figure: bool = True) -> dict:
        """JSON metrics, per-step CSV and (optionally) a loss-curve figure; returns the paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"json": out / f"{name}.json", "csv": out / f"{name}_loss.csv"}
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(paths["csv"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "lr", "grad_norm"])
            w.writerows([r["step"], r["loss"], r["lr"], r["grad_norm"]] for r in self.history)
        if figure and self.history:
            from .plots import plot_loss_curve

            paths["figure"] = out / f"{name}_loss.png"
            plot_loss_curve(self.history, paths["figure"], title=name)
        return {k: str(v) for k, v in paths.items()}


def _next_batch(source, spec: TrainSpec, chunk_size: int, step: int):
    seed = spec.seed * 1_000_003 + step
    if isinstance(source, Corpus):
        return sample_batch(source, spec.batch_size, spec.seq_len, chunk_size, seed=seed)
    return synth_batch(source, spec.batch_size, chunk_size, seed=seed)


def train(
    model: LanguageModel,
    source,
    spec: TrainSpec,
    out_dir=None,
    run_config: dict | None = None,
    checkpoint_every: int | None = None,
) -> RunReport:
    """Train ``model`` in place on a ``Corpus`` or ``SynthTask``."""
    with denormals_flushed():
        report = _train(model, source, spec, out_dir, run_config, checkpoint_every)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, Path(out_dir) / "final.ratk")
        report.write(out_dir)
    return report


def _train(model, source, spec, out_dir, run_config, checkpoint_every) -> RunReport:
    chunk = model.cfg.chunk_size if "rat" in model.cfg.layer_kinds else 1
    opt = make_optimizer(model, spec)
    report = RunReport(config=run_config or {"model": model.cfg.to_dict(), "train": dataclasses.asdict(spec)})
    seed_everything(spec.seed)
    t0 = time.perf_counter()
    smoothed = None
    model.train()
    for step in range(spec.steps):
        lr = lr_at(step, spec)
        for g in opt.param_groups:
            g["lr"] = lr
        batch = _next_batch(source, spec, chunk, step)
        try:
            loss = cross_entropy(model_forward(batch.inputs, model), batch.targets, batch.mask)
        except NumericError as e:
            raise NumericError(f"non-finite values at step {step}: {e}") from None
        if not torch.isfinite(loss):
            raise NumericError(f"loss became non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), spec.clip_norm))
        opt.step()
        value = loss.item()
        smoothed = value if smoothed is None else 0.9 * smoothed + 0.1 * value
        if step % spec.log_every == 0 or step == spec.steps - 1:
            report.history.append({"step": step, "loss": value, "lr": lr, "grad_norm": gnorm})
        if out_dir is not None and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_checkpoint(model, Path(out_dir) / f"step{step + 1}.ratk")
    report.final_train_loss = smoothed if smoothed is not None else float("nan")
    model.eval()
    if isinstance(source, Corpus):
        report.val_loss = evaluate_loss(model, source, spec.seq_len, spec.batch_size, spec.eval_batches)
        report.val_ppl = math.exp(report.val_loss)
    else:
        report.task_accuracy = task_accuracy(model, source, n_samples=64 * spec.eval_batches)
    report.wall_seconds = time.perf_counter() - t0
    return report


@torch.no_grad()
def evaluate_loss(model: LanguageModel, corpus: Corpus, seq_len: int, batch: int = 8, max_batches: int | None = None) -> float:
    """Mean next-token cross-entropy (nats) over the held-out split at ``seq_len`` context."""
    chunk = model.cfg.chunk_size if "rat" in model.cfg.layer_kinds else 1
    total, count = 0.0, 0
    for b in sequential_batches(corpus, batch, seq_len, chunk, "val", max_batches):
        n = b.n_tokens
        total += float(cross_entropy(model_forward(b.inputs, model), b.targets, b.mask)) * n
        count += n
    return total / count


@torch.no_grad()
def task_accuracy(model: LanguageModel, task: SynthTask, n_samples: int = 256, seed: int = 10_000_019, batch: int = 64) -> float:
    """Exact-match accuracy at answer positions, argmax restricted to the answer alphabet."""
    chunk = model.cfg.chunk_size if "rat" in model.cfg.layer_kinds else 1
    answer_ids = torch.tensor(task.answer_ids)
    correct = total = 0
    for i in range(0, n_samples, batch):
        b = synth_batch(task, min(batch, n_samples - i), chunk, seed=seed + i)
        logits = model_forward(b.inputs, model)[..., answer_ids]
        pred = answer_ids[logits.argmax(-1)]
        hit = (pred == b.targets) & b.mask
        correct += int(hit.sum())
        total += int(b.mask.sum())
    return correct / total
