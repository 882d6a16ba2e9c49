"""Command-line entry point: ``ratlm {train,generate,eval,bench,inspect}``.

Structural choices live in the JSON config; flags only pick files and modes.
Errors go to stderr as one JSON line; exit codes are 1 config, 2 data,
3 numeric divergence, 4 resource cap.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import torch

from . import config as config_mod
from .bench import bench, parse_grid, write_csv
from .cache import decode_step, prefill
from .data import SynthTask, ingest
from .errors import ConfigError, DataError, RatError, ResourceError
from .model import SEP_ID, LanguageModel, count_params, load_checkpoint
from .tensor import seed_everything, set_deterministic
from .train import evaluate_loss, task_accuracy, train


def _apply_determinism(args, cfg=None) -> int:
    seed = args.seed if args.seed is not None else (cfg.seed if cfg is not None else 0)
    deterministic = args.deterministic or (cfg is not None and cfg.deterministic)
    set_deterministic(deterministic, seed)
    return seed


def cmd_train(args) -> int:
    cfg = config_mod.load(args.config)
    seed = _apply_determinism(args, cfg)
    spec = dataclasses.replace(cfg.train, seed=seed if args.seed is not None else cfg.train.seed)
    seed_everything(spec.seed)
    model = LanguageModel(cfg.model)
    if cfg.objective == "corpus":
        if not cfg.data.paths:
            raise ConfigError("objective 'corpus' needs data.paths")
        source = ingest(cfg.data.paths, cfg.data.val_fraction, cfg.data.max_bytes)
    else:
        source = cfg.task
    resolved = cfg.to_dict()
    resolved["train"] = dataclasses.asdict(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    report = train(model, source, spec, out_dir=out, run_config=resolved, checkpoint_every=args.checkpoint_every)
    summary = {"val_loss": report.val_loss, "val_ppl": report.val_ppl, "task_accuracy": report.task_accuracy,
               "final_train_loss": report.final_train_loss, "out": str(out)}
    print(json.dumps(summary), file=sys.stderr)
    return 0


def _read_prompt(path) -> list[int]:
    if path is None:
        return []
    try:
        return list(Path(path).read_bytes())
    except FileNotFoundError:
        raise DataError(f"prompt file {path} not found") from None


def cmd_generate(args) -> int:
    seed = _apply_determinism(args)
    model = load_checkpoint(args.ckpt)
    model.eval()
    ids = _read_prompt(args.prompt_file) or [SEP_ID]
    timing = {"prompt_tokens": len(ids), "new_tokens": 0, "prefill_ms": 0.0, "decode_ms": []}
    if args.max_new > 0:
        gen = torch.Generator().manual_seed(seed)
        t0 = time.perf_counter()
        logits, cache = prefill(torch.tensor([ids]), model)
        timing["prefill_ms"] = (time.perf_counter() - t0) * 1e3
        out = sys.stdout.buffer
        for i in range(args.max_new):
            if args.greedy or args.temperature <= 0:
                nxt = int(logits[0].argmax())
            else:
                probs = torch.softmax(logits[0] / args.temperature, dim=-1)
                nxt = int(torch.multinomial(probs, 1, generator=gen))
            if nxt < 256:
                out.write(bytes([nxt]))
                out.flush()
            timing["new_tokens"] += 1
            if i + 1 < args.max_new:
                t0 = time.perf_counter()
                logits, cache = decode_step(nxt, cache, model)
                timing["decode_ms"].append((time.perf_counter() - t0) * 1e3)
    if args.timing_json:
        Path(args.timing_json).write_text(json.dumps(timing, indent=2))
    return 0


def cmd_eval(args) -> int:
    cfg = config_mod.load(args.config) if args.config else config_mod.resolve({})
    _apply_determinism(args, cfg)
    model = load_checkpoint(args.ckpt)
    model.eval()
    if args.task == "ppl":
        paths = args.data or cfg.data.paths
        if not paths:
            raise ConfigError("eval --task ppl needs --data or data.paths in the config")
        corpus = ingest(paths, cfg.data.val_fraction, cfg.data.max_bytes)
        loss = evaluate_loss(model, corpus, cfg.train.seq_len, cfg.train.batch_size, cfg.train.eval_batches)
        result = {"task": "ppl", "val_loss": loss, "val_ppl": float(torch.tensor(loss).exp())}
    else:
        task = dataclasses.replace(cfg.task, kind=args.task)
        acc = task_accuracy(model, task, n_samples=args.samples)
        result = {"task": args.task, "accuracy": acc, "samples": args.samples, "chance": 1.0 / task.value_alphabet}
    print(json.dumps(result))
    return 0


def cmd_bench(args) -> int:
    cfg = config_mod.load(args.config) if args.config else config_mod.resolve({})
    seed = _apply_determinism(args, cfg)
    grid = parse_grid(args.grid)
    b = cfg.bench
    rows = bench(args.mode, args.kind, grid["T"], grid.get("L", [16]), B=b.batch, D=b.d_model, H=b.n_heads,
                 reps=b.reps, warmup=b.warmup, window=b.window, byte_cap=b.byte_cap, seed=seed)
    write_csv(rows, args.out)
    return 0


def cmd_inspect(args) -> int:
    if args.ckpt:
        cfg = load_checkpoint(args.ckpt).cfg
    elif args.config:
        cfg = config_mod.load(args.config).model
    else:
        raise ConfigError("inspect needs --ckpt or --config")
    counts = count_params(cfg)
    print(json.dumps({"config": cfg.to_dict(), "params": counts, "total": counts["total"]}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed (default: from config, else 0)")
    common.add_argument("--deterministic", action="store_true", help="single-thread, fixed-order reductions")
    p = argparse.ArgumentParser(
        prog="ratlm",
        description="RAT language-model toolkit: train, generate, evaluate, benchmark, inspect.",
        epilog="config keys (JSON, dotted by section) and their defaults:\n" + config_mod.describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--checkpoint-every", type=int, default=None)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", parents=[common], help="prefill a prompt and decode new bytes to stdout")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--prompt-file", default=None)
    g.add_argument("--max-new", type=int, default=64)
    g.add_argument("--greedy", action="store_true", default=True)
    g.add_argument("--sample", dest="greedy", action="store_false", help="sample with --temperature instead")
    g.add_argument("--temperature", type=float, default=1.0)
    g.add_argument("--timing-json", default="generate_timing.json")
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", parents=[common], help="print an evaluation metric as JSON")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", choices=["ppl", "copy", "kv_retrieval"], required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--data", nargs="*", default=None)
    e.add_argument("--samples", type=int, default=512)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="single-layer latency grid to CSV (+ PNG)")
    b.add_argument("--mode", choices=["train", "prefill", "generate"], required=True)
    b.add_argument("--kind", choices=["rat", "attn", "swa", "rnn"], required=True)
    b.add_argument("--grid", required=True, help='e.g. "T=1024,4096,16384;L=4,16,64"')
    b.add_argument("--out", required=True)
    b.add_argument("--config", default=None)
    b.set_defaults(func=cmd_bench)

    i = sub.add_parser("inspect", parents=[common], help="print config and parameter counts")
    i.add_argument("--ckpt", default=None)
    i.add_argument("--config", default=None)
    i.set_defaults(func=cmd_inspect)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except RatError as e:
        return _fail(e.kind, str(e), e.exit_code)
    except MemoryError as e:
        return _fail(ResourceError.kind, str(e) or "out of memory", ResourceError.exit_code)


if __name__ == "__main__":
    sys.exit(main())
