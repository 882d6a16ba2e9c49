"""Byte-level corpora and synthetic copy / key-value retrieval tasks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError
from .model import PAD_ID, SEP_ID


@dataclass
class Corpus:
    stream: np.ndarray  # uint16 token ids, documents joined by SEP_ID
    n_docs: int
    val_fraction: float = 0.05

    @property
    def split_point(self) -> int:
        return int(len(self.stream) * (1 - self.val_fraction))

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.stream[: self.split_point]
        if name == "val":
            return self.stream[self.split_point:]
        raise ValueError(f"unknown split {name!r}")


def _expand(paths) -> list[Path]:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(f for f in p.rglob("*") if f.is_file()))
        elif p.is_file():
            files.append(p)
        else:
            raise DataError(f"corpus path {p} does not exist")
    return files


def pack_documents(docs, val_fraction: float = 0.05) -> Corpus:
    """Join byte strings with exactly one separator between consecutive documents."""
    pieces = []
    n = 0
    for doc in docs:
        if not doc:
            continue
        if pieces:
            pieces.append(np.array([SEP_ID], dtype=np.uint16))
        pieces.append(np.frombuffer(doc, dtype=np.uint8).astype(np.uint16))
        n += 1
    if not pieces:
        raise DataError("corpus is empty")
    return Corpus(np.concatenate(pieces), n, val_fraction)


def ingest(paths, val_fraction: float = 0.05, max_bytes: int | None = None) -> Corpus:
    """Read UTF-8 text files (or directories of them) as raw bytes, one document per file."""
    docs, total = [], 0
    for f in _expand(paths):
        b = f.read_bytes()
        if max_bytes is not None and total + len(b) > max_bytes:
            b = b[: max_bytes - total]
        docs.append(b)
        total += len(b)
        if max_bytes is not None and total >= max_bytes:
            break
    return pack_documents(docs, val_fraction)


@dataclass
class Batch:
    inputs: torch.Tensor   # [B, T'] with T' a multiple of the chunk size
    targets: torch.Tensor  # [B, T']
    mask: torch.Tensor     # [B, T'] bool, False on padding

    @property
    def n_tokens(self) -> int:
        return int(self.mask.sum())


def pad_to_multiple(inputs: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor, multiple: int) -> Batch:
    t_len = inputs.shape[1]
    extra = (-t_len) % multiple
    if extra:
        b = inputs.shape[0]
        inputs = torch.cat([inputs, torch.full((b, extra), SEP_ID, dtype=inputs.dtype)], dim=1)
        targets = torch.cat([targets, torch.full((b, extra), PAD_ID, dtype=targets.dtype)], dim=1)
        mask = torch.cat([mask, torch.zeros(b, extra, dtype=torch.bool)], dim=1)
    return Batch(inputs, targets, mask)


def sample_batch(corpus: Corpus, batch: int, seq_len: int, chunk_size: int = 1, seed: int = 0, split: str = "train") -> Batch:
    """``batch`` random windows of ``seq_len`` next-token pairs, padded to a multiple of ``chunk_size``."""
    data = corpus.split(split)
    if len(data) < seq_len + 1:
        raise DataError(f"{split} split has {len(data)} tokens, need at least {seq_len + 1}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(data) - seq_len, size=batch)
    windows = np.stack([data[s:s + seq_len + 1] for s in starts]).astype(np.int64)
    w = torch.from_numpy(windows)
    return pad_to_multiple(w[:, :-1], w[:, 1:], torch.ones(batch, seq_len, dtype=torch.bool), chunk_size)


def sequential_batches(corpus: Corpus, batch: int, seq_len: int, chunk_size: int = 1, split: str = "val", limit: int | None = None):
    """Non-overlapping windows covering the split in order (for evaluation)."""
    data = corpus.split(split)
    n_windows = (len(data) - 1) // seq_len
    if limit is not None:
        n_windows = min(n_windows, limit * batch)
    if n_windows == 0:
        raise DataError(f"{split} split too short for seq_len {seq_len}")
    for i in range(0, n_windows, batch):
        idx = range(i, min(n_windows, i + batch))
        windows = np.stack([data[j * seq_len:j * seq_len + seq_len + 1] for j in idx]).astype(np.int64)
        w = torch.from_numpy(windows)
        yield pad_to_multiple(w[:, :-1], w[:, 1:], torch.ones(len(idx), seq_len, dtype=torch.bool), chunk_size)


# --------------------------------------------------------------------------
# synthetic tasks
# --------------------------------------------------------------------------

# token layout inside the byte vocabulary
KEY_BASE = ord("A")
VALUE_BASE = ord("a")
FILLER_BASE = ord("0")
QUERY_ID = ord("?")
MAX_ALPHABET = 26


@dataclass
class SynthTask:
    kind: str = field(default="kv_retrieval", metadata={"help": "copy or kv_retrieval"})
    seq_len: int = field(default=256, metadata={"help": "input tokens per sample"})
    num_pairs: int = field(default=8, metadata={"help": "key/value pairs in the haystack"})
    key_alphabet: int = field(default=16, metadata={"help": "distinct keys (<= 26)"})
    value_alphabet: int = field(default=16, metadata={"help": "distinct values (<= 26)"})
    filler_alphabet: int = field(default=1, metadata={"help": "distinct filler tokens (<= 10)"})
    min_distance: int = field(default=128, metadata={"help": "min tokens between queried pair and the query"})
    seed: int = field(default=0, metadata={"help": "sampling seed"})

    def __post_init__(self):
        if self.kind not in ("copy", "kv_retrieval"):
            raise ConfigError(f"task kind must be copy or kv_retrieval, got {self.kind!r}")
        if not (1 <= self.key_alphabet <= MAX_ALPHABET and 1 <= self.value_alphabet <= MAX_ALPHABET):
            raise ConfigError(f"alphabets must be between 1 and {MAX_ALPHABET}")
        if not 1 <= self.filler_alphabet <= 10:
            raise ConfigError("filler_alphabet must be between 1 and 10")
        if self.kind == "kv_retrieval":
            if self.num_pairs > self.key_alphabet:
                raise DataError(f"key alphabet of {self.key_alphabet} too small for {self.num_pairs} distinct keys")
            slots = (self.seq_len - 2) // 2
            if self.num_pairs > slots:
                raise ConfigError(f"seq_len {self.seq_len} holds at most {slots} pairs")
            if self.seq_len - 1 - self.min_distance < 0:
                raise ConfigError(f"min_distance {self.min_distance} does not fit in seq_len {self.seq_len}")

    @property
    def answer_ids(self) -> list[int]:
        """Token ids an answer can take (accuracy is an argmax over these)."""
        return [VALUE_BASE + i for i in range(self.value_alphabet)]


def _kv_sample(task: SynthTask, rng: np.random.Generator):
    n = task.seq_len
    seq = FILLER_BASE + rng.integers(0, task.filler_alphabet, size=n + 1)
    keys = rng.choice(task.key_alphabet, size=task.num_pairs, replace=False)
    values = rng.integers(0, task.value_alphabet, size=task.num_pairs)
    n_slots = (n - 2) // 2
    # slot i occupies positions 2i (key) and 2i+1 (value)
    far_slots = [i for i in range(n_slots) if (n - 1) - 2 * i >= task.min_distance]
    target_slot = int(rng.choice(far_slots))
    others = np.array([i for i in range(n_slots) if i != target_slot])
    distractor_slots = rng.choice(others, size=task.num_pairs - 1, replace=False)
    slots = [target_slot, *distractor_slots.tolist()]
    for slot, k, v in zip(slots, keys, values):
        seq[2 * slot] = KEY_BASE + k
        seq[2 * slot + 1] = VALUE_BASE + v
    seq[n - 2] = QUERY_ID
    seq[n - 1] = KEY_BASE + keys[0]
    seq[n] = VALUE_BASE + values[0]
    mask = np.zeros(n, dtype=bool)
    mask[n - 1] = True
    return seq, mask


def _copy_sample(task: SynthTask, rng: np.random.Generator):
    n = task.seq_len
    half = (n - 1) // 2
    payload = VALUE_BASE + rng.integers(0, task.value_alphabet, size=half)
    seq = np.concatenate([payload, [SEP_ID], payload, np.full(n + 1 - 2 * half - 1, PAD_ID)])
    mask = np.zeros(n, dtype=bool)
    mask[half:2 * half] = True  # input position i predicts seq[i + 1]
    return seq[: n + 1], mask


def gen_synth(task: SynthTask, n_samples: int = 1, seed: int | None = None):
    """``(tokens[n, seq_len + 1], answer_mask[n, seq_len])``.

    Inputs are ``tokens[:, :-1]``, targets ``tokens[:, 1:]``; the loss and the
    accuracy are taken only where ``answer_mask`` is set.
    """
    rng = np.random.default_rng(task.seed if seed is None else seed)
    make = _kv_sample if task.kind == "kv_retrieval" else _copy_sample
    seqs, masks = zip(*(make(task, rng) for _ in range(n_samples)))
    return torch.from_numpy(np.stack(seqs).astype(np.int64)), torch.from_numpy(np.stack(masks))


def synth_batch(task: SynthTask, batch: int, chunk_size: int = 1, seed: int = 0) -> Batch:
    tokens, mask = gen_synth(task, batch, seed)
    return pad_to_multiple(tokens[:, :-1], tokens[:, 1:], mask, chunk_size)
