"""Labeled token-sequence datasets and the multi-aspect synthetic task.

Synthetic examples scatter tokens from several *aspect* groups among noise
tokens. Which aspects are present forms a bit pattern; the label is
``pattern_index mod n_classes`` with ``pattern_index = sum_a bit_a * 2**a``.
Recovering the label therefore needs evidence from several aspect groups at
once, so a model whose heads all attend to the same aspect is capped below
the achievable accuracy.

On-disk format: one directory with ``train.tsv``, ``val.tsv``, ``test.tsv``
(and optionally ``ood.tsv``), each line ``label<TAB>space-separated token
ids``, plus ``vocab.txt`` with one token string per line.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import atomic_write_text
from .numeric import Rng

SPLITS = ("train", "val", "test", "ood")


@dataclass
class Split:
    sequences: list[np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sequences) != self.labels.size:
            raise ValueError("sequence and label counts differ")

    def __len__(self) -> int:
        return self.labels.size


@dataclass
class Dataset:
    train: Split
    val: Split
    test: Split
    vocab_size: int
    n_classes: int
    ood: Split | None = None
    vocab: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def splits(self):
        for name in SPLITS:
            split = getattr(self, name)
            if split is not None:
                yield name, split


@dataclass(frozen=True)
class SyntheticTaskConfig:
    vocab_size: int = 200
    n_aspects: int = 4
    tokens_per_aspect: int = 5
    noise_fraction: float = 0.6
    min_len: int = 12
    max_len: int = 24
    n_classes: int = 8
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    n_ood: int = 500
    seed: int = 1234

    def __post_init__(self):
        if self.n_aspects < 2:
            raise ValueError("need at least 2 aspect groups")
        if not 2 <= self.n_classes <= 2**self.n_aspects:
            raise ValueError(f"n_classes must be in [2, {2 ** self.n_aspects}] "
                             f"for {self.n_aspects} aspects")
        if self.tokens_per_aspect < 1:
            raise ValueError("tokens_per_aspect must be >= 1")
        n_signal = self.n_aspects * self.tokens_per_aspect
        if self.vocab_size < 2 * n_signal:
            raise ValueError(f"vocab_size must be at least {2 * n_signal} "
                             "(aspect tokens plus an equal-sized noise pool)")
        if not 0.0 <= self.noise_fraction < 1.0:
            raise ValueError("noise_fraction must lie in [0, 1)")
        if not self.n_aspects <= self.min_len <= self.max_len:
            raise ValueError("need n_aspects <= min_len <= max_len")
        if min(self.n_train, self.n_val, self.n_test) < 1 or self.n_ood < 0:
            raise ValueError("split sizes must be positive")

    def aspect_tokens(self, aspect: int) -> range:
        start = aspect * self.tokens_per_aspect
        return range(start, start + self.tokens_per_aspect)

    @property
    def noise_tokens(self) -> range:
        return range(self.n_aspects * self.tokens_per_aspect, self.vocab_size)


def label_of_pattern(bits, n_classes: int) -> int:
    index = sum(int(b) << a for a, b in enumerate(bits))
    return index % n_classes


def aspect_pattern(sequence, config: SyntheticTaskConfig) -> tuple[int, ...]:
    present = set(int(t) for t in sequence)
    return tuple(int(any(t in present for t in config.aspect_tokens(a))) for a in range(config.n_aspects))


def oracle_label(sequence, config: SyntheticTaskConfig) -> int:
    return label_of_pattern(aspect_pattern(sequence, config), config.n_classes)


def single_aspect_oracle_accuracy(config: SyntheticTaskConfig, aspect: int = 0) -> float:
    """Best achievable accuracy when only ``aspect`` is observed, by enumeration
    of the equally likely presence patterns."""
    k = config.n_aspects
    by_bit = {0: Counter(), 1: Counter()}
    for index in range(2**k):
        bits = [(index >> a) & 1 for a in range(k)]
        by_bit[bits[aspect]][label_of_pattern(bits, config.n_classes)] += 1
    return sum(max(c.values()) for c in by_bit.values()) / 2**k


def _sample_sequence(config: SyntheticTaskConfig, rng: Rng, bits, aspect_offset: int = 0):
    length = int(rng.integers(config.min_len, config.max_len + 1, 1)[0])
    present = [a for a, b in enumerate(bits) if b]
    tokens = []
    if present:
        n_signal = max(len(present), int(round((1.0 - config.noise_fraction) * length)))
        n_signal = min(n_signal, length)
        owners = list(present) + list(np.asarray(present)[rng.integers(0, len(present), n_signal - len(present))])
        for a in owners:
            group = config.aspect_tokens(int(a))
            tokens.append(group.start + aspect_offset + int(rng.integers(0, len(group), 1)[0]))
    noise = config.noise_tokens
    n_noise = length - len(tokens)
    if n_noise:
        tokens.extend(int(t) for t in noise.start + rng.integers(0, len(noise), n_noise))
    tokens = np.asarray(tokens, dtype=np.int64)
    return tokens[rng.permutation(tokens.size)]


def gen_synthetic(config: SyntheticTaskConfig) -> Dataset:
    """Seed-deterministic multi-aspect dataset with pairwise-disjoint splits."""
    rng = Rng(config.seed, "data")
    k = config.n_aspects
    seen = set()
    splits = {}
    for name, count in (("train", config.n_train), ("val", config.n_val), ("test", config.n_test)):
        seqs, labels = [], []
        while len(seqs) < count:
            index = int(rng.integers(0, 2**k, 1)[0])
            bits = [(index >> a) & 1 for a in range(k)]
            seq = _sample_sequence(config, rng, bits)
            key = tuple(seq.tolist())
            if key in seen:
                continue
            seen.add(key)
            seqs.append(seq)
            labels.append(label_of_pattern(bits, config.n_classes))
        splits[name] = Split(seqs, np.asarray(labels))

    ood = None
    if config.n_ood:
        # Same vocabulary, but the signal lives on token ids that are noise in
        # the training task; labels follow that shifted task.
        shift_rng = Rng(config.seed, "ood")
        offset = config.vocab_size - k * config.tokens_per_aspect
        seqs, labels = [], []
        for _ in range(config.n_ood):
            index = int(shift_rng.integers(0, 2**k, 1)[0])
            bits = [(index >> a) & 1 for a in range(k)]
            seqs.append(_sample_sequence(config, shift_rng, bits, aspect_offset=offset))
            labels.append(label_of_pattern(bits, config.n_classes))
        ood = Split(seqs, np.asarray(labels))

    vocab = [f"a{t // config.tokens_per_aspect}_{t % config.tokens_per_aspect}"
             if t < k * config.tokens_per_aspect else f"n{t}" for t in range(config.vocab_size)]
    return Dataset(train=splits["train"], val=splits["val"], test=splits["test"], ood=ood,
                   vocab_size=config.vocab_size, n_classes=config.n_classes, vocab=vocab,
                   meta={"synthetic": asdict(config)})


def split_to_tsv(split: Split) -> str:
    return "".join(f"{int(y)}\t{' '.join(str(int(t)) for t in seq)}\n"
                   for seq, y in zip(split.sequences, split.labels))


def split_from_tsv(text: str, vocab_size: int | None = None, where: str = "<tsv>") -> Split:
    seqs, labels = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            label, toks = line.split("\t", 1)
            seq = np.asarray([int(t) for t in toks.split()], dtype=np.int64)
            y = int(label)
        except ValueError as exc:
            raise ValueError(f"{where}:{lineno}: expected 'label<TAB>token ids'") from exc
        if seq.size == 0:
            raise ValueError(f"{where}:{lineno}: empty token sequence")
        if vocab_size is not None and (seq.min() < 0 or seq.max() >= vocab_size):
            raise ValueError(f"{where}:{lineno}: token id outside vocabulary of size {vocab_size}")
        seqs.append(seq)
        labels.append(y)
    return Split(seqs, np.asarray(labels, dtype=np.int64))


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, split in dataset.splits():
        atomic_write_text(directory / f"{name}.tsv", split_to_tsv(split))
    vocab = dataset.vocab or [str(i) for i in range(dataset.vocab_size)]
    atomic_write_text(directory / "vocab.txt", "".join(f"{w}\n" for w in vocab))
    meta = dict(dataset.meta, n_classes=dataset.n_classes, vocab_size=dataset.vocab_size)
    atomic_write_text(directory / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    vocab = (directory / "vocab.txt").read_text().splitlines()
    splits = {}
    for name in SPLITS:
        path = directory / f"{name}.tsv"
        if path.exists():
            splits[name] = split_from_tsv(path.read_text(), len(vocab), str(path))
        elif name != "ood":
            raise FileNotFoundError(f"missing {path}")
    meta_path = directory / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    labels = np.concatenate([s.labels for s in splits.values()])
    n_classes = int(meta.get("n_classes", labels.max() + 1))
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("labels outside 0..n_classes-1")
    return Dataset(train=splits["train"], val=splits["val"], test=splits["test"], ood=splits.get("ood"),
                   vocab_size=len(vocab), n_classes=n_classes, vocab=vocab, meta=meta)
