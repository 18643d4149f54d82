"""Seeded marker-token classification tasks.

Each class owns a set of ``m`` marker tokens.  A sequence of class ``c`` emits,
at every position independently, one of class ``c``'s markers with probability
``p`` and otherwise a token from the shared noise pool.  Counting markers per
class is then (near) Bayes-optimal, which certifies learnability before any
model is trained.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: str
    V: int
    T: int
    K: int
    markers: tuple[tuple[int, ...], ...]
    p: float
    noise: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        if len(self.markers) != self.K:
            raise ConfigurationError(f"need one marker set per class ({self.K}), got {len(self.markers)}")
        flat = [t for ms in self.markers for t in ms]
        if len(set(flat)) != len(flat):
            raise ConfigurationError("marker sets must be pairwise disjoint")
        if not self.noise:
            raise ConfigurationError("noise pool must be non-empty")
        if len(flat) + len(self.noise) > self.V:
            raise ConfigurationError("K*m + |noise| exceeds the vocabulary")
        if set(flat) & set(self.noise):
            raise ConfigurationError("noise pool overlaps marker tokens")
        if any(t < 0 or t >= self.V for t in (*flat, *self.noise)):
            raise ConfigurationError("token id outside vocabulary")
        # p = 0 (pure noise) is admitted as the no-signal control
        if not (0.0 <= self.p < 1.0):
            raise ConfigurationError(f"marker density must lie in [0, 1), got {self.p}")

    @property
    def m(self) -> int:
        return len(self.markers[0])


NOISE_POOLS = ("complement", "exclusive")


def task_pair(V: int = 64, T: int = 16, K: int = 4, m: int = 4, p: float = 0.3,
              seed: int = 0, ids: tuple[str, str] = ("G", "D"),
              noise_pool: str = "complement") -> tuple[SyntheticTaskSpec, SyntheticTaskSpec]:
    """General and downstream task over one vocabulary with disjoint markers.

    Token layout: ids [0, K*m) are the first task's markers, [K*m, 2*K*m) the
    second's.  With ``noise_pool="complement"`` each task draws noise from every
    token outside its own markers, so one task's markers are filler for the
    other; ``"exclusive"`` restricts both to the ids above 2*K*m.
    """
    if noise_pool not in NOISE_POOLS:
        raise ConfigurationError(f"unknown noise_pool {noise_pool!r}; expected one of {NOISE_POOLS}")
    used = 2 * K * m
    if used >= V:
        raise ConfigurationError(f"vocabulary {V} too small for two tasks of {K}x{m} markers")
    specs = []
    for j, task_id in enumerate(ids):
        base = j * K * m
        markers = tuple(tuple(range(base + c * m, base + (c + 1) * m)) for c in range(K))
        if noise_pool == "exclusive":
            noise = tuple(range(used, V))
        else:
            noise = tuple(t for t in range(V) if not base <= t < base + K * m)
        specs.append(SyntheticTaskSpec(task_id, V, T, K, markers, p, noise, seed))
    return specs[0], specs[1]


def check_compatible(a: SyntheticTaskSpec, b: SyntheticTaskSpec) -> None:
    """Tasks sharing a vocabulary must not share marker tokens."""
    if a.V == b.V and a.task_id != b.task_id:
        ma = {t for ms in a.markers for t in ms}
        mb = {t for ms in b.markers for t in ms}
        if ma & mb:
            raise ConfigurationError(f"tasks {a.task_id} and {b.task_id} share marker tokens")


@dataclass
class LabeledDataset:
    tokens: np.ndarray  # (n, T) int64
    labels: np.ndarray  # (n,) int64
    K: int
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.tokens[idx], self.labels[idx], self.K,
                              {**self.provenance, "subset": len(idx)})

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for toks, lab in zip(self.tokens.tolist(), self.labels.tolist()):
                fh.write(json.dumps({"tokens": toks, "label": lab}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path, K: int) -> "LabeledDataset":
        toks, labs = [], []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    toks.append(rec["tokens"])
                    labs.append(rec["label"])
        tokens = np.asarray(toks, dtype=np.int64)
        labels = np.asarray(labs, dtype=np.int64)
        if len(labels) and (labels.min() < 0 or labels.max() >= K):
            raise InputError(f"label outside [0, {K})")
        return cls(tokens.reshape(len(labels), -1), labels, K, {"source": str(path)})


@dataclass
class TaskSplit:
    train: LabeledDataset
    test: LabeledDataset


def sample(spec: SyntheticTaskSpec, n: int, seed: int) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    labels = rng.integers(spec.K, size=n)
    is_marker = rng.random((n, spec.T)) < spec.p
    which = rng.integers(spec.m, size=(n, spec.T))
    noise = np.asarray(spec.noise)[rng.integers(len(spec.noise), size=(n, spec.T))]
    markers = np.asarray(spec.markers)[labels[:, None], which]
    tokens = np.where(is_marker, markers, noise).astype(np.int64)
    return LabeledDataset(tokens, labels.astype(np.int64), spec.K,
                          {"task": spec.task_id, "n": n, "seed": seed})


def gen_task(spec: SyntheticTaskSpec, n: int, seed: int) -> TaskSplit:
    """Generate ``n`` examples and split them 80/20 (first 80% train)."""
    if n < spec.K * 10:
        raise ConfigurationError(f"need n >= K*10 = {spec.K * 10}, got {n}")
    data = sample(spec, n, seed)
    cut = (4 * n) // 5
    return TaskSplit(data.subset(np.arange(cut)), data.subset(np.arange(cut, n)))


def bayes_oracle(dataset: LabeledDataset, spec: SyntheticTaskSpec) -> float:
    """Accuracy of the majority-marker-count rule (ties go to the lowest class)."""
    if len(dataset) == 0:
        raise InputError("empty dataset")
    lookup = np.full(spec.V, -1)
    for c, ms in enumerate(spec.markers):
        lookup[list(ms)] = c
    owner = lookup[dataset.tokens]
    counts = np.stack([(owner == c).sum(axis=1) for c in range(spec.K)], axis=1)
    return float(np.mean(np.argmax(counts, axis=1) == dataset.labels))


def label_histogram(shard: LabeledDataset, K: int | None = None) -> np.ndarray:
    K = shard.K if K is None else K
    return np.bincount(shard.labels, minlength=K)[:K].astype(np.int64)


def concat(parts: Sequence[LabeledDataset]) -> LabeledDataset:
    if not parts:
        raise InputError("nothing to concatenate")
    return LabeledDataset(np.concatenate([p.tokens for p in parts]),
                          np.concatenate([p.labels for p in parts]), parts[0].K)
