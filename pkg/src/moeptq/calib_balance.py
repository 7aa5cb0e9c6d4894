"""Expert-level calibration data balance.

The base set is profiled through every layer's router; while some expert at
some layer has fewer routed tokens than ``ceil(r * k * N / n)`` (N = base
token count), new batches are drawn from a sampler and the sequences that
reach a still-deficient expert are appended as expert-tagged data.
"""

from __future__ import annotations

import csv
import io as _stdio
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import io
from .model import MoEModel, block_records, lm_forward

BASE, EXPERT = "base", "expert"
_STREAMS = {"calib": 0, "sample": 1, "eval": 2}


@dataclass
class CalibrationSet:
    sequences: list[np.ndarray]
    tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.int64).reshape(-1) for s in self.sequences]
        if not self.tags:
            self.tags = [BASE] * len(self.sequences)
        if len(self.tags) != len(self.sequences):
            raise ValueError("one origin tag per sequence required")
        bad = set(self.tags) - {BASE, EXPERT}
        if bad:
            raise ValueError(f"unknown origin tags {sorted(bad)}")

    @classmethod
    def from_array(cls, arr, tag: str = BASE) -> "CalibrationSet":
        arr = np.asarray(arr)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        return cls(list(arr), [tag] * arr.shape[0])

    @property
    def N(self) -> int:
        return int(sum(s.size for s in self.sequences))

    def tokens(self) -> np.ndarray:
        if not self.sequences:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.sequences)

    def subset(self, tag: str) -> "CalibrationSet":
        keep = [i for i, t in enumerate(self.tags) if t == tag]
        return CalibrationSet([self.sequences[i] for i in keep], [tag] * len(keep))

    def base(self) -> "CalibrationSet":
        return self.subset(BASE)

    def expert(self) -> "CalibrationSet":
        return self.subset(EXPERT)


def as_tokens(data) -> np.ndarray:
    if isinstance(data, CalibrationSet):
        return data.tokens()
    return np.asarray(data, dtype=np.int64).reshape(-1)


class SyntheticStream:
    """Token sequences drawn from the fp model's own next-token chain.

    The model is attention-free, so its next-token distribution is a bigram
    table; sequences are Markov-chain samples from it with uniform start
    tokens. ``stream`` keeps calibration, sampling and evaluation draws disjoint
    for the same seed.
    """

    def __init__(self, model: MoEModel, seed: int = 0, seq_len: int = 64, stream: str = "calib"):
        vocab = model.config.vocab
        probs = np.exp(lm_forward(model, np.arange(vocab)))
        self._cdf = np.cumsum(probs / probs.sum(axis=1, keepdims=True), axis=1)
        self._rng = np.random.default_rng([int(seed), _STREAMS[stream]])
        self.seq_len = int(seq_len)
        self.vocab = vocab

    def next_batch(self, num_seqs: int) -> np.ndarray:
        out = np.empty((num_seqs, self.seq_len), dtype=np.int64)
        cur = self._rng.integers(self.vocab, size=num_seqs)
        out[:, 0] = cur
        for t in range(1, self.seq_len):
            u = self._rng.random(num_seqs)
            cur = np.minimum((self._cdf[cur] <= u[:, None]).sum(axis=1), self.vocab - 1)
            out[:, t] = cur
        return out


class FileStream:
    """Sequences read in order from a token file; exhausts instead of cycling."""

    def __init__(self, path):
        self._seqs = io.read_tokens(path)
        self._pos = 0
        self.seq_len = self._seqs.shape[1]

    def next_batch(self, num_seqs: int) -> np.ndarray:
        batch = self._seqs[self._pos : self._pos + num_seqs]
        self._pos += batch.shape[0]
        return batch


def make_sampler(descriptor: str, model: MoEModel, seq_len: int, stream: str = "sample"):
    """``synthetic:SEED`` or ``file:PATH``."""
    kind, _, arg = descriptor.partition(":")
    if kind == "synthetic":
        return SyntheticStream(model, int(arg or 0), seq_len, stream)
    if kind == "file":
        return FileStream(arg)
    raise ValueError(f"unknown sampler {descriptor!r}; use synthetic:SEED or file:PATH")


def synthetic_calibration(model: MoEModel, seed: int = 0, num_seqs: int = 64, seq_len: int = 64,
                          stream: str = "calib") -> CalibrationSet:
    return CalibrationSet.from_array(SyntheticStream(model, seed, seq_len, stream).next_batch(num_seqs))


@dataclass
class ActivationProfile:
    counts: np.ndarray  # layers x n, routed-token counts
    tokens: int
    k: int

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def fractions(self) -> np.ndarray:
        totals = self.totals[:, None]
        return np.divide(self.counts, totals, out=np.zeros(self.counts.shape), where=totals > 0)


def vocab_membership(model: MoEModel, ids=None) -> np.ndarray:
    """0/1 top-k membership per layer for the given distinct ids: (layers, len(ids), n)."""
    ids = np.arange(model.config.vocab) if ids is None else np.asarray(ids)
    _, _, records = block_records(model, ids)
    n = model.config.n
    memb = np.zeros((len(records), ids.size, n), dtype=np.int64)
    for l, rec in enumerate(records):
        np.put_along_axis(memb[l], rec.trace.experts, 1, axis=1)
    return memb


def profile(model: MoEModel, data) -> ActivationProfile:
    """Count, per layer and expert, the tokens whose top-k set contains that expert."""
    tokens = as_tokens(data)
    if tokens.size == 0:
        raise ValueError("cannot profile an empty calibration set")
    uniq, counts = np.unique(tokens, return_counts=True)
    memb = vocab_membership(model, uniq)
    return ActivationProfile(np.einsum("u,lun->ln", counts, memb), int(tokens.size), model.config.k)


def threshold(ratio: float, N: int, k: int, n: int) -> int:
    if ratio < 0:
        raise ValueError("magnification ratio must be non-negative")
    # exact rational arithmetic so e.g. 2.0 * 8 * 1024 / 64 is exactly 256
    return int(np.ceil(Fraction(ratio) * k * N / n)) if ratio else 0


@dataclass
class BalanceConfig:
    ratio: float = 2.0
    max_batches: int = 100
    batch_seqs: int = 16
    sampler: str = "synthetic:0"
    seq_len: int | None = None

    def __post_init__(self):
        if self.ratio < 0:
            raise ValueError("magnification ratio must be non-negative")


class BalanceError(RuntimeError):
    def __init__(self, deficits: list[tuple[int, int, int]], threshold: int):
        self.deficits = deficits
        self.threshold = threshold
        listed = ", ".join(f"(layer {l}, expert {i}, short {d})" for l, i, d in deficits)
        super().__init__(f"sampling budget exhausted; experts below {threshold} tokens: {listed}")


@dataclass
class BalanceResult:
    data: CalibrationSet
    profile: ActivationProfile
    threshold: int
    batches: int


def balance(model: MoEModel, base: CalibrationSet, config: BalanceConfig,
            sampler=None) -> BalanceResult:
    base = base.base()
    if base.N == 0:
        raise ValueError("cannot balance an empty base set")
    cfg = model.config
    thr = threshold(config.ratio, base.N, cfg.k, cfg.n)
    memb = vocab_membership(model)  # whole vocab once; batches are profiled by lookup
    counts = profile(model, base).counts.copy()
    out = CalibrationSet(list(base.sequences), [BASE] * len(base.sequences))
    batches = 0
    if (counts >= thr).all():
        return BalanceResult(out, ActivationProfile(counts, out.N, cfg.k), thr, batches)

    if sampler is None:
        seq_len = config.seq_len or base.sequences[0].size
        sampler = make_sampler(config.sampler, model, seq_len)
    vocab = cfg.vocab
    for _ in range(config.max_batches):
        batch = np.asarray(sampler.next_batch(config.batch_seqs))
        if batch.size == 0:
            break
        batches += 1
        rows = np.repeat(np.arange(batch.shape[0]), batch.shape[1])
        hist = np.bincount(rows * vocab + batch.reshape(-1), minlength=batch.shape[0] * vocab)
        seq_counts = np.einsum("bv,lvn->bln", hist.reshape(batch.shape[0], vocab), memb)
        need = counts < thr
        for b in range(batch.shape[0]):
            if (seq_counts[b][need] > 0).any():
                out.sequences.append(batch[b].astype(np.int64))
                out.tags.append(EXPERT)
                counts += seq_counts[b]
        if (counts >= thr).all():
            return BalanceResult(out, ActivationProfile(counts, out.N, cfg.k), thr, batches)

    deficits = [(int(l), int(i), int(thr - counts[l, i])) for l, i in zip(*np.nonzero(counts < thr))]
    raise BalanceError(deficits, thr)


def histogram_rows(prof: ActivationProfile) -> list[tuple[int, int, int, float]]:
    frac = prof.fractions()
    return [(l, i, int(prof.counts[l, i]), float(frac[l, i]))
            for l in range(prof.counts.shape[0]) for i in range(prof.counts.shape[1])]


def histogram_csv(prof: ActivationProfile) -> str:
    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "expert", "count", "fraction"])
    for l, i, c, f in histogram_rows(prof):
        w.writerow([l, i, c, repr(f)])
    return buf.getvalue()


def histogram_export(prof: ActivationProfile, path) -> Path:
    io.atomic_write(path, histogram_csv(prof).encode("utf-8"))
    return Path(path)
