"""Multimodal sample pools, non-IID partitioning, online streams and imbalance injection.

Samples are stored column-wise (one ``N x d_m`` array per modality) because every
consumer works on whole windows.  Missing modality entries are filled with NaN so
an accidental read poisons the result instead of silently training on stale data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Rng, dirichlet, gaussian


class ParseError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def frac_count(fraction: float, total: int) -> int:
    """ceil(fraction * total), immune to float noise such as 0.3 * 200 = 60.000...01."""
    return min(total, max(0, math.ceil(round(fraction * total, 9))))


@dataclass
class ModalSample:
    features: list  # per modality: 1-d array, or None when unavailable
    available: tuple
    label: int


@dataclass
class Pool:
    """An ordered collection of samples, all modalities present."""

    features: list[np.ndarray]
    labels: np.ndarray
    uids: np.ndarray = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.uids is None:
            self.uids = np.arange(len(self.labels), dtype=np.int64)
        for f in self.features:
            if f.shape[0] != len(self.labels):
                raise ValueError("feature rows must match label count")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> ModalSample:
        return ModalSample([f[i].copy() for f in self.features], (True,) * len(self.features), int(self.labels[i]))

    @property
    def dims(self) -> tuple:
        return tuple(f.shape[1] for f in self.features)

    def take(self, idx) -> "Pool":
        idx = np.asarray(idx, dtype=np.int64)
        return Pool([f[idx] for f in self.features], self.labels[idx], self.uids[idx])

    def samples(self) -> list[ModalSample]:
        return [self[i] for i in range(len(self))]


@dataclass
class RoundBatch:
    features: list[np.ndarray]
    available: np.ndarray  # (N, M) bool
    labels: np.ndarray
    quality: np.ndarray  # (M,) bool
    round: int
    client: int
    uids: np.ndarray = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_modalities(self) -> int:
        return len(self.features)

    @property
    def samples(self) -> list[ModalSample]:
        out = []
        for n in range(len(self.labels)):
            avail = tuple(bool(a) for a in self.available[n])
            feats = [f[n].copy() if a else None for f, a in zip(self.features, avail)]
            out.append(ModalSample(feats, avail, int(self.labels[n])))
        return out

    def copy(self) -> "RoundBatch":
        return RoundBatch(
            [f.copy() for f in self.features], self.available.copy(), self.labels.copy(),
            self.quality.copy(), self.round, self.client,
            None if self.uids is None else self.uids.copy(),
        )


# ---------------------------------------------------------------------------
# pools


def class_means(rng: Rng, classes: int, dims: Sequence[int], separation: float,
                offset: float = 0.0) -> list[np.ndarray]:
    """Per-modality class centres with all pairwise distances equal to ``separation``.

    Centres are scaled orthonormal vectors in the concatenated feature space, so
    each modality only carries a random share of the class signal.  ``offset``
    adds a class-independent constant of that norm to every modality (a sensor
    bias such as gravity): it leaves class geometry alone but raises signal
    power, which is what an SNR-specified degradation scales with.
    """
    total = int(sum(dims))
    if classes > total:
        raise ValueError(f"need sum(d_m) >= C for orthogonal class centres ({total} < {classes})")
    q, _ = np.linalg.qr(rng.gen.normal(size=(total, classes)))
    centres = (separation / math.sqrt(2.0)) * q.T  # (C, total)
    out, start = [], 0
    for d in dims:
        bias = rng.gen.normal(size=d)
        bias *= offset / np.linalg.norm(bias)
        out.append(centres[:, start:start + d] + bias)
        start += d
    return out


def synth_pool(rng: Rng, classes: int, dims: Sequence[int], size: int, separation: float,
               means: list[np.ndarray] | None = None) -> Pool:
    """Gaussian-mixture pool; every modality of a sample comes from the same class component.

    Pass ``means`` from :func:`class_means` to draw train and test pools from one mixture.
    """
    if classes < 2 or len(dims) < 2:
        raise ValueError("synth_pool needs C >= 2 and M >= 2")
    if size < classes:
        raise ValueError("pool size must be >= number of classes")
    if separation < 0:
        raise ValueError(f"separation must be >= 0, got {separation}")
    if means is None:
        means = class_means(rng.child("means"), classes, dims, separation)
    # balanced labels, then shuffled
    labels = np.arange(size) % classes
    labels = rng.child("labels").gen.permutation(labels)
    noise_rng = rng.child("noise")
    feats = []
    for m, d in enumerate(dims):
        noise = noise_rng.gen.normal(size=(size, d))
        feats.append(means[m][labels] + noise)
    return Pool(feats, labels)


def write_har_numeric(path, pool: Pool) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for n in range(len(pool)):
            vals = [repr(float(v)) for f in pool.features for v in f[n]]
            fh.write(" ".join(vals + [str(int(pool.labels[n]))]) + "\n")


def load_har_numeric(path, layout: Sequence[int], classes: int | None = None,
                     standardize: bool = True) -> Pool:
    """Read whitespace-separated rows ``<features...> <label>`` split per modality by ``layout``."""
    layout = tuple(int(d) for d in layout)
    width = sum(layout) + 1
    rows, labels = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != width:
            raise ParseError(f"line {lineno}: expected {width} fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts[:-1]]
            label = int(parts[-1])
        except ValueError as e:
            raise ParseError(f"line {lineno}: {e}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(f"line {lineno}: non-finite value")
        if label < 0 or (classes is not None and label >= classes):
            raise SchemaError(f"line {lineno}: label {label} outside [0, {classes})")
        rows.append(vals)
        labels.append(label)
    if not rows:
        return Pool([np.zeros((0, d)) for d in layout], np.zeros(0, dtype=np.int64))
    arr = np.array(rows)
    feats, start = [], 0
    for d in layout:
        block = arr[:, start:start + d]
        if standardize:
            mu = block.mean(axis=0)
            sd = block.std(axis=0)
            sd[sd == 0] = 1.0
            block = (block - mu) / sd
        feats.append(np.ascontiguousarray(block))
        start += d
    return Pool(feats, np.array(labels))


def partition_dirichlet(rng: Rng, pool: Pool, alpha: float, clients: int) -> list[Pool]:
    """Label-skewed split: per class a Dirichlet(alpha) share vector, largest-remainder rounding."""
    if len(pool) == 0:
        raise ValueError("cannot partition an empty pool")
    if clients > len(pool):
        raise ValueError(f"{clients} clients exceed pool size {len(pool)}")
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    buckets: list[list[int]] = [[] for _ in range(clients)]
    for c in np.unique(pool.labels):
        idx = np.flatnonzero(pool.labels == c)
        idx = rng.child("shuffle", int(c)).gen.permutation(idx)
        share = dirichlet(rng.child("share", int(c)), alpha, clients) * len(idx)
        counts = np.floor(share).astype(int)
        rest = len(idx) - counts.sum()
        order = np.argsort(-(share - counts), kind="stable")
        counts[order[:rest]] += 1
        start = 0
        for k in range(clients):
            buckets[k].extend(idx[start:start + counts[k]].tolist())
            start += counts[k]
    out = []
    for k in range(clients):
        mixed = rng.child("order", k).gen.permutation(np.array(buckets[k], dtype=np.int64))
        out.append(pool.take(mixed))
    return out


# ---------------------------------------------------------------------------
# online stream


class ClientStream:
    """Fixed-size FIFO window over a long-term pool consumed as a ring."""

    def __init__(self, pool: Pool, window: int, refresh: int, client: int = 0):
        if len(pool) == 0:
            raise ValueError(f"client {client} has an empty long-term pool")
        if window < 1 or refresh < 0:
            raise ValueError("window must be >= 1 and refresh >= 0")
        self.pool = pool
        self.size = window
        self.refresh = refresh
        self.client = client
        self.cursor = window
        self.round = 0

    @property
    def window_indices(self) -> np.ndarray:
        return np.arange(self.cursor - self.size, self.cursor) % len(self.pool)

    def advance(self) -> RoundBatch:
        self.cursor += self.refresh
        idx = self.window_indices
        m = len(self.pool.features)
        batch = RoundBatch(
            features=[f[idx].copy() for f in self.pool.features],
            available=np.ones((self.size, m), dtype=bool),
            labels=self.pool.labels[idx].copy(),
            quality=np.ones(m, dtype=bool),
            round=self.round,
            client=self.client,
            uids=self.pool.uids[idx].copy(),
        )
        self.round += 1
        return batch


def advance(stream: ClientStream) -> RoundBatch:
    return stream.advance()


# ---------------------------------------------------------------------------
# imbalance


@dataclass(frozen=True)
class ImbalanceSpec:
    miss_fraction: float = 0.0
    round_fraction_quantity: float = 0.0
    round_fraction_quality: float = 0.0
    snr_db: float = 10.0
    seed: int = 0
    rounds: int = 150

    def __post_init__(self):
        for name in ("miss_fraction", "round_fraction_quantity", "round_fraction_quality"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    @cached_property
    def quantity_rounds(self) -> frozenset:
        return affected_rounds(self.seed, self.rounds, self.round_fraction_quantity, "quantity")

    @cached_property
    def quality_rounds(self) -> frozenset:
        return affected_rounds(self.seed, self.rounds, self.round_fraction_quality, "quality")


def affected_rounds(seed: int, rounds: int, fraction: float, label: str) -> frozenset:
    perm = Rng(seed).child("affected", label).gen.permutation(rounds)
    return frozenset(int(t) for t in perm[:frac_count(fraction, rounds)])


def inject_quantity(batch: RoundBatch, spec: ImbalanceSpec, t: int, rng: Rng) -> RoundBatch:
    """Clear exactly one modality flag on ceil(miss_fraction * N) samples of an affected round."""
    out = batch.copy()
    if t not in spec.quantity_rounds or spec.miss_fraction == 0:
        return out
    n, m = out.available.shape
    hit = rng.gen.permutation(n)[:frac_count(spec.miss_fraction, n)]
    which = rng.gen.integers(m, size=len(hit))
    for i, mod in zip(hit, which):
        out.available[i, mod] = False
        out.features[mod][i] = np.nan
    return out


def awgn_std(signal: np.ndarray, snr_db: float) -> float:
    power = float(np.mean(signal ** 2))
    return math.sqrt(power * 10.0 ** (-snr_db / 10.0))


def inject_quality(batch: RoundBatch, spec: ImbalanceSpec, t: int, rng: Rng) -> RoundBatch:
    """Degrade one uniformly chosen modality with AWGN at ``snr_db`` on an affected round."""
    out = batch.copy()
    if t not in spec.quality_rounds:
        return out
    target = int(rng.gen.integers(out.num_modalities))
    out.quality[target] = False
    if math.isinf(spec.snr_db) and spec.snr_db > 0:
        return out
    feats = out.features[target]
    for i in np.flatnonzero(out.available[:, target]):
        std = awgn_std(feats[i], spec.snr_db)
        if std == 0:
            continue
        noise = gaussian(rng, 0.0, 1.0, feats.shape[1])
        # rescale so the realised noise power, not just its expectation, hits the target
        noise *= std / math.sqrt(np.mean(noise ** 2))
        feats[i] = feats[i] + noise
    return out
