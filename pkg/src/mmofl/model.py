"""Per-modality encoders, fusion head, the CE / PCE / PLR losses and their gradients.

Parameter layout (also the flat serialization order): head first, then the
encoders by modality index; inside each block ``w1, b1, w2, b2`` in row-major
order.  Every block is ``out = w2 @ tanh(w1 @ x + b1) + b2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import Rng, log_softmax, softmax


class ShapeError(ValueError):
    pass


class MissingPrototypeError(LookupError):
    """A prototype needed by the PCE term has not been populated yet."""


@dataclass
class Dense2:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Rows of ``x`` are inputs; returns (outputs, hidden activations)."""
        h = np.tanh(x @ self.w1.T + self.b1)
        return h @ self.w2.T + self.b2, h

    @classmethod
    def init(cls, rng: Rng, d_in: int, hidden: int, d_out: int) -> "Dense2":
        a1 = 1.0 / math.sqrt(d_in)
        a2 = 1.0 / math.sqrt(hidden)
        g = rng.gen
        return cls(g.uniform(-a1, a1, (hidden, d_in)), g.uniform(-a1, a1, hidden),
                   g.uniform(-a2, a2, (d_out, hidden)), g.uniform(-a2, a2, d_out))

    @classmethod
    def zeros_like(cls, other: "Dense2") -> "Dense2":
        return cls(*(np.zeros_like(a) for a in other.arrays()))


EncoderParams = Dense2
HeadParams = Dense2


@dataclass
class GlobalModel:
    head: Dense2
    encoders: list[Dense2]

    @classmethod
    def init(cls, rng: Rng, dims: Sequence[int], classes: int, hidden: int = 32,
             d_feat: int = 16, head_hidden: int | None = None) -> "GlobalModel":
        head_hidden = hidden if head_hidden is None else head_hidden
        encoders = [Dense2.init(rng.child("encoder", m), d, hidden, d_feat) for m, d in enumerate(dims)]
        head = Dense2.init(rng.child("head"), len(dims) * d_feat, head_hidden, classes)
        return cls(head, encoders)

    @property
    def num_modalities(self) -> int:
        return len(self.encoders)

    @property
    def d_feat(self) -> int:
        return self.encoders[0].out_dim

    @property
    def classes(self) -> int:
        return self.head.out_dim

    def blocks(self) -> list[Dense2]:
        return [self.head, *self.encoders]

    def arrays(self) -> list[np.ndarray]:
        return [a for b in self.blocks() for a in b.arrays()]

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "GlobalModel":
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.num_params():
            raise ShapeError(f"flat vector has {vec.size} entries, model needs {self.num_params()}")
        out, pos = [], 0
        for a in self.arrays():
            out.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return self._rebuild(out)

    def _rebuild(self, arrays: list[np.ndarray]) -> "GlobalModel":
        blocks = [Dense2(*arrays[i:i + 4]) for i in range(0, len(arrays), 4)]
        return GlobalModel(blocks[0], blocks[1:])

    def map(self, fn, *others: "GlobalModel") -> "GlobalModel":
        for o in others:
            check_congruent(self, o)
        cols = zip(self.arrays(), *(o.arrays() for o in others))
        return self._rebuild([fn(*c) for c in cols])

    def copy(self) -> "GlobalModel":
        return self.map(np.copy)

    def zeros_like(self) -> "GlobalModel":
        return self.map(np.zeros_like)

    def to_bytes(self) -> bytes:
        """Canonical upload form: float32 little-endian in flatten order."""
        return self.flatten().astype("<f4").tobytes()

    def wire_size(self) -> int:
        return 4 * self.num_params()


Gradient = GlobalModel


def check_congruent(a: GlobalModel, b: GlobalModel) -> None:
    sa = [x.shape for x in a.arrays()]
    sb = [x.shape for x in b.arrays()]
    if sa != sb:
        raise ShapeError("models are not shape-congruent")


# ---------------------------------------------------------------------------
# single-sample operations


def encode(encoder: Dense2, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != encoder.in_dim:
        raise ShapeError(f"encoder expects dim {encoder.in_dim}, got {x.shape[-1]}")
    return encoder.forward(x)[0]


def predict(model: GlobalModel, features: Sequence) -> np.ndarray:
    if len(features) != model.num_modalities:
        raise ShapeError(f"expected {model.num_modalities} feature vectors, got {len(features)}")
    for z in features:
        if np.shape(z)[-1] != model.d_feat:
            raise ShapeError(f"feature dim {np.shape(z)[-1]} != {model.d_feat}")
    return model.head.forward(np.concatenate([np.asarray(z, dtype=float) for z in features], axis=-1))[0]


def argmax(logits) -> int:
    # np.argmax already returns the lowest index on ties
    return int(np.argmax(logits))


def ce_loss(logits, label: int) -> float:
    logits = np.asarray(logits, dtype=float)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} outside [0, {logits.shape[-1]})")
    return float(-log_softmax(logits)[label])


def sq_dists(z: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, rows of ``z`` against rows of ``protos``."""
    diff = z[..., None, :] - protos
    return np.einsum("...cd,...cd->...c", diff, diff)


def _check_row(bank_row: np.ndarray) -> None:
    if np.isnan(bank_row).any():
        raise MissingPrototypeError("prototype bank row has empty cells")


def pce_loss(z, bank_row, label: int) -> float:
    """Prototype cross entropy: -log softmax(-||z - v_c||^2)[label]."""
    bank_row = np.asarray(bank_row, dtype=float)
    _check_row(bank_row)
    d = sq_dists(np.asarray(z, dtype=float), bank_row)
    return float(-log_softmax(-d)[label])


def plr_loss(logits, label: int, z_per_modality: Sequence, bank, quality: Sequence[bool],
             beta: float) -> float:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    loss = ce_loss(logits, label)
    for m, q in enumerate(quality):
        if not q and beta > 0:
            loss += beta * pce_loss(z_per_modality[m], bank[m], label)
    return loss


# ---------------------------------------------------------------------------
# batched forward / backward


@dataclass
class ModelInputs:
    """One round's training inputs.

    ``present[n, m]`` says whether modality ``m`` of sample ``n`` goes through its
    encoder; otherwise ``subst[m][n]`` is used as a constant feature.
    """

    xs: list[np.ndarray]
    present: np.ndarray
    labels: np.ndarray
    subst: list = None

    def __post_init__(self):
        self.present = np.asarray(self.present, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def select(self, rows) -> "ModelInputs":
        rows = np.asarray(rows)
        subst = None if self.subst is None else [None if s is None else s[rows] for s in self.subst]
        return ModelInputs([x[rows] for x in self.xs], self.present[rows], self.labels[rows], subst)


@dataclass
class LossConfig:
    """``pce_modalities`` lists the low-quality modalities whose PCE term is active."""

    beta: float = 0.0
    bank: np.ndarray | None = None  # (M, C, D), NaN rows for empty cells
    pce_modalities: tuple = ()
    norm: float | None = None  # mean denominator; defaults to the batch size
    weights: np.ndarray | None = None  # per-sample multipliers, applied before dividing by norm
    ce_weight: float = 1.0  # 0 leaves the prototype term alone (gradient checks)

    @classmethod
    def plr(cls, beta: float, quality: Sequence[bool], bank, norm=None) -> "LossConfig":
        mods = tuple(m for m, q in enumerate(quality) if not q)
        if beta > 0 and mods:
            if bank is None:
                raise MissingPrototypeError("PLR needs a prototype bank")
            for m in mods:
                _check_row(bank[m])
        return cls(beta, bank, mods if beta > 0 else (), norm)


@dataclass
class _Cache:
    feats: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    fused: np.ndarray = None
    head_hidden: np.ndarray = None
    logits: np.ndarray = None


def _fused_features(model: GlobalModel, inp: ModelInputs, cache: _Cache) -> list[np.ndarray]:
    n = len(inp)
    feats = []
    for m, enc in enumerate(model.encoders):
        mask = inp.present[:, m]
        if inp.subst is not None and inp.subst[m] is not None:
            z = np.array(inp.subst[m], dtype=float)
        else:
            z = np.zeros((n, model.d_feat))
        h = None
        if mask.any():
            out, h = enc.forward(inp.xs[m][mask])
            z[mask] = out
        feats.append(z)
        cache.hidden.append(h)
    cache.feats = feats
    return feats


def forward(model: GlobalModel, inp: ModelInputs) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits and per-modality fused features for every sample."""
    cache = _Cache()
    feats = _fused_features(model, inp, cache)
    logits, _ = model.head.forward(np.concatenate(feats, axis=1))
    return logits, feats


def _per_sample_losses(logits, feats, labels, cfg: LossConfig) -> np.ndarray:
    rows = np.arange(len(labels))
    losses = cfg.ce_weight * -log_softmax(logits)[rows, labels]
    for m in cfg.pce_modalities:
        d = sq_dists(feats[m], cfg.bank[m])
        losses = losses + cfg.beta * -log_softmax(-d)[rows, labels]
    return losses


def loss_value(model: GlobalModel, inp: ModelInputs, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    if len(inp) == 0:
        return 0.0
    logits, feats = forward(model, inp)
    norm = len(inp) if cfg.norm is None else cfg.norm
    losses = _per_sample_losses(logits, feats, inp.labels, cfg)
    if cfg.weights is not None:
        losses = losses * cfg.weights
    return float(losses.sum() / norm)


def backward(model: GlobalModel, inp: ModelInputs, cfg: LossConfig | None = None
             ) -> tuple[float, GlobalModel]:
    """Mean loss and its exact gradient with respect to every parameter.

    Substituted features are constants: an encoder only receives gradient from
    the samples where its modality was actually encoded.
    """
    cfg = cfg or LossConfig()
    n = len(inp)
    grad = model.zeros_like()
    if n == 0:
        return 0.0, grad
    norm = n if cfg.norm is None else cfg.norm
    cache = _Cache()
    feats = _fused_features(model, inp, cache)
    fused = np.concatenate(feats, axis=1)
    head = model.head
    logits, hh = head.forward(fused)
    rows = np.arange(n)
    labels = inp.labels

    p = softmax(logits)
    losses = cfg.ce_weight * -log_softmax(logits)[rows, labels]
    dlogits = p
    dlogits[rows, labels] -= 1.0
    scale = np.full(n, 1.0 / norm) if cfg.weights is None else np.asarray(cfg.weights, dtype=float) / norm
    dlogits *= cfg.ce_weight * scale[:, None]

    g = grad.head
    g.w2[:] = dlogits.T @ hh
    g.b2[:] = dlogits.sum(axis=0)
    du = (dlogits @ head.w2) * (1.0 - hh * hh)
    g.w1[:] = du.T @ fused
    g.b1[:] = du.sum(axis=0)
    dfused = du @ head.w1

    d = model.d_feat
    dfeats = [dfused[:, m * d:(m + 1) * d] for m in range(model.num_modalities)]
    for m in cfg.pce_modalities:
        z = feats[m]
        protos = cfg.bank[m]
        neg = -sq_dists(z, protos)
        q = softmax(neg)
        losses = losses - cfg.beta * log_softmax(neg)[rows, labels]
        # d/dz [d_y + logsumexp(-d)] = 2 (sum_c q_c v_c - v_y)
        dfeats[m] = dfeats[m] + (2.0 * cfg.beta) * scale[:, None] * (q @ protos - protos[labels])

    for m, enc in enumerate(model.encoders):
        mask = inp.present[:, m]
        if not mask.any():
            continue
        ge = grad.encoders[m]
        dz = dfeats[m][mask]
        h = cache.hidden[m]
        x = inp.xs[m][mask]
        ge.w2[:] = dz.T @ h
        ge.b2[:] = dz.sum(axis=0)
        dh = (dz @ enc.w2) * (1.0 - h * h)
        ge.w1[:] = dh.T @ x
        ge.b1[:] = dh.sum(axis=0)
    if cfg.weights is not None:
        losses = losses * cfg.weights
    return float(losses.sum() / norm), grad


def ogd_step(model: GlobalModel, grad: GlobalModel, eta: float) -> GlobalModel:
    return model.map(lambda p, g: p - eta * g, grad)


def local_update(model: GlobalModel, inp: ModelInputs, cfg: LossConfig | None, steps: int,
                 eta: float) -> tuple[GlobalModel, float]:
    """``steps`` full-batch OGD iterations; returns the new model and the loss before the first step."""
    if steps < 1:
        raise ValueError("local_update needs at least one step")
    first = None
    for _ in range(steps):
        loss, grad = backward(model, inp, cfg)
        if first is None:
            first = loss
        model = ogd_step(model, grad, eta)
    return model, first
