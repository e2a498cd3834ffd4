"""Brute-force and finite-difference checks behind the ``oracle`` CLI verb.

Each check returns ``(name, passed, detail)``.  They are independent of the
vectorized code paths they check: loops, direct formulas, and central
differences.
"""
from __future__ import annotations

import math
import time

import numpy as np

from . import prototype as P
from .federation import fedavg
from .model import GlobalModel, LossConfig, ModelInputs, backward, loss_value
from .numerics import Rng, finite_diff_grad, l2_normalize


def _tiny(seed: int, loss: str) -> tuple[GlobalModel, ModelInputs, LossConfig]:
    rng = Rng(seed, ("oracle",))
    g = rng.child("x").gen
    classes = int(g.integers(2, 4))
    n = 5
    model = GlobalModel.init(rng.child("m"), (3, 3), classes, hidden=4, d_feat=3)
    xs = [g.normal(size=(n, 3)), g.normal(size=(n, 3))]
    labels = g.integers(classes, size=n)
    present = np.ones((n, 2), dtype=bool)
    subst = None
    if seed % 2:
        # substituted (constant) features for a couple of samples
        present[[0, 3], int(g.integers(2))] = False
        subst = [g.normal(size=(n, 3)), g.normal(size=(n, 3))]
        for m in range(2):
            xs[m][~present[:, m]] = np.nan
    bank = np.stack([[l2_normalize(g.normal(size=3)) for _ in range(classes)] for _ in range(2)])
    if loss == "CE":
        cfg = LossConfig()
    elif loss == "PCE":
        cfg = LossConfig(1.0, bank, (0, 1), ce_weight=0.0)
    else:
        cfg = LossConfig(0.5, bank, (int(seed % 2),))
    return model, ModelInputs(xs, present, labels, subst), cfg


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))


def gradient_check(cases: int = 100, h: float = 1e-5) -> list[tuple[str, bool, str]]:
    out = []
    for loss in ("CE", "PCE", "PLR"):
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(cases):
            model, inp, cfg = _tiny(seed, loss)
            grad = backward(model, inp, cfg)[1].flatten()
            fd = finite_diff_grad(lambda v: loss_value(model.with_flat(v), inp, cfg), model.flatten(), h)
            worst = max(worst, _rel_err(grad, fd))
        secs = time.perf_counter() - t0
        out.append((f"gradient {loss}", worst < 1e-4, f"max rel err {worst:.2e} over {cases} cases, {secs:.1f}s"))
    return out


def _pce_direct(z, protos, y) -> float:
    d = [sum((a - b) ** 2 for a, b in zip(z, p)) for p in protos]
    return -math.log(math.exp(-d[y]) / sum(math.exp(-v) for v in d))


def pce_cases() -> list[tuple[str, bool, str]]:
    from .model import pce_loss
    single = pce_loss(np.array([0.3, -0.2]), np.array([[1.0, 0.0]]), 0)
    equi = pce_loss(np.zeros(2), np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]), 1)
    # distances 0 and 2 for z on the first prototype
    two = pce_loss(np.array([1.0, 0.0]), np.array([[1.0, 0.0], [0.0, 1.0]]), 0)
    target = -math.log(1 / (1 + math.exp(-2)))
    g = Rng(5).gen
    worst = 0.0
    for _ in range(200):
        c = int(g.integers(1, 6))
        z, protos, y = g.normal(size=4), g.normal(size=(c, 4)), int(g.integers(c))
        worst = max(worst, abs(pce_loss(z, protos, y) - _pce_direct(z, protos, y)))
    return [
        ("pce C=1", single == 0.0, f"{single!r}"),
        ("pce equidistant", abs(equi - math.log(3)) < 1e-9, f"{equi:.12f} vs log 3"),
        ("pce two-class case", abs(two - target) < 1e-6, f"{two:.9f} vs {target:.9f}"),
        ("pce random vs direct", worst < 1e-9, f"max abs diff {worst:.1e}"),
    ]


def recurrence_check(sequences: int = 1000) -> tuple[str, bool, str]:
    g = Rng(11).gen
    worst = 0.0
    for _ in range(sequences):
        contribs = g.normal(size=(int(g.integers(1, 51)), 4))
        bank = P.PrototypeBank.empty(1, 1, 4, normalize=False)
        for t, v in enumerate(contribs):
            bank.update({(0, 0): v}, t)
        worst = max(worst, float(np.max(np.abs(bank.vectors[0, 0] - contribs.mean(axis=0)))))
    return ("prototype recurrence vs mean", worst <= 1e-12, f"max abs diff {worst:.1e}")


def quantizer_check(vectors: int = 10_000, dim: int = 16) -> tuple[str, bool, str]:
    g = Rng(13).gen
    v = g.normal(size=(vectors, dim))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    bad = 0
    for bits in range(1, 13):
        for row in v:
            lo, hi, codes = P.quantize_vector(row, bits)
            rec = P.reconstruct(P.QuantizedEntry(0, 0, 1, lo, hi, codes), bits)
            bad += int(np.any(np.abs(rec - row) > (hi - lo) / (2 * (2**bits - 1)) + 1e-6))
    return ("quantizer bound b=1..12", bad == 0, f"{bad} violations over {vectors} vectors per b")


def fedavg_check() -> tuple[str, bool, str]:
    models = [(k, GlobalModel.init(Rng(k), (3, 3), 2, 4, 3)) for k in range(4)]
    ref = fedavg(models).flatten()
    g = Rng(3).gen
    same = all(np.array_equal(fedavg([models[i] for i in g.permutation(4)]).flatten(), ref) for _ in range(24))
    direct = np.mean([m.flatten() for _, m in models], axis=0)
    close = float(np.max(np.abs(ref - direct)))
    return ("fedavg order + direct mean", same and close < 1e-15, f"max abs diff {close:.1e}")


def run_all(quick: bool = False) -> list[tuple[str, bool, str]]:
    rows = gradient_check(20 if quick else 100)
    rows += pce_cases()
    rows.append(recurrence_check(100 if quick else 1000))
    rows.append(quantizer_check(500 if quick else 10_000))
    rows.append(fedavg_check())
    return rows
