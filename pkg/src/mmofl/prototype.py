"""Class prototypes per modality: client extraction, server aggregation, the cumulative bank
and the uniform scalar quantizer used on the uplink.

Wire layout of one quantized entry (little-endian, in this order)::

    u8 modality | u8 class | u32 support | f32 min | f32 max | ceil(D*b/8) code bytes

Codes are packed LSB-first.  With ``b = 32`` the code bytes are the raw float32 values.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import ZeroNormError, l2_normalize

FULL_PRECISION = 32
ENTRY_HEADER_BYTES = 2 + 4
SCALE_BYTES = 8


class ProtocolError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class LocalPrototypeSet:
    entries: dict = field(default_factory=dict)  # (m, c) -> (unit vector, support)
    client: int = 0
    round: int = 0

    def __len__(self) -> int:
        return len(self.entries)


def local_prototypes(batch, encoders, trace: dict | None = None) -> LocalPrototypeSet:
    """Normalized mean encoding per (modality, class) over samples with p=1, q=1, y=c.

    ``batch`` needs ``features``, ``available``, ``labels``, ``quality``.  When
    ``trace`` is given it receives the row indices that fed each cell.
    """
    out = LocalPrototypeSet(client=getattr(batch, "client", 0), round=getattr(batch, "round", 0))
    labels = np.asarray(batch.labels)
    for m, enc in enumerate(encoders):
        if not batch.quality[m]:
            continue
        avail = np.asarray(batch.available)[:, m]
        if not avail.any():
            continue
        rows = np.flatnonzero(avail)
        z = enc.forward(batch.features[m][rows])[0]
        for c in np.unique(labels[rows]):
            sel = labels[rows] == c
            try:
                vec = l2_normalize(z[sel].mean(axis=0))
            except ZeroNormError:
                continue
            out.entries[(m, int(c))] = (vec, int(sel.sum()))
            if trace is not None:
                trace[(m, int(c))] = rows[sel]
    return out


def aggregate_instant(sets: list[LocalPrototypeSet], weighted: bool = False) -> dict:
    """Per cell, the (re-normalized) mean over the clients that submitted it.

    Sets are summed in ascending client index so the result does not depend on
    arrival order.
    """
    sums: dict = {}
    dim = None
    for s in sorted(sets, key=lambda s: s.client):
        for key in sorted(s.entries):
            vec, support = s.entries[key]
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ProtocolError(f"prototype dim {vec.shape[0]} from client {s.client}, expected {dim}")
            w = float(support) if weighted else 1.0
            acc, tot = sums.get(key, (np.zeros(dim), 0.0))
            sums[key] = (acc + w * vec, tot + w)
    out = {}
    for key in sorted(sums):
        acc, tot = sums[key]
        try:
            out[key] = l2_normalize(acc / tot)
        except ZeroNormError:
            continue
    return out


@dataclass
class PrototypeBank:
    """Cumulative global prototypes on a modality x class grid; NaN marks an empty cell.

    ``normalize=False`` turns the bank into a plain running mean (used to check
    the recurrence).  ``literal_t`` weights by the global round number instead
    of the per-cell update count.
    """

    vectors: np.ndarray
    updates: np.ndarray
    round: int = -1
    normalize: bool = True
    literal_t: bool = False

    @classmethod
    def empty(cls, modalities: int, classes: int, dim: int, **kw) -> "PrototypeBank":
        return cls(np.full((modalities, classes, dim), np.nan), np.zeros((modalities, classes), dtype=np.int64), **kw)

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(self.vectors.copy(), self.updates.copy(), self.round, self.normalize, self.literal_t)

    def filled(self, m: int, c: int) -> bool:
        return bool(self.updates[m, c] > 0)

    def row_complete(self, m: int) -> bool:
        return bool((self.updates[m] > 0).all())

    def update(self, instant: dict, t: int) -> "PrototypeBank":
        if t <= self.round:
            raise ValueError(f"bank rounds must increase ({t} after {self.round})")
        for (m, c), v in sorted(instant.items()):
            n = self.updates[m, c]
            if n == 0:
                new = np.array(v, dtype=float)
            else:
                count = t if self.literal_t else n + 1
                new = ((count - 1) * self.vectors[m, c] + v) / count
                if self.normalize:
                    new = l2_normalize(new)
            self.vectors[m, c] = new
            self.updates[m, c] = n + 1
        self.round = t
        return self


def update_cumulative(bank: PrototypeBank, instant: dict, t: int) -> PrototypeBank:
    return bank.update(instant, t)


# ---------------------------------------------------------------------------
# quantization


@dataclass
class QuantizedEntry:
    modality: int
    cls: int
    support: int
    lo: float
    hi: float
    codes: np.ndarray


@dataclass
class QuantizedPrototypeSet:
    entries: list
    bits: int
    client: int = 0
    round: int = 0


def _check_bits(bits: int) -> None:
    if not (1 <= bits <= 16 or bits == FULL_PRECISION):
        raise ValueError(f"bits must be in 1..16 or {FULL_PRECISION}, got {bits}")


def quantize_vector(v: np.ndarray, bits: int) -> tuple[float, float, np.ndarray]:
    _check_bits(bits)
    if bits == FULL_PRECISION:
        return float(np.min(v)), float(np.max(v)), np.array(v, dtype=float)
    lo = float(np.float32(np.min(v)))
    hi = float(np.float32(np.max(v)))
    levels = (1 << bits) - 1
    if hi == lo:
        return lo, hi, np.zeros(len(v), dtype=np.uint16)
    codes = np.rint((np.asarray(v) - lo) / (hi - lo) * levels)
    return lo, hi, np.clip(codes, 0, levels).astype(np.uint16)


def reconstruct(entry: QuantizedEntry, bits: int) -> np.ndarray:
    """Vector rebuilt from codes, before re-normalization."""
    if bits == FULL_PRECISION:
        return np.array(entry.codes, dtype=float)
    levels = (1 << bits) - 1
    codes = np.asarray(entry.codes)
    if codes.size and int(codes.max()) > levels:
        raise FormatError(f"code {int(codes.max())} does not fit in {bits} bits")
    return entry.lo + codes.astype(float) / levels * (entry.hi - entry.lo)


def quantize(pset: LocalPrototypeSet, bits: int) -> QuantizedPrototypeSet:
    _check_bits(bits)
    entries = []
    for (m, c) in sorted(pset.entries):
        vec, support = pset.entries[(m, c)]
        lo, hi, codes = quantize_vector(vec, bits)
        entries.append(QuantizedEntry(m, c, support, lo, hi, codes))
    return QuantizedPrototypeSet(entries, bits, pset.client, pset.round)


def dequantize(qset: QuantizedPrototypeSet) -> LocalPrototypeSet:
    out = LocalPrototypeSet(client=qset.client, round=qset.round)
    for e in qset.entries:
        vec = reconstruct(e, qset.bits)
        if qset.bits != FULL_PRECISION:
            try:
                vec = l2_normalize(vec)
            except ZeroNormError:
                continue
        out.entries[(e.modality, e.cls)] = (vec, e.support)
    return out


def payload_bytes(dim: int, bits: int) -> int:
    return math.ceil(dim * bits / 8)


def wire_size(qset: QuantizedPrototypeSet) -> int:
    return sum(ENTRY_HEADER_BYTES + SCALE_BYTES + payload_bytes(len(e.codes), qset.bits) for e in qset.entries)


def _pack_codes(codes: np.ndarray, bits: int) -> bytes:
    if bits == FULL_PRECISION:
        return np.asarray(codes, dtype="<f4").tobytes()
    c = np.asarray(codes, dtype=np.uint32)
    bitarr = ((c[:, None] >> np.arange(bits, dtype=np.uint32)) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(bitarr, bitorder="little").tobytes()


def _unpack_codes(raw: bytes, dim: int, bits: int) -> np.ndarray:
    if bits == FULL_PRECISION:
        return np.frombuffer(raw, dtype="<f4").astype(float)
    bitarr = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little")[:dim * bits]
    weights = (1 << np.arange(bits, dtype=np.uint32))
    return (bitarr.reshape(dim, bits).astype(np.uint32) * weights).sum(axis=1).astype(np.uint16)


def to_bytes(qset: QuantizedPrototypeSet) -> bytes:
    parts = []
    for e in qset.entries:
        parts.append(struct.pack("<BBIff", e.modality, e.cls, e.support, e.lo, e.hi))
        parts.append(_pack_codes(e.codes, qset.bits))
    return b"".join(parts)


def from_bytes(raw: bytes, bits: int, dim: int) -> QuantizedPrototypeSet:
    _check_bits(bits)
    head = struct.calcsize("<BBIff")
    size = head + payload_bytes(dim, bits)
    if len(raw) % size:
        raise FormatError(f"{len(raw)} bytes is not a whole number of {size}-byte entries")
    entries = []
    for off in range(0, len(raw), size):
        m, c, support, lo, hi = struct.unpack_from("<BBIff", raw, off)
        codes = _unpack_codes(raw[off + head:off + size], dim, bits)
        entries.append(QuantizedEntry(m, c, support, lo, hi, codes))
    return QuantizedPrototypeSet(entries, bits)
