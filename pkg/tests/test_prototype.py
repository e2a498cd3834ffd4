import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmofl import data as D
from mmofl import prototype as P
from mmofl.model import Dense2
from mmofl.numerics import Rng, l2_normalize

S2 = math.sqrt(2) / 2


class Identity:
    """Stand-in encoder returning its input, so prototypes are plain arithmetic."""

    def forward(self, x):
        return np.asarray(x, dtype=float), None


def batch_of(rows0, rows1, labels, available=None, quality=(True, True)):
    n = len(labels)
    av = np.ones((n, 2), bool) if available is None else np.asarray(available, bool)
    return D.RoundBatch([np.array(rows0, float), np.array(rows1, float)], av, np.array(labels),
                        np.array(quality), 0, 0)


def test_local_quality_gate():
    b = batch_of([[1, 0]], [[0, 1]], [0], quality=(False, True))
    out = P.local_prototypes(b, [Identity(), Identity()])
    assert set(out.entries) == {(1, 0)}


def test_local_single_sample():
    b = batch_of([[3, 4]], [[0, 2]], [1])
    out = P.local_prototypes(b, [Identity(), Identity()])
    np.testing.assert_allclose(out.entries[(0, 1)][0], [0.6, 0.8])
    assert out.entries[(0, 1)][1] == 1


def test_local_mean_of_two():
    b = batch_of([[1, 0], [0, 1]], [[1, 1], [1, 1]], [2, 2])
    out = P.local_prototypes(b, [Identity(), Identity()])
    np.testing.assert_allclose(out.entries[(0, 2)][0], [S2, S2], atol=1e-15)
    assert out.entries[(0, 2)][1] == 2


def test_local_skips_missing_samples():
    b = batch_of([[1, 0], [np.nan, np.nan]], [[0, 1], [1, 0]], [0, 0],
                 available=[[True, True], [False, True]])
    out = P.local_prototypes(b, [Identity(), Identity()])
    np.testing.assert_allclose(out.entries[(0, 0)][0], [1, 0])
    assert out.entries[(1, 0)][1] == 2


@given(seed=st.integers(0, 5000))
@settings(max_examples=40, deadline=None)
def test_gate_soundness_with_counters(seed):
    rng = Rng(seed)
    pool = D.synth_pool(rng, 3, (4, 4), 60, 3.0)
    batch = D.ClientStream(pool, 60, 0).advance()
    sp = D.ImbalanceSpec(0.6, 1.0, 1.0, 10.0, seed, 1)
    batch = D.inject_quality(D.inject_quantity(batch, sp, 0, rng.child("q")), sp, 0, rng.child("l"))
    encs = [Dense2.init(rng.child("e", m), 4, 5, 3) for m in range(2)]
    trace = {}
    out = P.local_prototypes(batch, encs, trace)
    violations = 0
    for (m, c), rows in trace.items():
        violations += int(np.sum(~batch.available[rows, m]))
        violations += int(np.sum(batch.labels[rows] != c))
        violations += len(rows) * int(not batch.quality[m])
        assert out.entries[(m, c)][1] == len(rows)
    assert violations == 0
    for vec, support in out.entries.values():
        assert abs(np.linalg.norm(vec) - 1) < 1e-9 and support >= 1


def pset(client, entries):
    return P.LocalPrototypeSet({k: (np.asarray(v, float), 1) for k, v in entries.items()}, client=client)


def test_aggregate_cases():
    a = pset(0, {(0, 0): [0.6, 0.8]})
    assert np.array_equal(P.aggregate_instant([a])[(0, 0)], np.array([0.6, 0.8]) / np.linalg.norm([0.6, 0.8]))
    b = pset(1, {(0, 0): [0.6, 0.8]})
    np.testing.assert_allclose(P.aggregate_instant([a, b])[(0, 0)], [0.6, 0.8], atol=1e-15)
    x, y = pset(0, {(1, 2): [1, 0]}), pset(1, {(1, 2): [0, 1]})
    out = P.aggregate_instant([x, y])
    np.testing.assert_allclose(out[(1, 2)], [S2, S2], atol=1e-15)


def test_aggregate_only_contributing_clients():
    a = pset(0, {(0, 0): [1, 0], (0, 1): [0, 1]})
    b = pset(1, {(0, 0): [1, 0]})
    out = P.aggregate_instant([a, b])
    np.testing.assert_allclose(out[(0, 1)], [0, 1])
    assert (1, 0) not in out


def test_aggregate_dimension_mismatch():
    with pytest.raises(P.ProtocolError):
        P.aggregate_instant([pset(0, {(0, 0): [1, 0]}), pset(1, {(0, 0): [1, 0, 0]})])


@given(seed=st.integers(0, 1000))
@settings(max_examples=30)
def test_aggregate_order_independent(seed):
    g = Rng(seed).gen
    sets = [pset(k, {(0, c): l2_normalize(g.normal(size=5)) for c in range(3) if g.random() < 0.8})
            for k in range(5)]
    ref = P.aggregate_instant(sets)
    shuffled = [sets[i] for i in g.permutation(5)]
    out = P.aggregate_instant(shuffled)
    assert ref.keys() == out.keys()
    for k in ref:
        assert np.array_equal(ref[k], out[k])


def test_aggregate_weighted_option():
    a = P.LocalPrototypeSet({(0, 0): (np.array([1.0, 0.0]), 3)}, client=0)
    b = P.LocalPrototypeSet({(0, 0): (np.array([0.0, 1.0]), 1)}, client=1)
    out = P.aggregate_instant([a, b], weighted=True)
    np.testing.assert_allclose(out[(0, 0)], l2_normalize([0.75, 0.25]))


def test_bank_base_case_and_recurrence():
    bank = P.PrototypeBank.empty(2, 3, 2)
    bank.update({(0, 1): np.array([1.0, 0.0])}, 0)
    assert np.array_equal(bank.vectors[0, 1], [1.0, 0.0]) and bank.updates[0, 1] == 1
    before = bank.vectors.copy()
    bank.update({(0, 1): np.array([0.0, 1.0])}, 1)
    np.testing.assert_allclose(bank.vectors[0, 1], [S2, S2], atol=1e-15)
    untouched = np.ones(bank.vectors.shape, bool)
    untouched[0, 1] = False
    assert np.array_equal(bank.vectors[untouched], before[untouched], equal_nan=True)
    assert bank.round == 1
    with pytest.raises(ValueError):
        bank.update({}, 1)


def test_bank_recurrence_equals_direct_mean():
    rng = Rng(17)
    for _ in range(200):
        n = int(rng.gen.integers(1, 51))
        contribs = rng.gen.normal(size=(n, 6))
        bank = P.PrototypeBank.empty(1, 1, 6, normalize=False)
        for t, v in enumerate(contribs):
            bank.update({(0, 0): v}, t)
        np.testing.assert_allclose(bank.vectors[0, 0], contribs.mean(axis=0), rtol=0, atol=1e-12)


def test_bank_literal_t_variant():
    bank = P.PrototypeBank.empty(1, 1, 2, normalize=False, literal_t=True)
    bank.update({(0, 0): np.array([1.0, 0.0])}, 1)
    bank.update({(0, 0): np.array([0.0, 3.0])}, 3)
    # ((3-1) * old + new) / 3
    np.testing.assert_allclose(bank.vectors[0, 0], [2 / 3, 1.0])


def test_bank_vectors_unit_norm():
    g = Rng(3).gen
    bank = P.PrototypeBank.empty(2, 2, 4)
    for t in range(20):
        bank.update({(t % 2, 1): l2_normalize(g.normal(size=4))}, t)
    for m in range(2):
        assert abs(np.linalg.norm(bank.vectors[m, 1]) - 1) < 1e-12
    assert bank.row_complete(0) is False and np.isnan(bank.vectors[0, 0]).all()


# -- quantizer ---------------------------------------------------------------------


def unit_set(g, n=3, dim=16):
    return P.LocalPrototypeSet({(i % 2, i): (l2_normalize(g.normal(size=dim)), i + 1) for i in range(n)})


def test_full_precision_round_trip_exact():
    s = unit_set(Rng(0).gen)
    back = P.dequantize(P.quantize(s, 32))
    for k, (v, sup) in s.entries.items():
        assert np.array_equal(back.entries[k][0], v) and back.entries[k][1] == sup


@pytest.mark.parametrize("bits", [1, 3, 8])
def test_constant_vector_round_trip(bits):
    lo, hi, codes = P.quantize_vector(np.full(5, 0.3), bits)
    e = P.QuantizedEntry(0, 0, 1, lo, hi, codes)
    assert np.all(codes == 0) and lo == hi
    np.testing.assert_allclose(P.reconstruct(e, bits), np.float32(0.3))


def test_all_zero_codes_reconstruct_constant():
    e = P.QuantizedEntry(0, 0, 1, 0.3, 0.3, np.zeros(4, np.uint16))
    assert np.all(P.reconstruct(e, 5) == 0.3)


def test_one_bit_hits_extremes():
    v = l2_normalize(Rng(1).gen.normal(size=16))
    lo, hi, codes = P.quantize_vector(v, 1)
    rec = P.reconstruct(P.QuantizedEntry(0, 0, 1, lo, hi, codes), 1)
    assert set(np.round(rec, 12)) <= {round(lo, 12), round(hi, 12)}


def test_four_bit_error_bound():
    g = Rng(2).gen
    for _ in range(200):
        v = l2_normalize(g.normal(size=16))
        lo, hi, codes = P.quantize_vector(v, 4)
        rec = P.reconstruct(P.QuantizedEntry(0, 0, 1, lo, hi, codes), 4)
        assert np.all(np.abs(rec - v) <= (hi - lo) / 30 + 1e-6)


def test_eight_bit_preserves_argmax_with_gap():
    g = Rng(3).gen
    checked = 0
    for _ in range(500):
        v = l2_normalize(g.normal(size=16))
        step = (v.max() - v.min()) / 255
        top2 = np.sort(v)[-2:]
        if top2[1] - top2[0] <= 2 * step:
            continue
        back = P.dequantize(P.quantize(P.LocalPrototypeSet({(0, 0): (v, 1)}), 8))
        assert np.argmax(back.entries[(0, 0)][0]) == np.argmax(v)
        checked += 1
    assert checked > 400


def test_dequantize_rejects_oversized_codes():
    q = P.QuantizedPrototypeSet([P.QuantizedEntry(0, 0, 1, 0.0, 1.0, np.array([0, 4], np.uint16))], bits=2)
    with pytest.raises(P.FormatError):
        P.dequantize(q)


def test_dequantize_renormalizes():
    s = unit_set(Rng(5).gen)
    back = P.dequantize(P.quantize(s, 3))
    for v, _ in back.entries.values():
        assert abs(np.linalg.norm(v) - 1) < 1e-12


def test_wire_size_examples():
    assert P.wire_size(P.quantize(P.LocalPrototypeSet(), 4)) == 0
    one = P.LocalPrototypeSet({(0, 0): (l2_normalize(np.arange(1.0, 17.0)), 5)})
    assert P.wire_size(P.quantize(one, 4)) == 2 + 4 + 8 + 8
    assert P.payload_bytes(16, 32) == 8 * P.payload_bytes(16, 4)


@pytest.mark.parametrize("bits", [1, 2, 3, 4, 7, 8, 12, 16, 32])
def test_bytes_round_trip_matches_wire_size(bits):
    s = unit_set(Rng(bits).gen, n=4, dim=13)
    q = P.quantize(s, bits)
    raw = P.to_bytes(q)
    assert len(raw) == P.wire_size(q)
    back = P.from_bytes(raw, bits, 13)
    for a, b in zip(q.entries, back.entries):
        assert (a.modality, a.cls, a.support) == (b.modality, b.cls, b.support)
        if bits == 32:
            np.testing.assert_allclose(b.codes, a.codes, rtol=1e-7)
        else:
            assert np.array_equal(a.codes, b.codes)
            assert np.float32(a.lo) == b.lo and np.float32(a.hi) == b.hi
    with pytest.raises(P.FormatError):
        P.from_bytes(raw[:-1], bits, 13)


def test_quantize_rejects_bad_bits():
    with pytest.raises(ValueError):
        P.quantize(P.LocalPrototypeSet(), 17)
