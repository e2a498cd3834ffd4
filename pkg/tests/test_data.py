import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmofl import data as D
from mmofl.numerics import Rng


def nearest_centroid_accuracy(train: D.Pool, test: D.Pool) -> float:
    """Oracle classifier: class means on concatenated modalities."""
    xtr = np.hstack(train.features)
    xte = np.hstack(test.features)
    classes = np.unique(train.labels)
    cents = np.array([xtr[train.labels == c].mean(axis=0) for c in classes])
    d = ((xte[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(classes[d.argmin(axis=1)] == test.labels))


def two_pools(sep, seed=0, size=4000):
    rng = Rng(seed)
    means = D.class_means(rng.child("m"), 4, (8, 8), sep)
    return (D.synth_pool(rng.child("a"), 4, (8, 8), size, sep, means),
            D.synth_pool(rng.child("b"), 4, (8, 8), size, sep, means))


def test_synth_separation_six_is_easy_for_nearest_centroid():
    train, test = two_pools(6.0)
    assert nearest_centroid_accuracy(train, test) > 0.95


def test_synth_separation_zero_is_chance():
    train, test = two_pools(0.0)
    assert abs(nearest_centroid_accuracy(train, test) - 0.25) < 0.05


def test_synth_one_per_class_and_shapes():
    pool = D.synth_pool(Rng(1), 5, (3, 4), 5, 2.0)
    assert sorted(pool.labels.tolist()) == [0, 1, 2, 3, 4]
    assert pool.dims == (3, 4)
    s = pool[0]
    assert s.available == (True, True) and s.features[1].shape == (4,)


def test_synth_rejects_bad_args():
    with pytest.raises(ValueError):
        D.synth_pool(Rng(0), 4, (8, 8), 100, -1.0)
    with pytest.raises(ValueError):
        D.synth_pool(Rng(0), 4, (8,), 100, 1.0)
    with pytest.raises(ValueError):
        D.synth_pool(Rng(0), 4, (8, 8), 3, 1.0)


def test_class_means_pairwise_distance():
    means = D.class_means(Rng(2), 4, (8, 8), 6.0)
    full = np.hstack(means)
    for i in range(4):
        for j in range(i + 1, 4):
            assert math.isclose(np.linalg.norm(full[i] - full[j]), 6.0, rel_tol=1e-12)


# -- HAR-style text -----------------------------------------------------------


def test_har_empty_file(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("")
    assert len(D.load_har_numeric(p, (2, 2))) == 0


def test_har_single_line(tmp_path):
    p = tmp_path / "one.txt"
    p.write_text("0.1 0.2 0.3 0.4 2\n")
    pool = D.load_har_numeric(p, (2, 2), classes=3, standardize=False)
    s = pool[0]
    assert s.features[0].tolist() == [0.1, 0.2]
    assert s.features[1].tolist() == [0.3, 0.4]
    assert s.label == 2


def test_har_round_trip(tmp_path):
    pool = D.synth_pool(Rng(4), 3, (3, 5), 50, 2.0)
    p = tmp_path / "pool.txt"
    D.write_har_numeric(p, pool)
    back = D.load_har_numeric(p, (3, 5), classes=3, standardize=False)
    assert np.array_equal(back.labels, pool.labels)
    for a, b in zip(back.features, pool.features):
        assert np.array_equal(a, b)


def test_har_standardizes_per_channel(tmp_path):
    pool = D.synth_pool(Rng(4), 3, (3, 5), 200, 2.0)
    p = tmp_path / "pool.txt"
    D.write_har_numeric(p, pool)
    back = D.load_har_numeric(p, (3, 5))
    for f in back.features:
        np.testing.assert_allclose(f.mean(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(f.std(axis=0), 1, atol=1e-12)


def test_har_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("0.1 0.2 0.3 0.4 1\n0.1 0.2 0.3 1\n")
    with pytest.raises(D.ParseError, match="line 2"):
        D.load_har_numeric(p, (2, 2))
    p.write_text("0.1 0.2 x 0.4 1\n")
    with pytest.raises(D.ParseError, match="line 1"):
        D.load_har_numeric(p, (2, 2))
    p.write_text("0.1 0.2 0.3 0.4 1\n0.1 0.2 0.3 0.4 7\n")
    with pytest.raises(D.SchemaError, match="line 2"):
        D.load_har_numeric(p, (2, 2), classes=6)


# -- partition -----------------------------------------------------------------


def test_partition_single_client():
    pool = D.synth_pool(Rng(0), 4, (2, 2), 100, 1.0)
    (only,) = D.partition_dirichlet(Rng(1), pool, 0.5, 1)
    assert sorted(only.uids.tolist()) == list(range(100))


@given(seed=st.integers(0, 10_000), k=st.integers(1, 8), alpha=st.floats(0.05, 50))
@settings(max_examples=60, deadline=None)
def test_partition_conserves_and_is_disjoint(seed, k, alpha):
    pool = D.synth_pool(Rng(seed), 4, (2, 2), 97, 1.0)
    parts = D.partition_dirichlet(Rng(seed + 1), pool, alpha, k)
    uids = np.concatenate([p.uids for p in parts])
    assert len(uids) == len(pool)
    assert sorted(uids.tolist()) == list(range(len(pool)))


def test_partition_large_alpha_is_near_uniform():
    pool = D.synth_pool(Rng(0), 4, (2, 2), 4000, 1.0)
    worst = 0.0
    for s in range(100):
        for part in D.partition_dirichlet(Rng(s), pool, 1e6, 5):
            hist = np.bincount(part.labels, minlength=4)
            worst = max(worst, np.max(np.abs(hist / 200.0 - 1.0)))
    assert worst <= 0.05


def test_partition_errors():
    pool = D.synth_pool(Rng(0), 2, (2, 2), 4, 1.0)
    with pytest.raises(ValueError):
        D.partition_dirichlet(Rng(0), pool, 1.0, 5)
    with pytest.raises(ValueError):
        D.partition_dirichlet(Rng(0), pool, 0.0, 2)


# -- stream --------------------------------------------------------------------


def letters_pool(n):
    return D.Pool([np.arange(n, dtype=float)[:, None], np.arange(n, dtype=float)[:, None]], np.zeros(n, dtype=int))


def test_advance_fifo():
    stream = D.ClientStream(letters_pool(4), window=3, refresh=1)
    assert stream.window_indices.tolist() == [0, 1, 2]
    batch = D.advance(stream)
    assert batch.features[0][:, 0].tolist() == [1.0, 2.0, 3.0]
    assert batch.available.all() and batch.quality.all()


def test_advance_zero_refresh():
    stream = D.ClientStream(letters_pool(10), window=4, refresh=0)
    a, b = stream.advance(), stream.advance()
    assert np.array_equal(a.features[0], b.features[0])


@given(n=st.integers(1, 30), r=st.integers(0, 10), steps=st.integers(0, 40), size=st.integers(1, 50))
def test_advance_index_arithmetic(n, r, steps, size):
    stream = D.ClientStream(letters_pool(size), window=n, refresh=r)
    batch = None
    for _ in range(steps):
        batch = stream.advance()
    end = n + steps * r
    expected = [i % size for i in range(end - n, end)]
    assert stream.window_indices.tolist() == expected
    if batch is not None:
        assert batch.features[0][:, 0].tolist() == [float(i) for i in expected]
        assert len(batch) == n


# -- injectors -----------------------------------------------------------------


def make_batch(n=200, dims=(8, 8), seed=0):
    pool = D.synth_pool(Rng(seed), 4, dims, n, 6.0)
    return D.ClientStream(pool, n, 0).advance()


def spec(**kw):
    base = dict(rounds=10, seed=3)
    base.update(kw)
    return D.ImbalanceSpec(**base)


def test_quantity_identity_when_zero():
    b = make_batch()
    out = D.inject_quantity(b, spec(miss_fraction=0.0, round_fraction_quantity=1.0), 0, Rng(0))
    assert out.available.all()
    assert all(np.array_equal(x, y) for x, y in zip(out.features, b.features))


def test_quantity_full_miss_clears_exactly_one():
    b = make_batch()
    out = D.inject_quantity(b, spec(miss_fraction=1.0, round_fraction_quantity=1.0), 4, Rng(0))
    assert np.all((~out.available).sum(axis=1) == 1)
    assert b.available.all()  # input untouched


def test_quantity_counts():
    per_mod = []
    for s in range(200):
        b = make_batch(n=500, dims=(2, 2), seed=1)
        out = D.inject_quantity(b, spec(miss_fraction=0.5, round_fraction_quantity=1.0), 0, Rng(s))
        missing = ~out.available
        assert missing.any(axis=1).sum() == 250
        per_mod.append(missing.sum(axis=0))
    assert np.all(np.abs(np.mean(per_mod, axis=0) - 125) < 3)


def test_quantity_only_on_affected_rounds():
    sp = spec(miss_fraction=1.0, round_fraction_quantity=0.3)
    assert len(sp.quantity_rounds) == 3
    for t in range(10):
        out = D.inject_quantity(make_batch(20), sp, t, Rng(t))
        assert out.available.all() == (t not in sp.quantity_rounds)


def test_quality_identity_when_zero_fraction():
    b = make_batch()
    for t in range(10):
        out = D.inject_quality(b, spec(round_fraction_quality=0.0), t, Rng(t))
        assert out.quality.all()
        assert all(np.array_equal(x, y) for x, y in zip(out.features, b.features))


def test_quality_infinite_snr_sets_flag_only():
    b = make_batch()
    out = D.inject_quality(b, spec(round_fraction_quality=1.0, snr_db=math.inf), 0, Rng(0))
    assert out.quality.sum() == 1
    assert all(np.array_equal(x, y) for x, y in zip(out.features, b.features))


@pytest.mark.parametrize("dim,tol", [(64, 0.5), (8, 2.0)])
def test_quality_snr_measured(dim, tol):
    b = make_batch(n=100, dims=(dim, dim))
    out = D.inject_quality(b, spec(round_fraction_quality=1.0, snr_db=10.0), 0, Rng(5))
    m = int(np.flatnonzero(~out.quality)[0])
    sig = b.features[m]
    noise = out.features[m] - sig
    snr = 10 * np.log10(np.mean(sig ** 2, axis=1) / np.mean(noise ** 2, axis=1))
    assert np.all(np.abs(snr - 10.0) <= tol)
    assert np.array_equal(out.features[1 - m], b.features[1 - m])


def test_quality_skips_zero_power_and_missing():
    b = make_batch(n=10, dims=(4, 4))
    b.features[0][0] = 0.0
    b.features[1][0] = 0.0
    b.available[1, :] = [False, True]
    b.features[0][1] = np.nan
    out = D.inject_quality(b, spec(round_fraction_quality=1.0, snr_db=0.0), 0, Rng(1))
    m = int(np.flatnonzero(~out.quality)[0])
    assert np.all(out.features[m][0] == 0.0)
    if m == 0:
        assert np.isnan(out.features[0][1]).all()


@given(seed=st.integers(0, 1000), mf=st.floats(0, 1), t=st.integers(0, 9))
@settings(max_examples=50, deadline=None)
def test_injectors_conserve_shape(seed, mf, t):
    b = make_batch(n=30, dims=(3, 5), seed=seed % 7)
    sp = spec(miss_fraction=mf, round_fraction_quantity=0.5, round_fraction_quality=0.5)
    out = D.inject_quality(D.inject_quantity(b, sp, t, Rng(seed).child("q")), sp, t, Rng(seed).child("l"))
    assert len(out) == len(b)
    assert np.array_equal(out.labels, b.labels)
    assert [f.shape for f in out.features] == [f.shape for f in b.features]
    assert not np.any((~out.available).all(axis=1))
    assert (~out.quality).sum() <= 1


def test_affected_rounds_depend_only_on_seed_and_fraction():
    a = D.affected_rounds(1, 150, 0.7, "quantity")
    assert a == D.affected_rounds(1, 150, 0.7, "quantity")
    assert len(a) == 105
    assert D.frac_count(0.3, 200) == 60


def test_stream_determinism():
    def seq(seed):
        pool = D.synth_pool(Rng(seed), 4, (3, 3), 300, 2.0)
        s = D.ClientStream(pool, 50, 7)
        sp = spec(miss_fraction=0.4, round_fraction_quantity=0.5, round_fraction_quality=0.5)
        out = []
        for t in range(10):
            b = D.inject_quality(D.inject_quantity(s.advance(), sp, t, Rng(seed).child(t, "q")), sp, t,
                                 Rng(seed).child(t, "l"))
            out.append(np.nan_to_num(np.hstack(b.features)).tobytes() + b.available.tobytes())
        return out
    assert seq(3) == seq(3)
