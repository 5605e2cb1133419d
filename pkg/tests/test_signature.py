import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from covertlab.attacks import ChannelConfig, RotationSchedule, WorkloadProfile, encode_cpu, generate_overt
from covertlab.model import BitStream, Label, RecordSet, ResourceKind, Trace
from covertlab.signature import (
    ReferenceDistribution,
    SignatureConfig,
    balance,
    build_signature,
    intervals,
    ks_critical_coefficient,
    ks_statistic,
    ks_two_sample,
    paired_training_set,
    zscore,
)


def brute_ks(a, b):
    """ECDF difference evaluated point by point over the pooled sample."""
    best = 0.0
    for x in list(a) + list(b):
        fa = sum(1 for v in a if v <= x) / len(a)
        fb = sum(1 for v in b if v <= x) / len(b)
        best = max(best, abs(fa - fb))
    return best


def test_intervals():
    assert intervals([0, 7000, 17000, 37000]).tolist() == [7.0, 10.0, 20.0]
    assert intervals([0, 1000]).tolist() == [1.0]
    with pytest.raises(ValueError):
        intervals([5000, 5000])
    with pytest.raises(ValueError):
        intervals([5000])


def test_zscore():
    assert zscore([1, 2, 3]).tolist() == [-1.0, 0.0, 1.0]
    assert zscore([5, 5, 5]).tolist() == [0.0, 0.0, 0.0]
    z = zscore(np.random.default_rng(0).exponential(3.0, 500))
    assert abs(z.mean()) < 1e-12
    assert abs(z.std(ddof=1) - 1.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=50))
def test_zscore_preserves_order(xs):
    z = zscore(xs)
    x = np.asarray(xs)
    if np.all(x == x[0]):
        return
    for i in range(len(x)):
        for j in range(len(x)):
            if x[i] < x[j]:
                assert z[i] <= z[j]


def test_ks_examples():
    assert ks_two_sample([1, 2, 3], [4, 5, 6]) == 1.0
    assert ks_two_sample([1, 2], [1, 3]) == 0.5
    x = np.random.default_rng(1).normal(size=40)
    res = ks_statistic(x, ReferenceDistribution.two_sample(x))
    assert res.statistic == 0.0 and not res.reject


def test_ks_frozen_values():
    # values from brute_ks, frozen
    rng = np.random.default_rng(2024)
    a, b = rng.normal(size=17), rng.normal(0.5, 1.0, size=31)
    assert ks_two_sample(a, b) == pytest.approx(0.17077798861480076, abs=1e-12)
    assert brute_ks(a, b) == pytest.approx(0.17077798861480076, abs=1e-12)


def test_ks_matches_brute_force_and_scipy():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = rng.normal(size=rng.integers(5, 101)).round(1)  # rounding forces ties
        b = rng.normal(0.2, 1.3, size=rng.integers(5, 101)).round(1)
        d = ks_two_sample(a, b)
        assert abs(d - brute_ks(a, b)) <= 1e-12
        assert abs(d - stats.ks_2samp(a, b).statistic) <= 1e-12


def test_ks_one_sample_matches_scipy():
    rng = np.random.default_rng(3)
    x = rng.normal(1.0, 2.0, 80)
    res = ks_statistic(x, ReferenceDistribution.gaussian(0.5, 2.0))
    assert res.statistic == pytest.approx(stats.kstest(x, "norm", args=(0.5, 2.0)).statistic, abs=1e-12)
    assert res.critical_value == pytest.approx(ks_critical_coefficient(0.05) / math.sqrt(80))


def test_critical_coefficient():
    assert ks_critical_coefficient(0.05) == pytest.approx(1.3581, abs=1e-4)


@settings(max_examples=60, deadline=None)
@given(
    a=st.lists(st.floats(0.01, 100, allow_nan=False), min_size=5, max_size=60),
    b=st.lists(st.floats(0.01, 100, allow_nan=False), min_size=30, max_size=60),
)
def test_ks_invariant_under_monotone_transform(a, b):
    d = ks_statistic(a, ReferenceDistribution.two_sample(b)).statistic
    d_log = ks_statistic(np.log(a), ReferenceDistribution.two_sample(np.log(b))).statistic
    d_aff = ks_statistic(3.0 * np.asarray(a) + 7.0, ReferenceDistribution.two_sample(3.0 * np.asarray(b) + 7.0)).statistic
    assert d == d_log == d_aff


def test_ks_preconditions():
    ref = ReferenceDistribution.two_sample(np.arange(30.0))
    with pytest.raises(ValueError):
        ks_statistic([1, 2, 3, 4], ref)
    with pytest.raises(ValueError):
        ReferenceDistribution.two_sample(np.arange(29.0))
    with pytest.raises(ValueError):
        ReferenceDistribution.gaussian(0.0, 0.0)


def regular_trace(n, step=1000, label=Label.OVERT):
    ts = np.arange(n) * step
    channel = ResourceKind.CPU if label is Label.COVERT else None
    return Trace(ts, ["vm1"] * n, ["cpu"] * n, np.full(n, 40.0), np.full(n, 100.0), label, channel, 0)


@pytest.fixture(scope="module")
def reference():
    return ReferenceDistribution.from_trace(generate_overt(3000, WorkloadProfile.BURSTY, 9))


def test_block_counts(reference):
    assert len(build_signature(regular_trace(10_001), 5000, reference)) == 2
    blocks = build_signature(regular_trace(201), 200, reference)
    assert len(blocks) == 1 and len(blocks[0]) == 200
    with pytest.raises(ValueError, match="needs at least 201"):
        build_signature(regular_trace(200), 200, reference)


def test_partial_block_policy(reference):
    tr = regular_trace(251)
    assert [len(b) for b in build_signature(tr, 200, reference)] == [200, 50]
    assert [len(b) for b in build_signature(tr, 200, reference, SignatureConfig(200, keep_partial=False))] == [200]


def test_block_fields_and_shared_alpha(reference):
    gen = np.random.default_rng(0)
    n = 1001
    ts = np.cumsum(gen.integers(200, 4000, n))
    usage = gen.uniform(0, 100, n).round(2)
    tr = Trace(ts, ["vm1"] * n, ["cpu"] * n, usage, np.full(n, 1.0), Label.OVERT, None, 0)
    blocks = build_signature(tr, 250, reference)
    x = intervals(ts)
    for k, b in enumerate(blocks):
        xb = x[k * 250 : (k + 1) * 250]
        assert len({r.alpha for r in b.records}) == 1
        assert b.alpha == pytest.approx(brute_ks(xb, reference.sample), abs=1e-12)
        assert np.allclose(b.beta, zscore(xb))
        assert np.array_equal(b.context, usage[1 + k * 250 : 1 + (k + 1) * 250])


def test_covert_block_rejects(reference):
    cfg = ChannelConfig(timing_jitter_ms=20, jitter_std=1.0, seed=1)
    tr = encode_cpu(BitStream.random(600, 2), cfg, RotationSchedule())
    blocks = build_signature(tr, 5000, reference)
    x = intervals(tr.timestamps)[:5000]
    # intervals sit in a narrow spike near 1 s, so D is pinned by the reference mass around it
    lower = max(np.mean(reference.sample < x.min()), np.mean(reference.sample > x.max()))
    upper = max(np.mean(reference.sample <= x.max()), np.mean(reference.sample >= x.min()))
    assert blocks[0].ks.reject
    assert lower - 1e-12 <= blocks[0].alpha <= upper + 1e-12
    assert blocks[0].alpha == pytest.approx(brute_ks(x, reference.sample), abs=1e-12)
    binary = build_signature(tr, 5000, reference, SignatureConfig(5000, binarize_ks=True))
    assert binary[0].alpha == 1.0


def labelled(n_pos, n_neg):
    X = np.arange(3 * (n_pos + n_neg), dtype=float).reshape(-1, 3)
    return RecordSet(X, np.r_[np.ones(n_pos), -np.ones(n_neg)])


def test_balance_oversamples_minority():
    rs = labelled(150, 50)
    out = balance(rs, 200, seed=4)
    assert out.n_covert == 100 and out.n_overt == 100
    neg = out.features[out.labels < 0]
    orig_neg = rs.features[rs.labels < 0]
    assert np.array_equal(neg[:50], orig_neg)  # every negative kept once
    extra = {tuple(r) for r in neg[50:]}
    assert extra <= {tuple(r) for r in orig_neg}
    assert np.array_equal(out.features[out.labels > 0], rs.features[:100])


def test_balance_identity_and_errors():
    rs = labelled(100, 100)
    out = balance(rs, 200, seed=1)
    assert {tuple(r) for r in out.features} == {tuple(r) for r in rs.features}
    with pytest.raises(ValueError):
        balance(labelled(3, 0), 2, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.integers(1, 50), st.integers(0, 2**32))
def test_balance_exact_and_deterministic(p, q, half, seed):
    rs = labelled(p, q)
    a, b = balance(rs, 2 * half, seed), balance(rs, 2 * half, seed)
    assert a.n_covert == a.n_overt == half
    assert np.array_equal(a.features, b.features)


def test_paired_training_set(reference):
    overt = build_signature(regular_trace(401, step=1700), 200, reference)
    covert = build_signature(regular_trace(601, label=Label.COVERT), 200, reference)
    rs = paired_training_set(overt, covert, 200, seed=0)
    assert len(rs) == 400 and rs.n_covert == rs.n_overt == 200


def test_zscore_subnormal_spread_is_constant():
    assert zscore([0.0, 5e-324, 0.0]).tolist() == [0.0, 0.0, 0.0]
