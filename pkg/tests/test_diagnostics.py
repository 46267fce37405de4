import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from okapi.core import EmbeddingSet, Filtered, MatchRecord, ValidationError
from okapi.diagnostics import (
    EmptyGridAfterFilter,
    EmptySet,
    GridSpec,
    NoMatches,
    ZeroVariance,
    balance,
    domain_balance,
    grid_search,
    grid_to_csv,
    matched_balance,
)
from okapi.propensity import PropensityModel, fit_embedding_set


class TestBalance:
    def test_identical_sets(self):
        a = np.random.default_rng(0).normal(size=(30, 4))
        r = balance(a, a)
        assert r.per_dim_smd == [0.0] * 4
        assert r.per_dim_vr == [1.0] * 4
        assert r.mean_abs_log_vr == 0.0

    def test_hand_computed(self):
        r = balance([0.0, 2.0], [1.0, 3.0])
        # means 1 and 2, sample variances 2 and 2
        assert r.per_dim_smd[0] == pytest.approx(1 / math.sqrt(2), abs=1e-15)
        assert r.per_dim_vr == [1.0]

    def test_scaled_copy(self):
        a = np.array([[-1.5], [-0.5], [0.5], [1.5]])
        r = balance(a, 2 * a)
        assert r.per_dim_vr[0] == pytest.approx(0.25, abs=1e-15)
        assert r.per_dim_smd[0] == 0.0

    def test_errors(self):
        with pytest.raises(EmptySet):
            balance(np.zeros((0, 2)), np.ones((3, 2)))
        with pytest.raises(EmptySet):
            balance([[1.0]], [[1.0], [2.0]])
        with pytest.raises(ZeroVariance):
            balance([[1.0], [1.0]], [[2.0], [2.0]])

    def test_constant_equal_sets(self):
        r = balance([[1.0], [1.0]], [[1.0], [1.0]])
        assert r.per_dim_smd == [0.0] and r.per_dim_vr == [1.0]

    @settings(max_examples=100)
    @given(
        arrays(np.float64, (6, 2), elements=st.floats(-100, 100)),
        arrays(np.float64, (5, 2), elements=st.floats(-100, 100)),
        st.floats(0.1, 10).map(lambda c: c if c != 0 else 1.0),
    )
    def test_symmetry_and_scale(self, a, b, c):
        if (a.var(axis=0) < 1e-6).any() or (b.var(axis=0) < 1e-6).any():
            return
        ab, ba = balance(a, b), balance(b, a)
        np.testing.assert_allclose(ab.per_dim_smd, ba.per_dim_smd, rtol=1e-12)
        np.testing.assert_allclose(ab.per_dim_vr, 1 / np.array(ba.per_dim_vr), rtol=1e-12)
        assert ab.mean_abs_log_vr == pytest.approx(ba.mean_abs_log_vr, rel=1e-12, abs=1e-15)
        scaled = balance(-c * a, -c * b)
        np.testing.assert_allclose(scaled.per_dim_smd, ab.per_dim_smd, rtol=1e-9, atol=1e-12)


def shifted_gaussians(n=300, d=4, offset=1.0, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, d))
    b = rng.normal(size=(n, d))
    b[:, 0] += offset
    return EmbeddingSet(
        np.arange(2 * n),
        np.r_[np.zeros(n, int), np.ones(n, int)],
        np.vstack([a, b]),
        2,
        np.r_[np.zeros(n), np.full(n, np.nan)],
    )


class TestMatchedBalance:
    def test_identical_neighbours(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(5, 3))
        data = EmbeddingSet(np.arange(10), np.r_[[0] * 5, [1] * 5], np.vstack([z, z]), 2)
        recs = [MatchRecord(i, (i + 5,), (0.0,)) for i in range(5)]
        r = matched_balance(data, recs)
        assert r.per_dim_smd == [0.0] * 3 and r.per_dim_vr == [1.0] * 3
        assert r.retention_rate == 1.0 and r.domain_pair == (0, 1)

    def test_no_matches(self):
        data = shifted_gaussians(10)
        with pytest.raises(NoMatches):
            matched_balance(data, [MatchRecord(0, filtered=Filtered.QUERY_CALIPER)])

    def test_unknown_ids(self):
        data = shifted_gaussians(10)
        with pytest.raises(ValidationError):
            matched_balance(data, [MatchRecord(0, (99999,), (0.1,))])

    def test_orientation_independent(self):
        # pairs found in either direction are oriented by domain label before comparing
        rng = np.random.default_rng(2)
        z = rng.normal(size=(8, 2))
        data = EmbeddingSet(np.arange(8), [0, 0, 0, 0, 1, 1, 1, 1], z, 2)
        fwd = [MatchRecord(i, (i + 4,), (0.1,)) for i in range(4)]
        rev = [MatchRecord(i + 4, (i,), (0.1,)) for i in range(4)]
        assert matched_balance(data, fwd).per_dim_smd == matched_balance(data, rev).per_dim_smd

    def test_matching_beats_raw(self):
        data = shifted_gaussians()
        from okapi.matcher import CaliperParams, matched_samples

        m = fit_embedding_set(data)
        recs = matched_samples(data, m, CaliperParams(0.0, 0.1, 1.0), 1)
        assert matched_balance(data, recs).mean_smd < domain_balance(data).mean_smd


class TestGridSearch:
    def test_single_cell(self):
        data = shifted_gaussians(60)
        m = fit_embedding_set(data)
        res = grid_search(data, m, GridSpec([0.0], [math.inf], [1.0]))
        assert len(res) == 1 and res[0].params.t_std == math.inf

    def test_zero_retention_cell_dropped(self):
        data = shifted_gaussians(60, offset=8.0)
        m = fit_embedding_set(data)
        res = grid_search(data, m, GridSpec([0.0, 0.45], [math.inf], [1.0], min_retention=0.1))
        assert [r.params.t_fixed for r in res] == [0.0]
        with pytest.raises(EmptyGridAfterFilter):
            grid_search(data, m, GridSpec([0.45], [math.inf], [1.0], min_retention=0.1))

    def test_dominant_cell_first(self):
        # every unlabelled point is an exact copy of a labelled one plus a far-off outlier group;
        # the outliers are confidently scored and only the strict caliper removes them
        rng = np.random.default_rng(4)
        base = rng.normal(size=(40, 2)) + np.array([0.0, 3.0])
        outl = rng.normal(size=(40, 2)) * 0.1 + np.array([3.0, 0.0])
        emb = np.vstack([base, base, outl])
        data = EmbeddingSet(np.arange(120), np.r_[[0] * 40, [1] * 80], emb, 2, np.r_[np.zeros(40), np.full(80, np.nan)])
        m = fit_embedding_set(data, epochs=2000)
        res = grid_search(data, m, GridSpec([0.0, 0.2], [math.inf], [1.0], min_retention=0.1))
        assert res[0].params.t_fixed == 0.2
        assert res[0].report.mean_smd < 1e-12

    def test_enumeration_order_invariant(self):
        data = shifted_gaussians(50, seed=3)
        m = fit_embedding_set(data)
        a = grid_search(data, m, GridSpec([0.0, 0.05], [0.5, math.inf], [1.0, 3.0]))
        b = grid_search(data, m, GridSpec([0.05, 0.0], [math.inf, 0.5], [3.0, 1.0]))
        assert [(r.params, r.score) for r in a] == [(r.params, r.score) for r in b]
        assert grid_to_csv(a) == grid_to_csv(b)

    def test_csv_shape(self):
        data = shifted_gaussians(40)
        res = grid_search(data, fit_embedding_set(data), GridSpec([0.0], [0.5, math.inf], [1.0]))
        lines = grid_to_csv(res).splitlines()
        assert lines[0].startswith("rank,t_fixed,t_std,tau")
        assert len(lines) == 1 + len(res)


def test_domain_balance_multiclass_mean():
    rng = np.random.default_rng(0)
    z = np.vstack([rng.normal(size=(30, 2)) + i for i in range(3)])
    data = EmbeddingSet(np.arange(90), np.repeat([0, 1, 2], 30), z, 3)
    r = domain_balance(data)
    parts = [balance(z[:30], z[30:60]), balance(z[:30], z[60:]), balance(z[30:60], z[60:])]
    assert r.mean_smd == pytest.approx(np.mean([p.mean_smd for p in parts]))
    assert r.domain_pair is None
