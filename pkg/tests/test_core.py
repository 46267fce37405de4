import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from okapi.core import (
    DegenerateVector,
    EmbeddingSet,
    Filtered,
    FormatError,
    MatchRecord,
    ValidationError,
    l2_normalize,
    load_embeddings,
    load_matches,
    normalize_rows,
    save_embeddings,
    save_matches,
)


def make_set(n=20, d=3, domains=3, targets=True, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.normal(size=n) if targets else None
    if targets:
        t[::3] = np.nan
    return EmbeddingSet(
        ids=rng.permutation(1000)[:n].astype(np.uint64) * 7919,
        domains=rng.integers(0, domains, n),
        embeddings=rng.normal(size=(n, d)).astype(np.float32),
        domain_count=domains,
        targets=t,
    )


class TestLoad:
    def test_three_row_csv(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,domain,e0,e1\n1,0,0.5,1.0\n2,1,-1.5,2.0\n3,1,0.0,3.25\n")
        data = load_embeddings(p)
        assert data.dim == 2
        assert len(data) == 3
        assert list(data.ids) == [1, 2, 3]
        assert data.domain_count == 2
        assert not data.has_targets
        np.testing.assert_array_equal(data.embeddings[2], [0.0, 3.25])

    def test_csv_with_target_column(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,domain,target,e0\n5,0,1,0.5\n6,1,,1.0\n")
        data = load_embeddings(p)
        assert data.has_targets
        assert data.targets[0] == 1.0 and math.isnan(data.targets[1])
        assert list(data.split_labels()) == [1, 0]

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "d.okpi"
        save_embeddings(make_set(), p)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_embeddings(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "d.okpi"
        save_embeddings(make_set(), p)
        raw = bytearray(p.read_bytes())
        raw[4:8] = struct.pack("<I", 2)
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_embeddings(p)

    def test_truncated_binary(self, tmp_path):
        p = tmp_path / "d.okpi"
        save_embeddings(make_set(), p)
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_embeddings(p)

    def test_nan_embedding(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,domain,e0,e1\n1,0,1.0,NaN\n")
        with pytest.raises(ValidationError):
            load_embeddings(p)

    def test_duplicate_ids(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,domain,e0\n1,0,1.0\n1,1,2.0\n")
        with pytest.raises(ValidationError):
            load_embeddings(p)

    def test_row_arity(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,domain,e0,e1\n1,0,1.0\n")
        with pytest.raises(FormatError):
            load_embeddings(p)

    def test_domain_out_of_range(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("id,domain,e0\n1,0,1.0\n2,3,2.0\n")
        with pytest.raises(ValidationError):
            load_embeddings(p, domain_count=2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_embeddings(tmp_path / "nope.okpi")


class TestRoundTrip:
    @pytest.mark.parametrize("targets", [True, False])
    def test_binary_bitwise(self, tmp_path, targets):
        data = make_set(targets=targets)
        p = tmp_path / "d.okpi"
        save_embeddings(data, p)
        again = load_embeddings(p)
        assert again.equals(data)
        save_embeddings(again, tmp_path / "e.okpi")
        assert (tmp_path / "e.okpi").read_bytes() == p.read_bytes()

    @pytest.mark.parametrize("targets", [True, False])
    def test_csv_exact_f32(self, tmp_path, targets):
        data = make_set(targets=targets)
        p = tmp_path / "d.csv"
        save_embeddings(data, p)
        again = load_embeddings(p, domain_count=data.domain_count)
        assert again.equals(data)

    def test_binary_layout(self, tmp_path):
        data = EmbeddingSet([9], [1], [[1.0, 2.0]], 2, [3.5])
        p = tmp_path / "d.okpi"
        save_embeddings(data, p)
        raw = p.read_bytes()
        head = struct.pack("<4sIQIIB", b"OKPI", 1, 1, 2, 2, 1)
        row = struct.pack("<QIdff", 9, 1, 3.5, 1.0, 2.0)
        assert raw == head + row


class TestMatches:
    def test_empty(self, tmp_path):
        p = tmp_path / "m.jsonl"
        save_matches([], p)
        assert p.read_bytes() == b""

    def test_single_neighbor(self, tmp_path):
        p = tmp_path / "m.jsonl"
        save_matches([MatchRecord(3, (7,), (0.25,))], p)
        assert p.read_text() == '{"query_id":3,"neighbor_ids":[7],"distances":[0.25],"filtered":"none"}\n'

    def test_filtered_record(self, tmp_path):
        p = tmp_path / "m.jsonl"
        save_matches([MatchRecord(3, filtered=Filtered.QUERY_CALIPER)], p)
        assert p.read_text() == '{"query_id":3,"neighbor_ids":[],"distances":[],"filtered":"query_caliper"}\n'

    def test_round_trip_and_byte_stability(self, tmp_path):
        recs = [
            MatchRecord(2**63 + 5, (1, 2), (0.1, 0.30000000000000004)),
            MatchRecord(4, filtered=Filtered.NO_VALID_KEYS),
        ]
        save_matches(recs, tmp_path / "a.jsonl")
        save_matches(recs, tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert load_matches(tmp_path / "a.jsonl") == recs

    def test_record_invariants(self):
        with pytest.raises(ValidationError):
            MatchRecord(1, (2, 3), (0.5, 0.1))
        with pytest.raises(ValidationError):
            MatchRecord(1, (), (), Filtered.NONE)
        with pytest.raises(ValidationError):
            MatchRecord(1, (2,), (0.1,), Filtered.QUERY_CALIPER)


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_array_equal(l2_normalize([3.0, 4.0]), [0.6, 0.8])

    def test_zero(self):
        with pytest.raises(DegenerateVector):
            l2_normalize([0.0, 0.0])

    def test_below_threshold(self):
        with pytest.raises(DegenerateVector):
            l2_normalize([1e-31, 0.0])

    def test_tiny_vector(self):
        v = np.array([1e-20, 0.0])
        expected = v / math.sqrt(1e-20 * 1e-20)
        np.testing.assert_array_equal(l2_normalize(v), expected)
        np.testing.assert_array_equal(l2_normalize(v), [1.0, 0.0])

    @settings(max_examples=200)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8).filter(lambda v: max(map(abs, v)) > 1e-6))
    def test_unit_and_idempotent(self, v):
        u = l2_normalize(v)
        assert abs(np.linalg.norm(u) - 1.0) < 1e-12
        np.testing.assert_allclose(l2_normalize(u), u, atol=1e-12)

    @settings(max_examples=200)
    @given(
        st.lists(st.floats(-10, 10), min_size=3, max_size=3).filter(lambda v: max(map(abs, v)) > 1e-3),
        st.lists(st.floats(-10, 10), min_size=3, max_size=3).filter(lambda v: max(map(abs, v)) > 1e-3),
    )
    def test_distance_identity(self, a, b):
        a, b = l2_normalize(a), l2_normalize(b)
        assert abs(np.sum((a - b) ** 2) - (2 - 2 * a @ b)) < 1e-10

    def test_rows_match_single(self):
        z = np.random.default_rng(1).normal(size=(50, 5)) * 10.0 ** np.arange(-3, 2)
        rows = normalize_rows(z)
        for i in range(len(z)):
            assert rows[i].tobytes() == l2_normalize(z[i]).tobytes()
