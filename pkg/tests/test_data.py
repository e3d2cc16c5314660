"""Data module: parsing, index structures, splits, synthesis."""

import io

import numpy as np
import pytest

from cmf import (DataError, FormatError, ParseError, SparseRatings, Triples,
                 build, gen_synthetic, load_cache, parse_coo, predict_pairs,
                 save_cache, save_coo, split_holdout)
from cmf.data import load_coo


def sorted_triple_list(user, item, val):
    return sorted(zip(user.tolist(), item.tolist(), val.tolist()))


def csr_triples(sr):
    t = sr.to_triples()
    return sorted_triple_list(t.user, t.item, t.rating)


def csc_triples(sr):
    items = np.repeat(np.arange(sr.n, dtype=np.int64), np.diff(sr.col_ptr))
    return sorted_triple_list(sr.row_idx.astype(np.int64), items, sr.csc_val)


class TestParse:
    def test_smallest_well_formed(self):
        triples, m, n = parse_coo(["0\t0\t5.0", "1\t2\t3.0"])
        assert len(triples) == 2 and (m, n) == (2, 3)
        assert triples[0] == (0, 0, 5.0)

    def test_empty_stream(self):
        triples, m, n = parse_coo([])
        assert len(triples) == 0 and m == 0 and n == 0

    def test_comments_and_blank_lines_skipped(self):
        triples, m, n = parse_coo(["# header", "", "3\t1\t2.5"])
        assert len(triples) == 1 and (m, n) == (4, 2)

    def test_csv_format(self):
        triples, m, n = parse_coo(["1,2,4.5"], fmt="csv")
        assert triples[0] == (1, 2, 4.5)

    def test_malformed_line_reports_line_number(self):
        with pytest.raises(ParseError, match="line 2"):
            parse_coo(["0\t0\t1.0", "0\t0"])

    def test_non_numeric_field_reports_line_number(self):
        with pytest.raises(ParseError, match="line 1"):
            parse_coo(["a\t0\t1.0"])

    def test_non_finite_rating_rejected(self):
        with pytest.raises(ParseError, match="non-finite"):
            parse_coo(["0\t0\tnan"])
        with pytest.raises(ParseError, match="non-finite"):
            parse_coo(["0\t0\tinf"])

    def test_duplicate_fixture_parses_then_last_wins(self):
        # 10-line fixture, (2, 3) appears twice; checked by hand
        lines = [f"{u}\t{v}\t{float(u + v)}" for u, v in
                 [(0, 0), (0, 1), (1, 2), (2, 3), (3, 0), (3, 4), (2, 3),
                  (4, 1), (4, 2), (0, 4)]]
        lines[6] = "2\t3\t99.0"  # second occurrence wins
        triples, m, n = parse_coo(lines)
        assert len(triples) == 10
        sr = build(triples, m, n)
        assert sr.nnz == 9
        cols, vals = sr.row(2)
        assert cols.tolist() == [3] and vals[0] == 99.0

    def test_explicit_dims_override_inference(self):
        _, m, n = parse_coo(["0\t0\t1.0"], m=10, n=20)
        assert (m, n) == (10, 20)


class TestBuild:
    def test_identity_pattern(self):
        sr = build([(0, 0, 1.0), (1, 1, 1.0)], 2, 2)
        assert sr.row_ptr.tolist() == [0, 1, 2]
        assert sr.col_idx.tolist() == [0, 1]

    def test_out_of_range_names_triple(self):
        with pytest.raises(DataError, match=r"\(5, 0, 1\.0\)"):
            build([(0, 0, 2.0), (5, 0, 1.0)], 3, 3)

    def test_csr_csc_same_multiset_random(self):
        rng = np.random.default_rng(11)
        k = 500
        triples = Triples(rng.integers(0, 100, k), rng.integers(0, 80, k),
                          rng.random(k, dtype=np.float32))
        sr = build(triples, 100, 80)
        assert csr_triples(sr) == csc_triples(sr)

    def test_column_indices_strictly_increase_within_rows(self):
        rng = np.random.default_rng(3)
        k = 400
        triples = Triples(rng.integers(0, 40, k), rng.integers(0, 30, k),
                          rng.random(k, dtype=np.float32))
        sr = build(triples, 40, 30)
        for u in range(sr.m):
            cols, _ = sr.row(u)
            assert (np.diff(cols) > 0).all()

    def test_empty_rows_and_columns_permitted(self):
        sr = build([(0, 0, 1.0)], 5, 5)
        assert sr.row_ptr.tolist() == [0, 1, 1, 1, 1, 1]

    def test_netflix_scale_memory_projection(self):
        # dtype arithmetic from a real instance, projected to m=480189,
        # n=17770, nnz=99e6: both index structures must fit in < 3 GB
        sr = build([(0, 0, 1.0)], 2, 2)
        per_nnz = (sr.col_idx.itemsize + sr.csr_val.itemsize
                   + sr.row_idx.itemsize + sr.csc_val.itemsize)
        per_ptr = sr.row_ptr.itemsize
        projected = 99e6 * per_nnz + (480189 + 17770 + 2) * per_ptr
        assert projected < 3e9


class TestSplit:
    def make(self, k=100, seed=0):
        rng = np.random.default_rng(seed)
        return Triples(rng.integers(0, 50, k), rng.integers(0, 40, k),
                       rng.random(k, dtype=np.float32))

    def test_ten_percent_holdout(self):
        triples = self.make(100)
        train, test = split_holdout(triples, 0.10, seed=42)
        assert len(test) == 10 and len(train) == 90

    def test_partition_is_disjoint_and_complete(self):
        triples = self.make(237, seed=5)
        train, test = split_holdout(triples, 0.25, seed=1)
        whole = sorted_triple_list(triples.user, triples.item, triples.rating)
        parts = (sorted_triple_list(train.user, train.item, train.rating)
                 + sorted_triple_list(test.user, test.item, test.rating))
        assert sorted(parts) == whole

    def test_fraction_bounds_rejected(self):
        triples = self.make(10)
        for bad in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(DataError):
                split_holdout(triples, bad, seed=0)

    def test_same_seed_same_split(self):
        triples = self.make(64, seed=9)
        a_train, a_test = split_holdout(triples, 0.2, seed=7)
        b_train, b_test = split_holdout(triples, 0.2, seed=7)
        assert np.array_equal(a_test.user, b_test.user)
        assert np.array_equal(a_train.rating, b_train.rating)


class TestSynthetic:
    def test_noiseless_ratings_equal_exact_dot(self):
        triples, truth = gen_synthetic(12, 9, 3, 0.5, 0.0, seed=4)
        pred = predict_pairs(truth.x_true, truth.theta_true,
                             triples.user, triples.item)
        assert np.array_equal(pred, triples.rating)

    def test_rank_one_dense_reconstruction(self):
        triples, truth = gen_synthetic(4, 4, 1, 1.0, 0.0, seed=2)
        assert len(triples) == 16
        dense = np.zeros((4, 4), dtype=np.float64)
        dense[triples.user, triples.item] = triples.rating
        recon = truth.x_true.astype(np.float64) @ truth.theta_true.astype(np.float64).T
        assert np.allclose(dense, recon, atol=1e-6)

    def test_fixed_seed_is_byte_identical(self):
        a, ta = gen_synthetic(20, 15, 4, 0.3, 0.2, seed=123)
        b, tb = gen_synthetic(20, 15, 4, 0.3, 0.2, seed=123)
        assert a.user.tobytes() == b.user.tobytes()
        assert a.rating.tobytes() == b.rating.tobytes()
        assert ta.x_true.tobytes() == tb.x_true.tobytes()

    def test_entry_count_and_distinct_positions(self):
        triples, _ = gen_synthetic(10, 10, 2, 0.37, 0.1, seed=0)
        assert len(triples) == round(0.37 * 100)
        flat = triples.user * 10 + triples.item
        assert len(np.unique(flat)) == len(triples)

    def test_too_sparse_rejected(self):
        with pytest.raises(DataError):
            gen_synthetic(10, 10, 2, 0.001, 0.0, seed=0)


class TestRoundTrips:
    def test_text_round_trip_identity_on_canonical_data(self, tmp_path):
        rng = np.random.default_rng(8)
        k = 300
        triples = Triples(rng.integers(0, 30, k), rng.integers(0, 25, k),
                          rng.random(k, dtype=np.float32))
        sr = build(triples, 30, 25)
        canonical = sr.to_triples()
        path = tmp_path / "ratings.tsv"
        save_coo(path, canonical)
        reread, m, n = load_coo(path)
        sr2 = build(reread, 30, 25)
        assert np.array_equal(sr.col_idx, sr2.col_idx)
        assert np.array_equal(sr.csr_val, sr2.csr_val)
        assert np.array_equal(sr.row_ptr, sr2.row_ptr)

    def test_binary_cache_round_trip(self, tmp_path):
        rng = np.random.default_rng(21)
        k = 200
        sr = build(Triples(rng.integers(0, 50, k), rng.integers(0, 60, k),
                           rng.random(k, dtype=np.float32)), 50, 60)
        path = tmp_path / "ratings.cmfr"
        save_cache(path, sr)
        sr2 = load_cache(path)
        for field in ("row_ptr", "col_idx", "csr_val", "col_ptr", "row_idx", "csc_val"):
            assert np.array_equal(getattr(sr, field), getattr(sr2, field)), field

    def test_truncated_cache_rejected(self, tmp_path):
        sr = build([(0, 1, 2.0), (1, 0, 3.0)], 2, 2)
        path = tmp_path / "ratings.cmfr"
        save_cache(path, sr)
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(FormatError, match="truncated"):
            load_cache(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.cmfr"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_cache(path)
