import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from scipy.stats import chisquare

from s3pool.exceptions import (
    BinomialBounds,
    CombinatorialExplosion,
    DivisibilityError,
    InvalidGeometry,
    SampleSizeError,
)
from s3pool.sampling import (
    PoolGeom,
    RngStream,
    SampleIndices,
    binomial_exact,
    draw_index_arrays,
    enumerate_grid_subsets,
    expectation_matrix,
    expectation_weights,
    sample_grid_indices,
    sample_sorted_without_replacement,
    subset_counts,
    subset_marginals,
)


def test_stream_replay():
    a, b = RngStream(42, 3, 7), RngStream(42, 3, 7)
    assert np.array_equal(a.random(16), b.random(16))
    assert a.stream_key == (3, 7)


def test_streams_with_distinct_keys_differ():
    base = RngStream(42, 3, 7)
    assert not np.array_equal(base.fork(3, 8).random(16), RngStream(42, 3, 7).random(16))
    assert not np.array_equal(base.fork(4).random(16), RngStream(42, 3, 7).random(16))


@pytest.mark.parametrize("k, s, g", [(0, 2, 2), (2, 0, 2), (2, 4, 2), (2, 2, 5)])
def test_invalid_geometry(k, s, g):
    with pytest.raises(InvalidGeometry):
        PoolGeom(k=k, s=s, g=g)


def test_geometry_defaults_grid_to_stride():
    geom = PoolGeom(k=3, s=2)
    assert geom.g == 2
    assert geom.per_grid == 1


def test_sample_full_interval():
    assert sample_sorted_without_replacement(RngStream(0), (3, 6), 4) == [3, 4, 5, 6]
    assert sample_sorted_without_replacement(RngStream(0), (7, 7), 1) == [7]


@pytest.mark.parametrize("interval, m", [((1, 4), 5), ((1, 4), 0), ((5, 4), 1)])
def test_sample_size_error(interval, m):
    with pytest.raises(SampleSizeError):
        sample_sorted_without_replacement(RngStream(0), interval, m)


def test_sample_two_of_four_is_uniform():
    rng = RngStream(11)
    draws = 60_000
    counts = Counter(tuple(sample_sorted_without_replacement(rng, (1, 4), 2)) for _ in range(draws))
    assert set(counts) == set(enumerate_grid_subsets(4, 2))
    sigma = math.sqrt(draws * (1 / 6) * (5 / 6))
    for count in counts.values():
        assert abs(count - draws / 6) <= 3 * sigma


def test_grid_indices_forced_partition():
    indices = sample_grid_indices(RngStream(5), 4, 4, PoolGeom(k=2, s=2, g=2))
    assert indices.rows[0] in (1, 2) and indices.rows[1] in (3, 4)
    assert indices.cols[0] in (1, 2) and indices.cols[1] in (3, 4)


def test_grid_indices_stride_one_is_identity():
    indices = sample_grid_indices(RngStream(5), 6, 4, PoolGeom(k=2, s=1, g=2))
    assert indices == SampleIndices([1, 2, 3, 4, 5, 6], [1, 2, 3, 4])


def test_grid_indices_are_valid():
    geom = PoolGeom(k=2, s=2, g=8)
    rng = RngStream(9)
    for _ in range(50):
        assert sample_grid_indices(rng, 16, 32, geom).is_valid(16, 32, geom)


def test_index_arrays_shapes():
    rows, cols = draw_index_arrays(RngStream(1), 3, 8, 12, PoolGeom(k=2, s=2, g=4))
    assert rows.shape == (3, 4)
    assert cols.shape == (3, 6)


def test_grid_must_divide_map():
    with pytest.raises(DivisibilityError):
        sample_grid_indices(RngStream(0), 6, 8, PoolGeom(k=2, s=2, g=4))


def test_is_valid_rejects_bad_selection():
    geom = PoolGeom(k=2, s=2, g=2)
    assert not SampleIndices([1, 2], [1, 3]).is_valid(4, 4, geom)
    assert not SampleIndices([3, 1], [1, 3]).is_valid(4, 4, geom)
    assert not SampleIndices([1], [1, 3]).is_valid(4, 4, geom)
    assert SampleIndices([1, 4], [2, 3]).is_valid(4, 4, geom)


@pytest.mark.parametrize("n, k, result", [(0, 0, 1), (4, 2, 6), (8, 4, 70), (64, 32, math.comb(64, 32))])
def test_binomial_exact(n, k, result):
    assert binomial_exact(n, k) == result


@pytest.mark.parametrize("n, k", [(65, 1), (3, 4), (4, -1)])
def test_binomial_bounds(n, k):
    with pytest.raises(BinomialBounds):
        binomial_exact(n, k)


expectation_data = [
    (PoolGeom(k=2, s=2, g=4), 1, [Fraction(3, 6), Fraction(2, 6), Fraction(1, 6), Fraction(0)]),
    (PoolGeom(k=2, s=2, g=4), 2, [Fraction(0), Fraction(1, 6), Fraction(2, 6), Fraction(3, 6)]),
    (PoolGeom(k=3, s=3, g=3), 1, [Fraction(1, 3)] * 3),
]


@pytest.mark.parametrize("geom, position, result", expectation_data)
def test_expectation_weights(geom, position, result):
    assert expectation_weights(geom, position) == result


def test_expectation_weights_match_brute_force():
    for g in range(1, 9):
        for s in (d for d in range(1, g + 1) if g % d == 0):
            geom = PoolGeom(k=1, s=s, g=g)
            oracle = subset_marginals(g, s)
            for pos in range(1, geom.per_grid + 1):
                weights = expectation_weights(geom, pos)
                assert weights == oracle[pos - 1]
                assert sum(weights) == 1


def test_expectation_weights_position_out_of_range():
    with pytest.raises(SampleSizeError):
        expectation_weights(PoolGeom(k=2, s=2, g=4), 3)


def test_expectation_matrix_rows_sum_to_one():
    matrix = expectation_matrix(8, PoolGeom(k=2, s=2, g=4))
    assert matrix.shape == (4, 8)
    assert np.allclose(matrix.sum(axis=1), 1.0)
    assert np.all(matrix[:2, 4:] == 0) and np.all(matrix[2:, :4] == 0)


@pytest.mark.parametrize(
    "g, s, result",
    [(2, 2, [(1,), (2,)]), (4, 4, [(1,), (2,), (3,), (4,)])],
)
def test_enumerate_grid_subsets(g, s, result):
    assert enumerate_grid_subsets(g, s) == result


def test_enumerate_grid_subsets_count():
    subsets = enumerate_grid_subsets(4, 2)
    assert len(subsets) == 6 == len(set(subsets))
    assert all(list(s) == sorted(s) for s in subsets)


def test_enumeration_guard():
    with pytest.raises(CombinatorialExplosion):
        enumerate_grid_subsets(40, 2)


chi_square_data = [(2, 2), (3, 3), (4, 2), (4, 4), (5, 5), (6, 2), (6, 3), (6, 6), (7, 7), (8, 2), (8, 4), (8, 8)]


@pytest.mark.parametrize("g, s", chi_square_data)
def test_subset_frequencies_pass_chi_square(g, s):
    subsets = math.comb(g, g // s)
    counts = subset_counts(RngStream(2024, g, s), g, s, 1000 * subsets)
    _, p = chisquare(counts)
    assert p > 0.001
