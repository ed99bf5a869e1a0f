"""Randomness, the per-grid sorted sampler and the exact combinatorics behind it.

Every random draw in the package goes through an `RngStream`. A stream is
addressed by ``(seed, layer_id, step)`` and backed by numpy's counter-based
Philox generator, so a pooling layer at a given training step can be
replayed without any state shared with other layers or steps.
"""
import itertools
import math
from collections import Counter
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from attrs import Factory, define, field, frozen

from .exceptions import (
    BinomialBounds,
    CombinatorialExplosion,
    DivisibilityError,
    InvalidGeometry,
    SampleSizeError,
)

MASK64 = 2**64 - 1
MAX_BINOMIAL_N = 64
MAX_SUBSETS = 10**6


@define
class RngStream:
    """Seedable, counter-addressable random stream.

    Two streams built from equal ``(seed, layer_id, step)`` produce
    bit-identical draws. Distinct keys never share state. One instance must
    not be consumed from several threads at once.
    """

    seed: int = field(converter=int)
    layer_id: int = field(default=0, converter=int)
    step: int = field(default=0, converter=int)
    _generator: np.random.Generator = field(init=False, repr=False, eq=False)

    def __attrs_post_init__(self):
        sequence = np.random.SeedSequence(
            self.seed & MASK64, spawn_key=(self.layer_id, self.step)
        )
        self._generator = np.random.Generator(np.random.Philox(sequence))

    @property
    def stream_key(self) -> tuple[int, int]:
        return self.layer_id, self.step

    def fork(self, layer_id: int, step: Optional[int] = None) -> "RngStream":
        """Fresh stream with the same seed at another address."""
        return RngStream(self.seed, layer_id, self.step if step is None else step)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def permuted(self, array: np.ndarray, axis: int = -1) -> np.ndarray:
        """Shuffle every 1-d slice along `axis` independently (Fisher-Yates)."""
        return self._generator.permuted(array, axis=axis)

    def random(self, size=None) -> np.ndarray:
        return self._generator.random(size)

    def normal(self, size=None) -> np.ndarray:
        return self._generator.standard_normal(size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._generator.integers(low, high, size)


def _check_geometry(instance, attribute, value):
    k, s, g = instance.k, instance.s, instance.g
    if k < 1 or s < 1 or g < s or g % s:
        raise InvalidGeometry(k, s, g)


@frozen
class PoolGeom:
    """Pooling window `k`, stride `s` and grid size `g` (defaults to `s`)."""

    k: int = field(converter=int)
    s: int = field(converter=int)
    g: int = field(
        default=Factory(lambda self: self.s, takes_self=True),
        converter=int,
        validator=_check_geometry,
    )

    @property
    def per_grid(self) -> int:
        """Number of rows (columns) kept from each grid."""
        return self.g // self.s

    def check_map(self, h: int, w: int, stochastic: bool = True) -> None:
        """Check that the stride, and for sampling the grid, divide the map.

        Raises:
            DivisibilityError: A side is not a multiple of s (or of g).
        """
        for size in (h, w):
            if size % self.s:
                raise DivisibilityError(size, self.s)
            if stochastic and size % self.g:
                raise DivisibilityError(size, self.g)


def _int_tuple(values) -> tuple[int, ...]:
    return tuple(int(v) for v in values)


@frozen
class SampleIndices:
    """Sorted 1-based rows and columns picked by one downsampling draw."""

    rows: tuple[int, ...] = field(converter=_int_tuple)
    cols: tuple[int, ...] = field(converter=_int_tuple)

    def is_valid(self, h: int, w: int, geom: PoolGeom) -> bool:
        """Check the per-grid count and global strict ordering against (h, w)."""
        for picked, size in ((self.rows, h), (self.cols, w)):
            if len(picked) != size // geom.s:
                return False
            if any(b <= a for a, b in zip(picked, picked[1:])):
                return False
            if picked and not 1 <= picked[0] <= picked[-1] <= size:
                return False
            per_grid = Counter((i - 1) // geom.g for i in picked)
            if any(per_grid[p] != geom.per_grid for p in range(size // geom.g)):
                return False
        return True


def sample_sorted_without_replacement(
    rng: RngStream, interval: Sequence[int], m: int
) -> list[int]:
    """Draw `m` sorted distinct integers uniformly from the closed interval [a, b].

    A uniform permutation of the interval is drawn, its first `m` entries are
    kept and sorted, so every m-subset has probability 1 / C(b - a + 1, m).

    Raises:
        SampleSizeError: m < 1 or m larger than the interval.
    """
    a, b = interval
    size = b - a + 1
    if size < 1 or not 1 <= m <= size:
        raise SampleSizeError(m, (a, b))
    return sorted(int(a + v) for v in rng.permutation(size)[:m])


def _draw_axis(rng: RngStream, count: int, size: int, geom: PoolGeom) -> np.ndarray:
    grids = size // geom.g
    base = np.tile(np.arange(geom.g, dtype=np.int64), (count, grids, 1))
    picked = np.sort(rng.permuted(base, axis=-1)[..., : geom.per_grid], axis=-1)
    picked += (np.arange(grids, dtype=np.int64) * geom.g)[:, None] + 1
    return picked.reshape(count, grids * geom.per_grid)


def draw_index_arrays(
    rng: RngStream, n: int, h: int, w: int, geom: PoolGeom
) -> tuple[np.ndarray, np.ndarray]:
    """Draw per-example row and column selections as 1-based integer arrays.

    Returns arrays of shape (n, h / s) and (n, w / s). All rows are drawn
    before all columns, so row draws never depend on column draws.

    Raises:
        DivisibilityError: g does not divide h or w.
    """
    geom.check_map(h, w)
    rows = _draw_axis(rng, n, h, geom)
    cols = _draw_axis(rng, n, w, geom)
    return rows, cols


def sample_grid_indices(rng: RngStream, h: int, w: int, geom: PoolGeom) -> SampleIndices:
    """Pick g/s sorted rows (columns) inside every vertical (horizontal) grid.

    Raises:
        DivisibilityError: g does not divide h or w.
    """
    rows, cols = draw_index_arrays(rng, 1, h, w, geom)
    return SampleIndices(rows[0], cols[0])


def binomial_exact(n: int, k: int) -> int:
    """Exact C(n, k) for 0 <= k <= n <= 64, with C(0, 0) = 1.

    Raises:
        BinomialBounds: Arguments outside the supported range.
    """
    if not 0 <= k <= n <= MAX_BINOMIAL_N:
        raise BinomialBounds(n, k)
    return math.comb(n, k)


def _comb_or_zero(n: int, k: int) -> int:
    return binomial_exact(n, k) if 0 <= k <= n else 0


def expectation_weights(geom: PoolGeom, position: int) -> list[Fraction]:
    """Probability that the `position`-th smallest pick of a grid lands on a, for a in 1..g.

    h_a = C(a - 1, position - 1) * C(g - a, g/s - position) / C(g, g/s).

    Raises:
        SampleSizeError: position outside [1, g/s].
        BinomialBounds: g above 64.
    """
    m = geom.per_grid
    if not 1 <= position <= m:
        raise SampleSizeError(position, (1, m))
    total = binomial_exact(geom.g, m)
    return [
        Fraction(_comb_or_zero(a - 1, position - 1) * _comb_or_zero(geom.g - a, m - position), total)
        for a in range(1, geom.g + 1)
    ]


def expectation_matrix(size: int, geom: PoolGeom, dtype=np.float64) -> np.ndarray:
    """Weights mapping a side of length `size` to its size/s expected picks.

    Row i holds, over the source positions, the distribution of the i-th
    selected index. Rows and columns are sampled independently, so the
    expectation of a whole map is ``W_h @ o @ W_w.T``.
    """
    if size % geom.g:
        raise DivisibilityError(size, geom.g)
    m = geom.per_grid
    blocks = [[float(v) for v in expectation_weights(geom, pos)] for pos in range(1, m + 1)]
    out = np.zeros((size // geom.s, size), dtype=dtype)
    for i in range(size // geom.s):
        block, pos = divmod(i, m)
        out[i, block * geom.g : (block + 1) * geom.g] = blocks[pos]
    return out


def enumerate_grid_subsets(g: int, s: int) -> list[tuple[int, ...]]:
    """Every sorted choice of g/s indices from 1..g.

    Raises:
        InvalidGeometry: s does not divide g.
        CombinatorialExplosion: More than a million subsets.
    """
    geom = PoolGeom(k=1, s=s, g=g)
    count = math.comb(g, geom.per_grid)
    if count > MAX_SUBSETS:
        raise CombinatorialExplosion(count, MAX_SUBSETS)
    return list(itertools.combinations(range(1, g + 1), geom.per_grid))


def subset_marginals(g: int, s: int) -> list[list[Fraction]]:
    """Brute-force distribution of each order statistic over all subsets.

    Entry [pos - 1][a - 1] is the probability that the pos-th smallest pick
    equals a.
    """
    subsets = enumerate_grid_subsets(g, s)
    counts = [[0] * g for _ in range(g // s)]
    for subset in subsets:
        for pos, a in enumerate(subset):
            counts[pos][a - 1] += 1
    return [[Fraction(c, len(subsets)) for c in row] for row in counts]


def subset_counts(rng: RngStream, g: int, s: int, draws: int) -> list[int]:
    """Frequency of each subset of `enumerate_grid_subsets(g, s)` over `draws` grid samples."""
    subsets = enumerate_grid_subsets(g, s)
    lookup = {subset: i for i, subset in enumerate(subsets)}
    picked = _draw_axis(rng, draws, g, PoolGeom(k=1, s=s, g=g))
    counts = [0] * len(subsets)
    for row in picked:
        counts[lookup[tuple(int(v) for v in row)]] += 1
    return counts
