from collections import Counter

import numpy as np
import pytest

from s3pool.exceptions import DivisibilityError, InferenceTapeError, NegativeActivations
from s3pool.pooling import (
    FirstStage,
    Inference,
    Mode,
    avg_pool,
    avg_pool_backward,
    exact_expectation_infer,
    max_pool_standard,
    max_pool_stride1,
    pool_backward,
    s3pool_backward,
    s3pool_forward,
    stochastic_downsample,
    uniform_downsample,
    zeiler_stochastic_pool,
)
from s3pool.sampling import PoolGeom, RngStream
from s3pool.tensor import Tensor4, full, zeros


def square(values):
    return Tensor4(np.array(values, dtype=np.float64)[None, None])


def batch_of(values, n):
    return Tensor4(np.broadcast_to(np.array(values, dtype=np.float64), (n, 1) + np.shape(values)))


def grid_map():
    return square([[10 * y + x for x in range(1, 5)] for y in range(1, 5)])


def random_map(seed, dims):
    return Tensor4(np.random.default_rng(seed).normal(size=dims))


def test_max_pool_stride1_clamps_border():
    out, _ = max_pool_stride1(square([[1, 2], [3, 4]]), 2)
    assert out.data[0, 0].tolist() == [[4, 4], [4, 4]]


def test_max_pool_stride1_trivial():
    x = random_map(0, (2, 3, 5, 5))
    assert max_pool_stride1(x, 1)[0] == x
    assert max_pool_stride1(full((1, 2, 4, 4), 7.0), 3)[0] == full((1, 2, 4, 4), 7.0)


def test_uniform_downsample():
    assert uniform_downsample(grid_map(), 2).data[0, 0].tolist() == [[11, 13], [31, 33]]
    assert uniform_downsample(grid_map(), 1) == grid_map()
    with pytest.raises(DivisibilityError):
        uniform_downsample(zeros((1, 1, 3, 4)), 2)


@pytest.mark.parametrize("k, s", [(2, 2), (3, 2), (2, 1), (3, 3), (4, 2)])
def test_fused_max_equals_two_steps(k, s):
    x = random_map(k * 10 + s, (2, 3, 12, 12))
    fused, _ = max_pool_standard(x, k, s)
    stride1, _ = max_pool_stride1(x, k)
    assert fused == uniform_downsample(stride1, s)


def test_standard_pools():
    x = square([[1, 2], [3, 4]])
    assert max_pool_standard(x, 2, 2)[0].data.item() == 4
    assert avg_pool(x, 2, 2).data.item() == 2.5
    assert max_pool_standard(x, 1, 1)[0] == x
    assert avg_pool(x, 1, 1) == x


def test_max_pool_backward_routes_to_argmax():
    _, tape = max_pool_standard(square([[1, 2], [3, 4]]), 2, 2)
    grad = pool_backward(full((1, 1, 1, 1), 1.0), tape)
    assert grad.data[0, 0].tolist() == [[0, 0], [0, 1]]


def test_max_pool_ties_pick_first():
    _, tape = max_pool_standard(full((1, 1, 2, 2), 1.0), 2, 2)
    grad = pool_backward(full((1, 1, 1, 1), 1.0), tape)
    assert grad.data[0, 0].tolist() == [[1, 0], [0, 0]]


def test_avg_pool_backward_spreads():
    grad = avg_pool_backward(full((1, 1, 1, 1), 1.0), (1, 1, 2, 2), 2, 2)
    assert grad.data[0, 0].tolist() == [[0.25, 0.25], [0.25, 0.25]]


def test_stochastic_downsample_stride_one_is_identity():
    o = random_map(1, (2, 2, 4, 6))
    z, indices = stochastic_downsample(o, PoolGeom(k=1, s=1, g=2), RngStream(3))
    assert z == o
    assert indices[0].rows == (1, 2, 3, 4)


def test_stochastic_downsample_single_pick_is_uniform():
    n = 4000
    z, _ = stochastic_downsample(batch_of([[1, 2], [3, 4]], n), PoolGeom(k=2, s=2, g=2), RngStream(17))
    counts = Counter(z.data.ravel().tolist())
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert set(counts) == {1.0, 2.0, 3.0, 4.0}
    for count in counts.values():
        assert abs(count - n / 4) <= 3 * sigma


def test_stochastic_downsample_matches_indices():
    o = random_map(2, (3, 2, 8, 8))
    z, indices = stochastic_downsample(o, PoolGeom(k=2, s=2, g=4), RngStream(5))
    for b, picked in enumerate(indices):
        single = Tensor4(o.data[b : b + 1])
        assert Tensor4(z.data[b : b + 1]) == single.slice_rows_cols(picked.rows, picked.cols)
        assert picked.is_valid(8, 8, PoolGeom(k=2, s=2, g=4))


def test_shared_draw_serves_whole_batch():
    _, tape = s3pool_forward(
        random_map(3, (4, 1, 8, 8)), PoolGeom(k=2, s=2, g=8), RngStream(1), Mode.TRAIN, shared=True
    )
    assert len(set(tape.indices)) == 1


def test_stochastic_downsample_replays():
    o = random_map(4, (2, 2, 8, 8))
    geom = PoolGeom(k=2, s=2, g=4)
    first, _ = stochastic_downsample(o, geom, RngStream(9, 2, 5))
    second, _ = stochastic_downsample(o, geom, RngStream(9, 2, 5))
    assert first == second


def test_distinct_steps_give_distinct_draws():
    x = random_map(5, (1, 1, 16, 16))
    geom = PoolGeom(k=2, s=2, g=8)
    outputs = {s3pool_forward(x, geom, RngStream(0, 1, step), Mode.TRAIN)[0].data.tobytes() for step in range(20)}
    assert len(outputs) > 1


shape_data = [
    (PoolGeom(k=2, s=2, g=2), (2, 3, 8, 8)),
    (PoolGeom(k=3, s=2, g=4), (1, 2, 8, 16)),
    (PoolGeom(k=2, s=4, g=8), (1, 1, 16, 8)),
    (PoolGeom(k=1, s=1, g=1), (1, 1, 3, 5)),
]


@pytest.mark.parametrize("geom, dims", shape_data)
def test_shape_law(geom, dims):
    n, c, h, w = dims
    expected = (n, c, h // geom.s, w // geom.s)
    x = random_map(6, dims)
    for mode in Mode:
        for inference in Inference:
            z, _ = s3pool_forward(x, geom, RngStream(0), mode, inference)
            assert z.dims == expected
    assert max_pool_standard(x, geom.k, geom.s)[0].dims == expected
    assert avg_pool(x, geom.k, geom.s).dims == expected
    assert zeiler_stochastic_pool(Tensor4(np.abs(x.data)), geom.k, geom.s, RngStream(0), Mode.TRAIN)[0].dims == expected


def test_s3pool_constant_input():
    x = full((2, 3, 8, 8), 2.5)
    z, _ = s3pool_forward(x, PoolGeom(k=2, s=2, g=4), RngStream(7), Mode.TRAIN)
    assert z == full((2, 3, 4, 4), 2.5)
    assert np.allclose(exact_expectation_infer(x, PoolGeom(k=2, s=2, g=8)).data, 2.5)


def test_s3pool_rejects_grid_not_dividing_map():
    with pytest.raises(DivisibilityError):
        s3pool_forward(zeros((1, 1, 12, 12)), PoolGeom(k=2, s=2, g=8), RngStream(0), Mode.TRAIN)


@pytest.mark.parametrize("s", [1, 2, 4])
def test_exact_expectation_reduces_to_average(s):
    x = random_map(s, (2, 2, 8, 8))
    geom = PoolGeom(k=2, s=s, g=s)
    stride1, _ = max_pool_stride1(x, 2)
    expected = avg_pool(stride1, s, s)
    exact = exact_expectation_infer(x, geom)
    assert np.allclose(exact.data, expected.data, atol=1e-12, rtol=0)
    average, _ = s3pool_forward(x, geom, None, Mode.INFER)
    assert np.allclose(average.data, exact.data, atol=1e-12, rtol=0)


def test_exact_expectation_matches_monte_carlo():
    n = 40_000
    x = random_map(8, (1, 1, 8, 8))
    geom = PoolGeom(k=2, s=2, g=4)
    exact = exact_expectation_infer(x, geom).data[0]
    z, _ = s3pool_forward(Tensor4(np.broadcast_to(x.data, (n, 1, 8, 8))), geom, RngStream(21), Mode.TRAIN)
    mean = z.data.mean(axis=0)
    stderr = z.data.std(axis=0) / np.sqrt(n)
    assert np.all(np.abs(mean - exact) <= 4 * stderr + 1e-12)


def test_infer_modes_are_deterministic():
    x = random_map(9, (1, 2, 8, 8))
    geom = PoolGeom(k=2, s=2, g=4)
    for inference in Inference:
        first, tape = s3pool_forward(x, geom, None, Mode.INFER, inference)
        second, _ = s3pool_forward(x, geom, None, Mode.INFER, inference)
        assert tape is None
        assert first == second
    topleft, _ = s3pool_forward(x, geom, None, Mode.INFER, Inference.TOPLEFT)
    assert topleft == max_pool_standard(x, 2, 2)[0]


def test_backward_identity_layer():
    grad = random_map(10, (1, 2, 4, 4))
    x = random_map(11, (1, 2, 4, 4))
    _, tape = s3pool_forward(x, PoolGeom(k=1, s=1, g=1), RngStream(0), Mode.TRAIN)
    assert s3pool_backward(grad, tape) == grad


def test_backward_zero_gradient():
    _, tape = s3pool_forward(random_map(12, (1, 1, 8, 8)), PoolGeom(k=2, s=2, g=4), RngStream(0), Mode.TRAIN)
    assert s3pool_backward(zeros((1, 1, 4, 4)), tape) == zeros((1, 1, 8, 8))


def test_backward_needs_train_tape():
    with pytest.raises(InferenceTapeError):
        s3pool_backward(zeros((1, 1, 4, 4)), None)
    _, tape = max_pool_standard(zeros((1, 1, 2, 2)), 2, 2)
    with pytest.raises(InferenceTapeError):
        s3pool_backward(zeros((1, 1, 1, 1)), tape)


@pytest.mark.parametrize("first_stage, shared", [(FirstStage.MAX, False), (FirstStage.AVG, False), (FirstStage.MAX, True)])
def test_backward_matches_finite_differences(first_stage, shared):
    geom = PoolGeom(k=2, s=2, g=4)
    x = random_map(13, (2, 1, 8, 8))
    gz = random_map(14, (2, 1, 4, 4))

    def objective(data):
        z, _ = s3pool_forward(Tensor4(data), geom, RngStream(3, 1, 1), Mode.TRAIN, first_stage=first_stage, shared=shared)
        return float(np.vdot(z.data, gz.data))

    _, tape = s3pool_forward(x, geom, RngStream(3, 1, 1), Mode.TRAIN, first_stage=first_stage, shared=shared)
    analytic = s3pool_backward(gz, tape).data
    numeric = np.zeros_like(analytic)
    step = 1e-5
    for idx in np.ndindex(*x.dims):
        up = x.data.copy()
        down = x.data.copy()
        up[idx] += step
        down[idx] -= step
        numeric[idx] = (objective(up) - objective(down)) / (2 * step)
    error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
    assert error < 1e-4


def test_zeiler_equal_window():
    n = 4000
    z, tape = zeiler_stochastic_pool(batch_of([[2, 2], [0, 0]], n), 2, 2, RngStream(4), Mode.TRAIN)
    assert set(z.data.ravel().tolist()) == {2.0}
    left = int((tape.source == 0).sum())
    assert abs(left - n / 2) <= 3 * np.sqrt(n * 0.25)


def test_zeiler_magnitude_probabilities():
    n = 20_000
    z, tape = zeiler_stochastic_pool(batch_of([[1, 3], [0, 0]], n), 2, 2, RngStream(4), Mode.TRAIN)
    picked_three = int((z.data == 3).sum())
    sigma = np.sqrt(n * 0.75 * 0.25)
    assert abs(picked_three - 0.75 * n) <= 3 * sigma
    assert set(tape.source.ravel().tolist()) <= {0, 1}


def test_zeiler_infer_weighted_average():
    z, tape = zeiler_stochastic_pool(square([[1, 3], [0, 0]]), 2, 2, None, Mode.INFER)
    assert tape is None
    assert z.data.item() == pytest.approx(2.5)


def test_zeiler_zero_window():
    x = zeros((1, 1, 2, 2))
    z, tape = zeiler_stochastic_pool(x, 2, 2, RngStream(1), Mode.TRAIN)
    assert z.data.item() == 0
    assert int(tape.source.item()) in range(4)
    assert zeiler_stochastic_pool(x, 2, 2, None, Mode.INFER)[0].data.item() == 0


def test_zeiler_rejects_negative():
    with pytest.raises(NegativeActivations):
        zeiler_stochastic_pool(square([[1, -1], [0, 0]]), 2, 2, RngStream(0), Mode.TRAIN)
