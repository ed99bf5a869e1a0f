"""Pooling operators with forward and reverse-mode backward passes.

Max pooling is computed as two steps: a stride-1 windowed max that keeps the
map size, then a downsampling step. S3Pool swaps the deterministic top-left
downsampling for a stochastic pick of sorted rows and columns inside every
grid. Magnitude-based stochastic pooling and average pooling are provided as
baselines. Border windows are truncated at the bottom and right edges, never
padded with a value that could win.
"""
from enum import Enum
from typing import Optional

import numpy as np
from attrs import field, frozen

from . import sampling
from .exceptions import (
    DivisibilityError,
    InferenceTapeError,
    InvalidGeometry,
    NegativeActivations,
)
from .sampling import PoolGeom, RngStream, SampleIndices
from .tensor import Dims, Tensor4, scatter_add_rows_cols


class Mode(str, Enum):
    TRAIN = "train"
    INFER = "infer"


class Inference(str, Enum):
    """How S3Pool replaces stochastic downsampling at test time."""

    AVERAGE = "average"
    TOPLEFT = "topleft"
    EXACT = "exact"


class FirstStage(str, Enum):
    MAX = "max"
    AVG = "avg"


@frozen
class PoolTape:
    """What a train-mode forward pass leaves behind for its backward pass.

    Attributes:
        mode: Always TRAIN; infer-mode forwards return no tape.
        input_dims: Dims of the pooled input.
        k: Window size of the windowed stage.
        s: Stride of the windowed stage (1 for S3Pool).
        source: For every output of the windowed stage, the flat position
            (y * w + x) in the input it was taken from: the first row-major
            argmax for max pooling, the drawn position for magnitude-based
            stochastic pooling. None when the first stage is average pooling.
        first_stage: Windowed stage of S3Pool.
        rows, cols: 1-based selections per example, shape (n, h/s) and
            (n, w/s), for S3Pool tapes.
    """

    mode: Mode
    input_dims: Dims
    k: int
    s: int
    source: Optional[np.ndarray] = field(default=None, eq=False)
    first_stage: FirstStage = FirstStage.MAX
    rows: Optional[np.ndarray] = field(default=None, eq=False)
    cols: Optional[np.ndarray] = field(default=None, eq=False)
    shared: bool = False

    @property
    def indices(self) -> tuple[SampleIndices, ...]:
        """Per-example SampleIndices of an S3Pool tape."""
        if self.rows is None:
            return ()
        return tuple(SampleIndices(r, c) for r, c in zip(self.rows, self.cols))


def _check_stride(h: int, w: int, s: int) -> None:
    for size in (h, w):
        if size % s:
            raise DivisibilityError(size, s)


def _padded(data: np.ndarray, k: int, value: float) -> np.ndarray:
    return np.pad(
        data, ((0, 0), (0, 0), (0, k - 1), (0, k - 1)), constant_values=value
    )


def _window_max(data: np.ndarray, k: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = data.shape
    padded = _padded(data, k, -np.inf)
    best = padded[:, :, 0:h:s, 0:w:s].copy()
    offset = np.zeros(best.shape, dtype=np.int64)
    for dy in range(k):
        for dx in range(k):
            if dy == dx == 0:
                continue
            candidate = padded[:, :, dy : dy + h : s, dx : dx + w : s]
            # strict comparison keeps the first row-major argmax
            better = candidate > best
            best = np.where(better, candidate, best)
            offset = np.where(better, dy * k + dx, offset)
    ys = np.arange(0, h, s)[:, None] + offset // k
    xs = np.arange(0, w, s)[None, :] + offset % k
    return best, ys * w + xs


def _route(grad: np.ndarray, source: np.ndarray, dims: Dims) -> np.ndarray:
    n, c, h, w = dims
    planes = np.arange(n * c, dtype=np.int64).reshape(n, c, 1, 1) * (h * w)
    flat = np.bincount(
        (planes + source).ravel(), weights=grad.ravel(), minlength=n * c * h * w
    )
    return flat.astype(grad.dtype, copy=False).reshape(dims)


def _window_sum(data: np.ndarray, k: int, s: int) -> np.ndarray:
    n, c, h, w = data.shape
    padded = _padded(data, k, 0.0)
    out = np.zeros((n, c, h // s, w // s), dtype=data.dtype)
    for dy in range(k):
        for dx in range(k):
            out += padded[:, :, dy : dy + h : s, dx : dx + w : s]
    return out


def _window_counts(h: int, w: int, k: int, s: int) -> np.ndarray:
    rows = np.minimum(np.arange(0, h, s) + k, h) - np.arange(0, h, s)
    cols = np.minimum(np.arange(0, w, s) + k, w) - np.arange(0, w, s)
    return np.outer(rows, cols).astype(np.float64)


def max_pool_stride1(x: Tensor4, k: int) -> tuple[Tensor4, PoolTape]:
    """Windowed max over [y, y+k-1] x [x, x+k-1], truncated at the map border.

    The output keeps the input's height and width.
    """
    if k < 1:
        raise InvalidGeometry(k, 1, 1)
    out, source = _window_max(x.data, k, 1)
    return Tensor4(out), PoolTape(Mode.TRAIN, x.dims, k, 1, source=source)


def max_pool_standard(x: Tensor4, k: int, s: int) -> tuple[Tensor4, PoolTape]:
    """Fused max pooling with window k and stride s (truncated border windows).

    Equal, element by element, to uniform_downsample(max_pool_stride1(x, k), s).
    """
    if k < 1 or s < 1:
        raise InvalidGeometry(k, s, s)
    _check_stride(x.dims[2], x.dims[3], s)
    out, source = _window_max(x.data, k, s)
    return Tensor4(out), PoolTape(Mode.TRAIN, x.dims, k, s, source=source)


def pool_backward(grad_out: Tensor4, tape: PoolTape) -> Tensor4:
    """Send each output gradient to the input position recorded in the tape.

    Serves max pooling (stride 1 or fused) and magnitude-based stochastic
    pooling.
    """
    if tape is None or tape.mode is not Mode.TRAIN or tape.source is None:
        raise InferenceTapeError()
    return Tensor4(_route(grad_out.data, tape.source, tape.input_dims))


def avg_pool(x: Tensor4, k: int, s: int) -> Tensor4:
    """Average over k x k windows at stride s; border windows average what they cover."""
    if k < 1 or s < 1:
        raise InvalidGeometry(k, s, s)
    n, c, h, w = x.dims
    _check_stride(h, w, s)
    counts = _window_counts(h, w, k, s).astype(x.dtype)
    return Tensor4(_window_sum(x.data, k, s) / counts)


def avg_pool_stride1(x: Tensor4, k: int) -> Tensor4:
    """Windowed mean that keeps the map size; the average first stage of S3Pool."""
    return avg_pool(x, k, 1)


def avg_pool_backward(grad_out: Tensor4, input_dims: Dims, k: int, s: int) -> Tensor4:
    n, c, h, w = input_dims
    share = grad_out.data / _window_counts(h, w, k, s).astype(grad_out.dtype)
    padded = np.zeros((n, c, h + k - 1, w + k - 1), dtype=grad_out.dtype)
    for dy in range(k):
        for dx in range(k):
            padded[:, :, dy : dy + h : s, dx : dx + w : s] += share
    return Tensor4(padded[:, :, :h, :w])


def uniform_downsample(o: Tensor4, s: int) -> Tensor4:
    """Keep the top-left element of every disjoint s x s window."""
    _check_stride(o.dims[2], o.dims[3], s)
    return Tensor4(o.data[:, :, ::s, ::s])


def _gather(data: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    picked = np.take_along_axis(data, rows[:, None, :, None] - 1, axis=2)
    return np.take_along_axis(picked, cols[:, None, None, :] - 1, axis=3)


def _draw(
    o: Tensor4, geom: PoolGeom, rng: RngStream, shared: bool
) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = o.dims
    rows, cols = sampling.draw_index_arrays(rng, 1 if shared else n, h, w, geom)
    if shared:
        rows = np.repeat(rows, n, axis=0)
        cols = np.repeat(cols, n, axis=0)
    return rows, cols


def stochastic_downsample(
    o: Tensor4, geom: PoolGeom, rng: RngStream, shared: bool = False
) -> tuple[Tensor4, tuple[SampleIndices, ...]]:
    """Keep g/s sorted random rows and columns from every grid of `o`.

    Each example gets its own draw unless `shared` is set, in which case one
    draw serves the whole batch. Example b of the output equals
    ``o[b].slice_rows_cols(indices[b].rows, indices[b].cols)``.

    Raises:
        DivisibilityError: g does not divide the map.
    """
    rows, cols = _draw(o, geom, rng, shared)
    z = Tensor4(_gather(o.data, rows, cols))
    return z, tuple(SampleIndices(r, c) for r, c in zip(rows, cols))


def _first_stage(x: Tensor4, k: int, first_stage: FirstStage):
    if first_stage is FirstStage.AVG:
        return avg_pool_stride1(x, k), None
    out, source = _window_max(x.data, k, 1)
    return Tensor4(out), source


def exact_expectation_infer(
    x: Tensor4, geom: PoolGeom, first_stage: FirstStage = FirstStage.MAX
) -> Tensor4:
    """Closed-form mean of S3Pool's train-mode output.

    Rows and columns are drawn independently, so the expectation is the
    windowed-stage output contracted with one weight matrix per axis, each row
    of which is an order-statistic distribution from `expectation_weights`.

    Raises:
        DivisibilityError: g does not divide the map.
        BinomialBounds: g above 64.
    """
    n, c, h, w = x.dims
    geom.check_map(h, w)
    o, _ = _first_stage(x, geom.k, FirstStage(first_stage))
    w_rows = sampling.expectation_matrix(h, geom, dtype=x.dtype)
    w_cols = sampling.expectation_matrix(w, geom, dtype=x.dtype)
    return Tensor4(w_rows @ o.data @ w_cols.T)


def s3pool_forward(
    x: Tensor4,
    geom: PoolGeom,
    rng: Optional[RngStream],
    mode: Mode,
    inference: Inference = Inference.AVERAGE,
    first_stage: FirstStage = FirstStage.MAX,
    shared: bool = False,
) -> tuple[Tensor4, Optional[PoolTape]]:
    """Stride-1 windowed stage followed by stochastic grid-wise downsampling.

    In infer mode the downsampling is replaced, without randomness, by s x s
    average pooling (default), top-left downsampling, or the exact
    expectation. Only train mode returns a tape.

    Args:
        x (Tensor4): Input feature maps.
        geom (PoolGeom): Window, stride and grid size.
        rng (RngStream, None): Stream for the draw; unused in infer mode.
        mode (Mode): TRAIN or INFER.
        inference (Inference): Test-time replacement of the sampling step.
        first_stage (FirstStage): Windowed max (default) or average.
        shared (bool): One draw for the whole batch instead of one per example.

    Returns:
        tuple[Tensor4, PoolTape | None]: Output of dims (n, c, h/s, w/s) and
        the tape.

    Raises:
        DivisibilityError: s or g does not divide the map.
    """
    mode, inference, first_stage = Mode(mode), Inference(inference), FirstStage(first_stage)
    n, c, h, w = x.dims
    geom.check_map(h, w)
    if mode is Mode.INFER:
        if inference is Inference.EXACT:
            return exact_expectation_infer(x, geom, first_stage), None
        o, _ = _first_stage(x, geom.k, first_stage)
        if inference is Inference.TOPLEFT:
            return uniform_downsample(o, geom.s), None
        return avg_pool(o, geom.s, geom.s), None

    o, source = _first_stage(x, geom.k, first_stage)
    rows, cols = _draw(o, geom, rng, shared)
    z = Tensor4(_gather(o.data, rows, cols))
    tape = PoolTape(
        Mode.TRAIN,
        x.dims,
        geom.k,
        1,
        source=source,
        first_stage=first_stage,
        rows=rows,
        cols=cols,
        shared=shared,
    )
    return z, tape


def s3pool_backward(grad_z: Tensor4, tape: Optional[PoolTape]) -> Tensor4:
    """Adjoint of a train-mode S3Pool pass with its draw and argmaxes frozen.

    Gradients go to the sampled (row, column) positions of the stride-1 map,
    then on to the recorded argmax of each window (or spread over the window
    for an average first stage).

    Raises:
        InferenceTapeError: No train-mode tape.
    """
    if tape is None or tape.mode is not Mode.TRAIN or tape.rows is None:
        raise InferenceTapeError()
    dims = tape.input_dims
    n, c, h, w = dims
    if tape.shared:
        grad_o = scatter_add_rows_cols(grad_z, tape.rows[0], tape.cols[0], dims).data
    else:
        grad_o = np.zeros(dims, dtype=grad_z.dtype)
        # picks are distinct within an example, so assignment is the scatter-add
        grad_o[
            np.arange(n)[:, None, None, None],
            np.arange(c)[None, :, None, None],
            tape.rows[:, None, :, None] - 1,
            tape.cols[:, None, None, :] - 1,
        ] = grad_z.data
    if tape.first_stage is FirstStage.AVG:
        return avg_pool_backward(Tensor4(grad_o), dims, tape.k, 1)
    return Tensor4(_route(grad_o, tape.source, dims))


def _zeiler_windows(data: np.ndarray, k: int, s: int):
    n, c, h, w = data.shape
    padded = _padded(data, k, 0.0)
    values = np.stack(
        [
            padded[:, :, dy : dy + h : s, dx : dx + w : s]
            for dy in range(k)
            for dx in range(k)
        ]
    )
    ys = np.arange(0, h, s)
    xs = np.arange(0, w, s)
    valid = np.stack(
        [
            np.outer(ys + dy < h, xs + dx < w)
            for dy in range(k)
            for dx in range(k)
        ]
    )
    return values, valid[:, None, None, :, :]


def zeiler_stochastic_pool(
    x: Tensor4, k: int, s: int, rng: Optional[RngStream], mode: Mode
) -> tuple[Tensor4, Optional[PoolTape]]:
    """Stochastic pooling that draws a window element with probability v / sum(window).

    Train mode samples one element per window; a window summing to zero falls
    back to a uniform pick over its valid positions. Infer mode returns the
    probability-weighted average sum(v^2) / sum(v), and 0 for zero windows.

    Raises:
        NegativeActivations: Any input value below zero.
        DivisibilityError: s does not divide the map.
    """
    mode = Mode(mode)
    n, c, h, w = x.dims
    _check_stride(h, w, s)
    if (x.data < 0).any():
        raise NegativeActivations()
    values, valid = _zeiler_windows(x.data, k, s)
    total = values.sum(axis=0)
    if mode is Mode.INFER:
        safe = np.where(total > 0, total, 1)
        return Tensor4(np.where(total > 0, (values**2).sum(axis=0) / safe, 0)), None

    uniform = np.broadcast_to(valid, values.shape).astype(x.dtype)
    weights = np.where(total > 0, values, uniform)
    cumulative = np.cumsum(weights, axis=0)
    threshold = rng.random(total.shape) * cumulative[-1]
    choice = (threshold[None] < cumulative).argmax(axis=0)
    z = np.take_along_axis(values, choice[None], axis=0)[0]
    ys = np.arange(0, h, s)[:, None] + choice // k
    xs = np.arange(0, w, s)[None, :] + choice % k
    return Tensor4(z), PoolTape(Mode.TRAIN, x.dims, k, s, source=ys * w + xs)
