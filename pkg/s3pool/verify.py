"""Property checks run by ``s3pool verify``.

Every check is a function ``(full, rng) -> (passed, detail)`` registered under
a name. ``fast`` runs reduced trial counts, ``full`` runs the complete counts
and the training-based checks. A check that raises counts as failed.
"""
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from itertools import product
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.stats import chisquare

from . import data, layers, pooling, sampling
from .exceptions import ConfigError
from .experiment import Experiment
from .layers import ModelOptions, PoolVariant
from .objects import CheckResult, TrainConfig
from .pooling import Inference, Mode
from .sampling import PoolGeom, RngStream
from .tensor import Tensor4, scatter_add_rows_cols

logger = logging.getLogger(__name__)

LEVELS = ("fast", "full")

Check = Callable[[bool, RngStream], tuple[bool, str]]
_CHECKS: dict[str, tuple[Check, bool]] = {}


def check(name: str, full_only: bool = False):
    """Register a check under `name`."""

    def register(func: Check) -> Check:
        _CHECKS[name] = (func, full_only)
        return func

    return register


def check_names(level: str = "fast") -> list[str]:
    return [name for name, (_, full_only) in _CHECKS.items() if level == "full" or not full_only]


def _relative_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    scale = max(np.linalg.norm(numeric) + np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(numeric - analytic) / scale)


@check("expectation_exact")
def expectation_exact(full, rng):
    for g in (2, 4, 6, 8):
        for s in (d for d in range(1, g + 1) if g % d == 0):
            geom = PoolGeom(k=1, s=s, g=g)
            oracle = sampling.subset_marginals(g, s)
            for pos in range(1, geom.per_grid + 1):
                weights = sampling.expectation_weights(geom, pos)
                if weights != oracle[pos - 1] or sum(weights) != 1:
                    return False, f"g={g} s={s} position {pos}: {weights} != {oracle[pos - 1]}"
    return True, "weights equal brute-force marginals for g in 2, 4, 6, 8"


@check("avg_reduction")
def avg_reduction(full, rng):
    count = 100 if full else 20
    worst = 0.0
    for s in (2, 4):
        geom = PoolGeom(k=2, s=s, g=s)
        x = Tensor4(rng.normal((count, 1, 8, 8)))
        exact = pooling.exact_expectation_infer(x, geom)
        o, _ = pooling.max_pool_stride1(x, geom.k)
        worst = max(worst, float(np.abs(exact.data - pooling.avg_pool(o, s, s).data).max()))
    return worst <= 1e-12, f"max deviation {worst:.3g} over {count} inputs"


@check("monte_carlo")
def monte_carlo(full, rng):
    passes = 200_000 if full else 20_000
    chunk = 10_000
    geom = PoolGeom(k=2, s=2, g=4)
    x = rng.normal((1, 1, 8, 8))
    exact = pooling.exact_expectation_infer(Tensor4(x), geom).data[0]
    total = np.zeros_like(exact)
    squares = np.zeros_like(exact)
    for start in range(0, passes, chunk):
        size = min(chunk, passes - start)
        batch = Tensor4(np.repeat(x, size, axis=0))
        z, _ = pooling.s3pool_forward(batch, geom, rng, Mode.TRAIN)
        total += z.data.sum(axis=0)
        squares += (z.data**2).sum(axis=0)
    mean = total / passes
    stderr = np.sqrt(np.maximum(squares / passes - mean**2, 0.0) / passes)
    z_scores = np.abs(mean - exact) / np.maximum(stderr, 1e-300)
    inside = np.abs(mean - exact) <= 3 * stderr + 1e-12
    return bool(inside.all()), f"{passes} passes, worst |z| {float(z_scores.max()):.2f}"


def chi_square_geometries(max_grid: int = 8) -> list[tuple[int, int]]:
    """Every (g, s) with s | g and g <= max_grid that has more than one subset per grid."""
    return [
        (g, s)
        for g in range(2, max_grid + 1)
        for s in range(2, g + 1)
        if g % s == 0
    ]


@check("chi_square")
def chi_square(full, rng):
    per_subset = 1000 if full else 100
    details = []
    for g, s in chi_square_geometries():
        subsets = math.comb(g, g // s)
        counts = sampling.subset_counts(rng, g, s, per_subset * subsets)
        _, p = chisquare(counts)
        details.append(f"g={g} s={s} p={p:.4f}")
        if p <= 0.001:
            return False, ", ".join(details)
    return True, ", ".join(details)


@check("two_step_identity")
def two_step_identity(full, rng):
    count = 1000 if full else 100
    for k in (2, 3):
        h, w = (2 * int(v) for v in rng.integers(1, 6, size=2))
        x = Tensor4(rng.normal((count, 1, h, w)))
        fused, _ = pooling.max_pool_standard(x, k, 2)
        o, _ = pooling.max_pool_stride1(x, k)
        if fused != pooling.uniform_downsample(o, 2):
            return False, f"k={k} on {h}x{w} differs"
    return True, f"{count} inputs per k"


@check("s3pool_gradient")
def s3pool_gradient(full, rng, step_size=1e-5):
    geom = PoolGeom(k=2, s=2, g=4)
    x = rng.normal((1, 1, 8, 8))
    grad_z = rng.normal((1, 1, 4, 4))
    key = int(rng.integers(0, 2**31))

    def loss(values):
        z, tape = pooling.s3pool_forward(Tensor4(values), geom, RngStream(rng.seed, 0, key), Mode.TRAIN)
        return float(np.vdot(z.data, grad_z)), tape

    _, tape = loss(x)
    analytic = pooling.s3pool_backward(Tensor4(grad_z), tape).data
    numeric = np.zeros_like(x)
    for i in range(x.size):
        bumped = x.copy()
        bumped.flat[i] += step_size
        up, _ = loss(bumped)
        bumped.flat[i] -= 2 * step_size
        down, _ = loss(bumped)
        numeric.flat[i] = (up - down) / (2 * step_size)
    error = _relative_error(numeric, analytic)
    return error < 1e-4, f"relative error {error:.2e}"


@check("conv_gradient")
def conv_gradient(full, rng, step_size=1e-5):
    x = rng.normal((1, 2, 5, 5))
    kernel = rng.normal((3, 2, 3, 3))
    bias = rng.normal(3)
    grad_y = rng.normal((1, 3, 5, 5))

    def loss(values):
        y, _ = layers.conv2d_forward(values, kernel, bias, 1)
        return float(np.vdot(y, grad_y))

    _, cache = layers.conv2d_forward(x, kernel, bias, 1)
    analytic, _, _ = layers.conv2d_backward(grad_y, cache)
    numeric = np.zeros_like(x)
    for i in range(x.size):
        bumped = x.copy()
        bumped.flat[i] += step_size
        up = loss(bumped)
        bumped.flat[i] -= 2 * step_size
        numeric.flat[i] = (up - loss(bumped)) / (2 * step_size)
    error = _relative_error(numeric, analytic)
    return error < 1e-4, f"relative error {error:.2e}"


@check("model_gradient")
def model_gradient(full, rng, step_size=1e-5):
    specs = layers.desk_nin(PoolVariant.S3POOL, (4, 4), width=4, num_classes=3)
    model = layers.build_model(specs, (3, 16, 16), rng.seed, ModelOptions(dtype="float64"))
    x = rng.normal((2, 3, 16, 16))
    labels = [0, 2]

    def loss():
        logits, caches = model.forward(x, Mode.TRAIN, step=1)
        value, grad = layers.softmax_ce(logits, labels)
        return value, grad, caches

    _, grad, caches = loss()
    grads = model.backward(caches, grad)
    picks = 3 if full else 1
    numeric, analytic = [], []
    for name, param in model.params.items():
        for i in rng.integers(0, param.size, size=picks):
            original = param.flat[i]
            param.flat[i] = original + step_size
            up = loss()[0]
            param.flat[i] = original - step_size
            down = loss()[0]
            param.flat[i] = original
            numeric.append((up - down) / (2 * step_size))
            analytic.append(grads[name].flat[i])
    error = _relative_error(np.array(numeric), np.array(analytic))
    return error < 1e-3, f"relative error {error:.2e} over {len(numeric)} coordinates"


def _random_geometry(rng: RngStream):
    s = int(rng.integers(1, 4))
    g = s * int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    h, w = (g * int(v) for v in rng.integers(1, 4, size=2))
    return PoolGeom(k=k, s=s, g=g), h, w


@check("shape_law")
def shape_law(full, rng):
    trials = 200 if full else 40
    for _ in range(trials):
        geom, h, w = _random_geometry(rng)
        x = Tensor4(rng.random((2, 2, h, w)))
        expected = (2, 2, h // geom.s, w // geom.s)
        o, _ = pooling.max_pool_stride1(x, geom.k)
        outputs = {
            "max_pool_standard": pooling.max_pool_standard(x, geom.k, geom.s)[0],
            "avg_pool": pooling.avg_pool(x, geom.k, geom.s),
            "uniform_downsample": pooling.uniform_downsample(o, geom.s),
            "stochastic_downsample": pooling.stochastic_downsample(o, geom, rng)[0],
            "s3pool_train": pooling.s3pool_forward(x, geom, rng, Mode.TRAIN)[0],
            "zeiler_train": pooling.zeiler_stochastic_pool(x, geom.k, geom.s, rng, Mode.TRAIN)[0],
            "zeiler_infer": pooling.zeiler_stochastic_pool(x, geom.k, geom.s, None, Mode.INFER)[0],
        }
        for inference in Inference:
            outputs[f"s3pool_{inference.value}"] = pooling.s3pool_forward(
                x, geom, None, Mode.INFER, inference=inference
            )[0]
        for name, out in outputs.items():
            if out.dims != expected:
                return False, f"{name} with {geom} on {h}x{w}: {out.dims} != {expected}"
        identity = PoolGeom(k=geom.k, s=1, g=geom.g)
        if pooling.stochastic_downsample(x, identity, rng)[0] != x:
            return False, f"s=1 downsampling changed the input ({geom}, {h}x{w})"
    return True, f"{trials} random geometries"


@check("finite_support")
def finite_support(full, rng):
    geom = PoolGeom(k=2, s=2, g=4)
    o, _ = pooling.max_pool_stride1(Tensor4(rng.normal((1, 1, 4, 4))), geom.k)
    subsets = sampling.enumerate_grid_subsets(geom.g, geom.s)
    support = {o.slice_rows_cols(r, c).data.tobytes() for r, c in product(subsets, subsets)}
    draws = 2000 if full else 200
    z, indices = pooling.stochastic_downsample(Tensor4(np.repeat(o.data, draws, axis=0)), geom, rng)
    for b in range(draws):
        if z.data[b : b + 1].tobytes() not in support or not indices[b].is_valid(4, 4, geom):
            return False, f"draw {b} with {indices[b]} is outside the enumerated support"
    return True, f"{draws} draws inside {len(support)} outcomes"


@check("zeiler_probabilities")
def zeiler_probabilities(full, rng):
    draws = 100_000 if full else 20_000
    window = np.array([[1.0, 3.0], [0.0, 0.0]])
    x = Tensor4(np.broadcast_to(window, (draws, 1, 2, 2)))
    z, _ = pooling.zeiler_stochastic_pool(x, 2, 2, rng, Mode.TRAIN)
    frequency = float((z.data == 3.0).mean())
    sigma = math.sqrt(0.75 * 0.25 / draws)
    zero = Tensor4(np.zeros((1, 1, 2, 2)))
    zero_infer, _ = pooling.zeiler_stochastic_pool(zero, 2, 2, None, Mode.INFER)
    passed = abs(frequency - 0.75) <= 3 * sigma and float(zero_infer.data.sum()) == 0.0
    return passed, f"P(3) = {frequency:.4f} over {draws} draws"


def _train_steps(specs, input_dims, x, labels, seed, steps, eps=1e-6):
    model = layers.build_model(specs, input_dims, seed, ModelOptions(dtype="float64"))
    losses = []
    for _ in range(steps):
        logits, caches = model.forward(x, Mode.TRAIN, step=model.step + 1)
        loss, grad = layers.softmax_ce(logits, labels)
        layers.adadelta_step(model, model.backward(caches, grad), eps=eps)
        losses.append(loss)
    return model, losses


@check("determinism")
def determinism(full, rng):
    geom = PoolGeom(k=2, s=2, g=4)
    x = Tensor4(rng.normal((2, 3, 8, 8)))
    first, _ = pooling.s3pool_forward(x, geom, RngStream(rng.seed, 3, 5), Mode.TRAIN)
    again, _ = pooling.s3pool_forward(x, geom, RngStream(rng.seed, 3, 5), Mode.TRAIN)
    if first != again:
        return False, "equal stream keys gave different outputs"
    specs = ["conv-4-3", "relu", "pool-s3pool-2-2-4", "conv-2-1", "gap"]
    data_x = rng.normal((4, 1, 8, 8))
    a, _ = _train_steps(specs, (1, 8, 8), data_x, [0, 1, 0, 1], rng.seed, 3)
    b, _ = _train_steps(specs, (1, 8, 8), data_x, [0, 1, 0, 1], rng.seed, 3)
    for name in a.params:
        if not np.array_equal(a.params[name], b.params[name]):
            return False, f"parameter {name} differs between identical runs"
    return True, "replayed pooling and training are bit-identical"


@check("tensor_adjoint")
def tensor_adjoint(full, rng):
    trials = 100 if full else 20
    worst = 0.0
    for _ in range(trials):
        a = Tensor4(rng.normal((1, 2, 6, 5)))
        rows = rng.integers(1, 7, size=int(rng.integers(1, 7)))
        cols = rng.integers(1, 6, size=int(rng.integers(1, 6)))
        b = Tensor4(rng.normal((1, 2, len(rows), len(cols))))
        left = a.slice_rows_cols(rows, cols).inner(b)
        right = a.inner(scatter_add_rows_cols(b, rows, cols, a.dims))
        worst = max(worst, abs(left - right))
    return worst <= 1e-9, f"max gap {worst:.2e}"


@check("pnm_roundtrip")
def pnm_roundtrip(full, rng):
    values = bytes(range(256))
    images = [data.ImageGray(16, 16, values), data.ImageRGB(16, 16, values * 3)]
    with tempfile.TemporaryDirectory() as tmp:
        for image in images:
            path = os.path.join(tmp, "image.pnm")
            data.write_pnm(image, path)
            if data.read_pnm(path) != image:
                return False, f"{type(image).__name__} changed in a file round trip"
            back, clamped = data.tensor_to_image(data.image_to_tensor(image))
            if back != image or clamped:
                return False, f"{type(image).__name__} changed in a tensor round trip"
    return True, "all 8-bit values survive P5 and P6"


def _two_levels(rng: RngStream, n: int, side: int = 8):
    """Bright class 0 and dark class 1 images, separable by their mean."""
    labels = np.arange(n) % 2
    levels = np.where(labels == 0, 1.0, -1.0)[:, None, None, None]
    return levels + 0.5 * rng.normal((n, 1, side, side)), labels


@check("loss_decrease", full_only=True)
def loss_decrease(full, rng):
    x, labels = _two_levels(rng, 64)
    details, passed = [], True
    for variant in PoolVariant:
        pool = f"pool-{variant.value}-2-2" + ("-4" if variant is PoolVariant.S3POOL else "")
        specs = ["conv-8-3", "bn", "relu", pool, "conv-2-1", "gap"]
        _, losses = _train_steps(specs, (1, 8, 8), x, labels, rng.seed, 50, eps=1e-4)
        details.append(f"{variant.value} {losses[0]:.3f}->{losses[-1]:.3f}")
        passed = passed and losses[-1] < 0.5 * losses[0]
    return passed, ", ".join(details)


# Grid configurations in order of increasing randomness.
DIRECTION_POOLINGS = ("max", "s3pool-2-2", "s3pool-8-8", "s3pool-16-8")
DIRECTION_SEEDS = 3
# half the default width
DIRECTION_CONFIG = dict(width=8, epochs=20, train_size=1000, test_size=100)
BENCH_BOUND = 1.25


@check("regularization_direction", full_only=True)
def regularization_direction(full, rng):
    config = TrainConfig(seed=rng.seed, **DIRECTION_CONFIG)
    seeds = [rng.seed + i for i in range(DIRECTION_SEEDS)]
    rows = Experiment(config).sweep_train_size([config.train_size], DIRECTION_POOLINGS, seeds)
    means = {
        name: float(np.mean([r.train_error for r in rows if r.pooling == name]))
        for name in DIRECTION_POOLINGS
    }
    ordered = [means[name] for name in DIRECTION_POOLINGS]
    passed = ordered[-1] > ordered[0] and all(a < b for a, b in zip(ordered[1:], ordered[2:]))
    return passed, ", ".join(f"{name} {means[name]:.2f}%" for name in DIRECTION_POOLINGS)


@check("bench_overhead", full_only=True)
def bench_overhead(full, rng):
    rows = Experiment(TrainConfig(seed=rng.seed)).bench(("max", "s3pool"), batches=4, repeats=3)
    ratio = rows[-1].ratio
    return ratio < BENCH_BOUND, f"s3pool/max {ratio:.3f} (bound {BENCH_BOUND})"


def _run_one(name: str, full: bool, seed: int, index: int) -> CheckResult:
    func, _ = _CHECKS[name]
    started = time.perf_counter()
    try:
        passed, detail = func(full, RngStream(seed, index))
    except Exception as err:
        logger.exception("Check %s raised", name)
        passed, detail = False, f"{type(err).__name__}: {err}"
    result = CheckResult(name, bool(passed), detail, time.perf_counter() - started)
    logger.info("%s %s (%s)", "PASS" if result.passed else "FAIL", name, detail)
    return result


def run_checks(
    level: str = "fast",
    seed: int = 0,
    names: Optional[Iterable[str]] = None,
    threads: int = 1,
) -> list[CheckResult]:
    """Run the registered checks for `level` and return one result per check, in registry order.

    Each check draws from its own stream ``(seed, position in the registry)``,
    so results do not depend on `threads`.
    """
    full = level == "full"
    selected = check_names(level) if names is None else list(names)
    order = list(_CHECKS)
    unknown = [name for name in selected if name not in _CHECKS]
    if unknown:
        raise ConfigError(f"Unknown checks {unknown}; choose from {order}.")
    jobs = [(name, full, seed, order.index(name)) for name in selected]
    if threads <= 1:
        return [_run_one(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(lambda job: _run_one(*job), jobs))
