"""Differentiable layers, model assembly and the ADADELTA optimizer.

Layers exchange plain numpy arrays of shape (n, c, h, w); pooling layers wrap
them in `Tensor4` to call the operators in `s3pool.pooling`. Architectures are
described with the usual architecture-table naming: ``conv-192-5`` is a
convolution with 192 filters of size 5 x 5, ``pool-2-2`` a pooling layer with
window 2 and stride 2. The pooling variant and grid size extend that naming:
``pool-s3pool-2-2-16``.
"""
import logging
import math
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from attrs import converters, define, field, frozen
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax

from . import pooling
from .exceptions import (
    ArchitectureError,
    DivisibilityError,
    EmptyBatch,
    InferenceTapeError,
    InvalidGeometry,
    LabelOutOfRange,
    NonFiniteGradient,
)
from .pooling import FirstStage, Inference, Mode
from .sampling import PoolGeom, RngStream
from .tensor import Tensor4

logger = logging.getLogger(__name__)

INIT_STREAM = 1 << 20


class LayerKind(str, Enum):
    CONV = "conv"
    RELU = "relu"
    BATCHNORM = "bn"
    POOL = "pool"
    GLOBAL_AVG_POOL = "gap"
    DROPOUT = "dropout"
    RESIDUAL = "residual"
    SOFTMAX_CE = "softmax"


class PoolVariant(str, Enum):
    MAX = "max"
    AVG = "avg"
    ZEILER = "zeiler"
    S3POOL = "s3pool"


_ALIASES = {"batchnorm": "bn", "global_avg_pool": "gap", "softmax_ce": "softmax"}


@frozen
class LayerSpec:
    """One layer of an architecture.

    Attributes:
        kind: Layer kind.
        channels: Filters of a convolution or residual block.
        size: Filter side of a convolution (odd, "same" padding).
        variant: Pooling variant.
        k, s, g: Pooling window, stride and grid size (g for s3pool only).
        rate: Dropout rate.
    """

    kind: LayerKind = field(converter=LayerKind)
    channels: int = 0
    size: int = 1
    variant: Optional[PoolVariant] = field(
        default=None, converter=converters.optional(PoolVariant)
    )
    k: int = 2
    s: int = 2
    g: Optional[int] = None
    rate: float = 0.0

    def __attrs_post_init__(self):
        if self.kind in (LayerKind.CONV, LayerKind.RESIDUAL):
            if self.channels < 1 or self.size < 1 or self.size % 2 == 0:
                raise ArchitectureError(
                    f"{self}: need at least one filter of odd size."
                )
        elif self.kind is LayerKind.POOL:
            if self.variant is None:
                raise ArchitectureError("Pooling layer without a variant.")
            if self.variant is PoolVariant.S3POOL and self.g is None:
                raise ArchitectureError(f"{self}: s3pool needs a grid size.")
            self.geom
        elif self.kind is LayerKind.DROPOUT and not 0.0 <= self.rate < 1.0:
            raise ArchitectureError(f"Dropout rate {self.rate} is outside [0, 1).")

    @property
    def geom(self) -> PoolGeom:
        return PoolGeom(k=self.k, s=self.s, g=self.g if self.g is not None else self.s)

    @classmethod
    def parse(cls, text: str) -> "LayerSpec":
        """Build a spec from its short name, e.g. ``conv-32-5`` or ``pool-s3pool-2-2-16``.

        Raises:
            ArchitectureError: The name cannot be parsed.
        """
        parts = text.strip().lower().split("-")
        head = _ALIASES.get(parts[0], parts[0])
        try:
            kind = LayerKind(head)
            if kind is LayerKind.CONV:
                channels, size = (int(p) for p in parts[1:])
                return cls(kind, channels=channels, size=size)
            if kind is LayerKind.RESIDUAL:
                return cls(kind, channels=int(parts[1]), size=3)
            if kind is LayerKind.DROPOUT:
                return cls(kind, rate=float(parts[1]))
            if kind is LayerKind.POOL:
                if parts[1].isdigit():
                    parts.insert(1, PoolVariant.MAX.value)
                variant = PoolVariant(parts[1])
                numbers = [int(p) for p in parts[2:]]
                k, s = numbers[:2]
                g = numbers[2] if len(numbers) > 2 else None
                if len(numbers) > 3:
                    raise ValueError(text)
                return cls(kind, variant=variant, k=k, s=s, g=g)
            if len(parts) > 1:
                raise ValueError(text)
            return cls(kind)
        except (ValueError, IndexError, InvalidGeometry) as err:
            raise ArchitectureError(f"Cannot parse layer '{text}': {err}") from err

    def __str__(self):
        if self.kind is LayerKind.CONV:
            return f"conv-{self.channels}-{self.size}"
        if self.kind is LayerKind.RESIDUAL:
            return f"residual-{self.channels}"
        if self.kind is LayerKind.DROPOUT:
            return f"dropout-{self.rate:g}"
        if self.kind is LayerKind.POOL:
            grid = f"-{self.g}" if self.g is not None else ""
            return f"pool-{self.variant.value}-{self.k}-{self.s}{grid}"
        return self.kind.value


@frozen
class ModelOptions:
    """Model-wide choices that are not part of the layer list."""

    inference: Inference = field(default=Inference.AVERAGE, converter=Inference)
    first_stage: FirstStage = field(default=FirstStage.MAX, converter=FirstStage)
    shared: bool = False
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    dtype: str = "float64"


@frozen
class Pass:
    """Mode and randomness address of one forward pass."""

    mode: Mode = field(converter=Mode)
    step: int = 0
    seed: int = 0
    ensemble: bool = False

    @property
    def stochastic(self) -> bool:
        return self.mode is Mode.TRAIN or self.ensemble

    @property
    def batch_stats(self) -> bool:
        return self.mode is Mode.TRAIN and not self.ensemble

    def rng(self, layer_id: int) -> RngStream:
        return RngStream(self.seed, layer_id, self.step)


# Functional kernels


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray, pad: int):
    """Cross-correlation of (n, c, h, w) input with (c_out, c, d, d) kernels.

    Returns:
        tuple: Output of shape (n, c_out, h + 2 pad - d + 1, ...) and the cache
        for `conv2d_backward`.

    Raises:
        ArchitectureError: Channel count or kernel size does not fit the input.
    """
    n, c, h, w = x.shape
    c_out, c_in, d, _ = kernel.shape
    if c_in != c or d > h + 2 * pad or d > w + 2 * pad:
        raise ArchitectureError(
            f"Kernel {kernel.shape} does not fit input {x.shape} with padding {pad}."
        )
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (d, d), axis=(2, 3))
    ho, wo = windows.shape[2:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * d * d)
    out = cols @ kernel.reshape(c_out, -1).T + bias
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, kernel, pad)


def conv2d_backward(grad: np.ndarray, cache):
    """Gradients of `conv2d_forward` with respect to input, kernel and bias."""
    (n, c, h, w), cols, kernel, pad = cache
    c_out, _, d, _ = kernel.shape
    ho, wo = grad.shape[2:]
    flat = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dkernel = (flat.T @ cols).reshape(kernel.shape)
    dbias = flat.sum(axis=0)
    dcols = (flat @ kernel.reshape(c_out, -1)).reshape(n, ho, wo, c, d, d)
    dpadded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
    for dy in range(d):
        for dx in range(d):
            dpadded[:, :, dy : dy + ho, dx : dx + wo] += dcols[..., dy, dx].transpose(0, 3, 1, 2)
    return dpadded[:, :, pad : pad + h, pad : pad + w], dkernel, dbias


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad * mask


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    batch_stats: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
):
    """Per-channel normalization.

    With `batch_stats` the batch mean and (biased) variance are used and the
    updated running statistics are returned; otherwise the running statistics
    are used and None is returned in their place.

    Returns:
        tuple: (output, cache, (new_mean, new_var) or None)
    """
    axes = (0, 2, 3)
    if batch_stats:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running = (
            momentum * running_mean + (1 - momentum) * mean,
            momentum * running_var + (1 - momentum) * var,
        )
    else:
        mean, var, running = running_mean, running_var, None
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv, gamma, batch_stats), running


def batchnorm_backward(grad: np.ndarray, cache):
    xhat, inv, gamma, batch_stats = cache
    axes = (0, 2, 3)
    dgamma = (grad * xhat).sum(axis=axes)
    dbeta = grad.sum(axis=axes)
    dxhat = grad * gamma[None, :, None, None]
    if not batch_stats:
        return dxhat * inv[None, :, None, None], dgamma, dbeta
    m = grad.shape[0] * grad.shape[2] * grad.shape[3]
    dx = (
        m * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    ) * (inv[None, :, None, None] / m)
    return dx, dgamma, dbeta


def global_avg_pool_forward(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad: np.ndarray, dims) -> np.ndarray:
    n, c, h, w = dims
    return np.broadcast_to(grad / (h * w), dims).copy()


def softmax_ce(logits: np.ndarray, labels: Sequence[int]) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.

    Raises:
        EmptyBatch: No rows.
        LabelOutOfRange: A label outside [0, K-1].
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise EmptyBatch()
    n, classes = logits.shape
    bad = (labels < 0) | (labels >= classes)
    if bad.any():
        raise LabelOutOfRange(int(labels[bad][0]), classes)
    log_probs = log_softmax(logits, axis=1)
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = softmax(logits, axis=1)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


# Layers


class Layer:
    """A layer bound to its position in the model and its input dims (c, h, w)."""

    def __init__(self, spec: LayerSpec, index: int, in_dims: tuple[int, int, int], prefix: str = ""):
        self.spec = spec
        self.index = index
        self.in_dims = in_dims
        self.name = f"{prefix}{spec.kind.value}{index}"
        self.out_dims = self.output_dims()

    def output_dims(self) -> tuple[int, int, int]:
        return self.in_dims

    def init_params(self, rng: RngStream, dtype) -> dict[str, np.ndarray]:
        return {}

    def init_buffers(self, dtype) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, state: "ModelState", ctx: Pass):
        raise NotImplementedError

    def backward(self, grad: np.ndarray, cache, state: "ModelState"):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name}: {self.spec}, {self.in_dims} -> {self.out_dims})"


class Conv(Layer):
    def output_dims(self):
        c, h, w = self.in_dims
        return self.spec.channels, h, w

    def init_params(self, rng, dtype):
        c, _, _ = self.in_dims
        d = self.spec.size
        fan_in = c * d * d
        limit = math.sqrt(6.0 / fan_in)
        kernel = rng.uniform(-limit, limit, (self.spec.channels, c, d, d))
        return {
            f"{self.name}.weight": kernel.astype(dtype),
            f"{self.name}.bias": np.zeros(self.spec.channels, dtype=dtype),
        }

    def forward(self, x, state, ctx):
        return conv2d_forward(
            x,
            state.params[f"{self.name}.weight"],
            state.params[f"{self.name}.bias"],
            self.spec.size // 2,
        )

    def backward(self, grad, cache, state):
        dx, dkernel, dbias = conv2d_backward(grad, cache)
        return dx, {f"{self.name}.weight": dkernel, f"{self.name}.bias": dbias}


class ReLU(Layer):
    def forward(self, x, state, ctx):
        return relu_forward(x)

    def backward(self, grad, cache, state):
        return relu_backward(grad, cache), {}


class BatchNorm(Layer):
    def init_params(self, rng, dtype):
        c = self.in_dims[0]
        return {
            f"{self.name}.gamma": np.ones(c, dtype=dtype),
            f"{self.name}.beta": np.zeros(c, dtype=dtype),
        }

    def init_buffers(self, dtype):
        c = self.in_dims[0]
        return {
            f"{self.name}.running_mean": np.zeros(c, dtype=dtype),
            f"{self.name}.running_var": np.ones(c, dtype=dtype),
        }

    def forward(self, x, state, ctx):
        out, cache, running = batchnorm_forward(
            x,
            state.params[f"{self.name}.gamma"],
            state.params[f"{self.name}.beta"],
            state.buffers[f"{self.name}.running_mean"],
            state.buffers[f"{self.name}.running_var"],
            ctx.batch_stats,
            state.options.bn_momentum,
            state.options.bn_eps,
        )
        if running is not None:
            mean, var = running
            state.buffers[f"{self.name}.running_mean"] = mean.astype(x.dtype)
            state.buffers[f"{self.name}.running_var"] = var.astype(x.dtype)
        return out, cache

    def backward(self, grad, cache, state):
        dx, dgamma, dbeta = batchnorm_backward(grad, cache)
        return dx, {f"{self.name}.gamma": dgamma, f"{self.name}.beta": dbeta}


class GlobalAvgPool(Layer):
    def output_dims(self):
        return self.in_dims[0], 1, 1

    def forward(self, x, state, ctx):
        return global_avg_pool_forward(x), x.shape

    def backward(self, grad, cache, state):
        return global_avg_pool_backward(grad, cache), {}


class Dropout(Layer):
    def forward(self, x, state, ctx):
        rate = self.spec.rate
        if ctx.mode is not Mode.TRAIN or ctx.ensemble or rate == 0:
            return x, None
        keep = ctx.rng(self.index).random(x.shape) >= rate
        mask = keep.astype(x.dtype) / (1.0 - rate)
        return x * mask, mask

    def backward(self, grad, cache, state):
        return (grad if cache is None else grad * cache), {}


class Pool(Layer):
    def output_dims(self):
        c, h, w = self.in_dims
        geom = self.spec.geom
        try:
            geom.check_map(h, w, stochastic=self.spec.variant is PoolVariant.S3POOL)
        except DivisibilityError as err:
            raise ArchitectureError(f"{self.spec} on a {h}x{w} map: {err}") from err
        return c, h // geom.s, w // geom.s

    def forward(self, x, state, ctx):
        spec = self.spec
        t = Tensor4(x)
        variant = spec.variant
        if variant is PoolVariant.MAX:
            z, tape = pooling.max_pool_standard(t, spec.k, spec.s)
        elif variant is PoolVariant.AVG:
            z, tape = pooling.avg_pool(t, spec.k, spec.s), None
        elif variant is PoolVariant.ZEILER:
            mode = Mode.TRAIN if ctx.stochastic else Mode.INFER
            rng = ctx.rng(self.index) if ctx.stochastic else None
            z, tape = pooling.zeiler_stochastic_pool(t, spec.k, spec.s, rng, mode)
        else:
            mode = Mode.TRAIN if ctx.stochastic else Mode.INFER
            z, tape = pooling.s3pool_forward(
                t,
                spec.geom,
                ctx.rng(self.index) if ctx.stochastic else None,
                mode,
                inference=state.options.inference,
                first_stage=state.options.first_stage,
                shared=state.options.shared,
            )
        return np.array(z.data), (tape, x.shape)

    def backward(self, grad, cache, state):
        tape, dims = cache
        g = Tensor4(grad)
        variant = self.spec.variant
        if variant is PoolVariant.AVG:
            return pooling.avg_pool_backward(g, dims, self.spec.k, self.spec.s).data, {}
        if tape is None:
            raise InferenceTapeError()
        if variant is PoolVariant.S3POOL:
            return pooling.s3pool_backward(g, tape).data, {}
        return pooling.pool_backward(g, tape).data, {}


class Residual(Layer):
    """conv-bn-relu-conv-bn plus identity shortcut, then relu."""

    def __init__(self, spec, index, in_dims, prefix=""):
        if in_dims[0] != spec.channels:
            raise ArchitectureError(
                f"{spec} needs {spec.channels} input channels, got {in_dims[0]}."
            )
        super().__init__(spec, index, in_dims, prefix)
        conv = LayerSpec(LayerKind.CONV, channels=spec.channels, size=spec.size)
        sub = f"{self.name}."
        self.branch = [
            Conv(conv, 1, in_dims, sub),
            BatchNorm(LayerSpec(LayerKind.BATCHNORM), 2, in_dims, sub),
            ReLU(LayerSpec(LayerKind.RELU), 3, in_dims, sub),
            Conv(conv, 4, in_dims, sub),
            BatchNorm(LayerSpec(LayerKind.BATCHNORM), 5, in_dims, sub),
        ]

    def init_params(self, rng, dtype):
        params = {}
        for layer in self.branch:
            params.update(layer.init_params(rng, dtype))
        return params

    def init_buffers(self, dtype):
        buffers = {}
        for layer in self.branch:
            buffers.update(layer.init_buffers(dtype))
        return buffers

    def forward(self, x, state, ctx):
        out, caches = x, []
        for layer in self.branch:
            out, cache = layer.forward(out, state, ctx)
            caches.append(cache)
        out, mask = relu_forward(out + x)
        return out, (caches, mask)

    def backward(self, grad, cache, state):
        caches, mask = cache
        grad = relu_backward(grad, mask)
        shortcut, grads = grad, {}
        for layer, sub_cache in zip(reversed(self.branch), reversed(caches)):
            grad, sub_grads = layer.backward(grad, sub_cache, state)
            grads.update(sub_grads)
        return grad + shortcut, grads


_LAYERS = {
    LayerKind.CONV: Conv,
    LayerKind.RELU: ReLU,
    LayerKind.BATCHNORM: BatchNorm,
    LayerKind.POOL: Pool,
    LayerKind.GLOBAL_AVG_POOL: GlobalAvgPool,
    LayerKind.DROPOUT: Dropout,
    LayerKind.RESIDUAL: Residual,
}


# Model


@define
class ModelState:
    """Layers, parameters, batchnorm running statistics and optimizer accumulators.

    Parameter, buffer and accumulator dictionaries are keyed by
    ``<layer name>.<tensor name>`` and keep insertion order, which fixes the
    checkpoint layout and the order of every reduction over parameters.
    """

    specs: tuple[LayerSpec, ...]
    input_dims: tuple[int, int, int]
    layers: list[Layer]
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    accumulators: dict[str, np.ndarray]
    options: ModelOptions = ModelOptions()
    seed: int = 0
    step: int = 0

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dims[0]

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.options.dtype)

    def forward(
        self,
        x: Union[Tensor4, np.ndarray],
        mode: Mode,
        step: Optional[int] = None,
        ensemble: bool = False,
    ) -> tuple[np.ndarray, list]:
        """Run all layers; returns logits of shape (n, K) and one cache per layer.

        Pooling layers draw from the stream ``(seed, layer index, step)``;
        `step` defaults to the optimizer step counter. With `ensemble`, pooling
        samples as in training while batchnorm and dropout act as in inference.

        Raises:
            ArchitectureError: Input dims differ from the model's.
        """
        data = x.data if isinstance(x, Tensor4) else np.asarray(x)
        if data.ndim != 4 or data.shape[0] == 0:
            raise EmptyBatch()
        if tuple(data.shape[1:]) != self.input_dims:
            raise ArchitectureError(
                f"Input dims {tuple(data.shape[1:])} differ from the model's {self.input_dims}."
            )
        data = data.astype(self.dtype, copy=False)
        ctx = Pass(mode, self.step if step is None else step, self.seed, ensemble)
        caches = []
        for layer in self.layers:
            data, cache = layer.forward(data, self, ctx)
            caches.append(cache)
        return data.reshape(data.shape[0], -1), caches

    def backward(self, caches: list, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every parameter given d(loss)/d(logits)."""
        grad = np.asarray(loss_grad, dtype=self.dtype)
        grad = grad.reshape(grad.shape[0], -1, 1, 1)
        grads = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad, layer_grads = layer.backward(grad, cache, self)
            grads.update(layer_grads)
        return {name: grads[name] for name in self.params}

    def predict(self, x: Union[Tensor4, np.ndarray]) -> np.ndarray:
        logits, _ = self.forward(x, Mode.INFER)
        return logits.argmax(axis=1)


def build_model(
    arch: Sequence[Union[str, LayerSpec]],
    input_dims: tuple[int, int, int],
    seed: int = 0,
    options: ModelOptions = ModelOptions(),
) -> ModelState:
    """Instantiate layers, check that their dims chain, and initialize parameters.

    Kernels get a fan-in scaled uniform initialization, U(-sqrt(6/fan_in),
    sqrt(6/fan_in)), drawn from a stream keyed by the seed and layer index.
    A trailing ``softmax`` entry marks the loss and adds no layer.

    Raises:
        ArchitectureError: Unparseable layer, dims that do not chain, or a
            network that does not end in a 1 x 1 map.
    """
    specs = tuple(s if isinstance(s, LayerSpec) else LayerSpec.parse(s) for s in arch)
    if specs and specs[-1].kind is LayerKind.SOFTMAX_CE:
        specs = specs[:-1]
    if not specs or any(s.kind is LayerKind.SOFTMAX_CE for s in specs):
        raise ArchitectureError("softmax may only close the architecture.")
    dtype = np.dtype(options.dtype)
    layers, params, buffers = [], {}, {}
    dims = tuple(input_dims)
    for index, spec in enumerate(specs):
        layer = _LAYERS[spec.kind](spec, index, dims)
        params.update(layer.init_params(RngStream(seed, INIT_STREAM + index), dtype))
        buffers.update(layer.init_buffers(dtype))
        layers.append(layer)
        dims = layer.out_dims
    if dims[1:] != (1, 1):
        raise ArchitectureError(
            f"The network ends with a {dims[1]}x{dims[2]} map; add global average pooling."
        )
    accumulators = {}
    for name, value in params.items():
        accumulators[f"{name}.square_avg"] = np.zeros_like(value)
        accumulators[f"{name}.acc_delta"] = np.zeros_like(value)
    logger.debug("Built model: %s", " ".join(str(s) for s in specs))
    return ModelState(specs, tuple(input_dims), layers, params, buffers, accumulators, options, seed)


def forward(model: ModelState, x, mode: Mode, step: Optional[int] = None):
    return model.forward(x, mode, step)


def backward(model: ModelState, caches: list, loss_grad: np.ndarray) -> dict[str, np.ndarray]:
    return model.backward(caches, loss_grad)


def adadelta_step(
    state: ModelState,
    grads: dict[str, np.ndarray],
    rho: float = 0.95,
    eps: float = 1e-6,
    lr: float = 1.0,
) -> ModelState:
    """One ADADELTA update of every parameter, in place.

    E[g^2] <- rho E[g^2] + (1 - rho) g^2
    dx = sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
    x <- x - lr * dx
    E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2

    Raises:
        NonFiniteGradient: A gradient holds NaN or infinity.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(name)
    for name, grad in grads.items():
        square_avg = state.accumulators[f"{name}.square_avg"]
        acc_delta = state.accumulators[f"{name}.acc_delta"]
        square_avg = rho * square_avg + (1 - rho) * grad * grad
        delta = np.sqrt(acc_delta + eps) / np.sqrt(square_avg + eps) * grad
        state.params[name] = (state.params[name] - lr * delta).astype(state.dtype)
        state.accumulators[f"{name}.square_avg"] = square_avg.astype(state.dtype)
        state.accumulators[f"{name}.acc_delta"] = (
            rho * acc_delta + (1 - rho) * delta * delta
        ).astype(state.dtype)
    state.step += 1
    return state


def predict_ensemble(
    model: ModelState, x: Union[Tensor4, np.ndarray], samples: int, first_step: int = 1
) -> np.ndarray:
    """Average class probabilities over `samples` stochastic pooling draws.

    Batchnorm uses its running statistics and dropout is off, so only the
    pooling layers vary between draws.
    """
    total = None
    for step in range(first_step, first_step + samples):
        logits, _ = model.forward(x, Mode.INFER, step=step, ensemble=True)
        probs = softmax(logits, axis=1)
        total = probs if total is None else total + probs
    return total / samples


def desk_nin(
    pooling_variant: Union[str, PoolVariant] = PoolVariant.MAX,
    grids: Sequence[Optional[int]] = (None, None),
    width: int = 16,
    num_classes: int = 10,
    dropout: float = 0.0,
) -> list[LayerSpec]:
    """Desk-scale analog of the NIN column: three conv stages and two Pool-2-2 layers."""
    variant = PoolVariant(pooling_variant)
    stage_grids = list(grids) + [None] * (2 - len(grids))

    def block(channels, size):
        return [
            LayerSpec(LayerKind.CONV, channels=channels, size=size),
            LayerSpec(LayerKind.BATCHNORM),
            LayerSpec(LayerKind.RELU),
        ]

    def pool(g):
        spec = [LayerSpec(LayerKind.POOL, variant=variant, k=2, s=2, g=g if variant is PoolVariant.S3POOL else None)]
        if dropout:
            spec.append(LayerSpec(LayerKind.DROPOUT, rate=dropout))
        return spec

    return (
        block(width, 5) + block(width, 1) + block(width, 1)
        + pool(stage_grids[0])
        + block(width, 5) + block(width, 1) + block(width, 1)
        + pool(stage_grids[1])
        + block(width, 3) + block(width, 1)
        + [LayerSpec(LayerKind.CONV, channels=num_classes, size=1), LayerSpec(LayerKind.GLOBAL_AVG_POOL)]
    )


def desk_resnet(
    pooling_variant: Union[str, PoolVariant] = PoolVariant.MAX,
    grids: Sequence[Optional[int]] = (None, None),
    width: int = 16,
    num_classes: int = 10,
    dropout: float = 0.0,
) -> list[LayerSpec]:
    """Desk-scale residual analog: a residual block per stage, pooling between stages."""
    variant = PoolVariant(pooling_variant)
    stage_grids = list(grids) + [None] * (2 - len(grids))
    specs = [
        LayerSpec(LayerKind.CONV, channels=width, size=3),
        LayerSpec(LayerKind.BATCHNORM),
        LayerSpec(LayerKind.RELU),
        LayerSpec(LayerKind.RESIDUAL, channels=width, size=3),
    ]
    for g in stage_grids[:2]:
        specs.append(
            LayerSpec(LayerKind.POOL, variant=variant, k=2, s=2, g=g if variant is PoolVariant.S3POOL else None)
        )
        if dropout:
            specs.append(LayerSpec(LayerKind.DROPOUT, rate=dropout))
        specs.append(LayerSpec(LayerKind.RESIDUAL, channels=width, size=3))
    specs += [
        LayerSpec(LayerKind.CONV, channels=num_classes, size=1),
        LayerSpec(LayerKind.GLOBAL_AVG_POOL),
    ]
    return specs


ARCHITECTURES = {"nin": desk_nin, "resnet": desk_resnet}
