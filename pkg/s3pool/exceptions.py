class S3PoolError(Exception):
    """Base class for every error raised by the package."""


class InvalidDims(S3PoolError):
    """Raised when tensor dimensions are not four positive integers."""

    def __init__(self, dims):
        self.dims = dims

    def __str__(self):
        return f"Tensor dims must be four integers >= 1, got {self.dims}."


class ShapeMismatch(S3PoolError):
    """Raised when two operands of one operation have different dims."""

    def __init__(self, left, right):
        self.left = left
        self.right = right

    def __str__(self):
        return f"Operand dims {self.left} and {self.right} do not match."


class IndexOutOfRange(S3PoolError):
    """Raised when a 1-based row or column index falls outside the map."""

    def __init__(self, index, size):
        self.index = index
        self.size = size

    def __str__(self):
        return f"Index {self.index} is outside [1, {self.size}]."


class InvalidAxes(S3PoolError):
    """Raised when a reduction names an axis that does not exist."""

    def __init__(self, axes):
        self.axes = axes

    def __str__(self):
        return f"Invalid reduction axes {self.axes}; expected names from n, c, h, w."


class InvalidGeometry(S3PoolError):
    """Raised when pooling hyperparameters break k >= 1, s >= 1, g >= s, s | g."""

    def __init__(self, k, s, g):
        self.k = k
        self.s = s
        self.g = g

    def __str__(self):
        return (
            f"Invalid pooling geometry k={self.k}, s={self.s}, g={self.g}: "
            "need k >= 1, s >= 1, g >= s and s dividing g."
        )


class DivisibilityError(S3PoolError):
    """Raised when a feature map side is not a multiple of the stride or grid."""

    def __init__(self, size, divisor, what="feature map"):
        self.size = size
        self.divisor = divisor
        self.what = what

    def __str__(self):
        return f"{self.divisor} does not divide the {self.what} size {self.size}."


class SampleSizeError(S3PoolError):
    """Raised when more samples are requested than the interval holds."""

    def __init__(self, m, interval):
        self.m = m
        self.interval = interval

    def __str__(self):
        a, b = self.interval
        return f"Cannot draw {self.m} distinct integers from [{a}, {b}]."


class BinomialBounds(S3PoolError):
    """Raised when a binomial coefficient is requested outside 0 <= k <= n <= 64."""

    def __init__(self, n, k):
        self.n = n
        self.k = k

    def __str__(self):
        return f"Binomial C({self.n}, {self.k}) is outside 0 <= k <= n <= 64."


class CombinatorialExplosion(S3PoolError):
    """Raised when an exhaustive enumeration would exceed the subset limit."""

    def __init__(self, count, limit):
        self.count = count
        self.limit = limit

    def __str__(self):
        return f"Refusing to enumerate {self.count} subsets (limit {self.limit})."


class InferenceTapeError(S3PoolError):
    """Raised when a backward pass is requested for an infer-mode forward."""

    def __str__(self):
        return "Backward needs a tape recorded by a train-mode forward pass."


class NegativeActivations(S3PoolError):
    """Raised when magnitude-based stochastic pooling sees negative input."""

    def __str__(self):
        return "Stochastic pooling by magnitude needs nonnegative activations."


class LabelOutOfRange(S3PoolError):
    """Raised when a class label falls outside [0, K-1]."""

    def __init__(self, label, classes):
        self.label = label
        self.classes = classes

    def __str__(self):
        return f"Label {self.label} is outside [0, {self.classes - 1}]."


class EmptyBatch(S3PoolError):
    """Raised when an operation receives a batch of zero examples."""

    def __str__(self):
        return "The batch is empty."


class NonFiniteGradient(S3PoolError):
    """Raised when the optimizer receives NaN or infinite gradients."""

    def __init__(self, name):
        self.name = name

    def __str__(self):
        return f"Gradient of parameter '{self.name}' contains non-finite values."


class ArchitectureError(S3PoolError):
    """Raised when a layer list is malformed or its dims do not chain."""

    def __init__(self, message):
        self.message = message

    def __str__(self):
        return self.message


class ConfigError(S3PoolError):
    """Raised when an experiment configuration is invalid."""

    def __init__(self, message):
        self.message = message

    def __str__(self):
        return self.message


class TruncatedRecord(S3PoolError):
    """Raised when a CIFAR-10 binary file is not a whole number of records."""

    def __init__(self, size):
        self.size = size

    def __str__(self):
        return f"truncated record: {self.size} bytes is not a multiple of 3073."


class UnsupportedImage(S3PoolError):
    """Raised when a PNM file is not binary P5/P6 with maxval 255."""

    def __init__(self, detail):
        self.detail = detail

    def __str__(self):
        return f"unsupported image: {self.detail}"


class CheckpointError(S3PoolError):
    """Raised when a checkpoint file is malformed or of an unknown version."""

    def __init__(self, detail):
        self.detail = detail

    def __str__(self):
        return f"Bad checkpoint: {self.detail}"


class WrongDirectory(S3PoolError):
    """Raised when the directory for a cache or for outputs does not exist."""

    def __str__(self):
        return "The provided directory does not exist."


class UnreadableFile(S3PoolError):
    """Raised when a dataset, image or checkpoint file cannot be opened."""

    def __init__(self, path, reason):
        self.path = path
        self.reason = reason

    def __str__(self):
        return f"Cannot access {self.path}: {self.reason}"


class InvalidMetric(S3PoolError):
    """Raised when a result record holds an impossible value."""

    def __init__(self, message):
        self.message = message

    def __str__(self):
        return self.message
