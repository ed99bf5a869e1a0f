__title__ = "s3pool"
__author__ = "Brozen"
__doc__ = "Stochastic spatial sampling pooling with baselines and a desk-scale CNN harness"
__version__ = "0.1.0"

from .experiment import Experiment, demo_downsample
from .layers import LayerSpec, ModelOptions, build_model
from .pooling import Inference, Mode, s3pool_backward, s3pool_forward
from .sampling import PoolGeom, RngStream
from .tensor import Tensor4

__all__ = [
    "Experiment",
    "demo_downsample",
    "LayerSpec",
    "ModelOptions",
    "build_model",
    "Inference",
    "Mode",
    "s3pool_forward",
    "s3pool_backward",
    "PoolGeom",
    "RngStream",
    "Tensor4",
]
