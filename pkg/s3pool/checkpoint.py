"""Versioned binary container for model parameters and optimizer state.

Layout, all integers little-endian::

    magic        4 bytes  b"S3PK"
    version      u16      1
    reserved     u16      0
    config_len   u32
    config       config_len bytes, UTF-8 JSON of the training config
    step         u64      optimizer steps taken
    count        u32      number of blobs
    count times:
        name_len u16, name (UTF-8), e.g. "param/conv0.weight"
        dtype    u8       1 = float32, 2 = float64
        ndim     u8
        dims     ndim x u32
        payload  prod(dims) little-endian floats

Blob names are prefixed ``param/``, ``buffer/`` (batchnorm running statistics)
or ``accum/`` (ADADELTA accumulators) and appear in model order.
"""
import io
import logging
import math
import struct
from typing import BinaryIO

import numpy as np
from attrs import frozen

from .exceptions import CheckpointError, UnreadableFile
from .layers import ModelState

logger = logging.getLogger(__name__)

MAGIC = b"S3PK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_GROUPS = {"param": "params", "buffer": "buffers", "accum": "accumulators"}


@frozen
class Checkpoint:
    config: str
    step: int
    blobs: dict


def _read(stream: BinaryIO, size: int) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise CheckpointError("unexpected end of file")
    return data


def _unpack(stream: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read(stream, struct.calcsize(fmt)))


def save_checkpoint(state: ModelState, path: str, config: str = "{}") -> None:
    """Write parameters, running statistics and accumulators of `state` to `path`."""
    config_bytes = config.encode("utf-8")
    blobs = [
        (f"{prefix}/{name}", value)
        for prefix, attr in _GROUPS.items()
        for name, value in getattr(state, attr).items()
    ]
    try:
        stream = open(path, "wb")
    except OSError as err:
        raise UnreadableFile(path, err.strerror or err) from err
    with stream:
        stream.write(MAGIC)
        stream.write(struct.pack("<HHI", VERSION, 0, len(config_bytes)))
        stream.write(config_bytes)
        stream.write(struct.pack("<QI", state.step, len(blobs)))
        for name, value in blobs:
            encoded = name.encode("utf-8")
            array = np.asarray(value)
            code = _CODES.get(array.dtype)
            if code is None:
                raise CheckpointError(f"unsupported dtype {array.dtype} for {name}")
            stream.write(struct.pack("<H", len(encoded)))
            stream.write(encoded)
            stream.write(struct.pack("<BB", code, array.ndim))
            stream.write(struct.pack(f"<{array.ndim}I", *array.shape))
            stream.write(array.astype(_DTYPES[code], copy=False).tobytes(order="C"))
    logger.info("Saved checkpoint with %d blobs to %s", len(blobs), path)


def load_checkpoint(path: str) -> Checkpoint:
    """Parse a checkpoint file.

    Raises:
        CheckpointError: Wrong magic, unknown version or truncated content.
        UnreadableFile: The file is missing or cannot be read.
    """
    try:
        with open(path, "rb") as source:
            stream = io.BytesIO(source.read())
    except OSError as err:
        raise UnreadableFile(path, err.strerror or err) from err
    if _read(stream, 4) != MAGIC:
        raise CheckpointError("not a checkpoint file")
    version, _, config_len = _unpack(stream, "<HHI")
    if version != VERSION:
        raise CheckpointError(f"unknown version {version}")
    config = _read(stream, config_len).decode("utf-8")
    step, count = _unpack(stream, "<QI")
    blobs = {}
    for _ in range(count):
        (name_len,) = _unpack(stream, "<H")
        name = _read(stream, name_len).decode("utf-8")
        code, ndim = _unpack(stream, "<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dims = _unpack(stream, f"<{ndim}I")
        dtype = _DTYPES[code]
        payload = _read(stream, math.prod(dims) * dtype.itemsize)
        blobs[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if stream.read(1):
        raise CheckpointError("trailing bytes after the last blob")
    logger.debug("Loaded %d blobs from %s", len(blobs), path)
    return Checkpoint(config, step, blobs)


def restore(state: ModelState, checkpoint: Checkpoint) -> ModelState:
    """Copy checkpoint blobs into a freshly built `state` of the same architecture.

    Raises:
        CheckpointError: A tensor is missing, unexpected or of another shape.
    """
    expected = {
        f"{prefix}/{name}": (attr, name, value.shape)
        for prefix, attr in _GROUPS.items()
        for name, value in getattr(state, attr).items()
    }
    missing = expected.keys() - checkpoint.blobs.keys()
    extra = checkpoint.blobs.keys() - expected.keys()
    if missing or extra:
        raise CheckpointError(
            f"architecture mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})"
        )
    for key, (attr, name, shape) in expected.items():
        blob = checkpoint.blobs[key]
        if blob.shape != shape:
            raise CheckpointError(f"{key} has shape {blob.shape}, expected {shape}")
        getattr(state, attr)[name] = blob.astype(state.dtype)
    state.step = checkpoint.step
    return state
