"""Datasets and image codecs.

CIFAR-10 comes in its binary layout (one label byte followed by 1024 red,
1024 green and 1024 blue bytes per record). Images for the downsampling demo
are binary netpbm files: PGM (P5) or PPM (P6) with maxval 255.
"""
import io
import logging
import os
import tarfile
from typing import ClassVar, Optional, Union

import numpy as np
from attrs import field, frozen

from .exceptions import ConfigError, LabelOutOfRange, TruncatedRecord, UnreadableFile, UnsupportedImage
from .sampling import RngStream
from .tensor import Tensor4
from .utils import Cache

logger = logging.getLogger(__name__)

CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR10_DIR = "cifar-10-batches-bin"
CIFAR10_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST = "test_batch.bin"
RECORD_SIZE = 3073
SIDE = 32


def _labels(values) -> tuple[int, ...]:
    return tuple(int(v) for v in values)


@frozen
class LabeledBatch:
    """Images of shape (n, 3, h, w) with values in [0, 1] and their class labels."""

    images: Tensor4
    labels: tuple[int, ...] = field(converter=_labels)
    classes: int = 10

    def __attrs_post_init__(self):
        if len(self.labels) != self.images.dims[0]:
            raise ConfigError(
                f"{len(self.labels)} labels for {self.images.dims[0]} images."
            )
        for label in self.labels:
            if not 0 <= label < self.classes:
                raise LabelOutOfRange(label, self.classes)

    def __len__(self):
        return len(self.labels)

    def head(self, n: int) -> "LabeledBatch":
        return LabeledBatch(Tensor4(self.images.data[:n]), self.labels[:n], self.classes)


def read_cifar10_binary(path: str, max_records: Optional[int] = None) -> LabeledBatch:
    """Read a CIFAR-10 ``.bin`` batch.

    Args:
        path (str): Batch file.
        max_records (int, optional): Read at most this many records.

    Raises:
        TruncatedRecord: File size is not a positive multiple of 3073.
        LabelOutOfRange: A label byte above 9.
        UnreadableFile: The file is missing or cannot be read.
    """
    try:
        size = os.path.getsize(path)
        if size == 0 or size % RECORD_SIZE:
            raise TruncatedRecord(size)
        count = size // RECORD_SIZE
        if max_records is not None:
            count = min(count, max_records)
        raw = np.fromfile(path, dtype=np.uint8, count=count * RECORD_SIZE)
    except OSError as err:
        raise UnreadableFile(path, err.strerror or err) from err
    raw = raw.reshape(count, RECORD_SIZE)
    labels = raw[:, 0]
    if (labels > 9).any():
        raise LabelOutOfRange(int(labels[labels > 9][0]), 10)
    images = raw[:, 1:].reshape(count, 3, SIDE, SIDE).astype(np.float64) / 255.0
    return LabeledBatch(Tensor4(images), labels)


def fetch_cifar10(cache_dir: str) -> str:
    """Download and unpack the CIFAR-10 binary archive into `cache_dir`.

    The archive itself is served from the requests cache after the first
    download. Batches already unpacked are left alone.

    Returns:
        str: Directory holding the ``.bin`` batches.

    Raises:
        WrongDirectory: `cache_dir` does not exist.
    """
    target = os.path.join(cache_dir, CIFAR10_DIR)
    wanted = CIFAR10_TRAIN + (CIFAR10_TEST,)
    if all(os.path.exists(os.path.join(target, name)) for name in wanted):
        return target
    Cache.cache_enable(cache_dir)
    logger.info("Fetching %s", CIFAR10_URL)
    response = Cache.cache_get(CIFAR10_URL)
    os.makedirs(target, exist_ok=True)
    with tarfile.open(fileobj=io.BytesIO(response.content), mode="r:gz") as archive:
        for member in archive.getmembers():
            name = os.path.basename(member.name)
            if member.isfile() and name.endswith(".bin"):
                with open(os.path.join(target, name), "wb") as out:
                    out.write(archive.extractfile(member).read())
    return target


def load_cifar10(data_dir: str, train_size: int, test_size: int) -> tuple[LabeledBatch, LabeledBatch]:
    """Read the first `train_size` training and `test_size` test records from `data_dir`."""
    parts, remaining = [], train_size
    for name in CIFAR10_TRAIN:
        if remaining <= 0:
            break
        batch = read_cifar10_binary(os.path.join(data_dir, name), remaining)
        parts.append(batch)
        remaining -= len(batch)
    train = LabeledBatch(
        Tensor4(np.concatenate([b.images.data for b in parts])),
        [label for b in parts for label in b.labels],
    )
    test = read_cifar10_binary(os.path.join(data_dir, CIFAR10_TEST), test_size)
    return train, test


# 7 x 7 glyphs, one per class
_GLYPHS = np.zeros((10, 7, 7), dtype=np.float64)
_GLYPHS[0, 3, :] = 1
_GLYPHS[1, :, 3] = 1
_GLYPHS[2, 3, :] = _GLYPHS[2, :, 3] = 1
_GLYPHS[3] = np.eye(7) + np.fliplr(np.eye(7)) > 0
_GLYPHS[4, 1:6, 1:6] = 1
_GLYPHS[5, [0, 6], :] = _GLYPHS[5, :, [0, 6]] = 1
_GLYPHS[6, :, 0] = _GLYPHS[6, 6, :] = 1
_GLYPHS[7, 0, :] = _GLYPHS[7, :, 3] = 1
_GLYPHS[8] = np.eye(7)
_GLYPHS[9, [1, 5], :] = 1


def synth_translated_shapes(
    rng: RngStream, n: int, classes: int = 10, side: int = SIDE, scale: int = 2
) -> LabeledBatch:
    """Render `n` class-balanced shapes (bars, crosses, squares, ...) at random translations.

    Each image holds one glyph, magnified `scale` times, on a faintly noisy
    black background. Glyph colors vary in hue but share a channel sum of 2.
    Labels cycle through the classes before being shuffled, so every class
    appears n // classes or n // classes + 1 times.

    Raises:
        ConfigError: More than ten classes, or fewer examples than classes.
    """
    if not 1 <= classes <= len(_GLYPHS):
        raise ConfigError(f"Synthetic shapes support 1 to {len(_GLYPHS)} classes, got {classes}.")
    if n < classes:
        raise ConfigError(f"Need at least one example per class: n={n}, classes={classes}.")
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    glyph_side = 7 * scale
    offsets = rng.integers(0, side - glyph_side + 1, size=(n, 2))
    colors = rng.uniform(0.5, 1.0, size=(n, 3))
    colors = 2.0 * colors / colors.sum(axis=1, keepdims=True)
    images = rng.uniform(0.0, 0.1, size=(n, 3, side, side))
    for i, (label, (y, x)) in enumerate(zip(labels, offsets)):
        glyph = np.kron(_GLYPHS[label], np.ones((scale, scale)))
        window = images[i, :, y : y + glyph_side, x : x + glyph_side]
        images[i, :, y : y + glyph_side, x : x + glyph_side] = np.where(
            glyph > 0, colors[i][:, None, None], window
        )
    return LabeledBatch(Tensor4(images), labels, classes)


def channel_stats(images: Tensor4) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over a dataset."""
    data = images.data
    return data.mean(axis=(0, 2, 3)), data.std(axis=(0, 2, 3))


def normalize(images: Tensor4, mean: np.ndarray, std: np.ndarray) -> Tensor4:
    std = np.where(std > 0, std, 1.0)
    return Tensor4((images.data - mean[None, :, None, None]) / std[None, :, None, None])


# Netpbm


def _samples(value) -> bytes:
    return bytes(value)


@frozen
class _Image:
    height: int
    width: int
    samples: bytes = field(converter=_samples)
    channels: ClassVar[int] = 1
    magic: ClassVar[bytes] = b"P5"

    def __attrs_post_init__(self):
        if self.height < 1 or self.width < 1:
            raise UnsupportedImage(f"empty {self.width}x{self.height} image")
        if len(self.samples) != self.height * self.width * self.channels:
            raise UnsupportedImage(
                f"{len(self.samples)} samples for a {self.width}x{self.height}x{self.channels} image"
            )

    def to_array(self) -> np.ndarray:
        """Samples as a (channels, h, w) uint8 array."""
        data = np.frombuffer(self.samples, dtype=np.uint8)
        return data.reshape(self.height, self.width, self.channels).transpose(2, 0, 1)


@frozen
class ImageGray(_Image):
    channels: ClassVar[int] = 1
    magic: ClassVar[bytes] = b"P5"


@frozen
class ImageRGB(_Image):
    channels: ClassVar[int] = 3
    magic: ClassVar[bytes] = b"P6"


Image = Union[ImageGray, ImageRGB]
_BY_MAGIC = {b"P5": ImageGray, b"P6": ImageRGB}


def _header_tokens(data: bytes) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise UnsupportedImage("truncated header")
        if data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(data[start:pos])
        if len(tokens) == 1 and tokens[0] not in _BY_MAGIC:
            raise UnsupportedImage(f"magic {tokens[0].decode('ascii', 'replace')}")
    # exactly one whitespace byte separates maxval from the payload
    return tokens, pos + 1


def read_pnm(path: str) -> Image:
    """Read a binary PGM (P5) or PPM (P6) file with maxval 255.

    Raises:
        UnsupportedImage: Any other magic (P1-P4 included), maxval other
            than 255, or a short payload.
        UnreadableFile: The file is missing or cannot be read.
    """
    try:
        with open(path, "rb") as stream:
            data = stream.read()
    except OSError as err:
        raise UnreadableFile(path, err.strerror or err) from err
    tokens, start = _header_tokens(data)
    magic, width, height, maxval = tokens
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as err:
        raise UnsupportedImage(f"malformed header {tokens}") from err
    if maxval != 255:
        raise UnsupportedImage(f"maxval {maxval}")
    cls = _BY_MAGIC[magic]
    size = width * height * cls.channels
    payload = data[start : start + size]
    if len(payload) != size:
        raise UnsupportedImage(f"payload of {len(payload)} bytes, expected {size}")
    return cls(height, width, payload)


def write_pnm(image: Image, path: str) -> None:
    header = b"%s\n%d %d\n255\n" % (image.magic, image.width, image.height)
    try:
        with open(path, "wb") as stream:
            stream.write(header + image.samples)
    except OSError as err:
        raise UnreadableFile(path, err.strerror or err) from err


def image_to_tensor(image: Image) -> Tensor4:
    """Map 8-bit samples to a (1, channels, h, w) tensor with values in [0, 1]."""
    return Tensor4(image.to_array()[None].astype(np.float64) / 255.0)


def tensor_to_image(t: Tensor4, index: int = 0) -> tuple[Image, int]:
    """Quantize example `index` of a 1- or 3-channel tensor back to 8 bits.

    Values are scaled by 255 and rounded half-up; anything outside [0, 1]
    is clamped.

    Returns:
        tuple: The image and the number of clamped samples.

    Raises:
        UnsupportedImage: Channel count other than 1 or 3.
    """
    n, c, h, w = t.dims
    if c not in (1, 3):
        raise UnsupportedImage(f"{c} channels")
    scaled = np.floor(t.data[index] * 255.0 + 0.5)
    clamped = int(((scaled < 0) | (scaled > 255)).sum())
    if clamped:
        logger.warning("Clamped %d samples outside [0, 1]", clamped)
    samples = np.clip(scaled, 0, 255).astype(np.uint8).transpose(1, 2, 0).tobytes()
    cls = ImageGray if c == 1 else ImageRGB
    return cls(h, w, samples), clamped
