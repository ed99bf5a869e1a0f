import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, Optional, Sequence

import numpy as np
from attrs import fields

from . import data, pooling
from .checkpoint import load_checkpoint, restore, save_checkpoint
from .data import LabeledBatch
from .exceptions import ArchitectureError, ConfigError, DivisibilityError, InvalidGeometry, WrongDirectory
from .layers import ModelState, adadelta_step, build_model, predict_ensemble, softmax_ce
from .objects import BenchRow, EpochMetrics, JSONEncoder, RunMetrics, SizeRow, SweepRow, TrainConfig
from .pooling import Mode
from .sampling import PoolGeom, RngStream

logger = logging.getLogger(__name__)

# stream addresses outside the range of layer indices
DATA_STREAM = 1 << 21
SHUFFLE_STREAM = 1 << 22

METRICS_FIELDS = ("epoch", "split", "error", "seconds")
CHECKPOINT_NAME = "model.s3pk"


def error_rate(predicted: np.ndarray, labels: Sequence[int]) -> float:
    """Percentage of top-1 misclassifications."""
    return 100.0 * float(np.mean(np.asarray(predicted) != np.asarray(labels)))


def write_csv(path: str, rows: Iterable[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as stream:
        writer = csv.DictWriter(stream, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _columns(cls) -> list[str]:
    return [a.name for a in fields(cls)]


def _pool_map(func, items: list, threads: int) -> list:
    if threads <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(func, items))


class Experiment:
    """Desk-scale training runs for one `TrainConfig`.

    |  Every random choice is addressed by the config seed: the synthetic
    |  dataset, parameter initialization, the per-epoch shuffle and each
    |  pooling draw. Two runs of the same config produce the same metrics,
    |  apart from the wall-clock column.

    Outputs written to `out_dir`:
        metrics.csv: one row per epoch and split (epoch, split, error, seconds).
        results.json: final errors, mean seconds per epoch and the config.
        model.s3pk: checkpoint with the config embedded.
    """

    def __init__(
        self,
        config: Optional[TrainConfig] = None,
        out_dir: Optional[str] = None,
        threads: int = 1,
        cache_dir: Optional[str] = None,
    ):
        """Initialize the experiment.

        Args:
            config (TrainConfig): Run configuration. Defaults to TrainConfig().
            out_dir (str, None): Directory for result files. Nothing is
                written when None.
            threads (int): Workers for independent runs of a sweep.
            cache_dir (str, None): Where CIFAR-10 is downloaded when the
                config names no data_dir. Defaults to the current directory.

        Raises:
            WrongDirectory: `out_dir` does not exist.
        """
        self.config = config if config is not None else TrainConfig()
        if out_dir is not None and not os.path.isdir(out_dir):
            raise WrongDirectory()
        self.out_dir = out_dir
        self.threads = max(1, threads)
        self.cache_dir = cache_dir or os.getcwd()
        self._data = None

    def __repr__(self):
        return f"Experiment({self.config.name}, seed={self.config.seed}, out_dir='{self.out_dir}')"

    def load_data(self) -> tuple[LabeledBatch, LabeledBatch]:
        """Training and test sets, read once and cached on the instance."""
        if self._data is not None:
            return self._data
        config = self.config
        if config.dataset == "synthetic":
            train = data.synth_translated_shapes(
                RngStream(config.seed, DATA_STREAM, 0), config.train_size, config.num_classes
            )
            test = data.synth_translated_shapes(
                RngStream(config.seed, DATA_STREAM, 1), config.test_size, config.num_classes
            )
        else:
            data_dir = config.data_dir or data.fetch_cifar10(self.cache_dir)
            train, test = data.load_cifar10(data_dir, config.train_size, config.test_size)
        if config.normalize:
            mean, std = data.channel_stats(train.images)
            train = LabeledBatch(data.normalize(train.images, mean, std), train.labels, train.classes)
            test = LabeledBatch(data.normalize(test.images, mean, std), test.labels, test.classes)
        self._data = train, test
        return self._data

    def build(self, input_dims: tuple[int, int, int] = (3, data.SIDE, data.SIDE)) -> ModelState:
        """Build a fresh model, turning architecture problems into config errors.

        Raises:
            ConfigError: The layers do not fit the input, e.g. a grid size
                that does not divide the map a pooling layer sees.
        """
        try:
            return build_model(
                self.config.layer_specs(), input_dims, self.config.seed, self.config.model_options()
            )
        except (ArchitectureError, DivisibilityError, InvalidGeometry) as err:
            raise ConfigError(f"{self.config.name}: {err}") from err

    def evaluate(self, model: ModelState, batch: LabeledBatch, ensemble: int = 0) -> float:
        """Test error in percent: deterministic inference, or an average over `ensemble` pooling draws."""
        predicted = []
        size = self.config.batch_size
        for start in range(0, len(batch), size):
            x = batch.images.data[start : start + size]
            if ensemble:
                probs = predict_ensemble(model, x, ensemble)
                predicted.append(probs.argmax(axis=1))
            else:
                predicted.append(model.predict(x))
        return error_rate(np.concatenate(predicted), batch.labels)

    def train_epoch(self, model: ModelState, train: LabeledBatch, epoch: int) -> tuple[float, float]:
        """One shuffled pass of ADADELTA steps; returns (train error %, mean loss) of the train-mode passes."""
        config = self.config
        labels = np.asarray(train.labels)
        order = RngStream(config.seed, SHUFFLE_STREAM, epoch).permutation(len(train))
        lr = config.lr_at(epoch)
        wrong, losses = 0, []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            logits, caches = model.forward(train.images.data[idx], Mode.TRAIN, step=model.step + 1)
            loss, grad = softmax_ce(logits, labels[idx])
            adadelta_step(model, model.backward(caches, grad), config.rho, config.eps, lr)
            wrong += int((logits.argmax(axis=1) != labels[idx]).sum())
            losses.append(loss)
        return 100.0 * wrong / len(train), float(np.mean(losses))

    def train(self, write: bool = True) -> tuple[RunMetrics, ModelState]:
        """Train for the configured epochs.

        Epoch seconds cover the training steps and a full pass over the test
        set.

        Returns:
            tuple[RunMetrics, ModelState]: Per-epoch metrics and the trained model.

        Raises:
            ConfigError: Invalid architecture for the data.
        """
        train, test = self.load_data()
        model = self.build(train.images.dims[1:])
        metrics = RunMetrics(self.config.name, self.config.seed)
        for epoch in range(1, self.config.epochs + 1):
            started = time.perf_counter()
            train_error, loss = self.train_epoch(model, train, epoch)
            test_error = self.evaluate(model, test)
            seconds = time.perf_counter() - started
            metrics.epochs.append(EpochMetrics(epoch, train_error, test_error, seconds, loss))
            logger.info(
                "%s epoch %d: loss %.4f, train err %.2f%%, test err %.2f%%, %.2fs",
                self.config.name, epoch, loss, train_error, test_error, seconds,
            )
        if write and self.out_dir is not None:
            self.write_run(metrics, model)
        return metrics, model

    def write_run(self, metrics: RunMetrics, model: ModelState) -> None:
        write_csv(os.path.join(self.out_dir, "metrics.csv"), metrics.csv_rows(), METRICS_FIELDS)
        summary = dict(metrics.summary(), config=self.config.to_dict())
        with open(os.path.join(self.out_dir, "results.json"), "w", encoding="utf-8") as stream:
            stream.write(JSONEncoder(indent=2, sort_keys=True).encode(summary))
        save_checkpoint(model, os.path.join(self.out_dir, CHECKPOINT_NAME), self.config.to_json())

    @classmethod
    def from_checkpoint(
        cls, path: str, overrides: Optional[dict] = None, **kwargs
    ) -> tuple["Experiment", ModelState]:
        """Rebuild the experiment and its model from a checkpoint alone.

        `overrides` replaces config fields, e.g. the dataset to evaluate on.

        Raises:
            CheckpointError: Malformed file or mismatching tensors.
            ConfigError: The embedded config is invalid.
            UnreadableFile: The checkpoint or the dataset cannot be read.
        """
        checkpoint = load_checkpoint(path)
        try:
            config = TrainConfig.from_dict(json.loads(checkpoint.config))
        except json.JSONDecodeError as err:
            raise ConfigError(f"Checkpoint config is not JSON: {err}") from err
        if overrides:
            config = config.evolve(**overrides)
        experiment = cls(config, **kwargs)
        model = experiment.build(experiment.load_data()[1].images.dims[1:])
        return experiment, restore(model, checkpoint)

    def _variant(self, **changes) -> "Experiment":
        return Experiment(self.config.evolve(**changes), None, 1, self.cache_dir)

    def bench(
        self,
        variants: Sequence[str] = ("max", "zeiler", "s3pool"),
        batches: int = 4,
        repeats: int = 2,
    ) -> list[BenchRow]:
        """Seconds per epoch for each pooling variant on the same architecture and data.

        An epoch is `batches` training steps plus a pass over a test set of
        the same size; the fastest of `repeats` epochs is kept. Ratios are
        relative to the first variant.
        """
        size = batches * self.config.batch_size
        rows = []
        for variant in variants:
            run = self._variant(pooling=variant, train_size=size, test_size=size, dataset="synthetic")
            train, test = run.load_data()
            model = run.build(train.images.dims[1:])
            timings = []
            for epoch in range(1, repeats + 1):
                started = time.perf_counter()
                run.train_epoch(model, train, epoch)
                run.evaluate(model, test)
                timings.append(time.perf_counter() - started)
            seconds = min(timings)
            base = rows[0].seconds_per_epoch if rows else seconds
            rows.append(BenchRow(str(self.config.arch), run.config.name, seconds, seconds / base))
            logger.info("bench %s: %.3fs/epoch (x%.3f)", run.config.name, seconds, seconds / base)
        if self.out_dir is not None:
            write_csv(os.path.join(self.out_dir, "bench.csv"), [r.to_flat_dict() for r in rows], _columns(BenchRow))
        return rows

    def _check_all(self, runs: list["Experiment"]) -> None:
        for run in runs:
            run.build(run.load_data()[0].images.dims[1:])

    def sweep_grid(self, grids: Sequence[Sequence[int]], seeds: Sequence[int] = (0,)) -> list[SweepRow]:
        """Train one s3pool run per grid configuration and seed.

        Every configuration is checked against the feature-map sizes before
        any training starts.

        Raises:
            ConfigError: A grid size does not divide the map its layer sees.
        """
        runs = [
            self._variant(pooling="s3pool", grids=list(g), seed=seed) for g in grids for seed in seeds
        ]
        self._check_all(runs)

        def one(run):
            metrics, _ = run.train(write=False)
            return SweepRow(run.config.name, run.config.seed, metrics.final_train_error, metrics.final_test_error)

        rows = _pool_map(one, runs, self.threads)
        if self.out_dir is not None:
            write_csv(os.path.join(self.out_dir, "sweep_grid.csv"), [r.to_flat_dict() for r in rows], _columns(SweepRow))
        return rows

    def sweep_train_size(
        self,
        sizes: Sequence[int],
        poolings: Sequence[str] = ("max", "s3pool"),
        seeds: Sequence[int] = (0,),
    ) -> list[SizeRow]:
        """Train every pooling variant at several training-set caps."""
        runs = [
            self._variant(pooling=p, train_size=size, seed=seed)
            for size in sizes
            for p in poolings
            for seed in seeds
        ]
        self._check_all(runs)

        def one(run):
            metrics, _ = run.train(write=False)
            return SizeRow(
                run.config.train_size, run.config.name, run.config.seed,
                metrics.final_train_error, metrics.final_test_error,
            )

        rows = _pool_map(one, runs, self.threads)
        if self.out_dir is not None:
            write_csv(os.path.join(self.out_dir, "sweep_size.csv"), [r.to_flat_dict() for r in rows], _columns(SizeRow))
        return rows


def demo_downsample(
    in_path: str,
    out_path: str,
    s: int = 2,
    g: Optional[int] = None,
    seed: int = 0,
    mode: str = "stochastic",
    grid_fraction: Optional[int] = None,
) -> int:
    """Downsample a PGM/PPM image by `s`, uniformly or by stochastic grid sampling.

    Args:
        in_path (str): Source P5/P6 image.
        out_path (str): Destination image, same format.
        s (int): Stride.
        g (int, None): Grid size for the stochastic mode.
        seed (int): Seed of the draw; equal seeds give byte-identical files.
        mode (str): "uniform" or "stochastic".
        grid_fraction (int, None): Set g to the image width divided by this
            (4 = a quarter, 2 = half, 1 = the whole width) instead of `g`.

    Returns:
        int: Number of clamped samples (always 0 for valid inputs).

    Raises:
        DivisibilityError: s or g does not divide the image.
        UnsupportedImage: The input is not a supported netpbm file.
        UnreadableFile: An image file cannot be opened.
        ConfigError: Unknown mode, or no grid size in stochastic mode.
    """
    image = data.read_pnm(in_path)
    x = data.image_to_tensor(image)
    if mode == "uniform":
        z = pooling.uniform_downsample(x, s)
    elif mode == "stochastic":
        if grid_fraction is not None:
            g = image.width // grid_fraction
        if g is None:
            raise ConfigError("Stochastic downsampling needs a grid size.")
        z, _ = pooling.stochastic_downsample(x, PoolGeom(k=1, s=s, g=g), RngStream(seed))
    else:
        raise ConfigError(f"Unknown downsampling mode '{mode}'.")
    out, clamped = data.tensor_to_image(z)
    data.write_pnm(out, out_path)
    logger.info("Wrote %dx%d %s image to %s", out.width, out.height, mode, out_path)
    return clamped
