import csv
import json
import os

import numpy as np
import pytest

from s3pool.data import ImageGray, read_pnm, write_pnm
from s3pool.exceptions import ConfigError, DivisibilityError, WrongDirectory
from s3pool.experiment import Experiment, demo_downsample, error_rate
from s3pool.objects import TrainConfig
from s3pool.sampling import PoolGeom, SampleIndices

SMALL_ARCH = ["conv-4-3", "bn", "relu", "pool-s3pool-2-2-8", "conv-4-1", "gap"]


@pytest.fixture
def small_config():
    return TrainConfig(
        arch=SMALL_ARCH,
        num_classes=4,
        epochs=2,
        batch_size=16,
        train_size=32,
        test_size=16,
        seed=3,
        dtype="float64",
    )


@pytest.fixture
def tiny_nin():
    return TrainConfig(width=2, num_classes=4, epochs=1, batch_size=10, train_size=20, test_size=10)


@pytest.fixture
def square_image(tmp_path):
    path = str(tmp_path / "square.pgm")
    write_pnm(ImageGray(4, 4, bytes(range(16))), path)
    return path


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as stream:
        return list(csv.DictReader(stream))


@pytest.mark.parametrize(
    "predicted, labels, result",
    [([0, 1, 2, 3], [0, 1, 2, 3], 0.0), ([0, 0, 0, 0], [0, 1, 2, 3], 75.0), ([1], [0], 100.0)],
)
def test_error_rate(predicted, labels, result):
    assert error_rate(np.array(predicted), labels) == result


def test_missing_out_dir():
    with pytest.raises(WrongDirectory):
        Experiment(TrainConfig(), "tests/wrongdir")


def test_fresh_model_evaluates(small_config):
    experiment = Experiment(small_config)
    _, test = experiment.load_data()
    model = experiment.build()
    error = experiment.evaluate(model, test)
    assert 0.0 <= error <= 100.0
    assert 0.0 <= experiment.evaluate(model, test, ensemble=2) <= 100.0


def test_fresh_model_is_at_chance():
    experiment = Experiment(TrainConfig(width=8, num_classes=10, test_size=500))
    _, test = experiment.load_data()
    assert experiment.evaluate(experiment.build(), test) == pytest.approx(90.0, abs=5.0)


def test_shapes_separable_by_small_kernels():
    config = TrainConfig(
        arch=["conv-32-3", "bn", "relu", "gap", "conv-10-1"],
        epochs=40,
        batch_size=50,
        eps=1e-4,
        train_size=1000,
        test_size=10,
    )
    experiment = Experiment(config)
    train, _ = experiment.load_data()
    _, model = experiment.train(write=False)
    assert experiment.evaluate(model, train) < 20.0


def test_train_writes_outputs(small_config, tmp_path):
    metrics, _ = Experiment(small_config, str(tmp_path)).train()
    assert [e.epoch for e in metrics.epochs] == [1, 2]

    with open("tests/resources/metrics_header.csv", encoding="utf-8") as stream:
        header = stream.read()
    with open(tmp_path / "metrics.csv", encoding="utf-8") as stream:
        assert stream.readline() == header
    rows = read_rows(tmp_path / "metrics.csv")
    assert [(r["epoch"], r["split"]) for r in rows] == [("1", "train"), ("1", "test"), ("2", "train"), ("2", "test")]

    with open(tmp_path / "results.json", encoding="utf-8") as stream:
        results = json.load(stream)
    assert results["final"]["test_error"] == metrics.final_test_error
    assert results["config"]["arch"] == SMALL_ARCH
    assert os.path.isfile(tmp_path / "model.s3pk")


def test_training_is_reproducible(small_config):
    first, _ = Experiment(small_config).train()
    second, _ = Experiment(small_config).train()
    strip = [(e.train_error, e.test_error, e.loss) for e in first.epochs]
    assert strip == [(e.train_error, e.test_error, e.loss) for e in second.epochs]


def test_from_checkpoint(small_config, tmp_path):
    experiment = Experiment(small_config, str(tmp_path))
    _, model = experiment.train()
    restored_experiment, restored = Experiment.from_checkpoint(str(tmp_path / "model.s3pk"))
    assert restored_experiment.config == small_config
    assert restored.step == model.step
    test = experiment.load_data()[1]
    assert restored_experiment.evaluate(restored, test) == experiment.evaluate(model, test)


def test_from_checkpoint_overrides(small_config, tmp_path):
    Experiment(small_config, str(tmp_path)).train()
    experiment, _ = Experiment.from_checkpoint(str(tmp_path / "model.s3pk"), {"test_size": 8})
    assert len(experiment.load_data()[1]) == 8


def test_normalized_data(small_config):
    train, test = Experiment(small_config.evolve(normalize=True)).load_data()
    assert np.allclose(train.images.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert len(test) == 16


def test_build_rejects_grid_for_map(small_config):
    config = small_config.evolve(arch=["conv-4-3", "pool-s3pool-2-2-64", "gap"])
    with pytest.raises(ConfigError):
        Experiment(config).build()


def test_sweep_grid(tiny_nin, tmp_path):
    rows = Experiment(tiny_nin, str(tmp_path)).sweep_grid([[2, 2], [4, 4]], seeds=[0, 1])
    assert [(r.config, r.seed) for r in rows] == [("s3pool-2-2", 0), ("s3pool-2-2", 1), ("s3pool-4-4", 0), ("s3pool-4-4", 1)]
    written = read_rows(tmp_path / "sweep_grid.csv")
    assert list(written[0]) == ["config", "seed", "train_error", "test_error"]
    assert len(written) == 4


def test_sweep_grid_threads_match_serial(tiny_nin):
    serial = Experiment(tiny_nin).sweep_grid([[2, 2], [8, 4]])
    parallel = Experiment(tiny_nin, threads=2).sweep_grid([[2, 2], [8, 4]])
    assert serial == parallel


def test_sweep_grid_checks_before_training(tiny_nin, mocker):
    train = mocker.patch.object(Experiment, "train")
    with pytest.raises(ConfigError):
        Experiment(tiny_nin).sweep_grid([[2, 2], [16, 32]])
    train.assert_not_called()


def test_sweep_train_size(tiny_nin, tmp_path):
    rows = Experiment(tiny_nin, str(tmp_path)).sweep_train_size([10, 20], ["max", "s3pool-4-4"])
    assert [(r.train_size, r.pooling) for r in rows] == [(10, "max"), (10, "s3pool-4-4"), (20, "max"), (20, "s3pool-4-4")]
    assert len(read_rows(tmp_path / "sweep_size.csv")) == 4


def test_bench(tiny_nin, tmp_path):
    rows = Experiment(tiny_nin, str(tmp_path)).bench(["max", "s3pool"], batches=1, repeats=1)
    assert [r.pooling for r in rows] == ["max", "s3pool-16-8"]
    assert rows[0].ratio == 1.0
    assert all(r.seconds_per_epoch > 0 for r in rows)
    assert list(read_rows(tmp_path / "bench.csv")[0]) == ["arch", "pooling", "seconds_per_epoch", "ratio"]


def test_demo_uniform(square_image, tmp_path):
    out = str(tmp_path / "uniform.pgm")
    assert demo_downsample(square_image, out, s=2, mode="uniform") == 0
    assert read_pnm(out).to_array().tolist() == [[[0, 2], [8, 10]]]


def test_demo_stochastic(square_image, tmp_path):
    first, second = str(tmp_path / "a.pgm"), str(tmp_path / "b.pgm")
    demo_downsample(square_image, first, s=2, g=4, seed=5)
    demo_downsample(square_image, second, s=2, grid_fraction=1, seed=5)
    with open(first, "rb") as a, open(second, "rb") as b:
        assert a.read() == b.read()
    picked = read_pnm(first).to_array()[0]
    rows = sorted({int(v) // 4 + 1 for v in picked[:, 0]})
    cols = sorted({int(v) % 4 + 1 for v in picked[0, :]})
    assert SampleIndices(rows, cols).is_valid(4, 4, PoolGeom(k=1, s=2, g=4))


@pytest.mark.parametrize(
    "kwargs, error",
    [
        ({"s": 3, "mode": "uniform"}, DivisibilityError),
        ({"s": 2, "mode": "stochastic"}, ConfigError),
        ({"s": 2, "mode": "blur"}, ConfigError),
        ({"s": 2, "g": 8}, DivisibilityError),
    ],
)
def test_demo_errors(square_image, tmp_path, kwargs, error):
    with pytest.raises(error):
        demo_downsample(square_image, str(tmp_path / "out.pgm"), **kwargs)
