example_epoch_1 = {
    "epoch": 1,
    "train_error": 62.5,
    "test_error": 75.0,
    "seconds": 1.5,
    "loss": 1.25,
}

example_epoch_2 = {
    "epoch": 2,
    "train_error": 37.5,
    "test_error": 50.0,
    "seconds": 2.5,
    "loss": 0.75,
}

example_epoch_json = (
    '{"epoch": 1, "loss": 1.25, "seconds": 1.5, "test_error": 75.0, "train_error": 62.5}'
)

example_run_summary = {
    "name": "s3pool-16-8",
    "seed": 3,
    "epochs": 2,
    "final": {"train_error": 37.5, "test_error": 50.0},
    "seconds_per_epoch": 2.0,
}

example_run_csv_rows = [
    {"epoch": 1, "split": "train", "error": 62.5, "seconds": 1.5},
    {"epoch": 1, "split": "test", "error": 75.0, "seconds": 1.5},
    {"epoch": 2, "split": "train", "error": 37.5, "seconds": 2.5},
    {"epoch": 2, "split": "test", "error": 50.0, "seconds": 2.5},
]

example_bench_flatdict = {
    "arch": "nin",
    "pooling": "s3pool-16-8",
    "seconds_per_epoch": 3.0,
    "ratio": 1.5,
}

example_config_defaults = {
    "arch": "nin",
    "pooling": "s3pool",
    "grids": [16, 8],
    "width": 16,
    "num_classes": 10,
    "epochs": 20,
    "batch_size": 128,
    "lr": 1.0,
    "lr_drop_epoch": None,
    "lr_drop_factor": 0.1,
    "rho": 0.95,
    "eps": 1e-6,
    "seed": 0,
    "dataset": "synthetic",
    "data_dir": None,
    "train_size": 1000,
    "test_size": 500,
    "normalize": False,
    "dropout": 0.0,
    "inference": "average",
    "share_samples": False,
    "first_stage": "max",
    "bn_eps": 1e-5,
    "bn_momentum": 0.9,
    "dtype": "float32",
}
