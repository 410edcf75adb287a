"""Dataset loaders, config validation, pipeline determinism and idempotence."""

import json
import struct
from pathlib import Path

import numpy as np
import pytest

from ibrobust.config import ExperimentConfig, SCHEMA_VERSION, seed_for
from ibrobust.data import (
    Dataset,
    load_cifar10,
    load_mnist,
    make_synthetic,
    read_cifar_batch,
    read_idx_images,
    read_idx_labels,
    write_cifar_batch,
    write_idx_images,
    write_idx_labels,
)
from ibrobust.errors import (
    BadMagic,
    ConfigError,
    DataError,
    RecordSizeMismatch,
    TruncatedFile,
)
from ibrobust.harness import run_experiment


# ---------------------------------------------------------------------------
# IDX loaders
# ---------------------------------------------------------------------------


def test_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(3, 1, 28, 28)).astype(np.float32) / 255.0
    labels = np.array([3, 1, 4], dtype=np.int64)
    write_idx_images(tmp_path / "imgs", images)
    write_idx_labels(tmp_path / "labels", labels)
    back = read_idx_images(tmp_path / "imgs")
    assert back.shape == (3, 1, 28, 28)
    assert np.array_equal(back, images)  # 8-bit grid values survive exactly
    assert np.array_equal(read_idx_labels(tmp_path / "labels"), labels)


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 1, 28, 28) + b"\x00" * 784)
    with pytest.raises(BadMagic) as exc:
        read_idx_images(path)
    assert exc.value.offset == 0


def test_idx_truncated(tmp_path):
    path = tmp_path / "short"
    path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 28, 28) + b"\x00" * 100)
    with pytest.raises(TruncatedFile):
        read_idx_images(path)


def test_mnist_directory_loader(tmp_path):
    rng = np.random.default_rng(1)
    tr_x = rng.integers(0, 256, size=(6, 1, 28, 28)) / 255.0
    te_x = rng.integers(0, 256, size=(4, 1, 28, 28)) / 255.0
    write_idx_images(tmp_path / "train-images-idx3-ubyte", tr_x)
    write_idx_labels(tmp_path / "train-labels-idx1-ubyte", np.arange(6) % 10)
    write_idx_images(tmp_path / "t10k-images-idx3-ubyte", te_x)
    write_idx_labels(tmp_path / "t10k-labels-idx1-ubyte", np.arange(4) % 10)
    ds = load_mnist(tmp_path)
    assert ds.train_x.shape == (6, 1, 28, 28)
    assert ds.test_x.shape == (4, 1, 28, 28)
    assert ds.train_y.max() < 10


def test_mnist_count_mismatch(tmp_path):
    from ibrobust.errors import CountMismatch

    rng = np.random.default_rng(2)
    write_idx_images(tmp_path / "train-images-idx3-ubyte", rng.random((3, 1, 28, 28)))
    write_idx_labels(tmp_path / "train-labels-idx1-ubyte", np.zeros(5))
    write_idx_images(tmp_path / "t10k-images-idx3-ubyte", rng.random((2, 1, 28, 28)))
    write_idx_labels(tmp_path / "t10k-labels-idx1-ubyte", np.zeros(2))
    with pytest.raises(CountMismatch):
        load_mnist(tmp_path)


# ---------------------------------------------------------------------------
# CIFAR loaders
# ---------------------------------------------------------------------------


def test_cifar_record_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    images = rng.integers(0, 256, size=(2, 3, 32, 32)).astype(np.float32) / 255.0
    labels = np.array([7, 2])
    write_cifar_batch(tmp_path / "b.bin", images, labels)
    x, y = read_cifar_batch(tmp_path / "b.bin")
    assert np.array_equal(x, images)
    assert np.array_equal(y, labels)


def test_cifar_bad_record_size(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\x00" * 3072)  # one byte short
    with pytest.raises(RecordSizeMismatch):
        read_cifar_batch(tmp_path / "bad.bin")


def test_cifar_batch_count(tmp_path):
    rng = np.random.default_rng(4)
    for i in range(1, 6):
        write_cifar_batch(tmp_path / f"data_batch_{i}.bin",
                          rng.random((4, 3, 32, 32)), rng.integers(0, 10, 4))
    write_cifar_batch(tmp_path / "test_batch.bin",
                      rng.random((3, 3, 32, 32)), rng.integers(0, 10, 3))
    ds = load_cifar10(tmp_path)
    assert ds.train_x.shape[0] == 20 and ds.test_x.shape[0] == 3


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def test_synthetic_deterministic():
    a = make_synthetic(3, 20, 28, seed=5)
    b = make_synthetic(3, 20, 28, seed=5)
    assert np.array_equal(a.train_x, b.train_x)
    assert np.array_equal(a.test_y, b.test_y)


def test_synthetic_degenerate_inputs():
    with pytest.raises(DataError):
        make_synthetic(1, 10, 28, seed=0)
    with pytest.raises(DataError):
        make_synthetic(3, 0, 28, seed=0)


def test_sample_limit_takes_first_k():
    ds = make_synthetic(3, 20, 28, seed=6)
    cut = ds.limited(5)
    assert np.array_equal(cut.test_x, ds.test_x[:5])
    assert len(cut.train_x) == len(ds.train_x)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------


def _minimal_config(**overrides):
    d = {
        "schema_version": SCHEMA_VERSION,
        "dataset": "synthetic",
        "tiers": ["D1"],
        "objectives": ["base"],
        "attacks": [{"kind": "fgsm"}],
        "train": {"epochs": 1},
        "output_dir": "/tmp/unused",
        "master_seed": 1,
    }
    d.update(overrides)
    return d


def test_config_roundtrip_and_hash_stability():
    cfg = ExperimentConfig.from_dict(_minimal_config())
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert cfg.hash() == again.hash()
    moved = cfg.replace(output_dir="/elsewhere")
    assert moved.hash() == cfg.hash()  # location does not change the experiment
    reseeded = cfg.replace(master_seed=2)
    assert reseeded.hash() != cfg.hash()


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_minimal_config(bogus=1))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_minimal_config(train={"epochs": 1, "nope": 2}))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(
            _minimal_config(attacks=[{"kind": "fgsm", "step": 0.1}])
        )


def test_config_requires_version_and_known_values():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_minimal_config(schema_version=99))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_minimal_config(dataset="svhn"))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_minimal_config(tiers=["D7"]))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_minimal_config(objectives=["svbi"]))  # no teacher
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(_minimal_config(dataset="imagenet64"))


def test_seed_derivation_stable():
    assert seed_for(1, "train", "D1") == seed_for(1, "train", "D1")
    assert seed_for(1, "train", "D1") != seed_for(1, "train", "D2")
    assert seed_for(1, "train", "D1") != seed_for(2, "train", "D1")


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def _pipeline_config(tmp_path, **overrides):
    d = {
        "schema_version": SCHEMA_VERSION,
        "dataset": "synthetic",
        "synthetic": {"classes": 3, "per_class": 60, "image_size": 28, "noise": 0.25},
        "tiers": ["D1"],
        "objectives": ["base"],
        "attacks": [{"kind": "fgsm", "epsilon": 0.0314}],
        "train": {"epochs": 1, "batch_size": 64},
        "sample_limit": 10,
        "output_dir": str(tmp_path / "run"),
        "master_seed": 3,
    }
    d.update(overrides)
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    cfg = _pipeline_config(tmp)
    report, root = run_experiment(cfg)
    return cfg, report, Path(root)


def test_pipeline_outputs_exist(pipeline_run):
    _, report, root = pipeline_run
    for name in ("report.json", "robustness.csv", "norms.csv",
                 "norms_l0.svg", "norms_l2.svg", "norms_linf.svg"):
        assert (root / name).exists(), name
    assert ("D1", "base", "fgsm") in report.rows


def test_outputs_embed_config_hash(pipeline_run):
    cfg, _, root = pipeline_run
    for name in ("robustness.csv", "norms.csv"):
        first = (root / name).read_text().splitlines()[0]
        assert first == f"# config_hash={cfg.hash()}"
    payload = json.loads((root / "report.json").read_text())
    assert payload["provenance"]["config_hash"] == cfg.hash()


def test_pipeline_rerun_byte_identical(pipeline_run, tmp_path):
    cfg, _, root = pipeline_run
    cfg2 = cfg.replace(output_dir=str(tmp_path / "rerun"))
    _, root2 = run_experiment(cfg2)
    for name in ("robustness.csv", "norms.csv"):
        assert (root / name).read_bytes() == (Path(root2) / name).read_bytes()
    for name in ("norms_l0.svg", "norms_l2.svg", "norms_linf.svg"):
        assert (root / name).read_bytes() == (Path(root2) / name).read_bytes()


def test_pipeline_stage_idempotent(pipeline_run):
    cfg, _, root = pipeline_run
    ckpt = root / "models" / "D1_base.ckpt"
    before = ckpt.stat().st_mtime_ns
    run_experiment(cfg)  # rerun in place: completed stages are no-ops
    assert ckpt.stat().st_mtime_ns == before


def test_pipeline_training_only_config(tmp_path):
    cfg = _pipeline_config(tmp_path, attacks=[])
    report, root = pipeline_run_result = run_experiment(cfg)
    assert report.rows == {}
    assert not (Path(root) / "norms.csv").read_text().splitlines()[2:]
    assert not (Path(root) / "norms_l0.svg").exists()  # nothing to plot


def test_config_error_exit_code(tmp_path):
    from click.testing import CliRunner

    from ibrobust.cli import main

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema_version": 1}))
    result = CliRunner().invoke(main, ["run", "--config", str(bad)])
    assert result.exit_code == 2


def test_data_error_exit_code(tmp_path):
    from click.testing import CliRunner

    from ibrobust.cli import main

    cfg = _minimal_config(dataset="mnist", output_dir=str(tmp_path / "x"))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    result = CliRunner().invoke(main, ["run", "--config", str(path)])
    assert result.exit_code == 4  # missing data_dir surfaces as a stage failure


def test_cli_full_run_and_plot(tmp_path):
    from click.testing import CliRunner

    cfgd = {
        "schema_version": SCHEMA_VERSION,
        "dataset": "synthetic",
        "synthetic": {"classes": 2, "per_class": 40, "image_size": 28, "noise": 0.25},
        "tiers": ["D1"],
        "objectives": ["base"],
        "attacks": [{"kind": "fgsm", "epsilon": 0.05}],
        "train": {"epochs": 1, "batch_size": 32},
        "sample_limit": 6,
        "output_dir": str(tmp_path / "cli_run"),
        "master_seed": 0,
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfgd))
    from ibrobust.cli import main

    runner = CliRunner()
    result = runner.invoke(main, ["run", "--config", str(path)])
    assert result.exit_code == 0, result.output
    assert "drop" in result.output
    result = runner.invoke(main, ["plot", "--config", str(path)])
    assert result.exit_code == 0, result.output
