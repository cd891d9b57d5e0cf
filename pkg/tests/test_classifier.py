import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from refinelab.checkpoint import CheckpointError
from refinelab.classifier import (
    ConfigurationError,
    TrainConfig,
    build_classifier,
    extract_features,
    load_classifier,
    parameter_blob,
    predict_probs,
    save_classifier,
    train_classifier,
)
from refinelab.data import LabeledDataset


@pytest.fixture(scope="module")
def model():
    return build_classifier("resnet_small", 10, (32, 32, 3), seed=0).eval()


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(0, 1, (12, 32, 32, 3)).astype(np.float32)


def test_full_length_schedule_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.momentum, cfg.weight_decay, cfg.epochs) == (0.1, 0.9, 5e-4, 150)
    assert cfg.decay_epochs == [100, 130] and cfg.decay_factor == 0.1


def test_bad_config():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=10, decay_epochs=[12])
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)


def test_probs_normalized(model, images):
    p = predict_probs(model, images)
    assert p.shape == (12, 10)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-5)


def test_duplicate_rows_identical(model, images):
    x = np.concatenate([images[:1], images[:1], images[1:3]])
    p = predict_probs(model, x)
    np.testing.assert_array_equal(p[0], p[1])


def test_large_batch_shape(model):
    x = np.random.default_rng(1).uniform(0, 1, (1000, 32, 32, 3)).astype(np.float32)
    assert predict_probs(model, x).shape == (1000, 10)


def test_dimension_mismatch(model):
    with pytest.raises(ValueError):
        predict_probs(model, np.zeros((2, 16, 16, 3)))
    with pytest.raises(ValueError):
        extract_features(model, np.zeros((2, 32, 32, 1)))


def test_features_width_matches_metadata(model, images):
    f = extract_features(model, images)
    assert f.shape == (12, model.metadata()["feature_dim"]) == (12, 128)
    f2 = extract_features(model, images[[0, 0]])
    np.testing.assert_array_equal(f2[0], f2[1])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(2, 20))
def test_softmax_permutation_equivariance(seed, k):
    rng = np.random.default_rng(seed)
    z = torch.as_tensor(rng.normal(scale=5, size=(4, k)))
    perm = torch.as_tensor(rng.permutation(k))
    lhs = torch.softmax(z[:, perm], 1)
    rhs = torch.softmax(z, 1)[:, perm]
    assert (lhs - rhs).abs().max().item() <= 1e-6


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(2, 20))
def test_softmax_coordinate_lipschitz(seed, k):
    rng = np.random.default_rng(seed)
    z, z2 = (torch.as_tensor(rng.normal(scale=3, size=k)) for _ in range(2))
    diff = (torch.softmax(z, 0) - torch.softmax(z2, 0)).abs()
    assert (diff <= torch.linalg.norm(z - z2) + 1e-6).all()


def tiny_data(n=40):
    rng = np.random.default_rng(0)
    return LabeledDataset(rng.uniform(0, 1, (n, 8, 8, 3)), rng.integers(0, 3, n), 3)


def test_zero_epochs_returns_initialization():
    data = tiny_data()
    cfg = TrainConfig(epochs=0, decay_epochs=[])
    init = build_classifier("convnet", 3, (8, 8, 3), seed=cfg.seed, widths=(4,))
    trained = train_classifier(data, cfg, "convnet", widths=(4,))
    assert parameter_blob(init) == parameter_blob(trained)


def test_training_logs_and_is_deterministic():
    data = tiny_data()
    cfg = TrainConfig(epochs=2, batch_size=8, lr=0.05, decay_epochs=[1])
    a = train_classifier(data, cfg, "convnet", widths=(4,))
    b = train_classifier(data, cfg, "convnet", widths=(4,))
    assert len(a.history) == 2
    assert parameter_blob(a) == parameter_blob(b)


def test_mismatched_model_rejected():
    model = build_classifier("convnet", 5, (8, 8, 3), widths=(4,))
    with pytest.raises(ConfigurationError):
        train_classifier(tiny_data(), TrainConfig(epochs=1, decay_epochs=[]), model=model)
    with pytest.raises(ConfigurationError):
        build_classifier("nope", 3)


def test_checkpoint_roundtrip(tmp_path, model, images):
    path = save_classifier(model, tmp_path / "m.ckpt")
    loaded, header = load_classifier(path)
    assert header["arch"] == "resnet_small" and header["num_classes"] == 10
    assert header["input_shape"] == [32, 32, 3]
    np.testing.assert_array_equal(predict_probs(loaded, images), predict_probs(model, images))


def test_checkpoint_rejects_bad_magic_and_version(tmp_path, model):
    path = save_classifier(model, tmp_path / "m.ckpt")
    raw = bytearray(path.read_bytes())
    bad_version = bytearray(raw)
    bad_version[8:10] = struct.pack("<H", 2)
    (tmp_path / "v.ckpt").write_bytes(bytes(bad_version))
    with pytest.raises(CheckpointError, match="version"):
        load_classifier(tmp_path / "v.ckpt")
    raw[:4] = b"XXXX"
    (tmp_path / "x.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_classifier(tmp_path / "x.ckpt")
