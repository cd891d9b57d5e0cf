import copy

import numpy as np
import pytest
from fastapi.testclient import TestClient

from refinelab.blackbox import (
    LocalOracle,
    OracleError,
    RemoteOracle,
    ScoreOracle,
    blackbox_defend,
    distill_surrogate,
    distillation_loss,
)
from refinelab.classifier import TrainConfig, build_classifier, parameter_blob, predict_probs
from refinelab.data import UnlabeledDataset
from refinelab.refine import RefineConfig, defended_predict, make_output_mapping, transform
from refinelab.service import create_app


@pytest.fixture(scope="module")
def model():
    return build_classifier("convnet", 4, (8, 8, 3), seed=0, widths=(4, 8)).eval()


@pytest.fixture(scope="module")
def data():
    return UnlabeledDataset(np.random.default_rng(0).uniform(0, 1, (48, 8, 8, 3)).astype(np.float32))


def test_local_oracle_counts_and_hides_model(model, data):
    oracle = LocalOracle(model)
    p = oracle.query(data.images[:5])
    np.testing.assert_allclose(p, predict_probs(model, data.images[:5]))
    oracle.query(data.images[5:9])
    assert oracle.queries == 2
    assert not hasattr(oracle, "model") and not hasattr(oracle, "parameters")


def test_oracle_failure_carries_query_index():
    class Broken(ScoreOracle):
        def _score(self, images):
            if self.queries > 1:
                raise RuntimeError("boom")
            return np.full((len(images), 2), 0.5)

    o = Broken(2, (4, 4, 3))
    o.query(np.zeros((1, 4, 4, 3)))
    with pytest.raises(OracleError, match="query 1"):
        o.query(np.zeros((1, 4, 4, 3)))


def test_exact_copy_has_zero_distillation_loss(model, data):
    oracle = LocalOracle(model)
    surrogate = copy.deepcopy(model)
    assert distillation_loss(surrogate, oracle, data) == 0.0
    cfg = TrainConfig(epochs=0, decay_epochs=[])
    same = distill_surrogate(oracle, data, "convnet", cfg, model=surrogate)
    assert distillation_loss(same, oracle, data) == 0.0


def test_distillation_decreases_loss(model, data):
    oracle = LocalOracle(model)
    cfg = TrainConfig(epochs=6, batch_size=16, lr=0.5, decay_epochs=[5])
    s = distill_surrogate(oracle, data, "convnet", cfg, widths=(4, 8))
    hist = [h["loss"] for h in s.distill_history]
    assert hist[-1] < hist[0]
    assert oracle.queries == 1  # 48 images in one query batch


def test_blackbox_defend_composition(model, data):
    before = parameter_blob(model)
    oracle = LocalOracle(model)
    cfg = RefineConfig(epochs=1, batch_size=16, decay_epochs=[], width=2, depth=1)
    surrogate = build_classifier("convnet", 4, (8, 8, 3), seed=1, widths=(4,)).eval()
    defended, _ = blackbox_defend(oracle, data, cfg, surrogate=surrogate, mapping=make_output_mapping(4, 2))
    labels, _ = defended_predict(defended, data.images)
    raw = predict_probs(model, transform(data.images, defended.transform)).argmax(1)
    np.testing.assert_array_equal(labels, np.array(defended.mapping.perm)[raw])
    assert parameter_blob(model) == before


def test_remote_oracle_roundtrip_and_batch_split(model, data):
    client = TestClient(create_app(model, batch_limit=10))
    oracle = RemoteOracle("http://testserver", client=client, batch_limit=64)
    assert oracle.num_classes == 4 and oracle.input_shape == (8, 8, 3)
    assert oracle.batch_limit == 10
    p = oracle.query(data.images[:25])
    np.testing.assert_allclose(p, predict_probs(model, data.images[:25]), atol=1e-6)
    assert oracle.queries == 3


def test_service_validation(model):
    client = TestClient(create_app(model, batch_limit=4))
    ok = client.post("/score", json={"shape": [1, 8, 8, 3], "images": [0.5] * 192})
    assert ok.status_code == 200 and len(ok.json()["probs"][0]) == 4
    assert client.post("/score", json={"shape": [1, 8, 8, 1], "images": [0.5] * 64}).status_code == 422
    assert client.post("/score", json={"shape": [1, 8, 8, 3], "images": [0.5] * 10}).status_code == 422
    assert client.post("/score", json={"shape": [5, 8, 8, 3], "images": [0.5] * 960}).status_code == 413
    assert client.post("/score", json={"shape": [1, 8, 8, 3], "images": [2.0] * 192}).status_code == 422


def test_distillation_loss_is_squared_norm_per_sample(model, data):
    oracle = LocalOracle(model)
    surrogate = build_classifier("convnet", 4, (8, 8, 3), seed=1, widths=(4, 8)).eval()
    p, q = predict_probs(surrogate, data.images), predict_probs(model, data.images)
    expected = sum(sum((a - b) ** 2 for a, b in zip(pi, qi)) for pi, qi in zip(p.tolist(), q.tolist())) / len(p)
    assert distillation_loss(surrogate, oracle, data) == pytest.approx(expected, rel=1e-6)
