import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refinelab.attacks import (
    PoisonPlan,
    TriggerSpec,
    badnets_trigger,
    blend_trigger,
    build_poisoned_dataset,
    inject_trigger,
    poison_test_set,
    rotation_trigger,
    train_adaptive_backdoor,
)
from refinelab.data import LabeledDataset, load_dataset, DatasetDescriptor


@pytest.fixture
def img():
    return np.random.default_rng(0).uniform(0, 1, (32, 32, 3)).astype(np.float32)


def balanced(n_per_class=100, k=10, side=8):
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(k), n_per_class)
    return LabeledDataset(rng.uniform(0, 1, (len(labels), side, side, 3)), labels, k)


def test_white_patch_touches_only_its_region(img):
    trig = TriggerSpec("patch", pattern=np.ones((3, 3, 3)), anchor=(-3, -3))
    out = inject_trigger(img, trig)
    diff = np.any(out != img, axis=2)
    assert diff[:29, :].sum() == 0 and diff[:, :29].sum() == 0
    assert np.all(out[29:, 29:] == 1.0)


def test_patch_out_of_bounds(img):
    with pytest.raises(ValueError, match="does not fit"):
        inject_trigger(img, TriggerSpec("patch", pattern=np.ones((3, 3, 3)), anchor=(30, 30)))


def test_blend_extremes(img):
    pattern = np.random.default_rng(5).uniform(0, 1, img.shape)
    np.testing.assert_array_equal(inject_trigger(img, blend_trigger(ratio=0.0, pattern=pattern)), img)
    np.testing.assert_array_equal(
        inject_trigger(img, blend_trigger(ratio=1.0, pattern=pattern)), pattern.astype(np.float32)
    )


def test_blend_dimension_mismatch(img):
    with pytest.raises(ValueError, match="does not match"):
        inject_trigger(img, blend_trigger(shape=(16, 16, 3)))


def test_rotation_zero_is_identity(img):
    np.testing.assert_array_equal(inject_trigger(img, rotation_trigger(0.0)), img)


def test_rotation_keeps_shape_and_zero_fills_corners(img):
    out = inject_trigger(np.ones_like(img), rotation_trigger(45.0))
    assert out.shape == img.shape
    assert out[0, 0].max() == 0.0 and out[16, 16].min() == pytest.approx(1.0)


def test_invalid_ratio():
    with pytest.raises(ValueError):
        TriggerSpec("blend", pattern=np.zeros((2, 2, 3)), ratio=1.5)


@settings(max_examples=30, deadline=None)
@given(
    variant=st.sampled_from(["patch", "blend", "rotation"]),
    seed=st.integers(0, 10_000),
    ratio=st.floats(0, 1),
    angle=st.floats(-180, 180),
)
def test_injection_preserves_shape_and_range(variant, seed, ratio, angle):
    x = np.random.default_rng(seed).uniform(0, 1, (2, 16, 16, 3)).astype(np.float32)
    trig = {
        "patch": badnets_trigger(seed=seed),
        "blend": blend_trigger(shape=(16, 16, 3), ratio=ratio, seed=seed),
        "rotation": rotation_trigger(angle),
    }[variant]
    out = inject_trigger(x, trig)
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_poisoned_count_and_labels():
    ds = LabeledDataset(np.zeros((5000, 4, 4, 3)), np.arange(5000) % 10, 10)
    pd = build_poisoned_dataset(ds, PoisonPlan(badnets_trigger(), target_label=2, poison_rate=0.1), seed=0)
    assert pd.poisoned.sum() == 500
    assert np.all(pd.labels[pd.poisoned] == 2)
    np.testing.assert_array_equal(pd.labels[~pd.poisoned], ds.labels[~pd.poisoned])
    np.testing.assert_array_equal(pd.images[~pd.poisoned], ds.images[~pd.poisoned])


@pytest.mark.parametrize("rate", [0.0, 0.013, 0.5, 1.0])
def test_poisoned_invariant_exhaustive(rate):
    ds = balanced(20)
    plan = PoisonPlan(badnets_trigger(), target_label=7, poison_rate=rate)
    pd = build_poisoned_dataset(ds, plan, seed=4)
    assert pd.poisoned.sum() == math.ceil(rate * len(ds))
    assert all(pd.labels[i] == 7 for i in range(len(ds)) if pd.poisoned[i])
    if rate == 0.0:
        np.testing.assert_array_equal(pd.images, ds.images)
        np.testing.assert_array_equal(pd.labels, ds.labels)


def test_poisoning_is_seeded():
    ds = balanced(20)
    plan = PoisonPlan(badnets_trigger(), 0, 0.2)
    a, b = build_poisoned_dataset(ds, plan, 3), build_poisoned_dataset(ds, plan, 3)
    np.testing.assert_array_equal(a.poisoned, b.poisoned)
    assert not np.array_equal(a.poisoned, build_poisoned_dataset(ds, plan, 4).poisoned)


def test_bad_rate_and_target():
    with pytest.raises(ValueError):
        PoisonPlan(badnets_trigger(), 0, 1.2)
    with pytest.raises(ValueError):
        build_poisoned_dataset(balanced(2), PoisonPlan(badnets_trigger(), 10, 0.1))


def test_poison_test_set_excludes_target():
    test = balanced(100)
    out = poison_test_set(test, PoisonPlan(badnets_trigger(), target_label=0))
    assert len(out) == 900
    assert not np.any(out.labels == 0)


def test_poison_test_set_all_target_warns():
    only_target = LabeledDataset(np.zeros((5, 8, 8, 3)), np.zeros(5, int), 10)
    with pytest.warns(UserWarning, match="empty"):
        assert poison_test_set(only_target, PoisonPlan(badnets_trigger(), 0)) is None


def test_poison_test_set_rotation():
    test = balanced(3)
    plan = PoisonPlan(rotation_trigger(30.0), target_label=1)
    out = poison_test_set(test, plan)
    keep = test.labels != 1
    np.testing.assert_allclose(out.images, inject_trigger(test.images[keep], plan.trigger))


def test_export_sidecar(tmp_path):
    import json

    ds = balanced(3)
    pd = build_poisoned_dataset(ds, PoisonPlan(badnets_trigger(), 0, 0.2), seed=1)
    root = pd.export(tmp_path / "poisoned")
    side = json.loads((root / "poison_index.json").read_text())
    assert side["poisoned"] == np.flatnonzero(pd.poisoned).tolist()
    assert side["plan"]["target_label"] == 0
    assert TriggerSpec.from_dict(side["plan"]["trigger"]).variant == "patch"


def _adaptive_setup():
    from refinelab.classifier import TrainConfig
    from refinelab.refine import RefineConfig

    rng = np.random.default_rng(0)
    clean = LabeledDataset(rng.uniform(0, 1, (40, 8, 8, 3)), rng.integers(0, 3, 40), 3)
    plan = PoisonPlan(badnets_trigger(seed=0), target_label=0, poison_rate=0.2)
    tcfg = TrainConfig(epochs=2, batch_size=8, lr=0.05, decay_epochs=[1])
    rcfg = RefineConfig(epochs=1, batch_size=8, decay_epochs=[], width=2, depth=1, optimizer="adam", lr=1e-3)
    return clean, plan, tcfg, rcfg


def test_adaptive_gamma_zero_matches_plain_training():
    from refinelab.classifier import parameter_blob, train_classifier

    clean, plan, tcfg, rcfg = _adaptive_setup()
    adaptive = train_adaptive_backdoor(clean, plan, 0.0, rcfg, tcfg, "convnet", widths=(4,))
    plain = train_classifier(build_poisoned_dataset(clean, plan, seed=0), tcfg, "convnet", widths=(4,))
    assert parameter_blob(adaptive) == parameter_blob(plain)


def test_adaptive_loss_decomposition():
    clean, plan, tcfg, rcfg = _adaptive_setup()
    gamma = 0.7
    model = train_adaptive_backdoor(clean, plan, gamma, rcfg, tcfg, "convnet", inner_steps=2, widths=(4,))
    assert len(model.history) == 2
    for h in model.history:
        assert abs(h["L_adap"] - (h["L_b"] + gamma * h["L_refine"])) <= 1e-6 * max(1.0, abs(h["L_adap"]))
        assert h["L_refine"] > 0


def test_adaptive_rejects_negative_gamma():
    clean, plan, tcfg, rcfg = _adaptive_setup()
    with pytest.raises(ValueError):
        train_adaptive_backdoor(clean, plan, -0.1, rcfg, tcfg, "convnet", widths=(4,))
