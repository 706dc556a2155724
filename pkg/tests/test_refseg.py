import numpy as np
import pytest

from oracles import central_difference, reference_loss
from promptseg.refseg import (
    ModelFormatError,
    NonFiniteLossError,
    RefModel,
    TrainConfig,
    feature_volume,
    fine_tune,
    init_model,
    load_model,
    loss_and_grads,
    lr_schedule,
    model_from_bytes,
    model_to_bytes,
    predict,
    probability,
    save_model,
    train,
)
from promptseg.synthesis import SynthesisConfig, generate_sample
from promptseg.volume import PhantomSpec, Volume, make_phantom

SMALL = TrainConfig(budget=4, voxels_per_sample=512, seed=3)


@pytest.fixture(scope="module")
def samples():
    cfg = SynthesisConfig.desk()
    out = []
    for k in range(10):
        x, brain = make_phantom(PhantomSpec(dims=(32, 32, 32), seed=100 + k % 4))
        out.append(generate_sample("prompt", x, brain, cfg, 9, k))
    return out


def test_lr_schedule():
    cfg = TrainConfig(budget=10, base_lr=0.01)
    assert lr_schedule(0, cfg) == 0.01
    assert lr_schedule(10, cfg) == 0.0
    assert lr_schedule(5, cfg) == pytest.approx(0.01 * 0.5**0.9)
    lrs = [lr_schedule(t, cfg) for t in range(11)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_schedule(11, cfg)


def test_feature_patches_match_direct_indexing():
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(size=(7, 8, 9)), (1, 1, 1))
    fv = feature_volume(v, None, 1)
    z = (v.data - v.data.mean()) / v.data.std()
    padded = np.pad(z, 1, mode="edge")
    for flat in (0, 100, 503):
        i, j, k = np.unravel_index(flat, v.dims)
        expected = padded[i : i + 3, j : j + 3, k : k + 3].ravel()
        assert np.allclose(fv.patches(np.array([flat]))[0], expected)


def test_loss_matches_reference():
    rng = np.random.default_rng(1)
    m = init_model(TrainConfig(seed=2))
    x = rng.normal(size=(40, 125))
    y = (rng.random(40) < 0.3).astype(float)
    loss, _ = loss_and_grads({k: v.copy() for k, v in m.params().items()}, x, y)
    assert loss == pytest.approx(reference_loss(m.w1, m.w2, x, y), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_gradient_check(seed):
    rng = np.random.default_rng(seed)
    params = {k: v.copy() for k, v in init_model(TrainConfig(seed=seed)).params().items()}
    params["w1"] += rng.normal(0, 0.1, params["w1"].shape)
    params["w2"] += rng.normal(0, 0.5, params["w2"].shape)
    x = rng.normal(size=(32, 125))
    y = (rng.random(32) < 0.5).astype(float)
    _, grads = loss_and_grads(params, x, y)
    num = central_difference(lambda p: reference_loss(p["w1"], p["w2"], x, y), params)
    for k in params:
        rel = np.linalg.norm(grads[k] - num[k]) / max(np.linalg.norm(num[k]), 1e-12)
        assert rel <= 1e-3, (k, rel)


def test_zero_label_model_predicts_empty(small_phantom):
    x, brain = small_phantom
    m = init_model(TrainConfig())
    w2 = np.zeros_like(m.w2)
    w2[-1] = -20.0  # constant logit far below zero
    model = RefModel(m.radius, m.w1, w2)
    assert predict(model, x, brain).count == 0
    p = probability(model, x, brain)
    assert p.data.max() < 1e-8


def test_threshold_one_gives_empty(small_phantom):
    x, brain = small_phantom
    assert predict(init_model(TrainConfig()), x, brain, 1.0).count == 0


def test_prediction_inside_brain(small_phantom):
    x, brain = small_phantom
    m = init_model(TrainConfig())
    w2 = np.zeros_like(m.w2)
    w2[-1] = 20.0
    pred = predict(RefModel(m.radius, m.w1, w2), x, brain)
    assert np.array_equal(pred.data, brain.data)


def test_training_determinism(samples):
    a = train(samples, SMALL).model
    b = train(samples, SMALL).model
    assert model_to_bytes(a) == model_to_bytes(b)
    c = train(samples, TrainConfig(budget=4, voxels_per_sample=512, seed=4)).model
    assert model_to_bytes(a) != model_to_bytes(c)


def test_loss_decreases_and_curve(samples):
    cfg = TrainConfig(budget=10, voxels_per_sample=1024, seed=0)
    calls = []

    def hook(model, epoch):
        calls.append(epoch)
        return 0.5

    r = train(samples, cfg, hook)
    assert calls == list(range(1, 11))
    assert r.curve.budget == 10 and r.curve.epochs == tuple(range(1, 11))
    assert np.mean(r.losses[-3:]) < 0.7 * np.mean(r.losses[:2])


def test_empty_training_set():
    with pytest.raises(ValueError):
        train([], SMALL)


def test_non_finite_loss(samples):
    bad = RefModel(2, np.full((16, 126), 1e300), np.full(17, 1e308))
    with pytest.raises(NonFiniteLossError), np.errstate(over="ignore", invalid="ignore"):
        train(samples[:1], SMALL, init=bad)


def test_fine_tune(samples):
    base = train(samples, SMALL).model
    same = fine_tune(base, samples, TrainConfig(fine_tune_epochs=0))
    assert same is base
    tuned = fine_tune(base, samples[:3], TrainConfig(fine_tune_epochs=2, voxels_per_sample=256))
    assert model_to_bytes(tuned) != model_to_bytes(base)


def test_checkpoint_round_trip(tmp_path, samples):
    m = train(samples[:2], SMALL).model
    save_model(m, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    assert np.array_equal(back.w1, m.w1) and np.array_equal(back.w2, m.w2)
    assert (tmp_path / "m.bin").stat().st_size == 24 + 8 * (16 * 126 + 17)


def test_checkpoint_errors():
    buf = model_to_bytes(init_model(TrainConfig()))
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"X" + buf[1:])
    with pytest.raises(ModelFormatError):
        model_from_bytes(buf[:-8])


def test_learns_lesions(samples):
    """A few epochs suffice to find synthetic hyper-intensities on training data."""
    model = train(samples, TrainConfig(budget=8, voxels_per_sample=1024, seed=1)).model
    s = samples[0]
    pred = predict(model, s.image, s.brain)
    inter = np.count_nonzero(pred.data & s.mask.data)
    assert 2 * inter / (pred.count + s.mask.count) > 0.4


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(budget=0)
    with pytest.raises(ValueError):
        TrainConfig(class_ratio=(0, 1))
