import numpy as np
import pytest

from cdp_authkit.core import generate_template
from cdp_authkit.estimator import (
    CheckpointError,
    EstimatorConfig,
    TrainingError,
    agreement_weights,
    histogram_from_weights,
    load_checkpoint,
    predict,
    predict_batch,
    residual_histogram,
    save_checkpoint,
    split_ids,
    train_estimator,
)

from oracles import grad_check


def test_gradient_check():
    err, n = grad_check()
    assert n >= 100 and err < 1e-4


def test_split_is_deterministic_and_disjoint():
    ids = list(range(50))
    s = split_ids(ids, (0.6, 0.1, 0.3), seed=2)
    assert s == split_ids(ids, (0.6, 0.1, 0.3), seed=2)
    assert sorted(s["train"] + s["val"] + s["test"]) == ids
    assert (len(s["train"]), len(s["val"]), len(s["test"])) == (30, 5, 15)


def test_training_is_deterministic(small_dataset, small_ckpt):
    cfg = EstimatorConfig(depth=1, base_channels=4, epochs=3, batch_size=4, seed=1)
    again = train_estimator(small_dataset, "synth76", cfg)
    assert again.train_history == small_ckpt.train_history
    t = small_dataset.templates[:3]
    assert np.array_equal(predict_batch(again, t), predict_batch(small_ckpt, t))


def test_training_reduces_loss(small_ckpt):
    h = small_ckpt.train_history
    assert h[-1][1] < h[0][1]


def test_too_few_pairs(small_dataset):
    import copy

    ds = copy.deepcopy(small_dataset)
    ds.originals["synth76"] = ds.originals["synth76"][:5]
    with pytest.raises(TrainingError):
        train_estimator(ds, "synth76", EstimatorConfig(epochs=1))


def test_divergence_reports_epoch(small_dataset, monkeypatch):
    from cdp_authkit import estimator

    monkeypatch.setattr(estimator, "mse_loss", lambda p, t: (float("nan"), np.zeros_like(p)))
    with pytest.raises(TrainingError, match="epoch"):
        train_estimator(small_dataset, "synth76", EstimatorConfig(depth=1, base_channels=4, epochs=2))


def test_predict_range_and_determinism(small_ckpt):
    t = generate_template(9, 16, 16)
    a, b = predict(small_ckpt, t), predict(small_ckpt, t)
    assert np.array_equal(a.pixels, b.pixels)
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1


def test_predict_handles_odd_sizes(small_ckpt):
    out = predict(small_ckpt, generate_template(9, 13, 11))
    assert out.shape == (13, 11)


def test_perfect_predictor_histogram():
    t = generate_template(0, 8, 8).reflectance()
    h = histogram_from_weights(agreement_weights(t, t))
    assert h.counts[-1] == h.counts.sum()
    assert h.retained_fraction(1.0) == 1.0 and h.retained_fraction(0.3) == 1.0


def test_retained_fraction_monotone(small_ckpt, small_dataset):
    h = residual_histogram(small_ckpt, small_dataset.templates)
    fr = [h.retained_fraction(tau) for tau in np.linspace(0, 1, 51)]
    assert all(a >= b for a, b in zip(fr, fr[1:]))
    assert fr[0] == 1.0


def test_tau_for_retention_hits_target(rng):
    h = histogram_from_weights(rng.beta(5, 2, 10_000))
    for target in (0.1, 0.42, 0.9):
        assert abs(h.retained_fraction(h.tau_for_retention(target)) - target) < 1e-3


def test_checkpoint_round_trip(tmp_path, small_ckpt, small_dataset):
    p = save_checkpoint(small_ckpt, tmp_path / "m.ckpt")
    back = load_checkpoint(p)
    t = small_dataset.templates[:5]
    assert np.array_equal(predict_batch(back, t), predict_batch(small_ckpt, t))
    assert back.train_history == small_ckpt.train_history and back.config == small_ckpt.config
    assert back.splits == small_ckpt.splits


def test_checkpoint_corruption(tmp_path, small_ckpt):
    p = save_checkpoint(small_ckpt, tmp_path / "m.ckpt")
    data = p.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(data[:-7])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "magic.ckpt")
    bumped = bytearray(data)
    bumped[8] = 99
    (tmp_path / "ver.ckpt").write_bytes(bytes(bumped))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.ckpt")
