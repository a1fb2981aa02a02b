import numpy as np
import pytest

from cdp_authkit.attack import (
    AttackConfig,
    EstimatorKind,
    attack_dataset,
    bit_error_rate,
    estimate_template,
    fabricate_fake,
    otsu_threshold,
)
from cdp_authkit.channel import IDENTITY, PRESETS, print_code
from cdp_authkit.core import DegenerateInputError, ParameterError, PrintedCode, generate_template, mse


def test_identity_channel_inverts_exactly():
    t = generate_template(0, 16, 16)
    x = print_code(t, IDENTITY)
    cfg = AttackConfig(EstimatorKind.FIXED_THRESHOLD, IDENTITY, threshold=0.5)
    assert np.array_equal(estimate_template(x, cfg).pixels, t.pixels)


def test_constant_probe_is_degenerate():
    x = PrintedCode(np.full((8, 8), 0.5), id=0)
    with pytest.raises(DegenerateInputError):
        estimate_template(x, AttackConfig(EstimatorKind.ADAPTIVE_THRESHOLD, IDENTITY))


def test_threshold_presence_is_checked():
    with pytest.raises(ParameterError):
        AttackConfig(EstimatorKind.FIXED_THRESHOLD, IDENTITY)
    with pytest.raises(ParameterError):
        AttackConfig(EstimatorKind.ADAPTIVE_THRESHOLD, IDENTITY, threshold=0.4)


def test_otsu_splits_bimodal_data(rng):
    lo, hi = rng.normal(0.2, 0.03, 500), rng.normal(0.8, 0.03, 500)
    tau = otsu_threshold(np.concatenate([lo, hi]))
    # any cut inside the gap maximizes the between-class variance
    assert lo.max() <= tau <= hi.min()


def _mean_ber(kind, source):
    errs = []
    for i in range(20):
        t = generate_template(100 + i, 64, 64, id=i)
        x = print_code(t, PRESETS[source], draw=0)
        cfg = AttackConfig(kind, IDENTITY, threshold=0.5 if kind is EstimatorKind.FIXED_THRESHOLD else None)
        errs.append(bit_error_rate(estimate_template(x, cfg, source_blur=PRESETS[source].blur_sigma), t))
    return float(np.mean(errs))


def test_adaptive_beats_fixed_threshold_on_synth76():
    assert _mean_ber(EstimatorKind.ADAPTIVE_THRESHOLD, "synth76") < _mean_ber(EstimatorKind.FIXED_THRESHOLD, "synth76")


def test_fabricated_fakes():
    t = generate_template(1, 16, 16)
    perfect = fabricate_fake(t, IDENTITY)
    assert mse(perfect.pixels, print_code(t, IDENTITY).pixels) == 0.0
    a = fabricate_fake(t, PRESETS["synth55"], draw=0)
    b = fabricate_fake(t, PRESETS["synth55"], draw=1)
    assert not np.array_equal(a.pixels, b.pixels)


def test_four_fake_sets(small_dataset):
    import copy

    ds = copy.deepcopy(small_dataset)
    for a in ("synth55", "synth76"):
        cfg = AttackConfig(EstimatorKind.DECONVOLVE_THEN_THRESHOLD, PRESETS[a])
        for j, s in enumerate(("synth55", "synth76")):
            attack_dataset(ds, cfg, s, draw=2 + j, source_blur=PRESETS[s].blur_sigma)
    assert sorted(ds.fakes) == [(a, s) for a in ("synth55", "synth76") for s in ("synth55", "synth76")]
    assert all(len(v) == len(ds.templates) for v in ds.fakes.values())
