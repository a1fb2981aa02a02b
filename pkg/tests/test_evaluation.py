import copy
import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdp_authkit.core import ConfigurationError, ParameterError
from cdp_authkit.estimator import EstimatorConfig
from cdp_authkit.evaluation import (
    METHODS,
    POOLED,
    ExperimentConfig,
    auc,
    baseline_digital,
    baseline_printed,
    load_report,
    run_experiment,
)
from cdp_authkit.reporting import export_report

from oracles import auc_pairs


def test_auc_examples():
    assert auc([5, 6], [1, 2]) == 1.0
    assert auc([1, 2, 3], [1, 2, 3]) == 0.5
    assert auc([2, 3], [1, 2.5]) == 0.75
    with pytest.raises(ParameterError):
        auc([], [1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=25), st.lists(st.integers(0, 6), min_size=1, max_size=25))
def test_auc_matches_pairwise_oracle(pos, neg):
    assert auc(pos, neg) == pytest.approx(auc_pairs(pos, neg), abs=1e-15)
    assert auc(pos, neg) + auc(neg, pos) == pytest.approx(1.0, abs=1e-15)


@pytest.fixture(scope="module")
def attacked(small_dataset):
    from cdp_authkit.attack import AttackConfig, EstimatorKind, attack_dataset
    from cdp_authkit.channel import PRESETS

    ds = copy.deepcopy(small_dataset)
    attack_dataset(ds, AttackConfig(EstimatorKind.DECONVOLVE_THEN_THRESHOLD, PRESETS["synth55"]), "synth76",
                   source_blur=PRESETS["synth76"].blur_sigma)
    return ds


def test_baselines_identical_fakes_are_chance(attacked):
    ds = copy.deepcopy(attacked)
    key = ("synth55", "synth76")
    ds.fakes[key] = [c for c in ds.originals["synth76"]]
    assert baseline_digital(ds, "synth76", key) == 0.5
    assert baseline_printed(ds, "synth76", key) == 0.5


def test_baselines_on_family_name(attacked):
    for fn in (baseline_digital, baseline_printed):
        assert 0.0 <= fn(attacked, "synth76", "synth55_from_synth76") <= 1.0
    with pytest.raises(ParameterError):
        baseline_digital(attacked, "synth76", "nope_from_nowhere")


def test_enrollment_probe_ranks_most_original(attacked):
    ds = copy.deepcopy(attacked)
    ds.originals["synth76"] = list(ds.enrollment["synth76"])
    assert baseline_printed(ds, "synth76", "synth55_from_synth76") == 1.0


def test_printed_baseline_needs_enrollment(attacked):
    ds = copy.deepcopy(attacked)
    ds.enrollment.clear()
    with pytest.raises(ConfigurationError):
        baseline_printed(ds, "synth76", "synth55_from_synth76")


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig(seeds=[])
    with pytest.raises(ConfigurationError):
        ExperimentConfig(defenders=["laserjet"])
    cfg = ExperimentConfig(codes=30)
    assert ExperimentConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


SMOKE = dict(codes=20, size=32, seeds=[0], estimator=EstimatorConfig(depth=1, base_channels=4, epochs=2))


@pytest.fixture(scope="module")
def smoke_report():
    return run_experiment(ExperimentConfig(**SMOKE))


def test_smoke_report_is_complete(smoke_report):
    rep = smoke_report
    assert not rep.partial
    assert len(rep.families) == 4 and rep.defenders == ["synth55", "synth76"]
    for d in rep.defenders:
        for fam in rep.families + [POOLED]:
            for m in METHODS:
                v = rep.aucs[(d, fam, m)]
                assert len(v) == 1 and 0.0 <= v[0] <= 1.0
        assert rep.calibration_misses[d] == [0]


def test_export_and_reload(tmp_path, smoke_report):
    paths = export_report(smoke_report, tmp_path)
    names = {p.name for p in paths}
    assert {"aucs.csv", "calibration.csv", "report.json", "samples.npz"} <= names
    assert sum(n.startswith("scores_") and n.endswith(".png") for n in names) == 4
    with open(tmp_path / "aucs.csv") as f:
        rows = list(csv.DictReader(f))
    assert rows and all(r["n_seeds"] == "1" for r in rows)
    back = load_report(tmp_path)
    assert back.aucs == smoke_report.aucs
    assert np.array_equal(back.samples["synth55"]["estimate"], smoke_report.samples["synth55"]["estimate"])


def test_two_families_give_two_histograms(tmp_path, smoke_report):
    rep = copy.deepcopy(smoke_report)
    keep = rep.families[:2]
    rep.aucs = {k: v for k, v in rep.aucs.items() if k[1] in keep or k[1] == POOLED}
    rep.fake_rejection = {k: v for k, v in rep.fake_rejection.items() if k[1] in keep}
    paths = export_report(rep, tmp_path)
    assert sorted(p.name for p in paths if p.name.startswith("scores_") and p.suffix == ".png") == \
        sorted(f"scores_{f}.png" for f in keep)


def test_failed_seed_is_recorded(monkeypatch):
    from cdp_authkit import evaluation

    real = evaluation._run_seed

    def flaky(cfg, seed):
        if seed == 1:
            raise RuntimeError("boom")
        return real(cfg, seed)

    monkeypatch.setattr(evaluation, "_run_seed", flaky)
    rep = run_experiment(ExperimentConfig(**{**SMOKE, "seeds": [0, 1]}))
    assert rep.partial and 1 in rep.failures and "boom" in rep.failures[1]
    assert all(len(v) == 1 for v in rep.aucs.values())
