"""AUC metrics, MSE baselines and the seeded experiment grid."""
from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from ._accel import worker_threads
from .attack import AttackConfig, EstimatorKind, attack_dataset
from .auth import (
    Aggregation,
    ConfidenceSpec,
    PhiKind,
    anomaly_map_arrays,
    calibrate_threshold,
    phi,
    scores_batch,
)
from .channel import (
    PRESETS,
    ChannelParams,
    PairedDataset,
    channel_for,
    derive_seed,
    family_name,
    load_dataset,
    preset,
    synthesize_dataset,
)
from .core import ConfigurationError, ParameterError
from .estimator import EstimatorConfig, agreement_weights, histogram_from_weights, predict_batch, train_estimator

log = logging.getLogger(__name__)

METHODS = ("mse_t", "mse_x", "proposed_noC", "proposed_C")
POOLED = "all"


# ------------------------------------------------------------------ metrics


def auc(positive_scores, negative_scores) -> float:
    """P(random positive outranks random negative), ties count one half."""
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    neg = np.asarray(negative_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ParameterError("auc needs non-empty positive and negative score lists")
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(neg))):
        raise ParameterError("auc scores must be finite")
    wins, ties = kernels.pair_counts(pos, neg)
    return (2 * wins + ties) / (2.0 * pos.size * neg.size)


def _family_key(dataset: PairedDataset, fake_family) -> tuple[str, str]:
    if isinstance(fake_family, tuple):
        key = fake_family
    else:
        key = next((k for k in dataset.fakes if family_name(*k) == fake_family), None)
    if key is None or key not in dataset.fakes:
        raise ParameterError(f"dataset has no fake family {fake_family!r}; have "
                             f"{sorted(family_name(*k) for k in dataset.fakes)}")
    return key


def _aligned(dataset, defender, fake_family, ids):
    if defender not in dataset.originals:
        raise ParameterError(f"dataset has no originals for printer {defender!r}")
    key = _family_key(dataset, fake_family)
    orig = {c.id: c for c in dataset.originals[defender]}
    fake = {c.id: c for c in dataset.fakes[key]}
    wanted = ids if ids is not None else [t.id for t in dataset.templates]
    return [i for i in wanted if i in orig and i in fake], orig, fake


def baseline_digital(dataset: PairedDataset, defender: str, fake_family, ids=None) -> float:
    """AUC of mse(1 - t, y): probes scored against their rendered template."""
    use, orig, fake = _aligned(dataset, defender, fake_family, ids)
    refl = {i: dataset.template_by_id(i).reflectance() for i in use}
    neg = [np.mean((refl[i] - orig[i].pixels) ** 2) for i in use]
    pos = [np.mean((refl[i] - fake[i].pixels) ** 2) for i in use]
    return auc(pos, neg)


def baseline_printed(dataset: PairedDataset, defender: str, fake_family, ids=None) -> float:
    """AUC of mse(enrolled print, y)."""
    if defender not in dataset.enrollment:
        raise ConfigurationError(f"no enrollment prints for printer {defender!r}; "
                                 "the printed-template baseline needs an enrollment set")
    use, orig, fake = _aligned(dataset, defender, fake_family, ids)
    enr = {c.id: c.pixels for c in dataset.enrollment[defender]}
    neg = [np.mean((enr[i] - orig[i].pixels) ** 2) for i in use]
    pos = [np.mean((enr[i] - fake[i].pixels) ** 2) for i in use]
    return auc(pos, neg)


# ------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    # synthetic source; ignored when ``manifest`` is set
    codes: int = 200
    size: int = 64
    density: float = 0.5
    defenders: list[str] = field(default_factory=lambda: ["synth55", "synth76"])
    manifest: str | None = None
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    attacks: list[dict] = field(default_factory=lambda: [
        {"estimator_kind": "deconvolve_then_threshold", "attacker": "synth55"},
        {"estimator_kind": "deconvolve_then_threshold", "attacker": "synth76"},
    ])
    confidence: ConfidenceSpec = field(default_factory=ConfidenceSpec)
    aggregation: Aggregation = Aggregation.SUM
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str | None = None
    panel_crop: int = 30

    def __post_init__(self):
        if isinstance(self.estimator, dict):
            self.estimator = EstimatorConfig.from_dict(self.estimator)
        if isinstance(self.confidence, dict):
            self.confidence = ConfidenceSpec(**self.confidence)
        self.aggregation = Aggregation(self.aggregation)
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.manifest is None:
            for d in self.defenders:
                if d not in PRESETS:
                    raise ConfigurationError(f"unknown defender preset {d!r}")
            if self.codes < 10:
                raise ConfigurationError("need at least 10 codes to train a print estimator")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aggregation"] = self.aggregation.value
        d["confidence"]["phi_kind"] = self.confidence.phi_kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# ------------------------------------------------------------------- report


@dataclass
class EvalReport:
    seeds: list[int]
    aucs: dict[tuple[str, str, str], list[float]] = field(default_factory=dict)
    gammas: dict[str, list[float]] = field(default_factory=dict)
    taus: dict[str, list[float]] = field(default_factory=dict)
    retained: dict[str, list[float]] = field(default_factory=dict)
    calibration_misses: dict[str, list[int]] = field(default_factory=dict)
    false_rejection: dict[str, list[float]] = field(default_factory=dict)
    fake_rejection: dict[tuple[str, str], list[float]] = field(default_factory=dict)
    scores: list[dict] = field(default_factory=list)
    weight_hist: dict[str, list[int]] = field(default_factory=dict)
    samples: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    failures: dict[int, str] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    @property
    def families(self) -> list[str]:
        return sorted({f for (_, f, _) in self.aucs if f != POOLED})

    @property
    def defenders(self) -> list[str]:
        return sorted({d for (d, _, _) in self.aucs})

    def mean_auc(self, defender: str, family: str, method: str) -> float:
        return float(np.mean(self.aucs[(defender, family, method)]))

    def to_json(self) -> dict:
        def keyed(d):
            return {"|".join(k) if isinstance(k, tuple) else str(k): v for k, v in d.items()}

        return {
            "seeds": self.seeds,
            "aucs": keyed(self.aucs),
            "gammas": self.gammas,
            "taus": self.taus,
            "retained": self.retained,
            "calibration_misses": self.calibration_misses,
            "false_rejection": self.false_rejection,
            "fake_rejection": keyed(self.fake_rejection),
            "scores": self.scores,
            "weight_hist": self.weight_hist,
            "failures": keyed(self.failures),
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, d: dict, samples: dict | None = None) -> "EvalReport":
        def unkey(m):
            return {tuple(k.split("|")): v for k, v in m.items()}

        return cls(
            seeds=d["seeds"],
            aucs=unkey(d["aucs"]),
            gammas=d["gammas"],
            taus=d["taus"],
            retained=d["retained"],
            calibration_misses=d["calibration_misses"],
            false_rejection=d["false_rejection"],
            fake_rejection=unkey(d["fake_rejection"]),
            scores=d["scores"],
            weight_hist=d["weight_hist"],
            samples=samples or {},
            failures={int(k): v for k, v in d["failures"].items()},
            provenance=d["provenance"],
        )


# --------------------------------------------------------------- experiment


def _prepare_dataset(cfg: ExperimentConfig, seed: int) -> PairedDataset:
    if cfg.manifest is not None:
        ds = load_dataset(cfg.manifest)
    else:
        ds = synthesize_dataset(cfg.codes, cfg.size, cfg.size, cfg.density,
                                [preset(d) for d in cfg.defenders], seed=seed)
    if ds.fakes:
        return ds
    for a in cfg.attacks:
        attacker = replace(preset(a["attacker"]), seed=derive_seed("attacker", seed, a["attacker"]))
        kind = EstimatorKind(a.get("estimator_kind", "deconvolve_then_threshold"))
        acfg = AttackConfig(kind, attacker, threshold=a.get("threshold"),
                            assumed_blur_sigma=a.get("assumed_blur_sigma"),
                            blur_knowledge=a.get("blur_knowledge", 0.8))
        for j, source in enumerate(sorted(ds.originals)):
            ch = channel_for(ds, source)
            attack_dataset(ds, acfg, source, draw=2 + j, source_blur=ch.blur_sigma if ch else None)
    return ds


def _defenders(cfg: ExperimentConfig, ds: PairedDataset) -> list[str]:
    if cfg.manifest is None:
        return list(cfg.defenders)
    wanted = [d for d in cfg.defenders if d in ds.originals]
    return wanted or sorted(ds.originals)


def _crop(a: np.ndarray, n: int) -> np.ndarray:
    return a[:n, :n]


def _run_seed(cfg: ExperimentConfig, seed: int) -> dict:
    ds = _prepare_dataset(cfg, seed)
    fingerprint = ds.fingerprint()
    out = {"seed": seed, "fingerprint": fingerprint, "defenders": {}}
    ids = ds.ids
    refl = np.stack([t.reflectance() for t in ds.templates])
    families = {family_name(*k): k for k in sorted(ds.fakes)}

    for d in _defenders(cfg, ds):
        est_cfg = replace(cfg.estimator, seed=derive_seed("estimator", seed, cfg.estimator.seed, d))
        ckpt = train_estimator(ds, d, est_cfg)
        pos = {i: k for k, i in enumerate(ids)}
        test = [pos[i] for i in ckpt.splits["test"]]
        calib = [pos[i] for i in ckpt.splits["train"] + ckpt.splits["val"]]
        train = [pos[i] for i in ckpt.splits["train"]]

        est = predict_batch(ckpt, ds.templates)
        weights = agreement_weights(refl, est)
        hist = histogram_from_weights(weights[train])
        spec = cfg.confidence
        if spec.phi_kind is PhiKind.HARD_THRESHOLD and spec.tau is None:
            spec = replace(spec, tau=hist.tau_for_retention(spec.target_retention), target_retention=None)
        conf = phi(weights, spec)
        tau = spec.tau if spec.phi_kind is PhiKind.HARD_THRESHOLD else float("nan")
        retained = float(np.mean(conf[train] > 0))
        ones = np.ones_like(conf)

        def stack(codes):
            m = {c.id: c.pixels for c in codes}
            return np.stack([m[i] for i in ids])

        originals = stack(ds.originals[d])
        enrolled = stack(ds.enrollment[d]) if d in ds.enrollment else None

        def method_scores(probes, rows):
            s = {
                "mse_t": np.mean((refl[rows] - probes) ** 2, axis=(1, 2)),
                "proposed_noC": scores_batch(est[rows], probes, ones[rows], cfg.aggregation),
                "proposed_C": scores_batch(est[rows], probes, conf[rows], cfg.aggregation),
            }
            if enrolled is not None:
                s["mse_x"] = np.mean((enrolled[rows] - probes) ** 2, axis=(1, 2))
            return s

        orig_test = method_scores(originals[test], test)
        orig_calib = method_scores(originals[calib], calib)
        gamma = calibrate_threshold(orig_calib["proposed_C"])
        res = {
            "tau": tau,
            "retained": retained,
            "gamma": gamma,
            "calibration_misses": int(np.sum(orig_calib["proposed_C"] > gamma)),
            "false_rejection": float(np.mean(orig_test["proposed_C"] > gamma)),
            "aucs": {},
            "fake_rejection": {},
            "scores": [],
            "weight_hist": hist.counts.tolist() if len(train) <= 100 else
            histogram_from_weights(weights[train[:100]]).counts.tolist(),
        }
        for k, i in enumerate(test):
            res["scores"].append({"family": "original", "id": ids[i],
                                  **{m: float(v[k]) for m, v in orig_test.items()}})

        pooled = {m: [] for m in orig_test}
        fake_probe_maps = {}
        for fam, key in families.items():
            fakes = stack(ds.fakes[key])[test]
            fs = method_scores(fakes, test)
            for m, v in fs.items():
                res["aucs"][(fam, m)] = auc(v, orig_test[m])
                pooled[m].append(v)
            res["fake_rejection"][fam] = float(np.mean(fs["proposed_C"] > gamma))
            for k, i in enumerate(test):
                res["scores"].append({"family": fam, "id": ids[i], **{m: float(v[k]) for m, v in fs.items()}})
            fake_probe_maps[fam] = fakes[0]
        for m, v in pooled.items():
            res["aucs"][(POOLED, m)] = auc(np.concatenate(v), orig_test[m])

        # one test code, cropped, for the side-by-side panel
        i0 = test[0]
        n = cfg.panel_crop
        probes = {"original": originals[i0], **fake_probe_maps}
        res["sample"] = {
            "template": _crop(ds.templates[i0].pixels.astype(np.float64), n),
            "estimate": _crop(est[i0], n),
            "confidence": _crop(conf[i0], n),
            **{f"probe:{k}": _crop(v, n) for k, v in probes.items()},
            **{f"map:{k}": _crop(anomaly_map_arrays(est[i0], v, conf[i0]), n) for k, v in probes.items()},
        }
        out["defenders"][d] = res
    return out


def run_experiment(cfg: ExperimentConfig) -> EvalReport:
    """Train, attack, score and calibrate for every seed; merge in seed order."""
    def guarded(seed):
        try:
            return _run_seed(cfg, seed)
        except Exception as exc:  # a failing seed must not sink the grid
            log.error("seed %d failed: %s", seed, exc)
            return {"seed": seed, "error": f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"}

    workers = min(worker_threads(), len(cfg.seeds))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(guarded, cfg.seeds))
    else:
        results = [guarded(s) for s in cfg.seeds]

    report = EvalReport(seeds=list(cfg.seeds), provenance={"config": cfg.to_dict(), "fingerprints": {},
                                                           "backend": kernels.BACKEND})
    for r in results:
        seed = r["seed"]
        if "error" in r:
            report.failures[seed] = r["error"]
            continue
        report.provenance["fingerprints"][str(seed)] = r["fingerprint"]
        for d, res in r["defenders"].items():
            for (fam, m), v in res["aucs"].items():
                report.aucs.setdefault((d, fam, m), []).append(v)
            report.gammas.setdefault(d, []).append(res["gamma"])
            report.taus.setdefault(d, []).append(res["tau"])
            report.retained.setdefault(d, []).append(res["retained"])
            report.calibration_misses.setdefault(d, []).append(res["calibration_misses"])
            report.false_rejection.setdefault(d, []).append(res["false_rejection"])
            for fam, v in res["fake_rejection"].items():
                report.fake_rejection.setdefault((d, fam), []).append(v)
            report.scores.extend({"seed": seed, "defender": d, **row} for row in res["scores"])
            if d not in report.weight_hist:
                report.weight_hist[d] = res["weight_hist"]
                report.samples[d] = res["sample"]
    if cfg.output_dir:
        from .reporting import export_report

        export_report(report, cfg.output_dir)
    return report


def load_report(directory) -> EvalReport:
    directory = Path(directory)
    path = directory / "report.json"
    if not path.is_file():
        raise ConfigurationError(f"no report.json in {directory}; run `evaluate` first")
    data = json.loads(path.read_text(encoding="utf-8"))
    samples = {}
    npz = directory / "samples.npz"
    if npz.is_file():
        with np.load(npz) as z:
            for key in z.files:
                d, name = key.split("/", 1)
                samples.setdefault(d, {})[name] = z[key]
    return EvalReport.from_json(data, samples)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
