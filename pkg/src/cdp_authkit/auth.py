"""Confidence maps, anomaly maps/scores, threshold calibration and decisions.

The array-level functions (``*_arrays``) take the template already rendered
in print intensity, so they apply the formulas verbatim:

    C = phi(1 - |template - estimate|)
    A = C * (estimate - probe) ** 2
    score = s(A)

The template-level wrappers render ``t`` as ``1 - t`` (ink dark) first.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import DegenerateInputError, DigitalTemplate, ParameterError, PrintedCode, save_gray_png
from .estimator import ModelCheckpoint, agreement_weights, predict_batch, residual_histogram

# Hand-picked cuts for the noisier / cleaner defender printers.
REFERENCE_TAU = {"synth55": 0.87, "synth76": 0.92}
DEFAULT_RETENTION = 0.42


class PhiKind(str, enum.Enum):
    HARD_THRESHOLD = "hard_threshold"
    EXPONENTIAL = "exponential"
    IDENTITY = "identity"


class Aggregation(str, enum.Enum):
    SUM = "sum"
    L1_NORM = "l1_norm"
    L2_NORM = "l2_norm"
    MEAN = "mean"
    # mean over pixels with C > 0; needs the confidence map
    RETAINED_MEAN = "retained_mean"


class Decision(str, enum.Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    UNDECIDED = "undecided"


@dataclass(frozen=True)
class ConfidenceSpec:
    phi_kind: PhiKind = PhiKind.HARD_THRESHOLD
    tau: float | None = None
    gamma_exp: float = 5.0
    # defaults to DEFAULT_RETENTION when a hard threshold gets neither knob
    target_retention: float | None = None
    binary_mask: bool = False

    def __post_init__(self):
        object.__setattr__(self, "phi_kind", PhiKind(self.phi_kind))
        if self.phi_kind is PhiKind.HARD_THRESHOLD:
            if self.tau is None and self.target_retention is None:
                object.__setattr__(self, "target_retention", DEFAULT_RETENTION)
            elif self.tau is not None and self.target_retention is not None:
                raise ParameterError("hard_threshold takes either tau or target_retention, not both")
        if self.tau is not None and not 0.0 <= self.tau <= 1.0:
            raise ParameterError(f"tau must lie in [0, 1], got {self.tau}")
        if self.target_retention is not None and not 0.0 < self.target_retention < 1.0:
            raise ParameterError(f"target_retention must lie in (0, 1), got {self.target_retention}")
        if not self.gamma_exp > 0:
            raise ParameterError(f"gamma_exp must be > 0, got {self.gamma_exp}")
        if self.phi_kind is PhiKind.HARD_THRESHOLD:
            if self.binary_mask and self.tau == 0.0:
                raise ParameterError("binary mask with tau = 0 breaks phi(0) = 0")

    @property
    def resolved(self) -> bool:
        return self.phi_kind is not PhiKind.HARD_THRESHOLD or self.tau is not None

    @classmethod
    def with_tau(cls, tau: float, **kw) -> "ConfidenceSpec":
        return cls(tau=tau, **kw)


NO_CONFIDENCE = None  # pass as spec to disable weighting (C = 1)


def phi(w: np.ndarray, spec: ConfidenceSpec) -> np.ndarray:
    """Increasing map [0,1] -> [0,1] with phi(0) = 0, phi(1) = 1."""
    w = np.clip(np.asarray(w, dtype=np.float64), 0.0, 1.0)
    kind = spec.phi_kind
    if kind is PhiKind.IDENTITY:
        return w
    if kind is PhiKind.EXPONENTIAL:
        g = spec.gamma_exp
        return np.expm1(g * w) / np.expm1(g)
    if spec.tau is None:
        raise ParameterError("hard_threshold spec has no tau; resolve it from a residual histogram first")
    keep = w >= spec.tau
    if spec.binary_mask:
        return keep.astype(np.float64)
    return np.where(keep, w, 0.0)


def resolve_spec(spec: ConfidenceSpec, ckpt: ModelCheckpoint, templates: list[DigitalTemplate]) -> ConfidenceSpec:
    """Fix tau from the residual weights of ``templates`` when only a retention target is set."""
    if spec is None or spec.resolved:
        return spec
    hist = residual_histogram(ckpt, templates)
    return replace(spec, tau=hist.tau_for_retention(spec.target_retention), target_retention=None)


# ------------------------------------------------------------ array level


def confidence_arrays(template_img, estimate, spec: ConfidenceSpec | None) -> np.ndarray:
    if spec is None:
        return np.ones(np.shape(estimate))
    return phi(agreement_weights(template_img, estimate), spec)


def anomaly_map_arrays(estimate, probe, confidence) -> np.ndarray:
    estimate = np.asarray(estimate, dtype=np.float64)
    probe = np.asarray(probe, dtype=np.float64)
    if estimate.shape != probe.shape or np.shape(confidence) != estimate.shape:
        raise ParameterError(f"shape mismatch: estimate {estimate.shape}, probe {probe.shape}, "
                             f"confidence {np.shape(confidence)}")
    return np.asarray(confidence, dtype=np.float64) * (estimate - probe) ** 2


def anomaly_score(a_map, agg: Aggregation | str = Aggregation.SUM, confidence=None) -> float:
    a = np.asarray(a_map, dtype=np.float64)
    agg = Aggregation(agg)
    if agg in (Aggregation.SUM, Aggregation.L1_NORM):
        # l1 equals the sum for non-negative maps; abs keeps it honest for arbitrary input
        return float(np.sum(a) if agg is Aggregation.SUM else np.sum(np.abs(a)))
    if agg is Aggregation.L2_NORM:
        return float(np.sqrt(np.sum(a * a)))
    if agg is Aggregation.MEAN:
        return float(np.mean(a))
    if confidence is None:
        raise ParameterError("retained_mean aggregation needs the confidence map")
    kept = np.asarray(confidence) > 0
    n = int(kept.sum())
    return float(a[kept].sum() / n) if n else 0.0


def scores_batch(estimates, probes, confidence, agg: Aggregation | str = Aggregation.SUM) -> np.ndarray:
    """Vectorised anomaly scores for stacks of (N, H, W) arrays."""
    maps = confidence * (estimates - probes) ** 2
    agg = Aggregation(agg)
    flat = maps.reshape(len(maps), -1)
    if agg in (Aggregation.SUM, Aggregation.L1_NORM):
        return flat.sum(axis=1)
    if agg is Aggregation.L2_NORM:
        return np.sqrt((flat * flat).sum(axis=1))
    if agg is Aggregation.MEAN:
        return flat.mean(axis=1)
    kept = (confidence > 0).reshape(len(maps), -1).sum(axis=1)
    return np.divide(flat.sum(axis=1), kept, out=np.zeros(len(maps)), where=kept > 0)


# --------------------------------------------------------- template level


def confidence_map(t: DigitalTemplate, ckpt: ModelCheckpoint, spec: ConfidenceSpec | None) -> np.ndarray:
    est = predict_batch(ckpt, [t])[0]
    return confidence_arrays(t.reflectance(), est, spec)


def anomaly_map(t: DigitalTemplate, y: PrintedCode, ckpt: ModelCheckpoint, spec: ConfidenceSpec | None) -> np.ndarray:
    if y.shape != t.shape:
        raise ParameterError(f"probe shape {y.shape} does not match template shape {t.shape}")
    est = predict_batch(ckpt, [t])[0]
    return anomaly_map_arrays(est, y.pixels, confidence_arrays(t.reflectance(), est, spec))


def calibrate_threshold(original_scores) -> float:
    """Largest calibration score; no calibration original lands above it."""
    scores = np.asarray(list(original_scores), dtype=np.float64)
    if scores.size == 0:
        raise ParameterError("need at least one calibration score")
    if not np.all(np.isfinite(scores)):
        raise ParameterError("calibration scores must be finite")
    return float(scores.max())


def decide(score: float, gamma: float | None) -> Decision:
    if gamma is None:
        return Decision.UNDECIDED
    return Decision.REJECT if score > gamma else Decision.ACCEPT


def match_template(y: PrintedCode, templates: list[DigitalTemplate], metric: str = "pearson") -> int:
    """Id of the template that best explains ``y``; ties go to the lowest id."""
    if not templates:
        raise ParameterError("need at least one candidate template")
    probe_ink = 1.0 - y.pixels
    if float(probe_ink.max() - probe_ink.min()) == 0.0:
        raise DegenerateInputError("cannot match a constant probe")
    cands = sorted(templates, key=lambda t: t.id)
    if any(t.shape != y.shape for t in cands):
        raise ParameterError("all candidate templates must have the probe's shape")
    stack = np.stack([t.pixels.reshape(-1) for t in cands]).astype(np.float64)
    if metric == "mse":
        score = -np.mean((stack - probe_ink.reshape(-1)) ** 2, axis=1)
    elif metric == "pearson":
        p = probe_ink.reshape(-1) - probe_ink.mean()
        c = stack - stack.mean(axis=1, keepdims=True)
        norms = np.sqrt((c * c).sum(axis=1)) * np.sqrt(p @ p)
        with np.errstate(invalid="ignore", divide="ignore"):
            score = np.where(norms > 0, (c @ p) / norms, -np.inf)
    else:
        raise ParameterError(f"unknown matching metric {metric!r}")
    return cands[int(np.argmax(score))].id


@dataclass
class AnomalyReport:
    map: np.ndarray
    score: float
    threshold_used: float | None
    decision: Decision
    matched_template_id: int

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "threshold": self.threshold_used,
            "decision": self.decision.value,
            "matched_template_id": self.matched_template_id,
            "shape": list(self.map.shape),
            "map_max": float(self.map.max()) if self.map.size else 0.0,
        }


def authenticate(
    y: PrintedCode,
    templates: list[DigitalTemplate],
    ckpt: ModelCheckpoint,
    spec: ConfidenceSpec | None,
    agg: Aggregation | str = Aggregation.SUM,
    gamma: float | None = None,
) -> AnomalyReport:
    code_id = match_template(y, templates)
    t = next(t for t in templates if t.id == code_id)
    est = predict_batch(ckpt, [t])[0]
    conf = confidence_arrays(t.reflectance(), est, spec)
    a = anomaly_map_arrays(est, y.pixels, conf)
    score = anomaly_score(a, agg, confidence=conf)
    return AnomalyReport(map=a, score=score, threshold_used=gamma, decision=decide(score, gamma),
                         matched_template_id=code_id)


# --------------------------------------------------------------- report IO
#
# Raw map file: b"CDPMAP1\0" | u32 LE H | u32 LE W | H*W float64 LE, row major.

MAP_MAGIC = b"CDPMAP1\x00"


def save_map_raw(path, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f8")
    with open(path, "wb") as f:
        f.write(MAP_MAGIC)
        f.write(struct.pack("<II", *a.shape))
        f.write(a.tobytes())


def load_map_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != MAP_MAGIC:
        raise ParameterError(f"{path} is not a raw anomaly map")
    h, w = struct.unpack("<II", data[8:16])
    return np.frombuffer(data[16:16 + 8 * h * w], dtype="<f8").reshape(h, w).astype(np.float64)


def save_report(report: AnomalyReport, out_dir, stem: str = "report", raw: bool = False) -> dict[str, Path]:
    """JSON summary plus the map as PNG scaled by ``1 / map_max`` (recorded)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    info = report.to_dict()
    scale = info["map_max"]
    png = out_dir / f"{stem}_map.png"
    save_gray_png(png, report.map / scale if scale > 0 else report.map)
    info["map_png"] = png.name
    info["map_png_scale"] = scale
    paths = {"png": png}
    if raw:
        rawp = out_dir / f"{stem}_map.cdpmap"
        save_map_raw(rawp, report.map)
        info["map_raw"] = rawp.name
        paths["raw"] = rawp
    js = out_dir / f"{stem}.json"
    js.write_text(json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["json"] = js
    return paths
