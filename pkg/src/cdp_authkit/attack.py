"""Fake fabrication: estimate a template from a printed original, reprint it."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, replace

import numpy as np

from .channel import ChannelParams, PairedDataset, acquire, channel_for, print_code
from .core import DegenerateInputError, DigitalTemplate, ParameterError, PrintedCode, Role, binarize


class EstimatorKind(str, enum.Enum):
    FIXED_THRESHOLD = "fixed_threshold"
    ADAPTIVE_THRESHOLD = "adaptive_threshold"
    DECONVOLVE_THEN_THRESHOLD = "deconvolve_then_threshold"


@dataclass(frozen=True)
class AttackConfig:
    estimator_kind: EstimatorKind
    attacker_channel: ChannelParams
    threshold: float | None = None
    # PSF the attacker believes the source printer has; None -> 0.8x the true blur
    assumed_blur_sigma: float | None = None
    blur_knowledge: float = 0.8
    wiener_nsr: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "estimator_kind", EstimatorKind(self.estimator_kind))
        fixed = self.estimator_kind is EstimatorKind.FIXED_THRESHOLD
        if fixed != (self.threshold is not None):
            raise ParameterError("threshold must be given iff estimator_kind is fixed_threshold")
        if fixed and not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.wiener_nsr <= 0:
            raise ParameterError("wiener_nsr must be > 0")

    def to_dict(self) -> dict:
        return {
            "estimator_kind": self.estimator_kind.value,
            "threshold": self.threshold,
            "assumed_blur_sigma": self.assumed_blur_sigma,
            "blur_knowledge": self.blur_knowledge,
            "wiener_nsr": self.wiener_nsr,
            "attacker_channel": asdict(self.attacker_channel),
        }


def otsu_threshold(img: np.ndarray, bins: int = 256) -> float:
    """Threshold maximizing the between-class variance of ``img``'s histogram."""
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0.0:
        raise DegenerateInputError("cannot pick an adaptive threshold for a constant image")
    counts, edges = np.histogram(img, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(counts).astype(np.float64)
    w1 = w0[-1] - w0
    m = np.cumsum(counts * centers)
    mu0 = np.divide(m, w0, out=np.zeros_like(m), where=w0 > 0)
    mu1 = np.divide(m[-1] - m, w1, out=np.zeros_like(m), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    k = int(np.argmax(between[:-1]))
    # threshold sits on the upper edge of the last bin of the lower class
    return float(edges[k + 1])


def _gaussian_otf(shape: tuple[int, int], sigma: float) -> np.ndarray:
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.fftfreq(shape[1])[None, :]
    return np.exp(-2.0 * (np.pi * sigma) ** 2 * (fx ** 2 + fy ** 2))


def wiener_deconvolve(img: np.ndarray, sigma: float, nsr: float) -> np.ndarray:
    """Wiener inverse filter for a Gaussian PSF (periodic boundaries)."""
    if sigma <= 0.0:
        return img.copy()
    otf = _gaussian_otf(img.shape, sigma)
    mean = img.mean()
    spec = np.fft.fft2(img - mean)
    restored = np.fft.ifft2(spec * otf / (otf ** 2 + nsr)).real
    return restored + mean


def _ink_image(x: PrintedCode) -> np.ndarray:
    return 1.0 - x.pixels


def estimate_template(x: PrintedCode, cfg: AttackConfig, source_blur: float | None = None) -> DigitalTemplate:
    """Attacker's binary estimate of the template behind a printed code."""
    if x.role not in (Role.ORIGINAL, Role.PROBE, Role.ENROLLMENT):
        raise ParameterError(f"cannot estimate a template from a code with role {x.role.value}")
    ink = _ink_image(x)
    if float(ink.max() - ink.min()) <= 0.0:
        raise DegenerateInputError(f"code {x.id} is constant")
    kind = cfg.estimator_kind
    if kind is EstimatorKind.FIXED_THRESHOLD:
        return binarize(ink, cfg.threshold, id=x.id)
    if kind is EstimatorKind.DECONVOLVE_THEN_THRESHOLD:
        sigma = cfg.assumed_blur_sigma
        if sigma is None:
            sigma = cfg.blur_knowledge * (source_blur or 0.0)
        ink = wiener_deconvolve(ink, sigma, cfg.wiener_nsr)
    tau = otsu_threshold(ink)
    return DigitalTemplate((ink >= tau).astype(np.uint8), id=x.id)


def fabricate_fake(t_est: DigitalTemplate, attacker: ChannelParams, draw: int = 0,
                   source_printer: str | None = None) -> PrintedCode:
    fake = print_code(t_est, attacker, draw)
    return replace(fake, role=Role.FAKE, printer=attacker.printer, source_printer=source_printer)


def bit_error_rate(t_est: DigitalTemplate, t: DigitalTemplate) -> float:
    return float(np.mean(t_est.pixels != t.pixels))


def attack_dataset(ds: PairedDataset, cfg: AttackConfig, source: str, draw: int = 2,
                   source_blur: float | None = None) -> list[PrintedCode]:
    """Fabricate one fake family from every original of ``source``; registers it on ``ds``."""
    if source not in ds.originals:
        raise ParameterError(f"dataset has no originals for printer {source!r}")
    if source_blur is None:
        ch = channel_for(ds, source)
        source_blur = ch.blur_sigma if ch is not None else None
    fakes = []
    for x in ds.originals[source]:
        t_est = estimate_template(x, cfg, source_blur=source_blur)
        fake = fabricate_fake(t_est, cfg.attacker_channel, draw=draw, source_printer=source)
        fakes.append(replace(acquire(fake), role=Role.FAKE))
    ds.add_fakes(cfg.attacker_channel.printer, source, fakes, cfg.to_dict())
    return fakes
