"""Domain types, template generation and pixel similarity metrics.

Polarity convention: a digital template pixel of 1 is ink. Printed images
are reflectance, so ink shows up dark (low values) and the noiseless,
blur-free print of ``t`` is ``1 - t``.
"""
from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

PrinterId = str


class CdpError(Exception):
    """Base class for all package errors."""


class ParameterError(CdpError, ValueError):
    pass


class DegenerateInputError(CdpError, ValueError):
    """Raised for constant inputs where a statistic is undefined."""


class IngestionError(CdpError):
    pass


class ConfigurationError(CdpError):
    pass


class Role(str, enum.Enum):
    ORIGINAL = "original"
    FAKE = "fake"
    PROBE = "probe"
    ESTIMATE = "estimate"
    ENROLLMENT = "enrollment"


@dataclass(frozen=True)
class DigitalTemplate:
    pixels: np.ndarray
    id: int
    seed: int | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 2 or px.shape[1] < 2:
            raise ParameterError(f"template must be a 2-D array with H, W >= 2, got shape {px.shape}")
        if not np.all((px == 0) | (px == 1)):
            raise ParameterError("template pixels must be exactly 0 or 1")
        px = px.astype(np.uint8)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def reflectance(self) -> np.ndarray:
        """The template rendered in print intensity (ink = 0, blank substrate = 1)."""
        return 1.0 - self.pixels.astype(np.float64)


@dataclass(frozen=True)
class PrintedCode:
    pixels: np.ndarray
    id: int
    role: Role = Role.PROBE
    printer: PrinterId | None = None
    source_printer: PrinterId | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ParameterError(f"printed code must be 2-D, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min(initial=0.0) < 0.0 or px.max(initial=0.0) > 1.0:
            raise ParameterError("printed code pixels must lie in [0, 1]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "role", Role(self.role))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


# ------------------------------------------------------------- randomness


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    part = int(part)
    if part < 0:
        # SeedSequence only takes non-negative entropy
        return (1 << 64) + part
    return part


def rng_for(*keys) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by integers and/or labels.

    The stream is a pure function of the keys, on every platform.
    """
    seq = np.random.SeedSequence([_key(k) for k in keys])
    return np.random.Generator(np.random.Philox(seq))


# ------------------------------------------------------------- templates


def generate_template(seed: int, H: int, W: int, density: float = 0.5, id: int = 0) -> DigitalTemplate:
    """Draw an i.i.d. Bernoulli(density) binary template."""
    if H < 2 or W < 2:
        raise ParameterError(f"H and W must be >= 2, got {H}x{W}")
    if not 0.0 < density < 1.0:
        raise ParameterError(f"density must lie in (0, 1), got {density}")
    rng = rng_for("template", seed)
    pixels = (rng.random((H, W)) < density).astype(np.uint8)
    return DigitalTemplate(pixels, id=id, seed=seed)


def binarize(x: PrintedCode | np.ndarray, tau: float, id: int | None = None) -> DigitalTemplate:
    """Per-pixel rule: 1 where the value is >= tau, else 0.

    No polarity flip is applied; callers holding reflectance images pass
    ``1 - x`` to recover ink.
    """
    if not 0.0 < tau < 1.0:
        raise ParameterError(f"tau must lie in (0, 1), got {tau}")
    if isinstance(x, PrintedCode):
        arr, code_id = x.pixels, x.id
    else:
        arr, code_id = np.asarray(x, dtype=np.float64), 0
    return DigitalTemplate((arr >= tau).astype(np.uint8), id=code_id if id is None else id)


# ----------------------------------------------------------------- metrics


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "pixels", a), dtype=np.float64)
    b = np.asarray(getattr(b, "pixels", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def pearson(a, b) -> float:
    """Sample correlation over flattened pixels; constant inputs raise."""
    a, b = _pair(a, b)
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    na = np.sqrt(da @ da)
    nb = np.sqrt(db @ db)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("pearson correlation is undefined for a constant input")
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------- PNG I/O


def quantize8(pixels: np.ndarray) -> np.ndarray:
    """[0,1] floats -> uint8 with round-half-up."""
    return np.floor(np.clip(pixels, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_gray_png(path, pixels: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize8(np.asarray(pixels, dtype=np.float64)), mode="L").save(path)


def load_gray_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def save_template_png(path, t: DigitalTemplate) -> None:
    """1-bit PNG; ink is stored black so the file views like a print."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((t.pixels == 0)).convert("1").save(path)


def load_template_png(path, id: int = 0) -> DigitalTemplate:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return DigitalTemplate((arr < 128).astype(np.uint8), id=id)
