"""Parametric print-and-scan channel and paired dataset synthesis/ingestion.

Stage order of :func:`print_code`: stochastic dot-gain dilation, ink
scaling, Gaussian PSF, additive noise, reflectance flip, clamp.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from ._accel import worker_threads
from .core import (
    DigitalTemplate,
    IngestionError,
    ParameterError,
    PrintedCode,
    PrinterId,
    Role,
    generate_template,
    load_gray_png,
    load_template_png,
    quantize8,
    rng_for,
    save_gray_png,
    save_template_png,
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ChannelParams:
    printer: PrinterId
    dot_gain: float = 0.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    ink_level: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.printer:
            raise ParameterError("printer label must be non-empty")
        if not 0.0 <= self.dot_gain <= 1.0:
            raise ParameterError(f"dot_gain must lie in [0, 1], got {self.dot_gain}")
        if self.blur_sigma < 0.0:
            raise ParameterError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if not 0.0 <= self.noise_sigma <= 0.5:
            raise ParameterError(f"noise_sigma must lie in [0, 0.5], got {self.noise_sigma}")
        if not 0.0 < self.ink_level <= 1.0:
            raise ParameterError(f"ink_level must lie in (0, 1], got {self.ink_level}")

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelParams":
        return cls(**{k: d[k] for k in ("printer", "dot_gain", "blur_sigma", "noise_sigma", "ink_level", "seed") if k in d})


# Simulator presets; synth55 is the noisier printer.
PRESETS: dict[str, ChannelParams] = {
    "synth55": ChannelParams("synth55", dot_gain=0.25, blur_sigma=1.2, noise_sigma=0.04, seed=55),
    "synth76": ChannelParams("synth76", dot_gain=0.12, blur_sigma=0.8, noise_sigma=0.03, seed=76),
}

IDENTITY = ChannelParams("identity")


def preset(name: str) -> ChannelParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown channel preset {name!r}; known: {sorted(PRESETS)}") from None


def derive_seed(*keys) -> int:
    """Stable 63-bit seed derived from a tuple of ints/labels."""
    state = rng_for("derive", *keys).integers(0, 2**63 - 1)
    return int(state)


def print_code(t: DigitalTemplate, params: ChannelParams, draw: int = 0) -> PrintedCode:
    """Simulate printing and scanning ``t``; deterministic in (t, params, draw)."""
    h, w = t.shape
    if params.blur_sigma > min(h, w) / 4:
        raise ParameterError(f"blur_sigma {params.blur_sigma} exceeds min(H, W)/4 for a {h}x{w} code")
    rng = rng_for("print", params.seed, params.printer, t.id, draw)
    u = rng.random((h, w))
    noise = rng.standard_normal((h, w))

    if params.dot_gain > 0.0:
        ink = kernels.dilate_stochastic(np.ascontiguousarray(t.pixels), u, params.dot_gain)
    else:
        ink = t.pixels.astype(np.float64)
    ink = ink * params.ink_level
    if params.blur_sigma > 0.0:
        ink = gaussian_filter(ink, params.blur_sigma, mode="reflect")
    if params.noise_sigma > 0.0:
        ink = ink + params.noise_sigma * noise
    out = np.clip(1.0 - ink, 0.0, 1.0)
    return PrintedCode(out, id=t.id, role=Role.ORIGINAL, printer=params.printer)


def acquire(code: PrintedCode) -> PrintedCode:
    """8-bit scanner quantization; the dataset's persisted grid."""
    return replace(code, pixels=quantize8(code.pixels) / 255.0)


# ---------------------------------------------------------------- datasets


def family_name(attacker: PrinterId, source: PrinterId) -> str:
    return f"{attacker}_from_{source}"


def manifest_fingerprint(manifest: dict) -> str:
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


@dataclass
class PairedDataset:
    templates: list[DigitalTemplate]
    originals: dict[PrinterId, list[PrintedCode]] = field(default_factory=dict)
    fakes: dict[tuple[PrinterId, PrinterId], list[PrintedCode]] = field(default_factory=dict)
    enrollment: dict[PrinterId, list[PrintedCode]] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    @property
    def ids(self) -> list[int]:
        return [t.id for t in self.templates]

    @property
    def shape(self) -> tuple[int, int]:
        return self.templates[0].shape

    def template_by_id(self, code_id: int) -> DigitalTemplate:
        return self.templates[self.index_of(code_id)]

    def index_of(self, code_id: int) -> int:
        if not hasattr(self, "_index") or len(self._index) != len(self.templates):
            self._index = {t.id: i for i, t in enumerate(self.templates)}
        return self._index[code_id]

    def fingerprint(self) -> str:
        return manifest_fingerprint(self.manifest)

    def add_fakes(self, attacker: PrinterId, source: PrinterId, codes: list[PrintedCode], attack_meta: dict) -> None:
        """Register a fake family and record it in the manifest."""
        self.fakes[(attacker, source)] = list(codes)
        fam = family_name(attacker, source)
        entries = [e for e in self.manifest.setdefault("entries", [])
                   if not (e["role"] == "fake" and e["printer"] == attacker and e.get("source_printer") == source)]
        entries.extend(_entry(c.id, "fake", attacker, source, f"fakes/{fam}/{_fname(c.id)}") for c in codes)
        self.manifest["entries"] = entries
        attacks = [a for a in self.manifest.setdefault("attacks", []) if a.get("family") != fam]
        attacks.append({"family": fam, "attacker": attacker, "source": source, **attack_meta})
        self.manifest["attacks"] = attacks


def _fname(code_id: int) -> str:
    return f"code_{code_id:05d}.png"


def _entry(code_id, role, printer, source, path) -> dict:
    return {"id": int(code_id), "role": role, "printer": printer, "source_printer": source, "path": path}


def synthesize_dataset(
    n: int,
    H: int,
    W: int,
    density: float = 0.5,
    defender: list[ChannelParams] | None = None,
    seed: int = 0,
    enrollment: bool = True,
) -> PairedDataset:
    """Templates plus one acquired original (and enrollment print) per defender channel."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    if defender is None:
        defender = list(PRESETS.values())
    if not defender:
        raise ParameterError("at least one defender channel is required")
    labels = [p.printer for p in defender]
    if len(set(labels)) != len(labels):
        raise ParameterError(f"duplicate printer labels: {labels}")

    templates = [generate_template(derive_seed("tmpl", seed, i), H, W, density, id=i) for i in range(n)]
    channels = [replace(p, seed=derive_seed("chan", seed, p.seed, p.printer)) for p in defender]

    def _prints(params: ChannelParams, draw: int, role: Role) -> list[PrintedCode]:
        def one(t):
            return replace(acquire(print_code(t, params, draw)), role=role)

        workers = worker_threads()
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                return list(ex.map(one, templates))
        return [one(t) for t in templates]

    ds = PairedDataset(templates=templates)
    entries = [_entry(t.id, "template", None, None, f"templates/{_fname(t.id)}") for t in templates]
    for params in channels:
        ds.originals[params.printer] = _prints(params, 0, Role.ORIGINAL)
        entries += [_entry(c.id, "original", params.printer, None, f"originals/{params.printer}/{_fname(c.id)}")
                    for c in ds.originals[params.printer]]
        if enrollment:
            ds.enrollment[params.printer] = _prints(params, 1, Role.ENROLLMENT)
            entries += [_entry(c.id, "enrollment", params.printer, None, f"enrollment/{params.printer}/{_fname(c.id)}")
                        for c in ds.enrollment[params.printer]]
    ds.manifest = {
        "schema_version": SCHEMA_VERSION,
        "source": "synthetic",
        "seed": seed,
        "n": n,
        "H": H,
        "W": W,
        "density": density,
        "channels": [asdict(p) for p in channels],
        "attacks": [],
        "entries": entries,
    }
    return ds


def channel_for(ds: PairedDataset, printer: PrinterId) -> ChannelParams | None:
    """The (dataset-seeded) channel recorded for a printer, if synthetic."""
    for d in ds.manifest.get("channels", []):
        if d["printer"] == printer:
            return ChannelParams.from_dict(d)
    return None


def save_dataset(ds: PairedDataset, root) -> Path:
    """Write the PNG layout plus ``manifest.json``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    by_key = {}
    for t in ds.templates:
        by_key[("template", None, None, t.id)] = t
    for printer, codes in ds.originals.items():
        by_key.update({("original", printer, None, c.id): c for c in codes})
    for printer, codes in ds.enrollment.items():
        by_key.update({("enrollment", printer, None, c.id): c for c in codes})
    for (attacker, source), codes in ds.fakes.items():
        by_key.update({("fake", attacker, source, c.id): c for c in codes})
    for e in ds.manifest["entries"]:
        obj = by_key[(e["role"], e["printer"], e.get("source_printer"), e["id"])]
        path = root / e["path"]
        if e["role"] == "template":
            save_template_png(path, obj)
        else:
            save_gray_png(path, obj.pixels)
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


_ROLES = {"template", "original", "enrollment", "fake"}


def load_dataset(manifest_path) -> PairedDataset:
    """Read a manifest and its PNGs; images are rescaled to [0, 1]."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestionError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestionError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    root = manifest_path.parent
    entries = manifest.get("entries")
    if not isinstance(entries, list) or not entries:
        raise IngestionError(f"manifest {manifest_path} has no entries")

    bad_roles = [e for e in entries if e.get("role") not in _ROLES]
    if bad_roles:
        raise IngestionError(f"unknown role {bad_roles[0].get('role')!r} in entry {bad_roles[0]}")
    missing = [str(root / e["path"]) for e in entries if not (root / e["path"]).is_file()]
    if missing:
        raise IngestionError("missing files: " + ", ".join(missing))

    templates = sorted((load_template_png(root / e["path"], id=e["id"]) for e in entries if e["role"] == "template"),
                       key=lambda t: t.id)
    if not templates:
        raise IngestionError("manifest lists no templates")
    shapes = {t.id: t.shape for t in templates}
    ds = PairedDataset(templates=templates, manifest=manifest)

    for e in entries:
        role = e["role"]
        if role == "template":
            continue
        code_id = e["id"]
        if code_id not in shapes:
            raise IngestionError(f"entry {e['path']} refers to unknown code id {code_id}")
        px = load_gray_png(root / e["path"])
        if px.shape != shapes[code_id]:
            raise IngestionError(f"shape mismatch for {e['path']}: {px.shape} vs template {shapes[code_id]}")
        printer = e.get("printer")
        if not printer:
            raise IngestionError(f"entry {e['path']} has no printer label")
        if role == "fake":
            source = e.get("source_printer")
            if not source:
                raise IngestionError(f"fake entry {e['path']} has no source_printer")
            code = PrintedCode(px, code_id, Role.FAKE, printer, source)
            ds.fakes.setdefault((printer, source), []).append(code)
        else:
            code = PrintedCode(px, code_id, Role(role), printer)
            target = ds.originals if role == "original" else ds.enrollment
            target.setdefault(printer, []).append(code)

    for group in (*ds.originals.values(), *ds.enrollment.values(), *ds.fakes.values()):
        group.sort(key=lambda c: c.id)
    return ds
