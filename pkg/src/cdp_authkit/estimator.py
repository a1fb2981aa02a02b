"""Print-estimation model: training, prediction, checkpoints, residual weights."""
from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import PairedDataset, manifest_fingerprint
from .core import CdpError, DigitalTemplate, ParameterError, PrintedCode, PrinterId, Role, rng_for
from .nn import Adam, UNet, mse_loss

log = logging.getLogger(__name__)

MAGIC = b"CDPCKPT\x00"
CHECKPOINT_VERSION = 1
MIN_PAIRS = 10


class TrainingError(CdpError):
    pass


class CheckpointError(CdpError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    depth: int = 2
    base_channels: int = 16
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 1e-2
    split: tuple[float, float, float] = (0.6, 0.1, 0.3)
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        if self.depth < 1:
            raise ParameterError("depth must be >= 1")
        if self.base_channels < 4:
            raise ParameterError("base_channels must be >= 4")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        if len(self.split) != 3 or not all(0.0 < s < 1.0 for s in self.split):
            raise ParameterError(f"split fractions must each lie in (0, 1), got {self.split}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ParameterError(f"split fractions must sum to 1, got {sum(self.split)}")
        if self.dtype not in ("float32", "float64"):
            raise ParameterError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, d: dict) -> "EstimatorConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ModelCheckpoint:
    weights: dict[str, np.ndarray]
    config: EstimatorConfig
    defender_printer: PrinterId
    train_history: list[tuple[int, float, float]] = field(default_factory=list)
    data_fingerprint: str = ""
    splits: dict[str, list[int]] = field(default_factory=dict)
    best_epoch: int = 0
    # free-form metadata, e.g. calibrated tau/gamma written by the CLI
    extra: dict = field(default_factory=dict)

    def network(self) -> UNet:
        return UNet(self.config.depth, self.config.base_channels, dtype=self.config.dtype, params=self.weights)


# ------------------------------------------------------------------ splits


def split_ids(ids: list[int], split: tuple[float, float, float], seed: int) -> dict[str, list[int]]:
    """Deterministic train/val/test assignment from (seed, code id)."""
    keyed = sorted(ids, key=lambda i: (rng_for("split", seed, i).random(), i))
    n = len(keyed)
    n_train = int(round(split[0] * n))
    n_val = int(round(split[1] * n))
    n_val = max(1, min(n_val, n - n_train - 1)) if n >= 3 else n_val
    return {
        "train": sorted(keyed[:n_train]),
        "val": sorted(keyed[n_train:n_train + n_val]),
        "test": sorted(keyed[n_train + n_val:]),
    }


# ------------------------------------------------------------ tensors in/out


def _template_input(t: np.ndarray, dtype) -> np.ndarray:
    # centred binary input
    return (2.0 * t.astype(dtype) - 1.0)[..., None]


def _stack_templates(templates, dtype) -> np.ndarray:
    return np.stack([_template_input(t.pixels, dtype) for t in templates]).astype(dtype, copy=False)


def _pad_to(x: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = x.shape[1:3]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        if ph > h or pw > w:
            raise ParameterError(f"cannot pad a {h}x{w} input to a multiple of {multiple}")
        x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), mode="reflect")
    return x, (h, w)


# ------------------------------------------------------------------- train


def train_estimator(dataset: PairedDataset, printer: PrinterId, cfg: EstimatorConfig | None = None) -> ModelCheckpoint:
    """Fit the print estimator to (template, original) pairs of ``printer``.

    Returns the parameters with the lowest validation loss.
    """
    cfg = cfg or EstimatorConfig()
    if printer not in dataset.originals:
        raise ParameterError(f"dataset has no originals for printer {printer!r}")
    originals = {c.id: c for c in dataset.originals[printer]}
    pairs = [(t, originals[t.id]) for t in dataset.templates if t.id in originals]
    if len(pairs) < MIN_PAIRS:
        raise TrainingError(f"need at least {MIN_PAIRS} (template, original) pairs, got {len(pairs)}")

    dtype = np.dtype(cfg.dtype)
    splits = split_ids([t.id for t, _ in pairs], cfg.split, cfg.seed)
    by_id = {t.id: (t, x) for t, x in pairs}

    def tensors(ids):
        xs = _stack_templates([by_id[i][0] for i in ids], dtype)
        ys = np.stack([by_id[i][1].pixels for i in ids]).astype(dtype)[..., None]
        return xs, ys

    x_train, y_train = tensors(splits["train"])
    x_val, y_val = tensors(splits["val"])
    net = UNet(cfg.depth, cfg.base_channels, seed=cfg.seed, dtype=dtype)
    net.set_output_prior(float(y_train.mean()))
    x_train, _ = _pad_to(x_train, net.multiple)
    x_val, _ = _pad_to(x_val, net.multiple)
    y_train, _ = _pad_to(y_train, net.multiple)
    y_val, _ = _pad_to(y_val, net.multiple)

    opt = Adam(net.params, lr=cfg.learning_rate)
    history: list[tuple[int, float, float]] = []
    best = (np.inf, 0, None)
    n = len(x_train)
    for epoch in range(1, cfg.epochs + 1):
        order = rng_for("shuffle", cfg.seed, epoch).permutation(n)
        losses, weights = [], []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, cache = net.forward(x_train[idx])
            loss, dout = mse_loss(out, y_train[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            grads = net.backward(cache, dout)
            opt.step(net.params, grads)
            losses.append(loss)
            weights.append(len(idx))
        train_loss = float(np.average(losses, weights=weights))
        val_loss = _eval_loss(net, x_val, y_val, cfg.batch_size)
        if not np.isfinite(val_loss) or not np.isfinite(train_loss):
            raise TrainingError(f"non-finite loss at epoch {epoch} (train={train_loss}, val={val_loss})")
        history.append((epoch, train_loss, val_loss))
        log.debug("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, {k: v.copy() for k, v in net.params.items()})

    return ModelCheckpoint(
        weights=best[2],
        config=cfg,
        defender_printer=printer,
        train_history=history,
        data_fingerprint=dataset.fingerprint(),
        splits=splits,
        best_epoch=best[1],
    )


def _eval_loss(net: UNet, xs, ys, batch_size: int) -> float:
    total = 0.0
    count = 0
    for start in range(0, len(xs), batch_size):
        out = net.predict(xs[start:start + batch_size])
        diff = out.astype(np.float64) - ys[start:start + batch_size]
        total += float(np.sum(diff ** 2))
        count += diff.size
    return total / count


# ----------------------------------------------------------------- predict


def predict_batch(ckpt: ModelCheckpoint, templates: list[DigitalTemplate], batch_size: int = 16) -> np.ndarray:
    """(N, H, W) float64 print estimates in [0, 1]."""
    if not templates:
        return np.empty((0, 0, 0))
    net = ckpt.network()
    dtype = np.dtype(ckpt.config.dtype)
    outs = []
    for start in range(0, len(templates), batch_size):
        xs = _stack_templates(templates[start:start + batch_size], dtype)
        xs, (h, w) = _pad_to(xs, net.multiple)
        outs.append(net.predict(xs)[:, :h, :w, 0].astype(np.float64))
    return np.clip(np.concatenate(outs), 0.0, 1.0)


def predict(ckpt: ModelCheckpoint, t: DigitalTemplate) -> PrintedCode:
    est = predict_batch(ckpt, [t])[0]
    return PrintedCode(est, id=t.id, role=Role.ESTIMATE, printer=ckpt.defender_printer)


# -------------------------------------------------------- residual weights


def agreement_weights(template_img: np.ndarray, estimate: np.ndarray) -> np.ndarray:
    """1 - |template - estimate|, both given in the same intensity domain."""
    return 1.0 - np.abs(np.asarray(template_img, dtype=np.float64) - np.asarray(estimate, dtype=np.float64))


@dataclass
class ResidualHistogram:
    counts: np.ndarray
    edges: np.ndarray
    weights: np.ndarray  # sorted ascending, all pixels of all templates

    def retained_fraction(self, tau: float) -> float:
        """Fraction of pixels with weight >= tau."""
        first = np.searchsorted(self.weights, tau, side="left")
        return float(self.weights.size - first) / self.weights.size

    def tau_for_retention(self, target: float) -> float:
        """Largest observed weight keeping at least ``target`` of the pixels."""
        if not 0.0 < target < 1.0:
            raise ParameterError(f"target retention must lie in (0, 1), got {target}")
        n = self.weights.size
        keep = int(np.ceil(target * n))
        return float(self.weights[n - keep])


def residual_histogram(ckpt: ModelCheckpoint, templates: list[DigitalTemplate], bins: int = 100) -> ResidualHistogram:
    """Histogram of per-pixel agreement between template and print estimate.

    The template is compared in print intensity (ink = 0), i.e. the weight
    is ``1 - |(1 - t) - m(t)|``.
    """
    if not templates:
        raise ParameterError("need at least one template")
    est = predict_batch(ckpt, templates)
    refl = np.stack([t.reflectance() for t in templates])
    w = agreement_weights(refl, est).ravel()
    return histogram_from_weights(w, bins)


def histogram_from_weights(w: np.ndarray, bins: int = 100) -> ResidualHistogram:
    w = np.sort(np.asarray(w, dtype=np.float64).ravel())
    counts, edges = np.histogram(w, bins=bins, range=(0.0, 1.0))
    return ResidualHistogram(counts=counts, edges=edges, weights=w)


# -------------------------------------------------------------- checkpoint
#
# Layout: MAGIC (8 bytes) | u32 LE schema version | u64 LE header length |
# UTF-8 JSON header | raw little-endian parameter block. The header lists
# every tensor as {name, dtype, shape, offset, nbytes} relative to the
# start of the parameter block.


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.weights):
        arr = np.ascontiguousarray(ckpt.weights[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "schema_version": CHECKPOINT_VERSION,
        "config": asdict(ckpt.config),
        "defender_printer": ckpt.defender_printer,
        "train_history": [list(h) for h in ckpt.train_history],
        "data_fingerprint": ckpt.data_fingerprint,
        "splits": ckpt.splits,
        "best_epoch": ckpt.best_epoch,
        "extra": ckpt.extra,
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)
    return path


def load_checkpoint(path, manifest=None) -> ModelCheckpoint:
    """Read a checkpoint; warns if ``manifest`` (dict or path) has a different fingerprint."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: schema version {version} not supported (expected {CHECKPOINT_VERSION})")
    if 20 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header (schema version {version})")
    try:
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header (schema version {version}): {exc}") from exc
    block = memoryview(data)[20 + hlen:]
    weights = {}
    for spec in header["tensors"]:
        end = spec["offset"] + spec["nbytes"]
        if end > len(block):
            raise CheckpointError(f"{path}: truncated parameter block at tensor {spec['name']} "
                                  f"(schema version {version})")
        dt = np.dtype(spec["dtype"]).newbyteorder("<")
        arr = np.frombuffer(block[spec["offset"]:end], dtype=dt).reshape(spec["shape"])
        weights[spec["name"]] = arr.astype(dt.newbyteorder("="))
    ckpt = ModelCheckpoint(
        weights=weights,
        config=EstimatorConfig.from_dict(header["config"]),
        defender_printer=header["defender_printer"],
        train_history=[tuple(h) for h in header["train_history"]],
        data_fingerprint=header.get("data_fingerprint", ""),
        splits={k: list(v) for k, v in header.get("splits", {}).items()},
        best_epoch=header.get("best_epoch", 0),
        extra=header.get("extra", {}),
    )
    if manifest is not None:
        if not isinstance(manifest, dict):
            manifest = json.loads(Path(manifest).read_text(encoding="utf-8"))
        fp = manifest_fingerprint(manifest)
        if fp != ckpt.data_fingerprint:
            warnings.warn(f"checkpoint {path} was trained on data with fingerprint "
                          f"{ckpt.data_fingerprint[:12]}, manifest has {fp[:12]}", stacklevel=2)
    return ckpt
