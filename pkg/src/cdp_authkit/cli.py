"""Command-line entry point: ``cdp-authkit <subcommand>``.

Exit codes: 0 success (or accepted probe), 3 rejected probe, 4 probe left
undecided (no threshold available), 2 configuration/input error, 1 runtime
error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attack import AttackConfig, EstimatorKind, attack_dataset
from .auth import (
    Aggregation,
    ConfidenceSpec,
    Decision,
    PhiKind,
    authenticate,
    calibrate_threshold,
    confidence_arrays,
    save_report,
    scores_batch,
)
from .channel import (
    PRESETS,
    channel_for,
    derive_seed,
    family_name,
    load_dataset,
    preset,
    save_dataset,
    synthesize_dataset,
)
from .core import CdpError, ConfigurationError, IngestionError, ParameterError, PrintedCode, Role, load_gray_png
from .estimator import (
    CheckpointError,
    EstimatorConfig,
    histogram_from_weights,
    load_checkpoint,
    predict_batch,
    save_checkpoint,
    train_estimator,
    agreement_weights,
)
from .evaluation import ExperimentConfig, load_report, run_experiment

log = logging.getLogger("cdp_authkit")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_REJECT, EXIT_UNDECIDED = 0, 1, 2, 3, 4
AGG_FLAGS = {"sum": Aggregation.SUM, "l2": Aggregation.L2_NORM, "mean": Aggregation.MEAN}


class UsageError(CdpError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config mirroring ExperimentConfig; flags override it")
    p.add_argument("--out", type=Path, help="output path or directory")
    p.add_argument("--json", action="store_true", help="emit one JSON object on stdout")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _confidence_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", type=float, help="hard-threshold cut on agreement weights")
    p.add_argument("--retention", type=float, help="pick tau to keep this pixel fraction (training split)")
    p.add_argument("--agg", choices=sorted(AGG_FLAGS), help="score aggregation (default sum)")
    p.add_argument("--no-confidence", action="store_true", help="score without the confidence map (C = 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cdp-authkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="synthesize a paired dataset")
    _common(g)
    g.add_argument("--codes", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--density", type=float)
    g.add_argument("--printer", action="append", help=f"defender preset, repeatable ({', '.join(PRESETS)})")
    g.add_argument("--seed", type=int)
    g.add_argument("--no-enrollment", action="store_true")

    a = sub.add_parser("attack", help="fabricate fake families into a dataset")
    _common(a)
    a.add_argument("--dataset", type=Path, required=True, help="manifest.json")
    a.add_argument("--printer", action="append", help="attacker preset, repeatable (default: all presets)")
    a.add_argument("--source", action="append", help="source printer, repeatable (default: all originals)")
    a.add_argument("--estimator", choices=[k.value for k in EstimatorKind], default="deconvolve_then_threshold")
    a.add_argument("--threshold", type=float)
    a.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train a print estimator for one defender printer")
    _common(t)
    _confidence_flags(t)
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--printer", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--base-channels", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)

    u = sub.add_parser("authenticate", help="score one probe image")
    _common(u)
    _confidence_flags(u)
    u.add_argument("probe", type=Path)
    u.add_argument("--dataset", type=Path, required=True, help="manifest.json holding the templates")
    u.add_argument("--checkpoint", type=Path, required=True)
    u.add_argument("--gamma", type=float, help="decision threshold (default: calibrated value in checkpoint)")
    u.add_argument("--raw-map", action="store_true", help="also save the float map as a raw grid")

    e = sub.add_parser("evaluate", help="run the seeded experiment grid")
    _common(e)
    _confidence_flags(e)
    e.add_argument("--seeds", type=int, help="number of seeds")
    e.add_argument("--seed", type=int, help="first seed (default 0)")
    e.add_argument("--codes", type=int)
    e.add_argument("--size", type=int)
    e.add_argument("--printer", action="append", help="defender preset, repeatable")
    e.add_argument("--fake-family", action="append",
                   help="attacker preset to fabricate fakes with, repeatable (families = attacker x source)")
    e.add_argument("--dataset", type=Path, help="use an on-disk manifest instead of synthesizing")
    e.add_argument("--epochs", type=int)
    e.add_argument("--base-channels", type=int)

    r = sub.add_parser("report", help="render figures from an evaluate output directory")
    _common(r)
    return parser


# -------------------------------------------------------------- helpers


def _load_config(args) -> dict:
    if not getattr(args, "config", None):
        return {}
    try:
        return json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {args.config}: {exc}") from exc


def _pick(flag, cfg: dict, key: str, default):
    if flag is not None:
        return flag
    return cfg.get(key, default)


def _estimator_cfg(args, cfg: dict) -> EstimatorConfig:
    base = EstimatorConfig.from_dict(cfg.get("estimator", {}))
    overrides = {
        "epochs": getattr(args, "epochs", None),
        "base_channels": getattr(args, "base_channels", None),
        "depth": getattr(args, "depth", None),
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "lr", None),
        "seed": getattr(args, "seed", None),
    }
    return replace(base, **{k: v for k, v in overrides.items() if v is not None})


def _confidence_spec(args, cfg: dict) -> ConfidenceSpec | None:
    if args.no_confidence:
        return None
    spec = ConfidenceSpec(**cfg["confidence"]) if "confidence" in cfg else ConfidenceSpec()
    if args.tau is not None:
        spec = replace(spec, phi_kind=PhiKind.HARD_THRESHOLD, tau=args.tau, target_retention=None)
    elif args.retention is not None:
        spec = replace(spec, phi_kind=PhiKind.HARD_THRESHOLD, tau=None, target_retention=args.retention)
    return spec


def _aggregation(args, cfg: dict) -> Aggregation:
    if args.agg is not None:
        return AGG_FLAGS[args.agg]
    return Aggregation(cfg.get("aggregation", "sum"))


def _calibrate(ckpt, ds, spec: ConfidenceSpec | None, agg: Aggregation) -> dict:
    """Resolve tau on the training split and gamma on train+val originals."""
    printer = ckpt.defender_printer
    by_id = {t.id: t for t in ds.templates}
    train = [by_id[i] for i in ckpt.splits["train"] if i in by_id]
    calib = [by_id[i] for i in ckpt.splits["train"] + ckpt.splits["val"] if i in by_id]
    retention = None if spec is None else spec.target_retention
    if spec is not None and not spec.resolved:
        est = predict_batch(ckpt, train)
        w = agreement_weights(np.stack([t.reflectance() for t in train]), est)
        spec = replace(spec, tau=histogram_from_weights(w).tau_for_retention(retention), target_retention=None)
    originals = {c.id: c.pixels for c in ds.originals.get(printer, [])}
    calib = [t for t in calib if t.id in originals]
    gamma = None
    if calib:
        est = predict_batch(ckpt, calib)
        refl = np.stack([t.reflectance() for t in calib])
        conf = confidence_arrays(refl, est, spec)
        probes = np.stack([originals[t.id] for t in calib])
        gamma = calibrate_threshold(scores_batch(est, probes, conf, agg))
    return {
        "confidence": None if spec is None else {
            "phi_kind": spec.phi_kind.value, "tau": spec.tau, "gamma_exp": spec.gamma_exp,
            "binary_mask": spec.binary_mask,
        },
        "target_retention": retention,
        "aggregation": agg.value,
        "gamma": gamma,
    }


def _emit(args, payload: dict, lines: list[str]) -> None:
    if args.json:
        sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    else:
        for line in lines:
            print(line)


# ------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    codes = _pick(args.codes, cfg, "codes", 200)
    size = _pick(args.size, cfg, "size", 64)
    density = _pick(args.density, cfg, "density", 0.5)
    printers = args.printer or cfg.get("defenders") or list(PRESETS)
    seeds = cfg.get("seeds") or [0]
    seed = args.seed if args.seed is not None else seeds[0]
    out = args.out or Path(cfg.get("output_dir") or "cdp_data")
    try:
        channels = [preset(p) for p in printers]
    except ParameterError as exc:
        raise ConfigurationError(str(exc)) from exc
    ds = synthesize_dataset(codes, size, size, density, channels, seed=seed, enrollment=not args.no_enrollment)
    manifest = save_dataset(ds, out)
    _emit(args, {"manifest": str(manifest), "fingerprint": ds.fingerprint(), "codes": codes, "size": size},
          [str(manifest)])
    return EXIT_OK


def cmd_attack(args) -> int:
    ds = load_dataset(args.dataset)
    attackers = args.printer or list(PRESETS)
    sources = args.source or sorted(ds.originals)
    written = []
    for a in attackers:
        attacker = replace(preset(a), seed=derive_seed("attacker", args.seed, a))
        acfg = AttackConfig(EstimatorKind(args.estimator), attacker, threshold=args.threshold)
        for j, source in enumerate(sorted(sources)):
            if source not in ds.originals:
                raise ConfigurationError(f"dataset has no originals for printer {source!r}")
            ch = channel_for(ds, source)
            attack_dataset(ds, acfg, source, draw=2 + j, source_blur=ch.blur_sigma if ch else None)
            written.append(family_name(a, source))
    root = Path(args.dataset).parent
    manifest = save_dataset(ds, root)
    dirs = [str(root / "fakes" / fam) for fam in written]
    _emit(args, {"manifest": str(manifest), "families": written, "directories": dirs}, dirs + [str(manifest)])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds = load_dataset(args.dataset)
    if args.printer not in ds.originals:
        raise ConfigurationError(f"dataset has no originals for printer {args.printer!r}")
    est_cfg = _estimator_cfg(args, cfg)
    ckpt = train_estimator(ds, args.printer, est_cfg)
    ckpt.extra["calibration"] = _calibrate(ckpt, ds, _confidence_spec(args, cfg), _aggregation(args, cfg))
    out = args.out or Path(args.dataset).parent / f"{args.printer}.ckpt"
    path = save_checkpoint(ckpt, out)
    best = ckpt.train_history[ckpt.best_epoch - 1]
    _emit(args, {"checkpoint": str(path), "best_epoch": ckpt.best_epoch, "val_loss": best[2],
                 "epochs": len(ckpt.train_history), "calibration": ckpt.extra["calibration"]},
          [str(path)])
    return EXIT_OK


def cmd_authenticate(args) -> int:
    cfg = _load_config(args)
    if not Path(args.checkpoint).is_file():
        raise ConfigurationError(f"checkpoint not found: {args.checkpoint}")
    try:
        pixels = load_gray_png(args.probe)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read probe {args.probe}: {exc}") from exc
    ds = load_dataset(args.dataset)
    ckpt = load_checkpoint(args.checkpoint, manifest=None)
    probe = PrintedCode(pixels, id=-1, role=Role.PROBE)
    if probe.shape != ds.shape:
        raise ConfigurationError(f"probe shape {probe.shape} does not match templates {ds.shape}")

    stored = ckpt.extra.get("calibration", {})
    overridden = args.tau is not None or args.retention is not None or args.no_confidence or args.agg is not None
    if overridden or not stored:
        cal = _calibrate(ckpt, ds, _confidence_spec(args, cfg), _aggregation(args, cfg))
    else:
        cal = stored
    spec = ConfidenceSpec(**cal["confidence"]) if cal["confidence"] else None
    gamma = args.gamma if args.gamma is not None else cal.get("gamma")
    report = authenticate(probe, ds.templates, ckpt, spec, Aggregation(cal["aggregation"]), gamma)
    out = args.out or Path("auth_out")
    paths = save_report(report, out, stem=Path(args.probe).stem, raw=args.raw_map)
    payload = {**report.to_dict(), **{k: str(v) for k, v in paths.items()}}
    _emit(args, payload, [f"{report.decision.value} score={report.score:.6g} gamma={gamma} "
                          f"template={report.matched_template_id}", *map(str, paths.values())])
    return {Decision.ACCEPT: EXIT_OK, Decision.REJECT: EXIT_REJECT}.get(report.decision, EXIT_UNDECIDED)


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    if args.seeds is not None or args.seed is not None:
        first = args.seed or 0
        cfg["seeds"] = list(range(first, first + (args.seeds or 1)))
    for key, flag in (("codes", args.codes), ("size", args.size)):
        if flag is not None:
            cfg[key] = flag
    if args.printer:
        cfg["defenders"] = args.printer
    if args.fake_family:
        cfg["attacks"] = [{"estimator_kind": "deconvolve_then_threshold", "attacker": a} for a in args.fake_family]
    if args.dataset:
        cfg["manifest"] = str(args.dataset)
    est = EstimatorConfig.from_dict(cfg.get("estimator", {}))
    if args.epochs is not None:
        est = replace(est, epochs=args.epochs)
    if args.base_channels is not None:
        est = replace(est, base_channels=args.base_channels)
    cfg["estimator"] = est
    spec = _confidence_spec(args, cfg)
    if spec is None:
        raise ConfigurationError("evaluate always reports both weighted and unweighted scores; drop --no-confidence")
    cfg["confidence"] = spec
    cfg["aggregation"] = _aggregation(args, cfg)
    cfg["output_dir"] = None
    try:
        exp = ExperimentConfig.from_dict(cfg)
    except (TypeError, ParameterError) as exc:
        raise ConfigurationError(f"invalid experiment config: {exc}") from exc
    out = args.out or Path("cdp_eval")
    report = run_experiment(exp)
    from .reporting import export_report

    paths = export_report(report, out, figures=False)
    summary = {f"{d}|{f}|{m}": float(np.mean(v)) for (d, f, m), v in sorted(report.aucs.items())}
    _emit(args, {"out": str(out), "files": [str(p) for p in paths], "mean_auc": summary,
                 "failures": {str(k): v for k, v in report.failures.items()}},
          [str(p) for p in paths])
    return EXIT_RUNTIME if report.partial else EXIT_OK


def cmd_report(args) -> int:
    from .reporting import export_report

    out = args.out or Path("cdp_eval")
    report = load_report(out)
    paths = export_report(report, out, figures=True)
    _emit(args, {"out": str(out), "files": [str(p) for p in paths]}, [str(p) for p in paths])
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "attack": cmd_attack,
    "train": cmd_train,
    "authenticate": cmd_authenticate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"cdp-authkit: error: {exc}\n")
        return EXIT_CONFIG
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_CONFIG
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, IngestionError, CheckpointError, UsageError, ParameterError) as exc:
        sys.stderr.write(f"cdp-authkit: error: {exc}\n")
        return EXIT_CONFIG
    except CdpError as exc:
        sys.stderr.write(f"cdp-authkit: runtime error: {exc}\n")
        return EXIT_RUNTIME
    except Exception as exc:  # surface anything else as a runtime failure with an exit code
        log.debug("unhandled", exc_info=True)
        sys.stderr.write(f"cdp-authkit: runtime error: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
