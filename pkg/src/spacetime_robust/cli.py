"""Command-line entry point.

Exit codes: 0 success, 2 invalid input (config, arguments, data), 1 any
other runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import checkpoint, experiments
from .attacks import outcomes_to_csv, outcomes_to_json
from .config import ExperimentConfig, load_config
from .detectors import detector_from_doc, detector_to_doc, run_detector, write_events_csv
from .errors import ValidationError
from .model import ScaledForecaster

log = logging.getLogger("spacetime_robust")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ValidationError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _out(cfg) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, default=float))


def _forecaster(path):
    model, scaler = checkpoint.load_model(path)
    if scaler is None:
        raise ValidationError(f"{path}: checkpoint has no scaler")
    return ScaledForecaster(model, scaler)


def _checkpoint_arg(args, out: Path, name="model.json") -> Path:
    p = Path(args.checkpoint) if args.checkpoint else out / name
    if not p.exists():
        raise ValidationError(f"checkpoint {p} not found (run 'train' first or pass --checkpoint)")
    return p


def _detector(args, cfg, f, prep, out: Path):
    if getattr(args, "detector", None):
        return detector_from_doc(checkpoint.read(args.detector))
    det = experiments.build_detector(cfg, f, prep)
    checkpoint.write(out / f"detector_{det.kind}.json", detector_to_doc(det))
    return det


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    prep = experiments.prepare(cfg, full_data=args.full_data)
    f, hist = experiments.train_forecaster(cfg, prep)
    checkpoint.save_model(out / "model.json", f.model, f.scaler)
    report = {
        "config": cfg.to_dict(),
        "train_windows": int(len(prep.train.inputs)),
        "test": experiments.evaluate(f, prep.test),
        "val": experiments.evaluate(f, prep.val),
        "history": {"train_loss": hist.train_loss, "val_loss": hist.val_loss, "best_epoch": hist.best_epoch},
    }
    _dump(out / "train_metrics.json", report)
    # forecast excerpt: non-overlapping test windows
    idx = np.arange(0, len(prep.test.inputs), max(1, cfg.model.horizon))[:200]
    pred = f(prep.test.inputs[idx])
    with (out / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["origin", "step", "target", "prediction"])
        for i, j in enumerate(idx):
            for s in range(cfg.model.horizon):
                w.writerow([int(prep.test.origins[j]), s + 1, repr(float(prep.test.targets[j, s])),
                            repr(float(pred[i, s]))])
    print(json.dumps(report["test"]))
    return 0


def cmd_detector_calibrate(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    prep = experiments.prepare(cfg, full_data=args.full_data)
    f = _forecaster(_checkpoint_arg(args, out))
    det = experiments.build_detector(cfg, f, prep)
    path = out / f"detector_{det.kind}.json"
    checkpoint.write(path, detector_to_doc(det))
    events = run_detector(det, f, prep.split.test)
    write_events_csv(out / f"detector_{det.kind}_test_events.csv", events)
    rep = {"kind": det.kind, "threshold": det.threshold,
           "test_far": float(np.mean([e.alarm for e in events])) if events else None,
           "test_alarms": int(sum(e.alarm for e in events)), "test_steps": len(events)}
    _dump(out / f"detector_{det.kind}.report.json", rep)
    print(json.dumps(rep))
    return 0


def cmd_attack(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    prep = experiments.prepare(cfg, full_data=args.full_data)
    f = _forecaster(_checkpoint_arg(args, out))
    det = _detector(args, cfg, f, prep, out)
    report, res = experiments.run_attacks(cfg, f, det, prep)
    idx = experiments.evaluation_indices(cfg, prep)
    outcomes_to_json(out / f"attacks_{cfg.attack.method}.json", res, prep.test.targets[idx],
                     {"threshold": det.threshold, "detector": det.kind})
    outcomes_to_csv(out / f"attacks_{cfg.attack.method}.csv", res, prep.test.targets[idx], prep.test.origins[idx])
    d = report.to_dict()
    _dump(out / f"attack_metrics_{cfg.attack.method}.json", d)
    d.pop("records")
    print(json.dumps(d))
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    prep = experiments.prepare(cfg, full_data=args.full_data)
    f = _forecaster(_checkpoint_arg(args, out))
    det = _detector(args, cfg, f, prep, out)
    tuned, report = experiments.run_finetune(cfg, f, det, prep)
    checkpoint.save_model(out / "model_finetuned.json", tuned.model, tuned.scaler)
    _dump(out / "finetune_metrics.json", report)
    print(json.dumps({k: report[k] for k in ("clean_before", "clean_after")}
                     | {"adv_mae_before": report["before"]["adv_mae"], "adv_mae_after": report["after"]["adv_mae"]}))
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    out = _out(cfg)
    model, _ = checkpoint.load_model(_checkpoint_arg(args, out))
    if not model.is_linearized():
        warnings.warn("model is not linearized; analyzing its linearization", stacklevel=1)
    rep = experiments.analyze(model)
    _dump(out / "sensitivity.json", rep)
    if args.sweep:
        for name, fn in (("lookback", experiments.lookback_sweep), ("horizon", experiments.horizon_sweep),
                         ("decoder_order", experiments.decoder_order_sweep)):
            pts = fn(seed=cfg.seed)
            with (out / f"sweep_{name}.csv").open("w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=list(pts[0].to_dict()))
                w.writeheader()
                for p in pts:
                    w.writerow(p.to_dict())
    print(json.dumps({k: rep[k] for k in ("sigma_max", "l1_lower", "l1_upper", "dim_bound", "bounds_hold")}))
    return 0


def cmd_kalman_check(args) -> int:
    rep = experiments.kalman_check(seed=args.seed or 0)
    if args.out:
        _dump(_out(ExperimentConfig(out=args.out)) / "kalman_check.json", rep)
    ar = rep["ar3"]
    print("derived gain  :", " ".join(f"{v:.4f}" for v in ar["gain"]))
    print("reference gain:", " ".join(f"{v:.4f}" for v in ar["reference_gain"]))
    print(f"gain within 0.01: {'PASS' if ar['gain_within_0.01'] else 'FAIL'}")
    print(f"(A, L) controllable: {'PASS' if ar['controllable_A_L'] else 'FAIL'}")
    print(f"(A - LC, L) controllable: {'PASS' if ar['controllable_closed'] else 'FAIL'}")
    print(f"observer equivalence (max diff {ar['max_diff']:.2e}): {'PASS' if ar['max_diff'] <= 1e-8 else 'FAIL'}")
    print(f"zero process noise: {'PASS' if rep['zero_process_noise']['passed'] else 'FAIL'}")
    print(f"random systems: {rep['random_passed']}/{len(rep['random'])} PASS")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--full-data", action="store_true", help="train on every window instead of a subsample")
    common.add_argument("--checkpoint", help="model checkpoint (default: <out>/model.json)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spacetime-robust", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a forecaster").set_defaults(fn=cmd_train)
    for name, fn, hlp in (("attack", cmd_attack, "attack a trained forecaster"),
                          ("finetune", cmd_finetune, "adversarially fine-tune a forecaster")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--detector", help="calibrated detector checkpoint (default: calibrate now)")
        s.set_defaults(fn=fn)
    a = sub.add_parser("analyze", parents=[common], help="sensitivity report of the linearized model")
    a.add_argument("--sweep", action="store_true", help="also run the noisy-sine lookback/horizon/order sweeps")
    a.set_defaults(fn=cmd_analyze)
    sub.add_parser("kalman-check", parents=[common], help="Kalman predictor equivalence check").set_defaults(
        fn=cmd_kalman_check)
    sub.add_parser("detector-calibrate", parents=[common], help="train/calibrate a detector").set_defaults(
        fn=cmd_detector_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
