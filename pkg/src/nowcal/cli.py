"""Command-line surface: synth, eval, fit, apply, diagram.

Every command that writes output also writes a run manifest next to it
(``run_manifest.json`` inside directory outputs, ``<file>.manifest.json``
beside file outputs) recording the resolved arguments, content digests of
inputs and outputs, the seed, the toolkit version, and the wall-clock
runtime. Re-running the same command reproduces every output byte-exactly
except the manifest's runtime field.

Exit codes: 0 success, 1 usage error, 2 data validation error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, calibrators, diffnet, metrics, synth, tensorio

DATASET_FILES = ("logits.fct1", "labels.fct1", "lead_times.fct1")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; we want 1
        raise UsageError(message)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(
    primary_output: Path,
    command: str,
    args_dict: dict,
    inputs: list[Path],
    outputs: list[Path],
    started: float,
    seed: int | None = None,
) -> None:
    if primary_output.is_dir():
        manifest_path = primary_output / "run_manifest.json"
    else:
        manifest_path = primary_output.with_name(primary_output.name + ".manifest.json")
    doc = {
        "command": command,
        "arguments": args_dict,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "seed": seed,
        "toolkit_version": __version__,
        "runtime_seconds": round(time.time() - started, 3),
    }
    with open(manifest_path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _dataset_paths(data_dir: str) -> list[Path]:
    d = Path(data_dir)
    paths = [d / name for name in DATASET_FILES]
    for p in paths:
        if not p.exists():
            raise tensorio.DatasetValidationError(f"dataset file missing: {p}")
    return paths


def _load_dataset(data_dir: str):
    lp, yp, tp = _dataset_paths(data_dir)
    logits = tensorio.read_tensor(lp)
    labels = tensorio.read_tensor(yp)
    leads = tensorio.read_tensor(tp)
    dims = tensorio.validate_dataset(logits, labels, leads)
    return logits, labels, leads, dims


def _dataset_digests(data_dir: str) -> dict[str, str]:
    return {p.name: _sha256(p) for p in _dataset_paths(data_dir)}


def _resolve_probs(args, logits, labels) -> tuple[np.ndarray, str]:
    if getattr(args, "probs", None):
        probs = tensorio.read_tensor(args.probs)
        n, h, w = labels.shape
        if probs.ndim != 4 or probs.shape[0] != n or probs.shape[2:] != (h, w):
            raise tensorio.DatasetValidationError(
                f"probs: shape {probs.shape} does not match labels {labels.shape}"
            )
        return probs, args.probs
    return metrics.class_probabilities(logits), "softmax(logits)"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.time()
    try:
        distortion = synth.parse_distortion(args.distortion)
        scenario = synth.SynthScenario(
            n_samples=args.samples,
            height=args.height,
            width=args.width,
            n_classes=args.classes,
            n_lead_times=args.lead_times,
            distortion=distortion,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    logits, labels, leads = synth.generate(scenario)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tensorio.write_tensor(logits, out / "logits.fct1")
    tensorio.write_tensor(labels, out / "labels.fct1")
    tensorio.write_tensor(leads, out / "lead_times.fct1")
    with open(out / "scenario.json", "w") as f:
        json.dump(synth.scenario_to_dict(scenario), f, indent=2, sort_keys=True)
        f.write("\n")
    outputs = [out / n for n in (*DATASET_FILES, "scenario.json")]
    _write_manifest(out, "synth", _plain_args(args), [], outputs, started, args.seed)
    print(f"wrote {args.samples} samples to {out}")
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    logits, labels, leads, dims = _load_dataset(args.data)
    probs, probs_source = _resolve_probs(args, logits, labels)
    report = metrics.compute_report(
        probs,
        labels,
        leads,
        conf_binning=metrics.ConfidenceBinning(args.bins),
        f1_threshold_mm_per_h=args.f1_threshold,
    )
    doc = report.to_json_dict(probs_source=probs_source)
    doc["metadata"]["dataset_digests"] = _dataset_digests(args.data)

    report_path = Path(args.report)
    with open(report_path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    outputs = [report_path]
    if args.diagram:
        rows = metrics.diagram_export(report.table)
        metrics.write_diagram_csv(rows, args.diagram)
        outputs.append(Path(args.diagram))
    inputs = _dataset_paths(args.data) + ([Path(args.probs)] if args.probs else [])
    _write_manifest(report_path, "eval", _plain_args(args), inputs, outputs, started)
    print(f"etce average: {report.etce.average:.6f} (report: {report_path})")
    return 0


def cmd_fit(args) -> int:
    started = time.time()
    logits, labels, leads, dims = _load_dataset(args.data)
    seed = args.seed
    if args.method == "ts":
        bundle = calibrators.fit_temperature(logits, labels, leads)
    elif args.method == "lts":
        epochs = args.epochs if args.epochs is not None else 30
        bundle = calibrators.fit_lts(
            logits, labels, leads,
            conditioned=args.conditioned == "true",
            epochs=epochs, seed=seed,
        )
    elif args.method == "ss":
        epochs = args.epochs if args.epochs is not None else 12
        bundle = calibrators.fit_ss(logits, labels, leads, epochs=epochs, seed=seed)
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown method {args.method}")
    bundle.metadata["n_classes"] = dims.n_classes
    bundle.metadata["n_lead_times"] = dims.n_lead_times
    bundle.metadata["fit_dataset_digests"] = _dataset_digests(args.data)

    out = Path(args.out)
    calibrators.save_calibrator(bundle, out)
    outputs = sorted(p for p in out.rglob("*") if p.is_file())
    _write_manifest(out, "fit", _plain_args(args), _dataset_paths(args.data), outputs, started, seed)
    if "final_loss" in bundle.metadata:
        print(f"fitted {args.method} (final loss {bundle.metadata['final_loss']:.6f}) -> {out}")
    else:
        print(f"fitted {args.method} -> {out}")
    return 0


def cmd_apply(args) -> int:
    started = time.time()
    logits, labels, leads, dims = _load_dataset(args.data)
    bundle = calibrators.load_calibrator(args.bundle)
    k_fit = bundle.metadata.get("n_classes")
    if k_fit is not None and k_fit != dims.n_classes:
        raise tensorio.DatasetValidationError(
            f"bundle was fitted on {k_fit} classes but dataset has {dims.n_classes}"
        )
    digests = _dataset_digests(args.data)
    fit_digests = bundle.metadata.get("fit_dataset_digests")
    if fit_digests == digests:
        print(
            "warning: apply dataset is identical to the bundle's fit dataset "
            "(digests match); evaluation on it is not held out",
            file=sys.stderr,
        )
    probs = calibrators.apply_calibrator(bundle, logits, leads).astype(np.float32)
    out = Path(args.out)
    tensorio.write_tensor(probs, out)
    inputs = _dataset_paths(args.data) + sorted(
        p for p in Path(args.bundle).rglob("*") if p.is_file()
    )
    _write_manifest(out, "apply", _plain_args(args), inputs, [out], started)
    print(f"wrote calibrated probabilities to {out}")
    return 0


def cmd_diagram(args) -> int:
    started = time.time()
    logits, labels, leads, dims = _load_dataset(args.data)
    probs, _source = _resolve_probs(args, logits, labels)
    binning = metrics.RateBinning()
    if args.threshold is not None:
        try:
            binning.threshold_index(args.threshold)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    table = metrics.reliability_table(
        probs, labels, leads, binning, metrics.ConfidenceBinning(args.bins)
    )
    rows = metrics.diagram_export(table, threshold=args.threshold, lead_time=args.lead_time)
    metrics.write_diagram_csv(rows, args.out)
    out = Path(args.out)
    inputs = _dataset_paths(args.data) + ([Path(args.probs)] if args.probs else [])
    _write_manifest(out, "diagram", _plain_args(args), inputs, [out], started)
    print(f"wrote {len(rows)} diagram rows to {out}")
    return 0


def _plain_args(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _build_parser() -> _Parser:
    parser = _Parser(prog="nowcal", description="Calibration toolkit for gridded forecasts")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with known calibration")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--height", type=int, default=16)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--lead-times", type=int, default=6)
    p.add_argument(
        "--distortion",
        default="none",
        help="none | temp:TAU | schedule[:T0,..] | planted[:TAU_BAD[,GAP]] "
        "(planted uses the near-deterministic prior)",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="compute the calibration report for a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--probs", help="FCT1 probabilities replacing softmax(logits)")
    p.add_argument("--report", required=True, help="output JSON report path")
    p.add_argument("--diagram", help="also write the full reliability CSV here")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--f1-threshold", type=float, default=1.0, help="rate threshold in mm/h")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fit", help="fit a calibrator and write its bundle directory")
    p.add_argument("--data", required=True)
    p.add_argument("--method", required=True, choices=["ts", "lts", "ss"])
    p.add_argument("--conditioned", choices=["true", "false"], default="true",
                   help="lead-time conditioning (lts only)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("apply", help="apply a fitted calibrator to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True, help="output probabilities FCT1 path")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("diagram", help="export reliability-diagram rows as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--probs", help="FCT1 probabilities replacing softmax(logits)")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=None, help="restrict to one rate threshold")
    p.add_argument("--lead-time", type=int, default=None, help="restrict to one lead time")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_diagram)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (tensorio.TensorIOError, tensorio.DatasetValidationError,
            calibrators.BundleFormatError, calibrators.NoMispredictionsError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (diffnet.DivergenceError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
