"""Command-line entry point: ``stephys <command> [--config FILE] [--seed N] [--out DIR]``.

On failure every command prints one line ``error: {json}`` to stderr and
exits nonzero (2 for bad configuration, 1 otherwise). The output directory
comes from ``--out``, else ``$STEPHYS_OUT``, else the config file.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import harness
from .dataset import export_classification_set, export_scene_set, generate_classification_set, generate_scene_set
from .harness import HarnessError
from .model import ModelError, TrainingDiverged, save_weights

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config's global seed")
    p.add_argument("--out", type=Path, help=f"output directory (overrides ${harness.OUT_ENV} and the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stephys", description="Straight-through attacks on simulated physical pipelines.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", help="export the classification and scene corpora as PPM + manifest")
    _common(p)
    p = sub.add_parser("train", help="train the classifier and/or the scene model")
    _common(p)
    p.add_argument("--task", choices=("classifier", "scene", "both"), default="both")
    p = sub.add_parser("attack-global", help="run the global perturbation sweep")
    _common(p)
    p = sub.add_parser("attack-patch", help="run the billboard patch sweep")
    _common(p)
    p = sub.add_parser("report", help="re-verify a finished run from its files and print its summary")
    _common(p)
    return parser


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_gen_data(args) -> dict:
    cfg = _config(args)
    out = harness.resolve_out(cfg, args.out)
    k = cfg.data.classes
    written = {}
    for which in ("train", "test"):
        spec = getattr(cfg.data, which)
        path = export_classification_set(generate_classification_set(spec.seed, spec.count, k), out / which)
        written[which] = str(path)
    for which in ("scene_train", "scenes"):
        spec = getattr(cfg.data, which)
        path = export_scene_set(generate_scene_set(spec.seed, spec.count, k), out / which)
        written[which] = str(path)
    return {"command": "gen-data", "out": str(out), "manifests": written}


def cmd_train(args) -> dict:
    cfg = _config(args)
    out = harness.resolve_out(cfg, args.out)
    result = {"command": "train", "models": {}}
    jobs = []
    if args.task in ("classifier", "both"):
        jobs.append(("classifier", harness.train_classifier, cfg.model))
    if args.task in ("scene", "both"):
        jobs.append(("scene", harness.train_scene_model, cfg.scene_model))
    out.mkdir(parents=True, exist_ok=True)
    for name, fn, path in jobs:
        model, report = fn(cfg)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_weights(model, path)
        info = {
            "weights": str(path),
            "spec": model.spec_string,
            "fingerprint": f"{model.fingerprint:016x}",
            "heldout_accuracy": report.heldout_accuracy,
            "epochs": [asdict(e) for e in report.epochs],
        }
        (out / f"train_{name}.json").write_text(json.dumps(info, indent=2) + "\n")
        result["models"][name] = {k: info[k] for k in ("weights", "heldout_accuracy")}
    return result


def _attack(args, run) -> dict:
    cfg = _config(args)
    out = harness.resolve_out(cfg, args.out)
    summary = run(cfg)
    harness.emit_report(summary, out, cfg)
    return {
        "command": args.command,
        "out": str(out),
        "rows": [dict(zip(harness.SUMMARY_COLUMNS, r.as_csv())) for r in summary.rows],
    }


def cmd_report(args) -> dict:
    cfg = _config(args)
    out = harness.resolve_out(cfg, args.out)
    rows = harness.read_summary(out)
    harness.verify_outputs(out)
    print(harness.format_table(rows))
    return {"command": "report", "out": str(out), "verified": True, "rows": len(rows)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attack-global": lambda a: _attack(a, harness.run_global_experiment),
    "attack-patch": lambda a: _attack(a, harness.run_patch_experiment),
    "report": cmd_report,
}


def _fail(kind: str, message: str, code: int) -> int:
    print("error: " + json.dumps({"type": kind, "message": message}, sort_keys=True), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = COMMANDS[args.command](args)
    except HarnessError as exc:
        return _fail(exc.kind, str(exc), EXIT_CONFIG if exc.kind == "config" else EXIT_RUNTIME)
    except TrainingDiverged as exc:
        return _fail("diverged", str(exc), EXIT_RUNTIME)
    except (ModelError, ValueError) as exc:
        return _fail("invalid", str(exc), EXIT_RUNTIME)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_RUNTIME)
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
