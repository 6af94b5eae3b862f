"""Command-line entry point: run / grid / eval / report subcommands."""

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .data import TASK_REID, load_dataset
from .experiments import (SyntheticSpec, ManifestSpec, EXPERIMENT_NAMES,
                          aggregate_mean, default_train_config, emit_report,
                          load_rows, load_spec, run_experiment, run_grid,
                          row_to_dict, save_rows)
from .trainer import evaluate_par, evaluate_reid, load_model


def _parse_seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.split(",") if s.strip())


def _cmd_run(args):
    spec = load_spec(args.spec)
    row = run_experiment(spec)
    out = Path(spec.output_dir)
    rows_path = out / "rows.json"
    rows = load_rows(rows_path) if rows_path.is_file() else []
    rows.append(row)
    save_rows(rows, rows_path)
    print(json.dumps(row_to_dict(row), indent=2))
    return 0


def _cmd_grid(args):
    if args.data == "synthetic":
        data = SyntheticSpec()
        if args.samples:
            data = replace(data, samples_per_dataset=args.samples)
    else:
        payload = json.loads(Path(args.data).read_text())
        if "manifests" in payload:
            data = ManifestSpec(**payload["manifests"])
        elif "synthetic" in payload:
            data = SyntheticSpec(**payload["synthetic"])
            data = replace(data, image_size=tuple(data.image_size))
        else:
            raise SystemExit(f"{args.data}: expected a 'manifests' or 'synthetic' block")
    base = default_train_config()
    if args.epochs:
        base = replace(base, epochs=args.epochs)
    if args.batch_size:
        base = replace(base, batch_size=args.batch_size)
    names = tuple(args.names.split(",")) if args.names else EXPERIMENT_NAMES
    rows = run_grid(data, args.out, seeds=_parse_seeds(args.seeds), names=names,
                    base_train=base)
    print(Path(args.out, "table.csv").read_text())
    print(f"{len(rows)} runs -> {args.out}/rows.json, {args.out}/table.csv", file=sys.stderr)
    return 0


def _cmd_eval(args):
    model, cfg, side = load_model(args.checkpoint)
    ds = load_dataset(args.manifest)
    if ds.task_labeled == TASK_REID:
        if not cfg.arch.has_reid:
            raise SystemExit("checkpoint has no identity head but the manifest is identity-labeled")
        m = evaluate_reid(model, ds, ds)
        result = {"side": side, "map": m.map, "cmc": {str(k): v for k, v in m.cmc.items()}}
    else:
        if not cfg.arch.has_par:
            raise SystemExit("checkpoint has no attribute head but the manifest is attribute-labeled")
        m = evaluate_par(model, ds, threshold=args.threshold)
        result = {"side": side, "ma": m.ma, "f1": m.f1,
                  "precision": m.precision, "recall": m.recall}
    print(json.dumps(result, indent=2))
    return 0


def _cmd_report(args):
    rows = load_rows(Path(args.in_dir) / "rows.json")
    emit_report(aggregate_mean(rows), args.out)
    print(Path(args.out).read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ka", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a JSON/TOML spec file")
    run_p.add_argument("--spec", required=True, help="experiment spec file")
    run_p.set_defaults(fn=_cmd_run)

    grid_p = sub.add_parser("grid", help="run the full experiment grid")
    grid_p.add_argument("--data", default="synthetic",
                        help="'synthetic' or a JSON file with a manifests/synthetic block")
    grid_p.add_argument("--out", required=True, help="output directory")
    grid_p.add_argument("--seeds", default="1,2,3", help="comma-separated seed list")
    grid_p.add_argument("--names", default="",
                        help=f"comma-separated subset of {','.join(EXPERIMENT_NAMES)}")
    grid_p.add_argument("--epochs", type=int, default=0, help="override training epochs")
    grid_p.add_argument("--batch-size", type=int, default=0, help="override batch size")
    grid_p.add_argument("--samples", type=int, default=0,
                        help="override synthetic samples per dataset")
    grid_p.set_defaults(fn=_cmd_grid)

    eval_p = sub.add_parser("eval", help="evaluate a saved model on a manifest")
    eval_p.add_argument("--checkpoint", required=True, help="model file from a run")
    eval_p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    eval_p.add_argument("--threshold", type=float, default=0.5,
                        help="attribute binarization threshold")
    eval_p.set_defaults(fn=_cmd_eval)

    report_p = sub.add_parser("report", help="aggregate rows.json into a CSV table")
    report_p.add_argument("--in", dest="in_dir", required=True,
                          help="directory containing rows.json")
    report_p.add_argument("--out", required=True, help="output CSV path")
    report_p.set_defaults(fn=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
