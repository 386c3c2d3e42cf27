"""Command-line front end: ``transferkit {run,predict,extract,export}``.

Examples::

    transferkit run --config exp.yaml --set training.epochs=5 --seed 7 --out results
    transferkit predict --run-dir results/run-ab12cd34 --folder new_images --sort-by variance
    transferkit extract --run-dir results/run-ab12cd34 --layer-name dense_1 --out features
    transferkit export --run-dir results/run-ab12cd34 --out archive
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import apply_defaults, load_config_file, set_dotted
from .errors import TransferKitError
from .experiment import TransferExperiment
from .inference import (
    SORT_KEYS,
    load_model,
    load_results,
    model_feature_extract,
    model_predict,
    reexport,
    write_predictions_csv,
)


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = yaml.safe_load(raw) if raw != "" else ""
    except yaml.YAMLError as exc:
        raise argparse.ArgumentTypeError(f"cannot parse value in {text!r}: {exc}") from exc
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML/JSON document with the six config sections")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        type=parse_override,
        metavar="KEY=VALUE",
        help="override one config key, e.g. training.epochs=5 (repeatable)",
    )
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, help="output location")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="transferkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="train, evaluate and export a run")

    predict = sub.add_parser("predict", parents=[common], help="predict every image in a folder")
    predict.add_argument("--run-dir", type=Path, required=True)
    predict.add_argument("--folder", type=Path, required=True)
    predict.add_argument("--sort-by", choices=SORT_KEYS, default="none")

    extract = sub.add_parser("extract", parents=[common], help="write per-split layer features")
    extract.add_argument("--run-dir", type=Path, required=True)
    selector = extract.add_mutually_exclusive_group(required=True)
    selector.add_argument("--layer-name")
    selector.add_argument("--layer-index", type=int)

    export = sub.add_parser("export", parents=[common], help="re-export a run into a new folder")
    export.add_argument("--run-dir", type=Path, required=True)
    export.add_argument("--fixed", action="store_true", help="write to <out>/latest instead of a random folder")
    return parser


def resolve_config(args) -> dict:
    partial = load_config_file(args.config) if args.config else {}
    for key, value in args.overrides:
        partial = set_dotted(partial, key, value)
    return partial


def cmd_run(args) -> int:
    experiment = TransferExperiment(config=apply_defaults(resolve_config(args)), seed=args.seed)
    experiment.run()
    path = experiment.export_all(base_path=args.out or Path("results"), export_model=True, additive=True)
    print(path)
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.run_dir)
    records = model_predict(model, args.folder, sort_by=args.sort_by)
    if args.out:
        write_predictions_csv(records, args.out)
        print(args.out)
    else:
        write_predictions_csv(records, sys.stdout)
    return 0


def cmd_extract(args) -> int:
    results = load_results(args.run_dir)
    partial = results.config
    for key, value in args.overrides:
        partial = set_dotted(partial, key, value)
    seed = results.seed if results.seed is not None else args.seed
    experiment = TransferExperiment(config=apply_defaults(partial), seed=seed)
    bundle = experiment.prepare_data()
    model = load_model(args.run_dir)
    feats = model_feature_extract(model, bundle, layer_index=args.layer_index, layer_name=args.layer_name)
    out = args.out or Path(args.run_dir) / "features"
    out.mkdir(parents=True, exist_ok=True)
    for split, x in feats.features.items():
        np.savez(out / f"features_{split}.npz", X=x, y=feats.labels[split], paths=[str(p) for p in bundle.paths(split)])
    print(out)
    return 0


def cmd_export(args) -> int:
    path = reexport(args.run_dir, args.out or Path("results"), additive=not args.fixed)
    print(path)
    return 0


COMMANDS = {"run": cmd_run, "predict": cmd_predict, "extract": cmd_extract, "export": cmd_export}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TransferKitError, ValueError, OSError) as exc:
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"transferkit {args.command}: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
