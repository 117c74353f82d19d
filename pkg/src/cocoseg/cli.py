"""Command-line entry points: dataset generation, training, evaluation, and
embedding export.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import synthdata, tensorio
from .models import load_checkpoint_model
from .tensorio import SPLIT_NAMES
from .trainer import TrainConfig, evaluate_split, export_slice_embeddings, run_training

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; this project reserves 2 for runtime
    # failures, so remap usage problems to 1.
    def error(self, message):  # noqa: D102
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cocoseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[], help="generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--cases", type=int, default=20)
    gen.add_argument("--slices", type=int, default=6, help="slices per case")
    gen.add_argument("--size", type=int, default=64, help="square image side")
    gen.add_argument("--labeled-frac", type=float, default=0.05)
    gen.add_argument("--unlabeled-frac", type=float, default=0.65)
    gen.add_argument("--val-frac", type=float, default=0.15)
    gen.add_argument("--test-frac", type=float, default=0.15)
    gen.add_argument("--noise-std", type=float, default=0.08)
    gen.add_argument("--bias-strength", type=float, default=0.35)
    gen.add_argument("--class3-prob", type=float, default=0.7)

    train = sub.add_parser("train", help="run one training experiment")
    train.add_argument("--config", required=True, help="JSON training config")
    train.add_argument("--out", required=True, help="run output directory")
    train.add_argument("--manifest", help="override the config's dataset manifest")
    train.add_argument("--iterations", type=int)
    train.add_argument("--seed", type=int)
    train.add_argument(
        "--ablate",
        action="append",
        default=[],
        metavar="TOKEN",
        help="cl | cross | balance | labeled-only | scales=64x64,16x16",
    )

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--split", default="test", choices=list(SPLIT_NAMES))
    ev.add_argument("--out", required=True, help="report JSON path")

    exp = sub.add_parser("export-embeddings", help="dump per-pixel embeddings of one slice")
    exp.add_argument("--checkpoint", required=True)
    exp.add_argument("--manifest", required=True)
    exp.add_argument("--slice", required=True, metavar="CASE:IDX")
    exp.add_argument("--scale", type=int, required=True, help="tap height, e.g. 64")
    exp.add_argument("--out", required=True, help="output directory")
    return parser


def _apply_ablations(config: TrainConfig, tokens: list[str]) -> TrainConfig:
    for token in tokens:
        if token == "cl":
            config.enable_cl = False
            config.w_cl = 0.0
        elif token == "cross":
            config.enable_cross_labels = False
        elif token == "balance":
            config.enable_balancing = False
        elif token == "labeled-only":
            config.labeled_only = True
            config.enable_cl = False
            config.w_cl = 0.0
        elif token.startswith("scales="):
            scales = []
            for part in token[len("scales=") :].split(","):
                dims = part.lower().split("x")
                if len(dims) == 1:
                    dims = dims * 2
                try:
                    scales.append((int(dims[0]), int(dims[1])))
                except ValueError as exc:
                    raise UsageError(f"bad scale spec {part!r}") from exc
            config.cl_scales = tuple(scales)
        else:
            raise UsageError(f"unknown ablation token {token!r}")
    return config


def cmd_gen_data(args) -> int:
    fractions = {
        "labeled_train": args.labeled_frac,
        "unlabeled_train": args.unlabeled_frac,
        "val": args.val_frac,
        "test": args.test_frac,
    }
    total = sum(fractions.values())
    if abs(total - 1.0) > 1e-6:
        raise UsageError(f"split fractions sum to {total}, expected 1")
    config = synthdata.SynthConfig(
        seed=args.seed,
        n_cases=args.cases,
        slices_per_case=args.slices,
        image_size=(args.size, args.size),
        noise_std=args.noise_std,
        bias_field_strength=args.bias_strength,
        class3_presence_prob=args.class3_prob,
    )
    manifest, stats = synthdata.generate_dataset(config, args.out, fractions)
    print(f"wrote {len(manifest.cases)} cases to {args.out}")
    print(f"split counts: {stats['split_counts']}")
    fracs = ", ".join(
        f"class {c}: {f:.4f}" for c, f in enumerate(stats["class_pixel_fractions"])
    )
    print(f"pixel fractions: {fracs}")
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config)
    if args.manifest:
        config.manifest = args.manifest
    if args.iterations is not None:
        config.iterations = args.iterations
    if args.seed is not None:
        config.seed = args.seed
    config = _apply_ablations(config, args.ablate)
    if not config.manifest:
        raise UsageError("no dataset manifest (config.manifest or --manifest)")
    manifest = tensorio.load_manifest(config.manifest)
    record = run_training(manifest, config, args.out)
    if record.best:
        print(f"best val mean DSC {record.best['mean_dsc']:.4f} at t={record.best['t']}")
    print(f"run record: {Path(args.out) / 'run_record.jsonl'}")
    return 0


def _print_report(report, num_classes: int) -> None:
    header = ["class".ljust(10), "DSC".rjust(8), "HD95".rjust(8)]
    print("".join(header))
    for cls in range(num_classes):
        hd = report.class_hd95[cls]
        print(
            f"{cls:<10d}{report.class_dsc[cls]:>8.4f}"
            + (f"{hd:>8.2f}" if hd is not None else "   undef")
        )
    mean_hd = f"{report.mean_hd95:>8.2f}" if report.mean_hd95 is not None else "   undef"
    print(f"{'mean(fg)':<10}{report.mean_dsc:>8.4f}{mean_hd}")


def cmd_eval(args) -> int:
    model = load_checkpoint_model(args.checkpoint, strict=False)
    manifest = tensorio.load_manifest(args.manifest)
    report = evaluate_split(model, manifest, args.split)
    report.save(args.out)
    _print_report(report, manifest.num_classes)
    print(f"report: {args.out}")
    return 0


def cmd_export_embeddings(args) -> int:
    try:
        case_id, idx_str = args.slice.rsplit(":", 1)
        slice_index = int(idx_str)
    except ValueError as exc:
        raise UsageError(f"--slice expects CASE:IDX, got {args.slice!r}") from exc

    model = load_checkpoint_model(args.checkpoint, strict=False)
    manifest = tensorio.load_manifest(args.manifest)
    case = next((c for c in manifest.cases if c.case_id == case_id), None)
    if case is None:
        raise FileNotFoundError(f"case {case_id!r} not in manifest")
    rec = next((s for s in case.slices if s.slice_index == slice_index), None)
    if rec is None or rec.label is None:
        raise FileNotFoundError(f"slice {args.slice!r} not found or unlabeled")

    scale = next(
        (tuple(s) for s in model.config.tap_scales if s[0] == args.scale), None
    )
    if scale is None:
        raise UsageError(
            f"no tap scale of height {args.scale}; available: {model.config.tap_scales}"
        )
    image = tensorio.read_tensor(manifest.resolve(rec.image))
    label = tensorio.read_tensor(manifest.resolve(rec.label))
    emb, lab = export_slice_embeddings(model, image, label, scale)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{case_id}_s{slice_index:03d}_{scale[0]}x{scale[1]}"
    tensorio.write_tensor(out_dir / f"{stem}_embeddings.mct", emb.astype(np.float32))
    tensorio.write_tensor(out_dir / f"{stem}_labels.mct", lab.astype(np.uint8))
    print(f"wrote {emb.shape[0]} embedding rows of dim {emb.shape[1]} to {out_dir}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"cocoseg {args.command}: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        traceback.print_exc()
        print(f"cocoseg {args.command}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
