"""
Main module for the Clean Codes project.
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from clean_codes.config import DEFAULT_CONFIG_PATH, CleanCodesConfig
from clean_codes.errors import CleanCodesError

logger = logging.getLogger(__name__)

STAGE_COMMANDS = {
    "pretrain-backbone": "pretrain_backbone",
    "pretrain-codebook": "pretrain_codebook",
    "finetune": "finetune",
}


def _output_dir(config: CleanCodesConfig, requested: Optional[str], name: str) -> str:
    return requested or os.path.join(config.get_output_root(), name)


def _data_dir(config: CleanCodesConfig, requested: Optional[str]) -> str:
    return requested or os.path.join(config.get_output_root(), "data")


def run_synth_data(config: CleanCodesConfig, out_dir: Optional[str]) -> int:
    from clean_codes.corpus import build_manifest

    out_dir = _data_dir(config, out_dir)
    print(f"🎙️  Synthesizing corpus into {out_dir}")
    manifest = build_manifest(config.get_corpus_config(), out_dir)
    for split in ("train", "valid", "test"):
        print(f"   {split}: {len(manifest.split(split))} utterances")
    print("✅ Corpus ready")
    return 0


def run_training_stage(config: CleanCodesConfig, command: str, args) -> int:
    from clean_codes.corpus import Manifest
    from clean_codes.data import PairedDataset
    from clean_codes.trainer import Checkpoint, run_stage

    stage = STAGE_COMMANDS[command]
    if getattr(args, "allow_random_codebook", False):
        config = config.with_overrides({"train.allow_random_codebook": True})
    if getattr(args, "allow_random_backbone", False):
        config = config.with_overrides({"train.allow_random_backbone": True})

    manifest = Manifest.load(_data_dir(config, args.data))
    dataset = PairedDataset.from_manifest(manifest, "train")
    out_dir = _output_dir(config, args.out, "train")

    dependencies: Dict[str, Checkpoint] = {}
    if getattr(args, "backbone", None):
        dependencies["pretrain_backbone"] = Checkpoint.load(args.backbone)
    if getattr(args, "codebook", None):
        dependencies["pretrain_codebook"] = Checkpoint.load(args.codebook)
    resume = Checkpoint.load(args.resume) if getattr(args, "resume", None) else None

    result = run_stage(config, stage, dataset, out_dir, dependencies, resume)
    curve = result.loss_curve
    print(f"📉 {stage}: loss {curve[0]:.4f} -> {curve[-1]:.4f} over {len(curve)} steps")
    return 0


def run_evaluate(config: CleanCodesConfig, args) -> int:
    from clean_codes.corpus import Manifest
    from clean_codes.data import PairedDataset
    from clean_codes.trainer import Checkpoint, evaluate, model_from_checkpoint

    eval_cfg = config.get_eval_config()
    split = args.split or eval_cfg.get("split", "test")
    checkpoint = Checkpoint.load(args.checkpoint)
    model = model_from_checkpoint(checkpoint)
    dataset = PairedDataset.from_manifest(Manifest.load(_data_dir(config, args.data)), split)
    report = evaluate(model, dataset, int(eval_cfg.get("batch_size", 16)),
                      {checkpoint.stage: checkpoint.loss_curve})

    out_dir = _output_dir(config, args.out, "eval")
    report.write_csv(os.path.join(out_dir, "metrics.csv"))
    report.write_json(os.path.join(out_dir, "metrics.json"))
    for name, value in report.summary().items():
        print(f"   {name}: {'n/a' if value is None else f'{value:.4f}'}")
    print(f"✅ Metrics written to {out_dir}")
    return 0


def run_ablate(config: CleanCodesConfig, args) -> int:
    from clean_codes.ablation import AblationGrid, run_ablation
    from clean_codes.corpus import Manifest
    from clean_codes.data import PairedDataset

    grid = AblationGrid.from_file(args.grid) if args.grid else AblationGrid()
    manifest = Manifest.load(_data_dir(config, args.data))
    train_set = PairedDataset.from_manifest(manifest, "train")
    eval_set = PairedDataset.from_manifest(manifest, config.get_eval_config().get("split", "test"))
    rows = run_ablation(grid, config, train_set, eval_set, _output_dir(config, args.out, "ablation"), args.seeds)
    failed = [row for row in rows if row["status"] != "ok"]
    if failed:
        print(f"⚠️  {len(failed)} of {len(rows)} ablation cells failed")
    return 0


def run_export(config: CleanCodesConfig, args) -> int:
    from clean_codes.corpus import Manifest
    from clean_codes.export import export_features
    from clean_codes.trainer import Checkpoint

    checkpoint = Checkpoint.load(args.checkpoint)
    manifest = None if args.which == "codebook" else Manifest.load(_data_dir(config, args.data))
    result = export_features(checkpoint, manifest, args.which, _output_dir(config, args.out, "export"),
                             split=args.split or "test")
    print(f"✅ Exported {result.which} {result.shape} to {result.matrix_path}")
    return 0


def report_self_checks() -> bool:
    from clean_codes.checks import run_self_checks

    results = run_self_checks()
    failed = [r for r in results if not r.passed]
    for result in failed:
        print(f"❌ Self-check {result.name}: {result.detail}")
    if not failed:
        print(f"✅ {len(results)} self-checks passed")
    return not failed


def parse_arguments(argv: Optional[List[str]] = None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(description="Clean Codes: codebook-restored noise-robust speech recognition")
    parser.add_argument("--config", default=DEFAULT_CONFIG_PATH,
                        help=f"Path to configuration file (default: {DEFAULT_CONFIG_PATH})")
    parser.add_argument("--skip-checks", action="store_true", help="Do not run the invariant self-checks")
    subparsers = parser.add_subparsers(dest="command", required=True)

    synth = subparsers.add_parser("synth-data", help="Build the synthetic paired corpus and manifests")
    synth.add_argument("--out", help="Corpus directory (default: $CLEAN_CODES_OUTPUT_ROOT/data)")

    for command, stage in STAGE_COMMANDS.items():
        sub = subparsers.add_parser(command, help=f"Run the {stage} stage")
        sub.add_argument("--data", help="Corpus directory with the split manifests")
        sub.add_argument("--out", help="Directory for stage checkpoints")
        sub.add_argument("--resume", help="Checkpoint of this stage to continue from")
        sub.add_argument("--allow-random-backbone", action="store_true",
                         help="Start without a pretrained backbone checkpoint")
        if stage != "pretrain_backbone":
            sub.add_argument("--backbone", help="Backbone checkpoint (default: <out>/pretrain_backbone.pt)")
        if stage == "finetune":
            sub.add_argument("--codebook", help="Codebook checkpoint (default: <out>/pretrain_codebook.pt)")
            sub.add_argument("--allow-random-codebook", action="store_true",
                             help="Finetune with a freshly initialised codebook")

    evaluate = subparsers.add_parser("evaluate", help="WER and code accuracy per noise condition")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data")
    evaluate.add_argument("--split")
    evaluate.add_argument("--out")

    ablate = subparsers.add_parser("ablate", help="Run an ablation grid")
    ablate.add_argument("--grid", help="YAML/JSON file mapping axis names to value lists")
    ablate.add_argument("--data")
    ablate.add_argument("--out")
    ablate.add_argument("--seeds", type=int, nargs="+", help="Seeds shared by every cell")

    export = subparsers.add_parser("export-features", help="Export representations for plotting")
    export.add_argument("--checkpoint", required=True)
    export.add_argument("--which", required=True, choices=["Z_n", "Z_c", "Z_q", "Z_f", "codebook"])
    export.add_argument("--data")
    export.add_argument("--split")
    export.add_argument("--out")

    return parser.parse_args(argv)


def run_command(args) -> int:
    print("🚀 Clean Codes")
    print("=" * 60)
    print("📋 Loading configuration...")
    config = CleanCodesConfig(args.config)

    try:
        if args.command == "synth-data":
            code = run_synth_data(config, args.out)
        elif args.command in STAGE_COMMANDS:
            code = run_training_stage(config, args.command, args)
        elif args.command == "evaluate":
            code = run_evaluate(config, args)
        elif args.command == "ablate":
            code = run_ablate(config, args)
        else:
            code = run_export(config, args)
    except CleanCodesError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"❌ {e}")
        return 1

    if code == 0 and not args.skip_checks and not report_self_checks():
        return 2
    return code


def main(argv: Optional[List[str]] = None) -> int:
    return run_command(parse_arguments(argv))


def synth_data_main(argv: Optional[List[str]] = None) -> int:
    """Entry point for ``synth-data --config <path> --out <dir>``."""
    return main(_synth_argv(list(sys.argv[1:] if argv is None else argv)))


def _synth_argv(argv: List[str]) -> List[str]:
    parser = argparse.ArgumentParser(description="Build the synthetic paired corpus")
    parser.add_argument("--config", default=DEFAULT_CONFIG_PATH)
    parser.add_argument("--out")
    parser.add_argument("--skip-checks", action="store_true")
    args = parser.parse_args(argv)
    out = ["--config", args.config]
    if args.skip_checks:
        out.append("--skip-checks")
    out.append("synth-data")
    if args.out:
        out += ["--out", args.out]
    return out


if __name__ == "__main__":
    sys.exit(main())
