import argparse
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import pandas as pd

from stzoo import analysis
from stzoo.archspec import (
    ArchSpec,
    Backbone,
    DataProtocol,
    EvalLevel,
    ExperimentConfig,
    Family,
    Init,
    Placement,
    SamplerConfig,
    SamplingMode,
    Schedule,
    Strategy,
    TrainProtocol,
    load_config,
    override,
    save_config,
)
from stzoo.backbones import WEIGHTS_ENV
from stzoo.datapipe import PreprocessSpec, SyntheticTask, make_mini_manifest, make_synthetic, open_dataset
from stzoo.engine import LAST_CHECKPOINT, evaluate, reset_classifier, stage_dir, train, train_progressive
from stzoo.errors import ConfigError, StzooError
from stzoo.factory import assemble, audit, load_checkpoint, retarget_frames
from stzoo.plotter import ReportPlotter
from stzoo.profiler import COST_COLUMNS, profile
from stzoo.sampling import dump_plans, plans_to_frame, sample

LOG = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
SYNTHETIC_FRAMES = 16

# flag -> dotted config field; one flag may feed several fields
FLAG_FIELDS = {
    "family": ("arch.family",),
    "backbone": ("arch.backbone",),
    "frames": ("arch.frames", "sampler.frames"),
    "temporal_pool": ("arch.temporal_pool",),
    "placement": ("arch.placement",),
    "num_classes": ("arch.num_classes",),
    "dataset": ("dataset",),
    "subset": ("subset",),
    "protocol": ("protocol",),
    "strategy": ("sampler.strategy",),
    "stride": ("sampler.stride",),
    "mode": ("sampler.mode",),
    "epochs": ("train.epochs",),
    "lr": ("train.lr",),
    "peak_lr": ("train.peak_lr",),
    "warmup_epochs": ("train.warmup_epochs",),
    "schedule": ("train.schedule",),
    "momentum": ("train.momentum",),
    "weight_decay": ("train.weight_decay",),
    "step_milestones": ("train.step_milestones",),
    "step_gamma": ("train.step_gamma",),
    "batch_size": ("train.batch_size",),
    "progressive": ("train.progressive",),
    "level": ("eval.level",),
    "clips": ("eval.clips", "sampler.clips"),
    "crops": ("eval.crops",),
    "seed": ("seed", "sampler.seed"),
    "init": ("init",),
    "checkpoint": ("checkpoint",),
    "input_size": ("input_size",),
    "dropout": ("dropout",),
    "workers": ("workers",),
    "out": ("output_dir",),
}


@dataclass(frozen=True)
class CommandResult:
    exit_code: int = 0
    outputs: list = field(default_factory=list)


def _choice(enum):
    """Case-insensitive enum parser for argparse."""
    lookup = {member.value.lower(): member for member in enum}

    def parse(text):
        try:
            return lookup[text.lower()]
        except KeyError:
            raise argparse.ArgumentTypeError(f"choose from {', '.join(lookup)}") from None

    parse.__name__ = enum.__name__
    return parse


def _frame_list(text):
    try:
        return tuple(int(item) for item in text.split(",") if item)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated frame counts, got '{text}'") from None


def _fraction_list(text):
    try:
        return tuple(float(item) for item in text.split(",") if item)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated fractions, got '{text}'") from None


def _input_dims(text):
    try:
        height, _, width = text.lower().partition("x")
        return int(height), int(width or height)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got '{text}'") from None


def _add_arch_flags(parser, required=True):
    parser.add_argument("--family", type=_choice(Family), required=required, help="architecture family")
    parser.add_argument("--backbone", type=_choice(Backbone), required=required, help="2D backbone")
    parser.add_argument("--frames", type=int, default=None if not required else 8, help="frames per clip")
    parser.add_argument("--temporal-pool", action="store_true", default=None, help="add temporal max pooling")
    parser.add_argument("--placement", type=_choice(Placement), default=None, help="block module placement")
    parser.add_argument("--num-classes", type=int, default=None, help="classifier outputs")


def _arch_from_args(args):
    arch = ArchSpec(args.family, args.backbone, frames=args.frames, temporal_pool=bool(args.temporal_pool))
    if args.placement is not None:
        arch = replace(arch, placement=args.placement)
    if args.num_classes is not None:
        arch = replace(arch, num_classes=args.num_classes)
    return arch.check()


def _write_table(frame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def resolve_config(args):
    """
    Config file (or desk defaults) with every explicitly given flag applied on top.

    ``--transfer`` swaps in the transfer recipe and checkpoint init before the flags are applied.
    """
    if args.config:
        config = load_config(args.config)
    else:
        arch = ArchSpec(Family.TSN, Backbone.TINYNET, num_classes=2)
        config = ExperimentConfig(arch, "synthetic-direction", init=Init.SCRATCH, input_size=64)
    if getattr(args, "transfer", False):
        if args.init not in (None, Init.FROM_CHECKPOINT):
            raise ConfigError(f"transfer starts from a checkpoint, not {args.init.value} weights")
        config = replace(config, train=TrainProtocol.transfer(), init=Init.FROM_CHECKPOINT)
    changes = {}
    for flag, paths in FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes.update(dict.fromkeys(paths, value))
    if changes.get("eval.clips", 1) > 1 and "eval.level" not in changes:
        changes["eval.level"] = EvalLevel.VIDEO
    try:
        config = override(config, **changes)
    except TypeError as exc:
        raise ConfigError(f"cannot apply flags: {exc}") from None
    return config.check()


def cmd_build(args):
    model = assemble(_arch_from_args(args))
    report = audit(model)
    cost = profile(model, args.input_size)
    print(model.arch.name)
    for name, value in report.as_rows():
        print(f"  {name:<18} {value}")
    print(f"  {'flops':<18} {cost.flops}")
    print(f"  {'params':<18} {cost.params}")
    return CommandResult()


def cmd_profile(args):
    arch = _arch_from_args(args)
    model = assemble(arch)
    options = dict(max_batch_limit=args.max_batch_limit) if args.throughput else {}
    report = profile(model, args.input, device=args.device, throughput=args.throughput, **options)
    path = Path(args.out) / "profile.csv"
    table = pd.DataFrame([report.as_row()], columns=COST_COLUMNS)
    if path.is_file():
        table = pd.concat([pd.read_csv(path), table], ignore_index=True)
    _write_table(table, path)
    print(",".join(str(value) for value in report.as_row().values()))
    return CommandResult(outputs=[path])


def _synthetic_frames(config):
    return max(SYNTHETIC_FRAMES, config.arch.frames, *config.train.progressive)


def _store(config, split, data_dir):
    frames = _synthetic_frames(config)
    return open_dataset(config.dataset, data_dir, frames, config.input_size, split, subset=config.subset)


def _transfer_model(config, frames=None):
    """Weights of the checkpoint under a fresh classifier with the class count of ``config``."""
    if config.train.progressive:
        raise ConfigError("transfer does not combine with progressive training")
    model = load_checkpoint(config.checkpoint)
    if frames is not None and frames != model.arch.frames:
        model = retarget_frames(model, frames)
    LOG.info("transferring %s to %d classes", model.arch.name, config.arch.num_classes)
    return reset_classifier(model, config.arch.num_classes)


def cmd_train(args):
    config = resolve_config(args)
    out = Path(config.output_dir)
    train_store = _store(config, "train", args.data_dir)
    if args.num_classes is None and config.arch.num_classes != train_store.num_classes:
        LOG.warning("using the %d classes of %s", train_store.num_classes, config.dataset)
        config = override(config, **{"arch.num_classes": train_store.num_classes})
    model = None
    if args.transfer:
        model = _transfer_model(config, args.frames)
        config = override(config, arch=model.arch, **{"sampler.frames": model.arch.frames})
    config_path = save_config(config, out / "config.yaml")
    preprocess_spec = PreprocessSpec.for_training(config.protocol, config.input_size)
    options = dict(
        preprocess_spec=preprocess_spec,
        seed=config.seed,
        workers=config.workers,
        device=args.device,
        progress=args.progress,
    )
    if config.train.progressive:
        chain = config.train.progressive
        train_progressive(
            config.arch,
            chain,
            train_store,
            config.sampler,
            config.train,
            init=config.init,
            weights_dir=args.weights_dir,
            dropout=config.dropout,
            out_dir=out,
            **options,
        )
        checkpoint = stage_dir(out, chain[-1]) / LAST_CHECKPOINT
    else:
        if model is None:
            model = assemble(
                config.arch,
                config.init,
                weights_dir=args.weights_dir,
                checkpoint=config.checkpoint,
                dropout=config.dropout,
                force_spec=args.force_spec,
                allow_partial=args.allow_partial,
            )
        checkpoint = train(model, train_store, config.sampler, config.train, out_dir=out, **options).checkpoint
    evaluation = evaluate(
        load_checkpoint(checkpoint),
        _store(config, "val", args.data_dir),
        config.sampler,
        config.eval,
        input_size=config.input_size,
        dataset=config.dataset,
        device=args.device,
        progress=args.progress,
    )
    results = analysis.append_result(evaluation.record, out / RESULTS_FILE)
    print(f"{evaluation.record.name}: top1 {evaluation.record.top1:.2f}")
    return CommandResult(outputs=[config_path, checkpoint, results])


def cmd_eval(args):
    config = resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    store = _store(config, args.split, args.data_dir)
    evaluation = evaluate(
        model,
        store,
        config.sampler,
        config.eval,
        input_size=config.input_size,
        dataset=config.dataset,
        device=args.device,
        progress=args.progress,
    )
    results = analysis.append_result(evaluation.record, Path(config.output_dir) / RESULTS_FILE)
    row = evaluation.record.as_row()
    print(",".join(str(value) for value in row.values()))
    return CommandResult(outputs=[results])


def cmd_analyze(args):
    records = analysis.read_results(args.results)
    out = Path(args.out)
    plotter = None
    if args.report == "disentangle":
        report = analysis.disentangle(records, allow_partial=args.allow_partial)
        outputs = [
            analysis.write_report(report.rows, out / "disentangle.csv"),
            analysis.write_report(report.summary, out / "disentangle-summary.csv"),
        ]
        plotter = ReportPlotter(summary=report.summary)
        figure = (plotter.save_contributions, out / "contributions.png")
    elif args.report == "tp-gain":
        report = analysis.tp_gain(records)
        outputs = [
            analysis.write_report(report.gains, out / "tp-gain.csv"),
            analysis.write_report(report.missing, out / "tp-gain-missing.csv"),
        ]
        if len(report.missing):
            LOG.warning("%d results have no temporal pooling partner", len(report.missing))
        plotter = ReportPlotter(gains=report.gains)
        figure = (plotter.save_gains, out / "tp-gain.png")
    else:
        costs = analysis.acc_vs_flops(records)
        outputs = [analysis.write_report(costs, out / "acc-vs-flops.csv")]
        plotter = ReportPlotter(costs=costs)
        figure = (plotter.save_accuracy_vs_flops, out / "acc-vs-flops.png")
    if args.plot:
        save, path = figure
        save(path)
        outputs.append(path)
    for path in outputs:
        print(path)
    return CommandResult(outputs=outputs)


def cmd_dataset(args):
    if args.action == "synth":
        store = make_synthetic(args.task, args.videos, args.frames, args.size, args.seed, args.out, args.progress)
    else:
        store = make_mini_manifest(open_dataset(args.root, args.root), args.fraction, args.seed, args.subset)
    print(f"{store.manifest_path}: {len(store)} videos, {store.num_classes} classes")
    return CommandResult(outputs=[store.manifest_path])


def cmd_sample(args):
    config = SamplerConfig(args.strategy, args.frames, args.stride, args.clips, args.mode, args.seed)
    if args.dataset:
        store = open_dataset(args.dataset, args.data_dir, max(SYNTHETIC_FRAMES, args.frames), 64)
        lengths = {entry.video_id: entry.num_frames for entry in store.videos}
    else:
        lengths = {"video": args.num_frames}
    plans = {video_id: sample(config, length) for video_id, length in lengths.items()}
    if args.dump:
        return CommandResult(outputs=[dump_plans(plans, args.dump)])
    print(plans_to_frame(plans).to_csv(index=False, lineterminator="\n"), end="")
    return CommandResult()


def _add_experiment_flags(parser):
    """Flags that override the fields of a YAML experiment config."""
    parser.add_argument("--config", default=None, help="YAML experiment config; flags override its fields")
    parser.add_argument("--dataset", default=None, help="synthetic dataset id or FrameStore directory")
    parser.add_argument("--subset", default=None, help="manifest subset, e.g. mini for manifest-mini.csv")
    parser.add_argument("--strategy", "--sampling", type=_choice(Strategy), default=None, help="frame sampling")
    parser.add_argument("--stride", type=int, default=None, help="dense sampling stride")
    parser.add_argument("--level", type=_choice(EvalLevel), default=None, help="evaluation level")
    parser.add_argument("--clips", type=int, default=None, help="clips per video at video level")
    parser.add_argument("--crops", type=int, default=None, help="spatial crops per clip")
    parser.add_argument("--seed", type=int, default=None, help="global seed")
    parser.add_argument("--input-size", type=int, default=None, help="crop side in pixels")
    parser.add_argument("--workers", type=int, default=None, help="data loading workers")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--data-dir", default="data", help="cache for generated synthetic datasets")
    parser.add_argument("--device", default="cpu", help="torch device")
    parser.add_argument("--progress", action="store_true", help="show progress bars")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stzoo",
        description="Video action recognition model zoo with controlled spatio-temporal comparisons.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)
    formatter = argparse.ArgumentDefaultsHelpFormatter

    build = commands.add_parser("build", help="assemble a model and print its audit", formatter_class=formatter)
    _add_arch_flags(build)
    build.add_argument("--input-size", type=int, default=224, help="crop side for the FLOPs count")
    build.set_defaults(handler=cmd_build)

    train_cmd = commands.add_parser("train", help="train, then evaluate on the val split", formatter_class=formatter)
    _add_arch_flags(train_cmd, required=False)
    _add_experiment_flags(train_cmd)
    train_cmd.add_argument("--epochs", type=int, default=None, help="training epochs")
    train_cmd.add_argument("--lr", type=float, default=None, help="base learning rate")
    train_cmd.add_argument("--peak-lr", type=float, default=None, help="learning rate after warmup")
    train_cmd.add_argument("--warmup-epochs", type=int, default=None, help="linear warmup epochs")
    train_cmd.add_argument("--schedule", type=_choice(Schedule), default=None, help="decay schedule")
    train_cmd.add_argument("--momentum", type=float, default=None, help="SGD momentum")
    train_cmd.add_argument("--weight-decay", type=float, default=None, help="SGD weight decay")
    train_cmd.add_argument(
        "--step-milestones", type=_fraction_list, default=None, help="step decay points as run fractions, e.g. 0.5,0.75"
    )
    train_cmd.add_argument("--step-gamma", type=float, default=None, help="step decay factor")
    train_cmd.add_argument("--batch-size", type=int, default=None, help="clips per batch")
    train_cmd.add_argument("--progressive", type=_frame_list, default=None, help="frame chain, e.g. 8,16")
    train_cmd.add_argument("--init", type=_choice(Init), default=None, help="initial weights")
    train_cmd.add_argument("--checkpoint", default=None, help="checkpoint for FromCheckpoint init")
    train_cmd.add_argument("--dropout", type=float, default=None, help="dropout before the classifier")
    train_cmd.add_argument("--protocol", type=_choice(DataProtocol), default=None, help="training preprocessing")
    train_cmd.add_argument("--mode", type=_choice(SamplingMode), default=None, help="training sampling mode")
    train_cmd.add_argument("--force-spec", action="store_true", help="load a checkpoint under the requested spec")
    train_cmd.add_argument(
        "--allow-partial", action="store_true", help="fill only checkpoint slots whose names and shapes match"
    )
    train_cmd.add_argument("--transfer", action="store_true", help="new classifier on the checkpoint, transfer recipe")
    train_cmd.add_argument("--weights-dir", default=os.environ.get(WEIGHTS_ENV), help="ImageNet weight files")
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = commands.add_parser("eval", help="evaluate a checkpoint", formatter_class=formatter)
    _add_experiment_flags(eval_cmd)
    eval_cmd.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    eval_cmd.add_argument("--split", default="val", choices=["train", "val"], help="dataset split")
    eval_cmd.set_defaults(handler=cmd_eval)

    profile_cmd = commands.add_parser("profile", help="FLOPs, params and throughput", formatter_class=formatter)
    _add_arch_flags(profile_cmd)
    profile_cmd.add_argument("--input", type=_input_dims, default=(224, 224), help="input HxW")
    profile_cmd.add_argument("--throughput", action="store_true", help="also measure throughput and max batch")
    profile_cmd.add_argument("--max-batch-limit", type=int, default=256, help="largest batch tried")
    profile_cmd.add_argument("--device", default="cpu", help="torch device")
    profile_cmd.add_argument("--out", default=".", help="directory of profile.csv")
    profile_cmd.set_defaults(handler=cmd_profile)

    analyze = commands.add_parser("analyze", help="reports from a results CSV", formatter_class=formatter)
    analyze.add_argument("report", choices=["disentangle", "tp-gain", "acc-vs-flops"], help="report to emit")
    analyze.add_argument("--results", default=RESULTS_FILE, help="results CSV")
    analyze.add_argument("--out", default="reports", help="report directory")
    analyze.add_argument("--allow-partial", action="store_true", help="average over available grid cells only")
    analyze.add_argument("--plot", action="store_true", help="also save a figure")
    analyze.set_defaults(handler=cmd_analyze)

    dataset = commands.add_parser("dataset", help="write datasets and manifests", formatter_class=formatter)
    dataset.add_argument("action", choices=["synth", "mini"], help="synthetic dataset or mini manifest")
    dataset.add_argument("--task", type=_choice(SyntheticTask), default=SyntheticTask.DIRECTION, help="synth task")
    dataset.add_argument("--out", default="data/synthetic", help="synth output directory")
    dataset.add_argument("--videos", type=int, default=64, help="synth videos")
    dataset.add_argument("--frames", type=int, default=SYNTHETIC_FRAMES, help="synth frames per video")
    dataset.add_argument("--size", type=int, default=64, help="synth frame side")
    dataset.add_argument("--root", default="data/synthetic", help="FrameStore of the mini manifest")
    dataset.add_argument("--fraction", type=float, default=0.5, help="share of categories kept")
    dataset.add_argument("--subset", default="mini", help="name of the mini manifests")
    dataset.add_argument("--seed", type=int, default=0, help="random seed")
    dataset.add_argument("--progress", action="store_true", help="show progress bars")
    dataset.set_defaults(handler=cmd_dataset)

    sample_cmd = commands.add_parser("sample", help="frame index plans", formatter_class=formatter)
    sample_cmd.add_argument("--strategy", type=_choice(Strategy), default=Strategy.UNIFORM, help="frame sampling")
    sample_cmd.add_argument("--frames", type=int, default=8, help="frames per clip")
    sample_cmd.add_argument("--stride", type=int, default=1, help="dense sampling stride")
    sample_cmd.add_argument("--clips", type=int, default=1, help="clips per video")
    sample_cmd.add_argument("--mode", type=_choice(SamplingMode), default=SamplingMode.TRAIN, help="sampling mode")
    sample_cmd.add_argument("--seed", type=int, default=0, help="random seed")
    sample_cmd.add_argument("--num-frames", type=int, default=300, help="video length without --dataset")
    sample_cmd.add_argument("--dataset", default=None, help="plan every video of this dataset")
    sample_cmd.add_argument("--data-dir", default="data", help="cache for generated synthetic datasets")
    sample_cmd.add_argument("--dump", default=None, help="write the plans to this CSV")
    sample_cmd.set_defaults(handler=cmd_sample)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.handler(args).exit_code
    except StzooError as exc:
        print(f"stzoo: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
