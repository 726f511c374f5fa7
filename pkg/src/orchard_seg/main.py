"""Command-line entry point."""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from .autodiff import ParameterStore
from .cloud import VoxelSpec, remove_outliers, voxel_downsample
from .cloud_io import read_cloud, write_cloud
from .config import parse_bool, parse_list, read_config_file, settings
from .errors import ConfigError, DataError, OrchardSegError, UsageError
from .fusion import accumulate, colorize, read_calibration, read_ppm
from .inference import run_partitioned_inference
from .kernels import GroupingSpec
from .metrics import ConfusionMatrix, miou
from .octree import PartitionSpec, build_partition, partition_stats
from .segnet import ColorBranchSpec, NetworkSpec
from .synth import SceneRecipe, build_scene, generate_rgbd_like, write_manifest
from .training import TrainConfig, load_dataset, make_dataset, save_dataset, train, write_metrics_csv

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

CHECKPOINT_FILE = "checkpoint.fpn"
NETWORK_FILE = "network.json"
METRICS_FILE = "metrics.csv"

NETWORK_PRESETS = {"small": NetworkSpec.small, "large": NetworkSpec.large, "reduced": NetworkSpec.reduced}
PRESET_BY_BLOCK_SIZE = {4096: "small", 8192: "large", 1024: "reduced"}


@dataclass
class RunConfig:
    """What one CLI invocation was asked to do."""

    command: str
    inputs: list[Path] = field(default_factory=list)
    out: Path | None = None
    config: Path | None = None
    seed: int | None = None
    verbosity: int = 0

    def check_inputs(self) -> None:
        for path in self.inputs:
            if not path.exists():
                raise DataError(f"no such file or directory: {path}")


@dataclass
class FileConfig:
    """Sections of a run-config file; empty when no file was given."""

    network: dict[str, str] = field(default_factory=dict)
    train: dict[str, str] = field(default_factory=dict)
    partition: dict[str, str] = field(default_factory=dict)


_NETWORK_KEYS = {
    "preset", "block_size", "fusion", "n_classes", "centroids", "radii", "group_size",
    "color_mode", "color_channels", "head_channels", "batch_norm", "normalize_scale",
}
_TRAIN_KEYS = {
    "class_weights": lambda raw: tuple(parse_list(raw)),
    "min_object_points": int,
    "seeds_per_scene": int,
    "lr0": float,
    "lr_decay": float,
    "lr_min": float,
    "epochs": int,
    "batch_size": int,
    "samples_per_epoch": int,
    "checkpoint_window": int,
    "augment": parse_bool,
    "seed": int,
}
_PARTITION_KEYS = {"capacity": int, "max_depth": int}


def load_run_config(path: str | Path | None) -> FileConfig:
    """Read the [network], [train] and [partition] sections of a run-config file."""
    if path is None:
        return FileConfig()
    sections = read_config_file(path)
    known = {"network": _NETWORK_KEYS, "train": set(_TRAIN_KEYS), "partition": set(_PARTITION_KEYS)}
    for name, values in sections.items():
        if name not in known:
            logger.warning(f"Ignoring unknown config section [{name}]")
            continue
        unknown = set(values) - known[name]
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    return FileConfig(
        network=sections.get("network", {}),
        train=sections.get("train", {}),
        partition=sections.get("partition", {}),
    )


def _cast(section: dict[str, str], key: str, cast):
    try:
        return cast(section[key])
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {section[key]!r}") from e


def build_network_spec(section: dict[str, str], blocks: int | None = None, fusion: str | None = None) -> NetworkSpec:
    """NetworkSpec from a [network] section; --blocks and --fusion win over the file."""
    block_size = blocks or (_cast(section, "block_size", int) if "block_size" in section else None)
    preset = section.get("preset") or PRESET_BY_BLOCK_SIZE.get(block_size or 4096)
    if preset not in NETWORK_PRESETS:
        raise ConfigError(f"no network preset for block size {block_size}; set preset = small|large|reduced")

    kwargs = {}
    if fusion or "fusion" in section:
        kwargs["fusion"] = fusion or section["fusion"]
    if "n_classes" in section:
        kwargs["n_classes"] = _cast(section, "n_classes", int)
    if "head_channels" in section:
        kwargs["head_channels"] = tuple(parse_list(section["head_channels"], int))
    for key in ("batch_norm", "normalize_scale"):
        if key in section:
            kwargs[key] = parse_bool(section[key])
    if "color_mode" in section or "color_channels" in section:
        color = ColorBranchSpec()
        kwargs["color_branch"] = ColorBranchSpec(
            mode=section.get("color_mode", color.mode),
            channels=_cast(section, "color_channels", int) if "color_channels" in section else color.channels,
        )
    spec = NETWORK_PRESETS[preset](**kwargs)

    overrides = {}
    if block_size is not None and block_size != spec.block_size:
        overrides["block_size"] = block_size
    if any(k in section for k in ("centroids", "radii", "group_size")):
        levels = len(spec.sa_blocks)
        centroids = parse_list(section["centroids"], int) if "centroids" in section else None
        radii = parse_list(section["radii"]) if "radii" in section else None
        for name, values in (("centroids", centroids), ("radii", radii)):
            if values is not None and len(values) != levels:
                raise ConfigError(f"{name} needs {levels} entries, got {len(values)}")
        group_size = _cast(section, "group_size", int) if "group_size" in section else None
        sa_blocks = []
        for level, block in enumerate(spec.sa_blocks):
            sampling = block.sampling.model_copy(update={"n_centroids": centroids[level]}) if centroids else block.sampling
            grouping = GroupingSpec(
                method=block.grouping.method,
                k=group_size or block.grouping.k,
                radius=radii[level] if radii else block.grouping.radius,
            )
            sa_blocks.append(block.model_copy(update={"sampling": sampling, "grouping": grouping}))
        overrides["sa_blocks"] = tuple(sa_blocks)
    if overrides:
        spec = NetworkSpec(**{**dict(spec), **overrides})
    return spec


def build_train_config(section: dict[str, str], block_size: int, args: argparse.Namespace) -> TrainConfig:
    """TrainConfig: block-size preset, then the [train] section, then CLI flags."""
    values = {key: _cast(section, key, cast) for key, cast in _TRAIN_KEYS.items() if key in section}
    base_weights = values.get("class_weights") or TrainConfig.for_block_size(block_size).class_weights
    if args.alpha_nobj is not None or args.alpha_obj is not None:
        values["class_weights"] = (
            args.alpha_nobj if args.alpha_nobj is not None else base_weights[0],
            args.alpha_obj if args.alpha_obj is not None else base_weights[1],
        )
    flags = {
        "min_object_points": getattr(args, "min_fruit_pts", None),
        "seeds_per_scene": getattr(args, "seeds_per_scene", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "seed": args.seed,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    return TrainConfig.for_block_size(block_size, **values)


def build_partition_spec(section: dict[str, str], block_size: int, capacity: int | None = None) -> PartitionSpec:
    values = {key: _cast(section, key, cast) for key, cast in _PARTITION_KEYS.items() if key in section}
    if capacity is not None:
        values["capacity"] = capacity
    values.setdefault("capacity", block_size)
    return PartitionSpec(**values)


# --- subcommands ----------------------------------------------------------


def cmd_colorize(args: argparse.Namespace, run: RunConfig) -> int:
    cam, ext = read_calibration(args.calibration)
    frames = []
    for cloud_path, image_path in args.frame:
        frames.append(colorize(read_cloud(cloud_path), read_ppm(image_path), cam, ext))
    merged = accumulate(frames)
    write_cloud(merged, run.out)
    print(json.dumps({"frames": len(frames), "points": len(merged)}))
    return 0


def cmd_voxelize(args: argparse.Namespace, run: RunConfig) -> int:
    cloud = read_cloud(args.input)
    before = len(cloud)
    if args.outlier_k > 0:
        cloud = remove_outliers(cloud, args.outlier_k, args.std_ratio)
    cloud = voxel_downsample(cloud, VoxelSpec(args.cell))
    write_cloud(cloud, run.out)
    print(json.dumps({"input_points": before, "output_points": len(cloud)}))
    return 0


def cmd_partition(args: argparse.Namespace, run: RunConfig) -> int:
    files = load_run_config(run.config)
    cloud = read_cloud(args.input)
    spec = build_partition_spec(files.partition, args.blocks or 4096, args.capacity)
    if args.max_depth is not None:
        spec = PartitionSpec(capacity=spec.capacity, max_depth=args.max_depth)
    blocks = build_partition(cloud, spec)
    if run.out is not None:
        run.out.mkdir(parents=True, exist_ok=True)
        for block in blocks:
            write_cloud(cloud.subset(block.indices), run.out / f"leaf_{block.leaf_id}.ply")
        manifest = {block.leaf_id: block.indices.tolist() for block in blocks}
        (run.out / "manifest.json").write_text(json.dumps(manifest) + "\n", encoding="utf-8")
    summary = partition_stats(blocks)
    summary["leaves"] = [{"id": b.leaf_id, "points": len(b), "depth": b.depth} for b in blocks]
    print(json.dumps(summary))
    return 0


def cmd_make_dataset(args: argparse.Namespace, run: RunConfig) -> int:
    files = load_run_config(run.config)
    block_size = args.blocks or build_network_spec(files.network).block_size
    cfg = build_train_config(files.train, block_size, args)
    scenes = [read_cloud(path) for path in args.scenes]
    samples = make_dataset(scenes, block_size, cfg.seeds_per_scene, cfg.min_object_points, cfg.seed)
    save_dataset(samples, run.out)
    print(json.dumps({"scenes": len(scenes), "samples": len(samples), "block_size": block_size}))
    return 0


def cmd_train(args: argparse.Namespace, run: RunConfig) -> int:
    files = load_run_config(run.config)
    spec = build_network_spec(files.network, args.blocks, args.fusion)
    cfg = build_train_config(files.train, spec.block_size, args)
    dataset = load_dataset(args.dataset)
    validation = load_dataset(args.val) if args.val else None
    logger.info(f"Training on {len(dataset)} blocks for {cfg.epochs} epochs (fusion={spec.fusion})")

    params, history = train(dataset, spec, cfg, validation)
    run.out.mkdir(parents=True, exist_ok=True)
    params.save(run.out / CHECKPOINT_FILE)
    (run.out / NETWORK_FILE).write_text(spec.model_dump_json(indent=2) + "\n", encoding="utf-8")
    write_metrics_csv(run.out / METRICS_FILE, history)
    print(json.dumps({"epochs": len(history), "final_loss": history[-1].train_loss, "out": str(run.out)}))
    return 0


def load_model(checkpoint: Path) -> tuple[NetworkSpec, ParameterStore]:
    """A checkpoint file (or the directory holding it) plus the network.json next to it."""
    path = checkpoint / CHECKPOINT_FILE if checkpoint.is_dir() else checkpoint
    network = path.parent / NETWORK_FILE
    try:
        spec = NetworkSpec.model_validate_json(network.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"no {NETWORK_FILE} next to {path}") from e
    return spec, ParameterStore.load(path)


def cmd_infer(args: argparse.Namespace, run: RunConfig) -> int:
    files = load_run_config(run.config)
    spec, params = load_model(Path(args.checkpoint))
    cloud = read_cloud(args.input)
    partition = build_partition_spec(files.partition, spec.block_size)
    result = run_partitioned_inference(cloud, spec, params, partition, run.seed or 0)
    write_cloud(cloud.with_labels(result.labels), run.out)
    print(json.dumps({
        "points": len(cloud),
        "blocks": len(result.blocks),
        "class_counts": result.class_counts(spec.n_classes),
        "seconds": round(result.seconds, 3),
    }))
    return 0


def cmd_eval(args: argparse.Namespace, run: RunConfig) -> int:
    truth = read_cloud(args.truth)
    pred = read_cloud(args.prediction)
    if not truth.has_labels or not pred.has_labels:
        raise DataError("both clouds must carry labels")
    if len(truth) != len(pred):
        raise DataError(f"truth has {len(truth)} points, prediction {len(pred)}")
    n_classes = max(2, int(max(truth.labels.max(initial=0), pred.labels.max(initial=0))) + 1)
    ious, mean = miou(ConfusionMatrix(n_classes).update(truth.labels, pred.labels))
    print("class,iou")
    for c, value in enumerate(ious):
        print(f"{c},{'nan' if np.isnan(value) else f'{value:.6f}'}")
    print(f"mean,{mean:.6f}")
    return 0


def cmd_synth(args: argparse.Namespace, run: RunConfig) -> int:
    seed = run.seed or 0
    run.out.mkdir(parents=True, exist_ok=True)
    recipes, files = [], []
    for i in range(args.scenes):
        recipe = SceneRecipe(
            fruit_count=args.fruit_count,
            point_density=args.density,
            color_mode=args.color_mode,
            seed=seed + i,
        )
        if args.distance is not None:
            cloud = generate_rgbd_like(recipe, args.distance)
        else:
            cloud = build_scene(recipe).cloud
        name = f"scene_{i:03d}.ply"
        write_cloud(cloud, run.out / name)
        recipes.append(recipe)
        files.append(name)
    write_manifest(run.out / "manifest.json", recipes, files)
    print(json.dumps({"scenes": len(files), "out": str(run.out)}))
    return 0


def cmd_ablate(args: argparse.Namespace, run: RunConfig) -> int:
    from .experiments import ExperimentConfig, fusion_ablation, imbalance_ablation, rgbd_sweep, rows_to_csv

    cfg = ExperimentConfig(n_scenes=args.scenes, n_runs=args.runs, evaluation=args.evaluation, seed=run.seed or 0)
    if args.epochs is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"epochs": args.epochs})})
    runner = {"fusion": fusion_ablation, "imbalance": imbalance_ablation, "rgbd": rgbd_sweep}[args.experiment]
    print(rows_to_csv(runner(cfg)), end="")
    return 0


# --- argument parsing -----------------------------------------------------


class ArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting, so main() owns the exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run-config file with [network]/[train]/[partition]")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--blocks", type=int, choices=(1024, 4096, 8192))
    model.add_argument("--fusion", choices=("none", "early", "late", "early+late"))
    model.add_argument("--alpha-nobj", type=float)
    model.add_argument("--alpha-obj", type=float)
    model.add_argument("--min-fruit-pts", type=int)

    parser = ArgumentParser(prog="orchard-seg", description="Fruit segmentation on colorized point clouds")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("colorize", parents=[common], help="color LiDAR frames from camera images")
    p.add_argument("calibration", type=Path)
    p.add_argument("--frame", nargs=2, action="append", required=True, metavar=("CLOUD", "IMAGE"), type=Path)
    p.set_defaults(handler=cmd_colorize, needs_out=True)

    p = sub.add_parser("voxelize", parents=[common], help="outlier removal and voxel downsampling")
    p.add_argument("input", type=Path)
    p.add_argument("--cell", type=float, default=0.01)
    p.add_argument("--outlier-k", type=int, default=16, help="0 disables outlier removal")
    p.add_argument("--std-ratio", type=float, default=2.0)
    p.set_defaults(handler=cmd_voxelize, needs_out=True)

    p = sub.add_parser("partition", parents=[common], help="octree partition statistics")
    p.add_argument("input", type=Path)
    p.add_argument("--blocks", type=int, choices=(1024, 4096, 8192))
    p.add_argument("--capacity", type=int)
    p.add_argument("--max-depth", type=int)
    p.set_defaults(handler=cmd_partition, needs_out=False)

    p = sub.add_parser("make-dataset", parents=[common, model], help="crop training blocks from labeled scenes")
    p.add_argument("scenes", nargs="+", type=Path)
    p.add_argument("--seeds-per-scene", type=int)
    p.set_defaults(handler=cmd_make_dataset, needs_out=True)

    p = sub.add_parser("train", parents=[common, model], help="train a network on a dataset directory")
    p.add_argument("dataset", type=Path)
    p.add_argument("--val", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(handler=cmd_train, needs_out=True)

    p = sub.add_parser("infer", parents=[common], help="label a whole scene")
    p.add_argument("input", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(handler=cmd_infer, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="per-class IoU and mIoU of two labeled clouds")
    p.add_argument("truth", type=Path)
    p.add_argument("prediction", type=Path)
    p.set_defaults(handler=cmd_eval, needs_out=False)

    p = sub.add_parser("synth", parents=[common], help="write synthetic labeled scenes")
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--fruit-count", type=int, default=40)
    p.add_argument("--density", type=float, default=8000.0)
    p.add_argument("--color-mode", choices=("separable", "geometry-only", "ambiguous"), default="separable")
    p.add_argument("--distance", type=float, help="emulate a depth camera at this distance (m)")
    p.set_defaults(handler=cmd_synth, needs_out=True)

    p = sub.add_parser("ablate", parents=[common], help="run an ablation on synthetic scenes")
    p.add_argument("experiment", choices=("fusion", "imbalance", "rgbd"))
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--epochs", type=int)
    p.add_argument("--runs", type=int, default=3, help="trainings per variant; the best validation run is scored")
    p.add_argument("--evaluation", choices=("blocks", "scenes"), default="blocks")
    p.set_defaults(handler=cmd_ablate, needs_out=False)
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    inputs = []
    for name in ("calibration", "input", "truth", "prediction", "dataset", "val", "checkpoint"):
        value = getattr(args, name, None)
        if value is not None:
            inputs.append(value)
    inputs += list(getattr(args, "scenes", None) or []) if args.command == "make-dataset" else []
    for pair in getattr(args, "frame", None) or []:
        inputs += list(pair)
    if args.config is not None:
        inputs.append(args.config)
    verbosity = -1 if args.quiet else args.verbose
    return RunConfig(args.command, inputs, args.out, args.config, args.seed, verbosity)


def configure_logging(verbosity: int) -> None:
    if verbosity < 0:
        level = logging.WARNING
    elif verbosity > 0:
        level = logging.DEBUG
    else:
        level = getattr(logging, settings.log_level.upper(), logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return e.exit_code
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)

    run = _run_config(args)
    configure_logging(run.verbosity)
    try:
        if args.needs_out and run.out is None:
            raise UsageError(f"{run.command} needs --out")
        run.check_inputs()
        return args.handler(args, run)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return ConfigError.exit_code
    except OrchardSegError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
