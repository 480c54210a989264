"""
SDHSI-Net command line
synth | train | eval | map | ablate over scene containers and checkpoints.
Errors print one line `sdhsi-error: <CODE>: <message>` on stderr; the exit code is 0 only on success.
"""

import os

THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


# THREAD CAPS (applied before numpy is imported)
def apply_thread_limit(environ=os.environ) -> int:
    """Map SDHSI_THREADS onto the BLAS thread variables; 0 or unset selects single-lane mode"""
    raw = (environ.get("SDHSI_THREADS") or "0").strip()
    try:
        threads = max(int(raw), 0)
    except ValueError:
        threads = 0
    for variable in THREAD_VARIABLES:
        environ[variable] = str(threads if threads > 0 else 1)
    return threads


SDHSI_THREADS = apply_thread_limit()

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from typing import List, Optional  # noqa: E402

from core.errors import ContractError, SdhsiError  # noqa: E402
from core.file_manager import (format_file_size, read_checkpoint, read_scene, read_scene_header,  # noqa: E402
                               render_map, render_panel, save_checkpoint, validate_output_path, write_scene)
from core.losses import LossWeights  # noqa: E402
from core.model import HEAD_ORDER, as_head, count_params  # noqa: E402
from core.optim import AblationFlags, measure_inference  # noqa: E402
from core.pipeline import (ABLATIONS, CommandResponse, CommandResult, RunConfig, class_maps,  # noqa: E402
                           evaluate_heads, prepare_data, prepare_from_checkpoint, run_ablation, run_section,
                           train_run)
from core.preprocess import SplitConfig, SynthConfig, synth_scene  # noqa: E402
from ui.status_report import StatusReport  # noqa: E402
from ui.tables import (ablation_headers, ablation_rows, ablation_table, head_metrics_table,  # noqa: E402
                       per_class_table, write_delimited)
from ui.ui_constants import Layout  # noqa: E402

CHECKPOINT_DIR = "checkpoint"
TRAIN_LOG = "train_log.jsonl"
LATENCY_BATCH = 64


# ARGUMENT PARSING
def _add_run_arguments(parser: argparse.ArgumentParser):
    defaults = RunConfig()
    weights = LossWeights()
    parser.add_argument("--scene", required=True, help="scene container directory")
    parser.add_argument("--out", default=defaults.out, help="output directory")
    parser.add_argument("--patch", type=int, default=defaults.patch_size, help="patch size S (odd)")
    parser.add_argument("--pca", type=int, default=defaults.pca_bands, help="PCA components B")
    parser.add_argument("--split", default="30,10,60", help="train,val,test percentages")
    parser.add_argument("--epochs", type=int, default=defaults.epochs)
    parser.add_argument("--batch", type=int, default=defaults.batch_size)
    parser.add_argument("--seed", type=int, default=defaults.seed)
    parser.add_argument("--lr-max", type=float, default=defaults.lr_max)
    parser.add_argument("--lr-min", type=float, default=defaults.lr_min)
    parser.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    parser.add_argument("--lambda-ce", type=float, default=weights.lambda_ce)
    parser.add_argument("--lambda-logit", type=float, default=weights.lambda_logit)
    parser.add_argument("--lambda-hint", type=float, default=weights.lambda_hint)
    parser.add_argument("--lambda-trip", type=float, default=weights.lambda_trip)
    parser.add_argument("--margin", type=float, default=weights.margin)
    parser.add_argument("--no-sd", action="store_true", help="train the teacher only; students get no signal")
    parser.add_argument("--no-triplet", action="store_true", help="set the triplet weight to zero")
    parser.add_argument("--select-best", action="store_true", help="keep the epoch with the best teacher val OA")
    parser.add_argument("--log-timing", action="store_true", help="write wall-clock seconds into the train log")
    parser.add_argument("--no-progress", action="store_true", help="hide the per-epoch progress bar")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdhsi", description="SDHSI-Net hyperspectral classifier")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="write a synthetic scene container")
    defaults = SynthConfig()
    synth.add_argument("--height", type=int, default=defaults.height)
    synth.add_argument("--width", type=int, default=defaults.width)
    synth.add_argument("--bands", type=int, default=defaults.bands)
    synth.add_argument("--classes", type=int, default=defaults.num_classes)
    synth.add_argument("--sigma", type=float, default=defaults.noise_sigma)
    synth.add_argument("--seed", type=int, default=defaults.seed)
    synth.add_argument("--out", required=True)

    train = commands.add_parser("train", help="PCA -> patches -> split -> train, then report test metrics")
    _add_run_arguments(train)
    train.add_argument("--strip-students", action="store_true", help="save a checkpoint without student heads")

    heads = [head.value for head in HEAD_ORDER]
    evaluate = commands.add_parser("eval", help="per-head OA/AA/kappa of a checkpoint on a scene")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--scene", required=True)
    evaluate.add_argument("--head", choices=heads, help="evaluate one head (default: every available head)")
    evaluate.add_argument("--subset", default="test", choices=["test", "val", "train", "all"])
    evaluate.add_argument("--batch", type=int, default=64)
    evaluate.add_argument("--timing", action="store_true", help="also measure per-sample inference latency")
    evaluate.add_argument("--repetitions", type=int, default=10)

    mapping = commands.add_parser("map", help="write GT/S1/S2/Teacher PPM classification maps")
    mapping.add_argument("--checkpoint", required=True)
    mapping.add_argument("--scene", required=True)
    mapping.add_argument("--out", required=True)
    mapping.add_argument("--head", choices=heads, help="render one head only")
    mapping.add_argument("--full-scene", action="store_true", help="predict unlabeled pixels too")

    ablate = commands.add_parser("ablate", help="run paired or grid ablations with shared seeds")
    _add_run_arguments(ablate)
    ablate.add_argument("--which", required=True, choices=ABLATIONS)
    ablate.add_argument("--seeds", type=int, default=1, help="repeat every arm over this many seeds")
    ablate.add_argument("--parallel-arms", action="store_true", help="run arms on a thread pool")
    ablate.add_argument("--dump", help="also write the table as tab-separated values")
    return parser


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        scene=args.scene,
        out=args.out,
        patch_size=args.patch,
        pca_bands=args.pca,
        split=SplitConfig.from_percentages(args.split, seed=args.seed),
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        lr_max=args.lr_max,
        lr_min=args.lr_min,
        weight_decay=args.weight_decay,
        weights=LossWeights(args.lambda_ce, args.lambda_logit, args.lambda_hint, args.lambda_trip, args.margin),
        flags=AblationFlags(no_sd=args.no_sd, no_triplet=args.no_triplet),
        select_best=args.select_best,
        log_timing=args.log_timing,
        progress=not args.no_progress,
    )


def show_banner(command: str, settings: dict):
    StatusReport.show("config", json.dumps({"command": command, **settings}, sort_keys=True), stream=sys.stderr)


# COMMANDS
def cmd_synth(args: argparse.Namespace) -> CommandResponse:
    cfg = SynthConfig(args.height, args.width, args.bands, args.classes, args.sigma, args.seed)
    show_banner("synth", {"out": args.out, "synth": vars(cfg), "threads": SDHSI_THREADS})
    cube, labels = synth_scene(cfg)
    write_scene(cube, labels, args.out)
    return CommandResponse(
        CommandResult.SUCCESS,
        f"wrote {cfg.height}x{cfg.width}x{cfg.bands} scene with {cfg.num_classes} classes to {args.out} "
        f"({format_file_size(args.out)})",
    )


def _results_table(results, model, title):
    params = {head: count_params(model, head) for head in results}
    return head_metrics_table({h: r.metrics() for h, r in results.items()}, params, title=title)


def cmd_train(cfg: RunConfig, strip_students: bool = False) -> CommandResponse:
    cfg.validate()
    show_banner("train", {**cfg.to_dict(), "strip_students": strip_students, "threads": SDHSI_THREADS})
    valid, message = validate_output_path(cfg.out)
    if not valid:
        return CommandResponse(CommandResult.ERROR, message, {"code": "CONFIG"})

    cube, labels = read_scene(cfg.scene)
    data = prepare_data(cube, labels, cfg)
    result = train_run(cfg, data, log_path=os.path.join(cfg.out, TRAIN_LOG))
    checkpoint = os.path.join(cfg.out, CHECKPOINT_DIR)
    save_checkpoint(result.model, checkpoint, result.trainer.state, data.pca, run_section(cfg, data),
                    strip_students=strip_students)
    if result.test:
        StatusReport.block(_results_table(result.test, result.model, f"Test metrics ({len(data.test)} samples)"))
    return CommandResponse(CommandResult.SUCCESS, f"trained {cfg.epochs} epochs; checkpoint at {checkpoint}",
                           {"test": result.test, "log": result.log})


def cmd_eval(args: argparse.Namespace) -> CommandResponse:
    show_banner("eval", vars(args))
    bundle = read_checkpoint(args.checkpoint)
    model = bundle.model
    heads = [as_head(args.head)] if args.head else [h for h in HEAD_ORDER if model.has_head(h)]
    for head in heads:
        if not model.has_head(head):
            raise ContractError(f"head {head.value} not present; the checkpoint was saved without students")

    cube, labels = read_scene(args.scene)
    data = prepare_from_checkpoint(cube, labels, bundle)
    samples = data.subset(args.subset)
    results = evaluate_heads(model, samples, heads, args.batch)

    latency = None
    if args.timing:
        batch = samples.batch(range(min(LATENCY_BATCH, len(samples))))
        latency = {h.value: measure_inference(model, h, batch, args.repetitions).median_us for h in heads}
    params = {h.value: count_params(model, h) for h in heads}
    title = f"{args.subset} subset ({len(samples)} samples)"
    StatusReport.block(head_metrics_table({h: r.metrics() for h, r in results.items()}, params, latency, title))
    class_names = read_scene_header(args.scene).get("class_names")
    StatusReport.block(per_class_table({h: r.recall for h, r in results.items()}, class_names))
    return CommandResponse(CommandResult.SUCCESS, f"evaluated {len(heads)} head(s)", {"results": results})


def cmd_map(args: argparse.Namespace) -> CommandResponse:
    show_banner("map", vars(args))
    bundle = read_checkpoint(args.checkpoint)
    model = bundle.model
    if args.head and not model.has_head(args.head):
        raise ContractError(f"head {args.head} not present; the checkpoint was saved without students")
    heads = [as_head(args.head)] if args.head else [h for h in HEAD_ORDER if model.has_head(h)]
    cube, labels = read_scene(args.scene)
    data = prepare_from_checkpoint(cube, labels, bundle)
    maps = class_maps(model, data, heads, full_scene=args.full_scene)

    written = []
    for name in Layout.MAP_FILES:
        if name in maps:
            path = os.path.join(args.out, f"{name}.ppm")
            render_map(maps[name], path, num_classes=labels.num_classes)
            written.append(path)
    render_panel([maps[name] for name in Layout.MAP_FILES if name in maps], os.path.join(args.out, "panel.ppm"),
                 num_classes=labels.num_classes)
    return CommandResponse(CommandResult.SUCCESS, f"wrote {len(written)} maps and panel.ppm to {args.out}",
                           {"files": written})


def cmd_ablate(cfg: RunConfig, which: str, seeds: int = 1, parallel: bool = False,
               dump: Optional[str] = None) -> CommandResponse:
    cfg.validate()
    show_banner("ablate", {**cfg.to_dict(), "which": which, "seeds": seeds, "parallel_arms": parallel,
                           "threads": SDHSI_THREADS})
    cube, labels = read_scene(cfg.scene)
    report = run_ablation(which, cfg, cube, labels, seeds=seeds, parallel=parallel)
    title = f"Ablation {which} (mean over seeds {report.seeds[0]}..{report.seeds[-1]})"
    StatusReport.block(ablation_table(report.arms, title))
    if dump:
        write_delimited(dump, ablation_headers(), ablation_rows(report.arms))
    return CommandResponse(CommandResult.SUCCESS, f"ran {len(report.arms)} arms x {seeds} seed(s)",
                           {"report": report})


def dispatch(args: argparse.Namespace) -> CommandResponse:
    if args.command == "synth":
        return cmd_synth(args)
    if args.command == "train":
        return cmd_train(run_config_from_args(args), args.strip_students)
    if args.command == "eval":
        return cmd_eval(args)
    if args.command == "map":
        return cmd_map(args)
    return cmd_ablate(run_config_from_args(args), args.which, args.seeds, args.parallel_arms, args.dump)


def run_command(args: argparse.Namespace) -> CommandResponse:
    try:
        return dispatch(args)
    except SdhsiError as error:
        return CommandResponse(CommandResult.ERROR, str(error), {"code": error.code})
    except OSError as error:
        return CommandResponse(CommandResult.ERROR, str(error), {"code": "IO"})
    except KeyboardInterrupt:
        return CommandResponse(CommandResult.CANCELLED, "interrupted", {"code": "CANCELLED"})


def exit_code(response: CommandResponse) -> int:
    return {CommandResult.SUCCESS: 0, CommandResult.ERROR: 1, CommandResult.CANCELLED: 130}[response.result]


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    response = run_command(args)
    if response.result is CommandResult.SUCCESS:
        StatusReport.show(args.command, response.message)
    else:
        StatusReport.error((response.data or {}).get("code", "ERROR"), response.message)
    return exit_code(response)


if __name__ == "__main__":
    sys.exit(main())
