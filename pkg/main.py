import argparse
import logging
import os
import sys
from datetime import datetime

import numpy as np
import pandas as pd

import config
from modules.densify import DensifyParams, densify
from modules.descriptor_net import DescriptorNet, default_architecture, describe_field, load_checkpoint
from modules.evaluation import (DisplacementBuckets, SENSITIVITY_BUCKETS, bucketed_flow_errors, count_distractors,
                                epe, match_distance_profile, metrics_frame, outlier_rate, sensitivity_profile)
from modules.loss import LossConfig
from modules.mnist_bench import SCHEDULES, BenchConfig, harden_dataset, load_mnist, run_benchmark
from modules.patchmatch import PMParams, bidirectional_patchmatch, consistency_filter
from modules.sampler import LogNormalParams
from modules.trainer import DescriptorTrainer
from utils.data_io import (SYNTHETIC_MODELS, SyntheticParams, gen_synthetic_pair, read_flo, read_image,
                           read_kitti_flow_png, write_flo, write_flow_magnitude_pgm, write_image)
from utils.errors import ConfigError, DataFormatError, FlowEngineError
from utils.reporting import create_run_report, export_to_csv, print_table, write_manifest

logger = logging.getLogger(__name__)

COMMANDS = ("train", "flow", "eval", "distractors", "sensitivity", "mnist-bench", "synth")
INPUT_FLAGS = ("checkpoint", "frame1", "frame2", "gt", "flow", "images", "labels")


def setup_logging(level="INFO"):
    """Log to a dated file under LOG_DIR and to stdout"""
    os.makedirs(config.LOG_DIR, exist_ok=True)
    log_file = os.path.join(config.LOG_DIR, f"flow_engine_{datetime.now().strftime('%Y%m%d')}.log")
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )


def read_flow_file(path):
    """Read ground truth or flow from .flo or KITTI .png"""
    if path.lower().endswith(".png"):
        return read_kitti_flow_png(path)
    return read_flo(path)


def check_input_paths(args):
    """Fail early, naming the flag, when an input file does not exist"""
    named = [(f"--{flag}", getattr(args, flag, None)) for flag in INPUT_FLAGS]
    for pair in getattr(args, "pair", None) or []:
        named.extend(("--pair", path) for path in pair)
    for flag, path in named:
        if path is not None and not os.path.isfile(path):
            raise ConfigError(f"{flag}: no such file {path}")


def save_csv(frame, path):
    if not export_to_csv(frame, path):
        raise DataFormatError(f"{path}: could not write the results table", module="reporting")


def resolve_config(args, keys):
    overrides = {key: getattr(args, key, None) for key in keys}
    return config.load_run_config(args.config, overrides)


def seeds_of(cfg):
    return {"seed": cfg.seed}


def training_samples(args, cfg):
    samples = []
    for frame1, frame2, gt in args.pair or []:
        samples.append((read_image(frame1), read_image(frame2), read_flow_file(gt)))
    for k in range(args.synthetic):
        params = SyntheticParams(width=args.size, height=args.size, model=args.synth_model, v_max=args.v_max)
        samples.append(gen_synthetic_pair(np.random.default_rng([cfg.seed, k]), params))
    if not samples:
        raise ConfigError("train: give at least one --pair or --synthetic N")
    return samples


def run_train(args):
    """Train a descriptor network under the configured strategy"""
    cfg = resolve_config(args, TRAIN_KEYS)
    logger.info(f"Training with strategy '{cfg.strategy}'...")

    samples = training_samples(args, cfg)
    net = DescriptorNet(default_architecture(cfg.descriptor_dim), cfg.patch_size, seed=cfg.seed)
    trainer = DescriptorTrainer(
        samples, net,
        strategy=cfg.strategy,
        epochs=cfg.epochs,
        triplets_per_epoch=cfg.triplets_per_epoch,
        batch_size=cfg.batch_size,
        loss_cfg=LossConfig(cfg.margin, cfg.lam),
        learning_rate=cfg.learning_rate,
        momentum=cfg.momentum,
        lr_halving_epochs=cfg.lr_halving_epochs,
        seed=cfg.seed,
        validation_fraction=cfg.validation_fraction,
        lognormal=LogNormalParams(cfg.lognormal_mu, cfg.lognormal_sigma),
        min_disp=cfg.train_min_disp,
        max_disp=cfg.train_max_disp,
        checkpoint_every=cfg.checkpoint_every,
        checkpoint_dir=args.output_dir,
    )
    history = trainer.train()

    save_csv(history, os.path.join(args.output_dir, "training_history.csv"))
    report_path = create_run_report({"Training history": history}, f"Training run: {cfg.strategy}",
                                    output_dir=args.output_dir)
    write_manifest(args.output_dir, "train", cfg.to_dict(), seeds_of(cfg),
                   {"inputs": [list(p) for p in args.pair or []], "synthetic_pairs": args.synthetic})

    print("\n--- Training Results ---")
    print(f"Strategy: {cfg.strategy}")
    print(f"Final validation loss: {history['val_loss'].iloc[-1]:.4f}")
    print(f"Checkpoint saved to: {os.path.join(args.output_dir, 'descriptor_net.bin')}")
    print(f"Report saved to: {report_path}")
    return history


def run_flow(args):
    """Estimate flow between two frames with a trained network"""
    cfg = resolve_config(args, MATCH_KEYS)
    logger.info("Running flow estimation...")

    net = load_checkpoint(args.checkpoint)
    first, second = read_image(args.frame1), read_image(args.frame2)
    desc_a = describe_field(net, first, workers=cfg.workers)
    desc_b = describe_field(net, second, workers=cfg.workers)

    params = PMParams(cfg.pm_range, cfg.pm_iterations, cfg.pm_decay, cfg.seed)
    fwd, bwd = bidirectional_patchmatch(desc_a, desc_b, params, workers=min(cfg.workers, 2), progress=True)
    sparse = consistency_filter(fwd, bwd, cfg.tau)
    dense = densify(sparse, first, DensifyParams(cfg.densify_k, cfg.sigma_s, cfg.sigma_c))

    flow_path = os.path.join(args.output_dir, "flow.flo")
    write_flo(flow_path, dense)
    write_flo(os.path.join(args.output_dir, "sparse_flow.flo"), sparse)
    peak = write_flow_magnitude_pgm(os.path.join(args.output_dir, "flow_magnitude.pgm"), dense)

    rows = [["consistent matches", sparse.count_valid()], ["max |flow| (px)", peak]]
    if args.gt:
        gt = read_flow_file(args.gt)
        kept = gt.valid & sparse.valid
        results = [("post_pm", kept, outlier_rate, epe), ("post_densify", gt.valid, outlier_rate, epe)]
        records = []
        for stage, mask, rate_fn, epe_fn in results:
            if not mask.any():
                logger.warning(f"No valid pixels to score at stage {stage}")
                continue
            flow = sparse if stage == "post_pm" else dense
            records.append({"stage": stage, "metric": "outlier_rate",
                            "value": rate_fn(flow, gt, cfg.outlier_threshold, mask)})
            records.append({"stage": stage, "metric": "epe", "value": epe_fn(flow, gt, mask)})
        metrics = pd.DataFrame(records, columns=["stage", "metric", "value"])
        save_csv(metrics, os.path.join(args.output_dir, "flow_metrics.csv"))
        rows += [[f"{r['stage']} {r['metric']}", r["value"]] for r in records]

    write_manifest(args.output_dir, "flow", cfg.to_dict(), seeds_of(cfg),
                   {"inputs": {"checkpoint": args.checkpoint, "frame1": args.frame1, "frame2": args.frame2,
                               "gt": args.gt}})

    print("\n--- Flow Results ---")
    print_table(rows, headers=["Quantity", "Value"])
    print(f"Flow saved to: {flow_path}")
    return dense


def run_eval(args):
    """Score a flow field against ground truth per displacement bucket"""
    cfg = resolve_config(args, EVAL_KEYS)
    flow, gt = read_flow_file(args.flow), read_flow_file(args.gt)
    buckets = DisplacementBuckets()
    results = bucketed_flow_errors(flow, gt, buckets, cfg.outlier_threshold)
    frame = pd.concat([metrics_frame(results[m], m, buckets) for m in ("outlier_rate", "epe")], ignore_index=True)

    save_csv(frame, os.path.join(args.output_dir, "eval_metrics.csv"))
    write_manifest(args.output_dir, "eval", cfg.to_dict(), seeds_of(cfg),
                   {"inputs": {"flow": args.flow, "gt": args.gt}})
    print("\n--- Evaluation Results ---")
    print_table(frame)
    return frame


def run_distractors(args):
    """Count distractors and true-match distances of a trained network"""
    cfg = resolve_config(args, EVAL_KEYS)
    net = load_checkpoint(args.checkpoint)
    gt = read_flow_file(args.gt)
    desc_a = describe_field(net, read_image(args.frame1), workers=cfg.workers)
    desc_b = describe_field(net, read_image(args.frame2), workers=cfg.workers)

    buckets = DisplacementBuckets()
    frame = pd.concat([
        metrics_frame(count_distractors(desc_a, desc_b, gt, cfg.distractor_radius, buckets), "distractors", buckets),
        metrics_frame(match_distance_profile(desc_a, desc_b, gt, buckets), "match_distance", buckets),
    ], ignore_index=True)

    save_csv(frame, os.path.join(args.output_dir, "distractors.csv"))
    write_manifest(args.output_dir, "distractors", cfg.to_dict(), seeds_of(cfg),
                   {"inputs": {"checkpoint": args.checkpoint, "frame1": args.frame1, "frame2": args.frame2,
                               "gt": args.gt}})
    print("\n--- Distractor Results ---")
    print_table(frame)
    return frame


def run_sensitivity(args):
    """Descriptor sensitivity to a horizontal shift, per displacement bucket"""
    cfg = resolve_config(args, EVAL_KEYS)
    net = load_checkpoint(args.checkpoint)
    gt = read_flow_file(args.gt)
    desc_a = describe_field(net, read_image(args.frame1), workers=cfg.workers)
    ratios = sensitivity_profile(desc_a, gt, cfg.sensitivity_offset, SENSITIVITY_BUCKETS)
    frame = metrics_frame(ratios, "sensitivity_ratio", SENSITIVITY_BUCKETS)

    save_csv(frame, os.path.join(args.output_dir, "sensitivity.csv"))
    write_manifest(args.output_dir, "sensitivity", cfg.to_dict(), seeds_of(cfg),
                   {"inputs": {"checkpoint": args.checkpoint, "frame1": args.frame1, "gt": args.gt}})
    print("\n--- Sensitivity Results ---")
    print_table(frame)
    return frame


def run_mnist_bench(args):
    """Compare training schedules on the hardened digit task"""
    cfg = resolve_config(args, MNIST_KEYS)
    schedules = args.schedules.split(",") if args.schedules else list(SCHEDULES)
    unknown = [s for s in schedules if s not in SCHEDULES]
    if unknown:
        raise ConfigError(f"schedules: unknown schedule(s) {', '.join(unknown)}")

    images, labels = load_mnist(args.images, args.labels, cfg.mnist_train_size)
    data = harden_dataset(images, labels, seed=cfg.seed, a_max=cfg.mnist_a_max, workers=cfg.workers)
    bench_cfg = BenchConfig(epochs=cfg.mnist_epochs, batch_size=cfg.mnist_batch_size, learning_rate=cfg.mnist_lr,
                            momentum=cfg.momentum, channels=cfg.mnist_channels, seed=cfg.seed)
    frame = run_benchmark(data, schedules, bench_cfg)

    save_csv(frame, os.path.join(args.output_dir, "mnist_results.csv"))
    create_run_report({"Accuracy by schedule": frame}, "Digit schedule benchmark", output_dir=args.output_dir)
    write_manifest(args.output_dir, "mnist-bench", cfg.to_dict(), seeds_of(cfg),
                   {"inputs": {"images": args.images, "labels": args.labels}, "schedules": schedules})
    print("\n--- Schedule Benchmark Results ---")
    print_table(frame.pivot(index="schedule", columns="group", values="accuracy").reset_index())
    return frame


def run_synth(args):
    """Write synthetic frame pairs with exact ground truth"""
    cfg = resolve_config(args, ["seed"])
    translation = tuple(args.translation) if args.translation else None
    params = SyntheticParams(width=args.size, height=args.size, model=args.model, v_max=args.v_max,
                             translation=translation, zoom=args.zoom)
    written = []
    for k in range(args.count):
        first, second, gt = gen_synthetic_pair(np.random.default_rng([cfg.seed, k]), params)
        names = [f"frame1_{k:03d}.png", f"frame2_{k:03d}.png", f"gt_{k:03d}.flo"]
        paths = [os.path.join(args.output_dir, name) for name in names]
        write_image(paths[0], first)
        write_image(paths[1], second)
        write_flo(paths[2], gt)
        written.append(names + [gt.count_valid()])

    write_manifest(args.output_dir, "synth", cfg.to_dict(), seeds_of(cfg),
                   {"synthetic": {"model": args.model, "size": args.size, "v_max": args.v_max,
                                  "translation": translation, "zoom": args.zoom, "count": args.count}})
    print("\n--- Synthetic Pairs ---")
    print_table(written, headers=["Frame 1", "Frame 2", "Ground truth", "Valid pixels"])
    return written


TRAIN_KEYS = ["strategy", "epochs", "triplets_per_epoch", "batch_size", "patch_size", "descriptor_dim", "margin",
              "lam", "learning_rate", "momentum", "lr_halving_epochs", "lognormal_mu", "lognormal_sigma",
              "train_min_disp", "train_max_disp", "checkpoint_every", "validation_fraction", "seed", "workers"]
MATCH_KEYS = ["pm_range", "pm_iterations", "pm_decay", "tau", "densify_k", "sigma_s", "sigma_c",
              "outlier_threshold", "seed", "workers"]
EVAL_KEYS = ["distractor_radius", "sensitivity_offset", "outlier_threshold", "seed", "workers"]
MNIST_KEYS = ["mnist_a_max", "mnist_epochs", "mnist_train_size", "mnist_lr", "mnist_batch_size", "mnist_channels",
              "momentum", "seed", "workers"]

FLAG_TYPES = {key: (type(value) if value is not None else float) for key, value in config.DEFAULTS.items()}


def add_config_flags(parser, keys):
    for key in keys:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, type=FLAG_TYPES[key], default=None,
                            help=f"Override {key} (default {config.DEFAULTS[key]})")


def build_parser():
    parser = argparse.ArgumentParser(description="Descriptor-based optical flow engine")
    parser.add_argument("--dump-config", action="store_true", help="Print every default as key=value and exit")
    parser.add_argument("--log-level", default="INFO", help="Logging level")

    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    def command(name, help_text, keys):
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", help="Plain-text key=value configuration file")
        sub.add_argument("--output-dir", default=config.OUTPUT_DIR, help="Output directory")
        add_config_flags(sub, keys)
        return sub

    train_parser = command("train", "Train a descriptor network", TRAIN_KEYS)
    train_parser.add_argument("--pair", nargs=3, action="append", metavar=("FRAME1", "FRAME2", "GT"),
                              help="Training pair with ground truth (.flo or KITTI .png); repeatable")
    train_parser.add_argument("--synthetic", type=int, default=0, help="Number of synthetic pairs to add")
    train_parser.add_argument("--synth-model", choices=SYNTHETIC_MODELS, default="layered",
                              help="Displacement model of synthetic pairs")
    train_parser.add_argument("--v-max", type=float, default=30.0, help="Maximum synthetic displacement")
    train_parser.add_argument("--size", type=int, default=64, help="Synthetic frame side length")

    flow_parser = command("flow", "Estimate flow between two frames", MATCH_KEYS)
    flow_parser.add_argument("--checkpoint", required=True, help="Trained network checkpoint")
    flow_parser.add_argument("--frame1", required=True, help="First frame")
    flow_parser.add_argument("--frame2", required=True, help="Second frame")
    flow_parser.add_argument("--gt", help="Optional ground truth to score against")

    eval_parser = command("eval", "Score a flow field against ground truth", EVAL_KEYS)
    eval_parser.add_argument("--flow", required=True, help="Estimated flow (.flo)")
    eval_parser.add_argument("--gt", required=True, help="Ground truth (.flo or KITTI .png)")

    distractor_parser = command("distractors", "Count descriptor distractors", EVAL_KEYS)
    sensitivity_parser = command("sensitivity", "Descriptor sensitivity profile", EVAL_KEYS)
    for sub in (distractor_parser, sensitivity_parser):
        sub.add_argument("--checkpoint", required=True, help="Trained network checkpoint")
        sub.add_argument("--frame1", required=True, help="First frame")
        sub.add_argument("--gt", required=True, help="Ground truth (.flo or KITTI .png)")
    distractor_parser.add_argument("--frame2", required=True, help="Second frame")

    mnist_parser = command("mnist-bench", "Compare schedules on hardened digits", MNIST_KEYS)
    mnist_parser.add_argument("--images", required=True, help="IDX image file")
    mnist_parser.add_argument("--labels", required=True, help="IDX label file")
    mnist_parser.add_argument("--schedules", help=f"Comma-separated subset of {','.join(SCHEDULES)}")

    synth_parser = command("synth", "Generate synthetic pairs with ground truth", ["seed"])
    synth_parser.add_argument("--model", choices=SYNTHETIC_MODELS, default="translation", help="Displacement model")
    synth_parser.add_argument("--v-max", type=float, default=20.0, help="Maximum displacement")
    synth_parser.add_argument("--translation", type=float, nargs=2, metavar=("U", "V"),
                              help="Fixed global translation")
    synth_parser.add_argument("--zoom", type=float, default=1.1, help="Zoom factor")
    synth_parser.add_argument("--size", type=int, default=64, help="Frame side length")
    synth_parser.add_argument("--count", type=int, default=1, help="Number of pairs")

    return parser


def _command_of(argv):
    """First token that is neither a top-level option nor its value"""
    tokens = iter(argv)
    for token in tokens:
        if token == "--log-level":
            next(tokens, None)
        elif not token.startswith("-"):
            return token
    return None


HANDLERS = {
    "train": run_train,
    "flow": run_flow,
    "eval": run_eval,
    "distractors": run_distractors,
    "sensitivity": run_sensitivity,
    "mnist-bench": run_mnist_bench,
    "synth": run_synth,
}


def main(argv=None):
    """Main entry point; returns the process exit status"""
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()

    command = _command_of(argv)
    if command is not None and command not in COMMANDS and "--dump-config" not in argv:
        parser.print_help()
        return 1

    args = parser.parse_args(argv)
    if args.dump_config:
        print(config.dump_config())
        return 0
    if args.command is None:
        parser.print_help()
        return 1

    setup_logging(args.log_level)
    try:
        check_input_paths(args)
        os.makedirs(args.output_dir, exist_ok=True)
        HANDLERS[args.command](args)
    except FlowEngineError as e:
        logger.error(f"{e.module} error ({type(e).__name__}): {e}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
