"""Command-line entry point: prepare, train, tune, evaluate, report.

Exit codes: 0 success, 2 config error, 3 data error, 4 training abort,
5 I/O error. Device selection via the POSELEARN_DEVICE environment
variable (default cpu); everything else comes from flags and the config
file (flags > file > defaults).
"""

import argparse
import hashlib
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from . import __version__, dataset, evalreport, imageprep, training, tuner
from .backbones import FreezePolicy, ModelAssembly, WeightError
from .config import ConfigError, RunConfig, parse_config_file, resolve_config
from .dataset import ManifestError
from .training import CheckpointError, ManifestData, TrainingAbort

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_IO = 5

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp")


def make_run_dir(run_root, run_name):
    """Timestamp+name stamped directory, never overwritten."""
    os.makedirs(run_root, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(run_root, f"{stamp}-{run_name}")
    candidate, suffix = base, 0
    while os.path.exists(candidate):
        suffix += 1
        candidate = f"{base}.{suffix}"
    os.makedirs(candidate)
    return candidate


def _write_run_stamp(run_dir, config: RunConfig):
    config.write(os.path.join(run_dir, "config"))
    with open(os.path.join(run_dir, "version"), "w") as fh:
        fh.write(f"poselearn {__version__}\n")


def _iter_images(root):
    for dirpath, _, filenames in os.walk(root):
        for name in sorted(filenames):
            if name.lower().endswith(IMAGE_EXTENSIONS):
                yield os.path.relpath(os.path.join(dirpath, name), root)


def cmd_prepare(config: RunConfig, args):
    prep = config.prep_params()
    in_root, out_root = args.input_dir, args.output_dir
    os.makedirs(out_root, exist_ok=True)
    rels = list(_iter_images(in_root))
    if not rels:
        raise ManifestError(f"no images found under {in_root}")

    def process(rel):
        img = np.asarray(Image.open(os.path.join(in_root, rel)).convert("RGB"))
        out = imageprep.preprocess(img, prep)
        out_rel = os.path.splitext(rel)[0] + ".png"
        out_path = os.path.join(out_root, out_rel)
        os.makedirs(os.path.dirname(out_path) or out_root, exist_ok=True)
        Image.fromarray(out).save(out_path, format="PNG")
        digest = hashlib.sha256(out.tobytes()).hexdigest()
        return rel, out_rel, digest

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        results = list(pool.map(process, rels))

    manifest_path = os.path.join(out_root, "manifest.txt")
    with open(manifest_path, "w") as fh:
        fh.write(f"# contrast_factor={prep.contrast_factor} "
                 f"sharpen={prep.sharpen_enabled} target_size={prep.target_size} "
                 f"applied_to=train_and_test\n")
        for rel, out_rel, digest in results:
            fh.write(f"{rel},{out_rel},{digest}\n")
    print(f"prepared {len(results)} images -> {out_root}")
    return EXIT_OK


def _load_train_data(config: RunConfig):
    if not config.train_manifest:
        raise ConfigError("train_manifest is required")
    samples, _ = dataset.parse_manifest(config.train_manifest,
                                        image_root=config.data_root or None)
    if not samples:
        raise ManifestError("no usable samples in the training manifest")
    split = dataset.split_train_val(samples, val_fraction=config.val_fraction,
                                    seed=config.seed)
    data = ManifestData(split, config.data_root, config.prep_params(),
                        config.augment_params(), config.batch_size,
                        seed=config.seed)
    return split, data


def cmd_train(config: RunConfig, args):
    split, data = _load_train_data(config)
    run_dir = make_run_dir(config.run_root, config.run_name)
    _write_run_stamp(run_dir, config)
    dataset.save_split(split, os.path.join(run_dir, "split.txt"))

    import torch
    torch.manual_seed(config.seed)
    assembly = ModelAssembly(config.backbone_spec(), config.freeze_policy(),
                             config.head_config())
    history, best_epoch = training.fit(assembly, data, config.train_config())
    history.to_csv(os.path.join(run_dir, "history.csv"))
    training.save_checkpoint(assembly, history, os.path.join(run_dir, "last.ckpt"))
    # fit restores the best weights before returning, so best == current
    training.save_checkpoint(assembly, history, os.path.join(run_dir, "best.ckpt"))
    print(f"run dir: {run_dir} (best epoch {best_epoch})")
    return EXIT_OK


def _parse_space_file(path) -> tuner.SearchSpace:
    raw = parse_config_file(path)
    kwargs = {}
    for key in ("block_counts", "units_choices"):
        if key in raw:
            kwargs[key] = tuple(int(v) for v in raw.pop(key).split(","))
    for key in ("dropout_choices", "lr0_choices"):
        if key in raw:
            kwargs[key] = tuple(float(v) for v in raw.pop(key).split(","))
    if "freeze_choices" in raw:
        choices = []
        for item in raw.pop("freeze_choices").split(","):
            mode, _, n = item.partition(":")
            choices.append(FreezePolicy(mode=mode, n=int(n) if n else 0))
        kwargs["freeze_choices"] = tuple(choices)
    if raw:
        raise ConfigError(f"unknown search-space key {sorted(raw)[0]!r}")
    return tuner.SearchSpace(**kwargs)


def cmd_tune(config: RunConfig, args):
    _, data = _load_train_data(config)
    space = _parse_space_file(args.space_file) if args.space_file \
        else tuner.SearchSpace()
    run_dir = make_run_dir(config.run_root, config.run_name + "-tune")
    _write_run_stamp(run_dir, config)
    trials = tuner.random_search(space, config.n_trials, config.budget_epochs,
                                 data, config.backbone_spec(),
                                 base_config=config.train_config(),
                                 seed=config.seed)
    tuner.write_leaderboard(trials, os.path.join(run_dir, "leaderboard.csv"))
    record = tuner.best_config_record(trials, config.train_config())
    tuner.write_best_config(record, os.path.join(run_dir, "best_config"))
    print(f"tune results: {run_dir}")
    return EXIT_OK


def cmd_evaluate(config: RunConfig, args):
    if not os.path.isfile(args.checkpoint):
        raise CheckpointError(f"checkpoint not found: {args.checkpoint}")
    assembly, history = training.load_checkpoint(args.checkpoint)
    manifest = args.test_manifest or config.test_manifest
    if not manifest:
        raise ConfigError("test_manifest is required")
    samples, _ = dataset.parse_manifest(manifest, image_root=config.data_root or None)
    if not samples:
        raise ManifestError("no usable samples in the test manifest")
    hierarchy = dataset.build_hierarchy(samples)

    logits_chunks, label_chunks = [], []
    import torch
    with torch.no_grad():
        for x, y in dataset.batch_stream(samples, config.data_root,
                                         config.batch_size, config.prep_params()):
            logits_chunks.append(assembly.forward(x, mode="eval").numpy())
            label_chunks.append(y)
    report = evalreport.build_report(np.concatenate(logits_chunks),
                                     np.concatenate(label_chunks),
                                     hierarchy=hierarchy,
                                     model_name=assembly.spec.family)
    outdir = args.out or make_run_dir(config.run_root, config.run_name + "-eval")
    files = evalreport.emit_report(report, history, outdir)
    print(f"top1 {report.top1:.4f} top5 {report.top5:.4f}; "
          f"wrote {len(files)} files to {outdir}")
    return EXIT_OK


def cmd_report(config: RunConfig, args):
    metric_files = []
    for path in args.inputs:
        if os.path.isdir(path):
            candidate = os.path.join(path, "metrics.json")
            if not os.path.isfile(candidate):
                raise ManifestError(f"no metrics.json under {path}")
            metric_files.append(candidate)
        elif os.path.isfile(path):
            metric_files.append(path)
        else:
            raise ManifestError(f"no such run dir or metrics file: {path}")
    table = evalreport.comparison_table(metric_files)
    print(table, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "comparison.txt"), "w") as fh:
            fh.write(table)
    return EXIT_OK


CONFIG_FLAGS = [
    # (flag, registry key)
    ("--data-root", "data_root"), ("--train-manifest", "train_manifest"),
    ("--run-root", "run_root"), ("--run-name", "run_name"),
    ("--contrast-factor", "contrast_factor"), ("--sharpen", "sharpen"),
    ("--target-size", "target_size"), ("--workers", "workers"),
    ("--rotation-range", "rotation_range"), ("--zoom-min", "zoom_min"),
    ("--zoom-max", "zoom_max"), ("--shear-range", "shear_range"),
    ("--augment", "augment"), ("--family", "family"),
    ("--weight-source", "weight_source"), ("--freeze-mode", "freeze_mode"),
    ("--freeze-n", "freeze_n"), ("--head-blocks", "head_blocks"),
    ("--max-epochs", "max_epochs"), ("--batch-size", "batch_size"),
    ("--lr0", "lr0"), ("--decay-gamma", "decay_gamma"),
    ("--patience", "patience"), ("--seed", "seed"),
    ("--val-fraction", "val_fraction"), ("--n-trials", "n_trials"),
    ("--budget-epochs", "budget_epochs"),
]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="poselearn",
        description="Transfer-learning pipeline for 82-class yoga pose "
                    "classification")
    parser.add_argument("--version", action="version",
                        version=f"poselearn {__version__}")
    sub = parser.add_subparsers(dest="command")

    def add_common(p):
        p.add_argument("--config", help="flat key = value config file")
        for flag, key in CONFIG_FLAGS:
            p.add_argument(flag, dest=f"cfg_{key}", default=None, metavar="V")

    p = sub.add_parser("prepare", help="preprocess an image tree to PNG")
    add_common(p)
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)

    p = sub.add_parser("train", help="fine-tune a backbone on a manifest")
    add_common(p)

    p = sub.add_parser("tune", help="random search over head architectures")
    add_common(p)
    p.add_argument("--space-file", help="search-space key = value file")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test-manifest")
    p.add_argument("--out")

    p = sub.add_parser("report", help="aggregate run dirs into one table")
    add_common(p)
    p.add_argument("inputs", nargs="+", metavar="RUN_DIR_OR_METRICS_JSON")
    p.add_argument("--out")
    return parser


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG

    try:
        file_values = parse_config_file(args.config) if args.config else {}
        flag_values = {key: getattr(args, f"cfg_{key}")
                       for _, key in CONFIG_FLAGS
                       if getattr(args, f"cfg_{key}", None) is not None}
        config = resolve_config(file_values, flag_values)
        return COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ManifestError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAbort as exc:
        print(f"training abort: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (CheckpointError, WeightError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
