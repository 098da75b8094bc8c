"""Command-line front end.

    tsm gen    --config run.ini --out data/
    tsm train  --config run.ini
    tsm eval | sweep | fuse | viz  --config run.ini

Exit codes: 0 success, 1 usage, 2 data/format error, 3 numerical failure.
"""

import argparse
import csv
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from tsm import __version__
from tsm.config import dump_config, load_config
from tsm.data import dataset_metadata, generate, load_dataset, write_dataset
from tsm.errors import DimensionError, FormatError, TrainingError
from tsm.evaluation import (
    density_sweep,
    evaluate,
    fuse_streams,
    mean_pool_baseline,
    write_predictions,
    write_report,
    write_sweep,
)
from tsm.head import HeadConfig, load_checkpoint, save_checkpoint, temporal_response_map
from tsm.mapping import build_videomap, resample_temporal
from tsm.plotting import plot_confusion, plot_response, plot_sweep, plot_training_log
from tsm.training import train, write_log

log = logging.getLogger("tsm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="output directory (dataset directory for gen)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--frames", type=int, help="test-time sampling density")
    common.add_argument("--attention", choices=["none", "a0", "a12", "a012"])
    common.add_argument("--dataset", help="dataset directory")
    common.add_argument("--checkpoint", help="model checkpoint file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tsm", description="VideoMap classification with temporal attention")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train a head model")
    p.add_argument("--epochs", type=int, help="total epochs (overrides train.max_epochs)")
    p.add_argument("--resume", action="store_true", help="continue from --checkpoint")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p = sub.add_parser("sweep", parents=[common], help="accuracy versus test sampling density")
    p.add_argument("--sweep", help="comma-separated frame counts")
    p = sub.add_parser("fuse", parents=[common], help="late fusion of two streams")
    p.add_argument("--dataset-b", help="dataset directory of the second stream")
    p.add_argument("--checkpoint-b", help="checkpoint of the second stream")
    p.add_argument("--weights", help="fusion weights, e.g. 0.5,0.5")
    p = sub.add_parser("viz", parents=[common], help="Grad-CAM temporal response maps")
    p.add_argument("--items", help="comma-separated sequence ids (default: first eval.viz_items)")
    p.add_argument("--class", dest="class_index", type=int, help="class to explain (default: predicted)")
    return parser


def resolve_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.task = replace(cfg.task, seed=args.seed)
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.model = replace(cfg.model, seed=args.seed)
    if args.attention:
        cfg.model = replace(cfg.model, attention=args.attention)
    if args.frames is not None:
        cfg.eval = replace(cfg.eval, frames=args.frames)
    if getattr(args, "epochs", None):
        cfg.train = replace(cfg.train, max_epochs=args.epochs)
    if getattr(args, "sweep", None):
        cfg.eval = replace(cfg.eval, sweep=tuple(int(v) for v in args.sweep.split(",")))
    if getattr(args, "weights", None):
        cfg.eval = replace(cfg.eval, fusion_weights=tuple(float(v) for v in args.weights.split(",")))
    paths = {
        "dataset": args.dataset,
        "checkpoint": args.checkpoint,
        "out": args.out,
        "dataset_b": getattr(args, "dataset_b", None),
        "checkpoint_b": getattr(args, "checkpoint_b", None),
    }
    cfg.paths = replace(cfg.paths, **{k: v for k, v in paths.items() if v is not None})
    return cfg


def _need(value, what):
    if not value:
        raise UsageError(f"missing {what} (set it in the config [paths] section or pass a flag)")
    return Path(value)


def _out_dir(cfg, force=True):
    out = _need(cfg.paths.out, "output directory (--out)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split(dataset_dir, split):
    splits = load_dataset(dataset_dir)
    if split not in splits:
        raise FormatError(f"dataset {dataset_dir} has no {split!r} split")
    return splits[split]


def cmd_gen(cfg, args):
    # --out names the dataset directory here; otherwise [paths] dataset is used
    target = _need(args.out or cfg.paths.dataset, "dataset directory (--out)")
    meta = {"config": cfg.hash(), "task": cfg.task.to_dict()}
    generated = generate(cfg.task)
    streams = generated if cfg.task.kind == "complementary" else {"": generated}
    for name, (train_seqs, test_seqs) in streams.items():
        directory = target / name if name else target
        if args.force and directory.exists():
            shutil.rmtree(directory)
        write_dataset(directory, {"train": train_seqs, "test": test_seqs}, force=args.force, metadata=meta)
        log.info("wrote %d sequences to %s", len(train_seqs) + len(test_seqs), directory)
    return EXIT_OK


def _maps(seqs, frames):
    return [resample_temporal(build_videomap(s), frames) for s in seqs]


def cmd_train(cfg, args):
    dataset = _need(cfg.paths.dataset, "dataset directory (--dataset)")
    ckpt = _need(cfg.paths.checkpoint, "checkpoint path (--checkpoint)")
    seqs = _split(dataset, "train")
    maps = _maps(seqs, cfg.model.frames)
    state = velocity = None
    if args.resume:
        model, state, extra = load_checkpoint(ckpt)
        velocity = {k.split("/", 1)[1]: v for k, v in extra.items() if k.startswith("velocity/")}
    else:
        if ckpt.exists() and not args.force:
            raise FileExistsError(f"{ckpt} exists; pass --force to overwrite or --resume to continue")
        meta = dataset_metadata(dataset)
        classes = meta.get("task", {}).get("classes") or 1 + max(s.label for s in seqs)
        m = cfg.model
        model = None
        model_config = HeadConfig(
            frames=m.frames,
            features=maps[0].width,
            classes=classes,
            widths=m.widths,
            attention_widths=m.attention_widths,
            attention=m.attention,
            kernel=m.kernel,
            dropout=m.dropout,
            seed=m.seed,
        )
    model, rows, state, velocity = train(
        maps, cfg.train, None if model else model_config, model=model, state=state, velocity=velocity
    )
    state = dict(state, config=cfg.hash())
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, model, state, {f"velocity/{k}": v for k, v in velocity.items()})
    if cfg.paths.out:
        out = _out_dir(cfg)
        log_path = out / "train_log.csv"
        previous = []
        if args.resume and log_path.exists():
            from tsm.training import read_log

            previous = read_log(log_path)
        rows = previous + rows
        write_log(log_path, rows, f"config {cfg.hash()}")
        if rows:
            plot_training_log(rows, out / "train_log.png")
    for row in rows[-1:]:
        print(f"epoch {row['epoch']} iteration {row['iteration']} loss {row['loss']:.4f} acc {row['accuracy']:.3f}")
    return EXIT_OK


def cmd_eval(cfg, args):
    model, _, _ = load_checkpoint(_need(cfg.paths.checkpoint, "checkpoint (--checkpoint)"))
    seqs = _split(_need(cfg.paths.dataset, "dataset (--dataset)"), cfg.eval.split)
    frames = cfg.eval.frames or None
    report = evaluate(model, seqs, frames)
    out = _out_dir(cfg)
    write_report(out / "eval_report.tsv", report, cfg.hash())
    write_predictions(out / "predictions.csv", report)
    plot_confusion(report.confusion, out / "confusion.png", f"accuracy {report.accuracy:.3f}")
    print(f"accuracy {report.accuracy:.4f} on {len(seqs)} items")
    return EXIT_OK


def cmd_sweep(cfg, args):
    model, _, _ = load_checkpoint(_need(cfg.paths.checkpoint, "checkpoint (--checkpoint)"))
    dataset = _need(cfg.paths.dataset, "dataset (--dataset)")
    splits = load_dataset(dataset)
    if cfg.eval.split not in splits:
        raise FormatError(f"dataset {dataset} has no {cfg.eval.split!r} split")
    test = splits[cfg.eval.split]
    frame_counts = list(cfg.eval.sweep)
    rows = density_sweep(model, test, frame_counts)
    series = {"head": rows}
    baseline_rows = None
    if "train" in splits:
        _, baseline = mean_pool_baseline(splits["train"], test, classes=model.config.classes)
        baseline_rows = density_sweep(baseline, test, frame_counts)
        series["mean-pool baseline"] = baseline_rows
    out = _out_dir(cfg)
    write_sweep(out / "sweep.csv", rows, cfg.hash(), baseline_rows)
    plot_sweep(series, out / "sweep.png")
    for frames, acc in rows:
        print(f"{frames}\t{acc:.4f}")
    return EXIT_OK


def cmd_fuse(cfg, args):
    reports = []
    for ckpt, data in (
        (cfg.paths.checkpoint, cfg.paths.dataset),
        (cfg.paths.checkpoint_b, cfg.paths.dataset_b),
    ):
        model, _, _ = load_checkpoint(_need(ckpt, "checkpoint of each stream"))
        seqs = _split(_need(data, "dataset of each stream"), cfg.eval.split)
        reports.append(evaluate(model, seqs, cfg.eval.frames or None))
    fused = fuse_streams(reports[0], reports[1], cfg.eval.fusion_weights)
    out = _out_dir(cfg)
    write_report(out / "fused_report.tsv", fused, cfg.hash())
    write_predictions(out / "fused_predictions.csv", fused)
    with open(out / "stream_accuracy.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stream", "accuracy"])
        for name, rep in (("a", reports[0]), ("b", reports[1]), ("fused", fused)):
            writer.writerow([name, repr(rep.accuracy)])
    plot_confusion(fused.confusion, out / "fused_confusion.png", f"fused accuracy {fused.accuracy:.3f}")
    print(f"a {reports[0].accuracy:.4f} b {reports[1].accuracy:.4f} fused {fused.accuracy:.4f}")
    return EXIT_OK


def cmd_viz(cfg, args):
    model, _, _ = load_checkpoint(_need(cfg.paths.checkpoint, "checkpoint (--checkpoint)"))
    seqs = _split(_need(cfg.paths.dataset, "dataset (--dataset)"), cfg.eval.split)
    if args.items:
        wanted = args.items.split(",")
        by_id = {s.id: s for s in seqs}
        missing = [w for w in wanted if w not in by_id]
        if missing:
            raise UsageError(f"unknown item id(s): {', '.join(missing)}")
        chosen = [by_id[w] for w in wanted]
    else:
        chosen = seqs[: cfg.eval.viz_items]
    out = _out_dir(cfg) / "viz"
    out.mkdir(exist_ok=True)
    frames = model.config.frames
    for seq in chosen:
        vmap = resample_temporal(build_videomap(seq), frames)
        logits = evaluate(model, [vmap]).scores[0]
        k = args.class_index if args.class_index is not None else cfg.eval.viz_class
        k = int(np.argmax(logits)) if k < 0 else k
        _, response = temporal_response_map(vmap, model, k)
        mask = None if seq.mask is None else resample_temporal(seq.mask[:, None], frames)[:, 0]
        with open(out / f"{seq.id}.csv", "w", newline="") as fh:
            fh.write(f"# config {cfg.hash()} class {k} label {seq.label}\n")
            writer = csv.writer(fh)
            writer.writerow(["frame", "response"])
            for t, r in enumerate(response):
                writer.writerow([t, repr(float(r))])
        plot_response(vmap.matrix, response, out / f"{seq.id}.png", mask, f"{seq.id} class {k}")
    print(f"wrote {len(chosen)} response maps to {out}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "fuse": cmd_fuse,
    "viz": cmd_viz,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.verbose:
            sys.stderr.write(dump_config(cfg))
        return COMMANDS[args.command](cfg, args)
    except (UsageError, FileExistsError, ValueError) as exc:
        if isinstance(exc, (FormatError, DimensionError)):
            print(f"tsm: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"tsm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, IndexError) as exc:
        print(f"tsm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"tsm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
