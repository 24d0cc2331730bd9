"""Command-line surface: dataset synthesis, training, evaluation,
cross-validation, parameter audit, gradient checking and feature dumps.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
failure.  Only the standard library is imported at module scope so that
--threads can pin the BLAS thread count before numpy loads; --threads 1
(the default) guarantees bit-deterministic runs.
"""

import argparse
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GRADCHECK_OPS = ("conv2d", "relu", "elective", "additive", "fc",
                 "softmax_xent", "network")


class _Parser(argparse.ArgumentParser):
    """argparse with the usage exit code pinned to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pin_threads(argv):
    threads = "1"
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads.isdigit() and int(threads) > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def _resolve_seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("EXPERTNET_SEED", "")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"EXPERTNET_SEED={env!r} is not an integer")
    return 0


def build_parser():
    parser = _Parser(prog="expertnet",
                     description="Train, evaluate and inspect elective-fusion "
                                 "convolutional networks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (default: $EXPERTNET_SEED or 0)")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS thread count; 1 is bit-deterministic "
                             "(default: 1)")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", parents=[common], formatter_class=fmt,
                       help="write a synthetic oriented-grating dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--classes", type=int, default=4, help="number of classes")
    p.add_argument("--per-class", type=int, default=100, help="images per class")
    p.add_argument("--size", type=int, default=32, help="image side in pixels")
    p.add_argument("--noise", type=float, default=0.05,
                   help="Gaussian pixel noise stddev")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt,
                       help="train a model on a dataset tree")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--config", required=True, help="model config file")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate")
    p.add_argument("--batch", type=int, default=35, help="mini-batch size")
    p.add_argument("--epochs", type=int, default=200, help="training epochs")
    p.add_argument("--momentum", type=float, default=0.0, help="SGD momentum")
    p.add_argument("--augment", type=int, default=0,
                   help="rotated copies per train image (0 disables)")
    p.add_argument("--augment-translate", action="store_true",
                   help="also shift augmented copies by up to 10%%")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--log", default=None,
                   help="metrics log path; a .png curve figure is written "
                        "alongside")
    p.add_argument("--manifest", default=None,
                   help="optional split manifest path")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="checkpoint cadence in epochs (0 disables)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], formatter_class=fmt,
                       help="evaluate a model on one dataset split")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="which split to evaluate")
    p.add_argument("--fig", default=None,
                   help="optional confusion-heatmap figure path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", parents=[common], formatter_class=fmt,
                       help="audit per-layer shapes and parameter counts")
    p.add_argument("--config", required=True, help="model config file")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", parents=[common], formatter_class=fmt,
                       help="finite-difference check of every backward")
    p.add_argument("--op", default=None,
                   help=f"single op to check; one of: {', '.join(GRADCHECK_OPS)}")
    p.add_argument("--eps", type=float, default=None,
                   help="finite-difference step (default: per-op)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-features", parents=[common], formatter_class=fmt,
                       help="write per-channel feature maps as PGM files")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--image", required=True, help="input PGM/PPM image")
    p.add_argument("--layers", required=True,
                   help="comma-separated layer names to capture")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--montage", action="store_true",
                   help="also write one montage figure per layer")
    p.set_defaults(func=cmd_dump_features)

    p = sub.add_parser("crossval", parents=[common], formatter_class=fmt,
                       help="N-fold cross-validation on a dataset tree")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--config", required=True, help="model config file")
    p.add_argument("--folds", type=int, default=5, help="number of folds")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate")
    p.add_argument("--batch", type=int, default=35, help="mini-batch size")
    p.add_argument("--epochs", type=int, default=200, help="training epochs")
    p.add_argument("--momentum", type=float, default=0.0, help="SGD momentum")
    p.set_defaults(func=cmd_crossval)
    return parser


def cmd_synth(args, seed):
    from .data import synth_dataset

    count = synth_dataset(args.out, args.classes, args.per_class, args.size,
                          seed, noise=args.noise)
    print(f"wrote {count} images under {args.out}")
    return EXIT_OK


def _load_dataset_for(config, data_dir):
    from .data import ingest_dataset
    from .errors import DataError

    dataset = ingest_dataset(data_dir, size=(config.in_h, config.in_w))
    if dataset.errors:
        for path, message in dataset.errors:
            print(f"undecodable: {path}: {message}", file=sys.stderr)
        raise DataError(f"{len(dataset.errors)} files failed to decode")
    if len(dataset.class_names) != config.num_classes:
        raise DataError(f"dataset has {len(dataset.class_names)} classes, "
                        f"model expects {config.num_classes}")
    return dataset


def cmd_train(args, seed):
    from .data import AugmentSpec, augment_dataset, split_dataset, write_split_manifest
    from .model import build_network, load_config, save_model
    from .tensor import SeededRng
    from .train import TrainConfig, train_loop

    train_cfg = TrainConfig(lr=args.lr, batch_size=args.batch,
                            epochs=args.epochs, momentum=args.momentum,
                            seed=seed, checkpoint_every=args.checkpoint_every)
    config = load_config(args.config)
    dataset = _load_dataset_for(config, args.data)
    dataset = split_dataset(dataset, seed)
    if args.augment > 0:
        spec = AugmentSpec(copies=args.augment, seed=seed,
                           translate=args.augment_translate)
        dataset = augment_dataset(dataset, spec)
    if args.manifest:
        write_split_manifest(dataset, args.manifest)

    network = build_network(config, rng=SeededRng(seed))
    checkpoint = args.out + ".ckpt" if args.checkpoint_every else None
    metrics = train_loop(network, dataset, train_cfg, log_path=args.log,
                         checkpoint_path=checkpoint)
    Path(args.out).write_bytes(save_model(network))
    last = metrics.epochs[-1]
    print(f"epochs: {last.epoch}  train_loss: {last.train_loss:.4f}  "
          f"train_acc: {last.train_acc:.1f}  val_acc: {last.val_acc:.1f}")
    print(f"model written to {args.out}")
    if args.log:
        from .report import save_training_curves

        figure = str(Path(args.log).with_suffix(".png"))
        save_training_curves(metrics.epochs, figure)
        print(f"metrics log: {args.log}  curves: {figure}")
    return EXIT_OK


def cmd_eval(args, seed):
    from .errors import DataError
    from .model import load_model
    from .train import evaluate

    network = load_model(Path(args.model).read_bytes())
    from .data import split_dataset

    dataset = _load_dataset_for(network.config, args.data)
    dataset = split_dataset(dataset, seed)
    samples = dataset.subset(args.split)
    if not samples:
        raise DataError(f"split {args.split!r} is empty")
    accuracy, matrix = evaluate(network, samples)
    print(f"accuracy: {accuracy:.1f}")
    print(matrix.render(dataset.class_names))
    if args.fig:
        from .report import save_confusion_heatmap

        save_confusion_heatmap(matrix.counts, dataset.class_names, args.fig)
        print(f"heatmap: {args.fig}")
    return EXIT_OK


def cmd_params(args, seed):
    from .model import REFERENCE_PARAM_K, audit_params, format_shape, load_config

    config = load_config(args.config)
    rows, total = audit_params(config)
    # the classifier head (always last) is this artifact's addition and has
    # no printed reference entry
    param_layers = [name for name, _, _, count in rows[:-1] if count > 0]
    canonical = param_layers == list(REFERENCE_PARAM_K)

    name_w = max(len("layer"), max(len(r[0]) for r in rows))
    out_w = max(len("output"), max(len(r[2]) for r in rows))
    header = (f"{'layer':<{name_w}}  {'filter':<8}  {'output':<{out_w}}  "
              f"{'params':>12}")
    if canonical:
        header += f"  {'table':>7}  {'delta':>10}"
    print(header)
    print(f"{'input':<{name_w}}  {'-':<8}  "
          f"{format_shape((config.in_c, config.in_h, config.in_w)):<{out_w}}  "
          f"{'-':>12}")
    for name, desc, out_shape, count in rows:
        line = (f"{name:<{name_w}}  {desc:<8}  {out_shape:<{out_w}}  "
                f"{count if count else '-':>12}"
                if not count else
                f"{name:<{name_w}}  {desc:<8}  {out_shape:<{out_w}}  {count:>12,}")
        if canonical and count:
            printed_k = REFERENCE_PARAM_K[name]
            delta = count - printed_k * 1000
            rounded_k = int((count + 500) // 1000)
            if rounded_k == printed_k:
                line += f"  {printed_k:>6}K  {'ok':>10}"
            else:
                line += f"  {printed_k:>6}K  {delta:>+10,}"
        print(line)
    print(f"total: {total:,}")
    if canonical:
        flagged = [name for name, _, _, count in rows
                   if name in REFERENCE_PARAM_K
                   and int((count + 500) // 1000) != REFERENCE_PARAM_K[name]]
        if flagged:
            print(f"deltas vs printed reference table: {', '.join(flagged)}")
    return EXIT_OK


def cmd_gradcheck(args, seed):
    from .gradcheck import run_gradcheck

    started = time.perf_counter()
    results = run_gradcheck(seed, op=args.op, eps=args.eps)
    failed = [r for r in results if not r.passed]
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{result.name:<20} max_rel_err={result.max_rel_err:.3e}  "
              f"threshold={result.threshold:.0e}  {status}")
    print(f"checked {len(results)} backward(s) in "
          f"{time.perf_counter() - started:.1f}s")
    if failed:
        for result in failed:
            print(f"worst coordinate of {result.name}: {result.worst}",
                  file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_dump_features(args, seed):
    from .data import decode_netpbm, resize_nearest, write_pgm
    from .model import dump_feature_maps, load_model

    network = load_model(Path(args.model).read_bytes())
    image = decode_netpbm(Path(args.image).read_bytes())
    config = network.config
    image = resize_nearest(image, (config.in_h, config.in_w))
    layers = [name.strip() for name in args.layers.split(",") if name.strip()]
    if not layers:
        raise ValueError("no layer names given")
    batch = image[None].astype(network.dtype)
    _, captures = network.forward(batch, capture=set(layers))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for layer in layers:
        maps = dump_feature_maps(captures, layer)
        for channel, gray in enumerate(maps):
            write_pgm(out_dir / f"{layer}_{channel:03d}.pgm", gray)
            written += 1
        if args.montage:
            from .report import save_feature_montage

            save_feature_montage(maps, layer, out_dir / f"{layer}_montage.png")
        print(f"{layer}: {len(maps)} maps of "
              f"{maps[0].shape[0]}x{maps[0].shape[1]}")
    print(f"wrote {written} feature maps under {out_dir}")
    return EXIT_OK


def cmd_crossval(args, seed):
    from .model import load_config
    from .train import TrainConfig, crossvalidate

    config = load_config(args.config)
    config.seed = seed
    dataset = _load_dataset_for(config, args.data)
    train_cfg = TrainConfig(lr=args.lr, batch_size=args.batch,
                            epochs=args.epochs, momentum=args.momentum,
                            seed=seed)
    results, mean, std = crossvalidate(config, dataset, args.folds, train_cfg)
    for fold, (_, accuracy) in enumerate(results):
        print(f"fold {fold}: accuracy {accuracy:.1f}")
    print(f"mean accuracy: {mean:.1f}  stddev: {std:.1f}")
    return EXIT_OK


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _pin_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    from .errors import (ConfigError, DataError, FormatError, NumericError,
                         ShapeError)

    try:
        seed = _resolve_seed(args)
        print(f"seed: {seed}")
        return args.func(args, seed)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DataError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
