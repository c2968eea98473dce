"""Command-line entry point: ``sbnq {train,export,infer,verify,analyze}``.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 runtime/numeric failure. Progress goes to stderr, results to stdout/files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analyze, qat
from .arch import ArchError, load_arch
from .data import (DatasetFormatError, IDX_IMAGES_MAGIC, load_mnist_dir, parse_idx, read_image,
                   read_bytes, split_validation, to_u4)
from .itensor import OpAudit
from .model import ExportError, FormatError, GraphError, export_integer, infer_int, load, save

log = logging.getLogger("sbnq")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _positive_int(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return n


def _nonneg_int(v: str) -> int:
    n = int(v)
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return n


def _positive_float(v: str) -> float:
    x = float(v)
    if not x > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return x


def _bits(v: str) -> int:
    n = int(v)
    if not 2 <= n <= 8:
        raise argparse.ArgumentTypeError(f"bitwidth must be in [2, 8], got {v}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbnq", description="Integer-only SBNQ quantization toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="quantization-aware training of a sim model")
    t.add_argument("--dataset-dir", required=True, type=Path)
    t.add_argument("--arch", default="mnist_cnn", help="preset name or config file")
    t.add_argument("--out", required=True, type=Path, help="sim model path")
    t.add_argument("--metrics", type=Path, help="metrics CSV (default: <out>.metrics.csv)")
    t.add_argument("--epochs", type=_nonneg_int, default=12)
    t.add_argument("--lr", type=_positive_float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--lr-step", type=_nonneg_int, default=5, help="decay lr every K epochs (0: constant)")
    t.add_argument("--lr-gamma", type=_positive_float, default=0.2)
    t.add_argument("--batch-size", type=_positive_int, default=64)
    t.add_argument("--bits-w", type=_bits, default=4)
    t.add_argument("--bits-a", type=_bits, default=4)
    t.add_argument("--float-baseline", action="store_true",
                   help="train the float BatchNorm counterpart instead; writes metrics only")

    e = sub.add_parser("export", help="freeze a sim model into an integer-only model")
    e.add_argument("model", type=Path)
    e.add_argument("--out", required=True, type=Path)

    i = sub.add_parser("infer", help="integer-only inference")
    i.add_argument("model", type=Path)
    i.add_argument("--input", required=True, type=Path, help="image file or IDX image file")

    v = sub.add_parser("verify", help="compare sim and integer logits over a dataset")
    v.add_argument("sim_model", type=Path)
    v.add_argument("int_model", type=Path)
    v.add_argument("--dataset-dir", required=True, type=Path)
    v.add_argument("--split", choices=("train", "test"), default="test")
    v.add_argument("--limit", type=_nonneg_int, help="only the first N items")
    v.add_argument("--audit", action="store_true", help="record and check bitwidths of every kernel")

    a = sub.add_parser("analyze", help="figure experiments as CSV")
    a.add_argument("--experiment", required=True)
    a.add_argument("--out", type=Path, default=Path("reports"))
    a.add_argument("--samples", type=_positive_int)

    for sp in (t, e, i, v, a):
        sp.add_argument("--seed", type=_nonneg_int, default=0)
    return p


def _require_dir(path: Path, what: str):
    if not path.is_dir():
        raise UsageError(f"{what} {path} is not a directory")


def _require_file(path: Path, what: str):
    if not path.is_file():
        raise UsageError(f"{what} {path} does not exist")


def _load_model(path: Path, flavor: str):
    _require_file(path, "model")
    try:
        m = load(path)
    except FormatError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    if m.flavor != flavor:
        raise UsageError(f"{path} is a {m.flavor} model, expected {flavor}")
    return m


def cmd_train(args) -> int:
    _require_dir(args.dataset_dir, "dataset dir")
    if not args.out.parent.exists():
        raise UsageError(f"output directory {args.out.parent} does not exist")
    try:
        graph = load_arch(args.arch, weight_bits=args.bits_w, act_bits=args.bits_a, seed=args.seed)
        cfg = qat.TrainConfig(args.lr, args.momentum, args.epochs, args.batch_size, args.seed,
                              args.bits_w, args.bits_a, args.lr_step, args.lr_gamma)
        full = load_mnist_dir(args.dataset_dir, "train")
    except (ArchError, ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc
    if full.images.shape[1:] != graph.input_shape:
        raise UsageError(f"dataset images are {full.images.shape[1:]}, arch expects {graph.input_shape}")
    train_set, val_set = split_validation(full)
    log.info("training %s on %d items, validating on %d", args.arch, len(train_set), len(val_set))

    def progress(m):
        log.info("epoch %d: loss %.4f train %.4f val %.4f", m.epoch, m.train_loss, m.train_acc, m.val_acc)

    metrics_path = args.metrics or args.out.with_name(args.out.name + ".metrics.csv")
    if args.float_baseline:
        _, metrics = qat.train_float_baseline(graph, train_set, cfg, val_set, progress)
    else:
        trained, metrics = qat.train(graph, train_set, cfg, val_set, progress)
        save(trained, args.out)
        log.info("wrote %s", args.out)
    qat.write_metrics(metrics_path, metrics)
    return EXIT_OK


def cmd_export(args) -> int:
    sim = _load_model(args.model, "sim")
    try:
        integer = export_integer(sim)
    except ExportError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    save(integer, args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def _input_images(path: Path, shape) -> np.ndarray:
    _require_file(path, "input")
    raw = read_bytes(path)
    if raw[:4] == IDX_IMAGES_MAGIC.to_bytes(4, "big"):
        imgs = parse_idx(raw, IDX_IMAGES_MAGIC, str(path))
        return imgs[:, None] if imgs.ndim == 3 else imgs
    return read_image(path, shape)


def cmd_infer(args) -> int:
    m = _load_model(args.model, "integer")
    try:
        images = _input_images(args.input, m.input_shape)
    except (DatasetFormatError, OSError) as exc:
        raise UsageError(f"{args.input}: {exc}") from exc
    if images.shape[1:] != m.input_shape:
        raise UsageError(f"input images are {images.shape[1:]}, model expects {m.input_shape}")
    logits = infer_int(m, to_u4(images)).data
    out = sys.stdout
    out.write("index,class," + ",".join(f"logit{k}" for k in range(logits.shape[1])) + "\n")
    for n, row in enumerate(logits):
        out.write(f"{n},{int(row.argmax())}," + ",".join(str(int(v)) for v in row) + "\n")
    return EXIT_OK


def cmd_verify(args) -> int:
    sim = _load_model(args.sim_model, "sim")
    integer = _load_model(args.int_model, "integer")
    _require_dir(args.dataset_dir, "dataset dir")
    try:
        ds = load_mnist_dir(args.dataset_dir, args.split)
    except (DatasetFormatError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from exc
    if args.limit is not None:
        ds = ds.subset(slice(0, args.limit))
    report = verify_models(sim, integer, ds.images, ds.labels, audit=args.audit)
    for k, v in report.items():
        if k != "audit":
            print(f"{k}={v}")
    if args.audit:
        for name, s in report["audit"]["layers"].items():
            print(f"audit {name} " + " ".join(f"{k}={v}" for k, v in s.items()))
        print(f"audit_violations={len(report['audit']['violations'])}")
        for msg in report["audit"]["violations"]:
            print(f"violation {msg}")
    ok = report["logit_mismatches"] == 0 and (not args.audit or not report["audit"]["violations"])
    return EXIT_OK if ok else EXIT_VERIFY


def verify_models(sim, integer, images, labels, audit: bool = False, batch_size: int = 500) -> dict:
    """Run both paths and count disagreements."""
    n = len(images)
    mism_rows = mism_argmax = correct = 0
    recorder = OpAudit() if audit else None
    for s in range(0, n, batch_size):
        imgs = images[s:s + batch_size]
        li = infer_int(integer, to_u4(imgs), audit=recorder).data
        ls = qat.sim_logits(sim, imgs)
        mism_rows += int(np.any(li != ls, axis=1).sum())
        mism_argmax += int((li.argmax(1) != ls.argmax(1)).sum())
        correct += int((li.argmax(1) == labels[s:s + batch_size]).sum())
    report = {
        "items": n,
        "logit_mismatches": mism_rows,
        "argmax_mismatches": mism_argmax,
        "int_accuracy": correct / n if n else float("nan"),
    }
    if recorder is not None:
        report["audit"] = {"layers": recorder.summary(), "violations": recorder.violations}
    return report


def cmd_analyze(args) -> int:
    if args.experiment not in analyze.EXPERIMENTS:
        raise UsageError(f"unknown experiment {args.experiment!r}; choose from {', '.join(analyze.EXPERIMENTS)}")
    report = analyze.run(args.experiment, args.seed, args.samples)
    path = report.write(args.out)
    print(path)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "export": cmd_export, "infer": cmd_infer,
            "verify": cmd_verify, "analyze": cmd_analyze}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except qat.DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_RUNTIME
    except (ArithmeticError, GraphError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
