"""Command-line entry point: ``approxcnn <subcommand> ...``.

Exit status is 0 on success, 2 for usage errors (bad flags, unknown kernel
ids) and 1 for data errors.  Output files are written via temp + rename, so
they only appear once a command has succeeded.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import datasets, engine, evaluation, kernels, model_io, trainer
from .errors import EmptyDataset, FormatError, IngestError, InvalidParam, ShapeError

DATA_ERRORS = (FormatError, IngestError, EmptyDataset, ShapeError, OverflowError, OSError, InvalidParam)

BENCH_COLUMNS = ("kernel", "samples", "overflows", "mean_rel_error", "max_rel_error",
                 "underestimate_fraction", "avg_mul", "avg_add", "avg_shift", "avg_xor",
                 "avg_log2", "avg_ops")


class UsageError(Exception):
    pass


def _write_atomic(path: str | None, data: bytes):
    if path is None or path == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
        return
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, target)


# ----------------------------------------------------------------------------
# flag parsing

def _parse_synth(text: str) -> tuple[int, int, int]:
    try:
        classes, per_class, size = (int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--synth expects classes,perClass,size, got {text!r}") from None
    return classes, per_class, size


def _parse_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--range expects lo,hi, got {text!r}") from None
    if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
        raise UsageError(f"--range needs finite lo < hi, got {text!r}")
    return lo, hi


def _parse_weights(text: str | None) -> dict[str, float] | None:
    if not text:
        return None
    out = {}
    for part in text.split(","):
        key, sep, value = part.partition("=")
        key = key.strip()
        if not sep or key not in kernels.PRIMITIVES:
            raise UsageError(f"--op-weights entries must be <{'|'.join(kernels.PRIMITIVES)}>=<number>, got {part!r}")
        try:
            out[key] = float(value)
        except ValueError:
            raise UsageError(f"bad weight {value!r} for {key}") from None
        if out[key] < 0:
            raise UsageError(f"weight for {key} must be non-negative")
    return out


def _parse_assignment(text: str, n_conv: int = 4) -> engine.LayerAssignment:
    try:
        return engine.parse_assignment(text, n_conv)
    except InvalidParam as exc:
        raise UsageError(f"--assign: {exc}") from None


def _parse_kernel_ids(ids) -> list[str]:
    for kid in ids:
        try:
            kernels.MulKernel.from_id(kid)
        except InvalidParam as exc:
            raise UsageError(str(exc)) from None
    return list(ids)


def _parse_patterns(text: str) -> list[str]:
    patterns = [p.strip().upper() for p in text.split(",") if p.strip()]
    if not patterns:
        raise UsageError("--patterns is empty")
    for p in patterns:
        if len(p) not in (2, 3) or set(p) - set("LHE"):
            raise UsageError(f"pattern {p!r} must be 2-3 letters from L, H, E")
    return patterns


def _parse_pools(text: str):
    """``reference``, ``measured`` or ``L=a,b;H=c,d``."""
    if text in ("reference", "measured"):
        return text
    pools = {}
    for part in text.split(";"):
        letter, sep, ids = part.partition("=")
        letter = letter.strip().upper()
        if not sep or letter not in ("L", "H"):
            raise UsageError(f"--pools entries must look like L=id,id;H=id,id, got {part!r}")
        pools[letter] = _parse_kernel_ids([i.strip() for i in ids.split(",") if i.strip()])
    return pools


# ----------------------------------------------------------------------------
# data helpers

def _dataset_for(args, input_shape: tuple | None = None, classes: int | None = None) -> datasets.Dataset:
    if args.synth:
        c, p, s = _parse_synth(args.synth)
        ds = datasets.gen_synthetic_dataset(c, p, s, seed=args.seed)
    else:
        size = tuple(input_shape[1:]) if input_shape else (30, 30)
        ds = datasets.load_dataset(args.manifest, size=size, num_classes=classes, workers=args.workers)
    split = args.split
    if split == "auto":
        split = "test" if args.synth else "all"
    if split == "all":
        return ds
    train_ds, test_ds = datasets.split_dataset(ds, args.test_fraction, seed=args.seed)
    return train_ds if split == "train" else test_ds


def bench_kernels(samples: int, lo: float, hi: float, seed: int, kernel_ids=kernels.KERNEL_IDS) -> list[dict]:
    """Relative-error and cost statistics of each kernel on seeded operand pairs."""
    if samples < 1000:
        raise InvalidParam("bench needs at least 1000 samples")
    rng = np.random.default_rng(seed)
    a = rng.uniform(lo, hi, size=samples)
    b = rng.uniform(lo, hi, size=samples)
    rows = []
    for kid in kernel_ids:
        kernel = kernels.MulKernel.from_id(kid)
        lim_a, lim_b = kernels.operand_limits(kernel)
        ok = (np.abs(a) < lim_a) & (np.abs(b) < lim_b)
        exact = a[ok] * b[ok]
        keep = exact != 0
        row = {"kernel": kid, "samples": samples, "overflows": int(samples - ok.sum())}
        if ok.any():
            approx, ops = kernels.multiply_with_cost(kernel, a[ok], b[ok])
            rel = np.abs(approx[keep] - exact[keep]) / np.abs(exact[keep])
            n_ok = int(ok.sum())
            row.update(
                mean_rel_error=float(rel.mean()) if rel.size else 0.0,
                max_rel_error=float(rel.max()) if rel.size else 0.0,
                underestimate_fraction=float(np.mean(np.abs(approx) < np.abs(exact))),
                **{f"avg_{k}": v / n_ok for k, v in ops.as_dict().items()},
                avg_ops=ops.total() / n_ok,
            )
        else:
            row.update({c: float("nan") for c in BENCH_COLUMNS[3:]})
        rows.append(row)
    return rows


def _bench_csv(rows: list[dict]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS)
    for row in rows:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in BENCH_COLUMNS])
    return buf.getvalue().encode("utf-8")


# ----------------------------------------------------------------------------
# commands

def cmd_bench_kernels(args) -> int:
    lo, hi = _parse_range(args.range)
    if args.samples < 1000:
        raise UsageError("--samples must be at least 1000")
    ids = _parse_kernel_ids([k.strip() for k in args.kernels.split(",")] if args.kernels else kernels.KERNEL_IDS)
    rows = bench_kernels(args.samples, lo, hi, args.seed, ids)
    data = _bench_csv(rows) if args.format == "csv" else (json.dumps(rows, indent=2) + "\n").encode()
    _write_atomic(args.out, data)
    return 0


def cmd_train(args) -> int:
    if not (args.synth or args.manifest):
        raise UsageError("train needs --synth or --manifest")
    if args.synth:
        c, p, s = _parse_synth(args.synth)
        ds = datasets.gen_synthetic_dataset(c, p, s, seed=args.seed)
    else:
        shape = engine.ARCHITECTURES[args.arch]["input_shape"]
        ds = datasets.load_dataset(args.manifest, size=shape[1:], workers=args.workers)
    train_ds, test_ds = datasets.split_dataset(ds, args.test_fraction, seed=args.seed)
    net = engine.build_network(args.arch, ds.num_classes, seed=args.seed)
    if net.input_shape[1:] != ds.image_shape[1:]:
        raise ShapeError(f"dataset images {ds.image_shape} do not fit {args.arch} input {net.input_shape}")
    cfg = trainer.TrainConfig(args.lr, args.epochs, args.batch_size, args.seed, args.lr_decay)
    net, history = trainer.train(net, train_ds, cfg, test_ds if len(test_ds) else None)
    model_io.save_model(net, args.out)
    if args.history:
        _write_atomic(args.history, (json.dumps(history, indent=2) + "\n").encode())
    last = history[-1]
    print(f"trained {args.arch}: loss {last['train_loss']:.4f}"
          + (f", held-out accuracy {last['holdout_accuracy']:.2f}%" if "holdout_accuracy" in last else ""),
          file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    weights = _parse_weights(args.op_weights)
    assign = _parse_assignment(args.assign)
    net = model_io.load_model(args.model)
    if len(net.conv_positions) != len(assign.conv):
        assign = _parse_assignment(args.assign, len(net.conv_positions))
    ds = _dataset_for(args, net.input_shape, net.num_classes)
    report = evaluation.evaluate(net, assign, ds, args.workers, weights)
    _write_atomic(args.out, evaluation.emit_report(report, args.format))
    return 0


def cmd_sweep(args) -> int:
    weights = _parse_weights(args.op_weights)
    patterns = _parse_patterns(args.patterns)
    pools = _parse_pools(args.pools)
    net = model_io.load_model(args.model)
    ds = _dataset_for(args, net.input_shape, net.num_classes)
    if pools == "reference":
        pools = evaluation.reference_pools(args.threshold)
    elif pools == "measured":
        pools, _ = evaluation.measure_precision(net, ds, workers=args.workers, threshold=args.threshold)
    report = evaluation.sweep(net, ds, patterns, pools, args.workers, weights)
    _write_atomic(args.out, evaluation.emit_report(report, args.format))
    return 0


def cmd_dataset_synth(args) -> int:
    c, p, s = _parse_synth(args.synth)
    ds = datasets.gen_synthetic_dataset(c, p, s, seed=args.seed)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".tmp")
    if tmp.exists():
        raise FormatError(f"temporary directory {tmp} already exists")
    datasets.write_dataset(ds, tmp)
    if out.exists():
        raise FormatError(f"output directory {out} already exists")
    os.replace(tmp, out)
    return 0


def cmd_inspect_model(args) -> int:
    net = model_io.load_model(args.model)
    shapes = net.layer_shapes()
    layers = []
    for layer, shape in zip(net.layers, shapes):
        entry = {"kind": layer.kind, "output_shape": list(shape)}
        if layer.is_parametric:
            entry["weights"] = list(layer.weights.shape)
            entry["parameters"] = int(layer.weights.size + layer.biases.size)
        layers.append(entry)
    summary = {
        "name": net.name,
        "input_shape": list(net.input_shape),
        "classes": net.num_classes,
        "conv_layers": len(net.conv_positions),
        "parameters": sum(l.get("parameters", 0) for l in layers),
        "exact_ops_per_image": engine.exact_op_count(net).as_dict(),
        "layers": layers,
    }
    _write_atomic(args.out, (json.dumps(summary, indent=2) + "\n").encode())
    return 0


# ----------------------------------------------------------------------------

def _add_data_flags(p: argparse.ArgumentParser):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--manifest", help="dataset manifest CSV (path,label per line)")
    src.add_argument("--synth", metavar="C,P,S", help="synthetic dataset: classes,perClass,size")
    p.add_argument("--split", choices=("auto", "train", "test", "all"), default="auto",
                   help="subset to use; auto = test for --synth, all for --manifest")
    p.add_argument("--test-fraction", type=float, default=0.2)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="approxcnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench-kernels", help="error/cost statistics of every kernel")
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--range", default="1,100", help="operand range lo,hi")
    p.add_argument("--kernels", help="comma-separated kernel ids (default: all)")
    p.set_defaults(func=cmd_bench_kernels)

    p = sub.add_parser("train", help="train a reference model with exact arithmetic")
    _add_data_flags(p)
    p.add_argument("--arch", choices=sorted(engine.ARCHITECTURES), default="appsign-tiny")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--lr-decay", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--history", help="write per-epoch history JSON here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one layer assignment")
    _add_data_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--assign", default="1=exact", help='e.g. "1=rounded,2=tirud" or "RT"')
    p.add_argument("--op-weights", help="e.g. mul=4,add=1")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="evaluate every assignment of the given patterns")
    _add_data_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--patterns", default="LHH,HLH,LHL,HLL")
    p.add_argument("--pools", default="reference",
                   help="reference | measured | L=id,id;H=id,id")
    p.add_argument("--threshold", type=float, default=80.0)
    p.add_argument("--op-weights", help="e.g. mul=4,add=1")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dataset-synth", help="write a synthetic dataset as PPM files + manifest")
    p.add_argument("--synth", required=True, metavar="C,P,S")
    p.set_defaults(func=cmd_dataset_synth)

    p = sub.add_parser("inspect-model", help="summarise a model file")
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_inspect_model)

    for name, sp in sub.choices.items():
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output path (default: stdout)", required=name in ("train", "dataset-synth"))
        if name not in ("dataset-synth", "inspect-model"):
            sp.add_argument("--workers", type=int, default=1)
        if name in ("bench-kernels", "eval", "sweep"):
            sp.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be at least 1")
    if args.command in ("eval", "sweep") and not (args.synth or args.manifest):
        parser.error(f"{args.command} needs --synth or --manifest")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
