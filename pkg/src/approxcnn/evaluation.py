"""Accuracy/cost evaluation, the accuracy-over-computations metric and sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import json
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .datasets import Dataset
from .engine import LayerAssignment, NetworkSpec, forward_batch, network_forward
from .errors import EmptyDataset, InvalidParam
from .kernels import EXACT, MulKernel, OpCount, merge

HIGH, LOW = "High", "Low"

# Average accuracy (%) of each kernel over conv layers 1-3 of the GTSRB model,
# as published; used as the default High/Low pools.
REFERENCE_AVERAGE_ACCURACY = {
    "famm": 85.98,
    "quantize": 86.50,
    "lns": 93.84,
    "shift_add": 82.05,
    "tirud": 84.19,
    "rounded": 70.70,
    "shift_xor": 73.79,
}

CSV_COLUMNS = ("rank", "pattern", "layer1", "layer2", "layer3", "layer4",
               "accuracy_percent", "kilo_ops", "aoc", "saturations")


def compute_aoc(accuracy_percent: float, total_ops, weights: Mapping[str, float] | None = None,
                alpha: float = 1.0, beta: float = 1.0) -> float:
    """Accuracy percent over kilo-operations: ``acc**alpha / (ops/1000)**beta``.

    ``total_ops`` is an :class:`OpCount` (weighted by ``weights``) or a plain
    operation count.
    """
    cost = total_ops.total(weights) if isinstance(total_ops, OpCount) else float(total_ops)
    if cost <= 0:
        raise ZeroDivisionError("AoC needs a positive operation count")
    return float(accuracy_percent) ** alpha / (cost / 1000.0) ** beta


@dataclass
class EvalReport:
    assignment: LayerAssignment
    accuracy_percent: float
    total_ops: OpCount
    kilo_ops: float
    aoc: float
    saturation_count: int
    images: int
    predictions: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)

    @property
    def correct(self) -> np.ndarray:
        return self.predictions == self.labels


_EVAL_BATCH = 32


def _eval_chunk(net: NetworkSpec, assign: LayerAssignment, images: np.ndarray):
    """Predictions, summed ops and saturation count for one assignment."""
    preds = np.full(len(images), -1, dtype=np.int64)
    ops = OpCount()
    saturated = 0
    for start in range(0, len(images), _EVAL_BATCH):
        batch = images[start:start + _EVAL_BATCH]
        try:
            logits, per_layer = forward_batch(net, assign, batch)
        except OverflowError:
            # find out which images saturate
            for i, x in enumerate(batch, start):
                try:
                    logits, count = network_forward(net, assign, x)
                except OverflowError:
                    saturated += 1
                    continue
                preds[i] = int(np.argmax(logits))
                ops += count
            continue
        preds[start:start + len(batch)] = logits.argmax(axis=1)
        ops += merge(*per_layer)
    return preds, ops, saturated


def _segments(net: NetworkSpec) -> list[tuple[int, int]]:
    """Layer ranges that each begin at a conv layer (the first also covers any prefix)."""
    n = len(net.layers) - (1 if net.layers and net.layers[-1].kind == "softmax" else 0)
    bounds = [0] + net.conv_positions[1:] + [n]
    return list(zip(bounds[:-1], bounds[1:]))


def _shared_prefix_batch(net: NetworkSpec, assigns: list[LayerAssignment], batch: np.ndarray,
                         segments: list[tuple[int, int]]) -> dict:
    """Evaluate several assignments on one batch, running each distinct kernel prefix once.

    A prefix whose segment overflows falls back to :func:`_eval_chunk` for the
    assignments below it, so results match evaluating each one separately.
    """
    out = {}

    def walk(x, depth, group, ops):
        if depth == len(segments):
            preds = x.argmax(axis=1)
            for a in group:
                out[a.id] = (preds, ops, 0)
            return
        start, stop = segments[depth]
        has_dense = any(layer.kind == "dense" for layer in net.layers[start:stop])
        branches: dict = {}
        for a in group:
            key = (a.kernel_for_conv(depth + 1), a.dense if has_dense else None)
            branches.setdefault(key, []).append(a)
        for sub in branches.values():
            try:
                y, per_layer = forward_batch(net, sub[0], x, start=start, stop=stop)
            except OverflowError:
                for a in sub:
                    out[a.id] = _eval_chunk(net, a, batch)
                continue
            walk(y, depth + 1, sub, ops + merge(*per_layer))

    walk(batch, 0, assigns, OpCount())
    return out


def _eval_many_chunk(net: NetworkSpec, assigns: list[LayerAssignment], images: np.ndarray) -> dict:
    segments = _segments(net)
    parts: dict = {a.id: [] for a in assigns}
    for start in range(0, len(images), _EVAL_BATCH):
        for key, part in _shared_prefix_batch(net, assigns, images[start:start + _EVAL_BATCH], segments).items():
            parts[key].append(part)
    return {
        key: (np.concatenate([p for p, _, _ in ps]), merge(*(o for _, o, _ in ps)), sum(s for _, _, s in ps))
        for key, ps in parts.items()
    }


def _image_chunks(n: int, workers: int) -> list[np.ndarray]:
    # chunk edges sit on batch boundaries so batch contents never depend on workers
    batches = np.array_split(np.arange(n), range(_EVAL_BATCH, n, _EVAL_BATCH))
    groups = np.array_split(np.arange(len(batches)), max(workers, 1))
    return [np.concatenate([batches[b] for b in g]) for g in groups if len(g)]


def evaluate_many(net: NetworkSpec, assigns, dataset: Dataset, workers: int = 1,
                  op_weights: Mapping[str, float] | None = None,
                  executor: Executor | None = None) -> dict[str, "EvalReport"]:
    """Evaluate several assignments, keyed by assignment id.

    Assignments that share kernels on leading conv layers share that work.
    Reports are identical to calling :func:`evaluate` on each assignment.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    unique = list({a.id: a for a in assigns}.values())
    if workers > 1 or executor is not None:
        own = executor is None
        pool = ProcessPoolExecutor(workers) if own else executor
        try:
            futures = [pool.submit(_eval_many_chunk, net, unique, dataset.images[c])
                       for c in _image_chunks(n, workers)]
            chunk_results = [f.result() for f in futures]
        finally:
            if own:
                pool.shutdown()
    else:
        chunk_results = [_eval_many_chunk(net, unique, dataset.images)]
    return {a.id: _make_report(a, dataset, [r[a.id] for r in chunk_results], op_weights) for a in unique}


def _make_report(assign: LayerAssignment, dataset: Dataset, parts, op_weights) -> "EvalReport":
    n = len(dataset)
    preds = np.concatenate([p for p, _, _ in parts])
    total = merge(*(o for _, o, _ in parts))
    saturated = sum(s for _, _, s in parts)
    accuracy = 100.0 * int(np.sum(preds == dataset.labels)) / n
    completed = n - saturated
    kilo = total.total(op_weights) / completed / 1000.0 if completed else 0.0
    aoc = accuracy / kilo if kilo > 0 else 0.0
    return EvalReport(assign, accuracy, total, kilo, aoc, saturated, n, preds, dataset.labels.copy())


def evaluate(net: NetworkSpec, assign: LayerAssignment, dataset: Dataset, workers: int = 1,
             op_weights: Mapping[str, float] | None = None, executor: Executor | None = None) -> EvalReport:
    """Classify every image under ``assign`` and tally accuracy and cost.

    An image whose forward pass overflows a fixed-point kernel counts as
    misclassified (prediction -1) and as a saturation; its ops are not
    counted.  ``kilo_ops`` is the weighted op count per image in thousands,
    averaged over the images that completed.  Results do not depend on
    ``workers``.
    """
    return evaluate_many(net, [assign], dataset, workers, op_weights, executor)[assign.id]


# ----------------------------------------------------------------------------
# precision classes and assignment enumeration

@dataclass
class PrecisionClass:
    labels: dict[str, str]
    threshold: float = 80.0

    def pool(self, letter: str) -> list[str]:
        if letter == "E":
            return ["exact"]
        want = {"H": HIGH, "L": LOW}.get(letter)
        if want is None:
            raise InvalidParam(f"unknown pattern letter {letter!r}")
        return sorted(k for k, v in self.labels.items() if v == want)


def classify_precision(results: Mapping[str, float], threshold: float = 80.0) -> PrecisionClass:
    """Label each kernel High when its average accuracy is >= ``threshold``."""
    if not results:
        raise InvalidParam("no benchmark results to classify")
    return PrecisionClass({k: HIGH if acc >= threshold else LOW for k, acc in results.items()}, threshold)


def reference_pools(threshold: float = 80.0) -> PrecisionClass:
    return classify_precision(REFERENCE_AVERAGE_ACCURACY, threshold)


def measure_precision(net: NetworkSpec, dataset: Dataset, kernels=None, layers=(1, 2, 3),
                      workers: int = 1, threshold: float = 80.0) -> tuple[PrecisionClass, dict[str, float]]:
    """Average accuracy of each kernel applied to one conv layer at a time."""
    kernels = list(kernels or REFERENCE_AVERAGE_ACCURACY)
    n_conv = len(net.conv_positions)
    averages = {}
    for kid in kernels:
        kernel = MulKernel.from_id(kid)
        accs = [
            evaluate(net, LayerAssignment.from_mapping({layer: kernel}, n_conv), dataset, workers).accuracy_percent
            for layer in layers
        ]
        averages[kid] = float(np.mean(accs))
    return classify_precision(averages, threshold), averages


def _pool_lists(pools) -> dict[str, list[str]]:
    if isinstance(pools, PrecisionClass):
        return {letter: pools.pool(letter) for letter in "HLE"}
    out = {letter: sorted(ids) for letter, ids in pools.items()}
    out.setdefault("E", ["exact"])
    for ids in out.values():
        for kid in ids:
            MulKernel.from_id(kid)
    return out


def enumerate_assignments(pattern: str, pools, n_conv: int = 4) -> list[LayerAssignment]:
    """All assignments placing pool members positionally over conv layers 1..len(pattern).

    Remaining conv layers, and always the last one, run exact.  Order is the
    lexicographic product of the sorted pools.
    """
    pattern = pattern.strip().upper()
    if len(pattern) not in (2, 3):
        raise InvalidParam(f"pattern length must be 2 or 3, got {pattern!r}")
    if len(pattern) >= n_conv:
        raise InvalidParam(f"pattern {pattern!r} would reach the last conv layer")
    lists = _pool_lists(pools)
    choices = []
    for letter in pattern:
        if letter not in "LHE":
            raise InvalidParam(f"pattern letters must be L, H or E, got {letter!r}")
        if not lists.get(letter):
            raise InvalidParam(f"empty pool for pattern letter {letter!r}")
        choices.append(lists[letter])
    out = []
    for combo in itertools.product(*choices):
        kernels = [MulKernel.from_id(k) for k in combo] + [EXACT] * (n_conv - len(combo))
        out.append(LayerAssignment(tuple(kernels)))
    return out


# ----------------------------------------------------------------------------
# sweeps

@dataclass
class PatternStats:
    avg_accuracy: float
    max_accuracy: float
    min_accuracy: float
    avg_aoc: float
    count: int


@dataclass
class SweepRow:
    pattern: str
    report: EvalReport


@dataclass
class SweepReport:
    rows: list[SweepRow]
    pattern_stats: dict[str, PatternStats]

    def ranked(self) -> list[SweepRow]:
        """Rows by AoC descending; ties by assignment id, then pattern."""
        return sorted(self.rows, key=lambda r: (-r.report.aoc, r.report.assignment.id, r.pattern))


def pattern_statistics(rows: list[SweepRow]) -> dict[str, PatternStats]:
    grouped: dict[str, list[EvalReport]] = {}
    for row in rows:
        grouped.setdefault(row.pattern, []).append(row.report)
    stats = {}
    for pattern, reports in grouped.items():
        accs = [r.accuracy_percent for r in reports]
        stats[pattern] = PatternStats(
            avg_accuracy=float(np.mean(accs)),
            max_accuracy=max(accs),
            min_accuracy=min(accs),
            avg_aoc=float(np.mean([r.aoc for r in reports])),
            count=len(reports),
        )
    return stats


def sweep(net: NetworkSpec, dataset: Dataset, patterns, pools, workers: int = 1,
          op_weights: Mapping[str, float] | None = None) -> SweepReport:
    """Evaluate every assignment of every pattern; identical assignments run once."""
    n_conv = len(net.conv_positions)
    plan = [(p.strip().upper(), a) for p in patterns for a in enumerate_assignments(p, pools, n_conv)]
    reports = evaluate_many(net, [a for _, a in plan], dataset, workers, op_weights)
    rows = [SweepRow(p, reports[a.id]) for p, a in plan]
    return SweepReport(rows, pattern_statistics(rows))


# ----------------------------------------------------------------------------
# report emission

def _row_dict(rank: int, pattern: str, report: EvalReport) -> dict:
    layers = [k.id for k in report.assignment.conv][:4]
    layers += ["exact"] * (4 - len(layers))
    return {
        "rank": rank,
        "pattern": pattern,
        "layer1": layers[0], "layer2": layers[1], "layer3": layers[2], "layer4": layers[3],
        "accuracy_percent": float(report.accuracy_percent),
        "kilo_ops": float(report.kilo_ops),
        "aoc": float(report.aoc),
        "saturations": int(report.saturation_count),
    }


def report_document(report) -> dict:
    """Plain-data view of an EvalReport or SweepReport."""
    if isinstance(report, SweepReport):
        rows = [_row_dict(i + 1, r.pattern, r.report) for i, r in enumerate(report.ranked())]
        stats = {p: vars(s).copy() for p, s in sorted(report.pattern_stats.items())}
        return {"rows": rows, "pattern_stats": stats}
    return {
        "rows": [_row_dict(1, "", report)],
        "images": report.images,
        "total_ops": report.total_ops.as_dict(),
    }


def emit_document(doc: dict, fmt: str = "csv") -> bytes:
    if fmt == "json":
        return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8")
    if fmt != "csv":
        raise InvalidParam(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in doc["rows"]:
        writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in CSV_COLUMNS])
    return buf.getvalue().encode("utf-8")


def emit_report(report, fmt: str = "csv") -> bytes:
    """Serialise a report as CSV (ranked rows) or JSON (rows plus statistics)."""
    return emit_document(report_document(report), fmt)


def parse_report(data: bytes, fmt: str = "csv") -> dict:
    """Inverse of :func:`emit_report`, returning the plain-data document."""
    text = data.decode("utf-8")
    if fmt == "json":
        return json.loads(text)
    if fmt != "csv":
        raise InvalidParam(f"unknown report format {fmt!r}")
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise InvalidParam(f"unexpected CSV header {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append({
            "rank": int(rec["rank"]),
            "pattern": rec["pattern"],
            **{f"layer{i}": rec[f"layer{i}"] for i in range(1, 5)},
            "accuracy_percent": float(rec["accuracy_percent"]),
            "kilo_ops": float(rec["kilo_ops"]),
            "aoc": float(rec["aoc"]),
            "saturations": int(rec["saturations"]),
        })
    return {"rows": rows}
