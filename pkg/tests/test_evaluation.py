import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from approxcnn.datasets import Dataset, gen_synthetic_dataset
from approxcnn.engine import LayerAssignment, build_network, network_forward, parse_assignment
from approxcnn.errors import EmptyDataset, InvalidParam
from approxcnn.evaluation import (
    CSV_COLUMNS, HIGH, LOW, REFERENCE_AVERAGE_ACCURACY, SweepReport, SweepRow, classify_precision,
    compute_aoc, emit_document, emit_report, enumerate_assignments, evaluate, evaluate_many, measure_precision, parse_report,
    pattern_statistics, reference_pools, sweep,
)
from approxcnn.kernels import OpCount


def _same_report(a, b):
    assert emit_report(a, "json") == emit_report(b, "json")
    assert np.array_equal(a.predictions, b.predictions)
    assert a.total_ops == b.total_ops and a.saturation_count == b.saturation_count


# ----------------------------------------------------------------------------
# AoC

@pytest.mark.parametrize("acc, kilo, want", [
    (94.33, 66.713, 1.41397), (84.19, 30.650, 2.74682), (93.84, 63.200, 1.48481),
])
def test_aoc_examples(acc, kilo, want):
    assert compute_aoc(acc, kilo * 1000) == pytest.approx(want, abs=1e-4)
    assert compute_aoc(acc, OpCount(mul=int(kilo * 1000))) == pytest.approx(want, abs=1e-4)


def test_aoc_edge_cases():
    assert compute_aoc(0.0, 12345) == 0.0
    with pytest.raises(ZeroDivisionError):
        compute_aoc(50.0, OpCount())
    ops = OpCount(mul=1000, add=1000)
    assert compute_aoc(90.0, ops) == pytest.approx(45.0)
    assert compute_aoc(90.0, ops, {"mul": 3.0}) == pytest.approx(22.5)
    assert compute_aoc(90.0, ops, alpha=2.0, beta=0.5) == pytest.approx(8100 / np.sqrt(2))


@given(st.floats(0, 100), st.floats(0, 100), st.integers(1, 10 ** 9), st.integers(1, 10 ** 9))
def test_aoc_monotonic(acc1, acc2, ops1, ops2):
    lo, hi = sorted((acc1, acc2))
    assert compute_aoc(lo, ops1) <= compute_aoc(hi, ops1)
    cheap, dear = sorted((ops1, ops2))
    assert compute_aoc(acc1, dear) <= compute_aoc(acc1, cheap)


# ----------------------------------------------------------------------------
# evaluate

def test_perfectly_classified_subset_scores_100(trained_tiny):
    net, _, test = trained_tiny
    report = evaluate(net, LayerAssignment(), test)
    good = test.subset(np.flatnonzero(report.correct))
    assert evaluate(net, LayerAssignment(), good).accuracy_percent == 100.0


def test_zero_kernel_collapses_to_class_zero():
    # static 4-bit segments of values < 16 are all zero; zero biases keep every logit at 0
    net = build_network("appsign-tiny", seed=0)
    ds = gen_synthetic_dataset(8, 3, 16, seed=0)
    report = evaluate(net, parse_assignment("1=ssm4,2=ssm4,3=ssm4,4=ssm4"), ds)
    assert report.predictions.tolist() == [0] * len(ds)
    assert report.accuracy_percent == pytest.approx(100.0 * np.mean(ds.labels == 0)) == pytest.approx(12.5)


def test_report_fields_are_consistent(trained_tiny):
    net, _, test = trained_tiny
    report = evaluate(net, parse_assignment("1=tirud,2=lns"), test.subset(range(20)))
    assert report.images == 20
    assert report.accuracy_percent == 100.0 * np.sum(report.predictions == report.labels) / 20
    assert report.kilo_ops == pytest.approx(report.total_ops.total() / 20 / 1000)
    assert report.aoc == pytest.approx(report.accuracy_percent / report.kilo_ops)
    weighted = evaluate(net, parse_assignment("1=tirud,2=lns"), test.subset(range(20)), op_weights={"log2": 5})
    assert weighted.kilo_ops > report.kilo_ops


def test_worker_count_does_not_change_report(trained_tiny):
    net, _, test = trained_tiny
    ds = test.subset(range(40))
    assign = parse_assignment("1=famm,2=quantize,3=shift_add")
    one = evaluate(net, assign, ds, workers=1)
    _same_report(one, evaluate(net, assign, ds, workers=8))
    _same_report(one, evaluate(net, assign, ds, workers=3))


def test_saturated_images_count_as_wrong():
    net = build_network("appsign-tiny", seed=0)
    ds = gen_synthetic_dataset(4, 3, 16, seed=0)
    images = ds.images.copy()
    images[::2] *= 400.0  # beyond the Q8.8 range
    ds = Dataset(images, ds.labels, 4)
    report = evaluate(net, parse_assignment("1=shift_xor"), ds)
    assert report.saturation_count == 6
    assert (report.predictions[::2] == -1).all() and (report.predictions[1::2] >= 0).all()
    clean = evaluate(net, parse_assignment("1=shift_xor"), ds.subset(range(1, 12, 2)))
    assert report.total_ops == clean.total_ops
    assert report.kilo_ops == pytest.approx(clean.kilo_ops)


def test_all_saturated_has_zero_aoc():
    net = build_network("appsign-tiny", seed=0)
    ds = Dataset(np.full((2, 3, 16, 16), 300.0), [0, 1], 2)
    report = evaluate(net, parse_assignment("1=famm,2=shift_xor"), ds)
    assert report.saturation_count == 2 and report.accuracy_percent == 0.0 and report.aoc == 0.0


def test_evaluate_empty():
    net = build_network("appsign-tiny", seed=0)
    with pytest.raises(EmptyDataset):
        evaluate(net, LayerAssignment(), Dataset(np.zeros((0, 3, 16, 16)), [], 8))


# ----------------------------------------------------------------------------
# precision classes and enumeration

def test_classify_precision_examples():
    assert classify_precision({"k": 93.84}).labels["k"] == HIGH
    assert classify_precision({"k": 70.70}).labels["k"] == LOW
    assert classify_precision({"k": 80.0}).labels["k"] == HIGH
    assert classify_precision({"k": 79.99}, threshold=79.99).labels["k"] == HIGH
    with pytest.raises(InvalidParam):
        classify_precision({})


def test_reference_pools():
    pools = reference_pools()
    assert pools.pool("H") == ["famm", "lns", "quantize", "shift_add", "tirud"]
    assert pools.pool("L") == ["rounded", "shift_xor"]
    assert pools.pool("E") == ["exact"]
    assert set(REFERENCE_AVERAGE_ACCURACY) == set(pools.labels)


def test_enumerate_examples():
    pools = {"L": ["shift_xor", "rounded"], "H": ["lns", "famm", "tirud"]}
    lh = enumerate_assignments("LH", pools)
    assert len(lh) == 6
    assert [a.id for a in lh][:2] == ["rounded,famm,exact,exact", "rounded,lns,exact,exact"]
    lhh = enumerate_assignments("LHH", reference_pools())
    assert len(lhh) == 50 and len({a.id for a in lhh}) == 50
    assert all(a.kernel_for_conv(4).id == "exact" for a in lh + lhh)
    assert [a.id for a in enumerate_assignments("EE", pools)] == ["exact,exact,exact,exact"]


def test_enumerate_errors():
    for bad in ("L", "LHHL", "LX", ""):
        with pytest.raises(InvalidParam):
            enumerate_assignments(bad, reference_pools())
    with pytest.raises(InvalidParam):
        enumerate_assignments("LH", {"L": [], "H": ["lns"]})
    with pytest.raises(InvalidParam):
        enumerate_assignments("LH", {"L": ["nope"], "H": ["lns"]})
    with pytest.raises(InvalidParam):
        enumerate_assignments("LHH", reference_pools(), n_conv=3)


def test_measure_precision_labels_by_threshold(trained_tiny):
    net, _, test = trained_tiny
    pools, averages = measure_precision(net, test.subset(range(16)), kernels=["lns", "rounded"], layers=(1,))
    for kid, acc in averages.items():
        assert pools.labels[kid] == (HIGH if acc >= 80 else LOW)


# ----------------------------------------------------------------------------
# sweeps and reports

@pytest.fixture(scope="module")
def small_sweep(trained_tiny):
    net, _, test = trained_tiny
    pools = {"L": ["rounded"], "H": ["lns", "tirud"]}
    ds = test.subset(range(12))
    return net, ds, pools, sweep(net, ds, ["LHH", "HLH", "LHL", "HLL"], pools)


def test_sweep_bookkeeping(small_sweep):
    _, _, _, report = small_sweep
    assert sorted(report.pattern_stats) == ["HLH", "HLL", "LHH", "LHL"]
    assert report.pattern_stats["LHH"].count == 4 and report.pattern_stats["HLL"].count == 2
    for stats in report.pattern_stats.values():
        assert stats.min_accuracy <= stats.avg_accuracy <= stats.max_accuracy
    assert pattern_statistics(report.rows) == report.pattern_stats


def test_sweep_ranking_is_stable(small_sweep):
    _, _, _, report = small_sweep
    ranked = report.ranked()
    keys = [(-r.report.aoc, r.report.assignment.id, r.pattern) for r in ranked]
    assert keys == sorted(keys)


def test_single_assignment_sweep(small_sweep):
    net, ds, _, _ = small_sweep
    rep = sweep(net, ds, ["LH"], {"L": ["rounded"], "H": ["lns"]})
    stats, row = rep.pattern_stats["LH"], rep.rows[0].report
    assert stats.avg_accuracy == stats.max_accuracy == stats.min_accuracy == row.accuracy_percent
    assert stats.avg_aoc == row.aoc


def test_sweep_reuses_identical_assignments(small_sweep):
    net, ds, _, _ = small_sweep
    rep = sweep(net, ds, ["LE", "LE"], {"L": ["rounded"]})
    assert rep.rows[0].report is rep.rows[1].report


def test_sweep_independent_of_workers(small_sweep):
    net, ds, pools, report = small_sweep
    other = sweep(net, ds, ["LHH", "HLH", "LHL", "HLL"], pools, workers=4)
    assert emit_report(other) == emit_report(report)
    assert emit_report(other, "json") == emit_report(report, "json")


def test_csv_layout_and_round_trip(small_sweep):
    _, _, _, report = small_sweep
    data = emit_report(report)
    lines = data.decode().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 1 + len(report.rows)
    doc = parse_report(data)
    for row in doc["rows"]:
        assert row["aoc"] == pytest.approx(row["accuracy_percent"] / row["kilo_ops"], rel=1e-6)
    assert [r["rank"] for r in doc["rows"]] == list(range(1, len(report.rows) + 1))
    assert emit_document(doc, "csv") == data


def test_json_round_trip(small_sweep):
    _, _, _, report = small_sweep
    data = emit_report(report, "json")
    doc = parse_report(data, "json")
    assert set(doc) == {"rows", "pattern_stats"}
    assert set(doc["pattern_stats"]["LHH"]) == {"avg_accuracy", "max_accuracy", "min_accuracy", "avg_aoc", "count"}
    assert emit_document(doc, "json") == data


def test_empty_report_is_header_only():
    data = emit_report(SweepReport([], {}))
    assert data == (",".join(CSV_COLUMNS) + "\n").encode()
    assert json.loads(emit_report(SweepReport([], {}), "json")) == {"rows": [], "pattern_stats": {}}
    with pytest.raises(InvalidParam):
        emit_report(SweepReport([], {}), "xml")
    with pytest.raises(InvalidParam):
        parse_report(b"a,b\n1,2\n")


def test_eval_report_document(trained_tiny):
    net, _, test = trained_tiny
    rep = evaluate(net, parse_assignment("T"), test.subset(range(8)))
    doc = parse_report(emit_report(rep, "json"), "json")
    assert doc["images"] == 8 and doc["rows"][0]["layer1"] == "tirud"
    assert doc["total_ops"] == rep.total_ops.as_dict()
    assert isinstance(SweepRow("LH", rep).report, type(rep))


def test_shared_prefix_sweep_matches_separate_evaluation(small_sweep):
    net, ds, _, report = small_sweep
    for row in report.rows[::3]:
        _same_report(row.report, evaluate(net, row.report.assignment, ds))


def test_shared_prefix_handles_overflow_branches():
    net = build_network("appsign-tiny", seed=0)
    ds = gen_synthetic_dataset(4, 3, 16, seed=0)
    images = ds.images.copy()
    images[::3] *= 400.0
    ds = Dataset(images, ds.labels, 4)
    assigns = [parse_assignment(s) for s in ("1=shift_xor,2=lns", "1=shift_xor,2=tirud", "1=lns,2=famm", "1=lns,2=lns")]
    many = evaluate_many(net, assigns, ds)
    for a in assigns:
        preds, ops = [], OpCount()
        for x in ds.images:  # image-at-a-time reference
            try:
                logits, count = network_forward(net, a, x)
            except OverflowError:
                preds.append(-1)
                continue
            preds.append(int(np.argmax(logits)))
            ops += count
        assert many[a.id].predictions.tolist() == preds
        assert many[a.id].total_ops == ops
