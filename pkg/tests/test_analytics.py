import numpy as np
import pytest

from protoatlas.analytics import (AccuracyReport, EvidenceTrace,
                                  PredictionRecord, TracedPrototype,
                                  accuracy_report, diversity_curve,
                                  format_accuracy_table, inclass_curve,
                                  most_common_baseline, read_predictions,
                                  read_traces, write_records)
from protoatlas.dataset import Split, load_manifest


def record(confidence, correct, image_id="x", true_label=0):
    predicted = true_label if correct else true_label + 1
    return PredictionRecord(image_id=image_id, true_label=true_label,
                            predicted_label=predicted, confidence=confidence,
                            logits=[0.0, 0.0, 0.0], abstained=confidence < 0.9)


def trace(true_label, correct, protos):
    return EvidenceTrace(image_id="t", true_label=true_label, correct=correct,
                         top_prototypes=[TracedPrototype(j, c, s)
                                         for j, (c, s) in enumerate(protos)])


# -------------------------------------------------------------- accuracy


def test_accuracy_report_hand_case():
    records = [record(0.5, True) for _ in range(4)]          # abstained
    records += [record(0.95, True) for _ in range(5)]        # delivered correct
    records += [record(0.95, False)]                         # delivered wrong
    rep = accuracy_report(records, threshold=0.9)
    assert rep.abstention_rate == pytest.approx(40.0)
    assert rep.acc_at_threshold == pytest.approx(100.0 * 5 / 6)
    assert rep.acc == pytest.approx(90.0)


def test_accuracy_report_all_confident_correct():
    rep = accuracy_report([record(0.99, True) for _ in range(7)])
    assert (rep.acc, rep.acc_at_threshold, rep.abstention_rate) == (100.0, 100.0, 0.0)


def test_accuracy_report_all_abstained():
    rep = accuracy_report([record(0.2, True), record(0.3, False)])
    assert rep.acc_at_threshold is None
    assert rep.abstention_rate == 100.0


def test_accuracy_report_empty_errors():
    with pytest.raises(ValueError):
        accuracy_report([])


def test_accuracy_report_threshold_boundary():
    # confidence exactly at the threshold is delivered
    rep = accuracy_report([record(0.9, True), record(0.8999, True)], threshold=0.9)
    assert rep.abstention_rate == pytest.approx(50.0)
    assert rep.acc_at_threshold == pytest.approx(100.0)


def test_accuracy_report_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        records = [record(float(rng.uniform()), bool(rng.integers(0, 2)))
                   for _ in range(n)]
        threshold = float(rng.uniform(0.2, 0.99))
        rep = accuracy_report(records, threshold)
        # oracle: explicit loop counting
        total = correct = delivered = delivered_correct = 0
        for r in records:
            total += 1
            ok = r.predicted_label == r.true_label
            correct += ok
            if r.confidence >= threshold:
                delivered += 1
                delivered_correct += ok
        assert rep.acc == pytest.approx(100.0 * correct / total)
        assert rep.abstention_rate == pytest.approx(100.0 * (total - delivered) / total)
        if delivered == 0:
            assert rep.acc_at_threshold is None
        else:
            assert rep.acc_at_threshold == pytest.approx(100.0 * delivered_correct / delivered)
            # acc@threshold covers exactly (1 - abst) * N records
            assert delivered == round((1 - rep.abstention_rate / 100.0) * total)


# -------------------------------------------------------------- baseline


def manifest_index(tmp_path, rows):
    path = tmp_path / "m.csv"
    path.write_text("\n".join(["path,class_name,instrument,sol,split"] + rows) + "\n")
    return load_manifest(path)


def test_most_common_baseline_hand_count(tmp_path):
    rows = [f"t{i}.jpg,A,OTHER,1,TRAIN" for i in range(4)]
    rows += [f"u{i}.jpg,B,OTHER,1,TRAIN" for i in range(2)]
    rows += [f"v{i}.jpg,A,OTHER,2,TEST" for i in range(5)]
    rows += [f"w{i}.jpg,B,OTHER,2,TEST" for i in range(3)]
    index = manifest_index(tmp_path, rows)
    assert most_common_baseline(index, Split.TEST) == pytest.approx(100.0 * 5 / 8)


def test_most_common_baseline_single_class_split(tmp_path):
    rows = ["a.jpg,A,OTHER,1,TRAIN", "b.jpg,B,OTHER,1,TRAIN", "c.jpg,A,OTHER,1,TRAIN",
            "d.jpg,A,OTHER,2,VAL"]
    index = manifest_index(tmp_path, rows)
    assert most_common_baseline(index, Split.VAL) == 100.0


def test_most_common_baseline_empty_split(tmp_path):
    index = manifest_index(tmp_path, ["a.jpg,A,OTHER,1,TRAIN"])
    with pytest.raises(ValueError, match="empty"):
        most_common_baseline(index, Split.TEST)


# ---------------------------------------------------------------- curves


def test_diversity_constant_one_when_single_source():
    t = trace(0, True, [(0, "img1")] * 5)
    curves = diversity_curve([t], k_max=5)
    assert curves[0] == [1.0] * 5


def test_diversity_linear_when_all_distinct():
    t = trace(1, True, [(1, f"img{i}") for i in range(5)])
    curves = diversity_curve([t], k_max=5)
    assert curves[1] == [1.0, 2.0, 3.0, 4.0, 5.0]


def test_diversity_hand_mean():
    t1 = trace(0, True, [(0, "i1"), (0, "i2")])
    t2 = trace(0, True, [(0, "i1"), (0, "i1")])
    curves = diversity_curve([t1, t2], k_max=2)
    assert curves[0][1] == pytest.approx(1.5)


def test_diversity_filters_incorrect_and_omits_classes():
    good = trace(0, True, [(0, f"i{i}") for i in range(5)])
    bad = trace(1, False, [(1, "j0")] * 5)
    curves = diversity_curve([good, bad], k_max=5)
    assert 0 in curves and 1 not in curves


def test_diversity_requires_depth():
    shallow = trace(0, True, [(0, "i1")])
    with pytest.raises(ValueError, match="need 5"):
        diversity_curve([shallow], k_max=5)


def test_inclass_all_in_class():
    t = trace(2, True, [(2, f"i{i}") for i in range(5)])
    curves = inclass_curve([t], k_max=5)
    assert curves[2] == [1.0, 2.0, 3.0, 4.0, 5.0]


def test_inclass_eighty_percent_top1():
    traces = [trace(0, True, [(0, "a")] + [(1, "b")] * 4) for _ in range(8)]
    traces += [trace(0, True, [(1, "b")] * 5) for _ in range(2)]
    curves = inclass_curve(traces, k_max=5)
    assert curves[0][0] == pytest.approx(0.8)


def test_inclass_correct_only_flag():
    good = trace(0, True, [(0, "a")] * 5)
    bad = trace(0, False, [(1, "b")] * 5)
    unrestricted = inclass_curve([good, bad], k_max=1)
    restricted = inclass_curve([good, bad], k_max=1, correct_only=True)
    assert unrestricted[0][0] == pytest.approx(0.5)
    assert restricted[0][0] == pytest.approx(1.0)


def test_curve_bounds_and_monotonicity():
    rng = np.random.default_rng(1)
    for _ in range(30):
        traces = []
        for _ in range(int(rng.integers(1, 8))):
            protos = [(int(rng.integers(0, 3)), f"s{rng.integers(0, 4)}")
                      for _ in range(6)]
            traces.append(trace(int(rng.integers(0, 3)), True, protos))
        div = diversity_curve(traces, k_max=5)
        inc = inclass_curve(traces, k_max=5)
        for values in div.values():
            assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
            assert all(v <= k for k, v in enumerate(values, start=1))
            assert all(v >= 1.0 for v in values)
        for values in inc.values():
            assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
            assert all(0.0 <= v <= k for k, v in enumerate(values, start=1))


def test_inclass_matches_exhaustive_oracle():
    rng = np.random.default_rng(2)
    traces = []
    for _ in range(20):
        protos = [(int(rng.integers(0, 3)), f"s{rng.integers(0, 5)}") for _ in range(5)]
        traces.append(trace(int(rng.integers(0, 3)), bool(rng.integers(0, 2)), protos))
    curves = inclass_curve(traces, k_max=5)
    for class_id, values in curves.items():
        members = [t for t in traces if t.true_label == class_id]
        for k in range(1, 6):
            total = 0
            for t in members:
                for p in t.top_prototypes[:k]:
                    if p.prototype_class == t.true_label:
                        total += 1
            assert values[k - 1] == pytest.approx(total / len(members))


# ------------------------------------------------------------------- io


def test_jsonl_roundtrip(tmp_path):
    records = [record(0.7, True, image_id=f"r{i}") for i in range(3)]
    traces = [trace(1, True, [(1, "a"), (0, "b")]) for _ in range(2)]
    write_records(records, tmp_path / "p.jsonl")
    write_records(traces, tmp_path / "t.jsonl")
    assert read_predictions(tmp_path / "p.jsonl") == records
    assert read_traces(tmp_path / "t.jsonl") == traces


# ---------------------------------------------------------------- table


def test_table_renders_nine_columns():
    reports = {
        "train": AccuracyReport(99.3, 99.8, 4.8),
        "val": AccuracyReport(77.3, 83.1, 21.0),
        "test": AccuracyReport(75.1, 82.5, 19.83),
    }
    baseline = {"train": 26.3, "val": 24.7, "test": 31.2}
    text = format_accuracy_table([("vgg19-proto", reports)], baseline,
                                 counts={"train": 5920, "val": 300, "test": 600})
    lines = text.splitlines()
    assert "Train (n=5920)" in lines[0] and "Test (n=600)" in lines[0]
    assert lines[1].count("Acc (0.9)") == 3 and lines[1].count("Abst Rate") == 3
    baseline_line = next(l for l in lines if "Most common" in l)
    assert "26.3%" in baseline_line and baseline_line.count(" - ") >= 2
    model_line = next(l for l in lines if "vgg19-proto" in l)
    for cell in ("99.3%", "99.8%", "4.8%", "77.3%", "83.1%", "21%",
                 "75.1%", "82.5%", "19.83%"):
        assert cell in model_line
    # exactly nine numeric columns on the model row
    numbers = [tok for tok in model_line.replace("|", " ").split()
               if tok.endswith("%")]
    assert len(numbers) == 9


def test_table_handles_missing_split_and_undefined_acc():
    reports = {"test": AccuracyReport(50.0, None, 100.0)}
    text = format_accuracy_table([("m", reports)])
    row = next(l for l in text.splitlines() if l.startswith("m"))
    assert "50%" in row and "100%" in row
