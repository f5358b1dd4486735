import itertools
import math

import numpy as np
import pytest

from unlearn.evaluate import (HISTORY_HEADER, ConfusionMatrix, EpochRecord, RunReport, accuracy, argmax,
                              bias_leakage_probe, color_code, confusion, discrete_mi, emit_report,
                              features, grid_mi, history_csv, is_finite_report, joint_counts,
                              label_color_mi, predict)
from unlearn.layers import init_params, tiny_arch


def brute_mi(table):
    table = np.asarray(table, dtype=float)
    n = table.sum()
    total = 0.0
    for i, j in itertools.product(range(table.shape[0]), range(table.shape[1])):
        if table[i, j]:
            pij = table[i, j] / n
            total += pij * math.log(pij / (table[i].sum() / n * table[:, j].sum() / n))
    return total


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 4]) == pytest.approx(2 / 3)
    assert accuracy([], []) == 0.0
    with pytest.raises(ValueError):
        accuracy([1, 2], [1])


def test_argmax_ties_go_low():
    assert argmax(np.array([[1.0, 3.0, 3.0], [0.0, 0.0, 0.0]])).tolist() == [1, 0]


def test_confusion_matrix():
    cm = confusion([0, 1, 1, 2], [0, 1, 2, 2], 3)
    assert cm.counts.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 1]]
    assert cm.total == 4 and cm.accuracy == 0.75
    np.testing.assert_allclose(cm.normalized().sum(axis=1), 1.0)
    empty = ConfusionMatrix(np.zeros((3, 3), dtype=np.int64))
    assert np.all(empty.normalized() == 0)
    with pytest.raises(ValueError):
        confusion([3], [0], 3)
    with pytest.raises(ValueError):
        confusion([0, 1], [0], 3)


@pytest.mark.parametrize("table, expected", [
    ([[5, 0], [0, 5]], math.log(2)),
    ([[3, 3], [3, 3]], 0.0),
    ([[1, 0, 0], [0, 1, 0], [0, 0, 1]], math.log(3)),
    ([[7]], 0.0),
])
def test_mi_examples(table, expected):
    assert discrete_mi(table) == pytest.approx(expected, abs=1e-12)


def test_mi_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        shape = tuple(rng.integers(1, 4, size=2))
        table = rng.integers(0, 6, size=shape)
        table[0, 0] += 1
        assert discrete_mi(table) == pytest.approx(brute_mi(table), abs=1e-12)
    with pytest.raises(ValueError):
        discrete_mi(np.zeros((2, 2)))


def test_joint_counts_and_color_code():
    assert joint_counts([0, 1, 1], [2, 0, 0], 2, 3).tolist() == [[0, 0, 1], [2, 0, 0]]
    bias = np.zeros((2, 3, 7, 7), dtype=np.uint8)
    bias[1, :, 3, 3] = (1, 2, 3)
    assert color_code(bias).tolist() == [0, 64 + 16 + 3]


def test_label_color_mi_on_perfectly_coloured_cells():
    labels = np.repeat(np.arange(4), 25)
    bias = np.zeros((100, 3, 7, 7), dtype=np.uint8)
    bias[:, 0] = labels[:, None, None]
    assert label_color_mi(labels, bias) == pytest.approx(math.log(4))
    assert grid_mi(labels, bias) == pytest.approx(math.log(4))
    assert label_color_mi(labels, np.zeros_like(bias)) == 0.0


def test_predict_chunking_is_irrelevant():
    ps = init_params(seed=0)
    images = np.random.default_rng(1).uniform(size=(7, 3, 28, 28))
    a, b = predict(ps, images, batch=500), predict(ps, images, batch=3)
    np.testing.assert_allclose(a.logits, b.logits, atol=1e-12)
    assert a.digits.tolist() == b.digits.tolist()
    assert a.bias_levels.shape == (7, 3, 7, 7)
    assert features(ps, images, batch=2).shape == (7, 32, 14, 14)


def _probe_data(informative, n, seed):
    arch = tiny_arch()
    rng = np.random.default_rng(seed)
    bias = rng.integers(0, arch.levels, size=(n, 3, arch.grid, arch.grid))
    feats = rng.normal(size=(n, *arch.feature_shape))
    if informative:
        # the first three channels spell out the level of each cell
        feats[:, :3] = bias * 2.0
    return arch, feats, bias


def test_probe_reads_informative_features():
    arch, ftr, btr = _probe_data(True, 256, 0)
    _, fte, bte = _probe_data(True, 128, 1)
    acc = bias_leakage_probe(ftr, btr, fte, bte, arch, epochs=30, batch_size=16, lr=0.05, seed=0)
    assert acc > 0.7


def test_probe_is_near_chance_on_noise():
    arch, ftr, btr = _probe_data(False, 256, 2)
    _, fte, bte = _probe_data(False, 256, 3)
    acc = bias_leakage_probe(ftr, btr, fte, bte, arch, epochs=10, batch_size=16, lr=0.05, seed=0)
    assert abs(acc - 1 / arch.levels) < 0.06
    with pytest.raises(ValueError):
        bias_leakage_probe(ftr[:0], btr[:0], fte, bte, arch)


def _report(rows):
    rep = RunReport(method="ours", config={"lam": 0.1, "seed": 0})
    rep.history = [EpochRecord(i + 1, "ours", 1.0 / (i + 1), 2.0, -0.5, 0.5, 0.8, 0.3, 0.7) for i in range(rows)]
    rep.final_test_acc = rep.history[-1].test_acc if rows else None
    rep.confusions = {"recolored-0": confusion([0, 1, 1], [0, 1, 0], 10)}
    rep.mi = {"train": 1.2}
    return rep


def test_history_header_only_when_empty():
    assert history_csv([]) == ",".join(HISTORY_HEADER) + "\n"


def test_emit_report_is_byte_identical(tmp_path):
    written_a = emit_report(_report(3), tmp_path / "a")
    emit_report(_report(3), tmp_path / "b")
    names = sorted(p.name for p in written_a)
    assert names == ["confusion_recolored-0.csv", "confusion_recolored-0.ppm", "history.csv", "summary.txt"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "history.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[1].startswith("1,ours,1.0,")


def test_confusion_csv_rows_sum_to_class_counts(tmp_path):
    emit_report(_report(1), tmp_path)
    rows = (tmp_path / "confusion_recolored-0.csv").read_text().splitlines()[1:]
    sums = [sum(int(v) for v in r.split(",")[1:]) for r in rows]
    assert sums[:2] == [2, 1] and sum(sums) == 3
    ppm = (tmp_path / "confusion_recolored-0.ppm").read_bytes()
    assert ppm.startswith(b"P6\n160 160\n255\n")


def test_finite_report_check():
    rep = _report(2)
    assert is_finite_report(rep)
    rep.history[1].class_loss = float("nan")
    assert not is_finite_report(rep)


def test_summary_lists_metrics(tmp_path):
    emit_report(_report(2), tmp_path)
    text = (tmp_path / "summary.txt").read_text()
    assert "method: ours" in text and "final_test_acc: 0.300000" in text and "mi.train: 1.200000" in text
