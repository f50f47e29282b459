import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascade_lid import metrics
from cascade_lid.metrics import WerReport, edit_distance, edit_ops, lid_accuracy, wer

seqs = st.lists(st.integers(0, 3), max_size=8)


def test_wer_examples():
    assert wer([1, 2, 3], [1, 2, 3]).wer == 0.0
    r = wer([1, 2, 3], [1, 9, 3])
    assert (r.substitutions, r.insertions, r.deletions) == (1, 0, 0)
    assert r.wer == pytest.approx(100 / 3)
    r = wer([1], [])
    assert r.deletions == 1 and r.wer == 100.0


def test_empty_reference_is_flagged():
    r = wer([], [4, 5])
    assert r.insertions == 2 and r.ref_len == 0 and r.empty_refs == 1
    assert np.isnan(r.wer)
    agg = r + wer([1, 2], [1, 2])
    assert agg.wer == pytest.approx(100.0)  # 2 insertions over 2 reference tokens


def test_substitution_preferred_on_ties():
    # one substitution or one insertion + one deletion: both reachable, cost 1 vs 2 -> sub
    assert edit_ops([1, 2], [1, 3]) == (1, 0, 0)
    S, I, D = edit_ops([1, 2, 3, 4], [2, 3, 4, 5])
    assert S + I + D == 2


@settings(max_examples=200, deadline=None)
@given(seqs, seqs)
def test_ops_sum_to_distance(a, b):
    S, I, D = edit_ops(a, b)
    assert S + I + D == int(edit_distance(np.array(a, dtype=int), np.array(b, dtype=int)))
    assert len(a) - D + I == len(b)


@settings(max_examples=100, deadline=None)
@given(seqs, seqs, seqs)
def test_triangle_and_symmetry(a, b, c):
    d = lambda x, y: int(edit_distance(np.array(x, dtype=int), np.array(y, dtype=int)))
    assert d(a, b) == d(b, a)
    assert d(a, c) <= d(a, b) + d(b, c)


def test_dp_equals_bfs_oracle_small():
    strings, dist = metrics.all_pairs_edit_distance_bfs((0, 1), 4)
    for i, a in enumerate(strings):
        for j, b in enumerate(strings):
            assert edit_distance(np.array(a, dtype=int), np.array(b, dtype=int)) == dist[i, j]


def test_corpus_wer_groups_add_up():
    refs = [[1, 2, 3], [4, 5], [6]]
    hyps = [[1, 3], [4, 5, 7], []]
    tab = metrics.corpus_wer(refs, hyps, ["a", "b", "a"])
    assert tab["all"].errors == tab["a"].errors + tab["b"].errors
    assert tab["all"].ref_len == 6
    assert tab["all"].wer == pytest.approx(100 * 3 / 6)


def test_wer_csv_roundtrip():
    tab = {"1st": metrics.corpus_wer([[1, 2]], [[1]], ["x"]), "2nd": metrics.corpus_wer([[1, 2]], [[1, 2]], ["x"])}
    back = metrics.parse_wer_csv(metrics.wer_csv(tab))
    assert back == tab


def test_lid_perfect_and_constant_wrong():
    traces = [np.eye(2)[[0, 0, 0]], np.eye(2)[[1, 1]]]
    rep = lid_accuracy(traces, [0, 1], frame_indices=(0, 1))
    assert all(v == 100.0 for v in rep.rows.values())
    wrong = [np.eye(2)[[1, 1]], np.eye(2)[[1, 1]]]
    assert lid_accuracy(wrong, [0, 1]).rows["avg"] == 50.0


def test_lid_frame_k_rule():
    traces = [np.array([0, 0, 0]), np.array([0, 0])]
    rep = lid_accuracy(traces, [0, 1], frame_indices=(0, 2))
    assert rep.rows["avg"] == pytest.approx(60.0)
    assert rep.rows["2"] == 100.0 and rep.counts["2"] == 1
    assert rep.rows["inf"] == 50.0


def test_lid_cluster_view():
    traces = [np.array([1, 1]), np.array([2])]
    rep = lid_accuracy(traces, [0, 2], class_map=[0, 0, 1], names=["ab", "c"])
    assert rep.rows["avg"] == 100.0
    assert set(rep.by_group) == {"ab", "c"}


def test_lid_errors():
    with pytest.raises(ValueError):
        lid_accuracy([], [])
    with pytest.raises(ValueError):
        lid_accuracy([np.zeros((0, 3))], [0])


def test_lid_csv_and_text():
    rep = lid_accuracy([np.array([0, 1, 1])], [1], frame_indices=(0, 5))
    parsed = metrics.parse_lid_csv(metrics.lid_csv({"locales": rep}))
    assert parsed["locales"]["all"]["avg"] == pytest.approx(66.67, abs=0.01)
    assert np.isnan(parsed["locales"]["all"]["5"])
    text = metrics.lid_text({"acc": rep})
    assert "avg." in text and "∞" in text


def test_wer_report_addition():
    a = WerReport(1, 2, 3, 10, 1, 0)
    b = WerReport(0, 1, 0, 5, 1, 1)
    assert (a + b) == WerReport(1, 3, 3, 15, 2, 1)
