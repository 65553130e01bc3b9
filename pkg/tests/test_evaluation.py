import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protofundus.evaluation import (ConfusionMatrix, CurvePoints, EvalError, EvalReport, classification_report,
                                    evaluate, load_report, mean_ci95, pr_curve, render_report, roc_curve)
from protofundus.sampler import EpisodeSpec, EpisodeStream, episode_stream

from oracles import ap_by_thresholds, auc_by_pairs

THREE_POINT = [(0.9, True), (0.8, False), (0.7, True)]


# --- classification report -------------------------------------------------------

def test_two_class_report_hand_values():
    per, macro = classification_report(ConfusionMatrix(["a", "b"], [[8, 2], [3, 7]]))
    a, b = per["a"], per["b"]
    assert abs(a.precision - 8 / 11) < 1e-12
    assert abs(a.recall - 0.8) < 1e-12
    assert abs(a.f1 - 2 * (8 / 11) * 0.8 / (8 / 11 + 0.8)) < 1e-12
    assert abs(a.f1 - 0.761904761904762) < 1e-12
    assert abs(a.specificity - 0.7) < 1e-12
    # class b mirrors: tp 7, fp 2, fn 3
    assert abs(b.precision - 7 / 9) < 1e-12 and abs(b.recall - 0.7) < 1e-12
    assert abs(b.specificity - 0.8) < 1e-12
    assert abs(macro - (a.f1 + b.f1) / 2) < 1e-12
    assert a.support == 10 and not a.flags


def test_diagonal_matrix_perfect():
    per, macro = classification_report(ConfusionMatrix(list("abc"), [[4, 0, 0], [0, 2, 0], [0, 0, 9]]))
    assert macro == 1.0
    for m in per.values():
        assert (m.precision, m.recall, m.f1, m.specificity) == (1.0, 1.0, 1.0, 1.0)


def test_absent_class_is_flagged():
    per, _ = classification_report(ConfusionMatrix(list("abc"), [[3, 1, 0], [0, 4, 0], [0, 0, 0]]))
    c = per["c"]
    assert "recall_undefined" in c.flags and "precision_undefined" in c.flags
    assert c.precision == c.recall == c.f1 == 0.0


def test_empty_matrix_rejected():
    with pytest.raises(EvalError):
        classification_report(ConfusionMatrix([], []))


# --- curves ---------------------------------------------------------------------------

def test_pr_three_point_fixture():
    c = pr_curve(THREE_POINT)
    assert c.points == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]
    assert abs(c.summary - (0.5 + 0.5 * 2 / 3)) < 1e-12
    assert round(c.summary, 3) == 0.833


def test_roc_three_point_fixture():
    c = roc_curve(THREE_POINT)
    assert c.summary == 0.5
    assert c.points[0] == (0.0, 0.0) and c.points[-1] == (1.0, 1.0)


def test_perfect_separation():
    sc = [(0.9, True), (0.8, True), (0.2, False), (0.1, False)]
    assert pr_curve(sc).summary == 1.0
    assert roc_curve(sc).summary == 1.0


def test_all_tied_scores_auc_half():
    sc = [(0.4, i % 3 == 0) for i in range(30)]
    assert roc_curve(sc).summary == 0.5


def test_one_class_inputs_rejected():
    with pytest.raises(EvalError):
        pr_curve([(0.1, True), (0.2, True)])
    with pytest.raises(EvalError):
        roc_curve([(0.1, False)])


def test_random_scores_ap_near_prevalence():
    rng = np.random.default_rng(0)
    labels = rng.permutation(np.arange(1000) < 300)
    sc = list(zip(rng.random(1000).tolist(), labels.tolist()))
    assert abs(pr_curve(sc).summary - 0.30) <= 0.05


def test_pr_recall_non_decreasing():
    rng = np.random.default_rng(1)
    sc = list(zip(rng.integers(0, 20, 300).tolist(), (rng.random(300) < 0.4).tolist()))
    rs = [r for r, _ in pr_curve(sc).points]
    assert all(b >= a for a, b in zip(rs, rs[1:]))


@settings(max_examples=100, deadline=None)
@given(data=st.lists(st.tuples(st.integers(0, 30), st.booleans()), min_size=2, max_size=60))
def test_curves_match_oracles_and_monotone_invariance(data):
    if all(y for _, y in data) or not any(y for _, y in data):
        return
    sc = [(s / 7.0, y) for s, y in data]
    ap, auc = pr_curve(sc).summary, roc_curve(sc).summary
    assert abs(ap - ap_by_thresholds(sc)) < 1e-12
    assert abs(auc - auc_by_pairs(sc)) < 1e-12
    warped = [(math.exp(3 * s) - 5.0, y) for s, y in sc]
    assert abs(pr_curve(warped).summary - ap) < 1e-12
    assert abs(roc_curve(warped).summary - auc) < 1e-12


# --- confidence interval ----------------------------------------------------------------

def test_ci_fixture():
    mean, (lo, hi) = mean_ci95([1.0, 0.8, 0.6, 0.8])
    s = math.sqrt(0.08 / 3)
    assert abs(mean - 0.8) < 1e-12
    assert abs(s - 0.1633) < 1e-4
    assert abs(lo - 0.64) < 1e-3 and abs(hi - 0.96) < 1e-3


def test_ci_degenerate():
    assert mean_ci95([0.7]) == (0.7, (0.7, 0.7))
    assert mean_ci95([1.0] * 5)[1] == (1.0, 1.0)
    with pytest.raises(EvalError):
        mean_ci95([])


def test_ci_width_scales_inverse_sqrt():
    base = np.array([1.0, 0.8, 0.6, 0.8, 0.4, 0.9, 0.7, 0.5, 1.0, 0.6])
    rng = np.random.default_rng(2)
    e = 2000
    w1 = np.diff(mean_ci95(rng.choice(base, e))[1])[0]
    w4 = np.diff(mean_ci95(rng.choice(base, 4 * e))[1])[0]
    assert abs((w1 / w4) / 2.0 - 1.0) <= 0.10


# --- evaluate ----------------------------------------------------------------------------

def _pool(n_classes=6, size=8):
    return {f"c{i}": [f"c{i}_{j}" for j in range(size)] for i in range(n_classes)}


def _episodes(p, n=30, spec=EpisodeSpec(5, 2, 2)):
    return list(episode_stream(p, EpisodeStream(spec, "test", 11, n)))


def _onehot_fn(names, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)

    def fn(items):
        e = np.stack([np.eye(len(names))[names.index(rid.split("_")[0])] for rid, _ in items])
        return e + rng.normal(0, noise, e.shape) if noise else e
    return fn


def test_oracle_embeddings_perfect_accuracy():
    p = _pool()
    names = sorted(p)
    rep = evaluate(_onehot_fn(names), _episodes(p), names)
    assert rep.mean_accuracy == 1.0
    assert rep.ci95 == (1.0, 1.0)
    assert rep.macro_f1 == 1.0


def test_constant_embedding_chance():
    p = _pool()
    rep = evaluate(lambda items: np.ones((len(items), 3)), _episodes(p), sorted(p))
    assert rep.mean_accuracy == pytest.approx(0.2)
    assert abs(rep.mean_loss - math.log(5)) < 1e-12


def test_pooled_consistency():
    p = _pool()
    names = sorted(p)
    eps = _episodes(p, 40)
    rep = evaluate(_onehot_fn(names, 1.5, 3), eps, names)
    m = rep.confusion.array()
    appearances = {c: sum(c in ep.classes for ep in eps) for c in names}
    for i, c in enumerate(names):
        assert m[i].sum() == 2 * appearances[c]
    assert abs(rep.mean_accuracy - np.trace(m) / m.sum()) < 1e-12
    assert abs(rep.macro_f1 - np.mean([v.f1 for v in rep.per_class.values()])) < 1e-12
    lo, hi = rep.ci95
    assert lo <= rep.mean_accuracy <= hi


def test_empty_stream_rejected():
    with pytest.raises(EvalError):
        evaluate(lambda items: np.ones((len(items), 2)), [], ["a"])


def test_unseen_class_gives_empty_curves_and_note():
    p = _pool(5)
    names = sorted(p) + ["ghost"]
    rep = evaluate(_onehot_fn(names, 0.5), _episodes(p, 5), names)
    assert rep.curves["ghost"]["PR"].points == [] and rep.curves["ghost"]["PR"].summary is None
    assert any(n.startswith("class ghost:") for n in rep.notes)


# --- rendering ---------------------------------------------------------------------------

def test_render_five_classes(tmp_path):
    p = _pool(5)
    names = sorted(p)
    rep = evaluate(_onehot_fn(names, 1.0, 4), _episodes(p, 20), names)
    render_report(rep, tmp_path)
    curve_files = sorted(f.name for f in tmp_path.glob("curves_*.csv"))
    assert len(curve_files) == 10
    for name in ("confusion.csv", "confusion.svg", "pr_curves.svg", "roc_curves.svg", "report.json"):
        assert (tmp_path / name).is_file()
    header = (tmp_path / "confusion.csv").read_text().splitlines()[0]
    assert header == "," + ",".join(names)
    roc = (tmp_path / "curves_c0_ROC.csv").read_text().splitlines()
    assert roc[0] == "x,y" and roc[-1].startswith("# AUC=")
    assert load_report(tmp_path / "report.json") == rep


def test_render_empty_curve(tmp_path):
    p = _pool(5)
    names = sorted(p) + ["ghost"]
    rep = evaluate(_onehot_fn(names, 0.5), _episodes(p, 5), names)
    render_report(rep, tmp_path)
    assert (tmp_path / "curves_ghost_PR.csv").read_text() == "x,y\n"
    assert "ghost" not in (tmp_path / "pr_curves.svg").read_text()
    assert load_report(tmp_path / "report.json") == rep


def test_report_schema_checked(tmp_path):
    rep = EvalReport(1, 1.0, (1.0, 1.0), 0.0, ConfusionMatrix(["a"], [[1]]), {}, 1.0,
                     {"a": {"PR": CurvePoints("PR", [], None), "ROC": CurvePoints("ROC", [], None)}})
    d = rep.to_dict()
    assert EvalReport.from_dict(json.loads(json.dumps(d))) == rep
    d["schema_version"] = 42
    with pytest.raises(EvalError):
        EvalReport.from_dict(d)
