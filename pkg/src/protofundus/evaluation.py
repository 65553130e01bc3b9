"""Episodic evaluation, classification metrics, PR/ROC curves and reports."""
from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .encoder import atomic_write_text
from .proto import episode_logits, episode_loss, prototypes_from_labels, softmax

REPORT_SCHEMA_VERSION = 1
Z95 = 1.96


class EvalError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    classes: list[str]
    counts: list[list[int]]  # rows = true, columns = predicted

    def array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64).reshape(len(self.classes), len(self.classes))


@dataclass
class CurvePoints:
    kind: str                       # "PR" or "ROC"
    points: list[tuple[float, float]]
    summary: float | None           # AP or AUC; None for an empty curve


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    specificity: float
    support: int
    flags: list[str] = field(default_factory=list)


@dataclass
class EvalReport:
    episode_count: int
    mean_accuracy: float
    ci95: tuple[float, float]
    mean_loss: float
    confusion: ConfusionMatrix
    per_class: dict[str, ClassMetrics]
    macro_f1: float
    curves: dict[str, dict[str, CurvePoints]]
    episode_accuracies: list[float] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA_VERSION
        d["ci95"] = list(self.ci95)
        for per_kind in d["curves"].values():
            for c in per_kind.values():
                c["points"] = [list(p) for p in c["points"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise EvalError(f"unsupported report schema {d.get('schema_version')}")
        curves = {
            name: {kind: CurvePoints(c["kind"], [tuple(p) for p in c["points"]], c["summary"])
                   for kind, c in per_kind.items()}
            for name, per_kind in d["curves"].items()
        }
        return cls(
            episode_count=d["episode_count"],
            mean_accuracy=d["mean_accuracy"],
            ci95=tuple(d["ci95"]),
            mean_loss=d["mean_loss"],
            confusion=ConfusionMatrix(**d["confusion"]),
            per_class={k: ClassMetrics(**v) for k, v in d["per_class"].items()},
            macro_f1=d["macro_f1"],
            curves=curves,
            episode_accuracies=list(d.get("episode_accuracies", [])),
            notes=list(d.get("notes", [])),
        )


def mean_ci95(values: Sequence[float]) -> tuple[float, tuple[float, float]]:
    """Normal-approximation interval: mean +/- 1.96 * s / sqrt(E), s with ddof=1."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EvalError("no values to summarize")
    mean = float(v.mean())
    if v.size < 2:
        return mean, (mean, mean)
    half = Z95 * float(v.std(ddof=1)) / math.sqrt(v.size)
    return mean, (mean - half, mean + half)


def _safe_div(num: float, den: float, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def classification_report(cm: ConfusionMatrix):
    """Per-class one-vs-rest metrics and macro F1.

    Zero denominators give 0.0 and add a flag naming the metric.
    """
    m = cm.array()
    if m.size == 0:
        raise EvalError("empty confusion matrix")
    total = int(m.sum())
    out: dict[str, ClassMetrics] = {}
    for i, name in enumerate(cm.classes):
        tp = int(m[i, i])
        fn = int(m[i].sum()) - tp
        fp = int(m[:, i].sum()) - tp
        tn = total - tp - fn - fp
        flags: list[str] = []
        prec = _safe_div(tp, tp + fp, "precision_undefined", flags)
        rec = _safe_div(tp, tp + fn, "recall_undefined", flags)
        f1 = _safe_div(2 * prec * rec, prec + rec, "f1_undefined", flags)
        spec = _safe_div(tn, tn + fp, "specificity_undefined", flags)
        out[name] = ClassMetrics(prec, rec, f1, spec, tp + fn, flags)
    macro = float(np.mean([c.f1 for c in out.values()]))
    return out, macro


def _check_binary(scores):
    pairs = [(float(s), bool(p)) for s, p in scores]
    pos = sum(p for _, p in pairs)
    if pos == 0 or pos == len(pairs):
        raise EvalError("curve needs at least one positive and one negative")
    return pairs, pos, len(pairs) - pos


def _threshold_counts(pairs):
    """Cumulative (TP, FP) after each distinct score, highest score first."""
    pairs = sorted(pairs, key=lambda sp: -sp[0])
    tp = fp = 0
    out = []
    for i, (s, p) in enumerate(pairs):
        tp += p
        fp += not p
        if i + 1 == len(pairs) or pairs[i + 1][0] != s:
            out.append((tp, fp))
    return out


def pr_curve(scores: Iterable[tuple[float, bool]]) -> CurvePoints:
    """Step-wise precision-recall; AP = sum (R_i - R_{i-1}) * P_i."""
    pairs, pos, _ = _check_binary(scores)
    points = []
    ap = 0.0
    prev_r = 0.0
    for tp, fp in _threshold_counts(pairs):
        r = tp / pos
        p = tp / (tp + fp)
        ap += (r - prev_r) * p
        prev_r = r
        points.append((r, p))
    return CurvePoints("PR", points, ap)


def roc_curve(scores: Iterable[tuple[float, bool]]) -> CurvePoints:
    """(FPR, TPR) over distinct thresholds with trapezoidal AUC."""
    pairs, pos, neg = _check_binary(scores)
    points = [(0.0, 0.0)]
    for tp, fp in _threshold_counts(pairs):
        points.append((fp / neg, tp / pos))
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return CurvePoints("ROC", points, auc)


def run_episode(embed_fn: Callable, episode, metric="cosine", temperature=10.0):
    """Embed an episode and score its queries. Returns (logits, query labels)."""
    s_items = [it for it, _ in episode.support]
    q_items = [it for it, _ in episode.query]
    s_lab = np.array([lab for _, lab in episode.support])
    q_lab = np.array([lab for _, lab in episode.query])
    emb = np.asarray(embed_fn(s_items + q_items), dtype=np.float64)
    s_emb, q_emb = emb[:len(s_items)], emb[len(s_items):]
    protos = prototypes_from_labels(s_emb, s_lab, len(episode.classes), episode.classes)
    return episode_logits(q_emb, protos.prototypes, metric, temperature).matrix, q_lab


def evaluate(embed_fn: Callable, episodes: Iterable, class_names: Sequence[str],
             metric="cosine", temperature=10.0) -> EvalReport:
    """Evaluate an embedding function over an episode stream.

    ``embed_fn`` maps a list of items to an (n, m) array.
    """
    classes = list(class_names)
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    accs, losses = [], []
    curve_scores: dict[str, list[tuple[float, bool]]] = {c: [] for c in classes}
    for ep in episodes:
        logits, q_lab = run_episode(embed_fn, ep, metric, temperature)
        pred = np.argmax(logits, axis=1)
        accs.append(float(np.mean(pred == q_lab)))
        losses.append(episode_loss(logits, q_lab)[0])
        probs = softmax(logits)
        glob = [index[c] for c in ep.classes]
        for t, p in zip(q_lab, pred):
            cm[glob[t], glob[p]] += 1
        for j, c in enumerate(ep.classes):
            curve_scores[c].extend(zip(probs[:, j].tolist(), (q_lab == j).tolist()))
    if not accs:
        raise EvalError("empty episode stream")

    mean, ci = mean_ci95(accs)
    confusion = ConfusionMatrix(classes, cm.tolist())
    per_class, macro = classification_report(confusion)
    curves: dict[str, dict[str, CurvePoints]] = {}
    notes = []
    for c in classes:
        sc = curve_scores[c]
        try:
            curves[c] = {"PR": pr_curve(sc), "ROC": roc_curve(sc)}
        except EvalError:
            curves[c] = {"PR": CurvePoints("PR", [], None), "ROC": CurvePoints("ROC", [], None)}
            notes.append(f"class {c}: PR/ROC curves empty (needs positive and negative scores); plots omitted")
    return EvalReport(len(accs), mean, ci, float(np.mean(losses)), confusion, per_class, macro,
                      curves, accs, notes)


# --- rendering ----------------------------------------------------------------

def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def _curve_csv(c: CurvePoints) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y"])
    for x, y in c.points:
        w.writerow([repr(x), repr(y)])
    if c.summary is not None:
        buf.write(f"# {'AP' if c.kind == 'PR' else 'AUC'}={c.summary!r}\n")
    return buf.getvalue()


def _confusion_csv(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([""] + cm.classes)
    for name, row in zip(cm.classes, cm.counts):
        w.writerow([name] + row)
    return buf.getvalue()


def _svg(width, height, body: list[str]) -> str:
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'font-family="sans-serif" font-size="11">\n' + "\n".join(body) + "\n</svg>\n")


def confusion_svg(cm: ConfusionMatrix) -> str:
    m = cm.array()
    n = len(cm.classes)
    cell, pad = 40, 70
    peak = max(int(m.max()), 1)
    body = []
    for i in range(n):
        body.append(f'<text x="{pad - 4}" y="{pad + i * cell + cell / 2 + 4}" text-anchor="end">{cm.classes[i]}</text>')
        body.append(f'<text x="{pad + i * cell + cell / 2}" y="{pad - 6}" text-anchor="middle">{cm.classes[i]}</text>')
        for j in range(n):
            shade = int(255 - 200 * m[i, j] / peak)
            body.append(f'<rect x="{pad + j * cell}" y="{pad + i * cell}" width="{cell}" height="{cell}" '
                        f'fill="rgb({shade},{shade},255)" stroke="#888"/>')
            body.append(f'<text x="{pad + j * cell + cell / 2}" y="{pad + i * cell + cell / 2 + 4}" '
                        f'text-anchor="middle">{m[i, j]}</text>')
    body.append(f'<text x="{pad}" y="14">rows: true class, columns: predicted class</text>')
    size = pad + n * cell + 10
    return _svg(size, size, body)


PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def curves_svg(curves: dict[str, CurvePoints], kind: str) -> str:
    size, pad = 320, 40
    span = size - 2 * pad
    body = [f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#000"/>']
    xl, yl = ("Recall", "Precision") if kind == "PR" else ("False positive rate", "True positive rate")
    body.append(f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle">{xl}</text>')
    body.append(f'<text x="12" y="{size / 2}" transform="rotate(-90 12 {size / 2})" text-anchor="middle">{yl}</text>')
    label = "AP" if kind == "PR" else "AUC"
    for k, (name, c) in enumerate(curves.items()):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{pad + x * span:.2f},{pad + (1 - y) * span:.2f}" for x, y in c.points)
        body.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        body.append(f'<text x="{pad + 6}" y="{pad + 14 + 13 * k}" fill="{color}">{name} {label}={c.summary:.3f}</text>')
    return _svg(size, size, body)


def render_report(report: EvalReport, out_dir) -> list[Path]:
    """Write report.json, confusion.csv, per-class curve CSVs and SVG plots."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EvalError(f"cannot create report directory {out}: {exc}") from None

    written = []
    notes = list(report.notes)

    def put(name, text):
        path = out / name
        try:
            atomic_write_text(path, text)
        except OSError as exc:
            raise EvalError(f"failed writing {path}: {exc}") from None
        written.append(path)

    put("confusion.csv", _confusion_csv(report.confusion))
    put("confusion.svg", confusion_svg(report.confusion))
    for kind in ("PR", "ROC"):
        drawable = {}
        for name, per_kind in report.curves.items():
            c = per_kind[kind]
            put(f"curves_{_slug(name)}_{kind}.csv", _curve_csv(c))
            if c.points:
                drawable[name] = c
            else:
                if not any(n.startswith(f"class {name}:") for n in notes):
                    notes.append(f"class {name}: {kind} plot omitted (empty curve)")
        if drawable:
            put(f"{kind.lower()}_curves.svg", curves_svg(drawable, kind))
    d = report.to_dict()
    d["notes"] = notes
    put("report.json", json.dumps(d, indent=2))
    return written


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
