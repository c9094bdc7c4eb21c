"""Confusion-matrix metrics, hamming loss and report files.

Per-class "accuracy" is class-conditional: the fraction of that class's
beats given the right label, i.e. the same number as recall.  The per-class
hamming loss is likewise the misclassified fraction of that class's beats.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .labels import N_CLASSES, ClassLabel

SCHEMA_VERSION = 1


class LengthMismatch(ValueError):
    pass


class EmptyMatrix(ValueError):
    pass


class ReportError(OSError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, truths, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    preds, truths = np.asarray(preds, dtype=np.int64), np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truths)} labels")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truths, preds), 1)
    return ConfusionMatrix(counts)


def hamming_loss(preds, truths) -> float:
    """Misclassified labels over total labels."""
    preds, truths = np.asarray(preds), np.asarray(truths)
    if preds.shape != truths.shape:
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truths)} labels")
    if preds.size == 0:
        raise EmptyMatrix("no labels")
    return int(np.count_nonzero(preds != truths)) / preds.size


@dataclass
class ClassMetrics:
    label: str
    label_int: int
    support: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    hamming_loss: float
    flags: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    per_class: list[ClassMetrics]
    macro: dict[str, float]
    overall_accuracy: float
    hamming_loss: float
    n: int
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            per_class=[ClassMetrics(**c) for c in d["per_class"]],
            macro=d["macro"],
            overall_accuracy=d["overall_accuracy"],
            hamming_loss=d["hamming_loss"],
            n=d["n"],
            confusion=d["confusion"],
        )


def _div(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def per_class_metrics(cm: ConfusionMatrix) -> MetricsReport:
    counts = cm.counts
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    per_class = []
    for c in range(counts.shape[0]):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        flags = []
        precision, bad = _div(tp, tp + fp)
        if bad:
            flags.append("no_predicted_positives")
        recall, bad = _div(tp, tp + fn)
        if bad:
            flags.append("no_true_instances")
        f1, bad = _div(2 * precision * recall, precision + recall)
        if bad:
            flags.append("f1_undefined")
        name = ClassLabel(c).name if c < N_CLASSES else str(c)
        miss = 1.0 - recall if tp + fn else 0.0
        per_class.append(ClassMetrics(name, c, tp + fn, recall, precision, recall, f1, miss, flags))
    macro = {
        k: float(np.mean([getattr(m, k) for m in per_class]))
        for k in ("accuracy", "precision", "recall", "f1", "hamming_loss")
    }
    correct = int(np.trace(counts))
    return MetricsReport(
        per_class=per_class,
        macro=macro,
        overall_accuracy=correct / cm.total,
        hamming_loss=(cm.total - correct) / cm.total,
        n=cm.total,
        confusion=counts.tolist(),
    )


# ---------------------------------------------------------------------------
# report files


def _fmt(v: float) -> str:
    return f"{v:.4f}".rstrip("0").rstrip(".") if v == v else "0"


def svg_line_chart(series: dict[str, list[tuple[float, float]]], title: str, width: int = 640, height: int = 360) -> str:
    """Minimal deterministic SVG: one polyline per series, shared axes."""
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    pts = [p for s in series.values() for p in s]
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    ml, mr, mt, mb = 60, 20, 40, 40
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
        f'<text x="{ml}" y="{height - 10}" font-family="sans-serif" font-size="10">{_fmt(x0)}</text>',
        f'<text x="{ml + pw}" y="{height - 10}" text-anchor="end" font-family="sans-serif" font-size="10">{_fmt(x1)}</text>',
        f'<text x="5" y="{mt + ph}" font-family="sans-serif" font-size="10">{_fmt(y0)}</text>',
        f'<text x="5" y="{mt + 10}" font-family="sans-serif" font-size="10">{_fmt(y1)}</text>',
    ]
    for i, (name, s) in enumerate(series.items()):
        color = colors[i % len(colors)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
        out.append(f'<polyline data-series="{name}" fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(
            f'<text x="{ml + pw - 5}" y="{mt + 12 + 14 * i}" text-anchor="end" fill="{color}" '
            f'font-family="sans-serif" font-size="11">{name}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _episodes_csv(logs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "episode", "class", "total_reward", "accuracy", "mean_elapsed", "mean_confidence"])
    for log in logs:
        for c in range(N_CLASSES):
            w.writerow(
                [
                    log.phase,
                    log.episode,
                    ClassLabel(c).name,
                    repr(float(log.total_reward[c])),
                    repr(float(log.accuracy[c])),
                    repr(float(log.mean_elapsed[c])),
                    repr(float(log.mean_confidence[c])),
                ]
            )
    return buf.getvalue()


def emit_report(metrics: MetricsReport | None, train_logs, test_logs, evals, out_dir) -> list[Path]:
    """Write metrics.json, episodes.csv, rewards.svg and eval.svg.

    Everything is rendered in memory first and then moved into place, so a
    failure leaves no partial set of files behind.
    """
    if metrics is None or metrics.n == 0:
        raise EmptyMatrix("no metrics to report")
    logs = list(train_logs) + list(test_logs)
    if not logs:
        raise ValueError("episode logs are empty")

    reward_series = {}
    if train_logs:
        reward_series["train"] = [(log.episode, log.reward) for log in train_logs]
    if test_logs:
        reward_series["test"] = [(log.episode, log.reward) for log in test_logs]
    files = {
        "metrics.json": json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n",
        "episodes.csv": _episodes_csv(logs),
        "rewards.svg": svg_line_chart(reward_series, "Total reward per episode"),
    }
    if evals:
        files["eval.svg"] = svg_line_chart(
            {
                "mean reward": [(e.episode, e.mean_reward) for e in evals],
                "hamming loss": [(e.episode, e.hamming_loss) for e in evals],
            },
            "Periodic evaluation",
        )

    out_dir = Path(out_dir)
    written, staged = [], []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.")
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            staged.append((tmp, out_dir / name))
        for tmp, dest in staged:
            os.replace(tmp, dest)
            written.append(dest)
    except OSError as exc:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)
        raise ReportError(f"could not write report to {out_dir}: {exc}") from exc
    return written
