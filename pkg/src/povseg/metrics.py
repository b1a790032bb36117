"""Evaluation: confusion counts, per-class IoU, and the test-set protocol.

Ground truth for a test image is the frozen model's own label map
(pseudo-labels), with pixels of the personal mask overridden to the
personal index on positive samples. Negative samples keep pure
pseudo-labels, so any personal prediction there counts as a false
positive.

The frozen baseline itself can still "predict" the personal concept when
the vocabulary names its class: predictions of that entry are relabeled to
the personal index before scoring. When no vocabulary entry matches, the
baseline simply never predicts the personal class.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvariantError
from .head import PersonalState, build_forward, build_frozen_forward, label_map
from .personalize import check_state_matches
from .snapshot import FrozenSnapshot, Manifest, load_mask, load_snapshot


@dataclass
class ConfusionCounts:
    """Pixel confusion matrix indexed [gt, pred]; additive across images."""

    matrix: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.matrix)

    @property
    def fp(self) -> np.ndarray:
        return self.matrix.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.matrix.sum(axis=1) - self.tp

    def merge(self, other: "ConfusionCounts") -> None:
        self.matrix += other.matrix


def accumulate(pred: np.ndarray, gt: np.ndarray, counts: ConfusionCounts) -> ConfusionCounts:
    """Add one image's per-pixel confusion to the running counts."""
    if pred.shape != gt.shape:
        raise InvariantError(f"shape mismatch {pred.shape} vs {gt.shape}")
    n = counts.matrix.shape[0]
    if pred.min() < 0 or pred.max() >= n or gt.min() < 0 or gt.max() >= n:
        raise InvariantError("label outside [0, num_classes)")
    flat = gt.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
    counts.matrix += np.bincount(flat, minlength=n * n).reshape(n, n)
    return counts


def class_iou(counts: ConfusionCounts) -> np.ndarray:
    """Per-class IoU; NaN marks classes absent from both gt and pred."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    denom = tp + fp + fn
    with np.errstate(invalid="ignore"):
        return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def iou_per(counts: ConfusionCounts, k: int) -> float:
    denom = counts.tp[k] + counts.fp[k] + counts.fn[k]
    return float(counts.tp[k] / denom) if denom > 0 else 0.0


def miou(counts: ConfusionCounts) -> float:
    ious = class_iou(counts)
    present = ~np.isnan(ious)
    return float(ious[present].mean()) if present.any() else 0.0


def precision_recall(counts: ConfusionCounts, k: int) -> tuple[float, float]:
    tp, fp, fn = counts.tp[k], counts.fp[k], counts.fn[k]
    precision = float(tp / (tp + fp)) if tp + fp > 0 else 0.0
    recall = float(tp / (tp + fn)) if tp + fn > 0 else 0.0
    return precision, recall


def pseudo_label(snapshot: FrozenSnapshot, personal_mask: np.ndarray | None = None,
                 k: int | None = None) -> np.ndarray:
    """Frozen-model label map, with the personal region overridden to ``k``."""
    labels = label_map(build_frozen_forward(snapshot).q)
    if personal_mask is not None:
        if k is None:
            raise InvariantError("personal override needs the personal index")
        if personal_mask.shape != labels.shape:
            raise InvariantError("personal mask shape differs from label grid")
        labels = labels.copy()
        labels[personal_mask.astype(bool)] = k
    return labels


@dataclass
class EvalSample:
    snapshot: FrozenSnapshot
    personal_mask: np.ndarray | None   # required on positive samples
    polarity: str                      # "positive" | "negative"


@dataclass
class MetricsReport:
    iou_per: float
    miou: float
    precision_per: float
    recall_per: float
    class_table: list[tuple[str, float]]
    n_positive: int
    n_negative: int


def _decode(snapshot: FrozenSnapshot, state: PersonalState | None,
            proxy_index: int | None, k: int) -> np.ndarray:
    if state is not None:
        return label_map(build_forward(snapshot, state).q)
    labels = label_map(build_frozen_forward(snapshot).q)
    if proxy_index is not None:
        labels = labels.copy()
        labels[labels == proxy_index] = k
    return labels


def evaluate_samples(samples: list[EvalSample], personal_class_name: str,
                     state: PersonalState | None = None,
                     per_image: bool = False) -> MetricsReport:
    """Score decoded labels against combined pseudo-label ground truth.

    ``state=None`` evaluates the frozen baseline (with the class-name proxy
    when the vocabulary contains ``personal_class_name``). ``per_image``
    averages scalar metrics over images instead of aggregating counts.
    """
    if not samples:
        raise InvariantError("empty evaluation sample set")
    first = samples[0].snapshot
    k = first.vocab_size
    num_classes = k + 1
    total = ConfusionCounts.zeros(num_classes)
    scalars = []
    n_pos = n_neg = 0
    for idx, sample in enumerate(samples):
        snap = sample.snapshot
        if snap.vocab_size != k:
            raise InvariantError(f"sample {idx} vocabulary size differs")
        if state is not None:
            check_state_matches(state, snap)
        proxy = None
        if state is None and personal_class_name in snap.vocab_names:
            proxy = snap.vocab_names.index(personal_class_name)
        if sample.polarity == "positive":
            if sample.personal_mask is None:
                raise InvariantError(f"positive sample {idx} lacks a personal mask")
            gt = pseudo_label(snap, sample.personal_mask, k)
            n_pos += 1
        elif sample.polarity == "negative":
            gt = pseudo_label(snap)
            n_neg += 1
        else:
            raise InvariantError(f"sample {idx}: unknown polarity {sample.polarity!r}")
        pred = _decode(snap, state, proxy, k)
        image_counts = accumulate(pred, gt, ConfusionCounts.zeros(num_classes))
        if per_image:
            p, r = precision_recall(image_counts, k)
            scalars.append((iou_per(image_counts, k), miou(image_counts), p, r))
        total.merge(image_counts)

    names = list(first.vocab_names) + [f"<{personal_class_name}>"]
    ious = class_iou(total)
    table = [(names[c], float(ious[c])) for c in range(num_classes)
             if not np.isnan(ious[c])]
    if per_image:
        means = np.mean(scalars, axis=0)
        return MetricsReport(iou_per=float(means[0]), miou=float(means[1]),
                             precision_per=float(means[2]), recall_per=float(means[3]),
                             class_table=table, n_positive=n_pos, n_negative=n_neg)
    p, r = precision_recall(total, k)
    return MetricsReport(iou_per=iou_per(total, k), miou=miou(total),
                         precision_per=p, recall_per=r, class_table=table,
                         n_positive=n_pos, n_negative=n_neg)


def load_eval_samples(manifest: Manifest, split: str = "test") -> list[EvalSample]:
    samples = []
    for entry in manifest.split(split):
        snap = load_snapshot(entry.snapshot)
        mask = None
        if entry.mask is not None:
            mask = load_mask(entry.mask, *snap.grid_shape)
        samples.append(EvalSample(snapshot=snap, personal_mask=mask,
                                  polarity=entry.polarity))
    if not samples:
        raise InvariantError(f"manifest has no '{split}' entries")
    return samples


def evaluate(manifest: Manifest, state: PersonalState | None = None,
             per_image: bool = False) -> MetricsReport:
    samples = load_eval_samples(manifest)
    return evaluate_samples(samples, manifest.personal_class_name,
                            state=state, per_image=per_image)


def format_report(report: MetricsReport) -> str:
    lines = ["metric\tvalue",
             f"iou_per\t{report.iou_per:.4f}",
             f"miou\t{report.miou:.4f}",
             f"precision_per\t{report.precision_per:.4f}",
             f"recall_per\t{report.recall_per:.4f}"]
    lines += [f"{name}\t{value:.4f}" for name, value in report.class_table]
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(format_report(report))
