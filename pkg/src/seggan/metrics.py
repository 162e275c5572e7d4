"""Pixel accuracy, per-class IoU / mIoU, and the ranked comparison report.

Both metrics treat masks as two-class (0 = background, 1 = damage).  When a
class is absent from prediction and target alike its IoU is 1.0 by default
(an all-background image should not zero the mean); `empty="exclude"` drops
such classes from the mean instead.

The dataset-level mIoU is the mean of per-image mIoU values, matching
per-image result tables; an aggregate-counts variant (IoU of the pooled
intersection/union over all images) is reported alongside for cross-checking
since either aggregation is defensible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .tensor import DomainError, ShapeError, Tensor

__all__ = [
    "ConfusionCounts",
    "ImageResult",
    "ModelSummary",
    "MetricsReport",
    "binarize",
    "confusion",
    "pixel_accuracy",
    "iou",
    "mean_iou",
    "evaluate_model",
    "evaluate_and_rank",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _as_array(x) -> np.ndarray:
    if isinstance(x, ad.Node):
        x = x.value
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def binarize(logits) -> np.ndarray:
    """Hard mask from logits: 1 where sigmoid(logit) >= 0.5, i.e. logit >= 0."""
    return (_as_array(logits) >= 0).astype(np.uint8)


def _check_binary_pair(pred, target):
    p, t = _as_array(pred), _as_array(target)
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    for name, m in (("pred", p), ("target", t)):
        if not np.all((m == 0) | (m == 1)):
            raise DomainError(f"{name} mask must contain only 0 and 1")
    return p.astype(bool), t.astype(bool)


def confusion(pred, target) -> ConfusionCounts:
    """Exact TP/TN/FP/FN pixel tallies of a binary prediction against its target."""
    p, t = _check_binary_pair(pred, target)
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fp=int(np.count_nonzero(p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


def pixel_accuracy(c: ConfusionCounts) -> float:
    if c.total <= 0:
        raise DomainError("pixel_accuracy of an empty mask")
    return (c.tp + c.tn) / c.total


def iou(pred, target, class_id: int) -> float:
    """Intersection over union for one class; 1.0 when both sets are empty."""
    p, t = _check_binary_pair(pred, target)
    if class_id == 0:
        p, t = ~p, ~t
    elif class_id != 1:
        raise ValueError(f"class_id must be 0 or 1, got {class_id}")
    union = int(np.count_nonzero(p | t))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & t)) / union


def mean_iou(pred, target, empty: str = "count_as_one") -> float:
    """Mean IoU over the background and damage classes.

    empty="count_as_one" scores a class absent from both masks as 1.0;
    empty="exclude" drops it from the mean (and returns 1.0 if nothing
    remains, which only happens for size-0 masks that confusion rejects
    anyway).
    """
    if empty not in ("count_as_one", "exclude"):
        raise ValueError(f"unknown empty-class mode {empty!r}")
    p, t = _check_binary_pair(pred, target)
    vals = []
    for class_id in (0, 1):
        pc, tc = (~p, ~t) if class_id == 0 else (p, t)
        union = int(np.count_nonzero(pc | tc))
        if union == 0:
            if empty == "count_as_one":
                vals.append(1.0)
            continue
        vals.append(int(np.count_nonzero(pc & tc)) / union)
    return float(np.mean(vals)) if vals else 1.0


@dataclass
class ImageResult:
    model: str
    image_id: str
    pa: float
    iou_background: float
    iou_damage: float
    miou: float


@dataclass
class ModelSummary:
    model: str
    mean_pa: float
    miou: float  # mean of per-image mIoU
    miou_aggregate: float  # IoU from pooled counts over the whole set
    bestk_pa: float
    bestk_miou: float
    delta_pa: float = 0.0
    delta_miou: float = 0.0
    bestk_delta_pa: float = 0.0
    bestk_delta_miou: float = 0.0


@dataclass
class MetricsReport:
    baseline: str
    best_k: int
    per_image: list[ImageResult] = field(default_factory=list)
    summaries: list[ModelSummary] = field(default_factory=list)

    def summary(self, model: str) -> ModelSummary:
        for s in self.summaries:
            if s.model == model:
                return s
        raise KeyError(model)

    def to_csv(self, path, echo_lines=()) -> None:
        """Fixed-order CSV: image rows then summary rows, fractions at 4 decimals."""
        lines = [f"# {line}" for line in echo_lines]
        lines.append(
            "row,model,image,pa,delta_pa,iou_background,iou_damage,miou,delta_miou,miou_aggregate"
        )
        for r in self.per_image:
            lines.append(
                f"image,{r.model},{r.image_id},{r.pa:.4f},,{r.iou_background:.4f},"
                f"{r.iou_damage:.4f},{r.miou:.4f},,"
            )
        for s in self.summaries:
            lines.append(
                f"summary_full,{s.model},,{s.mean_pa:.4f},{s.delta_pa:.4f},,,"
                f"{s.miou:.4f},{s.delta_miou:.4f},{s.miou_aggregate:.4f}"
            )
        for s in self.summaries:
            lines.append(
                f"summary_best{self.best_k},{s.model},,{s.bestk_pa:.4f},{s.bestk_delta_pa:.4f},,,"
                f"{s.bestk_miou:.4f},{s.bestk_delta_miou:.4f},"
            )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def predict_mask(model, sample) -> np.ndarray:
    """Hard mask from a model forward in inference mode."""
    was_training = model.training
    model.set_training(False)
    try:
        logits = model(ad.constant(sample.image))
    finally:
        model.set_training(was_training)
    return binarize(logits)


def evaluate_model(tag: str, model, samples) -> tuple[list[ImageResult], ConfusionCounts, dict]:
    """Per-image metrics plus pooled counts for the aggregate mIoU variant."""
    rows = []
    pooled = {"i0": 0, "u0": 0, "i1": 0, "u1": 0}
    tp = tn = fp = fn = 0
    for s in samples:
        pred = predict_mask(model, s)
        c = confusion(pred, s.mask)
        tp, tn, fp, fn = tp + c.tp, tn + c.tn, fp + c.fp, fn + c.fn
        p, t = pred.astype(bool), s.mask.data.astype(bool)
        pooled["i1"] += int(np.count_nonzero(p & t))
        pooled["u1"] += int(np.count_nonzero(p | t))
        pooled["i0"] += int(np.count_nonzero(~p & ~t))
        pooled["u0"] += int(np.count_nonzero(~p | ~t))
        rows.append(
            ImageResult(
                model=tag,
                image_id=s.source_id,
                pa=pixel_accuracy(c),
                iou_background=iou(pred, s.mask, 0),
                iou_damage=iou(pred, s.mask, 1),
                miou=mean_iou(pred, s.mask),
            )
        )
    return rows, ConfusionCounts(tp, tn, fp, fn), pooled


def evaluate_and_rank(named_models, samples, select_best_k: int, baseline: str) -> MetricsReport:
    """Evaluate every model, rank images by per-image mIoU, and diff against a baseline.

    `named_models` is a list of (tag, model); tags must be unique and include
    the baseline.  `select_best_k` bounds the per-model best-image subset
    (ranked by per-image mIoU, ties broken by dataset order).
    """
    if not samples:
        raise ValueError("dataset is empty")
    tags = [tag for tag, _ in named_models]
    if len(set(tags)) != len(tags):
        raise ValueError(f"duplicate model tags: {tags}")
    if baseline not in tags:
        raise ValueError(f"baseline {baseline!r} not among models {tags}")
    if not (1 <= select_best_k <= len(samples)):
        raise ValueError(f"select_best_k must be in [1, {len(samples)}], got {select_best_k}")

    report = MetricsReport(baseline=baseline, best_k=select_best_k)
    for tag, model in named_models:
        rows, _, pooled = evaluate_model(tag, model, samples)
        report.per_image.extend(rows)
        order = sorted(range(len(rows)), key=lambda i: -rows[i].miou)
        best = [rows[i] for i in order[:select_best_k]]
        agg = ((pooled["i0"] / pooled["u0"]) + (pooled["i1"] / pooled["u1"])) / 2.0
        report.summaries.append(
            ModelSummary(
                model=tag,
                mean_pa=float(np.mean([r.pa for r in rows])),
                miou=float(np.mean([r.miou for r in rows])),
                miou_aggregate=float(agg),
                bestk_pa=float(np.mean([r.pa for r in best])),
                bestk_miou=float(np.mean([r.miou for r in best])),
            )
        )
    base = report.summary(baseline)
    for s in report.summaries:
        s.delta_pa = s.mean_pa - base.mean_pa
        s.delta_miou = s.miou - base.miou
        s.bestk_delta_pa = s.bestk_pa - base.bestk_pa
        s.bestk_delta_miou = s.bestk_miou - base.bestk_miou
    return report
