"""Detection-quality evaluation: IoU matching, precision/recall/F1, per-class AP at IoU 0.5."""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import AnomalyClass, BoundingBox, Detection


@dataclass(frozen=True)
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class ClassReport:
    counts: MatchCounts
    precision: float
    recall: float
    f1: float
    ap50: float


@dataclass
class EvalReport:
    per_class: dict[AnomalyClass, ClassReport] = field(default_factory=dict)
    map50: float = 0.0
    confidence_threshold: float = 0.25
    iou_threshold: float = 0.5


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    ix = max(0, min(a.x + a.length, b.x + b.length) - max(a.x, b.x))
    iy = max(0, min(a.y + a.width, b.y + b.width) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class GroundTruth:
    cls: AnomalyClass
    box: BoundingBox


def match_detections(preds: list[Detection], truths: list[GroundTruth],
                     iou_threshold: float = 0.5) -> MatchCounts:
    """Maximum-cardinality class-strict matching over pairs with IoU at or above the threshold.

    Predictions are tried in confidence-descending order (ties by input order),
    so equal-cardinality matchings prefer confident predictions.
    """
    feasible: list[list[int]] = [
        [j for j, t in enumerate(truths)
         if t.cls is p.cls and iou(p.box, t.box) >= iou_threshold]
        for p in preds
    ]
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    truth_owner = [-1] * len(truths)

    def augment(i: int, visited: set[int]) -> bool:
        for j in feasible[i]:
            if j in visited:
                continue
            visited.add(j)
            if truth_owner[j] < 0 or augment(truth_owner[j], visited):
                truth_owner[j] = i
                return True
        return False

    tp = sum(augment(i, set()) for i in order)
    return MatchCounts(tp=tp, fp=len(preds) - tp, fn=len(truths) - tp)


def precision(c: MatchCounts) -> float:
    denom = c.tp + c.fp
    return c.tp / denom if denom else 0.0


def recall(c: MatchCounts) -> float:
    denom = c.tp + c.fn
    return c.tp / denom if denom else 0.0


def f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


def average_precision(preds: list[tuple[int, Detection]],
                      truths: list[tuple[int, GroundTruth]],
                      iou_threshold: float = 0.5) -> float:
    """All-points interpolated AP over (frame_id, item) pairs for a single class.

    Predictions are ranked by confidence across all frames; each matches at most
    one unmatched truth on its own frame with IoU at or above the threshold.
    """
    n_truths = len(truths)
    if n_truths == 0:
        return 0.0
    if not preds:
        return 0.0
    truths_by_frame: dict[int, list[GroundTruth]] = {}
    for frame_id, truth in truths:
        truths_by_frame.setdefault(frame_id, []).append(truth)
    matched: dict[int, list[bool]] = {f: [False] * len(ts) for f, ts in truths_by_frame.items()}

    order = sorted(range(len(preds)), key=lambda i: -preds[i][1].confidence)
    tp_flags = []
    for i in order:
        frame_id, pred = preds[i]
        frame_truths = truths_by_frame.get(frame_id, [])
        best_j, best_iou = -1, 0.0
        for j, truth in enumerate(frame_truths):
            if matched[frame_id][j] or truth.cls is not pred.cls:
                continue
            overlap = iou(pred.box, truth.box)
            if overlap >= iou_threshold and overlap > best_iou:
                best_j, best_iou = j, overlap
        if best_j >= 0:
            matched[frame_id][best_j] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    # Cumulative PR curve, then the right-to-left precision envelope.
    precisions, recalls = [], []
    tp_cum = fp_cum = 0
    for flag in tp_flags:
        if flag:
            tp_cum += 1
        else:
            fp_cum += 1
        precisions.append(tp_cum / (tp_cum + fp_cum))
        recalls.append(tp_cum / n_truths)
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    prev_recall = 0.0
    for p, r in zip(precisions, recalls):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return ap


def evaluate(pred_frames: dict[int, list[Detection]],
             truth_frames: dict[int, list[GroundTruth]],
             iou_threshold: float = 0.5,
             confidence_threshold: float = 0.25) -> EvalReport:
    """Full per-class report plus mAP50 over classes present in ground truth."""
    classes = sorted(
        {t.cls for ts in truth_frames.values() for t in ts}
        | {p.cls for ps in pred_frames.values() for p in ps},
        key=lambda c: c.class_id,
    )
    truth_classes = {t.cls for ts in truth_frames.values() for t in ts}
    report = EvalReport(confidence_threshold=confidence_threshold, iou_threshold=iou_threshold)
    aps = []
    for cls in classes:
        cls_pred_pairs = [
            (f, p) for f, ps in pred_frames.items() for p in ps
            if p.cls is cls and p.confidence >= confidence_threshold
        ]
        cls_truth_pairs = [(f, t) for f, ts in truth_frames.items() for t in ts if t.cls is cls]
        tp = fp = fn = 0
        frames = set(pred_frames) | set(truth_frames)
        for f in frames:
            c = match_detections(
                [p for p in pred_frames.get(f, [])
                 if p.cls is cls and p.confidence >= confidence_threshold],
                [t for t in truth_frames.get(f, []) if t.cls is cls],
                iou_threshold,
            )
            tp, fp, fn = tp + c.tp, fp + c.fp, fn + c.fn
        counts = MatchCounts(tp=tp, fp=fp, fn=fn)
        p = precision(counts)
        r = recall(counts)
        ap = average_precision(cls_pred_pairs, cls_truth_pairs, iou_threshold)
        report.per_class[cls] = ClassReport(counts=counts, precision=p, recall=r,
                                            f1=f1(p, r), ap50=ap)
        if cls in truth_classes:
            aps.append(ap)
    report.map50 = sum(aps) / len(aps) if aps else 0.0
    return report


def format_report(report: EvalReport) -> str:
    """Plain-text table: class, P, R, F1, AP50, plus the mAP50 footer."""
    lines = [
        f"confidence threshold: {report.confidence_threshold}  "
        f"IoU threshold: {report.iou_threshold}",
        f"{'class':<10}{'P':>8}{'R':>8}{'F1':>8}{'AP50':>8}",
    ]
    for cls, cr in sorted(report.per_class.items(), key=lambda kv: kv[0].class_id):
        lines.append(
            f"{cls.name:<10}{cr.precision:>8.3f}{cr.recall:>8.3f}"
            f"{cr.f1:>8.3f}{cr.ap50:>8.3f}")
    lines.append(f"mAP50: {report.map50:.4f}")
    return "\n".join(lines)


def report_to_dict(report: EvalReport) -> dict:
    return {
        "confidence_threshold": report.confidence_threshold,
        "iou_threshold": report.iou_threshold,
        "map50": report.map50,
        "classes": {
            cls.name: {
                "tp": cr.counts.tp, "fp": cr.counts.fp, "fn": cr.counts.fn,
                "precision": cr.precision, "recall": cr.recall,
                "f1": cr.f1, "ap50": cr.ap50,
            }
            for cls, cr in report.per_class.items()
        },
    }
