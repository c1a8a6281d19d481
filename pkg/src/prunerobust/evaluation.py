"""Detection scoring: IoU, greedy matching, average precision and report tables."""
from __future__ import annotations

import csv
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    box: tuple
    score: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.box}")
        if not math.isfinite(self.score):
            raise ValueError("detection score must be finite")

    def to_json(self):
        return {"image_id": self.image_id, "class_id": self.class_id,
                "bbox": [float(v) for v in self.box], "score": float(self.score)}


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: int
    class_id: int
    box: tuple

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.box}")


def iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def score_order(scores) -> np.ndarray:
    """Indices by descending score; equal scores keep the lower index first."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                     iou_threshold: float = 0.5):
    """Greedy TP/FP labelling for one image and class.

    Detections are visited by descending score and each claims the still
    unmatched ground truth with the highest IoU at or above the threshold.

    Returns
    -------
    order : ndarray
        Indices into ``dets`` in visiting order.
    tp : ndarray of bool
        ``tp[k]`` labels ``dets[order[k]]``.
    """
    order = score_order([d.score for d in dets])
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for k, idx in enumerate(order):
        best, best_j = iou_threshold, -1
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            o = iou(dets[idx].box, g.box)
            if o >= best and (best_j < 0 or o > best):
                best, best_j = o, j
        if best_j >= 0:
            taken[best_j] = True
            tp[k] = True
    return order, tp


def average_precision(scores, tp, num_gt: int, method: str = "all_point") -> float:
    """Area under the precision-recall curve.

    Parameters
    ----------
    scores : array-like
        Detection confidences; only their order matters.
    tp : array-like of bool
        True-positive flag for each detection, aligned with ``scores``.
    num_gt : int
        Number of ground-truth instances. ``0`` gives ``nan`` (undefined).
    method : {"all_point", "11point"}
        All-point interpolation uses the precision envelope (non-increasing from
        the right); ``"11point"`` averages it at recall 0, 0.1, ..., 1.
    """
    if scores is None:
        raise ValueError("TP/FP labels need scores to be ranked")
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if scores.shape != tp.shape:
        raise ValueError("scores and labels must align")
    if num_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = score_order(scores)
    hits = tp[order].astype(np.float64)
    ctp = np.cumsum(hits)
    cfp = np.cumsum(1.0 - hits)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    if method == "11point":
        return float(np.mean([precision[recall >= r].max() if np.any(recall >= r) else 0.0
                              for r in np.linspace(0.0, 1.0, 11)]))
    if method != "all_point":
        raise ValueError(f"unknown AP method {method!r}")
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    """Per-class AP for one evaluation condition.

    ``condition`` is a flat mapping such as ``{"pruning": "structured",
    "rate": 0.7, "corruption": "fog", "severity": 3}``. Classes without ground
    truth are excluded from ``mAP``.
    """

    condition: dict
    per_class_ap: dict = field(default_factory=dict)
    num_gt: dict = field(default_factory=dict)
    class_names: dict = field(default_factory=dict)
    warning: str | None = None

    @property
    def mAP(self) -> float:
        vals = [ap for ap in self.per_class_ap.values() if not math.isnan(ap)]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def worst_class(self):
        scored = {c: ap for c, ap in self.per_class_ap.items() if not math.isnan(ap)}
        if not scored:
            return None
        return min(scored, key=lambda c: (scored[c], c))

    @property
    def worst_class_ap(self) -> float:
        c = self.worst_class
        return float("nan") if c is None else self.per_class_ap[c]


def build_report(detections: Iterable[Detection], ground_truth: Iterable[GroundTruthBox],
                 condition: dict, iou_threshold: float = 0.5, class_ids=None,
                 class_names=None, method: str = "all_point") -> EvalReport:
    """Score a detection set against ground truth for one condition."""
    dets = list(detections)
    gts = list(ground_truth)
    if class_ids is None:
        class_ids = sorted({g.class_id for g in gts})
    names = dict(class_names or {})
    if not gts:
        warnings.warn(f"no ground truth for condition {condition}")
        return EvalReport(dict(condition), {}, {}, names, warning="empty ground truth")

    dets_by = defaultdict(list)
    for d in dets:
        dets_by[(d.image_id, d.class_id)].append(d)
    gts_by = defaultdict(list)
    for g in gts:
        gts_by[(g.image_id, g.class_id)].append(g)
    images = sorted({k[0] for k in dets_by} | {k[0] for k in gts_by})

    per_class, num_gt = {}, {}
    for c in class_ids:
        scores, flags = [], []
        n_gt = 0
        for img in images:
            cd = dets_by.get((img, c), [])
            cg = gts_by.get((img, c), [])
            n_gt += len(cg)
            order, tp = match_detections(cd, cg, iou_threshold)
            scores.extend(cd[i].score for i in order)
            flags.extend(tp)
        num_gt[c] = n_gt
        # classes without ground truth here stay out of the report and the mean
        if n_gt:
            per_class[c] = average_precision(scores, flags, n_gt, method)
    return EvalReport(dict(condition), per_class, num_gt, names)


CORRUPTION_GROUP_ORDER = ("Noise", "Blur", "Weather", "Digital")


def group_means(reports: Sequence[EvalReport], group_of: dict) -> dict:
    """Mean mAP over the corruption kinds of each group.

    ``group_of`` maps the ``corruption`` condition value to its group name;
    reports whose corruption has no group (e.g. ``"clean"``) are skipped.
    """
    buckets = defaultdict(list)
    for r in reports:
        g = group_of.get(r.condition.get("corruption"))
        if g is not None and not math.isnan(r.mAP):
            buckets[g].append(r.mAP)
    return {g: float(np.mean(v)) for g, v in buckets.items()}


# --- file formats -----------------------------------------------------------

def write_detections_jsonl(detections: Iterable[Detection], path) -> None:
    with open(path, "w") as fh:
        for d in detections:
            fh.write(json.dumps(d.to_json()) + "\n")


def read_detections_jsonl(path) -> list[Detection]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(Detection(int(obj["image_id"]), int(obj["class_id"]),
                                 tuple(float(v) for v in obj["bbox"]), float(obj["score"])))
    return out


@dataclass
class GroundTruthSet:
    images: list
    annotations: list
    classes: list

    @property
    def class_ids(self):
        return [c["id"] for c in self.classes]

    @property
    def class_names(self):
        return {c["id"]: c["name"] for c in self.classes}

    def boxes(self, image_ids=None) -> list[GroundTruthBox]:
        keep = None if image_ids is None else set(image_ids)
        return [a for a in self.annotations if keep is None or a.image_id in keep]

    def boxes_by_image(self) -> dict:
        out = defaultdict(list)
        for a in self.annotations:
            out[a.image_id].append(a)
        return out


def read_ground_truth_json(path) -> GroundTruthSet:
    with open(path) as fh:
        obj = json.load(fh)
    anns = [GroundTruthBox(int(a["image_id"]), int(a["class_id"]),
                           tuple(float(v) for v in a["bbox"])) for a in obj["annotations"]]
    classes = [{"id": int(c["id"]), "name": str(c["name"])} for c in obj["classes"]]
    known = {c["id"] for c in classes}
    bad = {a.class_id for a in anns} - known
    if bad:
        raise ValueError(f"annotations reference unknown classes {sorted(bad)}")
    return GroundTruthSet(list(obj["images"]), anns, classes)


def write_ground_truth_json(gt: GroundTruthSet, path) -> None:
    obj = {
        "images": gt.images,
        "annotations": [{"image_id": a.image_id, "class_id": a.class_id,
                         "bbox": [float(v) for v in a.box]} for a in gt.annotations],
        "classes": gt.classes,
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


REPORT_VALUE_FIELDS = ["row_type", "class_id", "class_name", "value", "num_gt"]


def report_rows(report: EvalReport) -> list[dict]:
    """Long-format rows: one per class, then ``mAP`` and ``worst_class`` summaries."""
    rows = []
    for c in sorted(report.per_class_ap):
        rows.append({**report.condition, "row_type": "class", "class_id": c,
                     "class_name": report.class_names.get(c, str(c)),
                     "value": report.per_class_ap[c], "num_gt": report.num_gt.get(c, 0)})
    worst = report.worst_class
    rows.append({**report.condition, "row_type": "mAP", "class_id": "", "class_name": "",
                 "value": report.mAP, "num_gt": sum(report.num_gt.values())})
    rows.append({**report.condition, "row_type": "worst_class",
                 "class_id": "" if worst is None else worst,
                 "class_name": "" if worst is None else report.class_names.get(worst, str(worst)),
                 "value": report.worst_class_ap,
                 "num_gt": 0 if worst is None else report.num_gt.get(worst, 0)})
    return rows


def format_value(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 12))
    return v


def write_report_csv(reports: Sequence[EvalReport], path, extra_rows=()) -> None:
    rows = [r for rep in reports for r in report_rows(rep)] + list(extra_rows)
    cond_keys = []
    for r in rows:
        for k in r:
            if k not in REPORT_VALUE_FIELDS and k not in cond_keys:
                cond_keys.append(k)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cond_keys + REPORT_VALUE_FIELDS, restval="")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: format_value(v) for k, v in r.items()})
