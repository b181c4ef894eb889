"""Detection metrics: 101-point interpolated AP, mAP over IoU grid, recall, novelty P/R."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import iou_matrix

IOU_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
EVAL_FORMAT = "spikedet-eval"
EVAL_VERSION = 1


@dataclass
class ImagePredictions:
    boxes: np.ndarray  # (N, 4)
    scores: np.ndarray  # (N,)
    labels: np.ndarray  # (N,) in 1..K

    @classmethod
    def empty(cls) -> "ImagePredictions":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def from_detections(cls, detections) -> "ImagePredictions":
        if not detections:
            return cls.empty()
        return cls(
            np.array([d.box.as_tuple() for d in detections], dtype=np.float64),
            np.array([d.score for d in detections], dtype=np.float64),
            np.array([d.label for d in detections], dtype=np.int64),
        )


@dataclass
class ImageTruth:
    boxes: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_annotation(cls, ann) -> "ImageTruth":
        return cls(ann.known_boxes(), ann.known_labels())


def _match(pred_boxes: np.ndarray, gt_boxes: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy matching of already-ordered predictions; True where a prediction is a hit.

    Each prediction takes the unmatched ground truth with the highest IoU
    (>= iou_thr; ties to the lower index).
    """
    hits = np.zeros(len(pred_boxes), dtype=bool)
    if len(gt_boxes) == 0 or len(pred_boxes) == 0:
        return hits
    ious = iou_matrix(pred_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for i in range(len(pred_boxes)):
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            taken[j] = True
            hits[i] = True
    return hits


def _ordered(preds: Sequence[ImagePredictions], cls: int):
    """(image, score, box) rows of one class, sorted by -score then a canonical key."""
    rows = []
    for n, p in enumerate(preds):
        for b, s, l in zip(p.boxes, p.scores, p.labels):
            if int(l) == cls:
                rows.append((-float(s), n, tuple(float(x) for x in b)))
    rows.sort()
    return rows


def interpolated_ap(hits: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from ordered hit flags."""
    if n_gt == 0:
        return float("nan")
    if len(hits) == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    out = np.zeros(len(RECALL_POINTS))
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    ok = idx < len(env)
    out[ok] = env[idx[ok]]
    return float(out.mean())


def _class_hits(preds, truth, cls: int, iou_thr: float) -> tuple[np.ndarray, int]:
    rows = _ordered(preds, cls)
    n_gt = sum(int((t.labels == cls).sum()) for t in truth)
    hits = np.zeros(len(rows), dtype=bool)
    taken = [np.zeros(int((t.labels == cls).sum()), dtype=bool) for t in truth]
    gts = [t.boxes[t.labels == cls] for t in truth]
    for r, (_, n, box) in enumerate(rows):
        g = gts[n]
        if len(g) == 0:
            continue
        iou = iou_matrix(np.asarray([box]), g)[0]
        cand = np.where(taken[n], -1.0, iou)
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            taken[n][j] = True
            hits[r] = True
    return hits, n_gt


def classes_in(truth: Sequence[ImageTruth]) -> list[int]:
    return sorted({int(l) for t in truth for l in t.labels})


def ap_at_iou(preds: Sequence[ImagePredictions], truth: Sequence[ImageTruth], iou_thr: float = 0.5) -> dict[int, float]:
    """Per-class AP; classes without ground truth are left out."""
    if len(preds) != len(truth):
        raise ValueError("predictions and ground truth must cover the same images")
    return {c: interpolated_ap(*_class_hits(preds, truth, c, iou_thr)) for c in classes_in(truth)}


def mean_ap(preds, truth, iou_thr: float = 0.5) -> float:
    aps = ap_at_iou(preds, truth, iou_thr)
    return float(np.mean(list(aps.values()))) if aps else 0.0


def map_50_95(preds, truth) -> float:
    per_thr = [ap_at_iou(preds, truth, t) for t in IOU_GRID]
    classes = classes_in(truth)
    if not classes:
        return 0.0
    return float(np.mean([np.mean([a[c] for a in per_thr]) for c in classes]))


def mar_at_iou(preds, truth, iou_thr: float = 0.5, max_dets: int = 100) -> float:
    """Mean over classes of recall, keeping the top ``max_dets`` detections per image."""
    capped = []
    for p in preds:
        order = sorted(range(len(p.scores)), key=lambda i: (-float(p.scores[i]), tuple(p.boxes[i])))[:max_dets]
        capped.append(ImagePredictions(p.boxes[order], p.scores[order], p.labels[order]))
    recalls = []
    for c in classes_in(truth):
        hits, n_gt = _class_hits(capped, truth, c, iou_thr)
        recalls.append(hits.sum() / n_gt)
    return float(np.mean(recalls)) if recalls else 0.0


def novelty_eval(candidates: Sequence[np.ndarray], unknown_truth: Sequence[np.ndarray], iou_thr: float = 0.5,
                 scores: Sequence[np.ndarray] | None = None) -> tuple[float, float]:
    """Recall over unknown objects and precision over candidates.

    ``candidates[n]`` are boxes for image n, ordered by q descending (or
    ordered here when ``scores`` is given). With no unknown objects recall is
    reported as 1; with no candidates precision is reported as 1.
    """
    matched_gt = total_gt = matched_c = total_c = 0
    for n, (c, g) in enumerate(zip(candidates, unknown_truth)):
        c = np.asarray(c, dtype=np.float64).reshape(-1, 4)
        g = np.asarray(g, dtype=np.float64).reshape(-1, 4)
        if scores is not None:
            c = c[np.argsort(-np.asarray(scores[n]), kind="stable")]
        hits = _match(c, g, iou_thr)
        matched_gt += int(hits.sum())
        matched_c += int(hits.sum())
        total_gt += len(g)
        total_c += len(c)
    recall = matched_gt / total_gt if total_gt else 1.0
    precision = matched_c / total_c if total_c else 1.0
    return recall, precision


@dataclass
class EvalResult:
    map_50: float
    map_50_95: float
    mar_50: float
    per_class: dict[int, float] = field(default_factory=dict)
    novelty: tuple[float, float] | None = None
    class_names: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "format": EVAL_FORMAT,
            "version": EVAL_VERSION,
            "map_50": self.map_50,
            "map_50_95": self.map_50_95,
            "mar_50": self.mar_50,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "class_names": {str(k): v for k, v in sorted(self.class_names.items())},
        }
        if self.novelty is not None:
            d["novelty"] = {"recall": self.novelty[0], "precision": self.novelty[1]}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        nov = d.get("novelty")
        return cls(
            d["map_50"],
            d["map_50_95"],
            d["mar_50"],
            {int(k): v for k, v in d.get("per_class", {}).items()},
            (nov["recall"], nov["precision"]) if nov else None,
            {int(k): v for k, v in d.get("class_names", {}).items()},
        )

    def table(self) -> str:
        """Flat CSV: one row per class plus a mean row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "class_name", "ap_50"])
        for k, v in sorted(self.per_class.items()):
            w.writerow([k, self.class_names.get(k, ""), repr(float(v))])
        w.writerow(["mean", "", repr(float(self.map_50))])
        return buf.getvalue()


def evaluate(preds: Sequence[ImagePredictions], truth: Sequence[ImageTruth], class_names: dict[int, str] | None = None) -> EvalResult:
    per_class = ap_at_iou(preds, truth, 0.5)
    m50 = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalResult(m50, map_50_95(preds, truth), mar_at_iou(preds, truth, 0.5), per_class, None, class_names or {})
