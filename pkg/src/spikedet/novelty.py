"""Discovery of objects outside the known classes, without retraining.

Background predictions that touch no known detection are scored by the
objectness of the pre-NMS proposals that overlap them:

    q = sum_j IoU(bg, p_j) * o_j / |{j : IoU(bg, p_j) > 0}|

and kept when ``q`` exceeds a threshold.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .geometry import BBox, Detection, as_boxes, iou_matrix

CANDIDATE_FORMAT = "spikedet-novelty"
CANDIDATE_VERSION = 1


@dataclass(frozen=True)
class NoveltyConfig:
    gamma_q: float = 0.2

    def __post_init__(self) -> None:
        if not self.gamma_q >= 0:
            raise ConfigurationError("gamma_q must be >= 0")


@dataclass(frozen=True)
class NoveltyCandidate:
    box: BBox
    q: float
    support_count: int

    def __post_init__(self) -> None:
        if self.q < 0 or self.support_count < 0:
            raise ContractViolation("q and support_count must be non-negative")

    def to_dict(self) -> dict:
        return {"box": list(self.box.as_tuple()), "q": self.q, "support_count": self.support_count}

    @classmethod
    def from_dict(cls, d: dict) -> "NoveltyCandidate":
        return cls(BBox.from_array(d["box"]), float(d["q"]), int(d["support_count"]))


def _boxes(dets: Sequence[Detection]) -> np.ndarray:
    return as_boxes([d.box for d in dets]) if dets else np.zeros((0, 4))


def filter_background(inference, known: Sequence[Detection] | None = None) -> list[Detection]:
    """Background predictions with IoU exactly 0 against every known detection.

    ``known`` defaults to ``inference.known`` (detections above the reporting
    threshold).
    """
    known = inference.known if known is None else known
    bg = list(inference.background_preds)
    if not bg or not known:
        return bg
    ious = iou_matrix(_boxes(bg), _boxes(known))
    return [d for d, row in zip(bg, ious) if not np.any(row > 0)]


def q_score(box, pre_boxes: np.ndarray, pre_scores: np.ndarray) -> tuple[float, int]:
    """Average objectness of overlapping proposals weighted by their IoU; (q, support)."""
    pre_boxes = np.asarray(pre_boxes, dtype=np.float64).reshape(-1, 4)
    pre_scores = np.asarray(pre_scores, dtype=np.float64).reshape(-1)
    if len(pre_boxes) != len(pre_scores):
        raise ContractViolation("one objectness value per proposal is required")
    if len(pre_boxes) == 0:
        return 0.0, 0
    u = iou_matrix(as_boxes([box]), pre_boxes)[0]
    support = int(np.count_nonzero(u > 0))
    if support == 0:
        return 0.0, 0
    return float(np.sum(u * pre_scores) / support), support


def discover(inference, config: NoveltyConfig = NoveltyConfig()) -> list[NoveltyCandidate]:
    if inference.rpn is None:
        raise ContractViolation("inference record carries no pre-NMS proposals")
    pre_boxes, pre_scores = inference.rpn.pooled_pre_nms()
    out = []
    for det in filter_background(inference):
        q, support = q_score(det.box, pre_boxes, pre_scores)
        if support > 0 and q > config.gamma_q:
            out.append(NoveltyCandidate(det.box, q, support))
    # stable: equal scores keep background-prediction order
    out.sort(key=lambda c: -c.q)
    return out


def candidates_to_json(scene_id: str, candidates: Sequence[NoveltyCandidate], config: NoveltyConfig) -> str:
    return json.dumps(
        {
            "format": CANDIDATE_FORMAT,
            "version": CANDIDATE_VERSION,
            "scene_id": scene_id,
            "gamma_q": config.gamma_q,
            "candidates": [c.to_dict() for c in candidates],
        },
        sort_keys=True,
    )


def candidates_from_json(text: str) -> tuple[str, list[NoveltyCandidate], NoveltyConfig]:
    d = json.loads(text)
    if d.get("format") != CANDIDATE_FORMAT:
        raise ConfigurationError("not a spikedet-novelty record")
    return d["scene_id"], [NoveltyCandidate.from_dict(c) for c in d["candidates"]], NoveltyConfig(d["gamma_q"])
