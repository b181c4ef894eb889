"""Box algebra: IoU, NMS, top-k, anchors, delta coding and RoI-align.

Boxes are ``(x1, y1, x2, y2)`` in pixel coordinates. Array functions take
``(N, 4)`` float arrays; sorting is always descending by score with ties
broken by the lower original index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import ContractViolation

# decoded log-size deltas are clipped here to keep exp() finite
DELTA_CLIP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x2 >= self.x1 and self.y2 >= self.y1):
            raise ContractViolation(f"malformed box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "BBox":
        return cls(*(float(x) for x in a))


@dataclass(frozen=True)
class Proposal:
    box: BBox
    objectness: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.objectness):
            raise ContractViolation("objectness must be finite")


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_probs: tuple[float, ...]  # K + 1 entries, index 0 is background

    def __post_init__(self) -> None:
        p = np.asarray(self.class_probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
            raise ContractViolation("class_probs must be a simplex over K+1 classes")

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def score(self) -> float:
        """Confidence: the highest known-class probability."""
        return float(max(self.class_probs[1:]))


@dataclass(frozen=True)
class AnchorSpec:
    scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    strides: tuple[int, ...] = (4, 8, 16)

    def __post_init__(self) -> None:
        if not self.scales or not self.aspect_ratios:
            raise ContractViolation("anchor scales and ratios must be non-empty")
        if min(self.scales) <= 0 or min(self.aspect_ratios) <= 0 or min(self.strides) <= 0:
            raise ContractViolation("anchor scales, ratios and strides must be positive")
        if len(self.scales) != len(self.strides):
            raise ContractViolation("one anchor scale per pyramid level")

    @property
    def per_location(self) -> int:
        return len(self.aspect_ratios)


def as_boxes(boxes) -> np.ndarray:
    if isinstance(boxes, BBox):
        return boxes.as_array()[None]
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], BBox):
        return np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    a = np.asarray(boxes, dtype=np.float64)
    return a.reshape(-1, 4)


def areas(boxes: np.ndarray) -> np.ndarray:
    return np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b)). Degenerate boxes give 0."""
    a, b = as_boxes(a), as_boxes(b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    union = areas(a)[:, None] + areas(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a: BBox, b: BBox) -> float:
    return float(iou_matrix(a, b)[0, 0])


def score_order(scores) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms_indices(boxes, scores, iou_threshold: float) -> np.ndarray:
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ContractViolation("NMS needs finite scores")
    order = score_order(scores)
    keep = []
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=np.int64)


def nms(proposals: Sequence[Proposal], iou_threshold: float) -> list[Proposal]:
    if not proposals:
        return []
    boxes = np.stack([p.box.as_array() for p in proposals])
    keep = nms_indices(boxes, [p.objectness for p in proposals], iou_threshold)
    return [proposals[i] for i in keep]


def topk_indices(scores, k: int) -> np.ndarray:
    if k < 1:
        raise ContractViolation("k must be >= 1")
    return score_order(scores)[:k]


def topk_by_objectness(proposals: Sequence[Proposal], k: int) -> list[Proposal]:
    idx = topk_indices([p.objectness for p in proposals], k) if proposals else []
    return [proposals[i] for i in idx]


def box_encode(boxes, anchors) -> np.ndarray:
    """Deltas (dx, dy, dw, dh) of ``boxes`` relative to ``anchors`` (row-wise)."""
    b, a = as_boxes(boxes), as_boxes(anchors)
    bw, bh = b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if (bw <= 0).any() or (bh <= 0).any():
        raise ContractViolation("box_encode needs positive box dimensions")
    if (aw <= 0).any() or (ah <= 0).any():
        raise ContractViolation("anchors must have positive width and height")
    bcx, bcy = b[:, 0] + 0.5 * bw, b[:, 1] + 0.5 * bh
    acx, acy = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    return np.stack([(bcx - acx) / aw, (bcy - acy) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)


def box_decode(deltas, anchors) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    a = as_boxes(anchors)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if (aw <= 0).any() or (ah <= 0).any():
        raise ContractViolation("anchors must have positive width and height")
    acx, acy = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    cx, cy = acx + d[:, 0] * aw, acy + d[:, 1] * ah
    w = aw * np.exp(np.minimum(d[:, 2], DELTA_CLIP))
    h = ah * np.exp(np.minimum(d[:, 3], DELTA_CLIP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes, width: int, height: int) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


def level_anchors(scale: float, ratios: Iterable[float], stride: int, height: int, width: int) -> np.ndarray:
    """Anchors for one level, ordered (y, x, ratio); centered on cell centers."""
    shapes = []
    for r in ratios:
        w, h = scale / math.sqrt(r), scale * math.sqrt(r)
        shapes.append((w, h))
    shapes = np.asarray(shapes)
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    cx = ((xs + 0.5) * stride).reshape(-1, 1)
    cy = ((ys + 0.5) * stride).reshape(-1, 1)
    out = np.stack(
        [cx - shapes[None, :, 0] / 2, cy - shapes[None, :, 1] / 2, cx + shapes[None, :, 0] / 2, cy + shapes[None, :, 1] / 2],
        axis=-1,
    )
    return out.reshape(-1, 4)


def make_anchors(spec: AnchorSpec, level_shapes: Sequence[tuple[int, int]]) -> list[np.ndarray]:
    if len(level_shapes) != len(spec.scales):
        raise ContractViolation("need one (H, W) per anchor level")
    return [
        level_anchors(s, spec.aspect_ratios, st, h, w)
        for s, st, (h, w) in zip(spec.scales, spec.strides, level_shapes)
    ]


def assign_levels(boxes, n_levels: int, canonical_size: float = 32.0, canonical_level: int | None = None) -> np.ndarray:
    """Pyramid level index (0 = finest) per box from its scale.

    ``floor(l0 + log2(sqrt(area) / canonical_size))`` clamped to the available
    levels, with ``l0`` the coarsest-but-one level by default.
    """
    b = as_boxes(boxes)
    l0 = n_levels - 2 if canonical_level is None else canonical_level
    l0 = max(l0, 0)
    s = np.sqrt(np.maximum(areas(b), 1e-12))
    lvl = np.floor(l0 + np.log2(s / canonical_size))
    return np.clip(lvl, 0, n_levels - 1).astype(np.int64)


def bilinear_gather(feat: Tensor, batch_idx: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Sample ``feat`` (B, C, H, W) at per-RoI grids.

    ys: (R, h), xs: (R, w) in feature-pixel coordinates (pixel centers at
    integers). Coordinates are clamped to the map. Returns (R, C, h, w).
    """
    H, W = feat.shape[-2:]
    ys = ys.clamp(0, H - 1)
    xs = xs.clamp(0, W - 1)
    y0 = ys.floor().long()
    x0 = xs.floor().long()
    y1 = (y0 + 1).clamp(max=H - 1)
    x1 = (x0 + 1).clamp(max=W - 1)
    ly = (ys - y0.to(ys.dtype)).to(feat.dtype)[:, :, None]
    lx = (xs - x0.to(xs.dtype)).to(feat.dtype)[:, None, :]
    b = batch_idx[:, None, None]

    def g(yy, xx):
        return feat[b, :, yy[:, :, None], xx[:, None, :]]  # (R, h, w, C)

    ly4, lx4 = ly[..., None], lx[..., None]
    out = (
        g(y0, x0) * (1 - ly4) * (1 - lx4)
        + g(y0, x1) * (1 - ly4) * lx4
        + g(y1, x0) * ly4 * (1 - lx4)
        + g(y1, x1) * ly4 * lx4
    )
    return out.permute(0, 3, 1, 2)


def roi_align_level(feat: Tensor, stride: float, boxes: Tensor, batch_idx: Tensor, out_h: int, out_w: int) -> Tensor:
    """RoI-align on a single map: one bilinear sample at every bin center."""
    if out_h < 1 or out_w < 1:
        raise ContractViolation("output size must be >= 1")
    boxes = boxes.to(torch.float64)
    if ((boxes[:, 2] - boxes[:, 0]) <= 0).any() or ((boxes[:, 3] - boxes[:, 1]) <= 0).any():
        raise ContractViolation("RoI-align needs positive-area boxes")
    bw = (boxes[:, 2] - boxes[:, 0]) / out_w
    bh = (boxes[:, 3] - boxes[:, 1]) / out_h
    jx = torch.arange(out_w, dtype=torch.float64) + 0.5
    jy = torch.arange(out_h, dtype=torch.float64) + 0.5
    xs = (boxes[:, 0:1] + jx[None] * bw[:, None]) / stride - 0.5
    ys = (boxes[:, 1:2] + jy[None] * bh[:, None]) / stride - 0.5
    return bilinear_gather(feat, batch_idx.long(), ys, xs)


def roi_align_batch(
    features,
    boxes: Tensor,
    batch_idx: Tensor,
    out_h: int = 7,
    out_w: int = 7,
    canonical_size: float = 32.0,
) -> Tensor:
    """RoI-align over a pyramid; each box is read from its scale-assigned level."""
    maps, strides = features.maps, features.strides
    c = maps[0].shape[1]
    out = maps[0].new_zeros((len(boxes), c, out_h, out_w))
    if len(boxes) == 0:
        return out
    lv = torch.from_numpy(assign_levels(boxes.detach().cpu().numpy(), len(maps), canonical_size))
    for k, (fm, st) in enumerate(zip(maps, strides)):
        sel = torch.nonzero(lv == k).flatten()
        if len(sel):
            out = out.index_put((sel,), roi_align_level(fm, st, boxes[sel], batch_idx[sel], out_h, out_w))
    return out


def roi_align(features, box: BBox, out_h: int = 7, out_w: int = 7, canonical_size: float = 32.0, image_index: int = 0) -> Tensor:
    """Single-box RoI-align; returns a (C, out_h, out_w) tensor."""
    if box.area <= 0:
        raise ContractViolation("RoI-align needs a positive-area box")
    b = torch.tensor([box.as_tuple()], dtype=torch.float64)
    return roi_align_batch(features, b, torch.tensor([image_index]), out_h, out_w, canonical_size)[0]
