"""Backbone -> spiking RPN -> RoI-align -> spiking detection head.

Each block runs its own simulation loop (``t_rpn``, ``t_det``); the
conventional backbone is a single pass (``t_bb = 1``). The RPN keeps its
per-level pre-NMS top-k1 proposals so new-object discovery can score
background predictions against them.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .backbone import Backbone, FeatureMaps
from .errors import ConfigurationError, StateError
from .geometry import (
    AnchorSpec,
    BBox,
    Detection,
    Proposal,
    box_decode,
    box_encode,
    clip_boxes,
    iou_matrix,
    make_anchors,
    nms_indices,
    roi_align_batch,
    score_order,
)
from .snn import NeuronParams, SpikeRecorder, SpikingBlock

INFERENCE_FORMAT = "spikedet-inference"
INFERENCE_VERSION = 1


@dataclass(frozen=True)
class LossWeights:
    lambda_rpn: float = 1.0
    lambda_det: float = 1.0

    def __post_init__(self) -> None:
        for v in (self.lambda_rpn, self.lambda_det):
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError("loss weights must be finite and >= 0")


@dataclass(frozen=True)
class PipelineConfig:
    t_bb: int = 1
    t_rpn: int = 12
    t_det: int = 16
    k1: int = 200
    k2: int = 50
    nms_rpn_iou: float = 0.7
    nms_det_iou: float = 0.5
    score_thresh: float = 0.5
    num_classes: int = 3
    anchors: AnchorSpec = field(default_factory=AnchorSpec)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    roi_size: int = 7
    canonical_size: float = 32.0
    min_box_size: float = 1.0

    def __post_init__(self) -> None:
        if self.t_bb != 1:
            raise ConfigurationError("the backbone is conventional; t_bb is fixed at 1")
        if self.t_rpn < 1 or self.t_det < 1:
            raise ConfigurationError("simulation times must be >= 1")
        if not self.k1 >= self.k2 >= 1:
            raise ConfigurationError("need k1 >= k2 >= 1")
        if self.num_classes < 1:
            raise ConfigurationError("need at least one known class")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        a = d.pop("anchors", None)
        w = d.pop("loss_weights", None)
        if a is not None:
            d["anchors"] = AnchorSpec(**{k: tuple(v) for k, v in a.items()})
        if w is not None:
            d["loss_weights"] = LossWeights(**w)
        return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters (fixed for a checkpoint)."""

    trunk_channels: tuple[int, ...] = (16, 32, 64, 64)
    pyramid_channels: int = 32
    pyramid_stages: tuple[int, ...] = (2, 3, 4)
    rpn_hidden: int = 32
    det_hidden: int = 256
    spiking: bool = True
    encoder: NeuronParams = field(default_factory=NeuronParams)
    hidden: NeuronParams = field(default_factory=NeuronParams)
    readout: NeuronParams = field(default_factory=NeuronParams)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("encoder", "hidden", "readout"):
            d[k] = getattr(self, k).to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("encoder", "hidden", "readout"):
            if k in d:
                d[k] = NeuronParams.from_dict(d[k])
        for k in ("trunk_channels", "pyramid_stages"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class RpnOutput:
    pre_nms_boxes: list[np.ndarray]  # per level, (<= k1, 4), descending objectness
    pre_nms_scores: list[np.ndarray]
    boxes: np.ndarray  # final (<= k2, 4)
    scores: np.ndarray

    @property
    def pre_nms(self) -> list[list[Proposal]]:
        return [
            [Proposal(BBox.from_array(b), float(s)) for b, s in zip(bl, sl)]
            for bl, sl in zip(self.pre_nms_boxes, self.pre_nms_scores)
        ]

    @property
    def final(self) -> list[Proposal]:
        return [Proposal(BBox.from_array(b), float(s)) for b, s in zip(self.boxes, self.scores)]

    def pooled_pre_nms(self) -> tuple[np.ndarray, np.ndarray]:
        """All pre-NMS proposals from every level as one set."""
        if not self.pre_nms_boxes:
            return np.zeros((0, 4)), np.zeros(0)
        return np.concatenate(self.pre_nms_boxes).reshape(-1, 4), np.concatenate(self.pre_nms_scores)


@dataclass
class InferenceOutput:
    detections: list[Detection]  # argmax >= 1
    background_preds: list[Detection]  # argmax == 0
    rpn: RpnOutput | None
    score_thresh: float = 0.5
    scene_id: str = ""
    image_size: tuple[int, int] = (0, 0)

    @property
    def known(self) -> list[Detection]:
        """Known-class predictions above the reporting threshold."""
        return [d for d in self.detections if d.score >= self.score_thresh]

    def to_dict(self) -> dict:
        def det(d: Detection) -> dict:
            return {"box": list(d.box.as_tuple()), "class_probs": list(d.class_probs)}

        rpn = None
        if self.rpn is not None:
            rpn = {
                "pre_nms": [
                    [{"box": [float(x) for x in b], "objectness": float(s)} for b, s in zip(bl, sl)]
                    for bl, sl in zip(self.rpn.pre_nms_boxes, self.rpn.pre_nms_scores)
                ],
                "final": [{"box": [float(x) for x in b], "objectness": float(s)} for b, s in zip(self.rpn.boxes, self.rpn.scores)],
            }
        return {
            "format": INFERENCE_FORMAT,
            "version": INFERENCE_VERSION,
            "scene_id": self.scene_id,
            "image_size": list(self.image_size),
            "score_thresh": self.score_thresh,
            "detections": [det(d) for d in self.detections],
            "background_preds": [det(d) for d in self.background_preds],
            "rpn": rpn,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceOutput":
        if d.get("format") != INFERENCE_FORMAT or d.get("version") != INFERENCE_VERSION:
            raise ConfigurationError("not a spikedet-inference v1 record")

        def det(x: dict) -> Detection:
            return Detection(BBox.from_array(x["box"]), tuple(float(p) for p in x["class_probs"]))

        rpn = None
        if d.get("rpn") is not None:
            r = d["rpn"]

            def arr(items):
                return (
                    np.array([p["box"] for p in items], dtype=np.float64).reshape(-1, 4),
                    np.array([p["objectness"] for p in items], dtype=np.float64),
                )

            pre = [arr(level) for level in r["pre_nms"]]
            fb, fs = arr(r["final"])
            rpn = RpnOutput([p[0] for p in pre], [p[1] for p in pre], fb, fs)
        return cls(
            [det(x) for x in d["detections"]],
            [det(x) for x in d["background_preds"]],
            rpn,
            float(d["score_thresh"]),
            d.get("scene_id", ""),
            tuple(d.get("image_size", (0, 0))),
        )

    @classmethod
    def from_json(cls, s: str) -> "InferenceOutput":
        return cls.from_dict(json.loads(s))


def assign_targets(
    boxes,
    gt_boxes,
    gt_labels=None,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
    force_best: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """IoU-based matching of anchors/proposals to ground truth.

    Returns ``(labels, matched_gt, targets)``: labels are -1 (ignored),
    0 (negative) or the matched ground-truth label (1 when ``gt_labels`` is
    None); ``matched_gt`` is -1 unless positive; ``targets`` holds
    ``box_encode(gt, box)`` for positives and zeros elsewhere.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    if len(gt) == 0 or n == 0:
        return labels, matched, targets
    gl = np.ones(len(gt), dtype=np.int64) if gt_labels is None else np.asarray(gt_labels, dtype=np.int64)
    ious = iou_matrix(boxes, gt)
    best_gt = ious.argmax(axis=1)
    best = ious[np.arange(n), best_gt]
    labels[(best >= neg_iou) & (best < pos_iou)] = -1
    pos = best >= pos_iou
    matched[pos] = best_gt[pos]
    if force_best:
        for g in range(len(gt)):
            top = ious[:, g].max()
            if top <= 0:
                continue
            for a in np.nonzero(ious[:, g] == top)[0]:
                if not pos[a]:
                    pos[a] = True
                    matched[a] = g
    labels[pos] = gl[matched[pos]]
    if pos.any():
        targets[pos] = box_encode(gt[matched[pos]], boxes[pos])
    return labels, matched, targets


class SpikeDetector(nn.Module):
    """Two-stage detector with spiking (or, for comparison, conventional) heads."""

    def __init__(self, model_config: ModelConfig | None = None, pipeline_config: PipelineConfig | None = None) -> None:
        super().__init__()
        mc = model_config or ModelConfig()
        pc = pipeline_config or PipelineConfig()
        self.model_config = mc
        self.num_classes = pc.num_classes
        self.anchor_spec = pc.anchors
        self.roi_size = pc.roi_size
        self.backbone = Backbone(mc.trunk_channels, mc.pyramid_channels, mc.pyramid_stages)
        if list(self.anchor_spec.strides) != self.backbone.strides:
            raise ConfigurationError(f"anchor strides {self.anchor_spec.strides} != pyramid strides {self.backbone.strides}")
        a = self.anchor_spec.per_location
        c = mc.pyramid_channels
        self.rpn_head = SpikingBlock(
            [nn.Conv2d(c, mc.rpn_hidden, 3, padding=1), nn.Conv2d(mc.rpn_hidden, a * 6, 1)],
            mc.encoder, mc.hidden, mc.readout, mc.spiking,
        )
        k = pc.num_classes
        self.det_head = SpikingBlock(
            [nn.Linear(c * self.roi_size**2, mc.det_hidden), nn.Linear(mc.det_hidden, (k + 1) + 4 * k)],
            mc.encoder, mc.hidden, mc.readout, mc.spiking,
        )
        self.recorders: dict[str, SpikeRecorder] | None = None
        self._anchor_cache: dict[tuple, list[np.ndarray]] = {}

    @property
    def spiking(self) -> bool:
        return self.model_config.spiking

    # -- recording -------------------------------------------------------
    def enable_recording(self) -> dict[str, SpikeRecorder]:
        self.recorders = {}
        return self.recorders

    def disable_recording(self) -> None:
        self.recorders = None
        self.rpn_head.recorder = None
        self.det_head.recorder = None

    def _recorder(self, name: str) -> SpikeRecorder | None:
        if self.recorders is None:
            return None
        return self.recorders.setdefault(name, SpikeRecorder())

    # -- raw heads -------------------------------------------------------
    def anchors_for(self, features: FeatureMaps) -> list[np.ndarray]:
        key = tuple(features.shapes())
        if key not in self._anchor_cache:
            self._anchor_cache[key] = make_anchors(self.anchor_spec, features.shapes())
        return self._anchor_cache[key]

    def rpn_raw(self, features: FeatureMaps, t_rpn: int) -> list[tuple[Tensor, Tensor]]:
        """Per level: objectness logits (B, N_l, 2) and deltas (B, N_l, 4), anchor order (y, x, a)."""
        a = self.anchor_spec.per_location
        out = []
        for lvl, fm in features.levels:
            self.rpn_head.recorder = self._recorder(f"rpn.P{lvl}")
            y = self.rpn_head(fm, t_rpn)
            b, _, h, w = y.shape
            logits = y[:, : 2 * a].reshape(b, a, 2, h, w).permute(0, 3, 4, 1, 2).reshape(b, -1, 2)
            deltas = y[:, 2 * a :].reshape(b, a, 4, h, w).permute(0, 3, 4, 1, 2).reshape(b, -1, 4)
            out.append((logits, deltas))
        self.rpn_head.recorder = None
        return out

    def det_raw(self, features: FeatureMaps, boxes: Tensor, batch_idx: Tensor, t_det: int, canonical_size: float = 32.0) -> tuple[Tensor, Tensor]:
        """Class logits (R, K+1) and per-class deltas (R, K, 4) for RoIs."""
        rois = roi_align_batch(features, boxes, batch_idx, self.roi_size, self.roi_size, canonical_size)
        self.det_head.recorder = self._recorder("det")
        y = self.det_head(rois.flatten(1), t_det)
        self.det_head.recorder = None
        k = self.num_classes
        return y[:, : k + 1], y[:, k + 1 :].reshape(-1, k, 4)

    # -- inference -------------------------------------------------------
    @torch.no_grad()
    def rpn_forward(self, features: FeatureMaps, config: PipelineConfig, image_size: tuple[int, int]) -> list[RpnOutput]:
        raw = self.rpn_raw(features, config.t_rpn)
        return self.rpn_postprocess(raw, self.anchors_for(features), config, image_size)

    @torch.no_grad()
    def rpn_postprocess(
        self, raw: list[tuple[Tensor, Tensor]], anchors: list[np.ndarray], config: PipelineConfig, image_size: tuple[int, int]
    ) -> list[RpnOutput]:
        """Decode, clip, per-level top-k1 (kept as p_pre), per-level NMS, global top-k2."""
        width, height = image_size
        batch = raw[0][0].shape[0]
        outputs = []
        for i in range(batch):
            pre_b, pre_s, post_b, post_s = [], [], [], []
            for (logits, deltas), anc in zip(raw, anchors):
                scores = torch.softmax(logits[i].detach().double(), dim=-1)[:, 1].numpy()
                boxes = clip_boxes(box_decode(deltas[i].detach().double().numpy(), anc), width, height)
                ok = ((boxes[:, 2] - boxes[:, 0]) >= config.min_box_size) & ((boxes[:, 3] - boxes[:, 1]) >= config.min_box_size)
                idx = np.nonzero(ok)[0]
                idx = idx[score_order(scores[idx])[: config.k1]]
                lb, ls = boxes[idx], scores[idx]
                pre_b.append(lb)
                pre_s.append(ls)
                keep = nms_indices(lb, ls, config.nms_rpn_iou)
                post_b.append(lb[keep])
                post_s.append(ls[keep])
            allb = np.concatenate(post_b).reshape(-1, 4)
            alls = np.concatenate(post_s)
            top = score_order(alls)[: config.k2]
            outputs.append(RpnOutput(pre_b, pre_s, allb[top], alls[top]))
        return outputs

    @torch.no_grad()
    def detector_forward(
        self, features: FeatureMaps, proposals: Sequence[np.ndarray], config: PipelineConfig, image_size: tuple[int, int]
    ) -> list[list[Detection]]:
        """Classify and refine proposals; class-wise NMS per image (background included)."""
        width, height = image_size
        counts = [len(p) for p in proposals]
        if sum(counts) == 0:
            return [[] for _ in proposals]
        boxes = torch.from_numpy(np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1, 4) for p in proposals]))
        bidx = torch.cat([torch.full((n,), i, dtype=torch.long) for i, n in enumerate(counts)])
        logits, deltas = self.det_raw(features, boxes, bidx, config.t_det, config.canonical_size)
        probs = torch.softmax(logits.double(), dim=-1).numpy()
        deltas = deltas.double().numpy()
        results: list[list[Detection]] = []
        start = 0
        for n in counts:
            p, d, bx = probs[start : start + n], deltas[start : start + n], boxes[start : start + n].numpy()
            start += n
            labels = p.argmax(axis=1)
            out_boxes = bx.copy()
            fg = labels > 0
            if fg.any():
                out_boxes[fg] = box_decode(d[fg, labels[fg] - 1], bx[fg])
            out_boxes = clip_boxes(out_boxes, width, height)
            valid = ((out_boxes[:, 2] - out_boxes[:, 0]) > 0) & ((out_boxes[:, 3] - out_boxes[:, 1]) > 0)
            dets: list[Detection] = []
            for c in range(self.num_classes + 1):
                sel = np.nonzero(valid & (labels == c))[0]
                if len(sel) == 0:
                    continue
                keep = sel[nms_indices(out_boxes[sel], p[sel, c], config.nms_det_iou)]
                for j in keep:
                    pj = p[j] / p[j].sum()
                    dets.append(Detection(BBox.from_array(out_boxes[j]), tuple(float(x) for x in pj)))
            results.append(dets)
        return results

    @torch.no_grad()
    def infer(self, images: Tensor, config: PipelineConfig, scene_ids: Sequence[str] | None = None) -> list[InferenceOutput]:
        """Full pipeline on a batch of (B, 3, H, W) images in [0, 255]."""
        if config.num_classes != self.num_classes:
            raise ConfigurationError(f"config K={config.num_classes} but model K={self.num_classes}")
        images = _as_batch(images)
        h, w = images.shape[-2:]
        features = self.backbone(images)
        rpn = self.rpn_forward(features, config, (w, h))
        dets = self.detector_forward(features, [r.boxes for r in rpn], config, (w, h))
        ids = list(scene_ids) if scene_ids is not None else [""] * len(rpn)
        out = []
        for r, ds, sid in zip(rpn, dets, ids):
            out.append(
                InferenceOutput(
                    [d for d in ds if d.label >= 1],
                    [d for d in ds if d.label == 0],
                    r,
                    config.score_thresh,
                    sid,
                    (int(w), int(h)),
                )
            )
        return out


def _as_batch(images) -> Tensor:
    """Accept (H, W, 3) uint8 arrays, lists of them, or (B, 3, H, W) tensors."""
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(np.array(images))
    if isinstance(images, (list, tuple)):
        images = torch.stack([torch.from_numpy(np.array(x)) if not isinstance(x, Tensor) else x for x in images])
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.shape[-1] == 3 and images.shape[1] != 3:
        images = images.permute(0, 3, 1, 2)
    return images.to(torch.float32)


def images_to_tensor(images: Sequence[np.ndarray]) -> Tensor:
    return _as_batch(list(images))


def infer(model: SpikeDetector, image, config: PipelineConfig, scene_id: str = "") -> InferenceOutput:
    if model is None:
        raise StateError("no trained model loaded")
    return model.infer(_as_batch(image), config, [scene_id])[0]


def with_times(config: PipelineConfig, t_rpn: int | None = None, t_det: int | None = None) -> PipelineConfig:
    return replace(config, t_rpn=t_rpn or config.t_rpn, t_det=t_det or config.t_det)
