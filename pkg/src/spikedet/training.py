"""Losses, BPTT, the three-phase training protocol and checkpoints.

Protocol (after a one-off backbone pretraining that stands in for the
usual large-corpus initialisation):

1. ``rpn``       - only RPN-head parameters move; backbone and detector frozen.
2. ``detector``  - only detector-head parameters move, on proposals of the frozen RPN.
3. ``finetune``  - pyramid, RPN and detector move together at a low learning
                   rate; the trunk stays frozen.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import __version__
from .backbone import FeatureMaps
from .errors import ConfigurationError, ContractViolation, NumericInputError, StateError
from .geometry import nms_indices
from .pipeline import LossWeights, ModelConfig, PipelineConfig, SpikeDetector, assign_targets, images_to_tensor
from .snn import SpikingBlock
from .toyscenes import ARCHETYPES, Scene, SceneSpec, make_split

log = logging.getLogger(__name__)

PHASES = ("rpn", "detector", "finetune")
SMOOTH_L1_BETA = 1.0 / 9.0


@dataclass(frozen=True)
class SurrogateSpec:
    kind: str = "fast-sigmoid"
    beta: float = 10.0

    def __post_init__(self) -> None:
        if self.kind != "fast-sigmoid":
            raise ConfigurationError("only the fast-sigmoid surrogate is implemented")
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")

    def derivative(self, v: Tensor, v_th: float) -> Tensor:
        return 1.0 / (self.beta * (v - v_th).abs() + 1.0) ** 2


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "rpn"
    learning_rate: float = 0.02
    batch_size: int = 2
    epochs: int = 1
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    rpn_samples: int = 256
    rpn_pos_fraction: float = 0.5
    det_samples: int = 64
    det_pos_fraction: float = 0.25
    optimizer: str = "sgd"
    rate_penalty: float = 0.0  # weight on the mean spike rate of the trained heads

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ConfigurationError(f"phase must be one of {PHASES}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError("optimizer must be 'sgd' or 'adam'")
        if self.rate_penalty < 0:
            raise ConfigurationError("rate_penalty must be >= 0")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("learning_rate, batch_size and epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def default_phases(
    learning_rate: float = 0.02,
    epochs: int = 1,
    batch_size: int = 2,
    seed: int = 0,
    finetune_factor: float = 0.1,
    finetune_epochs: int | None = None,
    optimizer: str = "sgd",
    rate_penalty: float = 0.0,
) -> list[TrainConfig]:
    """rpn -> detector -> finetune, the last at ``finetune_factor`` times the rate."""
    return [
        TrainConfig("rpn", learning_rate, batch_size, epochs, seed, optimizer=optimizer, rate_penalty=rate_penalty),
        TrainConfig("detector", learning_rate, batch_size, epochs, seed + 1, optimizer=optimizer, rate_penalty=rate_penalty),
        TrainConfig("finetune", learning_rate * finetune_factor, batch_size, finetune_epochs or epochs, seed + 2, optimizer=optimizer, rate_penalty=rate_penalty),
    ]


# -- losses ----------------------------------------------------------------

def _check_logits(logits: Tensor) -> None:
    if not bool(torch.isfinite(logits).all()):
        raise NumericInputError("non-finite logits")


def smooth_l1(x: Tensor, y: Tensor, beta: float = SMOOTH_L1_BETA) -> Tensor:
    """Elementwise smooth-L1 summed over the last axis."""
    d = (x - y).abs()
    return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).sum(dim=-1)


def rpn_loss(logits: Tensor, deltas: Tensor, labels: Tensor, targets: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    """``L_obj + lambda_rpn * L_reg`` over sampled anchors.

    labels: -1 ignore, 0 not-object, >= 1 object. ``L_obj`` is the mean
    2-class cross-entropy; ``L_reg`` sums smooth-L1 over positives and is
    normalised by the number of sampled anchors.
    """
    used = labels >= 0
    n = int(used.sum())
    if n == 0:
        raise ContractViolation("rpn_loss needs at least one sampled anchor")
    _check_logits(logits)
    obj = F.cross_entropy(logits[used], (labels[used] > 0).long())
    pos = labels > 0
    reg = smooth_l1(deltas[pos], targets[pos]).sum() / n if bool(pos.any()) else logits.new_zeros(())
    return obj + weights.lambda_rpn * reg


def det_loss(cls_logits: Tensor, box_deltas: Tensor, labels: Tensor, targets: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    """``L_cls + lambda_det * L_box``.

    cls_logits (R, K+1); box_deltas (R, K, 4) per known class; labels in
    {0..K} with 0 = background. ``L_box`` uses the delta of the true class
    for non-background rows, normalised by R.
    """
    r = len(labels)
    if r == 0:
        raise ContractViolation("det_loss needs at least one matched proposal")
    _check_logits(cls_logits)
    cls = F.cross_entropy(cls_logits, labels.long())
    pos = torch.nonzero(labels > 0).flatten()
    if len(pos):
        pred = box_deltas[pos, labels[pos].long() - 1]
        box = smooth_l1(pred, targets[pos]).sum() / r
    else:
        box = cls_logits.new_zeros(())
    return cls + weights.lambda_det * box


# -- BPTT ------------------------------------------------------------------

@dataclass
class BlockRun:
    """Forward record of a spiking block: output with its graph plus parameters."""

    output: Tensor
    params: list[nn.Parameter]


def record_block(block: SpikingBlock, x: Tensor, t_steps: int) -> BlockRun:
    params = [p for p in block.parameters()]
    with torch.enable_grad():
        out = block(x, t_steps)
    return BlockRun(out, params)


def backward_bptt(run: BlockRun | None, upstream: Tensor) -> list[Tensor]:
    """Gradients of ``<upstream, output>`` w.r.t. the block parameters, unrolled over T."""
    if run is None or run.output.grad_fn is None:
        raise StateError("no recorded forward pass to differentiate")
    grads = torch.autograd.grad(run.output, run.params, upstream, allow_unused=True, retain_graph=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(run.params, grads)]


# -- sampling --------------------------------------------------------------

def sample_labels(labels: np.ndarray, n: int, pos_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Subsample to at most ``n`` anchors; the rest become -1 (ignored)."""
    pos = np.nonzero(labels > 0)[0]
    neg = np.nonzero(labels == 0)[0]
    n_pos = min(len(pos), int(n * pos_fraction))
    n_neg = min(len(neg), n - n_pos)
    out = np.full_like(labels, -1)
    if n_pos:
        p = rng.choice(pos, n_pos, replace=False)
        out[p] = labels[p]
    if n_neg:
        out[rng.choice(neg, n_neg, replace=False)] = 0
    return out


def sample_indices(labels: np.ndarray, n: int, pos_fraction: float, rng: np.random.Generator) -> np.ndarray:
    s = sample_labels(labels, n, pos_fraction, rng)
    return np.nonzero(s >= 0)[0]


# -- protocol --------------------------------------------------------------

def phase_parameters(model: SpikeDetector, phase: str) -> list[nn.Parameter]:
    if phase == "rpn":
        mods = [model.rpn_head]
    elif phase == "detector":
        mods = [model.det_head]
    elif phase == "finetune":
        mods = [model.backbone.pyramid, model.rpn_head, model.det_head]
    else:
        raise ConfigurationError(f"unknown phase {phase!r}")
    return [p for m in mods for p in m.parameters()]


def _set_trainable(model: nn.Module, params: Iterable[nn.Parameter]) -> None:
    keep = {id(p) for p in params}
    for p in model.parameters():
        p.requires_grad_(id(p) in keep)


class _Cache:
    """Per-image tensors that stay fixed while a phase runs."""

    def __init__(self, model: SpikeDetector, images: Tensor, batch: int = 32) -> None:
        self.trunk: list[list[Tensor]] = []
        with torch.no_grad():
            for s in range(0, len(images), batch):
                x = images[s : s + batch].to(torch.float32) / 255.0 - 0.5
                stages = model.backbone.trunk(x)
                sel = [stages[k - 1] for k in model.backbone.pyramid_stages]
                for i in range(len(x)):
                    self.trunk.append([t[i] for t in sel])

    def trunk_batch(self, idx: Sequence[int]) -> list[Tensor]:
        return [torch.stack([self.trunk[i][k] for i in idx]) for k in range(len(self.trunk[0]))]


def _features(model: SpikeDetector, cache: _Cache, idx: Sequence[int], grad: bool) -> FeatureMaps:
    with torch.set_grad_enabled(grad):
        maps = model.backbone.pyramid(cache.trunk_batch(idx))
    return FeatureMaps(list(model.backbone.pyramid_stages), maps, model.backbone.strides)


def _rpn_phase_loss(model, feats, idx, rpn_targets, cfg, pcfg, rng) -> Tensor:
    raw = model.rpn_raw(feats, pcfg.t_rpn)
    logits = torch.cat([r[0] for r in raw], dim=1)
    deltas = torch.cat([r[1] for r in raw], dim=1)
    losses = []
    for b, i in enumerate(idx):
        labels, targets = rpn_targets[i]
        sl = torch.from_numpy(sample_labels(labels, cfg.rpn_samples, cfg.rpn_pos_fraction, rng))
        losses.append(rpn_loss(logits[b], deltas[b], sl, torch.from_numpy(targets).float(), pcfg.loss_weights))
    return torch.stack(losses).mean()


def _det_phase_loss(model, feats, idx, proposals, scenes, cfg, pcfg, rng) -> Tensor:
    boxes, bidx, labels, targets = [], [], [], []
    for b, i in enumerate(idx):
        ann = scenes[i].annotation
        gt = ann.known_boxes()
        props = np.concatenate([proposals[i].reshape(-1, 4), gt]) if len(gt) else proposals[i].reshape(-1, 4)
        lab, _, tgt = assign_targets(props, gt, ann.known_labels(), pos_iou=0.5, neg_iou=0.5)
        keep = sample_indices(lab, cfg.det_samples, cfg.det_pos_fraction, rng)
        boxes.append(props[keep])
        labels.append(lab[keep])
        targets.append(tgt[keep])
        bidx.append(np.full(len(keep), b))
    boxes_t = torch.from_numpy(np.concatenate(boxes))
    logits, deltas = model.det_raw(feats, boxes_t, torch.from_numpy(np.concatenate(bidx)), pcfg.t_det, pcfg.canonical_size)
    return det_loss(
        logits,
        deltas,
        torch.from_numpy(np.concatenate(labels)),
        torch.from_numpy(np.concatenate(targets)).float(),
        pcfg.loss_weights,
    )


def _rpn_target_table(model: SpikeDetector, cache: _Cache, scenes: Sequence[Scene]) -> list[tuple[np.ndarray, np.ndarray]]:
    feats = _features(model, cache, [0], grad=False)
    anchors = np.concatenate(model.anchors_for(feats))
    table = []
    for s in scenes:
        lab, _, tgt = assign_targets(anchors, s.annotation.known_boxes(), None, 0.7, 0.3)
        table.append((lab, tgt))
    return table


def _proposal_table(model: SpikeDetector, cache: _Cache, n: int, pcfg: PipelineConfig, image_size, batch: int = 32) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    for s in range(0, n, batch):
        idx = list(range(s, min(n, s + batch)))
        feats = _features(model, cache, idx, grad=False)
        out.extend(r.boxes for r in model.rpn_forward(feats, pcfg, image_size))
    return out


def _collect_rates(model: SpikeDetector, cfg: TrainConfig) -> list[Tensor]:
    rates: list[Tensor] = []
    if cfg.phase in ("rpn", "finetune"):
        model.rpn_head.rate_terms = rates
    if cfg.phase in ("detector", "finetune"):
        model.det_head.rate_terms = rates
    return rates


def _optimizer(cfg: TrainConfig, params: list[nn.Parameter]) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def train_protocol(
    model: SpikeDetector,
    scenes: Sequence[Scene],
    configs: Sequence[TrainConfig],
    pipeline_config: PipelineConfig,
    progress: Callable[[dict], None] | None = None,
) -> tuple[SpikeDetector, list[dict]]:
    """Run the phases in order; returns the model and one history row per epoch."""
    if not scenes:
        raise ConfigurationError("training needs a non-empty dataset")
    order = [c.phase for c in configs]
    if order != [p for p in PHASES if p in order] or len(set(order)) != len(order):
        raise ConfigurationError(f"phases must run in order {PHASES}, got {order}")
    images = images_to_tensor([s.image for s in scenes])
    h, w = images.shape[-2:]
    image_size = (int(w), int(h))
    cache = _Cache(model, images)
    history: list[dict] = []
    for cfg in configs:
        torch.manual_seed(cfg.seed)
        rng = np.random.default_rng(cfg.seed)
        params = phase_parameters(model, cfg.phase)
        _set_trainable(model, params)
        opt = _optimizer(cfg, params)
        rpn_targets = _rpn_target_table(model, cache, scenes) if cfg.phase in ("rpn", "finetune") else None
        proposals = _proposal_table(model, cache, len(scenes), pipeline_config, image_size) if cfg.phase == "detector" else None
        for epoch in range(cfg.epochs):
            perm = rng.permutation(len(scenes))
            total, batches = 0.0, 0
            for s in range(0, len(perm), cfg.batch_size):
                idx = [int(i) for i in perm[s : s + cfg.batch_size]]
                rates = _collect_rates(model, cfg) if model.spiking and cfg.rate_penalty > 0 else None
                feats = _features(model, cache, idx, grad=cfg.phase == "finetune")
                if cfg.phase == "rpn":
                    loss = _rpn_phase_loss(model, feats, idx, rpn_targets, cfg, pipeline_config, rng)
                elif cfg.phase == "detector":
                    loss = _det_phase_loss(model, feats, idx, proposals, scenes, cfg, pipeline_config, rng)
                else:
                    raw = model.rpn_raw(feats, pipeline_config.t_rpn)
                    props = model.rpn_postprocess(raw, model.anchors_for(feats), pipeline_config, image_size)
                    logits = torch.cat([r[0] for r in raw], dim=1)
                    deltas = torch.cat([r[1] for r in raw], dim=1)
                    l_rpn = []
                    for b, i in enumerate(idx):
                        labels, targets = rpn_targets[i]
                        sl = torch.from_numpy(sample_labels(labels, cfg.rpn_samples, cfg.rpn_pos_fraction, rng))
                        l_rpn.append(rpn_loss(logits[b], deltas[b], sl, torch.from_numpy(targets).float(), pipeline_config.loss_weights))
                    prop_map = {i: props[b].boxes for b, i in enumerate(idx)}
                    l_det = _det_phase_loss(model, feats, idx, prop_map, scenes, cfg, pipeline_config, rng)
                    loss = torch.stack(l_rpn).mean() + l_det
                if rates is not None:
                    if rates:
                        loss = loss + cfg.rate_penalty * torch.stack(rates).mean()
                    model.rpn_head.rate_terms = model.det_head.rate_terms = None
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                opt.step()
                total += float(loss.detach())
                batches += 1
            row = {"phase": cfg.phase, "epoch": epoch + 1, "loss": total / max(batches, 1), "spiking": model.spiking}
            history.append(row)
            log.info("phase %s epoch %d loss %.4f", cfg.phase, epoch + 1, row["loss"])
            if progress:
                progress(row)
    for p in model.parameters():
        p.requires_grad_(True)
    return model, history


# -- backbone pretraining ----------------------------------------------------

def pretrain_spec(spec: SceneSpec) -> SceneSpec:
    """A generic, fully labelled shape vocabulary for backbone initialisation."""
    return SceneSpec(
        image_size=spec.image_size,
        known_classes=ARCHETYPES,
        unknown_classes=(),
        size_range=spec.size_range,
        objects_range=(1, max(3, spec.objects_range[1])),
        unknown_prob=0.0,
        background_range=spec.background_range,
        background_noise=spec.background_noise,
    )


def _cell_targets(scenes: Sequence[Scene], shapes: Sequence[tuple[int, int]], strides: Sequence[int]) -> list[Tensor]:
    """Per level, the class of the object whose box contains each cell center (0 = none)."""
    out = []
    for (h, w), st in zip(shapes, strides):
        ys = (np.arange(h) + 0.5) * st
        xs = (np.arange(w) + 0.5) * st
        t = np.zeros((len(scenes), h, w), dtype=np.int64)
        for n, s in enumerate(scenes):
            for o in s.annotation.objects:
                x1, y1, x2, y2 = o.box.as_tuple()
                my = (ys >= y1) & (ys < y2)
                mx = (xs >= x1) & (xs < x2)
                t[n][np.ix_(my, mx)] = o.class_id or 0
        out.append(torch.from_numpy(t))
    return out


def pretrain_backbone(
    model: SpikeDetector,
    spec: SceneSpec,
    n_scenes: int = 400,
    epochs: int = 4,
    batch_size: int = 16,
    learning_rate: float = 2e-3,
    seed: int = 0,
) -> list[dict]:
    """Dense cell classification on a separate, fully labelled scene set."""
    pspec = pretrain_spec(spec)
    scenes = make_split(pspec, seed, "pretrain", n_scenes)
    images = images_to_tensor([s.image for s in scenes])
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    n_cls = len(pspec.known_classes) + 1
    head = nn.Conv2d(model.backbone.pyramid.smooths[0].out_channels, n_cls, 1)
    params = list(model.backbone.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=learning_rate)
    with torch.no_grad():
        shapes = model.backbone(images[:1]).shapes()
    targets = _cell_targets(scenes, shapes, model.backbone.strides)
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(len(scenes))
        total, nb = 0.0, 0
        for s in range(0, len(perm), batch_size):
            idx = torch.from_numpy(perm[s : s + batch_size])
            feats = model.backbone(images[idx])
            loss = sum(F.cross_entropy(head(m), t[idx]) for m, t in zip(feats.maps, targets)) / len(feats.maps)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, 5.0)
            opt.step()
            total += float(loss.detach())
            nb += 1
        history.append({"phase": "pretrain", "epoch": epoch + 1, "loss": total / nb})
        log.info("pretrain epoch %d loss %.4f", epoch + 1, total / nb)
    return history


# -- end-to-end recipe ---------------------------------------------------------

@dataclass(frozen=True)
class TrainRecipe:
    """Everything besides the architecture that decides a trained model."""

    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 12
    finetune_epochs: int = 8
    finetune_factor: float = 0.1
    optimizer: str = "adam"
    rate_penalty: float = 0.5
    pretrain_scenes: int = 400
    pretrain_epochs: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.pretrain_scenes < 0 or self.pretrain_epochs < 0:
            raise ConfigurationError("pretraining sizes must be >= 0")
        self.phases()  # validates the remaining fields

    def phases(self) -> list[TrainConfig]:
        return default_phases(
            self.learning_rate, self.epochs, self.batch_size, self.seed,
            self.finetune_factor, self.finetune_epochs, self.optimizer, self.rate_penalty,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def fit(
    scenes: Sequence[Scene],
    scene_spec: SceneSpec,
    model_config: ModelConfig,
    pipeline_config: PipelineConfig,
    recipe: TrainRecipe = TrainRecipe(),
    progress: Callable[[dict], None] | None = None,
) -> tuple[SpikeDetector, list[dict]]:
    """Build a detector, pretrain its backbone, then run the three phases."""
    if pipeline_config.num_classes != scene_spec.num_classes:
        raise ConfigurationError(f"pipeline K={pipeline_config.num_classes} but scenes have K={scene_spec.num_classes}")
    torch.manual_seed(recipe.seed)
    model = SpikeDetector(model_config, pipeline_config)
    history: list[dict] = []
    if recipe.pretrain_epochs and recipe.pretrain_scenes:
        history += pretrain_backbone(model, scene_spec, recipe.pretrain_scenes, recipe.pretrain_epochs, seed=recipe.seed)
    model, rows = train_protocol(model, scenes, recipe.phases(), pipeline_config, progress)
    model.eval()
    return model, history + rows


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"SPIKEDET-CKPT v1\n"


def save_checkpoint(path: str | Path, model: SpikeDetector, pipeline_config: PipelineConfig, meta: dict | None = None) -> Path:
    """Header line, JSON metadata, then raw little-endian tensor bytes in state_dict order."""
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name, t in state.items():
        a = t.detach().cpu().contiguous().numpy()
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        b = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = {
        "artifact_version": __version__,
        "model_config": model.model_config.to_dict(),
        "pipeline_config": pipeline_config.to_dict(),
        "meta": meta or {},
        "tensors": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(f"{len(hb)}\n".encode())
        f.write(hb)
        for b in blobs:
            f.write(b)
    return path


def load_checkpoint(path: str | Path) -> tuple[SpikeDetector, PipelineConfig, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ConfigurationError(f"{path}: not a spikedet checkpoint")
    rest = data[len(CHECKPOINT_MAGIC) :]
    nl = rest.index(b"\n")
    hlen = int(rest[:nl])
    header = json.loads(rest[nl + 1 : nl + 1 + hlen])
    body = rest[nl + 1 + hlen :]
    mc = ModelConfig.from_dict(header["model_config"])
    pc = PipelineConfig.from_dict(header["pipeline_config"])
    model = SpikeDetector(mc, pc)
    state = {}
    for e in header["tensors"]:
        a = np.frombuffer(body, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])) if e["shape"] else 1, offset=e["offset"])
        state[e["name"]] = torch.from_numpy(a.reshape(e["shape"]).copy())
    model.load_state_dict(state)
    return model, pc, header["meta"]


def parameter_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
