"""Evaluation runs shared by the command line and the acceptance checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .energy import EnergyReport, energy_totals, model_energy_layers
from .errors import ConfigurationError
from .metrics import EvalResult, ImagePredictions, ImageTruth, evaluate, mean_ap, novelty_eval
from .noise import NoiseSpec, corrupt_images
from .novelty import NoveltyCandidate, NoveltyConfig, discover
from .pipeline import InferenceOutput, PipelineConfig, SpikeDetector, images_to_tensor, with_times
from .snn import SpikeRecorder
from .toyscenes import Scene


@dataclass
class EvalRun:
    outputs: list[InferenceOutput]
    result: EvalResult
    energy: EnergyReport
    activity: dict[str, dict[str, float]] = field(default_factory=dict)


def run_inference(
    model: SpikeDetector,
    images: Sequence[np.ndarray],
    config: PipelineConfig,
    scene_ids: Sequence[str] | None = None,
    batch_size: int = 25,
) -> tuple[list[InferenceOutput], dict[str, SpikeRecorder]]:
    """Batched inference in input order, with spike recording switched on."""
    if config.num_classes != model.num_classes:
        raise ConfigurationError(f"config K={config.num_classes} but model K={model.num_classes}")
    ids = list(scene_ids) if scene_ids is not None else [str(i) for i in range(len(images))]
    recorders = model.enable_recording()
    outputs: list[InferenceOutput] = []
    try:
        for s in range(0, len(images), batch_size):
            outputs += model.infer(images_to_tensor(images[s : s + batch_size]), config, ids[s : s + batch_size])
    finally:
        model.disable_recording()
    return outputs, recorders


def energy_report(model: SpikeDetector, recorders: dict, config: PipelineConfig, outputs: Sequence[InferenceOutput]) -> EnergyReport:
    if not outputs:
        raise ConfigurationError("energy needs at least one evaluated image")
    rois = float(np.mean([len(o.rpn.boxes) for o in outputs]))
    report = energy_totals(model_energy_layers(model, recorders, config, outputs[0].image_size, rois))
    report.meta = {"t_rpn": config.t_rpn, "t_det": config.t_det, "rois_per_image": rois, "images": len(outputs)}
    return report


def predictions(outputs: Sequence[InferenceOutput]) -> list[ImagePredictions]:
    return [ImagePredictions.from_detections(o.detections) for o in outputs]


def truths(scenes: Sequence[Scene]) -> list[ImageTruth]:
    return [ImageTruth.from_annotation(s.annotation) for s in scenes]


def evaluate_model(
    model: SpikeDetector,
    scenes: Sequence[Scene],
    config: PipelineConfig,
    noise: NoiseSpec | None = None,
    class_names: dict[int, str] | None = None,
) -> EvalRun:
    images = corrupt_images([s.image for s in scenes], noise) if noise is not None else [s.image for s in scenes]
    outputs, recorders = run_inference(model, images, config, [s.annotation.scene_id for s in scenes])
    result = evaluate(predictions(outputs), truths(scenes), class_names)
    activity = {k: r.activity() for k, r in sorted(recorders.items())}
    return EvalRun(outputs, result, energy_report(model, recorders, config, outputs), activity)


@dataclass(frozen=True)
class SweepPoint:
    t_rpn: int
    t_det: int
    delta_e: float
    delta_e_spiking: float
    e_snn: float
    e_snn_rpn: float
    map_50: float


def sweep_t(model: SpikeDetector, scenes: Sequence[Scene], config: PipelineConfig, t_rpn: Sequence[int], t_det: Sequence[int]) -> list[SweepPoint]:
    """Evaluate every (T_rpn, T_det) pair with the same weights."""
    if any(t < 1 for t in (*t_rpn, *t_det)):
        raise ConfigurationError("time-step counts must be >= 1")
    points = []
    for td in t_det:
        for tr in t_rpn:
            run = evaluate_model(model, scenes, with_times(config, tr, td))
            rpn_e = sum(l.e_snn for l in run.energy.layers if l.name.startswith("rpn."))
            points.append(SweepPoint(tr, td, run.energy.delta_e, run.energy.delta_e_spiking, run.energy.e_snn, rpn_e, run.result.map_50))
    return points


@dataclass(frozen=True)
class NoisePoint:
    kind: str
    level: str
    map_50: float
    relative_decrease: float


# pixel-value std; the toy detector shrugs off sigma below ~30
SIGMA_GRID = (0.0, 30.0, 60.0, 90.0, 120.0, 160.0, 200.0)


def relative_decrease(clean: float, noisy: float) -> float:
    return (clean - noisy) / clean if clean else 0.0


def noise_curve(
    model: SpikeDetector,
    scenes: Sequence[Scene],
    config: PipelineConfig,
    base: NoiseSpec,
    sigmas: Sequence[float] = (),
    intensities: Sequence[str] = (),
) -> list[NoisePoint]:
    """mAP_.5 under each corruption level and its relative drop from the clean score."""
    truth = truths(scenes)
    clean_out, _ = run_inference(model, [s.image for s in scenes], config)
    clean = mean_ap(predictions(clean_out), truth)
    points = []
    for sigma in sigmas:
        spec = NoiseSpec.gaussian(sigma, base.seed)
        if sigma == 0:
            m = clean
        else:
            out, _ = run_inference(model, corrupt_images([s.image for s in scenes], spec), config)
            m = mean_ap(predictions(out), truth)
        points.append(NoisePoint("gaussian", repr(float(sigma)), m, relative_decrease(clean, m)))
    for name in intensities:
        spec = NoiseSpec.rain(name, base.seed)
        out, _ = run_inference(model, corrupt_images([s.image for s in scenes], spec), config)
        m = mean_ap(predictions(out), truth)
        points.append(NoisePoint("rain", name, m, relative_decrease(clean, m)))
    return points


@dataclass(frozen=True)
class NoveltyPoint:
    gamma_q: float
    recall: float
    precision: float
    candidates: int


# objectness of a trained RPN is small away from known shapes, so most of the
# useful thresholds sit well below 0.1
GAMMA_GRID = (0.0, 0.001, 0.002, 0.003, 0.005, 0.007, 0.01, 0.015, 0.02, 0.05, 0.1, 0.2, 0.5)


def discover_all(outputs: Sequence[InferenceOutput], gamma_q: float) -> list[list[NoveltyCandidate]]:
    cfg = NoveltyConfig(gamma_q)
    return [discover(o, cfg) for o in outputs]


def novelty_grid(outputs: Sequence[InferenceOutput], scenes: Sequence[Scene], gammas: Sequence[float], iou_thr: float = 0.5) -> list[NoveltyPoint]:
    unknown = [np.array([o.box.as_tuple() for o in s.annotation.unknown]).reshape(-1, 4) for s in scenes]
    points = []
    for g in gammas:
        cands = discover_all(outputs, g)
        boxes = [np.array([c.box.as_tuple() for c in cs]).reshape(-1, 4) for cs in cands]
        r, p = novelty_eval(boxes, unknown, iou_thr)
        points.append(NoveltyPoint(float(g), r, p, sum(len(c) for c in cands)))
    return points
