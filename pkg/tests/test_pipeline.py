import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from spikedet.errors import ConfigurationError, StateError
from spikedet.geometry import AnchorSpec, box_encode
from spikedet.pipeline import (
    InferenceOutput,
    ModelConfig,
    PipelineConfig,
    SpikeDetector,
    assign_targets,
    infer,
    with_times,
)
from spikedet.toyscenes import SceneSpec, generate_scene

GOLDEN = json.loads((Path(__file__).parent / "golden" / "digests.json").read_text())
FAST = PipelineConfig(t_rpn=4, t_det=4, score_thresh=0.0)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = SpikeDetector(ModelConfig(), PipelineConfig())
    return m.eval()


@pytest.fixture(scope="module")
def image():
    return generate_scene(SceneSpec(), 99)[0]


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        PipelineConfig(t_bb=2)
    with pytest.raises(ConfigurationError):
        PipelineConfig(t_rpn=0)
    with pytest.raises(ConfigurationError):
        PipelineConfig(k1=10, k2=20)
    with pytest.raises(ConfigurationError):
        PipelineConfig(num_classes=0)
    with pytest.raises(ConfigurationError):
        SpikeDetector(ModelConfig(), PipelineConfig(anchors=AnchorSpec(strides=(8, 16, 32))))


def test_config_round_trips():
    pc = PipelineConfig(t_rpn=3, anchors=AnchorSpec(scales=(8.0, 16.0, 32.0)))
    assert PipelineConfig.from_dict(json.loads(json.dumps(pc.to_dict()))) == pc
    mc = ModelConfig(rpn_hidden=8, spiking=False)
    assert ModelConfig.from_dict(json.loads(json.dumps(mc.to_dict()))) == mc
    assert with_times(pc, t_det=7).t_det == 7 and with_times(pc, t_det=7).t_rpn == 3


def test_assign_targets_hand_table():
    gt = [(0, 0, 10, 10), (20, 0, 30, 10)]
    anchors = [
        (0, 0, 10, 10),  # IoU 1.0 with gt 0
        (0, 0, 10, 8),  # 0.8 with gt 0
        (20, 0, 30, 6),  # 0.6 with gt 1: ignored, but gt 1's best anchor
        (0, 0, 10, 4),  # 0.4 with gt 0: ignored
        (40, 40, 50, 50),  # no overlap: negative
    ]
    labels, matched, targets = assign_targets(anchors, gt, [2, 1])
    assert labels.tolist() == [2, 2, 1, -1, 0]
    assert matched.tolist() == [0, 0, 1, -1, -1]
    assert np.allclose(targets[0], 0)
    assert np.allclose(targets[1], [0, 0.125, 0, np.log(10 / 8)])
    assert np.allclose(targets[2], [0, 1 / 3, 0, np.log(10 / 6)])
    assert np.allclose(targets[2], box_encode(gt[1], anchors[2])[0])
    assert np.all(targets[3:] == 0)
    labels, _, _ = assign_targets(anchors, gt, [2, 1], force_best=False)
    assert labels.tolist() == [2, 2, -1, -1, 0]


def test_assign_targets_without_ground_truth():
    labels, matched, targets = assign_targets([(0, 0, 4, 4), (1, 1, 5, 5)], np.zeros((0, 4)))
    assert labels.tolist() == [0, 0] and matched.tolist() == [-1, -1] and not targets.any()


def test_detector_thresholds():
    labels, _, _ = assign_targets([(0, 0, 10, 5), (0, 0, 10, 4)], [(0, 0, 10, 10)], [3], 0.5, 0.5, False)
    assert labels.tolist() == [3, 0]


def test_structural_bounds(model, image):
    cfg = PipelineConfig(t_rpn=4, t_det=4, k1=30, k2=10, score_thresh=0.0)
    out = infer(model, image, cfg, "x")
    for b, s in zip(out.rpn.pre_nms_boxes, out.rpn.pre_nms_scores):
        assert len(b) <= 30
        assert np.all(np.diff(s) <= 0)
    assert len(out.rpn.boxes) <= 10 and np.all(np.diff(out.rpn.scores) <= 0)
    assert len(out.detections) + len(out.background_preds) <= 10
    for d in out.detections + out.background_preds:
        assert 0 <= d.box.x1 <= d.box.x2 <= 64 and 0 <= d.box.y1 <= d.box.y2 <= 64
        assert abs(sum(d.class_probs) - 1) < 1e-6 and len(d.class_probs) == 4
    assert all(d.label >= 1 for d in out.detections)
    assert all(d.label == 0 for d in out.background_preds)


def test_k2_one_keeps_the_best_proposal(model, image):
    wide = infer(model, image, PipelineConfig(t_rpn=4, t_det=4, k2=50), "x").rpn
    one = infer(model, image, PipelineConfig(t_rpn=4, t_det=4, k2=1), "x").rpn
    assert len(one.boxes) == 1
    assert np.array_equal(one.boxes[0], wide.boxes[0]) and one.scores[0] == wide.scores.max()


def test_equal_logits_select_by_index(image):
    torch.manual_seed(1)
    m = SpikeDetector(ModelConfig(), PipelineConfig()).eval()
    readout = m.rpn_head.layers[-1]
    nn.init.zeros_(readout.weight)
    nn.init.zeros_(readout.bias)
    cfg = PipelineConfig(t_rpn=2, t_det=2, k1=5, k2=3)
    a = infer(m, image, cfg).rpn
    b = infer(m, image, cfg).rpn
    assert np.all(a.scores == 0.5)
    anchors = m.anchors_for(m.backbone(torch.from_numpy(image).permute(2, 0, 1)[None].float()))
    valid = [np.nonzero((np.minimum(an[:, 2], 64) - np.maximum(an[:, 0], 0) >= 1) & (np.minimum(an[:, 3], 64) - np.maximum(an[:, 1], 0) >= 1))[0] for an in anchors]
    first = np.clip(anchors[0][valid[0][:5]], 0, 64)
    assert np.array_equal(a.pre_nms_boxes[0], first)
    assert np.array_equal(a.boxes, b.boxes)


def test_zero_proposals_and_outside_proposals(model, image):
    feats = model.backbone(torch.from_numpy(image).permute(2, 0, 1)[None].float())
    assert model.detector_forward(feats, [np.zeros((0, 4))], FAST, (64, 64)) == [[]]
    outside = model.detector_forward(feats, [np.array([[100.0, 100.0, 120.0, 120.0]])], FAST, (64, 64))
    assert outside == [[]]


def test_block_independence(model, image):
    full = infer(model, image, FAST)
    feats = model.backbone(torch.from_numpy(image).permute(2, 0, 1)[None].float())
    alone = model.rpn_forward(feats, FAST, (64, 64))[0]
    for x, y in zip(alone.pre_nms_boxes + alone.pre_nms_scores, full.rpn.pre_nms_boxes + full.rpn.pre_nms_scores):
        assert np.array_equal(x, y)
    assert np.array_equal(alone.boxes, full.rpn.boxes)


def test_golden_run_and_determinism(model, image):
    a = infer(model, image, FAST, "g")
    b = infer(model, image, FAST, "g")
    assert a.to_json() == b.to_json()
    assert hashlib.sha256(a.to_json().encode()).hexdigest() == GOLDEN["pipeline/untrained-seed0-scene99"]


def test_batched_inference_matches_single(model, image):
    other = generate_scene(SceneSpec(), 5)[0]
    batch = model.infer(torch.from_numpy(np.stack([image, other])).permute(0, 3, 1, 2).float(), FAST, ["a", "b"])
    assert batch[0].to_json() == infer(model, image, FAST, "a").to_json()


def test_inference_json_round_trip(model, image):
    out = infer(model, image, FAST, "rt")
    back = InferenceOutput.from_json(out.to_json())
    assert back.to_json() == out.to_json()
    with pytest.raises(ConfigurationError):
        InferenceOutput.from_dict({"format": "other"})


def test_errors(model, image):
    with pytest.raises(StateError):
        infer(None, image, FAST)
    with pytest.raises(ConfigurationError):
        infer(model, image, PipelineConfig(num_classes=2))


def test_recording_collects_each_block(image):
    torch.manual_seed(0)
    m = SpikeDetector(ModelConfig(), PipelineConfig()).eval()
    rec = m.enable_recording()
    infer(m, image, FAST)
    assert sorted(rec) == ["det", "rpn.P2", "rpn.P3", "rpn.P4"]
    assert set(rec["det"].activity()) == {"encoder", "hidden1"}
    m.disable_recording()
    assert m.recorders is None and m.rpn_head.recorder is None


def test_conventional_twin_runs(image):
    torch.manual_seed(0)
    m = SpikeDetector(ModelConfig(spiking=False), PipelineConfig()).eval()
    out = infer(m, image, FAST)
    assert len(out.detections) + len(out.background_preds) <= FAST.k2
