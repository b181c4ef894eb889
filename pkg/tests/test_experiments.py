import pytest
import torch

from spikedet.errors import ConfigurationError
from spikedet.experiments import evaluate_model, noise_curve, novelty_grid, relative_decrease, run_inference, sweep_t
from spikedet.noise import NoiseSpec
from spikedet.pipeline import ModelConfig, PipelineConfig, SpikeDetector
from spikedet.toyscenes import SceneSpec, build_dataset


@pytest.fixture(scope="module")
def setup():
    torch.manual_seed(0)
    pc = PipelineConfig(t_rpn=3, t_det=4, k1=30, k2=5)
    model = SpikeDetector(ModelConfig(), pc)
    with torch.no_grad():
        # make the untrained heads fire so activity is non-zero
        for conv in model.backbone.pyramid.smooths:
            conv.weight.mul_(20)
    model.eval()
    ds = build_dataset(SceneSpec(unknown_prob=1.0), 1, 4, seed=3)
    return model, pc, ds.val


def test_relative_decrease():
    assert relative_decrease(0.8, 0.8) == 0.0
    assert relative_decrease(0.8, 0.6) == pytest.approx(0.25)
    assert relative_decrease(0.0, 0.0) == 0.0


def test_evaluate_model_bounds(setup):
    model, pc, scenes = setup
    run = evaluate_model(model, scenes, pc)
    assert len(run.outputs) == len(scenes)
    assert 0 <= run.result.map_50 <= 1
    assert run.energy.delta_e > 0


def test_sweep_rpn_energy_is_linear_in_t(setup):
    model, pc, scenes = setup
    points = sweep_t(model, scenes[:2], pc, [1, 2, 4], [2])
    e = [p.e_snn_rpn for p in points]
    assert 0 < e[0] < e[1] < e[2]
    with pytest.raises(ConfigurationError):
        sweep_t(model, scenes, pc, [0], [2])


def test_noise_curve_zero_level_is_clean(setup):
    model, pc, scenes = setup
    points = noise_curve(model, scenes[:2], pc, NoiseSpec("gaussian", seed=1), [0.0, 30.0], ["light"])
    assert [p.kind for p in points] == ["gaussian", "gaussian", "rain"]
    assert points[0].relative_decrease == 0.0
    assert all(p.relative_decrease <= 1 for p in points)


def test_novelty_grid_shrinks_with_threshold(setup):
    model, pc, scenes = setup
    outputs, _ = run_inference(model, [s.image for s in scenes], pc)
    grid = novelty_grid(outputs, scenes, [0.0, 0.1, 1e9])
    counts = [p.candidates for p in grid]
    assert counts == sorted(counts, reverse=True)
    assert grid[-1].candidates == 0 and grid[-1].recall == 0.0
