"""
训练器测试：学习率调度、Adam、两阶段目标、训练循环确定性与断点续训、梯度检查
"""

import json
import os

import numpy as np
import pytest

from common.exceptions import ConfigurationError
from core.losses import Phase
from core.renderer import SceneGradients
from core.storage import load_scene
from core.trainer import (AdamState, TrainConfig, adam_update, compute_objective, grad_check, lr_position,
                          make_gradcheck_problem, run_training)

from conftest import tiny_settings


@pytest.mark.parametrize("iteration, ratio", [(0, 1.0), (50, 0.1), (100, 0.01), (150, 0.01)])
def test_position_learning_rate_decays_exponentially(iteration, ratio):
    cfg = TrainConfig(total_iters=100, phase1_iters=50, lr_position=1e-3)
    assert lr_position(iteration, cfg) == pytest.approx(1e-3 * ratio, rel=1e-12)


def test_invalid_schedules():
    with pytest.raises(ConfigurationError) as exc:
        TrainConfig(total_iters=10, phase1_iters=20)
    assert exc.value.error_code == "BAD_SCHEDULE"
    with pytest.raises(ConfigurationError) as exc:
        TrainConfig(lr_sh=-1.0)
    assert exc.value.error_code == "BAD_LR"


def test_phase_boundary():
    cfg = TrainConfig(total_iters=10, phase1_iters=6)
    assert cfg.phase(5) is Phase.PHOTOMETRIC
    assert cfg.phase(6) is Phase.SLOT_AWARE


@pytest.mark.parametrize("mode, alpha, beta", [('full', 0.8, 0.8), ('teacher-only', 1.0, 1.0),
                                               ('student-only', 0.0, 0.0)])
def test_ablation_modes_override_mixing(mode, alpha, beta):
    sw = TrainConfig(slot_mode=mode).effective_slot_weights()
    assert (sw.alpha, sw.beta) == (alpha, beta)


def _scene_and_grads():
    scene, _, _ = make_gradcheck_problem(count=5)
    grads = SceneGradients.zeros_like(scene)
    rng = np.random.default_rng(0)
    for arr in grads.as_dict().values():
        arr[...] = rng.normal(size=arr.shape)
    return scene, grads


def test_zero_learning_rate_leaves_scene_bitwise_unchanged():
    scene, grads = _scene_and_grads()
    before = scene.copy()
    cfg = TrainConfig(total_iters=10, phase1_iters=5, lr_position=0.0, lr_sh=0.0, lr_opacity=0.0,
                      lr_scales=0.0, lr_rotation=0.0)
    state = AdamState.zeros(scene)
    adam_update(scene, grads, state, cfg, 0)
    for name, arr in scene.parameters().items():
        assert np.array_equal(arr, before.parameters()[name])
    assert state.step == 1
    assert np.any(state.m['means'])


def test_first_adam_step_moves_by_learning_rate():
    scene, grads = _scene_and_grads()
    before = scene.copy()
    cfg = TrainConfig(total_iters=10, phase1_iters=5, lr_opacity=0.05)
    adam_update(scene, grads, AdamState.zeros(scene), cfg, 0)
    step = scene.logit_opacities - before.logit_opacities
    np.testing.assert_allclose(step, -0.05 * np.sign(grads.logit_opacities), rtol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(scene.quats, axis=1), 1.0)


def test_non_finite_gradients_are_zeroed():
    scene, grads = _scene_and_grads()
    grads.sh_coeffs[0, 0, 0] = np.nan
    before = scene.sh_coeffs[0, 0, 0]
    adam_update(scene, grads, AdamState.zeros(scene), TrainConfig(total_iters=10, phase1_iters=5), 0)
    assert np.all(np.isfinite(scene.sh_coeffs))
    assert scene.sh_coeffs[0, 0, 0] == before


def test_photometric_phase_only_uses_rgb():
    scene, batch, ctx = make_gradcheck_problem(count=10)
    obj = compute_objective(scene, batch, ctx, Phase.PHOTOMETRIC)
    b = obj.breakdown
    assert b.rgb > 0.0
    assert (b.align, b.ipm, b.cam) == (0.0, 0.0, 0.0)
    assert b.total == pytest.approx(b.rgb)
    assert obj.rendered_ipm is None


def test_slot_aware_phase_adds_slot_terms():
    scene, batch, ctx = make_gradcheck_problem(count=10)
    obj = compute_objective(scene, batch, ctx, Phase.SLOT_AWARE)
    b = obj.breakdown
    assert b.ipm > 0.0 and b.cam > 0.0 and b.align >= 0.0
    lw = ctx.config.loss_weights
    expected = b.rgb + lw.lambda_align * b.align + lw.lambda_ipm * b.ipm + lw.lambda_cam * b.cam
    assert b.total == pytest.approx(expected)
    assert obj.weights is not None and obj.rendered_ipm.shape == (64, 64, 3)


@pytest.mark.parametrize("mode", ['off', 'direct-ipm-l1', 'feature-only'])
def test_ablation_objectives(mode):
    scene, batch, ctx = make_gradcheck_problem(count=10, slot_mode=mode)
    b = compute_objective(scene, batch, ctx, Phase.SLOT_AWARE).breakdown
    if mode == 'off':
        assert b.total == pytest.approx(b.rgb)
    elif mode == 'direct-ipm-l1':
        assert b.ipm > 0.0 and b.align == 0.0 and b.cam == 0.0
    else:
        assert b.feature >= 0.0 and b.ipm == 0.0


def test_gradient_check_passes_on_small_problem():
    scene, batch, ctx = make_gradcheck_problem(count=20)
    report = grad_check(scene, batch, ctx, components=('rgb', 'ipm', 'cam'), groups=('means', 'sh_coeffs'),
                        probes=4)
    assert len(report['rows']) == 6
    assert report['sg_contract']
    for row in report['rows']:
        assert row['max_rel_error'] < row['tolerance'], row


def _train(settings, dataset, out_dir, resume=None):
    return run_training(settings, dataset, str(out_dir), resume=resume)


def test_training_is_deterministic_and_writes_outputs(tmp_path, synthetic_dataset):
    settings = tiny_settings()
    a = _train(settings, synthetic_dataset, tmp_path / 'a')
    b = _train(settings, synthetic_dataset, tmp_path / 'b')
    for name, arr in a.scene.parameters().items():
        assert np.array_equal(arr, b.scene.parameters()[name])
    assert a.scene.iteration == 4

    out = tmp_path / 'a'
    for name in ('metrics.jsonl', 'scene.pgsc', 'state.npz'):
        assert os.path.exists(out / name)
    with open(out / 'metrics.jsonl', encoding='utf-8') as fh:
        records = [json.loads(line) for line in fh]
    train = [r for r in records if r['type'] == 'train']
    assert [r['iteration'] for r in train] == [1, 2, 3, 4]
    assert [r['phase'] for r in train] == ['photometric', 'photometric', 'slot-aware', 'slot-aware']
    assert all(np.isfinite(r['total']) for r in train)
    assert records[-1]['type'] == 'eval'
    assert set(a.evaluation) >= {'psnr', 'ssim', 'precision', 'recall', 'per_frame'}

    saved = load_scene(str(out / 'scene.pgsc'))
    np.testing.assert_allclose(saved.means, a.scene.means.astype(np.float32))


def test_resume_reproduces_uninterrupted_run(tmp_path, synthetic_dataset):
    settings = tiny_settings(trainer={'checkpoint_every': 2})
    full = _train(settings, synthetic_dataset, tmp_path / 'full')
    ckpt = tmp_path / 'full' / 'checkpoints' / '000002' / 'state.npz'
    assert os.path.exists(ckpt)
    resumed = _train(settings, synthetic_dataset, tmp_path / 'resumed', resume=str(ckpt))
    assert resumed.scene.iteration == 4
    for name, arr in full.scene.parameters().items():
        assert np.array_equal(arr, resumed.scene.parameters()[name]), name
