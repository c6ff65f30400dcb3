import numpy as np
import pandas as pd
import pytest

from alignment.landmark_alignment import LandmarkAligner
from core_engine.config import FitConfig, LossWeights, StagePlanConfig
from core_engine.errors import FitDivergenceError, LossError
from evaluation.fixtures import fixture_config, make_fixture, offset_init, project_landmarks, smooth_light
from fitting.adam import AdamState, adam_step
from fitting.pipeline import StageFitter, fit, iteration_seed, loss_rose
from fitting.schedule import round_of, schedule_weights
from models.scene import SceneContext, SceneParams


def test_consistency_weights_halve_each_round():
    weights = FitConfig().weights
    assert round_of(49, weights) == 0 and round_of(120, weights) == 2
    assert schedule_weights(weights, 0) == weights
    relaxed = schedule_weights(weights, 1)
    assert (relaxed.w_c_diffuse, relaxed.w_c_fine) == (0.1, 0.5)
    third = schedule_weights(weights, 3)
    assert third.w_c_diffuse == pytest.approx(0.025)
    assert third.w_c_fine == pytest.approx(0.125)
    assert third.w_s == weights.w_s and third.w_c_specular == weights.w_c_specular
    with pytest.raises(ValueError):
        schedule_weights(weights, -1)


def test_first_adam_step_moves_by_the_learning_rate():
    state = AdamState.create({"x": np.zeros(3)})
    updated = adam_step(state, {"x": np.zeros(3)}, {"x": np.array([2.0, -0.5, 0.0])}, 0.1)
    np.testing.assert_allclose(updated["x"], [-0.1, 0.1, 0.0], atol=1e-6)
    assert state.step == 1


def test_adam_minimises_a_quadratic():
    target = {"a": np.array([1.0, -2.0]), "b": np.array([[0.5]])}
    params = {"a": np.zeros(2), "b": np.zeros((1, 1))}
    state = AdamState.create(params)
    for _ in range(500):
        grads = {name: 2.0 * (params[name] - target[name]) for name in params}
        params = adam_step(state, params, grads, {"a": 0.05, "b": 0.02})
    np.testing.assert_allclose(params["a"], target["a"], atol=1e-2)
    np.testing.assert_allclose(params["b"], target["b"], atol=1e-2)
    with pytest.raises(ValueError):
        adam_step(state, params, {"a": np.zeros(3), "b": np.zeros((1, 1))}, 0.1)


def test_iteration_seeds_differ_across_stages():
    seeds = {iteration_seed(0, stage, i) for stage in ("coarse", "medium", "fine") for i in range(200)}
    assert len(seeds) == 600
    assert iteration_seed(5, "coarse", 0) == 5


def test_alignment_recovers_the_camera_centre(face_bundle, face_camera):
    truth = SceneParams.initial(face_bundle, trans=(3.0, -2.0, -480.0))
    landmarks = project_landmarks(face_bundle, truth, face_camera)
    aligner = LandmarkAligner(face_camera)
    np.testing.assert_allclose(aligner.align_translation(face_bundle, landmarks), truth.trans, atol=1e-6)
    assert aligner.residual(face_bundle, landmarks, truth.trans) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(LossError):
        aligner.align_translation(face_bundle, landmarks[:5])


def test_initial_light_matches_image_brightness(face_bundle, face_camera):
    aligner = LandmarkAligner(face_camera)
    image = np.zeros((32, 32, 3))
    image[8:24, 8:24] = 0.3
    sh = aligner.initial_light(face_bundle, image)
    albedo = np.clip(face_bundle.mean_diffuse, 1e-3, 1.0).mean()
    np.testing.assert_allclose(sh[:, 0] * 0.5 / np.sqrt(np.pi), 0.3 / albedo)
    assert np.all(sh[:, 1:] == 0.0)


def test_step_loss_returns_trainable_gradients(face_bundle, face_camera):
    config = FitConfig(camera=face_camera, render={"spp": 1})
    image = np.full((32, 32, 3), 0.4)
    sh = LandmarkAligner(face_camera).initial_light(face_bundle, image)
    params = SceneParams.initial(face_bundle, trans=(0.0, 0.0, -480.0), sh=sh)
    landmarks = project_landmarks(face_bundle, params, face_camera)
    fitter = StageFitter(SceneContext.build(face_bundle, face_camera, 0.5), config, image, landmarks)
    plan = StagePlanConfig(stage="coarse", iterations=1)
    loss, train, grads, weights = fitter.step_loss(plan, params, 0)
    assert set(grads) == set(plan.trainable)
    assert all(grads[name].shape == train[name].shape for name in grads)
    assert np.any(grads["sh"] != 0.0)
    assert weights == config.weights


def test_non_finite_target_is_reported_as_divergence(face_bundle, face_camera):
    config = FitConfig(camera=face_camera, render={"spp": 1}, weights=LossWeights(w_lm=0.0))
    params = SceneParams.initial(face_bundle, trans=(0.0, 0.0, -480.0))
    fitter = StageFitter(SceneContext.build(face_bundle, face_camera, 0.5), config, np.full((32, 32, 3), np.nan),
                         None)
    with pytest.raises(FitDivergenceError) as info:
        fitter.step_loss(StagePlanConfig(stage="coarse", iterations=1), params, 0)
    assert info.value.stage == "coarse"


@pytest.mark.slow
def test_short_fit_reduces_the_loss():
    config = fixture_config(width=48, spp=2)
    fixture = make_fixture("face", seed=3, config=config, target_spp=16)
    plans = [
        StagePlanConfig(stage="coarse", iterations=12, lr=0.02, lr_overrides={"trans": 0.5}),
        StagePlanConfig(stage="medium", iterations=4),
        StagePlanConfig(stage="fine", iterations=4),
    ]
    run_config = config.model_copy(update={"stages": plans, "quiet": True})
    result = fit(fixture.image, fixture.landmarks, fixture.bundle, run_config, init=offset_init(fixture),
                 progress=False)
    assert list(result.stages) == ["coarse", "medium", "fine"]
    assert len(result.log) == 20
    coarse = result.log[result.log["stage"] == "coarse"]["total"].to_numpy()
    assert coarse[-3:].mean() < coarse[:3].mean()
    assert np.isfinite(result.final_render).all()
    result.params.validate(fixture.bundle)
    assert result.config_hash


@pytest.mark.slow
def test_landmark_initialisation_is_used_without_init():
    config = fixture_config(width=32, spp=1)
    fixture = make_fixture("face", seed=4, config=config, target_spp=4, detail=False)
    run_config = config.model_copy(update={"stages": [StagePlanConfig(stage="coarse", iterations=2)]})
    result = fit(fixture.image, fixture.landmarks, fixture.bundle, run_config, progress=False)
    assert abs(result.initial.trans[2] - fixture.params.trans[2]) < 0.2 * abs(fixture.params.trans[2])


def test_loss_rose_compares_window_means():
    assert not loss_rose([5.0] * 15)
    assert not loss_rose(np.linspace(10.0, 1.0, 40))
    assert loss_rose(np.concatenate([np.full(10, 1.0), np.full(10, 1.5)]))
    assert not loss_rose(np.concatenate([np.full(10, 1.0), np.full(10, 1.005)]))
    assert loss_rose([1.0, 1.0, 2.0, 2.0], window=2)


@pytest.fixture
def tiny_fit(face_bundle, face_camera):
    plans = [StagePlanConfig(stage=stage, iterations=2) for stage in ("coarse", "medium", "fine")]
    config = FitConfig(camera=face_camera, render={"spp": 1, "shadows": False}, stages=plans, quiet=True)
    init = SceneParams.initial(face_bundle, trans=(0.0, 0.0, -480.0), sh=smooth_light())
    landmarks = project_landmarks(face_bundle, init, face_camera)
    image = np.full((32, 32, 3), 0.4)

    def run():
        return fit(image, landmarks, face_bundle, config, init=init, progress=False)

    return run


def test_fit_is_deterministic(tiny_fit):
    first, second = tiny_fit(), tiny_fit()
    for name, value in first.params.blocks().items():
        np.testing.assert_array_equal(value, second.params.blocks()[name])
    pd.testing.assert_frame_equal(first.log, second.log)
    assert first.config_hash == second.config_hash


def test_stages_leave_frozen_blocks_untouched(tiny_fit):
    result = tiny_fit()
    previous = {"medium": "coarse", "fine": "medium"}
    for stage, before in previous.items():
        blocks = result.stages[stage].params.blocks()
        earlier = result.stages[before].params.blocks()
        for name in set(blocks) - set(StagePlanConfig(stage=stage).trainable):
            np.testing.assert_array_equal(blocks[name], earlier[name], err_msg=f"{stage} moved {name}")
    assert not np.array_equal(result.stages["coarse"].params.sh, result.initial.sh)
