import json

import numpy as np
import pytest

from core_engine.autodiff import tape as ad
from core_engine.autodiff.gradcheck import DISCONTINUOUS, FAIL, PASS, check_gradients, sample_coordinates


def smooth_loss(v, tape):
    return ad.sum_(ad.sin(v["x"]) * v["y"] ** 2) + ad.sum_(ad.exp(v["x"] * 0.1))


def test_smooth_function_passes(rng):
    params = {"x": rng.normal(size=5), "y": rng.normal(size=5)}
    report = check_gradients(smooth_loss, params, n_coords=10)
    assert report.passed
    assert len(report.table) == 10
    assert set(report.table["verdict"]) == {PASS}
    assert report.max_rel_error < 1e-6


def test_wrong_gradient_fails():
    def broken(v, tape):
        x = v["x"]
        # the vjp of this custom op is off by a factor of two
        out = ad._emit("double_sin", np.sin(x.value), (x,), lambda g: (2.0 * g * np.cos(x.value),))
        return ad.sum_(out)

    report = check_gradients(broken, {"x": np.array([0.3, 0.7])})
    assert not report.passed
    assert set(report.table["verdict"]) == {FAIL}


def test_kink_inside_the_stencil_is_flagged_discontinuous():
    report = check_gradients(lambda v, t: ad.sum_(ad.abs_(v["x"])), {"x": np.array([5e-5])}, coords=[("x", 0)])
    row = report.table.iloc[0]
    assert row["verdict"] == DISCONTINUOUS
    assert row["numeric"] == pytest.approx(0.5)
    assert report.passed
    assert len(report.checked) == 0


def test_stochastic_loss_with_common_random_numbers(rng):
    def noisy(v, tape):
        noise = np.random.default_rng(tape.seed).normal(size=4)
        return ad.sum_(ad.square(v["x"] - noise))

    report = check_gradients(noisy, {"x": rng.normal(size=4)}, seed=11)
    assert report.passed


def test_sampled_coordinates_are_distinct_and_in_range(rng):
    params = {"a": np.zeros(3), "b": np.zeros((2, 2))}
    coords = sample_coordinates(params, 6, rng)
    assert len(set(coords)) == 6
    assert all(0 <= index < params[block].size for block, index in coords)
    assert len(sample_coordinates(params, 50, rng)) == 7


def test_report_serialises(rng):
    report = check_gradients(smooth_loss, {"x": rng.normal(size=2), "y": rng.normal(size=2)}, n_coords=3)
    data = json.loads(report.to_json())
    assert data["passed"] is True
    assert len(data["coordinates"]) == 3


def test_step_must_be_positive():
    with pytest.raises(ValueError):
        check_gradients(smooth_loss, {"x": np.ones(1), "y": np.ones(1)}, step=0.0)
