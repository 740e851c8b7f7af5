import json
import math

import numpy as np
import pytest

from se2conv.audit import (AuditReport, aligned_prediction_stats, disk_mask, equivariance_error,
                           orientation_index, polar_response, response_variance, rotate_input,
                           scalar_prediction, shift_twist)
from se2conv.exceptions import ConfigurationError
from se2conv.models import LayerSpec, ModelConfig, build_model, preset
from se2conv.training import synth_sample

# frozen after calibration runs (see the decisions ledger for the measurements)
ROUND_TRIP_BLUR = 0.03      # mean abs error of +pi/4 then -pi/4 on synthetic patches
FINE_ANGLE_MEAN_ERROR = 0.05  # N=8, pi/4, lifting + group prefix, mean abs


def _pair_model(N=8, seed=0):
    cfg = ModelConfig("custom", N, [LayerSpec("lifting", 4), LayerSpec("group", 4),
                                    LayerSpec("projection"), LayerSpec("head", 1)], (32, 32, 1))
    return build_model(cfg, seed)


def _randomize_head(m, seed=1):
    m.head.W.value = np.random.default_rng(seed).standard_normal(
        m.head.W.value.shape).astype(np.float32)
    return m


# --------------------------------------------------------------------------
# input rotation
# --------------------------------------------------------------------------

def test_rotate_zero_is_identity(rng):
    x = rng.uniform(size=(9, 9, 2))
    y = rotate_input(x, 0.0)
    np.testing.assert_array_equal(y, x)
    assert y is not x


def test_four_quarter_turns_restore_exactly(rng):
    x = rng.uniform(size=(2, 10, 10, 3)).astype(np.float32)
    y = x
    for _ in range(4):
        y = rotate_input(y, math.pi / 2)
    np.testing.assert_array_equal(y, x)


def test_quarter_turn_preserves_intensity_and_matches_rot90(rng):
    x = rng.uniform(size=(7, 7, 1))
    y = rotate_input(x, math.pi / 2)
    assert y.sum() == pytest.approx(x.sum(), rel=1e-12)
    np.testing.assert_array_equal(y, np.rot90(x, -1))


def test_fine_rotation_direction_matches_quarter_turn(rng):
    # an off-grid angle a hair away from pi/2 must land close to the exact result
    x = np.zeros((21, 21, 1))
    x[3:6, 8:13] = 1.0
    a = rotate_input(x, math.pi / 2 + 1e-6)
    np.testing.assert_allclose(a, rotate_input(x, math.pi / 2), atol=1e-4)


def test_non_square_rejected():
    with pytest.raises(ConfigurationError):
        rotate_input(np.zeros((4, 5, 1)), 0.3)


def test_round_trip_blur_is_bounded():
    errs = []
    for i in range(20):
        img = synth_sample(0, "test", i, 32, i % 2)
        back = rotate_input(rotate_input(img, math.pi / 4), -math.pi / 4)
        errs.append(np.abs(back - img)[8:24, 8:24].mean())
    assert 0 < np.mean(errs) <= ROUND_TRIP_BLUR


def test_shift_twist_quarter_turn(rng):
    F = rng.standard_normal((1, 8, 5, 5, 2))
    np.testing.assert_array_equal(shift_twist(F, math.pi / 2, 8),
                                  np.roll(np.rot90(F, -1, axes=(2, 3)), 2, axis=1))


def test_orientation_index():
    assert orientation_index(math.pi / 2, 8) == 2
    assert orientation_index(-math.pi / 4, 8) == 7
    with pytest.raises(ConfigurationError):
        orientation_index(math.pi / 3, 8)


def test_disk_mask():
    assert disk_mask(5, 5).sum() == 21


# --------------------------------------------------------------------------
# polar responses
# --------------------------------------------------------------------------

def test_constant_image_gives_constant_vector():
    m = _randomize_head(_pair_model())
    v = polar_response(m, np.full((32, 32, 1), 0.4, np.float32), steps=16)
    assert v.shape == (16,)
    assert np.ptp(v) <= 1e-6


@pytest.mark.parametrize("task", ["mitosis", "synth-cls"])
def test_N4_polar_has_quarter_turn_period(rng, task):
    m = _randomize_head(build_model(preset(task, 4), 0))
    shape = m.config.input_shape
    v = polar_response(m, rng.uniform(size=shape).astype(np.float32), steps=16)
    for off in range(4):
        assert np.ptp(v[off::4]) <= 1e-5


def test_nuclei_statistic_is_mean_boundary_probability(rng):
    m = _randomize_head(build_model(preset("nuclei", 4), 0))
    x = rng.uniform(size=(60, 60, 3)).astype(np.float32)
    v = polar_response(m, x, steps=4)
    pred = m.forward(x[None])
    assert v[0] == pytest.approx(float(pred[..., 2].mean()), rel=1e-6)
    assert np.ptp(v) <= 1e-5


def test_scalar_prediction_modes():
    pred = np.arange(24.0).reshape(2, 2, 2, 3)
    np.testing.assert_array_equal(scalar_prediction(pred, "boundary"), [6.5, 18.5])
    np.testing.assert_array_equal(scalar_prediction(pred, "mean"), [5.5, 17.5])
    np.testing.assert_array_equal(scalar_prediction(np.ones((3, 1, 1, 1)), "auto"), [1, 1, 1])
    with pytest.raises(ConfigurationError):
        scalar_prediction(pred, "median")


def test_polar_steps_validated():
    with pytest.raises(ConfigurationError):
        polar_response(_pair_model(), np.zeros((32, 32, 1)), steps=0)


# --------------------------------------------------------------------------
# equivariance errors
# --------------------------------------------------------------------------

@pytest.mark.parametrize("L", [1, 2, 3, 4, None])
def test_zero_angle_error_is_exactly_zero(rng, L):
    m = build_model(preset("mitosis", 8), 0)
    assert equivariance_error(m, rng.uniform(size=(68, 68, 3)), 0.0, 8, L) == (0.0, 0.0)


def test_N4_lifting_prefix_quarter_turn(rng):
    m = build_model(preset("synth-cls", 4), 0)
    x = rng.uniform(size=(32, 32, 1)).astype(np.float32)
    assert equivariance_error(m, x, math.pi / 2, 4, 1)[0] <= 1e-5


def test_pooling_prefix_exact_at_quarter_turn(rng):
    m = build_model(preset("mitosis", 8), 0)
    x = rng.uniform(size=(68, 68, 3)).astype(np.float32)
    for L in (1, 2, 3):
        assert equivariance_error(m, x, math.pi / 2, 8, L)[0] <= 1e-5


def test_fine_angle_error_within_calibrated_bound():
    errs = []
    for seed in range(3):
        m = _pair_model(seed=seed)
        img = synth_sample(0, "test", seed, 32, 1)
        mx, mean = equivariance_error(m, img, math.pi / 4, 8, 2)
        assert math.isfinite(mx) and mx >= mean > 0
        errs.append(mean)
    assert max(errs) <= FINE_ANGLE_MEAN_ERROR


@pytest.mark.xfail(strict=True, reason="the exact 90-degree error is float round-off, so five "
                                       "times it is far below interpolation error at pi/4")
def test_fine_angle_error_within_five_times_quarter_turn_error():
    m = _pair_model()
    img = synth_sample(0, "test", 0, 32, 1)
    base = equivariance_error(m, img, math.pi / 2, 8, 2)[1]
    assert equivariance_error(m, img, math.pi / 4, 8, 2)[1] <= 5 * base


def test_off_grid_angle_rejected(rng):
    m = _pair_model(N=4)
    with pytest.raises(ConfigurationError, match="grid"):
        equivariance_error(m, rng.uniform(size=(32, 32, 1)), math.pi / 4, 4, 1)


def test_off_grid_angle_with_pooling_rejected(rng):
    m = build_model(preset("mitosis", 8))
    with pytest.raises(ConfigurationError, match="pooling"):
        equivariance_error(m, rng.uniform(size=(68, 68, 3)), math.pi / 4, 8, 1)


# --------------------------------------------------------------------------
# aligned prediction statistics
# --------------------------------------------------------------------------

def test_single_step_std_is_exactly_zero(rng):
    m = build_model(preset("nuclei", 8), 0)
    mean, std = aligned_prediction_stats(m, rng.uniform(size=(60, 60, 3)), steps=1)
    assert not std.any()
    assert mean.shape == (20, 20, 3)


def test_identity_only_reproduces_raw_prediction(rng):
    m = _randomize_head(build_model(preset("nuclei", 4), 0))
    x = rng.uniform(size=(60, 60, 3)).astype(np.float32)
    mean, _ = aligned_prediction_stats(m, x, steps=1)
    np.testing.assert_array_equal(mean, m.forward(x[None])[0].astype(np.float64))


def test_quarter_turn_steps_give_zero_std_for_equivariant_model(rng):
    m = _randomize_head(build_model(preset("nuclei", 4), 0))
    _, std = aligned_prediction_stats(m, rng.uniform(size=(60, 60, 3)).astype(np.float32), 4)
    assert std.max() <= 1e-5


def test_baseline_quarter_turn_std_is_positive(rng):
    m = _randomize_head(build_model(preset("nuclei", 1), 0))
    _, std = aligned_prediction_stats(m, rng.uniform(size=(60, 60, 3)).astype(np.float32), 4)
    assert std.max() > 1e-4


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def test_report_exports(tmp_path):
    rep = AuditReport(steps=4)
    rep.add_polar("s0", [0.1, 0.2, 0.3, 0.4])
    rep.add_polar("s1", [0.5, 0.5, 0.5, 0.5])
    rep.add_equivariance(1, math.pi / 2, 1e-7, 1e-9)
    assert rep.variance["s1"] == 0.0
    assert rep.variance["s0"] == pytest.approx(response_variance([0.1, 0.2, 0.3, 0.4]))
    rep.write_polar_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "sample_id,k,angle_rad,prediction"
    assert lines[2] == "s0,1,1.5708,0.2" and len(lines) == 9
    d = json.loads(rep.to_json())
    assert d["equivariance"][0]["layer"] == 1
    assert d["mean_variance"] == pytest.approx(rep.mean_variance)


def test_report_rejects_wrong_length():
    with pytest.raises(ConfigurationError):
        AuditReport(steps=16).add_polar(0, [0.0] * 15)
