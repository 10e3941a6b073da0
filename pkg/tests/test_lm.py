import numpy as np
import pytest

from magpose.dipole import DEFAULT_MAGNET, MagnetPose, field_componentwise
from magpose.errors import ContractError
from magpose.evalbench import pose_errors
from magpose.lm_solver import (
    BIAS1,
    BIAS2,
    FailureReason,
    InitialBias,
    LmConfig,
    batch_solve,
    lm_step,
    residuals,
    solve,
)
from magpose.sensor_array import DEFAULT_GEOMETRY, ArrayReading, add_noise, simulate_reading

G = DEFAULT_GEOMETRY


def reading_for(pose, sigma=0.0, seed=0, saturate=False):
    r = simulate_reading(pose, DEFAULT_MAGNET, G, saturate=saturate)
    return add_noise(r, sigma, seed) if sigma else r


def pose_grid():
    """5 x 5 x 5 positions inside the workspace, headings cycling through a fixed set."""
    heads = np.array([[0, 0, 1], [1, 0, 0], [0, 1, 0], [0.6, 0, 0.8], [0, -0.6, 0.8], [0.48, 0.6, 0.64]])
    out = []
    k = 0
    for x in np.linspace(-0.04, 0.04, 5):
        for y in np.linspace(-0.04, 0.04, 5):
            for z in np.linspace(0.05, 0.12, 5):
                out.append(MagnetPose.normalized([x, y, z], heads[k % len(heads)]))
                k += 1
    return out


def test_residual_zero_at_truth():
    pose = MagnetPose([0.01, 0.02, 0.07], [0.0, 0.6, 0.8])
    r = residuals(pose.as_vector(), reading_for(pose))
    assert r.shape == (48,)
    assert np.max(np.abs(r)) < 1e-18


def test_residual_doubles_with_heading():
    # magnet at the origin pointing +z; sensors in the plane z = 0.06 see H.X = 0
    pose = MagnetPose([0, 0, 0.06], [0, 0, 1])
    zero = ArrayReading(np.zeros((16, 3)))
    r1 = residuals(np.r_[pose.position, pose.heading], zero)
    r2 = residuals(np.r_[pose.position, 2 * pose.heading], zero)
    np.testing.assert_allclose(r2, 2 * r1, rtol=1e-15)


def test_residual_matches_elementwise_recompute():
    rng = np.random.default_rng(1)
    for _ in range(10):
        pose = MagnetPose.normalized(rng.uniform([-0.05, -0.05, 0.03], [0.05, 0.05, 0.13]), rng.normal(size=3))
        meas = ArrayReading(rng.normal(scale=1e-4, size=(16, 3)))
        got = residuals(pose.as_vector(), meas)
        ref = np.concatenate([field_componentwise(pose, DEFAULT_MAGNET, G.positions[k]) - meas.flux[k] for k in range(16)])
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-22)


def test_bias1_self_consistency_single():
    pose = MagnetPose([0.01, -0.015, 0.08], [0.36, 0.48, 0.8])
    res = solve(reading_for(pose), BIAS1.apply(pose))
    assert res.converged and res.failure_reason is FailureReason.NONE
    e = pose_errors(res.pose, pose)
    assert e.position_error * 1e3 < 1e-6
    assert e.orientation_error < 1e-8


def test_bias1_self_consistency_grid():
    truths = pose_grid()
    stats = batch_solve(truths, [reading_for(p) for p in truths], BIAS1)
    assert stats.count == 125 and stats.failure_rate == 0.0
    assert stats.position_mm_mean < 1e-6
    assert stats.angle_deg_mean < 1e-6


def test_noise_at_80mm_median_under_5mm():
    rng = np.random.default_rng(5)
    errs = []
    for t in range(100):
        pose = MagnetPose.normalized(np.r_[rng.uniform(-0.03, 0.03, 2), 0.08], rng.normal(size=3))
        res = solve(reading_for(pose, 1e-6, seed=t), BIAS1.apply(pose))
        errs.append(pose_errors(res.pose, pose).position_error * 1e3)
    assert np.median(errs) < 5.0


def test_totality_never_raises():
    rng = np.random.default_rng(6)
    allowed = {FailureReason.MAX_ITERS, FailureReason.DIVERGED, FailureReason.OUT_OF_BOUNDS, FailureReason.NONE, FailureReason.SINGULAR}
    for i in range(20):
        pose = MagnetPose.normalized(np.r_[rng.uniform(-0.05, 0.05, 2), 0.04], rng.normal(size=3))
        reading = reading_for(pose, 5e-5, seed=i, saturate=True)
        far = MagnetPose.normalized(pose.position + [0.8, -0.9, 1.0], -pose.heading)
        res = solve(reading, far, LmConfig(max_iterations=30))
        assert res.failure_reason in allowed and not res.converged
        assert res.failure_reason is FailureReason.OUT_OF_BOUNDS
        res = solve(reading, BIAS2.apply(pose), LmConfig(max_iterations=30))
        assert res.failure_reason in allowed
        assert res.converged == (res.failure_reason is FailureReason.NONE)


def test_max_iters_reported():
    pose = MagnetPose([0.0, 0.0, 0.08], [0, 0, 1])
    res = solve(reading_for(pose, 1e-6), BIAS2.apply(pose), LmConfig(max_iterations=1))
    assert res.failure_reason is FailureReason.MAX_ITERS and res.iterations == 1


def test_accepted_costs_never_increase():
    rng = np.random.default_rng(7)
    for i in range(20):
        pose = MagnetPose.normalized(np.r_[rng.uniform(-0.04, 0.04, 2), rng.uniform(0.04, 0.12)], rng.normal(size=3))
        res = solve(reading_for(pose, 1e-6, seed=i), BIAS2.apply(pose))
        h = np.array(res.cost_history)
        assert np.all(np.diff(h) < 0)
        assert res.final_cost == h[-1]


def test_damping_limits_on_linear_problem():
    rng = np.random.default_rng(8)
    jac = rng.normal(size=(12, 4)) * np.array([1.0, 10.0, 0.1, 3.0])
    res = rng.normal(size=12)
    gauss_newton = -np.linalg.solve(jac.T @ jac, jac.T @ res)
    np.testing.assert_allclose(lm_step(jac, res, 1e-12), gauss_newton, rtol=1e-8)
    lam = 1e12
    scaled_gradient = -(jac.T @ res) / np.diag(jac.T @ jac)
    np.testing.assert_allclose(lm_step(jac, res, lam) * lam, scaled_gradient, rtol=1e-6)
    # the stiff row keeps the heading block orthogonal to the given direction
    jac6 = rng.normal(size=(48, 6))
    h = np.array([0.0, 0.6, 0.8])
    d = lm_step(jac6, rng.normal(size=48), 1e-3, tangent_to=h)
    assert abs(d[3:] @ h) < 1e-3 * np.linalg.norm(d[3:])


def test_solve_is_pure():
    pose = MagnetPose([0.02, 0.01, 0.06], [0.6, 0.0, 0.8])
    reading = reading_for(pose, 1e-6, seed=3)
    a = solve(reading, BIAS2.apply(pose))
    b = solve(reading, BIAS2.apply(pose))
    assert a.iterations == b.iterations and a.cost_history == b.cost_history
    assert np.array_equal(a.pose.position, b.pose.position) and np.array_equal(a.pose.heading, b.pose.heading)


def test_parameter_scaling_invariance():
    pose = MagnetPose([-0.01, 0.02, 0.09], [0.0, 0.6, 0.8])
    reading = reading_for(pose, 1e-6, seed=9)
    metres = solve(reading, BIAS1.apply(pose), LmConfig(position_scale=1.0))
    decim = solve(reading, BIAS1.apply(pose), LmConfig(position_scale=0.1))
    millim = solve(reading, BIAS1.apply(pose), LmConfig(position_scale=1e-3))
    for r in (metres, millim):
        assert r.converged
        np.testing.assert_allclose(r.pose.position, decim.pose.position, atol=1e-7)
        np.testing.assert_allclose(r.pose.heading, decim.pose.heading, atol=1e-6)


def test_empty_batch():
    stats = batch_solve([], [], BIAS1)
    assert stats.count == 0 and stats.failure_rate is None and stats.position_mm_mean is None


def test_contracts():
    with pytest.raises(ContractError):
        LmConfig(damping_up=0.5)
    with pytest.raises(ContractError):
        LmConfig(max_iterations=0)
    with pytest.raises(ContractError):
        InitialBias.from_mm([1, 2, 3])
    with pytest.raises(ContractError):
        batch_solve([MagnetPose([0, 0, 0.08], [0, 0, 1])], [], BIAS1)
    with pytest.raises(ContractError):
        solve(ArrayReading(np.zeros((4, 3))), MagnetPose([0, 0, 0.08], [0, 0, 1]))


def test_bias_vectors():
    np.testing.assert_allclose(BIAS1.position_offset, [0.003, 0.003, -0.003])
    np.testing.assert_allclose(BIAS2.heading_offset, [0.3, 0.3, -0.3])
    shifted = BIAS1.apply(MagnetPose([0, 0, 0.08], [0, 0, 1]))
    assert abs(np.linalg.norm(shifted.heading) - 1) < 1e-15
