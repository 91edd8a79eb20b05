import numpy as np
import pytest

from orbitprivacy.kalman import GaussianBelief, posterior_covariance
from orbitprivacy.orbital import GravityModel
from orbitprivacy.scenario import build_scenario_window, load_scenario
from orbitprivacy.window import (
    EnKFSpec,
    OffGridError,
    UKFSpec,
    WindowConfig,
    WindowError,
    build_window,
    make_mask,
    sensor_noise_block,
)


def _double_integrator(dt):
    # state (p, v) in 1-d; exact step for constant velocity
    F = np.array([[1.0, dt], [0.0, 1.0]])

    def traj(states, steps):
        out = []
        x = states.copy()
        k = 0
        for s in steps:
            while k < s:
                x = F @ x
                k += 1
            out.append(x.copy())
        return np.array(out)

    return F, traj


@pytest.fixture(scope="module")
def iss_window():
    s = load_scenario("iss_1orbit")
    return s, build_scenario_window(s)


def test_config_rejects_indivisible_horizon():
    with pytest.raises(WindowError):
        WindowConfig(horizon=150.0, dt=1.0, save_every=100)


def test_config_off_grid_time_lists_neighbours():
    with pytest.raises(OffGridError) as exc:
        WindowConfig(horizon=100.0, dt=1.0, save_every=100, meas_times=(10.5,), meas_components=((0,),))
    assert exc.value.nearest == [10.0, 11.0]


def test_saved_grid_includes_measurement_times():
    cfg = WindowConfig(horizon=300.0, dt=1.0, save_every=100, meas_times=(50.0,), meas_components=((0, 1),),
                       extra_times=(250.0,))
    assert cfg.saved_times() == [0.0, 50.0, 100.0, 200.0, 250.0, 300.0]


def test_zero_horizon_window_is_initial_belief():
    init = GaussianBelief(np.arange(6.0) + 7000.0, np.diag(np.arange(1.0, 7.0)))
    cfg = WindowConfig(horizon=0.0, meas_times=(0.0,), meas_components=((0, 1, 2),))
    w = build_window(init, cfg, UKFSpec(), GravityModel())
    assert w.saved_times == (0.0,)
    np.testing.assert_allclose(w.prior.sigma_xx, init.covariance, atol=1e-8)
    np.testing.assert_allclose(w.mean, init.mean, atol=1e-9)


def test_linear_toy_matches_stacked_covariance():
    dt = 1.0
    F, traj = _double_integrator(dt)
    P0 = np.array([[2.0, 0.3], [0.3, 0.5]])
    cfg = WindowConfig(horizon=20.0, dt=dt, save_every=10, meas_times=(10.0,), meas_components=((0,),))
    w = build_window(GaussianBelief([1.0, 0.2], P0), cfg, UKFSpec(), trajectory=traj)
    Phi = [np.linalg.matrix_power(F, k) for k in (0, 10, 20)]
    exact = np.block([[A @ P0 @ B.T for B in Phi] for A in Phi])
    assert np.abs(w.prior.sigma_xx - exact).max() <= 1e-8 * np.abs(exact).max()
    np.testing.assert_array_equal(w.meas_matrix, [[0, 0, 1, 0, 0, 0]])


def test_enkf_window_is_seeded():
    F, traj = _double_integrator(1.0)
    cfg = WindowConfig(horizon=10.0, save_every=5)
    init = GaussianBelief([0.0, 1.0], np.eye(2))
    a = build_window(init, cfg, EnKFSpec(50, 3), trajectory=traj)
    b = build_window(init, cfg, EnKFSpec(50, 3), trajectory=traj)
    assert np.array_equal(a.prior.sigma_xx, b.prior.sigma_xx)


def test_measurement_rows_select_configured_components(iss_window):
    s, w = iss_window
    assert w.meas_dim == 3 * len(s.sites)
    for i, (t, c) in enumerate(w.meas_rows):
        row = w.meas_matrix[i]
        assert row.sum() == 1.0
        assert np.argmax(row) == w.row(t, c)


def test_joint_covariance_psd(iss_window):
    _, w = iss_window
    joint = w.prior.joint()
    assert np.linalg.eigvalsh(joint).min() >= -1e-8 * np.abs(joint).max()


def test_iss_position_uncertainty_grows(iss_window):
    s, w = iss_window
    grid = [t for t in w.saved_times if t % 100 == 0]
    sq = []
    for t in grid:
        M = make_mask(w, t, (0, 1, 2)).matrix
        sq.append(np.sqrt(np.trace(M @ w.prior.sigma_xx @ M.T)))
    assert np.all(np.diff(sq) > 0)
    assert 100.0 < sq[-1] < 2000.0


def test_posterior_not_above_prior_at_masks(iss_window):
    s, w = iss_window
    post = posterior_covariance(w.prior)
    for c in s.utility + s.privacy:
        M = make_mask(w, c.time, c.components).matrix
        assert np.trace(M @ post @ M.T) <= np.trace(M @ w.prior.sigma_xx @ M.T)


def test_mask_rows_and_orthonormality(iss_window):
    _, w = iss_window
    m = make_mask(w, 0.0, (0, 1, 2))
    np.testing.assert_array_equal(np.nonzero(m.matrix)[1], [0, 1, 2])
    for t in w.saved_times[::7]:
        M = make_mask(w, t, (0, 2, 4)).matrix
        assert np.array_equal(M @ M.T, np.eye(3))
        assert np.all(M.sum(axis=1) == 1.0)


def test_full_mask_trace_is_total(iss_window):
    _, w = iss_window
    M = np.vstack([make_mask(w, t, range(6)).matrix for t in w.saved_times])
    assert np.trace(M @ w.prior.sigma_xx @ M.T) == pytest.approx(np.trace(w.prior.sigma_xx), rel=1e-14)


def test_mask_off_grid(iss_window):
    _, w = iss_window
    with pytest.raises(OffGridError) as exc:
        make_mask(w, 1650.0, (0,))
    assert exc.value.nearest == [1600.0, 1700.0]


def test_restrict_keeps_prior_block(iss_window):
    s, w = iss_window
    times = sorted(set(s.sites) | {c.time for c in s.utility})
    sub = w.restrict(times, (0, 1, 2))
    idx = [w.row(t, c) for t in times for c in (0, 1, 2)]
    np.testing.assert_array_equal(sub.prior.sigma_xx, w.prior.sigma_xx[np.ix_(idx, idx)])
    np.testing.assert_allclose(sub.prior.sigma_yy, w.prior.sigma_yy, atol=1e-12 * np.abs(w.prior.sigma_yy).max())
    with pytest.raises(WindowError):
        w.restrict(times[1:], (0, 1, 2))


def test_sensor_noise_blocks():
    cfg = WindowConfig(horizon=100.0, meas_times=(0.0, 100.0), meas_components=((0, 1, 2),))
    np.testing.assert_array_equal(sensor_noise_block(cfg, 1.0), np.eye(6))
    one = WindowConfig(horizon=100.0, meas_times=(0.0,), meas_components=((0, 1, 2),))
    np.testing.assert_array_equal(sensor_noise_block(one, [1.0, 4.0, 9.0]), np.diag([1.0, 4.0, 9.0]))
    R = sensor_noise_block(cfg, [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    np.testing.assert_array_equal(R, np.diag([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
    with pytest.raises(WindowError):
        sensor_noise_block(one, [1.0, -1.0, 1.0])
