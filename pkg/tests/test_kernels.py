import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from mdlag.kernels import (
    SIGMA2_DEFAULT,
    build_K,
    build_Kw,
    build_Kxw,
    circulant_approx,
    csd,
    dpsd_dgamma,
    inducing_grid_ms,
    k_cross,
    phase_matrix,
    psd,
    sample_times_ms,
    se_and_grads,
    spectral_weights,
)
from mdlag.numerics import frequency_grid
from oracles import finite_diff


def test_k_zero_lag_is_one():
    assert k_cross(40.0, 40.0, tau=100.0, sigma2=1e-3) == pytest.approx(1.0)


def test_k_one_timescale_lag():
    # With sigma2 = 0 and dt = tau the kernel is exp(-1/2).
    assert k_cross(0.0, 100.0, tau=100.0, sigma2=0.0) == pytest.approx(np.exp(-0.5))


def test_k_delay_shift():
    # Delays shift the effective lag: dt = (t2 - d2) - (t1 - d1).
    val = k_cross(0.0, 100.0, tau=50.0, d1=0.0, d2=100.0, sigma2=0.0)
    assert val == pytest.approx(1.0)  # shifted lag is zero, but no delta bump
    val = k_cross(0.0, 100.0, tau=50.0, d1=0.0, d2=100.0, sigma2=1e-3)
    assert val == pytest.approx(1.0)  # delta term counts coincident shifted times


@given(
    st.floats(min_value=5.0, max_value=500.0),
    st.floats(min_value=-200.0, max_value=200.0),
)
@settings(max_examples=50, deadline=None)
def test_k_symmetric_in_lag(tau, dt):
    a = k_cross(0.0, dt, tau, sigma2=1e-3)
    b = k_cross(dt, 0.0, tau, sigma2=1e-3)
    assert a == pytest.approx(b, rel=1e-12)


def test_build_K_shape_and_diagonal():
    K = build_K([20.0, 120.0], [[0.0, 12.0], [0.0, -23.0]], [1e-3, 1e-3], T=10, delta=20.0)
    assert K.shape == (2, 20, 20)
    np.testing.assert_allclose(K[:, np.arange(20), np.arange(20)], 1.0)
    np.testing.assert_allclose(K, np.swapaxes(K, 1, 2), atol=1e-14)


def test_build_K_within_group_delay_invariant():
    # Delays cancel inside a group, so the (m, m) block never depends on them.
    K0 = build_K([50.0], [[0.0, 0.0]], [1e-3], T=8, delta=20.0)
    K1 = build_K([50.0], [[0.0, 17.3]], [1e-3], T=8, delta=20.0)
    np.testing.assert_allclose(K0[0, 8:, 8:], K1[0, 8:, 8:], atol=1e-12)
    # ... while the cross block shifts.
    assert not np.allclose(K0[0, :8, 8:], K1[0, :8, 8:])


def test_build_K_positive_definite():
    K = build_K(
        [20.0, 50.0, 80.0, 120.0],
        [[0.0, 12.0], [0.0, -23.0], [0.0, 0.0], [0.0, 0.0]],
        [1e-3] * 4,
        T=25,
        delta=20.0,
    )
    for j in range(4):
        eig = np.linalg.eigvalsh(K[j])
        # Long timescales drive trailing eigenvalues to the float floor, so
        # assert positive semidefiniteness up to roundoff.
        assert eig.min() > -1e-10 * eig.max()


def test_psd_zero_frequency():
    assert psd(0.0, tau=100.0, sigma2=0.0) == pytest.approx(np.sqrt(2 * np.pi) * 100.0)


def test_psd_integrates_to_kernel_variance():
    # The squared-exponential part carries unit power: integral of psd over
    # all frequencies equals 1 - sigma2 (the delta part is flat, excluded).
    val, _ = quad(lambda f: psd(f, tau=60.0, sigma2=0.0), -np.inf, np.inf)
    assert val == pytest.approx(1.0, abs=1e-9)


def test_csd_is_phase_shifted_psd():
    f = 0.003
    base = psd(f, tau=80.0, sigma2=1e-3)
    val = csd(f, 80.0, d1=12.0, d2=-5.0, sigma2=1e-3)
    assert abs(val) == pytest.approx(base)
    assert np.angle(val) == pytest.approx(-2 * np.pi * f * 17.0)


def test_csd_hermitian_in_groups():
    f = np.array([0.001, 0.004, -0.002])
    a = csd(f, 40.0, d1=3.0, d2=11.0)
    b = csd(f, 40.0, d1=11.0, d2=3.0)
    np.testing.assert_allclose(a, b.conj(), atol=1e-15)


def test_phase_matrix_values():
    freqs = frequency_grid(4, 1.0)
    h = phase_matrix(np.array([[0.0, 2.0]]), freqs)
    assert h.shape == (2, 1, 4)
    np.testing.assert_allclose(h[0], 1.0)  # group 1 delays pinned at zero
    np.testing.assert_allclose(h[1, 0], np.exp(-2j * np.pi * freqs * 2.0))


def test_spectral_weights_match_psd_over_delta():
    T, delta = 12, 20.0
    w = spectral_weights([100.0, 30.0], [1e-3, 1e-3], T, delta)
    f = frequency_grid(T, delta)
    np.testing.assert_allclose(w[0], psd(f, 100.0, 1e-3) / delta, atol=1e-14)
    np.testing.assert_allclose(w[1], psd(f, 30.0, 1e-3) / delta, atol=1e-14)


def test_spectral_weights_average_near_unit_variance():
    # (1/T) sum_l psd(f_l)/delta approximates k(0) = 1 once the grid covers
    # the support of the psd.
    w = spectral_weights([100.0], [1e-3], T=100, delta=20.0)
    assert np.mean(w[0]) == pytest.approx(1.0, abs=5e-3)


@pytest.mark.parametrize("M", [1, 2])
def test_circulant_eigenvalues_equal_psd_over_delta(M):
    T, delta, tau = 50, 20.0, 100.0
    delays = np.zeros(M)
    C = circulant_approx(tau, delays, 1e-3, T, delta)
    if M == 1:
        eig = np.sort(np.linalg.eigvalsh(C))
        expected = np.sort(psd(frequency_grid(T, delta), tau, 1e-3) / delta)
        np.testing.assert_allclose(eig, expected, atol=1e-8)
    else:
        assert C.shape == (M * T, M * T)
        np.testing.assert_allclose(C, C.T, atol=1e-10)


def test_circulant_approx_converges_to_gram():
    # Away from trial edges the circulant approximation approaches the true
    # Gram matrix as T grows.
    tau, delta = 100.0, 20.0
    errs = []
    for T in (25, 50, 100):
        K = build_K([tau], [[0.0]], [1e-3], T, delta)[0]
        C = circulant_approx(tau, np.array([0.0]), 1e-3, T, delta)
        mid = T // 2
        errs.append(abs(C[mid, mid] - K[mid, mid]) + abs(C[mid, mid + 1] - K[mid, mid + 1]))
    assert errs[0] > errs[-1]


def test_inducing_grid_spans_trial():
    g = inducing_grid_ms(T=100, T_ind=50, delta=20.0)
    assert g[0] == pytest.approx(20.0)
    assert g[-1] == pytest.approx(2000.0)
    assert len(g) == 50
    np.testing.assert_allclose(np.diff(g), np.diff(g)[0])


def test_Kxw_full_grid_recovers_gram():
    # With the inducing grid equal to the sample grid and no delays, the
    # cross-covariance must coincide with the Gram matrix itself.
    T, delta, tau = 12, 20.0, 70.0
    grid = sample_times_ms(T, delta)
    Kxw = build_Kxw(tau, [0.0], T, delta, grid)
    K = build_K([tau], [[0.0]], [SIGMA2_DEFAULT], T, delta)[0]
    np.testing.assert_allclose(Kxw, K, atol=1e-12)
    Kw = build_Kw(tau, grid)
    np.testing.assert_allclose(Kw, K, atol=1e-12)


def test_se_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    dts = rng.uniform(-300, 300, size=8)
    tau = 75.0
    for dt in dts:
        _, dlg, ddt = se_and_grads(dt, tau, sigma2=1e-3)

        def f_loggamma(theta):
            t = np.exp(-0.5 * theta[0])  # tau from log gamma
            return se_and_grads(dt, t, sigma2=1e-3)[0]

        def f_dt(theta):
            return se_and_grads(theta[0], tau, sigma2=1e-3)[0]

        lg = np.log(1.0 / tau**2)
        assert dlg == pytest.approx(finite_diff(f_loggamma, np.array([lg]))[0], abs=1e-7)
        assert ddt == pytest.approx(finite_diff(f_dt, np.array([dt]))[0], abs=1e-7)


def test_dpsd_dgamma_matches_finite_differences():
    tau = 60.0
    gamma = 1.0 / tau**2
    for f in (0.0, 0.001, 0.0125, 0.02):
        def s_of_gamma(theta):
            return psd(f, 1.0 / np.sqrt(theta[0]), sigma2=1e-3)

        num = finite_diff(s_of_gamma, np.array([gamma]), h=1e-7)[0]
        assert dpsd_dgamma(f, tau, 1e-3) == pytest.approx(num, rel=1e-5, abs=1e-8)
