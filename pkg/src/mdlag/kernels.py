"""Delayed squared-exponential covariance family.

Each latent j carries a timescale tau_j (ms), one real-valued delay per group
D^m_j (ms, group 1 pinned at zero), and a small Kronecker-delta variance
sigma2_j. The covariance between group m1 at time t1 and group m2 at time t2
is stationary in the delay-shifted lag

    dt = (t2 - D^m2) - (t1 - D^m1),
    k(dt) = (1 - sigma2) * exp(-dt^2 / (2 tau^2)) + sigma2 * [dt == 0],

so k(0) = 1 and within-group covariances are delay-independent. The matching
spectral density (unit total power) is

    s(f) = (1 - sigma2) * sqrt(2 pi) * tau * exp(-(2 pi f)^2 tau^2 / 2) + sigma2,

with cross-spectra picking up the phase exp(-i 2 pi f (D^m1 - D^m2)).

All Gram matrices over groups-and-times use group-major ordering: row index
m*T + t for group m, time bin t.
"""

import numpy as np

from .numerics import ConfigError, dft_matrix, frequency_grid

# Variance of the Kronecker-delta component of every latent's kernel.
SIGMA2_DEFAULT = 1e-3

# Two delay-shifted times closer than this (ms) count as coincident for the
# Kronecker-delta term.
DELTA_TOL_MS = 1e-9


def sample_times_ms(T, delta):
    """Time stamps (ms) of the T within-trial sample points."""
    return np.arange(1, T + 1, dtype=float) * delta


def encode_gp_params(taus, delays, D_max):
    """Pack (tau, delay) into the unconstrained ascent coordinates.

    Timescales travel as log precisions (gamma = 1/tau^2); delays of the
    non-reference groups through a tanh squash bounded at +-D_max.
    """
    gamma_hat = -2.0 * np.log(taus)
    M = delays.shape[1]
    if M > 1:
        ratio = np.clip(delays[:, 1:] / D_max, -1 + 1e-12, 1 - 1e-12)
        return np.concatenate([gamma_hat, 2.0 * np.arctanh(ratio).ravel()])
    return gamma_hat


def decode_gp_params(theta, p, M, D_max):
    """Inverse of encode_gp_params; reference-group delays stay zero."""
    taus = np.exp(-0.5 * theta[:p])
    delays = np.zeros((p, M))
    if M > 1:
        delays[:, 1:] = D_max * np.tanh(0.5 * theta[p:].reshape(p, M - 1))
    return taus, delays


def delay_jacobian(delay, D_max):
    """d(delay)/d(packed coordinate) for the tanh squash."""
    return 0.5 * D_max * (1.0 - (delay / D_max) ** 2)


def inducing_grid_ms(T, T_ind, delta):
    """Uniform inducing-point grid spanning the trial, in ms."""
    if T_ind < 1:
        raise ConfigError(f"need at least one inducing point, got {T_ind}")
    if T_ind == 1:
        return np.array([0.5 * (1 + T)]) * delta
    return np.linspace(1.0, float(T), T_ind) * delta


def k_cross(t1_ms, t2_ms, tau, d1=0.0, d2=0.0, sigma2=SIGMA2_DEFAULT, bump=True):
    """Covariance between delay-shifted times (broadcasting arguments).

    ``bump=True`` adds the white component's variance wherever the shifted
    times coincide exactly; use it when both argument sets sample the same
    realization (a group against itself, or observed times against the
    inducing grid). Cross-group covariances carry only the smooth part, so
    the kernel stays continuous in the delays.
    """
    dt = (np.asarray(t2_ms, dtype=float) - d2) - (np.asarray(t1_ms, dtype=float) - d1)
    out = (1.0 - sigma2) * np.exp(-(dt**2) / (2.0 * tau**2))
    if bump:
        out = out + sigma2 * (np.abs(dt) <= DELTA_TOL_MS)
    return out


def _shifted_times(taus, delays, T, delta):
    # (p, M, T) delay-shifted time stamps, flattened to (p, M*T) group-major
    times = sample_times_ms(T, delta)
    shifted = times[None, None, :] - np.asarray(delays, dtype=float)[:, :, None]
    p, M = shifted.shape[:2]
    return shifted.reshape(p, M * T)


def build_K(taus, delays, sigma2s, T, delta):
    """Per-latent Gram matrices over all groups and times.

    Parameters
    ----------
    taus : (p,) timescales in ms.
    delays : (p, M) per-group delays in ms (column 0 conventionally zero).
    sigma2s : (p,) Kronecker-delta variances.
    T, delta : trial length in bins and sampling period in ms.

    Returns
    -------
    (p, M*T, M*T) array, group-major ordering on both axes.

    Each group's white component is independent, so the delta variance sits
    only on the within-group diagonal (which is the matrix diagonal in this
    layout); cross-group blocks are pure smooth covariance even when delays
    coincide, keeping the matrices nonsingular and the entries continuous
    in the delays.
    """
    taus = np.asarray(taus, dtype=float)
    sigma2s = np.asarray(sigma2s, dtype=float)
    s = _shifted_times(taus, delays, T, delta)
    dt = s[:, None, :] - s[:, :, None]
    K = (1.0 - sigma2s)[:, None, None] * np.exp(
        -(dt**2) / (2.0 * taus**2)[:, None, None]
    )
    n = s.shape[1]
    K[:, np.arange(n), np.arange(n)] += sigma2s[:, None]
    return K


def build_Kw(tau, grid_ms, sigma2=SIGMA2_DEFAULT):
    """Gram matrix of one latent on the (delay-free) inducing grid."""
    g = np.asarray(grid_ms, dtype=float)
    return k_cross(g[:, None], g[None, :], tau, 0.0, 0.0, sigma2)


def build_Kxw(tau, delays_j, T, delta, grid_ms, sigma2=SIGMA2_DEFAULT):
    """Cross-covariance between observed times and inducing points.

    Rows are group-major over (m, t); columns index the inducing grid. The
    observed time of group m is shifted by its delay: dt = xi - (t - D^m).
    """
    times = sample_times_ms(T, delta)
    g = np.asarray(grid_ms, dtype=float)
    shifted = times[None, :] - np.asarray(delays_j, dtype=float)[:, None]  # (M, T)
    dt = g[None, None, :] - shifted[:, :, None]  # (M, T, T_ind)
    M = dt.shape[0]
    return (
        (1.0 - sigma2) * np.exp(-(dt**2) / (2.0 * tau**2))
        + sigma2 * (np.abs(dt) <= DELTA_TOL_MS)
    ).reshape(M * T, len(g))


def psd(f, tau, sigma2=SIGMA2_DEFAULT):
    """Power spectral density of the kernel at frequency f (cycles/ms)."""
    f = np.asarray(f, dtype=float)
    return (1.0 - sigma2) * np.sqrt(2.0 * np.pi) * tau * np.exp(
        -0.5 * (2.0 * np.pi * f * tau) ** 2
    ) + sigma2


def csd(f, tau, d1, d2, sigma2=SIGMA2_DEFAULT):
    """Cross-spectral density between two groups' views of one latent."""
    f = np.asarray(f, dtype=float)
    return psd(f, tau, sigma2) * np.exp(-2j * np.pi * f * (d1 - d2))


def phase_matrix(delays, freqs):
    """Per-group, per-latent phase factors exp(-i 2 pi f D^m_j).

    Parameters
    ----------
    delays : (p, M) delays in ms.
    freqs : (L,) frequencies in cycles/ms.

    Returns
    -------
    (M, p, L) complex array.
    """
    D = np.asarray(delays, dtype=float)
    f = np.asarray(freqs, dtype=float)
    return np.exp(-2j * np.pi * f[None, None, :] * D.T[:, :, None])


def spectral_weights(taus, sigma2s, T, delta):
    """Diagonal of the spectral prior covariance, per latent and frequency.

    The discrete prior covariance of the transformed latent at bin l is
    psd(f_l)/delta, so that the average over bins matches k(0) = 1.

    Returns
    -------
    (p, T) array of positive weights.
    """
    f = frequency_grid(T, delta)
    taus = np.asarray(taus, dtype=float)
    sigma2s = np.asarray(sigma2s, dtype=float)
    return (
        (1.0 - sigma2s)[:, None]
        * np.sqrt(2.0 * np.pi)
        * taus[:, None]
        * np.exp(-0.5 * (2.0 * np.pi * f[None, :] * taus[:, None]) ** 2)
        + sigma2s[:, None]
    ) / delta


def dpsd_dgamma(f, tau, sigma2=SIGMA2_DEFAULT):
    """Derivative of psd with respect to gamma = 1/tau^2."""
    f = np.asarray(f, dtype=float)
    gamma = 1.0 / tau**2
    w2 = (2.0 * np.pi * f) ** 2
    envelope = (1.0 - sigma2) * np.sqrt(0.5 * np.pi) * np.exp(-0.5 * w2 / gamma)
    return envelope * (w2 * gamma ** (-2.5) - gamma ** (-1.5))


def se_and_grads(dt, tau, sigma2=SIGMA2_DEFAULT):
    """Kernel values plus derivatives wrt log-gamma and wrt dt.

    The Kronecker-delta component has zero derivative almost everywhere, so
    only the squared-exponential part contributes to the gradients.

    Returns (k, dk_dloggamma, dk_ddt), all shaped like dt.
    """
    dt = np.asarray(dt, dtype=float)
    se = (1.0 - sigma2) * np.exp(-(dt**2) / (2.0 * tau**2))
    k = se + sigma2 * (np.abs(dt) <= DELTA_TOL_MS)
    dk_dloggamma = -se * dt**2 / (2.0 * tau**2)
    dk_ddt = -se * dt / tau**2
    return k, dk_dloggamma, dk_ddt


def circulant_approx(tau, delays, sigma2, T, delta):
    """Circulant (spectral) approximation of one latent's Gram matrix.

    Builds Re{ F^H diag(csd(f_l)/delta) F } per group pair, where F is the
    unitary DFT matrix; for a single group its eigenvalues are exactly
    psd(f_l)/delta.

    Returns
    -------
    (M*T, M*T) real array, group-major ordering.
    """
    delays = np.asarray(delays, dtype=float)
    M = delays.shape[0]
    f = frequency_grid(T, delta)
    F = dft_matrix(T)
    out = np.empty((M * T, M * T))
    for m1 in range(M):
        for m2 in range(M):
            lam = csd(f, tau, delays[m1], delays[m2], sigma2) / delta
            block = F.conj().T @ (lam[:, None] * F)
            out[m1 * T : (m1 + 1) * T, m2 * T : (m2 + 1) * T] = block.real
    return out
