"""Shared numerical utilities: unitary DFTs, frequency grids, and guarded
positive-definite linear algebra.

All heavy math in this package runs in float64 (complex128 in the frequency
domain). Matrix inversions of model covariances go through
``spd_inverse_logdet`` so that near-singular matrices are handled by a single,
consistent jitter policy.
"""

import numpy as np
from scipy import linalg as sla


class ConfigError(ValueError):
    """Invalid configuration or malformed input file."""


class NumericalError(RuntimeError):
    """A linear-algebra or optimization step failed beyond recovery."""


class ResourceGuardError(RuntimeError):
    """A requested computation exceeds a size guard and was refused."""


# Jitter ladder for barely-indefinite matrices: each scale multiplies the mean
# diagonal, and we give up after the last rung.
JITTER_SCALES = (1e-10, 1e-8, 1e-6)


def unitary_dft(y, axis=-1):
    """Unitary discrete Fourier transform (1/sqrt(T) normalization)."""
    return np.fft.fft(np.asarray(y), axis=axis, norm="ortho")


def unitary_idft(y_tilde, axis=-1):
    """Inverse of :func:`unitary_dft`."""
    return np.fft.ifft(np.asarray(y_tilde), axis=axis, norm="ortho")


def frequency_grid(T, delta):
    """Frequencies (cycles per ms) matching the unitary DFT bin order.

    Bin l (0-based) maps to l/(T*delta) for l <= floor(T/2) and to
    (l-T)/(T*delta) above, so for even T the Nyquist bin carries the
    positive frequency.
    """
    if T < 1:
        raise ConfigError(f"need at least one time point, got T={T}")
    l = np.arange(T)
    return np.where(l <= T // 2, l, l - T) / (T * delta)


def dft_matrix(T):
    """Dense unitary DFT matrix (rows index frequency bins)."""
    return sla.dft(T) / np.sqrt(T)


def spd_inverse_logdet(A):
    """Inverse and log-determinant of a symmetric (Hermitian) PD matrix.

    Tries a Cholesky factorization as given, then retries with jitter
    `eps * mean(diag(A))` for eps in ``JITTER_SCALES``. Raises
    ``NumericalError`` once the ladder is exhausted or the input is not
    finite.

    Returns
    -------
    A_inv : ndarray
        Symmetrized inverse.
    logdet : float
        log|A| (of the jittered matrix, when jitter was needed).
    """
    A = np.asarray(A)
    if not np.all(np.isfinite(A)):
        raise NumericalError("matrix contains non-finite entries")
    diag_mean = float(np.mean(A.diagonal().real))
    eye = np.eye(A.shape[0], dtype=A.dtype)
    for eps in (0.0,) + tuple(JITTER_SCALES):
        try:
            chol = np.linalg.cholesky(A + (eps * diag_mean) * eye if eps else A)
        except np.linalg.LinAlgError:
            continue
        inv = sla.cho_solve((chol, True), eye, check_finite=False)
        inv = 0.5 * (inv + inv.conj().T)
        logdet = 2.0 * float(np.sum(np.log(chol.diagonal().real)))
        return inv, logdet
    raise NumericalError(
        "matrix is not positive definite even after jitter "
        f"(scales {JITTER_SCALES})"
    )


def jittered_cholesky(A):
    """Lower Cholesky factor under the same jitter policy."""
    A = np.asarray(A)
    if not np.all(np.isfinite(A)):
        raise NumericalError("matrix contains non-finite entries")
    diag_mean = float(np.mean(A.diagonal().real))
    for eps in (0.0,) + tuple(JITTER_SCALES):
        try:
            return np.linalg.cholesky(
                A + (eps * diag_mean) * np.eye(A.shape[0], dtype=A.dtype) if eps else A
            )
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("matrix is not positive definite even after jitter")


def spd_logdet(A):
    """log-determinant via the same jitter policy as ``spd_inverse_logdet``."""
    A = np.asarray(A)
    if not np.all(np.isfinite(A)):
        raise NumericalError("matrix contains non-finite entries")
    diag_mean = float(np.mean(A.diagonal().real))
    for eps in (0.0,) + tuple(JITTER_SCALES):
        shifted = A + (eps * diag_mean) * np.eye(A.shape[0], dtype=A.dtype) if eps else A
        try:
            chol = np.linalg.cholesky(shifted)
        except np.linalg.LinAlgError:
            continue
        return 2.0 * float(np.sum(np.log(chol.diagonal().real)))
    raise NumericalError("matrix is not positive definite even after jitter")
