"""Exact time-domain variational fitting.

The latent posterior couples all p latents across M groups and T time bins,
so each iteration inverts a (p*M*T) x (p*M*T) matrix — exact but cubic in
trial length. Within the stacked vector, time is the outer index and, within
one time bin, groups then latents: flat index (t*M + m)*p + j.

Per iteration: closed-form update of the latent posterior, closed-form
updates of the regression factors, then one backtracking gradient-ascent
step on the kernel parameters (log precisions of the timescales and
bounded-transformed delays), accepted only when the kernel-dependent part of
the objective does not decrease — which keeps the full lower bound monotone.
"""

import time
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .kernels import (
    build_K,
    decode_gp_params,
    delay_jacobian,
    encode_gp_params,
    sample_times_ms,
    se_and_grads,
)
from .numerics import NumericalError, ResourceGuardError, spd_inverse_logdet
from .state import (
    FitReport,
    Groups,
    Hyperparams,
    ModelState,
    initialize,
    loglik_bound,
    neg_kl_alpha,
    neg_kl_c,
    neg_kl_d,
    neg_kl_phi,
    shared_variance_fraction,
    significant_latents,
    update_regression_factors,
)

# Above this p*M*T the exact fitter is refused without force=True.
TIME_FIT_GUARD = 40000


@lru_cache(maxsize=8)
def _latent_rows(p, M, T):
    """Row indices of each latent inside the stacked vector, (p, M*T).

    rows[j] is ordered group-major (m, t), matching the per-latent Gram
    matrices from ``build_K``.
    """
    t = np.arange(T)[None, None, :]
    m = np.arange(M)[None, :, None]
    j = np.arange(p)[:, None, None]
    rows = ((t * M + m) * p + j).reshape(p, M * T)
    rows.flags.writeable = False
    return rows


@dataclass
class QxTime:
    """Latent posterior: shared covariance plus per-trial means."""

    Sigma: np.ndarray  # (pMT, pMT), time-major
    logdet_Sigma: float
    mu: np.ndarray  # (N, pMT)
    K: np.ndarray  # (p, MT, MT) prior Gram matrices
    Kinv: np.ndarray
    logdet_K: np.ndarray  # (p,)
    rows: np.ndarray  # (p, MT) latent row indices


def update_qx_time(ys, groups, gp, post, delta):
    """Closed-form update of the joint latent posterior."""
    N, q, T = ys.shape
    M, p = groups.M, gp.p
    n_tot = p * M * T

    K = build_K(gp.taus, gp.delays, gp.sigma2, T, delta)
    Kinv = np.empty_like(K)
    logdet_K = np.empty(p)
    for j in range(p):
        Kinv[j], logdet_K[j] = spd_inverse_logdet(K[j])

    rows = _latent_rows(p, M, T)
    prec = np.zeros((n_tot, n_tot))
    for j in range(p):
        prec[np.ix_(rows[j], rows[j])] = Kinv[j]

    # observation-driven precision: block diag of <C^T Phi C> per group,
    # repeated at every time bin
    G = post.ctphic(groups)  # (M, p, p)
    pM = p * M
    block = np.zeros((pM, pM))
    for m in range(M):
        block[m * p : (m + 1) * p, m * p : (m + 1) * p] = G[m]
    idx = np.arange(T)
    prec.reshape(T, pM, T, pM)[idx, :, idx, :] += block

    Sigma, neg_logdet = spd_inverse_logdet(prec)
    logdet_Sigma = -neg_logdet

    E_phi = post.E_phi()
    proj = np.empty((N, T, M, p))
    for m in range(M):
        sl = groups.slice(m)
        ci = post.mu_c[sl] * E_phi[sl, None]  # (q_m, p)
        resid = ys[:, sl, :] - post.mu_d[sl][None, :, None]
        proj[:, :, m, :] = np.einsum("ri,nrt->nti", ci, resid)
    mu = proj.reshape(N, n_tot) @ Sigma
    return QxTime(Sigma, logdet_Sigma, mu, K, Kinv, logdet_K, rows)


def time_moment_sums(qx, ys, groups, p):
    """Collapse the latent posterior into the sums the factor updates need."""
    N, q, T = ys.shape
    M = groups.M
    Sig = qx.Sigma.reshape(T, M, p, T, M, p)
    mu = qx.mu.reshape(N, T, M, p)

    Sxx_cov = np.einsum("tmitmj->mij", Sig)
    Sxx_mu = np.einsum("ntmi,ntmj->mij", mu, mu)
    Sxx = [N * Sxx_cov[m] + Sxx_mu[m] for m in range(M)]
    Sxy = [
        np.einsum("nti,nrt->ir", mu[:, :, m, :], ys[:, groups.slice(m), :])
        for m in range(M)
    ]
    Sx = [mu[:, :, m, :].sum(axis=(0, 1)) for m in range(M)]

    # per-latent second-moment sums over the group-major grid, for the GP step
    E = np.empty((p, M * T, M * T))
    for j in range(p):
        r = qx.rows[j]
        mu_j = qx.mu[:, r]
        E[j] = N * qx.Sigma[np.ix_(r, r)] + mu_j.T @ mu_j
    return Sxx, Sxy, Sx, E


def gp_objective_terms(K, Kinv, logdet_K, E, N):
    """Kernel-dependent part of the bound: sum_j -(N/2)log|K_j| - tr(K_j^-1 E_j)/2."""
    p = K.shape[0]
    val = 0.0
    for j in range(p):
        val += -0.5 * N * logdet_K[j] - 0.5 * float(np.sum(Kinv[j] * E[j]))
    return val


def grad_gp_time(gp, E, N, T, delta, D_max, Kinvs=None):
    """Gradient of the kernel objective in (log-gamma, delay-transform) space."""
    p, M = gp.p, gp.M
    if Kinvs is None:
        K = build_K(gp.taus, gp.delays, gp.sigma2, T, delta)
        Kinvs = np.empty_like(K)
        for j in range(p):
            Kinvs[j], _ = spd_inverse_logdet(K[j])
    times = sample_times_ms(T, delta)
    grad_lg = np.empty(p)
    grad_dhat = np.zeros((p, max(M - 1, 0)))
    group_of = np.repeat(np.arange(M), T)
    for j in range(p):
        Kinv = Kinvs[j]
        dF_dK = 0.5 * (Kinv @ E[j] @ Kinv - N * Kinv)
        s = (times[None, :] - gp.delays[j][:, None]).ravel()  # (MT,) group-major
        dt = s[None, :] - s[:, None]
        _, dk_dlg, dk_ddt = se_and_grads(dt, gp.taus[j], gp.sigma2[j])
        grad_lg[j] = float(np.sum(dF_dK * dk_dlg))
        if M > 1:
            W = dF_dK * dk_ddt
            # dt[a, b] = s_b - s_a with s = t - D: moving group m's delay
            # shifts rows of that group by +1 and columns by -1.
            row_sums = W.sum(axis=1)
            col_sums = W.sum(axis=0)
            for m in range(1, M):
                mask = group_of == m
                grad_D = float(row_sums[mask].sum() - col_sums[mask].sum())
                grad_dhat[j, m - 1] = grad_D * delay_jacobian(gp.delays[j, m], D_max)
    if M > 1:
        return np.concatenate([grad_lg, grad_dhat.ravel()])
    return grad_lg


def update_gp_time(gp, E, N, T, delta, eta, D_max, max_halvings=10, cur=None):
    """One monotone ascent step on the kernel parameters.

    Returns (new gp, objective value at the new parameters, auxiliary
    K/Kinv/logdet at the accepted point, next step size). ``cur`` may carry
    precomputed (K, Kinv, logdet_K) for the incoming parameters.
    """
    p, M = gp.p, gp.M
    if cur is not None:
        K0, Kinv0, logdet0 = cur
    else:
        K0 = build_K(gp.taus, gp.delays, gp.sigma2, T, delta)
        Kinv0 = np.empty_like(K0)
        logdet0 = np.empty(p)
        for j in range(p):
            Kinv0[j], logdet0[j] = spd_inverse_logdet(K0[j])
    f0 = gp_objective_terms(K0, Kinv0, logdet0, E, N)

    grad = grad_gp_time(gp, E, N, T, delta, D_max, Kinvs=Kinv0)
    gnorm = float(np.max(np.abs(grad)))
    if gnorm < 1e-14:
        return gp, f0, (K0, Kinv0, logdet0), eta
    direction = grad / gnorm
    theta0 = encode_gp_params(gp.taus, gp.delays, D_max)

    step = eta
    for k in range(max_halvings + 1):
        theta = theta0 + step * direction
        taus, delays = decode_gp_params(theta, p, M, D_max)
        try:
            K = build_K(taus, delays, gp.sigma2, T, delta)
            Kinv = np.empty_like(K)
            logdet = np.empty(p)
            for j in range(p):
                Kinv[j], logdet[j] = spd_inverse_logdet(K[j])
            f = gp_objective_terms(K, Kinv, logdet, E, N)
        except NumericalError:
            f = -np.inf
        if np.isfinite(f) and f >= f0:
            new = gp.copy()
            new.taus, new.delays = taus, delays
            next_eta = min(step * 1.5, 1.0) if k == 0 else step
            return new, f, (K, Kinv, logdet), next_eta
        step *= 0.5
    return gp, f0, (K0, Kinv0, logdet0), max(step, 1e-8)


def elbo_time(post, groups, hyper, N, T, R, logdet_Sigma, gp_term, p):
    """Exact lower bound for the current posterior and kernel parameters."""
    n_tot = p * groups.M * T
    return (
        loglik_bound(post, N * T, R)
        + 0.5 * N * (logdet_Sigma + n_tot)
        + gp_term
        + neg_kl_d(post, hyper)
        + neg_kl_c(post, groups, hyper)
        + neg_kl_phi(post, hyper)
        + neg_kl_alpha(post, groups, hyper)
    )


def fit_time(
    ds,
    p,
    max_iter=5000,
    tol=1e-8,
    seed=0,
    tau_init=None,
    sigma2=1e-3,
    hyper=None,
    force=False,
    fix_gp=False,
    init_state=None,
    callback=None,
):
    """Fit by exact time-domain variational inference.

    Parameters
    ----------
    ds : Dataset
    p : number of latents to fit (model selection prunes via the report).
    init_state : optional (gp, post) pair to resume from, e.g. a checkpoint
        produced by another fitting method.

    Returns
    -------
    (ModelState, FitReport)
    """
    ys = ds.ys
    N, q, T = ys.shape
    groups = ds.groups
    hyper = hyper or Hyperparams()
    if p * groups.M * T > TIME_FIT_GUARD and not force:
        raise ResourceGuardError(
            f"p*M*T = {p * groups.M * T} exceeds the exact-fitter guard "
            f"({TIME_FIT_GUARD}); use another method or force=True"
        )
    if init_state is not None:
        gp, post = init_state[0].copy(), init_state[1].copy()
    else:
        gp, post = initialize(ys, groups, p, ds.delta, seed, tau_init, sigma2, hyper)
    D_max = T * ds.delta / 2.0
    eta = 0.1

    Sy = ys.sum(axis=(0, 2))
    Sy2 = (ys**2).sum(axis=(0, 2))
    elbo_trace = []
    iter_secs = []
    converged = False
    for it in range(max_iter):
        tic = time.perf_counter()
        qx = update_qx_time(ys, groups, gp, post, ds.delta)
        Sxx, Sxy, Sx, E = time_moment_sums(qx, ys, groups, p)
        R = update_regression_factors(post, groups, hyper, N * T, Sxx, Sxy, Sx, Sy, Sy2)
        if fix_gp:
            gp_term = gp_objective_terms(qx.K, qx.Kinv, qx.logdet_K, E, N)
        else:
            gp, gp_term, _, eta = update_gp_time(
                gp, E, N, T, ds.delta, eta, D_max, cur=(qx.K, qx.Kinv, qx.logdet_K)
            )
        elbo = elbo_time(post, groups, hyper, N, T, R, qx.logdet_Sigma, gp_term, p)
        iter_secs.append(time.perf_counter() - tic)
        elbo_trace.append(elbo)
        if callback is not None:
            callback(it, elbo, gp, post)
        if it > 0:
            prev = elbo_trace[-2]
            if (elbo - prev) < tol * abs(prev):
                converged = True
                break

    nu = shared_variance_fraction(post, groups)
    flags, p_hat = significant_latents(nu)
    state = ModelState(
        method="time",
        groups=groups,
        T=T,
        delta=ds.delta,
        hyper=hyper,
        gp=gp,
        post=post,
        extras={},
    )
    report = FitReport(
        method="time",
        n_iter=len(elbo_trace),
        converged=converged,
        elbo=np.asarray(elbo_trace),
        iter_seconds=np.asarray(iter_secs),
        nu=nu,
        significant=flags,
        p_hat=p_hat,
        config={"p": p, "max_iter": max_iter, "tol": tol, "seed": seed},
    )
    return state, report
