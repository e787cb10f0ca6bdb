"""Cross-group and cross-unit prediction from a fitted model.

Leave-group-out: infer the latents from every group except the target using
the fitted parameters, propagate them to the target group through the prior
conditional (time/inducing methods) or the delay phases (frequency method),
and map through the target loadings. Leave-unit-out treats one unit as a
singleton target while every other unit stays observed; it always runs
through the frequency route, whose per-unit cost is small.
"""

import numpy as np

from .fit_freq import update_qx_freq
from .fit_inducing import update_qw
from .fit_time import update_qx_time
from .kernels import (
    build_Kxw,
    inducing_grid_ms,
    k_cross,
    phase_matrix,
    sample_times_ms,
)
from .numerics import ConfigError, frequency_grid, unitary_dft, unitary_idft
from .state import Groups, RegressionPosterior


def _reduced_posterior(post, keep_units):
    """Restrict the regression posterior to a subset of units."""
    return RegressionPosterior(
        mu_d=post.mu_d[keep_units],
        sigma_d=post.sigma_d[keep_units],
        a_bar_phi=post.a_bar_phi,
        b_bar_phi=post.b_bar_phi[keep_units],
        mu_c=post.mu_c[keep_units],
        Sigma_c=post.Sigma_c[keep_units],
        a_bar_alpha=post.a_bar_alpha,
        b_bar_alpha=post.b_bar_alpha,
    )


def _drop_group(state, target):
    """Observed-side (groups, posterior, gp) with the target group removed."""
    groups = state.groups
    keep_groups = [k for k in range(groups.M) if k != target]
    keep_units = np.concatenate([np.arange(groups.q)[groups.slice(k)] for k in keep_groups])
    red_groups = Groups(tuple(groups.sizes[k] for k in keep_groups))
    red_post = _reduced_posterior(state.post, keep_units)
    red_gp = state.gp.copy()
    red_gp.delays = state.gp.delays[:, keep_groups]
    return red_groups, red_post, red_gp


def predict_lgo_time(state, ys, target):
    """Held-out group predictions via the exact time-domain route."""
    N, q, T = ys.shape
    groups = state.groups
    red_groups, red_post, red_gp = _drop_group(state, target)
    keep_units = np.concatenate(
        [np.arange(q)[groups.slice(k)] for k in range(groups.M) if k != target]
    )
    qx = update_qx_time(ys[:, keep_units, :], red_groups, red_gp, red_post, state.delta)

    times = sample_times_ms(T, state.delta)
    p = state.gp.p
    E_target = np.empty((N, p, T))
    for j in range(p):
        obs_shift = (times[None, :] - red_gp.delays[j][:, None]).ravel()  # (Mo*T,)
        tgt_shift = times - state.gp.delays[j, target]
        cross = k_cross(
            obs_shift[None, :], tgt_shift[:, None], state.gp.taus[j],
            0.0, 0.0, state.gp.sigma2[j], bump=False,
        )  # (T, Mo*T): white components are per-group, never shared
        weights = cross @ qx.Kinv[j]  # prior conditional onto the target group
        E_target[:, j, :] = qx.mu[:, qx.rows[j]] @ weights.T
    sl = groups.slice(target)
    C_m = state.post.mu_c[sl]
    return np.einsum("ri,nit->nrt", C_m, E_target) + state.post.mu_d[sl][None, :, None]


def predict_lgo_inducing(state, ys, target):
    """Held-out group predictions via the gridded route."""
    N, q, T = ys.shape
    groups = state.groups
    T_ind = int(state.extras.get("T_ind", T))
    grid = inducing_grid_ms(T, T_ind, state.delta)
    red_groups, red_post, red_gp = _drop_group(state, target)
    keep_units = np.concatenate(
        [np.arange(q)[groups.slice(k)] for k in range(groups.M) if k != target]
    )
    qw = update_qw(ys[:, keep_units, :], red_groups, red_gp, red_post, state.delta, grid)

    p = state.gp.p
    E_target = np.empty((N, p, T))
    for j in range(p):
        Kxw_t = build_Kxw(
            state.gp.taus[j],
            state.gp.delays[j, target : target + 1],
            T,
            state.delta,
            grid,
            state.gp.sigma2[j],
        )  # (T, T_ind)
        E_target[:, j, :] = qw.mu_w[:, j, :] @ (Kxw_t @ qw.A[j]).T
    sl = groups.slice(target)
    C_m = state.post.mu_c[sl]
    return np.einsum("ri,nit->nrt", C_m, E_target) + state.post.mu_d[sl][None, :, None]


def predict_lgo_freq(state, ys, target):
    """Held-out group predictions via the spectral route."""
    N, q, T = ys.shape
    groups = state.groups
    red_groups, red_post, red_gp = _drop_group(state, target)
    keep_units = np.concatenate(
        [np.arange(q)[groups.slice(k)] for k in range(groups.M) if k != target]
    )
    Ytilde = unitary_dft(ys[:, keep_units, :], axis=2)
    qx = update_qx_freq(Ytilde, red_groups, red_gp, red_post, state.delta)

    freqs = frequency_grid(T, state.delta)
    h_t = phase_matrix(state.gp.delays[:, target : target + 1], freqs)[0]  # (p, T)
    x_t = np.real(unitary_idft(h_t[None, :, :] * qx.mu, axis=2))  # (N, p, T)
    sl = groups.slice(target)
    C_m = state.post.mu_c[sl]
    return np.einsum("ri,nit->nrt", C_m, x_t) + state.post.mu_d[sl][None, :, None]


_ROUTES = {
    "time": predict_lgo_time,
    "inducing": predict_lgo_inducing,
    "frequency": predict_lgo_freq,
}


def predict_lgo(state, ys, target, method=None):
    """Dispatch to the fitted model's own route unless one is forced."""
    route = method or state.method
    if route not in _ROUTES:
        raise ConfigError(f"unknown prediction route {route!r}")
    return _ROUTES[route](state, ys, target)


def r2_lgo(state, ys, method=None):
    """Pooled leave-group-out R^2 over all groups of a test set.

    Each group is predicted from all the others; residual and centered sums
    pool over units, trials, and time before the final ratio.
    """
    groups = state.groups
    if groups.M < 2:
        raise ConfigError("leave-group-out prediction needs at least two groups")
    sse = 0.0
    sst = 0.0
    for m in range(groups.M):
        yhat = predict_lgo(state, ys, m, method=method)
        y = ys[:, groups.slice(m), :]
        sse += float(np.sum((y - yhat) ** 2))
        ybar = y.mean(axis=(0, 2), keepdims=True)
        sst += float(np.sum((y - ybar) ** 2))
    return 1.0 - sse / sst


def default_edge_trim(state):
    """Number of edge bins excluded from leave-unit-out scoring.

    Spectral predictions wrap around the trial boundary, so bins within
    roughly two timescales of either edge carry wraparound bias; never trim
    more than a fifth of the trial from each side.
    """
    tau_max = float(np.max(state.gp.taus))
    return int(min(np.ceil(2.0 * tau_max / state.delta), state.T // 5))


def leave_unit_out_r2(state, ys, edge_trim=None):
    """Pooled leave-unit-out R^2 via the spectral route.

    Each unit becomes a singleton target group (keeping its group's delays)
    while every other unit stays observed. Returns (pooled R^2, per-unit R^2).
    """
    N, q, T = ys.shape
    groups = state.groups
    trim = default_edge_trim(state) if edge_trim is None else int(edge_trim)
    lo, hi = trim, T - trim
    if hi <= lo:
        raise ConfigError(f"edge trim {trim} leaves no scoreable bins for T={T}")

    freqs = frequency_grid(T, state.delta)
    unit_group = groups.unit_group()
    sse = np.zeros(q)
    sst = np.zeros(q)
    for r in range(q):
        keep_units = np.array([u for u in range(q) if u != r])
        m = int(unit_group[r])
        red_sizes = list(groups.sizes)
        red_sizes[m] -= 1
        keep_groups = [k for k in range(groups.M) if red_sizes[k] > 0]
        red_groups = Groups(tuple(red_sizes[k] for k in keep_groups))
        red_post = _reduced_posterior(state.post, keep_units)
        red_gp = state.gp.copy()
        red_gp.delays = state.gp.delays[:, keep_groups]

        Ytilde = unitary_dft(ys[:, keep_units, :], axis=2)
        qx = update_qx_freq(Ytilde, red_groups, red_gp, red_post, state.delta)

        h_r = phase_matrix(state.gp.delays[:, m : m + 1], freqs)[0]
        x_r = np.real(unitary_idft(h_r[None, :, :] * qx.mu, axis=2))
        yhat = np.einsum("i,nit->nt", state.post.mu_c[r], x_r) + state.post.mu_d[r]

        y = ys[:, r, lo:hi]
        resid = y - yhat[:, lo:hi]
        sse[r] = float(np.sum(resid**2))
        sst[r] = float(np.sum((y - y.mean()) ** 2))
    pooled = 1.0 - sse.sum() / sst.sum()
    return pooled, 1.0 - sse / sst
