"""Synthetic data generation.

``draw_model`` samples ground-truth model parameters (loadings with a chosen
group-sparsity pattern, offsets, noise variances scaled to a target
signal-to-noise ratio). ``generate_time`` samples latents exactly from their
joint Gram matrix (cubic in p*M*T, guarded); ``generate_freq`` samples them
spectrally on a 3x-length grid and keeps the middle third, which costs
O(p*M*T log T) and avoids periodic wrap-around artifacts.

``make_scenario`` bundles the standard simulation presets.
"""

import numpy as np

from .data import Dataset
from .kernels import build_K, phase_matrix, psd
from .numerics import (
    ConfigError,
    ResourceGuardError,
    frequency_grid,
    jittered_cholesky,
    unitary_idft,
)
from .state import GpParams, Groups, Hyperparams, ModelState, RegressionPosterior

# Above this p*M*T the exact time-domain sampler is refused.
TIME_GEN_GUARD = 5000


def snr_of(C, noise_vars, groups):
    """Per-group signal-to-noise ratio tr(C_m C_m^T) / tr(noise cov)."""
    out = np.empty(groups.M)
    for m in range(groups.M):
        sl = groups.slice(m)
        out[m] = np.sum(C[sl] ** 2) / np.sum(noise_vars[sl])
    return out


def draw_model(groups, p, taus, delays, membership, snr, rng, sigma2=1e-3):
    """Sample ground-truth parameters.

    Parameters
    ----------
    membership : (p, M) bool
        Which groups each latent drives; loadings outside the support are
        exactly zero.
    snr : float or (M,) array
        Target per-group ratio tr(C_m C_m^T) / tr(Phi^-1). Noise variances
        are drawn U[0.5, 1.5] per unit and rescaled per group to hit it.
    """
    q = groups.q
    taus = np.asarray(taus, dtype=float)
    delays = np.asarray(delays, dtype=float)
    membership = np.asarray(membership, dtype=bool)
    if delays.shape != (p, groups.M) or membership.shape != (p, groups.M):
        raise ConfigError("delays and membership must be (p, M)")
    snr = np.broadcast_to(np.asarray(snr, dtype=float), (groups.M,))

    C = rng.standard_normal((q, p))
    for m in range(groups.M):
        C[groups.slice(m)] *= membership[:, m].astype(float)[None, :]

    noise_vars = rng.uniform(0.5, 1.5, size=q)
    for m in range(groups.M):
        sl = groups.slice(m)
        power = np.sum(C[sl] ** 2)
        if power == 0:
            raise ConfigError(f"group {m} has no latent support; SNR undefined")
        noise_vars[sl] *= power / (snr[m] * np.sum(noise_vars[sl]))

    d = rng.standard_normal(q)
    return {
        "C": C,
        "d": d,
        "noise_vars": noise_vars,
        "taus": taus,
        "delays": delays,
        "sigma2": np.full(p, sigma2),
        "membership": membership,
        "snr": snr.copy(),
    }


def _observe(latents, model, groups, rng):
    # latents: (N, M, p, T) -> observations (N, q, T)
    N, M, p, T = latents.shape
    ys = np.empty((N, groups.q, T))
    for m in range(M):
        sl = groups.slice(m)
        ys[:, sl, :] = np.einsum("ri,nit->nrt", model["C"][sl], latents[:, m])
    ys += model["d"][None, :, None]
    ys += rng.standard_normal(ys.shape) * np.sqrt(model["noise_vars"])[None, :, None]
    return ys


def generate_time(model, groups, N, T, delta, rng, force=False):
    """Sample trials with latents drawn exactly from their joint Gram matrix."""
    p = len(model["taus"])
    M = groups.M
    if p * M * T > TIME_GEN_GUARD and not force:
        raise ResourceGuardError(
            f"p*M*T = {p * M * T} exceeds the exact-sampler guard "
            f"({TIME_GEN_GUARD}); use generate_freq or force=True"
        )
    K = build_K(model["taus"], model["delays"], model["sigma2"], T, delta)
    latents = np.empty((N, M, p, T))
    for j in range(p):
        L = jittered_cholesky(K[j])
        draws = rng.standard_normal((N, M * T)) @ L.T  # (N, MT)
        latents[:, :, j, :] = draws.reshape(N, M, T)
    ys = _observe(latents, model, groups, rng)
    return _as_dataset(ys, latents, model, groups, delta, rng)


def generate_freq(model, groups, N, T, delta, rng):
    """Sample trials spectrally on a 3*T grid and keep the middle third."""
    p = len(model["taus"])
    M = groups.M
    # Odd extended grid: with no Nyquist bin every nonzero frequency has a
    # conjugate partner, so delay phases keep the trials exactly real.
    T3 = 3 * T + (1 if (3 * T) % 2 == 0 else 0)
    freqs = frequency_grid(T3, delta)
    S = np.stack([psd(freqs, model["taus"][j], model["sigma2"][j]) for j in range(p)])
    S /= delta  # per-bin variance of the transformed latents

    # Conjugate-symmetric draws so every trial is exactly real.
    a = rng.standard_normal((N, p, T3))
    b = rng.standard_normal((N, p, T3))
    xt = (a + 1j * b) * np.sqrt(S / 2.0)[None, :, :]
    half = (T3 - 1) // 2
    l = np.arange(1, half + 1)
    xt[:, :, T3 - l] = xt[:, :, l].conj()
    xt[:, :, 0] = a[:, :, 0] * np.sqrt(S[:, 0])

    h = phase_matrix(model["delays"], freqs)  # (M, p, T3)
    shifted = xt[:, None, :, :] * h[None, :, :, :]  # (N, M, p, T3)
    lat_full = unitary_idft(shifted, axis=-1)
    lat_real = lat_full.real
    if np.max(np.abs(lat_full.imag)) > 1e-8:
        raise RuntimeError("spectral sampler produced non-real latents")

    latents = np.ascontiguousarray(lat_real[:, :, :, T : 2 * T])
    ys = _observe(latents, model, groups, rng)
    return _as_dataset(ys, latents, model, groups, delta, rng)


def _as_dataset(ys, latents, model, groups, delta, rng):
    gt = {k: v for k, v in model.items() if k != "membership"}
    gt["membership"] = model["membership"].astype(int)
    gt["snr_realized"] = snr_of(model["C"], model["noise_vars"], groups)
    ds = Dataset(ys=ys, delta=delta, groups=groups, ground_truth=gt)
    ds.latents = latents
    return ds


def ground_truth_state(ds):
    """Wrap a simulated dataset's generating parameters as a fitted-model state.

    The regression posterior is a point mass at the true loadings, offsets,
    and noise precisions (zero covariance), so predictors driven by this
    state realize exact Gaussian conditioning under the generating model.
    """
    gt = ds.ground_truth
    if gt is None or "C" not in gt:
        raise ConfigError("dataset carries no generating parameters")
    groups = ds.groups
    q, p = gt["C"].shape
    csq = np.maximum(
        np.stack([np.sum(gt["C"][groups.slice(m)] ** 2, axis=0) for m in range(groups.M)]),
        1e-12,
    )
    sizes = np.array(groups.sizes, dtype=float)[:, None]
    post = RegressionPosterior(
        mu_d=gt["d"].astype(float).copy(),
        sigma_d=np.zeros(q),
        a_bar_phi=1.0,
        b_bar_phi=gt["noise_vars"].astype(float).copy(),
        mu_c=gt["C"].astype(float).copy(),
        Sigma_c=np.zeros((q, p, p)),
        a_bar_alpha=np.ones(groups.M),
        b_bar_alpha=csq / sizes,
    )
    gp = GpParams(
        taus=np.asarray(gt["taus"], dtype=float).copy(),
        delays=np.asarray(gt["delays"], dtype=float).copy(),
        sigma2=np.asarray(gt["sigma2"], dtype=float).copy(),
    )
    N, _, T = ds.ys.shape
    return ModelState(
        method="truth",
        groups=groups,
        T=T,
        delta=ds.delta,
        hyper=Hyperparams(),
        gp=gp,
        post=post,
        extras={"source": "generator"},
    )


# ---------------------------------------------------------------------------
# Standard scenarios


def _split_units(total, M):
    base = total // M
    sizes = [base + (1 if m < total % M else 0) for m in range(M)]
    return tuple(sizes)


def make_scenario(name, **overrides):
    """Standard simulation presets; overrides replace individual fields."""
    if name == "demo":
        scenario = dict(
            groups=(10, 10),
            p=4,
            taus=[20.0, 50.0, 80.0, 120.0],
            delays=[[0.0, 12.0], [0.0, -23.0], [0.0, 0.0], [0.0, 0.0]],
            membership=[[1, 1], [1, 1], [1, 0], [0, 1]],
            snr=0.2,
            N=100,
            T=100,
            delta=20.0,
            route="time",
        )
    elif name == "scaling_t":
        scenario = dict(
            groups=(12, 12),
            p=1,
            taus=[100.0],
            delays=[[0.0, 10.0]],
            membership=[[1, 1]],
            snr=0.2,
            N=100,
            T=500,
            delta=20.0,
            route="freq",
        )
    elif name == "scaling_m":
        M = int(overrides.pop("M", 2))
        scenario = dict(
            groups=_split_units(24, M),
            p=1,
            taus=[100.0],
            delays=None,  # drawn U[0, 20] ms per non-reference group
            membership=[[1] * M],
            snr=0.2,
            N=100,
            T=50,
            delta=20.0,
            route="freq",
        )
    elif name == "model_selection":
        scenario = dict(
            groups=(24,),
            p=4,
            taus=[50.0] * 4,
            delays=[[0.0]] * 4,
            membership=[[1]] * 4,
            snr=0.1,
            N=50,
            T=200,
            delta=20.0,
            route="freq",
        )
    else:
        raise ConfigError(f"unknown scenario {name!r}")
    unknown = set(overrides) - set(scenario)
    if unknown:
        raise ConfigError(f"unknown scenario overrides {sorted(unknown)}")
    scenario.update(overrides)
    scenario["name"] = name
    return scenario


def generate_scenario(scenario, seed=0):
    """Draw a ground-truth model for a scenario and sample a dataset from it."""
    rng = np.random.default_rng(seed)
    groups = Groups(tuple(scenario["groups"]))
    p = scenario["p"]
    delays = scenario["delays"]
    if delays is None:  # scaling with group count: random feedforward delays
        delays = np.zeros((p, groups.M))
        delays[:, 1:] = rng.uniform(0.0, 20.0, size=(p, groups.M - 1))
    model = draw_model(
        groups,
        p,
        scenario["taus"],
        np.asarray(delays, dtype=float),
        np.asarray(scenario["membership"], dtype=bool),
        scenario["snr"],
        rng,
    )
    if scenario.get("route", "freq") == "time":
        ds = generate_time(model, groups, scenario["N"], scenario["T"], scenario["delta"], rng)
    else:
        ds = generate_freq(model, groups, scenario["N"], scenario["T"], scenario["delta"], rng)
    ds.seed = seed
    ds.ground_truth["scenario"] = scenario["name"]
    return ds
