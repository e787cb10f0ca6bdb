"""Model state: parameter containers, posterior moments, initialization,
latent-dimensionality summaries, and checkpoint serialization.

The observation model for group m at time t of trial n is

    y^m_{n,t} = C^m x^m_{n,t} + d^m + noise,  noise ~ N(0, diag(1/phi_r)),

with independent zero-mean Gaussian priors on the loading columns whose
precisions alpha^m_j are themselves Gamma-distributed (automatic relevance
determination), a Gaussian prior on d, and Gamma priors on the noise
precisions. Variational posteriors are Gaussian for d and for each loading
row, and Gamma for the precisions; this module stores their parameters and
derives the expectations the fitters consume.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln

from .numerics import ConfigError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Groups:
    """Partition of the q observed units into M ordered groups."""

    sizes: tuple

    def __post_init__(self):
        if len(self.sizes) == 0 or any(s < 1 for s in self.sizes):
            raise ConfigError(f"invalid group sizes {self.sizes}")
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        offs = [0]
        for s in self.sizes:
            offs.append(offs[-1] + s)
        object.__setattr__(self, "offsets", tuple(offs))

    @property
    def M(self):
        return len(self.sizes)

    @property
    def q(self):
        return int(sum(self.sizes))

    def slice(self, m):
        return slice(self.offsets[m], self.offsets[m + 1])

    def unit_group(self):
        """Group index of each unit, shape (q,)."""
        return np.repeat(np.arange(self.M), self.sizes)


@dataclass(frozen=True)
class Hyperparams:
    """Fixed prior hyperparameters (noninformative by default)."""

    beta: float = 1e-12
    a_phi: float = 1e-12
    b_phi: float = 1e-12
    a_alpha: float = 1e-12
    b_alpha: float = 1e-12


@dataclass
class GpParams:
    """Per-latent kernel parameters: timescales, per-group delays, delta bumps."""

    taus: np.ndarray  # (p,) ms
    delays: np.ndarray  # (p, M) ms, column 0 pinned at zero
    sigma2: np.ndarray  # (p,)

    @property
    def p(self):
        return len(self.taus)

    @property
    def M(self):
        return self.delays.shape[1]

    def copy(self):
        return GpParams(self.taus.copy(), self.delays.copy(), self.sigma2.copy())


@dataclass
class RegressionPosterior:
    """Variational posterior over d, noise precisions, loadings, and ARD scales."""

    mu_d: np.ndarray  # (q,)
    sigma_d: np.ndarray  # (q,) diagonal variances
    a_bar_phi: float
    b_bar_phi: np.ndarray  # (q,)
    mu_c: np.ndarray  # (q, p) loading-row means
    Sigma_c: np.ndarray  # (q, p, p) loading-row covariances
    a_bar_alpha: np.ndarray  # (M,)
    b_bar_alpha: np.ndarray  # (M, p)

    # ----- derived expectations -----

    def E_phi(self):
        return self.a_bar_phi / self.b_bar_phi

    def E_log_phi(self):
        return digamma(self.a_bar_phi) - np.log(self.b_bar_phi)

    def E_alpha(self):
        return self.a_bar_alpha[:, None] / self.b_bar_alpha

    def E_log_alpha(self):
        return digamma(self.a_bar_alpha)[:, None] - np.log(self.b_bar_alpha)

    def E_d2(self):
        return self.sigma_d + self.mu_d**2

    def E_cc(self):
        """Second moments of each loading row, (q, p, p)."""
        return self.Sigma_c + np.einsum("ri,rj->rij", self.mu_c, self.mu_c)

    def c_sqnorm(self, groups):
        """Expected squared norm of each loading column per group, (M, p)."""
        per_unit = np.einsum("rjj->rj", self.Sigma_c) + self.mu_c**2
        out = np.empty((groups.M, self.mu_c.shape[1]))
        for m in range(groups.M):
            out[m] = per_unit[groups.slice(m)].sum(axis=0)
        return out

    def ctphic(self, groups):
        """Per-group noise-weighted loading second moments <C^T Phi C>, (M, p, p)."""
        E_phi = self.E_phi()
        E_cc = self.E_cc()
        out = np.empty((groups.M, self.mu_c.shape[1], self.mu_c.shape[1]))
        for m in range(groups.M):
            sl = groups.slice(m)
            out[m] = np.einsum("r,rij->ij", E_phi[sl], E_cc[sl])
        return out

    def copy(self):
        return RegressionPosterior(
            self.mu_d.copy(),
            self.sigma_d.copy(),
            float(self.a_bar_phi),
            self.b_bar_phi.copy(),
            self.mu_c.copy(),
            self.Sigma_c.copy(),
            self.a_bar_alpha.copy(),
            self.b_bar_alpha.copy(),
        )


@dataclass
class ModelState:
    """Everything a checkpoint stores: enough to predict and to resume."""

    method: str
    groups: Groups
    T: int
    delta: float
    hyper: Hyperparams
    gp: GpParams
    post: RegressionPosterior
    extras: dict = field(default_factory=dict)

    @property
    def p(self):
        return self.gp.p


@dataclass
class FitReport:
    """Fit diagnostics returned alongside the model."""

    method: str
    n_iter: int
    converged: bool
    elbo: np.ndarray  # per-iteration lower-bound values
    iter_seconds: np.ndarray
    nu: np.ndarray  # (M, p) shared-variance fractions
    significant: np.ndarray  # (M, p) bool
    p_hat: int
    config: dict = field(default_factory=dict)

    def min_elbo_step(self):
        if len(self.elbo) < 2:
            return 0.0
        return float(np.min(np.diff(self.elbo)))

    def to_dict(self):
        return {
            "method": self.method,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "final_elbo": float(self.elbo[-1]) if len(self.elbo) else None,
            "elbo": [float(v) for v in self.elbo],
            "iter_seconds": [float(v) for v in self.iter_seconds],
            "nu": self.nu.tolist(),
            "significant": self.significant.astype(int).tolist(),
            "p_hat": int(self.p_hat),
            "config": self.config,
        }


# ---------------------------------------------------------------------------
# Initialization


def initialize(ys, groups, p, delta, seed=0, tau_init=None, sigma2=1e-3, hyper=None):
    """Data-driven starting point shared by all three fitting methods.

    The mean offset starts at the per-unit sample mean, noise precisions at
    the inverse per-unit sample variance, loading rows at Gaussian draws
    scaled so each row's expected power matches the unit's variance split
    across p latents, ARD precisions consistent with those rows, timescales
    at 2*delta, and delays at zero. Posterior covariances start at a tiny
    positive multiple of those scales so every entropy term is finite.
    """
    ys = np.asarray(ys, dtype=float)
    if ys.ndim != 3:
        raise ConfigError(f"expected trials x units x time array, got shape {ys.shape}")
    N, q, T = ys.shape
    if q != groups.q:
        raise ConfigError(f"data has {q} units but groups describe {groups.q}")
    hyper = hyper or Hyperparams()
    rng = np.random.default_rng(seed)

    mu_d = ys.mean(axis=(0, 2))
    var = ys.var(axis=(0, 2))
    var = np.maximum(var, 1e-12)

    a_bar_phi = hyper.a_phi + N * T / 2.0
    b_bar_phi = a_bar_phi * var  # <phi_r> = 1 / sample variance

    row_scale = var / p
    mu_c = rng.standard_normal((q, p)) * np.sqrt(row_scale)[:, None]
    Sigma_c = 1e-12 * row_scale[:, None, None] * np.eye(p)[None, :, :]
    sigma_d = 1e-12 * var

    post = RegressionPosterior(
        mu_d=mu_d,
        sigma_d=sigma_d,
        a_bar_phi=float(a_bar_phi),
        b_bar_phi=b_bar_phi,
        mu_c=mu_c,
        Sigma_c=Sigma_c,
        a_bar_alpha=hyper.a_alpha + np.array(groups.sizes, dtype=float) / 2.0,
        b_bar_alpha=np.empty((groups.M, p)),
    )
    csq = post.c_sqnorm(groups)
    sizes = np.array(groups.sizes, dtype=float)[:, None]
    # <alpha^m_j> = q_m / <||c^m_j||^2>
    post.b_bar_alpha = post.a_bar_alpha[:, None] * csq / sizes

    tau0 = 2.0 * delta if tau_init is None else float(tau_init)
    gp = GpParams(
        taus=np.full(p, tau0),
        delays=np.zeros((p, groups.M)),
        sigma2=np.full(p, sigma2),
    )
    return gp, post


# ---------------------------------------------------------------------------
# Latent-dimensionality summaries


def shared_variance_fraction(post, groups):
    """Fraction of each group's loading power carried by each latent, (M, p)."""
    csq = post.c_sqnorm(groups)
    total = csq.sum(axis=1, keepdims=True)
    total = np.where(total > 0, total, 1.0)
    return csq / total


def significant_latents(nu, threshold=0.02):
    """Boolean significance flags per (group, latent) and the model's latent count.

    A latent counts toward the model dimensionality when it is significant
    (nu >= threshold, inclusive) in at least one group.
    """
    flags = np.asarray(nu) >= threshold
    return flags, int(np.any(flags, axis=0).sum())


# ---------------------------------------------------------------------------
# Shared coordinate updates for the regression factors
#
# All three fitting methods reduce to the same closed-form updates once the
# latent posterior has been collapsed into time-domain-equivalent sums:
#   Sxx[m]  = sum_{n,t} <x^m_{n,t} x^m_{n,t}^T>          (p, p)
#   Sxy[m]  = sum_{n,t} <x^m_{n,t}> y^m_{n,t}^T          (p, q_m)
#   Sx[m]   = sum_{n,t} <x^m_{n,t}>                      (p,)
#   Sy, Sy2 = sum_{n,t} y_{n,r,t}, sum y^2               (q,)


def update_regression_factors(post, groups, hyper, NT, Sxx, Sxy, Sx, Sy, Sy2):
    """One round of coordinate updates for q(d), q(C), q(phi), q(alpha).

    Mutates ``post`` in place and returns the per-unit expected squared
    residuals R (q,) that the noise update and the likelihood bound share.
    """
    p = post.mu_c.shape[1]

    # q(d): diagonal Gaussian.
    E_phi = post.E_phi()
    post.sigma_d = 1.0 / (hyper.beta + NT * E_phi)
    for m in range(groups.M):
        sl = groups.slice(m)
        resid = Sy[sl] - post.mu_c[sl] @ Sx[m]
        post.mu_d[sl] = post.sigma_d[sl] * E_phi[sl] * resid

    # q(C): row-wise Gaussian with ARD prior precisions, batched per group.
    E_alpha = post.E_alpha()
    for m in range(groups.M):
        sl = groups.slice(m)
        prec = np.diag(E_alpha[m])[None, :, :] + E_phi[sl, None, None] * Sxx[m][None, :, :]
        Sigma = np.linalg.inv(prec)
        Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, 1, 2))
        post.Sigma_c[sl] = Sigma
        b = Sxy[m].T - post.mu_d[sl, None] * Sx[m][None, :]  # (q_m, p)
        post.mu_c[sl] = np.einsum("rij,rj->ri", Sigma, E_phi[sl, None] * b)

    # q(phi): Gamma, via the expected squared residual per unit.
    R = residual_sums(post, groups, NT, Sxx, Sxy, Sx, Sy, Sy2)
    post.a_bar_phi = hyper.a_phi + NT / 2.0
    post.b_bar_phi = hyper.b_phi + 0.5 * R

    # q(alpha): Gamma per (group, latent).
    csq = post.c_sqnorm(groups)
    post.a_bar_alpha = hyper.a_alpha + np.array(groups.sizes, dtype=float) / 2.0
    post.b_bar_alpha = hyper.b_alpha + 0.5 * csq
    return R


def residual_sums(post, groups, NT, Sxx, Sxy, Sx, Sy, Sy2):
    """Per-unit expected squared reconstruction residuals R_r, shape (q,)."""
    E_cc = post.E_cc()
    E_d2 = post.E_d2()
    R = np.empty(groups.q)
    for m in range(groups.M):
        sl = groups.slice(m)
        quad = np.einsum("rij,ij->r", E_cc[sl], Sxx[m])
        cross = np.einsum("ri,ir->r", post.mu_c[sl], Sxy[m]) - (
            post.mu_c[sl] @ Sx[m]
        ) * post.mu_d[sl]
        R[sl] = (
            Sy2[sl]
            + NT * E_d2[sl]
            + quad
            - 2.0 * cross
            - 2.0 * Sy[sl] * post.mu_d[sl]
        )
    return R


# ---------------------------------------------------------------------------
# Bound terms shared across fitting methods


def loglik_bound(post, NT, R):
    """Expected log-likelihood of the observations under the posterior."""
    q = len(R)
    E_phi = post.E_phi()
    E_log_phi = post.E_log_phi()
    return (
        -0.5 * q * NT * np.log(2.0 * np.pi)
        + 0.5 * NT * np.sum(E_log_phi)
        - 0.5 * np.sum(E_phi * R)
    )


def neg_kl_gamma(a_bar, b_bar, a0, b0):
    """-KL( Gamma(a_bar, b_bar) || Gamma(a0, b0) ), elementwise-summed."""
    a_bar = np.asarray(a_bar, dtype=float)
    b_bar = np.asarray(b_bar, dtype=float)
    E = a_bar / b_bar
    val = (
        (a0 - a_bar) * (digamma(a_bar) - np.log(b_bar))
        + gammaln(a_bar)
        - gammaln(a0)
        - a_bar * np.log(b_bar)
        + a0 * np.log(b0)
        - b0 * E
        + a_bar
    )
    return float(np.sum(val))


def neg_kl_d(post, hyper):
    q = len(post.mu_d)
    return 0.5 * float(
        q
        + q * np.log(hyper.beta)
        + np.sum(np.log(post.sigma_d))
        - hyper.beta * np.sum(post.E_d2())
    )


def neg_kl_c(post, groups, hyper):
    """-KL of the loading rows against their ARD prior, alpha-averaged."""
    p = post.mu_c.shape[1]
    E_alpha = post.E_alpha()
    E_log_alpha = post.E_log_alpha()
    csq = post.c_sqnorm(groups)
    total = 0.5 * groups.q * p
    for m in range(groups.M):
        sl = groups.slice(m)
        sign, logdets = np.linalg.slogdet(post.Sigma_c[sl])
        total += 0.5 * float(np.sum(logdets))
        total += 0.5 * groups.sizes[m] * float(np.sum(E_log_alpha[m]))
        total -= 0.5 * float(E_alpha[m] @ csq[m])
    return total


def neg_kl_alpha(post, groups, hyper):
    return neg_kl_gamma(
        post.a_bar_alpha[:, None] * np.ones_like(post.b_bar_alpha),
        post.b_bar_alpha,
        hyper.a_alpha,
        hyper.b_alpha,
    )


def neg_kl_phi(post, hyper):
    return neg_kl_gamma(
        post.a_bar_phi * np.ones_like(post.b_bar_phi),
        post.b_bar_phi,
        hyper.a_phi,
        hyper.b_phi,
    )


# ---------------------------------------------------------------------------
# Checkpoint IO: a JSON manifest next to a little-endian float64 blob file.


def _array_fields(state):
    return {
        "gp.taus": state.gp.taus,
        "gp.delays": state.gp.delays,
        "gp.sigma2": state.gp.sigma2,
        "post.mu_d": state.post.mu_d,
        "post.sigma_d": state.post.sigma_d,
        "post.b_bar_phi": state.post.b_bar_phi,
        "post.mu_c": state.post.mu_c,
        "post.Sigma_c": state.post.Sigma_c,
        "post.a_bar_alpha": state.post.a_bar_alpha,
        "post.b_bar_alpha": state.post.b_bar_alpha,
    }


def save_checkpoint(basepath, state):
    """Write ``basepath.json`` (manifest) and ``basepath.bin`` (float64 blobs)."""
    basepath = str(basepath)
    if basepath.endswith(".json"):
        basepath = basepath[:-5]
    arrays = _array_fields(state)
    blobs = []
    offset = 0
    with open(basepath + ".bin", "wb") as fh:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(arr.tobytes())
            blobs.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "method": state.method,
        "groups": list(state.groups.sizes),
        "T": int(state.T),
        "delta_ms": float(state.delta),
        "p": int(state.gp.p),
        "a_bar_phi": float(state.post.a_bar_phi),
        "hyper": dataclasses.asdict(state.hyper),
        "extras": state.extras,
        "blobs": blobs,
    }
    with open(basepath + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return basepath


def load_checkpoint(basepath):
    basepath = str(basepath)
    if basepath.endswith(".json"):
        basepath = basepath[:-5]
    try:
        with open(basepath + ".json") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint manifest: {exc}") from exc
    if manifest.get("kind") != "checkpoint":
        raise ConfigError(f"{basepath}.json is not a model checkpoint")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {manifest.get('format_version')}")
    raw = open(basepath + ".bin", "rb").read()
    arrays = {}
    for blob in manifest["blobs"]:
        shape = tuple(blob["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=blob["offset"])
        arrays[blob["name"]] = arr.reshape(shape).astype(float)
    groups = Groups(tuple(manifest["groups"]))
    gp = GpParams(arrays["gp.taus"], arrays["gp.delays"], arrays["gp.sigma2"])
    post = RegressionPosterior(
        mu_d=arrays["post.mu_d"],
        sigma_d=arrays["post.sigma_d"],
        a_bar_phi=manifest["a_bar_phi"],
        b_bar_phi=arrays["post.b_bar_phi"],
        mu_c=arrays["post.mu_c"],
        Sigma_c=arrays["post.Sigma_c"],
        a_bar_alpha=arrays["post.a_bar_alpha"],
        b_bar_alpha=arrays["post.b_bar_alpha"],
    )
    return ModelState(
        method=manifest["method"],
        groups=groups,
        T=manifest["T"],
        delta=manifest["delta_ms"],
        hyper=Hyperparams(**manifest["hyper"]),
        gp=gp,
        post=post,
        extras=manifest.get("extras", {}),
    )
