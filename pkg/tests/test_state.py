import numpy as np
import pytest

from mdlag.state import (
    Groups,
    Hyperparams,
    ModelState,
    initialize,
    load_checkpoint,
    neg_kl_gamma,
    save_checkpoint,
    shared_variance_fraction,
    significant_latents,
)
from mdlag.numerics import ConfigError


def test_groups_basics():
    g = Groups((10, 10))
    assert g.M == 2
    assert g.q == 20
    assert g.slice(1) == slice(10, 20)
    np.testing.assert_array_equal(g.unit_group()[:3], [0, 0, 0])
    np.testing.assert_array_equal(g.unit_group()[-3:], [1, 1, 1])


def test_groups_reject_empty():
    with pytest.raises(ConfigError):
        Groups((4, 0))


def test_initialize_moments_match_data():
    rng = np.random.default_rng(0)
    ys = rng.standard_normal((12, 6, 30)) * 2.0 + 1.5
    g = Groups((3, 3))
    gp, post = initialize(ys, g, p=4, delta=20.0, seed=1)

    np.testing.assert_allclose(post.mu_d, ys.mean(axis=(0, 2)))
    np.testing.assert_allclose(post.E_phi(), 1.0 / ys.var(axis=(0, 2)), rtol=1e-9)
    # a_bar_phi carries the fixed N*T/2 increment over the prior shape.
    assert post.a_bar_phi == pytest.approx(1e-12 + 12 * 30 / 2)
    # ARD scales start consistent with the drawn loadings: <alpha> = q_m/<||c||^2>.
    csq = post.c_sqnorm(g)
    np.testing.assert_allclose(post.E_alpha(), 3.0 / csq, rtol=1e-9)
    assert gp.taus[0] == pytest.approx(40.0)
    np.testing.assert_array_equal(gp.delays, 0.0)


def test_shared_variance_fraction_frozen_example():
    # Two latents with expected column powers {3, 1} split 0.75 / 0.25.
    gp, post = initialize(np.zeros((2, 2, 4)) + np.random.default_rng(0).standard_normal((2, 2, 4)), Groups((2,)), p=2, delta=1.0)
    post.Sigma_c[:] = 0.0
    post.mu_c[:] = np.sqrt(np.array([[1.5, 0.5], [1.5, 0.5]]))
    nu = shared_variance_fraction(post, Groups((2,)))
    np.testing.assert_allclose(nu, [[0.75, 0.25]])


def test_significant_latents_threshold_inclusive():
    nu = np.array([[0.02, 0.019], [0.5, 0.01]])
    flags, p_hat = significant_latents(nu, threshold=0.02)
    assert flags.tolist() == [[True, False], [True, False]]
    assert p_hat == 1


def test_significant_latents_counts_any_group():
    nu = np.array([[0.5, 0.001], [0.001, 0.3]])
    _, p_hat = significant_latents(nu)
    assert p_hat == 2


def test_neg_kl_gamma_zero_at_prior():
    assert neg_kl_gamma(np.array([2.0]), np.array([3.0]), 2.0, 3.0) == pytest.approx(0.0, abs=1e-12)


def test_neg_kl_gamma_negative_away_from_prior():
    assert neg_kl_gamma(np.array([5.0]), np.array([1.0]), 2.0, 3.0) < 0.0


@pytest.mark.parametrize(
    "a_bar,b_bar,a0,b0",
    [(5.0, 1.0, 2.0, 3.0), (0.5, 4.0, 1.5, 0.25), (30.0, 7.0, 1e-12, 1e-12)],
)
def test_neg_kl_gamma_matches_quadrature(a_bar, b_bar, a0, b0):
    from scipy.integrate import quad
    from scipy.stats import gamma as gamma_dist

    qdist = gamma_dist(a=a_bar, scale=1.0 / b_bar)
    pdist = gamma_dist(a=a0, scale=1.0 / b0)

    def integrand(x):
        return qdist.pdf(x) * (pdist.logpdf(x) - qdist.logpdf(x))

    lo, hi = qdist.ppf(1e-14), qdist.ppf(1.0 - 1e-14)
    val, err = quad(integrand, lo, hi, limit=400)
    assert neg_kl_gamma(np.array([a_bar]), np.array([b_bar]), a0, b0) == pytest.approx(
        val, rel=1e-6, abs=1e-8
    )


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(7)
    ys = rng.standard_normal((5, 8, 12))
    g = Groups((5, 3))
    gp, post = initialize(ys, g, p=3, delta=20.0, seed=2)
    gp.delays[:, 1] = [3.0, -7.5, 0.25]
    state = ModelState(
        method="frequency",
        groups=g,
        T=12,
        delta=20.0,
        hyper=Hyperparams(),
        gp=gp,
        post=post,
        extras={"taper": True},
    )
    base = save_checkpoint(tmp_path / "ckpt", state)
    back = load_checkpoint(base)
    assert back.method == "frequency"
    assert back.groups.sizes == (5, 3)
    assert back.extras == {"taper": True}
    # bit-exact round trip of every float64 array
    np.testing.assert_array_equal(back.gp.delays, gp.delays)
    np.testing.assert_array_equal(back.post.mu_c, post.mu_c)
    np.testing.assert_array_equal(back.post.Sigma_c, post.Sigma_c)
    np.testing.assert_array_equal(back.post.b_bar_phi, post.b_bar_phi)
    assert back.post.a_bar_phi == post.a_bar_phi
