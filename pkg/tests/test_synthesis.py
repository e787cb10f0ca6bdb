import numpy as np
import pytest

from mdlag.data import load_dataset, save_dataset
from mdlag.kernels import k_cross
from mdlag.numerics import ConfigError, ResourceGuardError
from mdlag.state import Groups
from mdlag.synthesis import (
    draw_model,
    generate_freq,
    generate_scenario,
    generate_time,
    make_scenario,
    snr_of,
)


def _demo_model(rng, snr=0.2):
    groups = Groups((10, 10))
    return groups, draw_model(
        groups,
        p=4,
        taus=[20.0, 50.0, 80.0, 120.0],
        delays=np.array([[0.0, 12.0], [0.0, -23.0], [0.0, 0.0], [0.0, 0.0]]),
        membership=np.array([[1, 1], [1, 1], [1, 0], [0, 1]], dtype=bool),
        snr=snr,
        rng=rng,
    )


def test_draw_model_snr_and_sparsity():
    groups, model = _demo_model(np.random.default_rng(0))
    np.testing.assert_allclose(snr_of(model["C"], model["noise_vars"], groups), 0.2, rtol=1e-12)
    # latent 3 loads only on group A, latent 4 only on group B
    assert np.all(model["C"][10:, 2] == 0.0)
    assert np.all(model["C"][:10, 3] == 0.0)
    assert np.all(model["C"][:10, 2] != 0.0)


def test_generate_time_guard():
    groups, model = _demo_model(np.random.default_rng(1))
    with pytest.raises(ResourceGuardError):
        generate_time(model, groups, N=2, T=700, delta=20.0, rng=np.random.default_rng(0))


def test_generate_time_latent_covariance():
    # With many trials the sampled latents reproduce the kernel, including
    # the cross-group delay shift.
    groups, model = _demo_model(np.random.default_rng(2))
    rng = np.random.default_rng(3)
    ds = generate_time(model, groups, N=4000, T=12, delta=20.0, rng=rng)
    lat = ds.latents  # (N, M, p, T)
    j, tau = 1, 50.0
    times = np.arange(1, 13) * 20.0
    # within group A: k(dt)
    emp = (lat[:, 0, j, [0]] * lat[:, 0, j, :]).mean(axis=0)
    expected = k_cross(times[0], times, tau, sigma2=1e-3)
    assert np.max(np.abs(emp - expected)) < 0.08
    # across groups: lag shifted by the delay difference, no white component
    emp_x = (lat[:, 0, j, [0]] * lat[:, 1, j, :]).mean(axis=0)
    expected_x = k_cross(times[0], times, tau, d1=0.0, d2=-23.0, sigma2=1e-3, bump=False)
    assert np.max(np.abs(emp_x - expected_x)) < 0.08


def test_generate_freq_latent_covariance():
    groups, model = _demo_model(np.random.default_rng(4))
    rng = np.random.default_rng(5)
    ds = generate_freq(model, groups, N=4000, T=12, delta=20.0, rng=rng)
    lat = ds.latents
    assert lat.shape == (4000, 2, 4, 12)
    j, tau = 2, 80.0
    times = np.arange(1, 13) * 20.0
    emp = (lat[:, 0, j, [5]] * lat[:, 0, j, :]).mean(axis=0)
    expected = k_cross(times[5], times, tau, sigma2=1e-3)
    assert np.max(np.abs(emp - expected)) < 0.08
    # delayed cross-covariance for the feedforward latent
    emp_x = (lat[:, 0, 0, [5]] * lat[:, 1, 0, :]).mean(axis=0)
    expected_x = k_cross(times[5], times, 20.0, d1=0.0, d2=12.0, sigma2=1e-3, bump=False)
    assert np.max(np.abs(emp_x - expected_x)) < 0.08


def test_generate_freq_observation_model():
    groups, model = _demo_model(np.random.default_rng(6))
    rng = np.random.default_rng(7)
    ds = generate_freq(model, groups, N=2000, T=10, delta=20.0, rng=rng)
    np.testing.assert_allclose(ds.ys.mean(axis=(0, 2)), model["d"], atol=0.1)
    # unit variance: diag(CC^T) + noise
    expect_var = np.sum(model["C"] ** 2, axis=1) + model["noise_vars"]
    np.testing.assert_allclose(ds.ys.var(axis=(0, 2)), expect_var, rtol=0.12)


def test_scenarios_build():
    demo = make_scenario("demo")
    assert demo["groups"] == (10, 10)
    small = make_scenario("demo", N=5, T=16)
    ds = generate_scenario(small, seed=0)
    assert ds.ys.shape == (5, 20, 16)
    assert ds.ground_truth["scenario"] == "demo"

    sm = make_scenario("scaling_m", M=16)
    assert sum(sm["groups"]) == 24
    assert len(sm["groups"]) == 16
    ds2 = generate_scenario(make_scenario("scaling_m", M=3, N=4, T=20), seed=1)
    assert ds2.ys.shape == (4, 24, 20)
    # reference group delay pinned at zero, others drawn in [0, 20]
    d = ds2.ground_truth["delays"]
    assert d[0, 0] == 0.0
    assert np.all((d[:, 1:] >= 0.0) & (d[:, 1:] <= 20.0))


def test_scenario_rejects_unknown():
    with pytest.raises(ConfigError):
        make_scenario("nope")
    with pytest.raises(ConfigError):
        make_scenario("demo", bogus=3)


def test_dataset_roundtrip(tmp_path):
    ds = generate_scenario(make_scenario("demo", N=3, T=8), seed=2)
    base = save_dataset(tmp_path / "data", ds)
    back = load_dataset(base)
    np.testing.assert_array_equal(back.ys, ds.ys)
    assert back.delta == ds.delta
    assert back.groups.sizes == (10, 10)
    np.testing.assert_array_equal(back.ground_truth["C"], ds.ground_truth["C"])
    np.testing.assert_array_equal(back.ground_truth["taus"], ds.ground_truth["taus"])


def test_dataset_payload_size_checked(tmp_path):
    ds = generate_scenario(make_scenario("demo", N=2, T=5), seed=3)
    base = save_dataset(tmp_path / "data", ds)
    with open(base + ".bin", "ab") as fh:
        fh.write(b"\x00" * 8)
    with pytest.raises(ConfigError):
        load_dataset(base)
