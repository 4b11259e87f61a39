import io

import numpy as np
import pytest

from stogeo.diffusion import (DiffusionSpec, PathEnsemble, estimate_mean_derivatives,
                              generator_residual, integrate_sde, kernel_regression,
                              sample_mean_se, silverman)
from stogeo.errors import DomainError, EstimationError, ShapeError
from stogeo.geometry import Euclidean, FlatTorus, Sphere2


def ou_spec():
    return DiffusionSpec(Euclidean(1), lambda t, x: -x, name="ou")


def test_brownian_variance():
    ens = integrate_sde(DiffusionSpec(Euclidean(1)), np.zeros(1), np.linspace(0, 1, 51),
                        100_000, seed=1, save=[0, 50])
    x = ens.paths[:, -1, 0]
    var = x.var(ddof=1)
    se = np.sqrt(2.0 / (len(x) - 1))
    assert abs(var - 1.0) <= 3 * se


def test_ou_mean_tracks_exponential():
    times = np.linspace(0, 1, 201)
    ens = integrate_sde(ou_spec(), np.ones(1), times, 100_000, seed=2, save=[0, 50, 100, 200])
    for k, t in enumerate(ens.times):
        m, se = sample_mean_se(ens.paths[:, k, 0])
        # Euler bias (1 - dt)^(t/dt) - e^{-t} is below 1e-3 here
        assert abs(m - np.exp(-t)) <= 3 * se + 1e-3


@pytest.mark.parametrize("th0", [1.0])
def test_sphere_cos_theta_decay(th0):
    K = 500
    ens = integrate_sde(DiffusionSpec(Sphere2()), np.array([th0, 0.0]), np.linspace(0, 1, K + 1),
                        20_000, seed=9, threads=4, save=[0, K // 2, K])
    for k, t in enumerate(ens.times[1:], 1):
        m, se = sample_mean_se(np.cos(ens.paths[:, k, 0]))
        assert abs(m - np.cos(th0) * np.exp(-t)) <= 3 * se


@pytest.mark.xfail(strict=True, reason="chart Euler scheme is biased next to the pole; "
                   "measured 15 SE at t=1 with N=1e5, K=1000")
def test_sphere_cos_theta_decay_near_pole():
    K = 1000
    th0 = 0.1
    ens = integrate_sde(DiffusionSpec(Sphere2()), np.array([th0, 0.0]), np.linspace(0, 1, K + 1),
                        100_000, seed=7, threads=8, save=[0, K // 4, K // 2, K])
    for k, t in enumerate(ens.times[1:], 1):
        m, se = sample_mean_se(np.cos(ens.paths[:, k, 0]))
        assert abs(m - np.cos(th0) * np.exp(-t)) <= 3 * se


def test_thread_count_does_not_change_bytes():
    spec = DiffusionSpec(Sphere2())
    times = np.linspace(0, 0.5, 21)
    outs = [integrate_sde(spec, np.array([1.0, 0.5]), times, 10_000, seed=3, threads=k).to_bytes()
            for k in (1, 4, 8)]
    assert outs[0] == outs[1] == outs[2]


def test_prefix_paths_independent_of_N():
    spec = ou_spec()
    times = np.linspace(0, 1, 11)
    a = integrate_sde(spec, np.zeros(1), times, 5000, seed=4)
    b = integrate_sde(spec, np.zeros(1), times, 9000, seed=4)
    np.testing.assert_array_equal(a.paths, b.paths[:5000])


def test_seeds_differ():
    spec = ou_spec()
    times = np.linspace(0, 1, 11)
    a = integrate_sde(spec, np.zeros(1), times, 100, seed=1)
    b = integrate_sde(spec, np.zeros(1), times, 100, seed=2)
    assert not np.array_equal(a.paths, b.paths)


def test_weak_order_one_ou():
    # mean error of Euler for OU is (1 - dt)^(1/dt) - e^{-1}; halving dt halves it
    errs = []
    for K in (5, 10, 20):
        ens = integrate_sde(ou_spec(), np.ones(1), np.linspace(0, 1, K + 1), 1_000_000,
                            seed=5, save=[0, K])
        errs.append(np.exp(-1) - ens.paths[:, -1, 0].mean())
    for e0, e1 in zip(errs, errs[1:]):
        assert 2 * 0.7 <= e0 / e1 <= 2 * 1.3


def test_periodic_wrap_and_domain_errors():
    ens = integrate_sde(DiffusionSpec(FlatTorus(1)), np.array([6.0]), np.linspace(0, 1, 11),
                        500, seed=1)
    assert np.all((ens.paths >= 0) & (ens.paths < 2 * np.pi))
    with pytest.raises(DomainError):
        integrate_sde(DiffusionSpec(Sphere2()), np.array([0.0, 0.0]), np.linspace(0, 1, 3), 5, 0)
    with pytest.raises(ShapeError):
        integrate_sde(ou_spec(), np.zeros(1), np.array([0.0, 0.5, 0.6]), 5, 0)
    with pytest.raises(ShapeError):
        integrate_sde(ou_spec(), np.zeros(1), np.linspace(0, 1, 3), 0, 0)


def test_killed_fraction_warning():
    spec = DiffusionSpec(Sphere2(pole_exclusion=0.5))
    with pytest.warns(RuntimeWarning):
        ens = integrate_sde(spec, np.array([0.55, 0.0]), np.linspace(0, 1, 101), 2000, seed=1)
    assert ens.metadata["killed_fraction"] > 0.5
    assert "quality_warning" in ens.metadata


def test_stopped_paths_stay_in_domain():
    m = Sphere2(pole_exclusion=0.3)
    with pytest.warns(RuntimeWarning):
        ens = integrate_sde(DiffusionSpec(m), np.array([0.4, 0.0]), np.linspace(0, 1, 101),
                            2000, seed=2)
    assert np.all(m.in_domain(ens.paths))
    # once stopped, always stopped
    assert np.all(ens.alive[:, 1:] <= ens.alive[:, :-1])


def test_sampler_init():
    ens = integrate_sde(ou_spec(), lambda rng, n: rng.normal(size=(n, 1)),
                        np.linspace(0, 1, 3), 20_000, seed=3)
    m, se = sample_mean_se(ens.paths[:, 0, 0])
    assert abs(m) < 4 * se
    again = integrate_sde(ou_spec(), lambda rng, n: rng.normal(size=(n, 1)),
                          np.linspace(0, 1, 3), 20_000, seed=3)
    np.testing.assert_array_equal(ens.paths, again.paths)


def test_binary_and_csv_roundtrip():
    ens = integrate_sde(ou_spec(), np.zeros(1), np.linspace(0, 1, 5), 7, seed=3)
    back = PathEnsemble.from_bytes(ens.to_bytes())
    np.testing.assert_array_equal(back.paths, ens.paths)
    np.testing.assert_array_equal(back.times, ens.times)
    np.testing.assert_array_equal(back.alive, ens.alive)
    assert back.seed == 3
    assert ens.to_bytes()[:4] == b"SGPE"
    text = ens.to_csv()
    lines = text.splitlines()
    assert lines[0] == "path,step,t,x0,alive"
    assert len(lines) == 1 + 7 * 5
    vals = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1)
    np.testing.assert_array_equal(vals[:, 3].reshape(7, 5), ens.paths[..., 0])
    with pytest.raises(ValueError):
        PathEnsemble.from_bytes(b"XXXX" + ens.to_bytes()[4:])


def test_time_index():
    ens = integrate_sde(ou_spec(), np.zeros(1), np.linspace(0, 1, 5), 3, seed=3)
    assert ens.time_index(0.5) == 2
    with pytest.raises(DomainError):
        ens.time_index(0.3)


def test_brownian_mean_derivatives():
    ens = integrate_sde(DiffusionSpec(Euclidean(1)), np.zeros(1), np.linspace(0, 1, 101),
                        100_000, seed=6, save=[50, 51])
    f = estimate_mean_derivatives(ens, ens.times[0], np.linspace(-1, 1, 9))
    assert np.all(f.mask)
    assert np.max(np.abs(f.DX)) <= 0.05 * np.sqrt(1 / 0.01) and np.max(np.abs(f.DX / f.DX_se[:, :1])) < 5
    assert np.max(np.abs(f.QX - 1.0)) <= 0.05


@pytest.fixture(scope="module")
def ou_one_step():
    # stationary start N(0, 1/2); the Euler increment has mean -x dt exactly
    ens = integrate_sde(ou_spec(), lambda rng, n: rng.normal(0, np.sqrt(0.5), (n, 1)),
                        np.array([0.0, 0.1]), 400_000, seed=7)
    return ens


def test_ou_drift_slope(ou_one_step):
    pts = np.linspace(-1, 1, 21)
    f = estimate_mean_derivatives(ou_one_step, 0.0, pts, bandwidth=0.05)
    w = 1 / f.DX_se[:, 0] ** 2
    A = np.stack([np.ones_like(pts), pts], 1)
    coef = np.linalg.solve(A.T @ (w[:, None] * A), A.T @ (w * f.DX[:, 0]))
    assert coef[1] == pytest.approx(-1.0, abs=0.05)


def test_sphere_nabla_identity():
    m = Sphere2()
    ens = integrate_sde(DiffusionSpec(m), np.array([1.2, 1.0]), np.linspace(0, 0.2, 21),
                        20_000, seed=8, save=[10, 11])
    pts = np.array([[1.1, 1.0], [1.2, 1.0], [1.3, 0.9]])
    f = estimate_mean_derivatives(ens, ens.times[0], pts, model=m)
    expect = f.DX + 0.5 * np.einsum("gijk,gjk->gi", m.christoffel(pts), f.QX)
    assert np.max(np.abs(f.DnablaX - expect)) <= 1e-14
    np.testing.assert_allclose(f.QX, np.swapaxes(f.QX, 1, 2))
    assert np.all(np.linalg.eigvalsh(f.QX[f.mask]) >= 0)


def test_generator_self_consistency():
    # small dt: the quotient E[dX^2]/dt carries an O(dt) bias x^2 dt
    spec = ou_spec()
    ens = integrate_sde(spec, np.zeros(1), np.linspace(0, 1, 101), 100_000, seed=9,
                        save=[50, 51])
    r = generator_residual(ens, spec, ens.times[0], np.linspace(-0.6, 0.6, 7), bandwidth=0.05)
    assert r.consistent


def test_generator_mismatch_flagged(ou_one_step):
    bm = DiffusionSpec(Euclidean(1))
    r = generator_residual(ou_one_step, bm, 0.0, np.linspace(-0.6, 0.6, 7), bandwidth=0.05)
    assert not r.consistent
    assert r.drift_residual == pytest.approx(0.6, abs=0.1)


def test_degenerate_ensemble_errors():
    ens = integrate_sde(ou_spec(), np.zeros(1), np.linspace(0, 1, 3), 1, seed=1)
    with pytest.raises(EstimationError):
        generator_residual(ens, ou_spec(), 0.0, np.zeros((1, 1)))
    ens = integrate_sde(ou_spec(), np.zeros(1), np.linspace(0, 1, 3), 100, seed=1)
    with pytest.raises(EstimationError):
        estimate_mean_derivatives(ens, 0.0, np.array([[50.0]]))
    with pytest.raises(EstimationError):
        estimate_mean_derivatives(ens, 0.5, np.zeros((1, 1)), bandwidth=0.0)
    with pytest.raises(DomainError):
        estimate_mean_derivatives(ens, 1.0, np.zeros((1, 1)))


def test_kernel_regression_linear_exact_at_center():
    x = np.linspace(-1, 1, 2001)[:, None]
    y = 3 * x
    mean, var, n_eff = kernel_regression(x, y, np.zeros((1, 1)), np.array([0.1]))
    assert mean[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert silverman(x)[0] == pytest.approx(1.06 * x.std() * 2001 ** -0.2)


def test_spec_digest_tracks_name():
    a = DiffusionSpec(Euclidean(1), name="a").digest()
    assert a == DiffusionSpec(Euclidean(1), name="a").digest()
    assert a != DiffusionSpec(Euclidean(1), name="b").digest()
