import numpy as np
import pytest

from pidenn import nn
from pidenn.model import PideModel, TimeGrid, gaussian_levy, nonlocal_operator_mc
from pidenn.oracle import (
    ManufacturedProblem,
    error_report,
    feynman_kac_mc,
    ito_residuals,
    make_heat_problem,
    make_quadratic_manufactured,
    regularity_proxies,
)
from pidenn.sim import simulate_forward
from pidenn.train import TrainConfig, TrainedScheme, untrained_scheme

from conftest import make_model


def test_quadratic_degenerate_driver():
    p = make_quadratic_manufactured(1, 0.7, 0.0, 0.0, coupling=0.0)
    x = np.array([[0.3]])
    assert p.model.driver(0.0, x, np.zeros(1), np.zeros((1, 1)), np.zeros(1))[0] == 1.0
    assert p.u_star(0.0, [[0.0]])[0] == pytest.approx(0.7)


def test_quadratic_reference_values():
    p = make_quadratic_manufactured(1, 0.5, 1.0, 1.0, coupling=0.0)
    x = np.array([[1.0]])
    assert p.model.driver(0.0, x, np.zeros(1), np.zeros((1, 1)), np.zeros(1))[0] == -1.0
    assert p.u_star(0.0, x)[0] == 1.5
    # coupling term vanishes on the solution
    pc = make_quadratic_manufactured(1, 0.5, 1.0, 1.0, coupling=1.0)
    y = pc.u_star(0.2, x)
    assert pc.model.driver(0.2, x, y, np.zeros((1, 1)), np.zeros(1))[0] == -1.0


@pytest.mark.parametrize("d", [1, 3])
def test_quadratic_solves_the_equation(d):
    # check u_t + 0.5 tr(sigma sigma^T D^2 u) + I[u] + f = 0 with independent
    # finite differences and a Monte Carlo nonlocal term
    sigma0, lam, T = 0.8, 1.3, 1.0
    p = make_quadratic_manufactured(d, T, lam, sigma0, coupling=0.5)
    rng = np.random.default_rng(0)
    for _ in range(3):
        t = rng.uniform(0, T)
        x = rng.standard_normal((1, d))
        e = 1e-4
        u_t = (p.u_star(t + e, x) - p.u_star(t - e, x))[0] / (2 * e)
        lap = sum(
            (p.u_star(t, x + e * np.eye(d)[k]) - 2 * p.u_star(t, x) + p.u_star(t, x - e * np.eye(d)[k]))[0] / e**2
            for k in range(d)
        )
        n = 200_000
        nonloc = nonlocal_operator_mc(p.model, p.u_star, t, x[0], n, seed=1)
        se = lam * np.sqrt(4 * np.sum(x**2) + 2 * d) / np.sqrt(n)
        y = p.u_star(t, x)
        f = p.model.driver(t, x, y, p.z_star(t, x), p.gamma_star(t, x))[0]
        resid = u_t + 0.5 * sigma0**2 * lap + nonloc + f
        assert abs(resid) < 4 * se + 1e-5
        assert abs(nonloc - p.gamma_star(t, x)[0]) < 4 * se


def test_closed_forms_match_definitions():
    p = make_quadratic_manufactured(2, 1.0, 2.0, 0.6)
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    np.testing.assert_allclose(p.jump_diff(0.3, x, y), p.u_star(0.3, x + y) - p.u_star(0.3, x), atol=1e-12)
    e = 1e-6
    grad = np.stack([(p.u_star(0.3, x + e * v) - p.u_star(0.3, x - e * v)) / (2 * e) for v in np.eye(2)], axis=1)
    np.testing.assert_allclose(p.grad_u(0.3, x), grad, atol=1e-6)
    np.testing.assert_allclose(p.z_star(0.3, x), 0.6 * grad, atol=1e-6)


def test_ito_residual_mean_zero():
    p = make_quadratic_manufactured(1, 0.5, 1.0, 1.0)
    res = ito_residuals(p, TimeGrid(0.5, 5), [1.0], 10_000, seed=3)
    assert res.shape == (10_000, 5)
    for i in range(5):
        r = res[:, i]
        assert abs(r.mean()) < 4 * r.std(ddof=1) / np.sqrt(len(r))


def test_feynman_kac_constant():
    m = make_model(1, terminal=lambda x: np.full(x.shape[0], 2.5),
                   diffusion=lambda x: np.ones((x.shape[0], 1, 1)))
    est, half = feynman_kac_mc(m, TimeGrid(1.0, 4), [0.0], 1000, seed=0)
    assert est == 2.5 and half == 0.0


def test_feynman_kac_heat_kernel_moment():
    p = make_heat_problem(1, 0.5, 1.2)
    est, half = feynman_kac_mc(p.model, TimeGrid(0.5, 8), [0.4], 50_000, seed=2)
    assert abs(est - (0.16 + 1.44 * 0.5)) < 1.5 * half


def test_feynman_kac_manufactured():
    p = make_quadratic_manufactured(1, 0.5, 1.0, 1.0, coupling=0.0)
    est, half = feynman_kac_mc(p.model, TimeGrid(0.5, 10), [1.0], 20_000, seed=4)
    assert abs(est - 1.5) < 1.5 * half


def test_feynman_kac_ci_shrinks():
    p = make_heat_problem(1, 0.5, 1.0)
    _, h1 = feynman_kac_mc(p.model, TimeGrid(0.5, 4), [0.0], 4_000, seed=0)
    _, h2 = feynman_kac_mc(p.model, TimeGrid(0.5, 4), [0.0], 16_000, seed=0)
    assert h2 / h1 == pytest.approx(0.5, rel=0.1)


def linear_problem(a=0.8, c=0.3, sigma0=0.5, lam=2.0, T=1.0):
    """``u* = a x + c (T - t)`` in d=1: every network is an affine map."""
    model = PideModel(
        dim=1, horizon=T,
        drift=lambda x: np.zeros_like(x),
        diffusion=lambda x: np.full((x.shape[0], 1, 1), sigma0),
        jump=lambda x, y: np.asarray(y, dtype=float).copy(),
        driver=lambda t, x, y, z, w: np.full(np.shape(y), c),
        terminal=lambda x: a * x[:, 0],
        levy=gaussian_levy(1, lam),
        jump_compensator=lambda x: np.zeros_like(x),
    )
    return ManufacturedProblem(
        model=model,
        u_star=lambda t, x: a * np.atleast_2d(x)[:, 0] + c * (T - t),
        du_dt=lambda t, x: np.full(np.atleast_2d(x).shape[0], -c),
        grad_u=lambda t, x: np.full_like(np.atleast_2d(x), a),
        hessian=lambda t, x: np.zeros((np.atleast_2d(x).shape[0], 1, 1)),
        z_star=lambda t, x: np.full_like(np.atleast_2d(x), sigma0 * a),
        gamma_star=lambda t, x: np.zeros(np.atleast_2d(x).shape[0]),
        jump_diff=lambda t, x, y: a * np.atleast_2d(y)[:, 0],
    )


def exact_linear_scheme(grid, a=0.8, c=0.3, sigma0=0.5, lam=2.0):
    def aff(d_in, w, b):
        return nn.MlpParams(nn.MlpSpec(d_in, 1), [np.array([w], dtype=float)], [np.array([b], dtype=float)])

    nets = [nn.TriNet(aff(1, [a], c * (grid.horizon - grid.t(i))), aff(1, [0.0], sigma0 * a), aff(2, [0.0, a], 0.0))
            for i in range(grid.n_steps)]
    return TrainedScheme(grid, np.array([0.2]), nets, levy=gaussian_levy(1, lam))


def test_error_report_exact_scheme_at_noise_floor():
    p = linear_problem()
    grid = TimeGrid(1.0, 4)
    rep = error_report(exact_linear_scheme(grid), p, 2000, seed=0)
    np.testing.assert_allclose(rep.y_err, 0.0, atol=1e-25)
    np.testing.assert_allclose(rep.z_err, 0.0, atol=1e-25)
    # Gbar is a 64-mark estimate of a zero-mean integral; debiased error ~ se
    assert np.all(rep.gamma_err <= 4 * rep.gamma_se + 1e-12)
    assert rep.eps_z == 0.0


def test_error_report_untrained_matches_independent_pass():
    p = make_quadratic_manufactured(1, 0.5, 1.0, 1.0)
    grid = TimeGrid(0.5, 4)
    s = untrained_scheme(p.model, grid, [1.0], TrainConfig(seed=3))
    rep = error_report(s, p, 4000, seed=7)
    paths = simulate_forward(p.model, grid, [1.0], 4000, seed=99)
    for i in range(grid.n_steps):
        x = paths.states[:, i]
        e = (p.u_star(grid.t(i), x) - nn.predict(s.nets[i].u_net, x)[:, 0]) ** 2
        se = np.hypot(rep.y_se[i], e.std(ddof=1) / np.sqrt(len(e)))
        assert abs(rep.y_err[i] - e.mean()) < 4 * se


def test_error_report_is_pure_and_serializes():
    p = linear_problem()
    grid = TimeGrid(1.0, 3)
    s = exact_linear_scheme(grid)
    s.nets[1].u_net.biases[0] += 0.1
    a = error_report(s, p, 500, seed=1)
    b = error_report(s, p, 500, seed=1)
    assert a.to_csv() == b.to_csv()
    rows = a.to_csv().splitlines()
    assert rows[0] == "i,t_i,y_err,z_err,gamma_err"
    assert len(rows) == 1 + 3 + 1 and rows[-1].startswith("summary,")
    assert a.y_error == pytest.approx(0.01)
    for arr in (a.y_err, a.z_err, a.gamma_err):
        assert np.all(np.isfinite(arr)) and np.all(arr >= 0)


def test_error_report_grid_mismatch():
    p = linear_problem()
    s = exact_linear_scheme(TimeGrid(1.0, 3))
    with pytest.raises(ValueError):
        error_report(s, p, 100, grid=TimeGrid(1.0, 4))
    q = linear_problem(T=2.0)
    with pytest.raises(ValueError):
        error_report(s, q, 100)


def test_heat_problem_has_no_gamma_error():
    p = make_heat_problem(1, 0.5, 1.0)
    grid = TimeGrid(0.5, 3)
    s = untrained_scheme(p.model, grid, [0.0], TrainConfig())
    rep = error_report(s, p, 500, seed=0)
    assert np.all(rep.gamma_err == 0.0) and rep.eps_gamma == 0.0


def test_gamma_regularity_proxy_decreases_with_h():
    p = make_quadratic_manufactured(1, 0.5, 1.0, 1.0)
    eps = [regularity_proxies(p, TimeGrid(0.5, n), [1.0], 2000, seed=5)[1] for n in (5, 10, 20)]
    assert eps[0] > eps[1] > eps[2] > 0
    slope = np.polyfit(np.log([0.1, 0.05, 0.025]), np.log(eps), 1)[0]
    assert slope == pytest.approx(1.0, abs=0.3)
