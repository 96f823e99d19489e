"""Closed-form reference problems and error measurement for trained schemes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import nn
from .model import Array, PideModel, TimeGrid, gaussian_levy
from .sim import simulate_forward, stream
from .train import TrainedScheme


@dataclass(frozen=True)
class ManufacturedProblem:
    """A model together with the exact solution ``u*`` it was built around.

    ``z_star`` is ``sigma^T grad u*``, ``gamma_star`` is the nonlocal
    operator applied to ``u*``, and ``jump_diff(t, x, y)`` is
    ``u*(t, x + beta(x, y)) - u*(t, x)``.  All are batched over rows.
    """

    model: PideModel
    u_star: Callable[[float, Array], Array]
    du_dt: Callable[[float, Array], Array]
    grad_u: Callable[[float, Array], Array]
    hessian: Callable[[float, Array], Array]
    z_star: Callable[[float, Array], Array]
    gamma_star: Callable[[float, Array], Array]
    jump_diff: Callable[[float, Array, Array], Array]
    coupling: float = 0.0


def make_quadratic_manufactured(d: int, T: float, rate: float, sigma0: float, coupling: float = 1.0) -> ManufacturedProblem:
    """``u*(t, x) = |x|^2 + (T - t)`` with Gaussian jumps ``beta(x, y) = y``.

    With ``b = 0``, ``sigma = sigma0 I`` and ``lambda = rate * N(0, I)`` the
    generator applied to ``u*`` is ``-1 + sigma0^2 d + rate d``, so the driver

        f = 1 - sigma0^2 d - rate d + coupling * (y - u*(t, x))

    makes ``u*`` an exact solution; the coupling term vanishes on it.
    """
    if d < 1 or rate < 0:
        raise ValueError("need d >= 1 and rate >= 0")
    base = 1.0 - sigma0**2 * d - rate * d
    c = float(coupling)

    def u_star(t, x):
        x = np.atleast_2d(x)
        return np.sum(x * x, axis=1) + (T - t)

    def driver(t, x, y, z, w):
        if c == 0.0:
            return np.full(np.shape(y), base)
        return base + c * (np.asarray(y) - u_star(t, x))

    def driver_grad(t, x, y, z, w):
        B = np.shape(y)[0]
        return np.full(B, c), np.zeros((B, d)), np.zeros(B)

    model = PideModel(
        dim=d,
        horizon=T,
        drift=lambda x: np.zeros_like(x),
        diffusion=lambda x: np.broadcast_to(sigma0 * np.eye(d), (x.shape[0], d, d)),
        jump=lambda x, y: np.asarray(y, dtype=np.float64).copy(),
        driver=driver,
        terminal=lambda x: np.sum(np.atleast_2d(x) ** 2, axis=1),
        levy=gaussian_levy(d, rate),
        lipschitz=max(1.0, abs(c), sigma0),
        jump_compensator=lambda x: np.zeros_like(x),
        driver_grad=driver_grad,
        name="manufactured",
    )
    return ManufacturedProblem(
        model=model,
        u_star=u_star,
        du_dt=lambda t, x: -np.ones(np.atleast_2d(x).shape[0]),
        grad_u=lambda t, x: 2.0 * np.atleast_2d(x),
        hessian=lambda t, x: np.broadcast_to(2.0 * np.eye(d), (np.atleast_2d(x).shape[0], d, d)),
        z_star=lambda t, x: 2.0 * sigma0 * np.atleast_2d(x),
        gamma_star=lambda t, x: np.full(np.atleast_2d(x).shape[0], rate * d),
        jump_diff=lambda t, x, y: 2.0 * np.sum(np.atleast_2d(x) * y, axis=1) + np.sum(y * y, axis=1),
        coupling=c,
    )


def make_heat_problem(d: int, T: float, sigma0: float) -> ManufacturedProblem:
    """Pure diffusion, zero driver, ``g = |x|^2``: ``u = |x|^2 + sigma0^2 d (T - t)``."""
    model = PideModel(
        dim=d,
        horizon=T,
        drift=lambda x: np.zeros_like(x),
        diffusion=lambda x: np.broadcast_to(sigma0 * np.eye(d), (x.shape[0], d, d)),
        jump=lambda x, y: np.zeros_like(x),
        driver=lambda t, x, y, z, w: np.zeros(np.shape(y)),
        terminal=lambda x: np.sum(np.atleast_2d(x) ** 2, axis=1),
        levy=gaussian_levy(d, 0.0),
        lipschitz=max(1.0, sigma0),
        jump_compensator=lambda x: np.zeros_like(x),
        driver_grad=lambda t, x, y, z, w: (0.0, 0.0, 0.0),
        name="heat",
    )
    rate = sigma0**2 * d
    return ManufacturedProblem(
        model=model,
        u_star=lambda t, x: np.sum(np.atleast_2d(x) ** 2, axis=1) + rate * (T - t),
        du_dt=lambda t, x: np.full(np.atleast_2d(x).shape[0], -rate),
        grad_u=lambda t, x: 2.0 * np.atleast_2d(x),
        hessian=lambda t, x: np.broadcast_to(2.0 * np.eye(d), (np.atleast_2d(x).shape[0], d, d)),
        z_star=lambda t, x: 2.0 * sigma0 * np.atleast_2d(x),
        gamma_star=lambda t, x: np.zeros(np.atleast_2d(x).shape[0]),
        jump_diff=lambda t, x, y: np.zeros(np.atleast_2d(x).shape[0]),
    )


def feynman_kac_mc(model: PideModel, grid: TimeGrid, x0, M: int, seed=0) -> Tuple[float, float]:
    """``E[g(X_T) + sum_i h f(t_i, X_i)]`` and its 95% CI half-width.

    Only valid for drivers that ignore ``(y, z, w)``; they are passed zeros.
    """
    paths = simulate_forward(model, grid, x0, M, seed=seed)
    d, h = model.dim, grid.h
    vals = np.asarray(model.terminal(paths.states[:, -1]), dtype=np.float64)
    zeros, zeros_z = np.zeros(M), np.zeros((M, d))
    for i in range(grid.n_steps):
        vals = vals + h * np.asarray(model.driver(grid.t(i), paths.states[:, i], zeros, zeros_z, zeros))
    half = 1.96 * vals.std(ddof=1) / np.sqrt(M) if M > 1 else float("inf")
    return float(vals.mean()), float(half)


@dataclass
class ErrorReport:
    """Per-step errors of a trained scheme against a manufactured solution.

    ``y_err[i] = E|Y_i - U_i(X_i)|^2``; ``z_err[i]`` and ``gamma_err[i]`` are
    ``h`` times the mean-square errors of ``Z`` and ``Gbar``, so their sums
    approximate the time integrals.  ``*_se`` are Monte Carlo standard errors.
    """

    t: Array
    y_err: Array
    z_err: Array
    gamma_err: Array
    y_se: Array
    z_se: Array
    gamma_se: Array
    eps_z: float
    eps_gamma: float
    n_paths: int

    @property
    def y_error(self) -> float:
        return float(np.max(self.y_err))

    @property
    def z_error(self) -> float:
        return float(np.sum(self.z_err))

    @property
    def gamma_error(self) -> float:
        return float(np.sum(self.gamma_err))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["i", "t_i", "y_err", "z_err", "gamma_err"])
        for i, t in enumerate(self.t):
            w.writerow([i, repr(float(t)), repr(float(self.y_err[i])), repr(float(self.z_err[i])),
                        repr(float(self.gamma_err[i]))])
        w.writerow(["summary", "", repr(self.y_error), repr(self.z_error), repr(self.gamma_error)])
        return buf.getvalue()


def _mean_se(v: Array) -> Tuple[float, float]:
    n = v.shape[0]
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0


def regularity_proxies(problem: ManufacturedProblem, grid: TimeGrid, x0, M: int, seed=0,
                       substeps: int = 8, n_marks: int = 64) -> Tuple[float, float]:
    """Pathwise proxies for the L2-regularity of ``Z`` and of the jump field.

    Paths are simulated on a grid refined by ``substeps``.  On each coarse
    interval ``Z`` and ``y -> u*(t, X_t + beta) - u*(t, X_t)`` are compared
    with their own interval averages; the jump field is measured in the
    ``L2(lambda)`` norm with ``n_marks`` common marks.
    """
    model = problem.model
    fine = TimeGrid(grid.horizon, grid.n_steps * substeps)
    paths = simulate_forward(model, fine, x0, M, seed=seed)
    hf = fine.h
    mass = model.levy.total_mass
    marks = model.levy.sample(stream(seed, 0, "lambda"), n_marks) if mass > 0 else None
    eps_z = eps_g = 0.0
    for i in range(grid.n_steps):
        idx = range(i * substeps, (i + 1) * substeps)
        zs = np.stack([problem.z_star(fine.t(k), paths.states[:, k]) for k in idx], axis=1)
        eps_z += hf * float(np.mean(np.sum((zs - zs.mean(axis=1, keepdims=True)) ** 2, axis=2).sum(axis=1)))
        if marks is not None:
            us = np.stack([
                problem.jump_diff(fine.t(k), np.repeat(paths.states[:, k], n_marks, axis=0),
                                  np.tile(marks, (M, 1))).reshape(M, n_marks)
                for k in idx
            ], axis=1)
            dev = (us - us.mean(axis=1, keepdims=True)) ** 2
            eps_g += hf * mass * float(np.mean(dev.mean(axis=2).sum(axis=1)))
    return eps_z, eps_g


def error_report(
    scheme: TrainedScheme,
    problem: ManufacturedProblem,
    M_eval: int = 4096,
    seed=12345,
    n_marks: int = 64,
    grid: Optional[TimeGrid] = None,
    substeps: int = 8,
) -> ErrorReport:
    model = problem.model
    if grid is not None and grid != scheme.grid:
        raise ValueError(f"grid mismatch: scheme has {scheme.grid}, request has {grid}")
    grid = scheme.grid
    if abs(grid.horizon - model.horizon) > 1e-12 * model.horizon or len(scheme.nets) != grid.n_steps:
        raise ValueError("scheme grid does not match the problem")
    d, h, mass = model.dim, grid.h, model.levy.total_mass
    if n_marks < 2:
        raise ValueError("n_marks must be at least 2")
    paths = simulate_forward(model, grid, scheme.x0, M_eval, seed=seed)
    N = grid.n_steps
    out = {k: np.zeros(N) for k in ("y", "z", "g", "ys", "zs", "gs")}
    for i in range(N):
        t = grid.t(i)
        x = paths.states[:, i]
        net = scheme.nets[i]
        ey = (problem.u_star(t, x) - nn.predict(net.u_net, x)[:, 0]) ** 2
        ez = np.sum((problem.z_star(t, x) - nn.predict(net.z_net, x)) ** 2, axis=1)
        if mass > 0:
            ys = model.levy.sample(stream(seed, i, "lambda"), M_eval * n_marks)
            g = nn.predict(net.g_net, np.concatenate([np.repeat(x, n_marks, axis=0), ys], axis=1))
            gm = mass * g[:, 0].reshape(M_eval, n_marks)
            gbar = gm.mean(axis=1)
            # remove the mark-sampling variance of gbar so the estimate targets
            # E|Gamma - Gbar|^2 rather than that plus Var(G)/n_marks
            noise = gm.var(axis=1, ddof=1) / n_marks
        else:
            gbar = noise = np.zeros(M_eval)
        eg = (problem.gamma_star(t, x) - gbar) ** 2 - noise
        out["y"][i], out["ys"][i] = _mean_se(ey)
        m, s = _mean_se(ez)
        out["z"][i], out["zs"][i] = h * m, h * s
        m, s = _mean_se(eg)
        out["g"][i], out["gs"][i] = h * max(m, 0.0), h * s
    eps_z, eps_g = regularity_proxies(problem, grid, scheme.x0, min(M_eval, 2048), seed, substeps, n_marks)
    return ErrorReport(
        t=grid.nodes[:-1], y_err=out["y"], z_err=out["z"], gamma_err=out["g"],
        y_se=out["ys"], z_se=out["zs"], gamma_se=out["gs"],
        eps_z=eps_z, eps_gamma=eps_g, n_paths=M_eval,
    )


def ito_residuals(problem: ManufacturedProblem, grid: TimeGrid, x0, M: int, seed=0) -> Array:
    """One-step residuals of the discrete Ito identity along simulated paths.

    For each interval, ``u*(t_{i+1}, X_{i+1}) - [u*(t_i, X_i) - h f + Z* . dW
    + sum_jumps diff - h Gamma*]`` with all terms taken from the exact
    solution.  Returns an ``(M, N)`` array whose entries have mean zero up to
    the time-discretization error.
    """
    model = problem.model
    paths = simulate_forward(model, grid, x0, M, seed=seed)
    h = grid.h
    res = np.zeros((M, grid.n_steps))
    for i in range(grid.n_steps):
        t = grid.t(i)
        x = paths.states[:, i]
        u = problem.u_star(t, x)
        z = problem.z_star(t, x)
        gam = problem.gamma_star(t, x)
        f = model.driver(t, x, u, z, gam)
        owner, _, marks = paths.interval_jumps(i)
        jumps = np.zeros(M)
        if len(owner):
            jumps = np.bincount(owner, weights=problem.jump_diff(t, x[owner], marks), minlength=M)
        pred = u - h * f + np.sum(z * paths.brownian_increments[:, i], axis=1) + jumps - h * gam
        res[:, i] = problem.u_star(grid.t(i + 1), paths.states[:, i + 1]) - pred
    return res
