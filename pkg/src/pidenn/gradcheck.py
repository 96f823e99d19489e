"""Central finite-difference checks of the hand-written gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np

from . import nn
from .model import Array, PideModel, TimeGrid, gaussian_levy
from .scheme import StepBatch, loss_and_grad

FD_STEP = 1e-6
# denominators below this are treated as this, so vanishing coordinates
# are compared on an absolute scale instead of producing 0/0
REL_FLOOR = 1e-3


def fd_gradient(fn: Callable[[Array], float], vec: Array, step: float = FD_STEP) -> Array:
    vec = np.asarray(vec, dtype=np.float64)
    out = np.empty_like(vec)
    for k in range(vec.size):
        p, m = vec.copy(), vec.copy()
        p[k] += step
        m[k] -= step
        out[k] = (fn(p) - fn(m)) / (2.0 * step)
    return out


def relative_error(analytic: Array, numeric: Array, floor: float = REL_FLOOR) -> Array:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def worst(errors: Array) -> float:
    return float(np.max(errors)) if np.size(errors) else 0.0


def check_mlp(spec: nn.MlpSpec, seed: int = 0, batch: int = 4) -> float:
    """Worst coordinate error of ``nn.backward`` (parameters and input)."""
    rng = np.random.default_rng(seed)
    params = nn.init(spec, rng)
    for b in params.biases:
        b += 0.1 * rng.standard_normal(b.shape)
    x = rng.standard_normal((batch, spec.input_dim))
    og = rng.standard_normal((batch, spec.output_dim))
    out, tape = nn.forward(params, x)
    grads, gx = nn.backward(params, tape, og)

    def f_theta(vec):
        return float(np.sum(og * nn.predict(nn.MlpParams.unflatten(spec, vec), x)))

    def f_x(vec):
        return float(np.sum(og * nn.predict(params, vec.reshape(x.shape))))

    e1 = relative_error(grads.flatten(), fd_gradient(f_theta, params.flatten()))
    e2 = relative_error(gx.ravel(), fd_gradient(f_x, x.ravel()))
    return max(worst(e1), worst(e2))


def gradcheck_model(d: int, rate: float = 1.5, analytic: bool = False) -> PideModel:
    """Small nonlinear problem whose driver uses all of ``(y, z, w)``."""

    def driver(t, x, y, z, w):
        return 0.3 * np.sin(y) + 0.2 * np.tanh(np.sum(z, axis=1)) + 0.25 * w * np.cos(y) + 0.1 * np.sum(x, axis=1) + t

    def driver_grad(t, x, y, z, w):
        s = 1.0 - np.tanh(np.sum(z, axis=1)) ** 2
        fy = 0.3 * np.cos(y) - 0.25 * w * np.sin(y)
        fz = np.repeat((0.2 * s)[:, None], z.shape[1], axis=1)
        fw = 0.25 * np.cos(y)
        return fy, fz, fw

    return PideModel(
        dim=d,
        horizon=1.0,
        drift=lambda x: -0.5 * x,
        diffusion=lambda x: np.broadcast_to(0.4 * np.eye(d), (x.shape[0], d, d)),
        jump=lambda x, y: 0.5 * y,
        driver=driver,
        terminal=lambda x: np.sum(np.sin(x), axis=1),
        levy=gaussian_levy(d, rate),
        driver_grad=driver_grad if analytic else None,
        name="gradcheck",
    )


def random_step_batch(d: int, M: int, L: int, rng: np.random.Generator, jump_rate: float = 1.0) -> StepBatch:
    counts = rng.poisson(jump_rate, M)
    return StepBatch(
        x=rng.standard_normal((M, d)),
        x_next=rng.standard_normal((M, d)),
        dW=0.3 * rng.standard_normal((M, d)),
        jump_owner=np.repeat(np.arange(M), counts),
        jump_marks=rng.standard_normal((int(counts.sum()), d)),
        lambda_marks=rng.standard_normal((M, L, d)),
    )


def check_loss(d: int, widths: Sequence[int], activation: str = "tanh", seed: int = 0,
               analytic: bool = False, M: int = 6, L: int = 3, corrupt: bool = False) -> float:
    """Worst coordinate error of ``loss_and_grad`` on a frozen sample set."""
    rng = np.random.default_rng(seed)
    model = gradcheck_model(d, analytic=analytic)
    grid = TimeGrid(1.0, 5)
    net = nn.trinet_init(d, widths, activation, rng)
    batch = random_step_batch(d, M, L, rng)

    def u_next(x):
        return np.cos(np.sum(x, axis=1))

    est = loss_and_grad(model, grid, 2, batch, u_next, net)
    analytic_grad = est.grads.flatten()
    if corrupt:
        analytic_grad[rng.integers(analytic_grad.size)] += 1.0

    def fn(vec):
        return loss_and_grad(model, grid, 2, batch, u_next, net.with_flat(vec)).value

    return worst(relative_error(analytic_grad, fd_gradient(fn, net.flatten())))


def random_spec(rng: np.random.Generator, max_params: int) -> nn.MlpSpec:
    """Random architecture with between half of and ``max_params`` parameters."""
    best = None
    for _ in range(2000):
        d_in = int(rng.integers(1, 5))
        d_out = int(rng.integers(1, 4))
        depth = int(rng.integers(0, 4))
        widths = tuple(int(w) for w in rng.integers(1, 33, depth))
        act = str(rng.choice(nn.ACTIVATIONS))
        spec = nn.MlpSpec(d_in, d_out, widths, act)
        if spec.n_params <= max_params:
            if spec.n_params >= max_params // 2:
                return spec
            if best is None or spec.n_params > best.n_params:
                best = spec
    if best is None:
        raise ValueError(f"no architecture fits in {max_params} parameters")
    return best


def trinet_params(d: int, widths: Sequence[int]) -> int:
    return (nn.MlpSpec(d, 1, widths).n_params + nn.MlpSpec(d, d, widths).n_params
            + nn.MlpSpec(2 * d, 1, widths).n_params)


@dataclass
class GradcheckResult:
    worst: float
    tolerance: float
    cases: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


DEFAULT_SIZES = (40, 120, 300, 600, 1000)


def run_gradcheck(seed: int = 0, sizes: Sequence[int] = DEFAULT_SIZES, tolerance: float = 1e-5,
                  corrupt: bool = False) -> GradcheckResult:
    """Check ``nn.backward`` on one random architecture per size budget and
    ``loss_and_grad`` on a small trinet per size budget.

    Budgets too small to hold any network are skipped.  ``corrupt`` perturbs
    one analytic gradient coordinate so the check must fail.
    """
    rng = np.random.default_rng(seed)
    cases: List[Tuple[str, float]] = []
    for budget in sizes:
        if budget < 2:
            continue
        spec = random_spec(rng, budget)
        err = check_mlp(spec, int(rng.integers(2**31)))
        cases.append((f"mlp {spec.layer_sizes} {spec.activation} ({spec.n_params} params)", err))
    for k, budget in enumerate(sizes):
        d = 1 + k % 2
        if trinet_params(d, (1, 1)) > budget:
            continue
        w = 1
        while trinet_params(d, (w + 1, w + 1)) <= budget:
            w += 1
        act = nn.ACTIVATIONS[k % 2]  # bounded activations keep the loss smooth
        err = check_loss(d, (w, w), act, int(rng.integers(2**31)), analytic=bool(k % 2), corrupt=corrupt)
        cases.append((f"loss d={d} widths=({w}, {w}) {act} ({trinet_params(d, (w, w))} params)", err))
    if corrupt and not any("loss" in c for c, _ in cases):
        cases.append(("loss (fault injected)", check_loss(1, (2,), "tanh", seed, corrupt=True)))
    return GradcheckResult(max((e for _, e in cases), default=0.0), tolerance, cases)
