"""Per-step loss of the backward scheme and its exact gradient.

For one time step the networks ``(U, Z, G)`` are scored on simulated
transitions ``x -> x_next`` by

    F = U(x) - h f(t, x, U(x), Z(x), Gbar(x)) + dW . Z(x) + J(x)
    Gbar(x) = Lambda * mean_l G(x, y_l)                  (y_l ~ lambda / Lambda)
    J(x)    = sum_jumps G(x, mark) - h * Gbar(x)

and ``loss = mean (u_next(x_next) - F)^2``.  The same marks ``y_l`` feed
``Gbar`` inside the driver and the compensator inside ``J``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from . import nn
from .model import Array, NonFiniteError, PideModel, TimeGrid, check_finite
from .sim import JumpRecord

FD_STEP = 1e-6


@dataclass(frozen=True)
class StepSample:
    x_i: Array
    x_next: Array
    dW: Array
    jumps: JumpRecord
    lambda_marks: Array  # (L, d)


@dataclass(frozen=True)
class StepBatch:
    """Vectorized collection of step samples.

    ``jump_owner[k]`` is the row of ``x`` that jump ``k`` belongs to.
    """

    x: Array  # (M, d)
    x_next: Array  # (M, d)
    dW: Array  # (M, d)
    jump_owner: Array  # (K,)
    jump_marks: Array  # (K, d)
    lambda_marks: Array  # (M, L, d)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[StepSample]) -> "StepBatch":
        if not samples:
            raise ValueError("need at least one sample")
        d = np.asarray(samples[0].x_i).size
        owner = np.concatenate(
            [np.full(s.jumps.count, k, dtype=np.int64) for k, s in enumerate(samples)]
        )
        marks = np.concatenate([np.asarray(s.jumps.marks).reshape(-1, d) for s in samples])
        return cls(
            x=np.stack([np.asarray(s.x_i, dtype=np.float64).reshape(d) for s in samples]),
            x_next=np.stack([np.asarray(s.x_next, dtype=np.float64).reshape(d) for s in samples]),
            dW=np.stack([np.asarray(s.dW, dtype=np.float64).reshape(d) for s in samples]),
            jump_owner=owner,
            jump_marks=marks,
            lambda_marks=np.stack([np.asarray(s.lambda_marks, dtype=np.float64).reshape(-1, d) for s in samples]),
        )

    def sample(self, k: int) -> StepSample:
        sel = self.jump_owner == k
        return StepSample(
            self.x[k], self.x_next[k], self.dW[k],
            JumpRecord(-1, np.zeros(int(sel.sum())), self.jump_marks[sel]),
            self.lambda_marks[k],
        )

    def take(self, rows: Array) -> "StepBatch":
        rows = np.asarray(rows)
        remap = np.full(self.size, -1)
        remap[rows] = np.arange(len(rows))
        keep = np.isin(self.jump_owner, rows)
        return StepBatch(
            self.x[rows], self.x_next[rows], self.dW[rows],
            remap[self.jump_owner[keep]], self.jump_marks[keep], self.lambda_marks[rows],
        )


def as_batch(samples: Union[StepBatch, Sequence[StepSample]]) -> StepBatch:
    return samples if isinstance(samples, StepBatch) else StepBatch.from_samples(samples)


def _g_inputs(x: Array, ys: Array) -> Array:
    return np.concatenate([np.broadcast_to(x, ys.shape), ys], axis=-1)


def lambda_integral_nn(g_net: nn.MlpParams, x, lambda_marks, total_mass: float) -> float:
    """``Lambda * mean_l G(x, y_l)`` for a single state ``x``."""
    if total_mass == 0:
        return 0.0
    ys = np.atleast_2d(np.asarray(lambda_marks, dtype=np.float64))
    if ys.shape[0] == 0:
        raise ValueError("lambda_marks must be nonempty")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return float(total_mass * nn.predict(g_net, _g_inputs(x, ys))[:, 0].mean())


def stochastic_jump_term_nn(
    g_net: nn.MlpParams, x, jumps: JumpRecord, h: float, total_mass: float, lambda_marks
) -> float:
    """``sum_j G(x, mark_j) - h * Lambda * mean_l G(x, y_l)`` for a single state."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    jump_sum = 0.0
    if jumps.count:
        marks = np.asarray(jumps.marks, dtype=np.float64).reshape(jumps.count, -1)
        jump_sum = float(nn.predict(g_net, _g_inputs(x, marks))[:, 0].sum())
    return jump_sum - h * lambda_integral_nn(g_net, x, lambda_marks, total_mass)


def f_step(model: PideModel, t: float, x, y, z, w):
    """Driver value and partials ``(f, df/dy, df/dz, df/dw)`` on a batch.

    Uses ``model.driver_grad`` when present, else central differences with
    step ``1e-6 * (1 + |arg|)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B, d = x.shape
    y = np.asarray(y, dtype=np.float64).reshape(B)
    z = np.asarray(z, dtype=np.float64).reshape(B, d)
    w = np.asarray(w, dtype=np.float64).reshape(B)
    drv = model.driver
    val = check_finite(np.asarray(drv(t, x, y, z, w), dtype=np.float64).reshape(B), "driver")
    if model.driver_grad is not None:
        fy, fz, fw = model.driver_grad(t, x, y, z, w)
        fy = np.broadcast_to(np.asarray(fy, dtype=np.float64), (B,))
        fz = np.broadcast_to(np.asarray(fz, dtype=np.float64), (B, d))
        fw = np.broadcast_to(np.asarray(fw, dtype=np.float64), (B,))
        return val, fy, fz, fw

    def diff(plus, minus, step):
        return (np.asarray(plus).reshape(B) - np.asarray(minus).reshape(B)) / (2.0 * step)

    sy = FD_STEP * (1.0 + np.abs(y))
    fy = diff(drv(t, x, y + sy, z, w), drv(t, x, y - sy, z, w), sy)
    sw = FD_STEP * (1.0 + np.abs(w))
    fw = diff(drv(t, x, y, z, w + sw), drv(t, x, y, z, w - sw), sw)
    fz = np.empty((B, d))
    for k in range(d):
        sz = FD_STEP * (1.0 + np.abs(z[:, k]))
        zp, zm = z.copy(), z.copy()
        zp[:, k] += sz
        zm[:, k] -= sz
        fz[:, k] = diff(drv(t, x, y, zp, w), drv(t, x, y, zm, w), sz)
    check_finite(fy, "driver partial y")
    check_finite(fz, "driver partial z")
    check_finite(fw, "driver partial w")
    return val, fy, fz, fw


@dataclass
class StepTape:
    batch: StepBatch
    u: Array
    z: Array
    gbar: Array
    jump_term: Array
    f: Array
    fy: Array
    fz: Array
    fw: Array
    u_tape: nn.Tape
    z_tape: nn.Tape
    g_tape: Optional[nn.Tape]
    n_lambda_rows: int


def step_map_F(model: PideModel, t_i: float, h: float, samples, trinet: nn.TriNet):
    """Evaluate ``F`` on every sample; returns ``(values (M,), tape)``."""
    batch = as_batch(samples)
    M, d = batch.x.shape
    if trinet.dim != model.dim or d != model.dim:
        raise ValueError("network/sample dimension does not match the model")
    mass = model.levy.total_mass
    u, u_tape = nn.forward(trinet.u_net, batch.x)
    z, z_tape = nn.forward(trinet.z_net, batch.x)
    u = u[:, 0]
    L = batch.lambda_marks.shape[1]
    g_tape = None
    n_lam = 0
    gbar = np.zeros(M)
    jump_sum = np.zeros(M)
    if mass > 0:
        if L == 0:
            raise ValueError("lambda_marks must be nonempty when the jump measure is nonzero")
        lam_in = _g_inputs(batch.x[:, None, :], batch.lambda_marks).reshape(M * L, 2 * d)
        jump_in = np.concatenate([batch.x[batch.jump_owner], batch.jump_marks], axis=1)
        g_out, g_tape = nn.forward(trinet.g_net, np.concatenate([lam_in, jump_in]))
        n_lam = M * L
        gbar = mass * g_out[:n_lam, 0].reshape(M, L).mean(axis=1)
        jump_sum = np.bincount(batch.jump_owner, weights=g_out[n_lam:, 0], minlength=M)
    jump_term = jump_sum - h * gbar
    f, fy, fz, fw = f_step(model, t_i, batch.x, u, z, gbar)
    value = u - h * f + np.sum(batch.dW * z, axis=1) + jump_term
    tape = StepTape(batch, u, z, gbar, jump_term, f, fy, fz, fw, u_tape, z_tape, g_tape, n_lam)
    return value, tape


@dataclass
class LossEstimate:
    value: float
    grads: nn.TriNet
    batch_size: int
    samples_per_integral: int
    residuals: Optional[Array] = None


def step_map_backward(model: PideModel, h: float, trinet: nn.TriNet, tape: StepTape, value_grad: Array) -> nn.TriNet:
    """Pull ``dLoss/dF`` (one entry per sample) back to all three networks."""
    batch = tape.batch
    M, d = batch.x.shape
    gF = np.asarray(value_grad, dtype=np.float64).reshape(M)
    gu = gF * (1.0 - h * tape.fy)
    gz = gF[:, None] * (batch.dW - h * tape.fz)
    u_grads, _ = nn.backward(trinet.u_net, tape.u_tape, gu[:, None])
    z_grads, _ = nn.backward(trinet.z_net, tape.z_tape, gz)
    if tape.g_tape is None:
        g_grads = nn.MlpParams.zeros(trinet.g_net.spec)
    else:
        L = batch.lambda_marks.shape[1]
        # Gbar enters through the driver's w-slot and through the compensator
        g_bar = gF * (-h * tape.fw - h)
        lam_rows = np.repeat(g_bar * model.levy.total_mass / L, L)
        jump_rows = gF[batch.jump_owner]
        g_grads, _ = nn.backward(trinet.g_net, tape.g_tape, np.concatenate([lam_rows, jump_rows])[:, None])
    return nn.TriNet(u_grads, z_grads, g_grads)


def loss_and_grad(
    model: PideModel,
    grid: TimeGrid,
    i: int,
    samples,
    u_next: Callable[[Array], Array],
    trinet: nn.TriNet,
) -> LossEstimate:
    """Empirical loss of step ``i`` and its exact gradient for ``trinet``.

    ``u_next`` maps a batch of states ``(M, d)`` to ``(M,)``; it is the frozen
    network of step ``i + 1`` or the terminal condition when ``i = N - 1``.
    """
    batch = as_batch(samples)
    if not 0 <= i < grid.n_steps:
        raise IndexError(f"step index {i} outside 0..{grid.n_steps - 1}")
    h = grid.h
    F, tape = step_map_F(model, grid.t(i), h, batch, trinet)
    target = np.asarray(u_next(batch.x_next), dtype=np.float64).reshape(batch.size)
    resid = target - F
    bad = ~np.isfinite(resid)
    if np.any(bad):
        raise NonFiniteError("loss", int(np.argmax(bad)), f"sample {int(np.argmax(bad))} at step {i}")
    M = batch.size
    value = float(np.mean(resid * resid))
    grads = step_map_backward(model, h, trinet, tape, -2.0 * resid / M)
    return LossEstimate(value, grads, M, batch.lambda_marks.shape[1], resid)


def frozen_u(trinet: nn.TriNet) -> Callable[[Array], Array]:
    """Evaluator of a private copy of ``trinet.u_net``."""
    params = trinet.u_net.copy()

    def u(x):
        return nn.predict(params, np.atleast_2d(x))[:, 0]

    return u


def terminal_u(model: PideModel) -> Callable[[Array], Array]:
    def u(x):
        return np.asarray(model.terminal(np.atleast_2d(x)), dtype=np.float64)

    return u
