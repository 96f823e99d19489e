"""Problem definition for parabolic integro-differential equations.

A problem instance bundles the coefficients of the forward jump-diffusion

    dX = b(X) dt + sigma(X) dW + int beta(X-, y) (mu - lambda dt)(dt, dy)

together with the driver ``f`` and terminal condition ``g`` of the associated
backward equation.  Every coefficient is *batched*: it receives arrays whose
leading axis indexes independent evaluation points and must return one result
per row.  Row-wise semantics are identical to a scalar call.

Shapes (``B`` rows, dimension ``d``):

=============  ==================================  ===========
coefficient    arguments                            returns
=============  ==================================  ===========
drift          x (B, d)                             (B, d)
diffusion      x (B, d)                             (B, d, d)
jump           x (B, d), y (B, d)                   (B, d)
driver         t float, x (B, d), y (B,),           (B,)
               z (B, d), w (B,)
terminal       x (B, d)                             (B,)
=============  ==================================  ===========
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

Array = np.ndarray
Sampler = Callable[[np.random.Generator, int], Array]


class NonFiniteError(FloatingPointError):
    """A coefficient or scheme term produced NaN or Inf."""

    def __init__(self, what: str, row: Optional[int] = None, detail: str = ""):
        self.what = what
        self.row = row
        msg = f"non-finite value in {what}"
        if row is not None:
            msg += f" (row {row})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def check_finite(values: Array, what: str) -> Array:
    values = np.asarray(values)
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))
        row = int(bad[0][0]) if values.ndim > 0 else None
        raise NonFiniteError(what, row)
    return values


@dataclass(frozen=True)
class LevyMeasure:
    """Finite jump measure stored as total mass times a probability sampler.

    ``sampler(rng, n)`` returns ``n`` i.i.d. marks of shape ``(n, dim)`` drawn
    from ``lambda / total_mass``.  ``moment_oracle`` maps a moment name to the
    exact value of ``int phi(y) lambda(dy)``; the names ``"y"`` (vector) and
    ``"y2"`` (``|y|^2``) are understood by the rest of the library.
    """

    dim: int
    total_mass: float
    sampler: Sampler
    moment_oracle: Optional[Mapping[str, object]] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("LevyMeasure.dim must be positive")
        if not (self.total_mass >= 0 and math.isfinite(self.total_mass)):
            raise ValueError(
                f"Levy measure must be finite and nonnegative, got total_mass={self.total_mass}"
            )

    def sample(self, rng: np.random.Generator, n: int) -> Array:
        marks = np.asarray(self.sampler(rng, n), dtype=np.float64).reshape(n, self.dim)
        return marks

    def has_moment(self, name: str) -> bool:
        return self.moment_oracle is not None and name in self.moment_oracle

    def moment(self, name: str):
        if not self.has_moment(name):
            raise KeyError(f"no closed-form moment {name!r} for this measure")
        return self.moment_oracle[name]


def gaussian_levy(dim: int, rate: float, mean=0.0, scale: float = 1.0) -> LevyMeasure:
    """``rate`` times the law of ``N(mean, scale^2 I)`` on R^dim."""
    mean_vec = np.broadcast_to(np.asarray(mean, dtype=np.float64), (dim,)).copy()

    def sampler(rng: np.random.Generator, n: int) -> Array:
        return mean_vec + scale * rng.standard_normal((n, dim))

    moments = {
        "y": rate * mean_vec,
        "y2": rate * (float(mean_vec @ mean_vec) + dim * scale**2),
    }
    return LevyMeasure(dim=dim, total_mass=float(rate), sampler=sampler, moment_oracle=moments)


def zero_levy(dim: int) -> LevyMeasure:
    return gaussian_levy(dim, 0.0)


@dataclass(frozen=True)
class PideModel:
    """Coefficients of one integro-differential problem on ``[0, horizon]``.

    Optional hooks:

    * ``jump_compensator(x) -> (B, d)``: exact ``int beta(x, y) lambda(dy)``.
      Without it the forward scheme estimates the compensator by Monte Carlo.
    * ``driver_grad(t, x, y, z, w) -> (df/dy (B,), df/dz (B, d), df/dw (B,))``:
      analytic driver partials.  Without it central differences are used.
    """

    dim: int
    horizon: float
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    jump: Callable[[Array, Array], Array]
    driver: Callable[..., Array]
    terminal: Callable[[Array], Array]
    levy: LevyMeasure
    lipschitz: float = 1.0
    jump_compensator: Optional[Callable[[Array], Array]] = None
    driver_grad: Optional[Callable[..., tuple]] = None
    name: str = "custom"

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be a positive integer")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.levy.dim != self.dim:
            raise ValueError(f"Levy measure dimension {self.levy.dim} != model dimension {self.dim}")
        if not self.lipschitz > 0:
            raise ValueError("lipschitz hint must be positive")


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")

    @property
    def h(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> Array:
        return np.arange(self.n_steps + 1) * self.horizon / self.n_steps

    def t(self, i: int) -> float:
        return i * self.horizon / self.n_steps


@dataclass
class ValidationReport:
    ratios: dict = field(default_factory=dict)
    lipschitz: float = 0.0
    slack: float = 0.0
    max_jump_at_origin: float = 0.0
    finite_mass: bool = True
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.finite_mass and not self.violations


def _ratio(num: Array, den: Array) -> float:
    keep = den > 0
    if not np.any(keep):
        return 0.0
    return float(np.max(num[keep] / den[keep]))


def validate_model(
    model: PideModel,
    probe_points: int = 1000,
    seed: int = 0,
    radius: float = 5.0,
    slack: float = 1e-2,
) -> ValidationReport:
    """Sampled smoke test of the Lipschitz and boundedness assumptions.

    Draws ``probe_points`` pairs uniformly from ``[-radius, radius]^d`` and
    records the largest difference quotient of every coefficient.  Ratios
    above ``lipschitz * (1 + slack)`` are reported and warned about; they are
    not errors because sampling proves nothing either way.  A non-finite
    coefficient value is an error.
    """
    if probe_points < 2:
        raise ValueError("probe_points must be at least 2")
    rng = np.random.default_rng(seed)
    d = model.dim
    x = rng.uniform(-radius, radius, (probe_points, d))
    xp = rng.uniform(-radius, radius, (probe_points, d))
    dx = np.linalg.norm(x - xp, axis=1)

    def ev(name, fn, *args):
        return check_finite(fn(*args), name)

    ratios = {}
    g1, g2 = ev("terminal", model.terminal, x), ev("terminal", model.terminal, xp)
    ratios["terminal"] = _ratio(np.abs(g1 - g2), dx)
    b1, b2 = ev("drift", model.drift, x), ev("drift", model.drift, xp)
    ratios["drift"] = _ratio(np.linalg.norm(b1 - b2, axis=1), dx)
    s1, s2 = ev("diffusion", model.diffusion, x), ev("diffusion", model.diffusion, xp)
    ratios["diffusion"] = _ratio(np.linalg.norm((s1 - s2).reshape(probe_points, -1), axis=1), dx)

    marks = model.levy.sample(rng, probe_points)
    j1, j2 = ev("jump", model.jump, x, marks), ev("jump", model.jump, xp, marks)
    ratios["jump"] = _ratio(np.linalg.norm(j1 - j2, axis=1), dx)
    j0 = ev("jump", model.jump, np.zeros_like(marks), marks)
    max_j0 = float(np.max(np.linalg.norm(j0, axis=1))) if probe_points else 0.0

    # driver: Lipschitz in (x, y, z, w) at a common time
    t = rng.uniform(0.0, model.horizon, probe_points)
    y1, y2 = rng.uniform(-radius, radius, (2, probe_points))
    z1, z2 = rng.uniform(-radius, radius, (2, probe_points, d))
    w1, w2 = rng.uniform(-radius, radius, (2, probe_points))
    f1 = np.array([ev("driver", model.driver, t[k], x[k:k + 1], y1[k:k + 1], z1[k:k + 1], w1[k:k + 1])[0]
                   for k in range(probe_points)])
    f2 = np.array([ev("driver", model.driver, t[k], xp[k:k + 1], y2[k:k + 1], z2[k:k + 1], w2[k:k + 1])[0]
                   for k in range(probe_points)])
    dist = dx + np.abs(y1 - y2) + np.linalg.norm(z1 - z2, axis=1) + np.abs(w1 - w2)
    ratios["driver"] = _ratio(np.abs(f1 - f2), dist)

    report = ValidationReport(
        ratios=ratios,
        lipschitz=model.lipschitz,
        slack=slack,
        max_jump_at_origin=max_j0,
        finite_mass=math.isfinite(model.levy.total_mass),
    )
    bound = model.lipschitz * (1.0 + slack)
    for name, r in ratios.items():
        if r > bound:
            report.violations.append(name)
            warnings.warn(
                f"{name}: sampled Lipschitz ratio {r:.4g} exceeds K={model.lipschitz:g}",
                stacklevel=2,
            )
    if max_j0 > bound:
        report.violations.append("jump_at_origin")
        warnings.warn(f"sup |beta(0, y)| ~ {max_j0:.4g} exceeds K={model.lipschitz:g}", stacklevel=2)
    return report


def nonlocal_operator_mc(
    model: PideModel,
    u: Callable[[float, Array], Array],
    t: float,
    x,
    n_samples: int,
    seed=0,
) -> float:
    """Monte Carlo estimate of ``int [u(t, x + beta(x, y)) - u(t, x)] lambda(dy)``.

    ``u(t, X)`` is batched over the rows of ``X``.  ``seed`` may be an int or
    a ``numpy.random.Generator``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mass = model.levy.total_mass
    if mass == 0:
        return 0.0
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64).reshape(1, model.dim)
    marks = model.levy.sample(rng, n_samples)
    xs = np.repeat(x, n_samples, axis=0)
    shifted = xs + check_finite(model.jump(xs, marks), "jump")
    diff = np.asarray(u(t, shifted)).reshape(n_samples) - np.asarray(u(t, x)).reshape(())
    return float(mass * check_finite(diff, "u").mean())
