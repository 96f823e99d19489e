"""Forward simulation of the jump-diffusion on a time grid.

Random numbers come from independent streams keyed by
``(root seed, *prefix, interval, purpose)`` so a batch is reproducible
bit-for-bit regardless of the order in which intervals are generated.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .model import Array, LevyMeasure, NonFiniteError, PideModel, TimeGrid, check_finite

PURPOSES = ("brownian", "jumpcount", "jumptime", "mark", "compensator", "lambda", "init")

SeedLike = Union[int, Sequence[int]]


def stream(seed: SeedLike, *keys) -> np.random.Generator:
    """Independent generator for ``seed`` extended by integer/purpose ``keys``."""
    if isinstance(seed, (int, np.integer)):
        root, prefix = int(seed), ()
    else:
        seed = tuple(int(s) for s in seed)
        root, prefix = seed[0], seed[1:]
    spawn = []
    for k in keys:
        spawn.append(PURPOSES.index(k) if isinstance(k, str) else int(k))
    ss = np.random.SeedSequence(entropy=root, spawn_key=tuple(prefix) + tuple(spawn))
    return np.random.Generator(np.random.PCG64(ss))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class JumpRecord:
    interval_index: int
    jump_times: Array
    marks: Array

    @property
    def count(self) -> int:
        return len(self.jump_times)


def _uniform_times(rng: np.random.Generator, n: int, t_lo: float, t_hi: float) -> Array:
    # 1 - U lies in (0, 1], so times land in (t_lo, t_hi]
    return t_lo + (t_hi - t_lo) * (1.0 - rng.random(n))


def sample_poisson_measure(
    levy: LevyMeasure, t_lo: float, t_hi: float, rng_stream, interval_index: int = 0
) -> JumpRecord:
    """Draw the Poisson random measure restricted to ``(t_lo, t_hi]``."""
    if not t_lo < t_hi:
        raise ValueError("need t_lo < t_hi")
    rng = _as_generator(rng_stream)
    count = rng.poisson((t_hi - t_lo) * levy.total_mass) if levy.total_mass > 0 else 0
    times = np.sort(_uniform_times(rng, count, t_lo, t_hi))
    marks = levy.sample(rng, count) if count else np.zeros((0, levy.dim))
    return JumpRecord(interval_index, times, marks)


def jump_compensator(model: PideModel, x: Array, samples: int, rng) -> Array:
    """``int beta(x, y) lambda(dy)`` per row of ``x``: exact if the model knows it."""
    x = np.atleast_2d(x)
    if model.levy.total_mass == 0:
        return np.zeros_like(x)
    if model.jump_compensator is not None:
        return np.broadcast_to(model.jump_compensator(x), x.shape).astype(np.float64)
    rng = _as_generator(rng)
    n = x.shape[0]
    marks = model.levy.sample(rng, n * samples)
    beta = model.jump(np.repeat(x, samples, axis=0), marks).reshape(n, samples, model.dim)
    return model.levy.total_mass * beta.mean(axis=1)


def _euler_rows(model, x, h, dw, owner, marks, compensator_samples, rng):
    drift = check_finite(model.drift(x), "drift")
    sig = check_finite(model.diffusion(x), "diffusion")
    diffusion = np.einsum("mij,mj->mi", sig, dw)
    jumps = np.zeros_like(x)
    if len(owner):
        beta = check_finite(model.jump(x[owner], marks), "jump")
        for k in range(model.dim):
            jumps[:, k] = np.bincount(owner, weights=beta[:, k], minlength=x.shape[0])
    comp = check_finite(jump_compensator(model, x, compensator_samples, rng), "jump compensator")
    out = x + h * drift + diffusion + jumps - h * comp
    return check_finite(out, "euler step")


def euler_step(
    model: PideModel,
    x,
    h: float,
    dW,
    jumps: JumpRecord,
    compensator_samples: int = 64,
    rng_stream=None,
) -> Array:
    """One Euler step of the jump-diffusion from a single point ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(1, model.dim)
    dw = np.asarray(dW, dtype=np.float64).reshape(1, model.dim)
    owner = np.zeros(jumps.count, dtype=np.int64)
    marks = np.asarray(jumps.marks, dtype=np.float64).reshape(jumps.count, model.dim)
    rng = _as_generator(rng_stream)
    return _euler_rows(model, x, h, dw, owner, marks, compensator_samples, rng)[0]


@dataclass(frozen=True)
class PathBatch:
    """``M`` simulated paths on ``N`` intervals.

    Jumps are stored flat, ordered by interval, then path, then time.
    ``jump_counts[m, i]`` is the number of jumps of path ``m`` in interval ``i``.
    """

    states: Array  # (M, N+1, d)
    brownian_increments: Array  # (M, N, d)
    jump_counts: Array  # (M, N) int64
    jump_times: Array  # (K,)
    jump_marks: Array  # (K, d)

    @property
    def batch_size(self) -> int:
        return self.states.shape[0]

    @property
    def n_intervals(self) -> int:
        return self.brownian_increments.shape[1]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    def _offsets(self) -> Array:
        return np.concatenate([[0], np.cumsum(self.jump_counts.T.ravel())])

    def interval_jumps(self, i: int):
        """``(owner, times, marks)`` of all jumps in interval ``i``."""
        off = self._offsets()
        M = self.batch_size
        lo, hi = off[i * M], off[(i + 1) * M]
        owner = np.repeat(np.arange(M), self.jump_counts[:, i])
        return owner, self.jump_times[lo:hi], self.jump_marks[lo:hi]

    def jump_record(self, path: int, i: int) -> JumpRecord:
        off = self._offsets()
        k = i * self.batch_size + path
        return JumpRecord(i, self.jump_times[off[k]:off[k + 1]], self.jump_marks[off[k]:off[k + 1]])

    # binary cache format: "PIDB1", u32 version, u64 M, N, d, then little-endian f64 data
    MAGIC = b"PIDB1"
    VERSION = 1

    def to_bytes(self) -> bytes:
        M, N, d = self.batch_size, self.n_intervals, self.dim
        buf = io.BytesIO()
        buf.write(self.MAGIC)
        buf.write(struct.pack("<IQQQ", self.VERSION, M, N, d))
        buf.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(self.brownian_increments, dtype="<f8").tobytes())
        for m in range(M):
            for i in range(N):
                rec = self.jump_record(m, i)
                buf.write(struct.pack("<Q", rec.count))
                buf.write(np.ascontiguousarray(rec.jump_times, dtype="<f8").tobytes())
                buf.write(np.ascontiguousarray(rec.marks, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PathBatch":
        if blob[:5] != cls.MAGIC:
            raise ValueError("not a PathBatch blob (bad magic)")
        version, M, N, d = struct.unpack_from("<IQQQ", blob, 5)
        if version != cls.VERSION:
            raise ValueError(f"unsupported PathBatch version {version}")
        pos = 5 + struct.calcsize("<IQQQ")

        def take(n):
            nonlocal pos
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            return arr

        states = take(M * (N + 1) * d).reshape(M, N + 1, d)
        incs = take(M * N * d).reshape(M, N, d)
        counts = np.zeros((M, N), dtype=np.int64)
        per = {}
        for m in range(M):
            for i in range(N):
                (k,) = struct.unpack_from("<Q", blob, pos)
                pos += 8
                per[m, i] = (take(k), take(k * d).reshape(k, d))
                counts[m, i] = k
        if pos != len(blob):
            raise ValueError("trailing bytes in PathBatch blob")
        order = [per[m, i] for i in range(N) for m in range(M)]
        times = np.concatenate([t for t, _ in order]) if order else np.zeros(0)
        marks = np.concatenate([mk for _, mk in order]) if order else np.zeros((0, d))
        return cls(states, incs, counts, times, marks.reshape(-1, d))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PathBatch":
        return cls.from_bytes(Path(path).read_bytes())


def simulate_forward(
    model: PideModel,
    grid: TimeGrid,
    x0,
    batch: int,
    seed: SeedLike = 0,
    compensator_samples: int = 64,
    n_intervals: Optional[int] = None,
    brownian_increments: Optional[Array] = None,
) -> PathBatch:
    """Euler scheme for ``batch`` paths started at ``x0``.

    ``n_intervals`` truncates the simulation to the first intervals of the
    grid, which is all the backward training loop needs at early steps.
    ``brownian_increments`` of shape ``(batch, N, d)`` replaces the drawn
    increments, e.g. to couple several grids to one Brownian path.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    d, h = model.dim, grid.h
    N = grid.n_steps if n_intervals is None else n_intervals
    if not 0 <= N <= grid.n_steps:
        raise ValueError("n_intervals out of range")
    x0 = np.asarray(x0, dtype=np.float64).reshape(d)
    if brownian_increments is not None:
        brownian_increments = np.asarray(brownian_increments, dtype=np.float64)
        if brownian_increments.shape[0] != batch or brownian_increments.shape[2:] != (d,) \
                or brownian_increments.shape[1] < N:
            raise ValueError(f"brownian_increments must have shape ({batch}, {N}, {d})")
    states = np.empty((batch, N + 1, d))
    states[:, 0] = x0
    incs = np.empty((batch, N, d))
    counts = np.zeros((batch, N), dtype=np.int64)
    all_times, all_marks = [], []
    mass = model.levy.total_mass
    sqrt_h = np.sqrt(h)
    for i in range(N):
        t_lo, t_hi = grid.t(i), grid.t(i + 1)
        if brownian_increments is None:
            dw = sqrt_h * stream(seed, i, "brownian").standard_normal((batch, d))
        else:
            dw = brownian_increments[:, i]
        incs[:, i] = dw
        if mass > 0:
            cnt = stream(seed, i, "jumpcount").poisson(h * mass, batch)
            K = int(cnt.sum())
            owner = np.repeat(np.arange(batch), cnt)
            times = _uniform_times(stream(seed, i, "jumptime"), K, t_lo, t_hi)
            times = times[np.lexsort((times, owner))]
            marks = model.levy.sample(stream(seed, i, "mark"), K)
        else:
            cnt = np.zeros(batch, dtype=np.int64)
            owner = np.zeros(0, dtype=np.int64)
            times, marks = np.zeros(0), np.zeros((0, d))
        counts[:, i] = cnt
        all_times.append(times)
        all_marks.append(marks)
        try:
            states[:, i + 1] = _euler_rows(
                model, states[:, i], h, dw, owner, marks, compensator_samples,
                stream(seed, i, "compensator"),
            )
        except NonFiniteError as err:
            raise NonFiniteError(err.what, err.row, f"path {err.row}, interval {i}") from err
    return PathBatch(
        states=states,
        brownian_increments=incs,
        jump_counts=counts,
        jump_times=np.concatenate(all_times) if all_times else np.zeros(0),
        jump_marks=np.concatenate(all_marks).reshape(-1, d) if all_marks else np.zeros((0, d)),
    )


def compensated_integral(
    g_eval: Callable[[Array], Array],
    jumps: JumpRecord,
    h: float,
    levy: LevyMeasure,
    lambda_samples: int = 64,
    rng_stream=None,
    compensator: Optional[float] = None,
) -> float:
    """Realization of ``int g(y) mu_bar((t_i, t_i + h], dy)`` on one interval.

    ``compensator`` is the exact ``int g d lambda`` when known; otherwise it is
    estimated with ``lambda_samples`` fresh marks.
    """
    jump_sum = float(np.sum(g_eval(jumps.marks))) if jumps.count else 0.0
    if levy.total_mass == 0:
        return jump_sum
    if compensator is None:
        if lambda_samples < 1:
            raise ValueError("lambda_samples must be >= 1 without an exact compensator")
        ys = levy.sample(_as_generator(rng_stream), lambda_samples)
        compensator = levy.total_mass * float(np.mean(g_eval(ys)))
    return jump_sum - h * compensator
