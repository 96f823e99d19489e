"""Backward-in-time training loop.

Step ``N-1`` fits against the terminal condition, every earlier step fits
against the frozen value network of the step after it.  Each step runs a
fixed number of Adam iterations; an "epoch" is one iteration on one freshly
simulated minibatch.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import nn
from .model import Array, LevyMeasure, NonFiniteError, PideModel, TimeGrid
from .scheme import StepBatch, frozen_u, loss_and_grad, terminal_u
from .sim import PathBatch, simulate_forward, stream

log = logging.getLogger(__name__)

TRAIN_TAG = 0


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, epoch: int, reason: str):
        self.step, self.epoch = step, epoch
        super().__init__(f"training aborted at step {step}, epoch {epoch}: {reason}")


@dataclass
class TrainConfig:
    batch_size: int = 2048
    lambda_samples: int = 16
    epochs: int = 400
    lr: float = 1e-3
    # used instead of lr on steps that start from a fresh initialization
    cold_start_lr: Optional[float] = 3e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warm_start: bool = True
    resimulate_per_epoch: bool = True
    seed: int = 0
    hidden_widths: Optional[Tuple[int, ...]] = None
    activation: str = "tanh"
    compensator_samples: int = 64
    divergence_factor: float = 10.0
    divergence_window: int = 50
    # the frozen network of a step is the mean of the iterates over this
    # final fraction of its epochs (0 keeps the last iterate)
    average_fraction: float = 0.25

    def __post_init__(self):
        for name in ("batch_size", "lambda_samples", "epochs", "compensator_samples", "divergence_window"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.lr > 0 or (self.cold_start_lr is not None and not self.cold_start_lr > 0):
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")
        if not 0 <= self.average_fraction < 1:
            raise ValueError("average_fraction must lie in [0, 1)")
        if self.hidden_widths is not None:
            self.hidden_widths = tuple(int(w) for w in self.hidden_widths)

    def to_dict(self) -> dict:
        out = asdict(self)
        if out["hidden_widths"] is not None:
            out["hidden_widths"] = list(out["hidden_widths"])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class TrainedScheme:
    grid: TimeGrid
    x0: Array
    nets: List[nn.TriNet]
    losses: List[Array] = field(default_factory=list)  # per step, one loss per epoch
    warnings: List[str] = field(default_factory=list)
    config: Optional[TrainConfig] = None
    levy: Optional[LevyMeasure] = None

    @property
    def final_losses(self) -> List[float]:
        return [float(l[-1]) if len(l) else float("nan") for l in self.losses]


def _step_batch(model, grid, x0, cfg, i, epoch, cached: Optional[PathBatch]) -> StepBatch:
    M, L, d = cfg.batch_size, cfg.lambda_samples, model.dim
    if cached is not None:
        paths, key = cached, (cfg.seed, TRAIN_TAG)
    else:
        key = (cfg.seed, TRAIN_TAG, i, epoch)
        paths = simulate_forward(
            model, grid, x0, M, seed=key,
            compensator_samples=cfg.compensator_samples, n_intervals=i + 1,
        )
    Mp = paths.batch_size
    owner, _, marks = paths.interval_jumps(i)
    if model.levy.total_mass > 0:
        lam = model.levy.sample(stream(key, i, "lambda"), Mp * L).reshape(Mp, L, d)
    else:
        lam = np.zeros((Mp, 0, d))
    return StepBatch(
        x=paths.states[:, i],
        x_next=paths.states[:, i + 1],
        dW=paths.brownian_increments[:, i],
        jump_owner=owner,
        jump_marks=marks,
        lambda_marks=lam,
    )


def initial_nets(model: PideModel, grid: TimeGrid, cfg: TrainConfig) -> List[nn.TriNet]:
    """Freshly initialized networks, one per step, as training would draw them."""
    return [
        nn.trinet_init(model.dim, cfg.hidden_widths, cfg.activation, stream(cfg.seed, "init", i))
        for i in range(grid.n_steps)
    ]


def untrained_scheme(model: PideModel, grid: TimeGrid, x0, cfg: TrainConfig) -> TrainedScheme:
    x0 = np.asarray(x0, dtype=np.float64).reshape(model.dim)
    return TrainedScheme(grid, x0, initial_nets(model, grid, cfg), config=cfg, levy=model.levy)


SMOOTHING = 10


def _diverged(history: List[float], cfg: TrainConfig) -> bool:
    """Has the smoothed loss risen ``divergence_factor`` times above its
    minimum over the last ``divergence_window`` epochs?

    Single-batch losses are heavy tailed when jumps are present, so the test
    runs on means over ``SMOOTHING`` consecutive epochs.
    """
    k = min(SMOOTHING, cfg.divergence_window)
    if len(history) < k + 1:
        return False
    recent = np.asarray(history[-(cfg.divergence_window + k):], dtype=np.float64)
    smooth = np.convolve(recent, np.ones(k) / k, mode="valid")
    return bool(smooth[-1] > cfg.divergence_factor * smooth[:-1].min())


def solve(
    model: PideModel,
    grid: TimeGrid,
    x0,
    cfg: TrainConfig,
    paths: Optional[PathBatch] = None,
    callback: Optional[Callable[[int, int, float], None]] = None,
) -> TrainedScheme:
    """Train all steps from ``N-1`` down to ``0``.

    ``paths`` supplies a cached batch to reuse for every epoch; without it
    the batch is resimulated per epoch unless ``cfg.resimulate_per_epoch`` is
    off, in which case a single batch is simulated up front.
    """
    if abs(grid.horizon - model.horizon) > 1e-12 * model.horizon:
        raise ValueError("grid horizon does not match model horizon")
    x0 = np.asarray(x0, dtype=np.float64).reshape(model.dim)
    cached = paths
    if cached is None and not cfg.resimulate_per_epoch:
        cached = simulate_forward(
            model, grid, x0, cfg.batch_size, seed=(cfg.seed, TRAIN_TAG),
            compensator_samples=cfg.compensator_samples,
        )
    if cached is not None and (cached.n_intervals != grid.n_steps or cached.dim != model.dim):
        raise ValueError("cached path batch does not match grid/model")

    N = grid.n_steps
    init = initial_nets(model, grid, cfg)
    nets: List[Optional[nn.TriNet]] = [None] * N
    losses: List[Array] = [np.zeros(0)] * N
    warns: List[str] = []
    for i in range(N - 1, -1, -1):
        u_next = terminal_u(model) if i == N - 1 else frozen_u(nets[i + 1])
        warm = cfg.warm_start and i < N - 1
        trinet = nets[i + 1].copy() if warm else init[i]
        arrays = trinet.arrays()
        state = nn.AdamState.for_params(arrays)
        lr = cfg.lr if (warm or cfg.cold_start_lr is None) else cfg.cold_start_lr
        history: List[float] = []
        flagged = False
        start_avg = cfg.epochs - int(cfg.average_fraction * cfg.epochs)
        avg = None
        for epoch in range(cfg.epochs):
            batch = _step_batch(model, grid, x0, cfg, i, epoch, cached)
            try:
                est = loss_and_grad(model, grid, i, batch, u_next, trinet)
                arrays, state = nn.adam_update(
                    arrays, est.grads.arrays(), state, lr, cfg.beta1, cfg.beta2, cfg.eps
                )
            except (NonFiniteError, FloatingPointError) as err:
                raise TrainingAborted(i, epoch, str(err)) from err
            trinet = trinet.with_arrays(arrays)
            if epoch >= start_avg and start_avg < cfg.epochs - 1:
                avg = [a.copy() for a in arrays] if avg is None else [acc + a for acc, a in zip(avg, arrays)]
            history.append(est.value)
            if callback is not None:
                callback(i, epoch, est.value)
            if not flagged and _diverged(history, cfg):
                flagged = True
                msg = f"step {i}: loss rose above {cfg.divergence_factor:g}x its recent minimum at epoch {epoch}"
                warns.append(msg)
                log.warning(msg)
        if avg is not None:
            trinet = trinet.with_arrays([a / (cfg.epochs - start_avg) for a in avg])
        nets[i] = trinet
        losses[i] = np.asarray(history)
        log.info("step %d: final loss %.6g", i, history[-1])
    return TrainedScheme(grid, x0, nets, losses, warns, cfg, model.levy)


def evaluate(
    scheme: TrainedScheme,
    i: int,
    x,
    n_marks: int = 1024,
    seed=0,
    levy: Optional[LevyMeasure] = None,
) -> Tuple[float, Array, float]:
    """``(U_i(x), Z_i(x), Gbar_i(x))`` with ``Gbar`` estimated from fresh marks."""
    if not 0 <= i < len(scheme.nets):
        raise IndexError(f"step index {i} outside 0..{len(scheme.nets) - 1}")
    levy = levy if levy is not None else scheme.levy
    net = scheme.nets[i]
    x = np.asarray(x, dtype=np.float64).reshape(1, net.dim)
    u = float(nn.predict(net.u_net, x)[0, 0])
    z = nn.predict(net.z_net, x)[0]
    if levy is None:
        raise ValueError("a Levy measure is needed to evaluate the jump integral")
    if levy.total_mass == 0:
        return u, z, 0.0
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ys = levy.sample(rng, n_marks)
    g = nn.predict(net.g_net, np.concatenate([np.repeat(x, n_marks, axis=0), ys], axis=1))
    return u, z, float(levy.total_mass * g[:, 0].mean())


# ---- persistence -----------------------------------------------------------

MANIFEST = "manifest.json"
LOSS_CSV = "loss_curve.csv"


def loss_curve_csv(scheme: TrainedScheme) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "epoch", "loss"])
    for i, hist in enumerate(scheme.losses):
        for e, v in enumerate(hist):
            w.writerow([i, e, repr(float(v))])
    return buf.getvalue()


def save_scheme(scheme: TrainedScheme, directory, extra: Optional[dict] = None) -> Path:
    """Write one checkpoint per step, the loss curves and a manifest."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, net in enumerate(scheme.nets):
        name = f"step_{i:04d}.ckpt"
        (out / name).write_text(nn.dumps_trinet(net))
        files.append(name)
    (out / LOSS_CSV).write_text(loss_curve_csv(scheme))
    manifest = {
        "format": "pidenn-scheme",
        "version": 1,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "grid": {"horizon": scheme.grid.horizon, "n_steps": scheme.grid.n_steps},
        "x0": [float(v) for v in scheme.x0],
        "checkpoints": files,
        "config": scheme.config.to_dict() if scheme.config else None,
        "diagnostics": {"final_losses": scheme.final_losses, "warnings": list(scheme.warnings)},
    }
    if extra:
        manifest["extra"] = extra
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_scheme(directory, levy: Optional[LevyMeasure] = None) -> TrainedScheme:
    src = Path(directory)
    manifest = json.loads((src / MANIFEST).read_text())
    if manifest.get("format") != "pidenn-scheme" or manifest.get("version") != 1:
        raise ValueError("unrecognized scheme manifest")
    grid = TimeGrid(manifest["grid"]["horizon"], manifest["grid"]["n_steps"])
    nets = [nn.loads_trinet((src / name).read_text()) for name in manifest["checkpoints"]]
    losses: List[Array] = [np.zeros(0)] * grid.n_steps
    if (src / LOSS_CSV).exists():
        rows = list(csv.reader((src / LOSS_CSV).read_text().splitlines()))[1:]
        per: dict = {}
        for step, _, v in rows:
            per.setdefault(int(step), []).append(float(v))
        losses = [np.asarray(per.get(i, [])) for i in range(grid.n_steps)]
    cfg = TrainConfig.from_dict(manifest["config"]) if manifest.get("config") else None
    return TrainedScheme(
        grid, np.asarray(manifest["x0"]), nets, losses,
        list(manifest["diagnostics"]["warnings"]), cfg, levy,
    )
