"""Command line front end: ``pidenn {solve,convergence,gradcheck,validate}``.

Runs are described by a JSON file whose keys mirror :class:`RunConfig`.
Exit codes: 0 ok, 2 bad configuration, 3 training aborted, 4 a
verification check failed.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import importlib
import io
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from threadpoolctl import threadpool_limits

from .gradcheck import DEFAULT_SIZES, run_gradcheck
from .model import PideModel, TimeGrid, gaussian_levy, validate_model
from .oracle import ManufacturedProblem, error_report, make_heat_problem, make_quadratic_manufactured
from .train import TrainConfig, TrainingAborted, evaluate, save_scheme, solve

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_VERIFY = 0, 2, 3, 4
SCHEMA_VERSION = 1
PROBLEMS = ("manufactured", "heat", "zero", "custom")

log = logging.getLogger("pidenn")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    problem: str = "manufactured"
    factory: Optional[str] = None  # "module:function" for problem = "custom"
    d: int = 1
    T: float = 0.5
    N: int = 10
    x0: Union[float, List[float]] = 1.0
    jump_rate: float = 1.0
    sigma0: float = 1.0
    coupling: float = 1.0
    hidden_widths: Optional[List[int]] = None
    activation: str = "tanh"
    batch_size: int = 2048
    lambda_samples: int = 16
    epochs: int = 400
    lr: float = 1e-3
    cold_start_lr: Optional[float] = 3e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warm_start: bool = True
    resimulate_per_epoch: bool = True
    compensator_samples: int = 64
    divergence_factor: float = 10.0
    divergence_window: int = 50
    grids: List[int] = field(default_factory=lambda: [5, 10, 20])
    eval_paths: int = 4096
    eval_seed: int = 12345
    out: str = "pidenn-out"
    seed: int = 0

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}")
        if self.problem == "custom" and not self.factory:
            raise ConfigError("problem 'custom' needs a 'factory' of the form module:function")
        for name in ("d", "N", "eval_paths"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.T > 0:
            raise ConfigError("T must be positive")
        if self.jump_rate < 0 or not np.isfinite(self.jump_rate):
            raise ConfigError("jump_rate must be finite and nonnegative")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if np.size(self.x0) not in (1, self.d):
            raise ConfigError(f"x0 needs 1 or {self.d} entries")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError(str(err)) from err

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        return cls.from_dict(data)

    def point(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.x0, dtype=np.float64), (self.d,)).copy()

    def grid(self, n_steps: Optional[int] = None) -> TimeGrid:
        return TimeGrid(self.T, self.N if n_steps is None else n_steps)

    def train_config(self) -> TrainConfig:
        keys = {f.name for f in fields(TrainConfig)}
        try:
            return TrainConfig.from_dict({k: v for k, v in asdict(self).items() if k in keys})
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err


def zero_problem(d: int, T: float) -> ManufacturedProblem:
    """Brownian forward process with ``f = g = 0`` and no jumps: ``u = 0``."""
    model = PideModel(
        dim=d, horizon=T,
        drift=lambda x: np.zeros_like(x),
        diffusion=lambda x: np.broadcast_to(np.eye(d), (x.shape[0], d, d)),
        jump=lambda x, y: np.zeros_like(x),
        driver=lambda t, x, y, z, w: np.zeros(np.shape(y)),
        terminal=lambda x: np.zeros(x.shape[0]),
        levy=gaussian_levy(d, 0.0),
        jump_compensator=lambda x: np.zeros_like(x),
        driver_grad=lambda t, x, y, z, w: (0.0, 0.0, 0.0),
        name="zero",
    )
    zeros = lambda t, x: np.zeros(np.atleast_2d(x).shape[0])
    return ManufacturedProblem(
        model=model, u_star=zeros, du_dt=zeros,
        grad_u=lambda t, x: np.zeros_like(np.atleast_2d(x)),
        hessian=lambda t, x: np.zeros((np.atleast_2d(x).shape[0], d, d)),
        z_star=lambda t, x: np.zeros_like(np.atleast_2d(x)),
        gamma_star=zeros, jump_diff=lambda t, x, y: np.zeros(np.atleast_2d(x).shape[0]),
    )


def build_problem(cfg: RunConfig) -> Tuple[PideModel, Optional[ManufacturedProblem]]:
    """The model for ``cfg`` and, when known, its exact solution."""
    try:
        if cfg.problem == "manufactured":
            p = make_quadratic_manufactured(cfg.d, cfg.T, cfg.jump_rate, cfg.sigma0, cfg.coupling)
        elif cfg.problem == "heat":
            p = make_heat_problem(cfg.d, cfg.T, cfg.sigma0)
        elif cfg.problem == "zero":
            p = zero_problem(cfg.d, cfg.T)
        else:
            module, _, name = cfg.factory.partition(":")
            try:
                fn = getattr(importlib.import_module(module), name)
            except (ImportError, AttributeError, ValueError) as err:
                raise ConfigError(f"cannot load factory {cfg.factory!r}: {err}") from err
            p = fn(cfg)
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from err
    if isinstance(p, ManufacturedProblem):
        model, exact = p.model, p
    elif isinstance(p, PideModel):
        model, exact = p, None
    else:
        raise ConfigError("factory must return a PideModel or ManufacturedProblem")
    if model.dim != cfg.d or abs(model.horizon - cfg.T) > 1e-12 * cfg.T:
        raise ConfigError("factory model does not match d/T of the config")
    return model, exact


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.out is not None:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = RunConfig.from_dict({**asdict(cfg), **overrides})
    return cfg


def cmd_solve(args) -> int:
    cfg = _load(args)
    model, exact = build_problem(cfg)
    grid, x0, tc = cfg.grid(), cfg.point(), cfg.train_config()
    t0 = time.perf_counter()
    scheme = solve(model, grid, x0, tc)
    elapsed = time.perf_counter() - t0
    out = save_scheme(scheme, cfg.out, extra={"run": asdict(cfg), "wall_time": elapsed})
    u0 = evaluate(scheme, 0, x0, seed=cfg.seed)[0]
    print(f"U0(x0) = {u0!r}")
    if exact is not None:
        ref = float(exact.u_star(0.0, x0[None, :])[0])
        rel = abs(u0 - ref) / abs(ref) if ref != 0 else abs(u0 - ref)
        print(f"reference = {ref!r}  relative error = {rel:.4g}")
    for w in scheme.warnings:
        print(f"warning: {w}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_convergence(args) -> int:
    cfg = _load(args)
    grids = [int(n) for n in args.grids.split(",")] if args.grids else list(cfg.grids)
    if len(grids) < 2 or any(n < 1 for n in grids):
        raise ConfigError("convergence needs at least two positive grid sizes")
    model, exact = build_problem(cfg)
    if exact is None:
        raise ConfigError("convergence needs a problem with a known solution")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tc, x0 = cfg.train_config(), cfg.point()
    rows = []
    for n in grids:
        grid = cfg.grid(n)
        t0 = time.perf_counter()
        scheme = solve(model, grid, x0, tc)
        wall = time.perf_counter() - t0
        rep = error_report(scheme, exact, cfg.eval_paths, cfg.eval_seed)
        (out / f"errors_N{n}.csv").write_text(rep.to_csv())
        rows.append([n, repr(grid.h), repr(rep.y_error), repr(rep.z_error), repr(rep.gamma_error), f"{wall:.3f}"])
        print(f"N={n:4d} h={grid.h:.5g} y_err={rep.y_error:.4g} z_err={rep.z_error:.4g} "
              f"gamma_err={rep.gamma_error:.4g} ({wall:.1f}s)")
    _write_csv(out / "convergence.csv", ["N", "h", "y_err", "z_err", "gamma_err", "wall_time"], rows)
    print(f"wrote {out / 'convergence.csv'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    sizes = DEFAULT_SIZES
    if args.sizes:
        try:
            sizes = tuple(int(s) for s in args.sizes.split(","))
        except ValueError as err:
            raise ConfigError(f"bad --sizes: {args.sizes}") from err
    res = run_gradcheck(args.seed or 0, sizes, corrupt=args.inject_fault)
    for name, err in res.cases:
        print(f"{err:10.3e}  {name}")
    print(f"worst relative error {res.worst:.3e} (tolerance {res.tolerance:.0e}): {'PASS' if res.passed else 'FAIL'}")
    return EXIT_OK if res.passed else EXIT_VERIFY


def cmd_validate(args) -> int:
    cfg = _load(args)
    model, _ = build_problem(cfg)
    rep = validate_model(model, args.probes, seed=cfg.seed)
    for name, r in rep.ratios.items():
        print(f"{name:10s} ratio {r:.4g}  (K = {rep.lipschitz:g})")
    print(f"max |beta(0, y)| {rep.max_jump_at_origin:.4g}; finite jump mass: {rep.finite_mass}")
    if rep.violations:
        print("violations: " + ", ".join(rep.violations))
    return EXIT_OK if rep.ok else EXIT_VERIFY


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--threads", type=int, help="cap on BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="pidenn", description="Deep backward solver for PIDEs with finite jump measure.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="train a scheme and save it")
    conv = sub.add_parser("convergence", parents=[common], help="error table over several grids")
    conv.add_argument("--grids", help="comma separated step counts, e.g. 5,10,20")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    gc.add_argument("--sizes", help="comma separated parameter budgets")
    gc.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    val = sub.add_parser("validate", parents=[common], help="probe the model's Lipschitz bounds")
    val.add_argument("--probes", type=int, default=1000)
    return ap


COMMANDS = {"solve": cmd_solve, "convergence": cmd_convergence, "gradcheck": cmd_gradcheck, "validate": cmd_validate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    limits = threadpool_limits(args.threads) if args.threads else contextlib.nullcontext()
    try:
        with limits:
            return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as err:
        print(f"training aborted: {err}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
