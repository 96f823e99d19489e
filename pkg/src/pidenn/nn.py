"""Small fully connected networks with hand-written backpropagation.

Inputs are row batches ``(B, input_dim)``; a 1-D input is treated as a
single row and the output is squeezed back to 1-D.  Weights follow the
``W @ x + b`` convention, so ``W_i`` has shape ``(l_i, l_{i-1})``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .model import Array

ACTIVATIONS = ("tanh", "sigmoid", "relu")
# tanh and sigmoid are bounded and nonconstant; relu is not bounded
BOUNDED_ACTIVATIONS = ("tanh", "sigmoid")


def _act(name: str, a: Array) -> Array:
    if name == "tanh":
        return np.tanh(a)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * a))
    if name == "relu":
        return np.maximum(a, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, a: Array, out: Array) -> Array:
    if name == "tanh":
        return 1.0 - out * out
    if name == "sigmoid":
        return out * (1.0 - out)
    if name == "relu":
        return (a > 0).astype(a.dtype)
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_widths: Tuple[int, ...] = ()
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.input_dim, *self.hidden_widths, self.output_dim)

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[k + 1] * (s[k] + 1) for k in range(len(s) - 1))


def default_widths(dim: int) -> Tuple[int, int]:
    w = max(16, dim + 10)
    return (w, w)


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: List[Array]
    biases: List[Array]

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> List[Array]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flatten(self) -> Array:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def unflatten(cls, spec: MlpSpec, vec: Array) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != spec.n_params:
            raise ValueError(f"expected {spec.n_params} parameters, got {vec.size}")
        s = spec.layer_sizes
        weights, biases, pos = [], [], 0
        for k in range(len(s) - 1):
            n = s[k + 1] * s[k]
            weights.append(vec[pos:pos + n].reshape(s[k + 1], s[k]).copy())
            pos += n
            biases.append(vec[pos:pos + s[k + 1]].copy())
            pos += s[k + 1]
        return cls(spec, weights, biases)

    @classmethod
    def zeros(cls, spec: MlpSpec) -> "MlpParams":
        return cls.unflatten(spec, np.zeros(spec.n_params))


def init(spec: MlpSpec, seed=0) -> MlpParams:
    """Glorot-uniform weights and zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    s = spec.layer_sizes
    weights, biases = [], []
    for k in range(len(s) - 1):
        fan_in, fan_out = s[k], s[k + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(spec, weights, biases)


@dataclass
class Tape:
    inputs: List[Array]  # input to each affine layer, (B, l_{k-1})
    pre: List[Array]  # pre-activations of hidden layers
    post: List[Array]  # activations of hidden layers
    squeeze: bool = False


def forward(params: MlpParams, x) -> Tuple[Array, Tape]:
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x.reshape(1, -1) if squeeze else x
    if h.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ValueError(f"input shape {x.shape} does not match input_dim {spec.input_dim}")
    tape = Tape([], [], [], squeeze)
    n_layers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        tape.inputs.append(h)
        a = h @ w.T + b
        if k < n_layers - 1:
            h = _act(spec.activation, a)
            tape.pre.append(a)
            tape.post.append(h)
        else:
            h = a
    return (h[0] if squeeze else h), tape


def backward(params: MlpParams, tape: Tape, output_grad) -> Tuple[MlpParams, Array]:
    """Gradients of ``sum(output_grad * output)`` w.r.t. parameters and input.

    Parameter gradients are summed over the batch rows.
    """
    spec = params.spec
    n_layers = len(params.weights)
    if len(tape.inputs) != n_layers:
        raise ValueError("tape does not match network depth")
    for k, w in enumerate(params.weights):
        if tape.inputs[k].shape[1] != w.shape[1]:
            raise ValueError("stale tape: layer shapes do not match parameters")
    g = np.asarray(output_grad, dtype=np.float64)
    if tape.squeeze:
        g = g.reshape(1, -1)
    B = tape.inputs[0].shape[0]
    if g.shape != (B, spec.output_dim):
        raise ValueError(f"output_grad shape {g.shape} does not match ({B}, {spec.output_dim})")
    gw: List[Array] = [None] * n_layers  # type: ignore[list-item]
    gb: List[Array] = [None] * n_layers  # type: ignore[list-item]
    for k in range(n_layers - 1, -1, -1):
        gw[k] = g.T @ tape.inputs[k]
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
        if k > 0:
            g = g * _act_grad(spec.activation, tape.pre[k - 1], tape.post[k - 1])
    input_grad = g[0] if tape.squeeze else g
    return MlpParams(spec, gw, gb), input_grad


def predict(params: MlpParams, x) -> Array:
    return forward(params, x)[0]


@dataclass
class AdamState:
    step: int = 0
    m: List[Array] = field(default_factory=list)
    v: List[Array] = field(default_factory=list)

    @classmethod
    def for_params(cls, arrays: Sequence[Array]) -> "AdamState":
        return cls(0, [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_update(
    arrays: Sequence[Array],
    grads: Sequence[Array],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[List[Array], AdamState]:
    """Adam with bias correction on a list of arrays; returns new arrays."""
    if len(arrays) != len(grads):
        raise ValueError("parameter/gradient count mismatch")
    if not state.m:
        state = AdamState.for_params(arrays)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in Adam step (training diverged)")
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new, ms, vs = [], [], []
    for p, g, m, v in zip(arrays, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError("shape mismatch in Adam step")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        ms.append(m)
        vs.append(v)
    return new, AdamState(t, ms, vs)


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    new, state = adam_update(params.arrays(), grads.arrays(), state, lr, beta1, beta2, eps)
    return MlpParams(params.spec, new[0::2], new[1::2]), state


# ---- checkpoints -----------------------------------------------------------

CHECKPOINT_HEADER = "pidenn-mlp"
CHECKPOINT_VERSION = 1


def _fmt(a: Array) -> str:
    return " ".join("%.17g" % v for v in np.asarray(a).ravel())


def dumps(params: MlpParams) -> str:
    spec = params.spec
    lines = [
        f"{CHECKPOINT_HEADER} {CHECKPOINT_VERSION}",
        f"input_dim {spec.input_dim}",
        f"output_dim {spec.output_dim}",
        "hidden_widths " + " ".join(str(w) for w in spec.hidden_widths),
        f"activation {spec.activation}",
    ]
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        lines.append(f"W {k} {w.shape[0]} {w.shape[1]}")
        lines.extend(_fmt(row) for row in w)
        lines.append(f"b {k} {b.shape[0]}")
        lines.append(_fmt(b))
    lines.append("end")
    return "\n".join(lines) + "\n"


def _parse(lines: List[str], pos: int) -> Tuple[MlpParams, int]:
    def field_(key):
        nonlocal pos
        parts = lines[pos].split()
        pos += 1
        if not parts or parts[0] != key:
            raise ValueError(f"checkpoint: expected {key!r} at line {pos}")
        return parts[1:]

    header = field_(CHECKPOINT_HEADER)
    if int(header[0]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header[0]}")
    input_dim = int(field_("input_dim")[0])
    output_dim = int(field_("output_dim")[0])
    widths = tuple(int(w) for w in field_("hidden_widths"))
    activation = field_("activation")[0]
    spec = MlpSpec(input_dim, output_dim, widths, activation)
    weights, biases = [], []
    for k in range(len(spec.layer_sizes) - 1):
        _, rows, cols = (int(v) for v in field_("W"))
        w = np.array([[float(v) for v in lines[pos + r].split()] for r in range(rows)]).reshape(rows, cols)
        pos += rows
        n = int(field_("b")[1])
        b = np.array([float(v) for v in lines[pos].split()]).reshape(n)
        pos += 1
        weights.append(w)
        biases.append(b)
    field_("end")
    return MlpParams(spec, weights, biases), pos


def loads(text: str) -> MlpParams:
    params, _ = _parse(text.splitlines(), 0)
    return params


def save(params: MlpParams, path) -> None:
    Path(path).write_text(dumps(params))


def load(path) -> MlpParams:
    return loads(Path(path).read_text())


# ---- the per-step triple ---------------------------------------------------


@dataclass
class TriNet:
    """Value, gradient and jump-difference networks for one time step.

    ``g_net`` reads the concatenation ``(x, y)`` of a state and a jump mark.
    """

    u_net: MlpParams
    z_net: MlpParams
    g_net: MlpParams

    def __post_init__(self):
        d = self.u_net.spec.input_dim
        if self.u_net.spec.output_dim != 1:
            raise ValueError("u_net must have output_dim 1")
        if self.z_net.spec.input_dim != d or self.z_net.spec.output_dim != d:
            raise ValueError("z_net must map R^d to R^d")
        if self.g_net.spec.input_dim != 2 * d or self.g_net.spec.output_dim != 1:
            raise ValueError("g_net must map R^2d to R")

    @property
    def dim(self) -> int:
        return self.u_net.spec.input_dim

    def nets(self) -> Tuple[MlpParams, MlpParams, MlpParams]:
        return self.u_net, self.z_net, self.g_net

    def copy(self) -> "TriNet":
        return TriNet(self.u_net.copy(), self.z_net.copy(), self.g_net.copy())

    def flatten(self) -> Array:
        return np.concatenate([n.flatten() for n in self.nets()])

    def with_flat(self, vec: Array) -> "TriNet":
        out, pos = [], 0
        for n in self.nets():
            k = n.spec.n_params
            out.append(MlpParams.unflatten(n.spec, vec[pos:pos + k]))
            pos += k
        return TriNet(*out)

    def arrays(self) -> List[Array]:
        return [a for n in self.nets() for a in n.arrays()]

    def with_arrays(self, arrays: Sequence[Array]) -> "TriNet":
        out, pos = [], 0
        for n in self.nets():
            k = 2 * len(n.weights)
            chunk = arrays[pos:pos + k]
            out.append(MlpParams(n.spec, list(chunk[0::2]), list(chunk[1::2])))
            pos += k
        return TriNet(*out)


def trinet_init(dim: int, hidden_widths=None, activation: str = "tanh", seed=0) -> TriNet:
    widths = default_widths(dim) if hidden_widths is None else tuple(hidden_widths)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return TriNet(
        init(MlpSpec(dim, 1, widths, activation), rng),
        init(MlpSpec(dim, dim, widths, activation), rng),
        init(MlpSpec(2 * dim, 1, widths, activation), rng),
    )


def dumps_trinet(net: TriNet) -> str:
    parts = []
    for name, p in zip(("u", "z", "g"), net.nets()):
        parts.append(f"net {name}\n" + dumps(p))
    return "".join(parts)


def loads_trinet(text: str) -> TriNet:
    lines = text.splitlines()
    pos, nets = 0, {}
    for name in ("u", "z", "g"):
        if lines[pos].split() != ["net", name]:
            raise ValueError(f"trinet checkpoint: expected 'net {name}' at line {pos + 1}")
        nets[name], pos = _parse(lines, pos + 1)
    return TriNet(nets["u"], nets["z"], nets["g"])
