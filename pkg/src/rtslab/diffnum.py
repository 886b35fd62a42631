"""Small dense-tensor math with reverse-mode gradients, MLPs, Adam and checkpoints.

Everything is float32. A ``GradTape`` records the ops of one forward pass and
can be differentiated exactly once; the graph is rebuilt on every pass.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("linear", "tanh", "relu")


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


class Tensor:
    """A float32 array, optionally attached to a tape that records ops on it."""

    __slots__ = ("data", "tape")

    def __init__(self, values, tape: "GradTape | None" = None):
        self.data = np.asarray(values, dtype=DTYPE)
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs one element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, taped={self.tape is not None})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Linear record of one forward pass.

    ``watch`` attaches a parameter so ops touching it get recorded; the
    returned view shares memory with the parameter.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._watched: dict[int, Tensor] = {}
        self._used = False

    def watch(self, param: Tensor) -> Tensor:
        if self._used:
            raise TapeError("tape already differentiated; run a new forward pass")
        view = self._watched.get(id(param))
        if view is None:
            view = Tensor(param.data, tape=self)
            self._watched[id(param)] = view
        return view

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._records.append((out, inputs, backward))

    def gradient(self, loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``."""
        if self._used:
            raise TapeError("gradient() already called on this tape")
        if loss.size != 1:
            raise TapeError(f"loss must have exactly one element, got shape {loss.shape}")
        self._used = True
        wrt = list(wrt)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or inp.tape is not self:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = []
        for p in wrt:
            view = self._watched.get(id(p), p)
            if view.tape is not self:
                raise TapeError("requested gradient for a tensor that did not take part in the pass")
            g = grads.get(id(view))
            result.append(np.zeros_like(p.data) if g is None else g.astype(DTYPE, copy=False))
        self._records.clear()
        return result


def _tape_of(*xs: Tensor) -> GradTape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeError("inputs recorded on different tapes")
            tape = x.tape
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor(value, tape=tape)
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def _check_rowwise(a: Tensor, b: Tensor) -> None:
    # only row broadcasting of a trailing vector is supported
    if a.shape == b.shape:
        return
    if b.data.ndim == 1 and a.shape[-1:] == b.shape:
        return
    if a.data.ndim == 1 and b.shape[-1:] == a.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"shapes {a.shape} and {b.shape} do not line up")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_rowwise(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_rowwise(a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_rowwise(a, b)
    av, bv = a.data, b.data
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot matmul {a.shape} by {b.shape}")
    av, bv = a.data, b.data
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _emit(y, (a,), lambda g: (g * 0.5 / y,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _emit(a.data.sum(dtype=DTYPE).reshape(()), (a,),
                     lambda g: (np.broadcast_to(g, shape).astype(DTYPE),))
    ax = axis % len(shape)
    return _emit(a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).astype(DTYPE),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _emit(a.data.mean(dtype=DTYPE).reshape(()), (a,),
                 lambda g: (np.full(shape, g / n, dtype=DTYPE),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ax = axis % parts[0].data.ndim
    sizes = [p.shape[ax] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([p.data for p in parts], axis=ax), tuple(parts),
                 lambda g: tuple(np.split(g, splits, axis=ax)))


def row_norm(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Euclidean norm of each row, smoothed at zero by ``eps``."""
    return sqrt(add(sum(square(a), axis=-1), eps))


# ---------------------------------------------------------------------------
# MLP


@dataclass
class Mlp:
    layer_dims: list[int]
    weights: list[Tensor]
    biases: list[Tensor]
    hidden_activation: str = "tanh"
    output_activation: str = "linear"

    def __post_init__(self):
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise DimensionError("layer count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[i], self.layer_dims[i + 1]) or b.shape != (self.layer_dims[i + 1],):
                raise DimensionError(f"layer {i} parameters do not match layer_dims {self.layer_dims}")
        for act in (self.hidden_activation, self.output_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")

    @classmethod
    def init(cls, layer_dims: Sequence[int], rng: np.random.Generator,
             hidden_activation: str = "tanh", output_activation: str = "linear",
             final_scale: float | None = None) -> "Mlp":
        """Uniform fan-in initialisation; ``final_scale`` narrows the last layer."""
        dims = [int(d) for d in layer_dims]
        weights, biases = [], []
        for i in range(len(dims) - 1):
            bound = 1.0 / np.sqrt(dims[i])
            if final_scale is not None and i == len(dims) - 2:
                bound = final_scale
            weights.append(Tensor(rng.uniform(-bound, bound, (dims[i], dims[i + 1]))))
            biases.append(Tensor(rng.uniform(-bound, bound, dims[i + 1])))
        return cls(dims, weights, biases, hidden_activation, output_activation)

    @property
    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_dims), [Tensor(w.data.copy()) for w in self.weights],
                   [Tensor(b.data.copy()) for b in self.biases],
                   self.hidden_activation, self.output_activation)

    def __call__(self, x, tape: GradTape | None = None) -> Tensor:
        return mlp_forward(self, x, tape)


_ACT_FN = {"linear": lambda t: t, "tanh": tanh, "relu": relu}


def mlp_forward(net: Mlp, input, tape: GradTape | None = None) -> Tensor:
    x = as_tensor(input)
    if x.shape[-1:] != (net.layer_dims[0],):
        raise DimensionError(f"input last dim {x.shape[-1:]} != first layer dim {net.layer_dims[0]}")
    squeeze = x.data.ndim == 1
    if squeeze:
        x = Tensor(x.data[None, :], tape=x.tape)
    if tape is None and x.tape is None:
        # fast path, no recording
        h = x.data
        n = len(net.weights)
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            h = h @ w.data + b.data
            act = net.output_activation if i == n - 1 else net.hidden_activation
            if act == "tanh":
                h = np.tanh(h)
            elif act == "relu":
                h = np.maximum(h, DTYPE(0))
        return Tensor(h[0] if squeeze else h)
    n = len(net.weights)
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        if tape is not None:
            w, b = tape.watch(w), tape.watch(b)
        h = add(matmul(h, w), b)
        h = _ACT_FN[net.output_activation if i == n - 1 else net.hidden_activation](h)
    if squeeze:
        flat = h
        h = _emit(flat.data[0], (flat,), lambda g: (g[None, :],))
    return h


def gradient(tape: GradTape, scalar_loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    return tape.gradient(scalar_loss, wrt)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[Sequence[Tensor], AdamState]:
    """Bias-corrected Adam update applied in place to ``params``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DimensionError("params, grads and optimiser state differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    step_size = DTYPE(lr * np.sqrt(c2) / c1)
    eps_hat = DTYPE(eps * np.sqrt(c2))
    b1, b2 = DTYPE(beta1), DTYPE(beta2)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= step_size * m / (np.sqrt(v) + eps_hat)
    return params, state


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros_like(self.params)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# Checkpoints
#
# An .npz archive. ``__meta__`` is a JSON document:
#   {"format_version": 1, "nets": {name: {"layer_dims", "hidden_activation",
#    "output_activation"}}, "extra": {...}}
# Arrays are stored as ``<name>/W<i>`` and ``<name>/b<i>`` (float32), plus any
# caller-supplied arrays under ``extra/<key>``.


def save_nets(path, nets: dict[str, Mlp], extra: dict | None = None,
              arrays: dict[str, np.ndarray] | None = None) -> Path:
    path = Path(path)
    meta = {"format_version": CHECKPOINT_VERSION, "nets": {}, "extra": extra or {}}
    payload: dict[str, np.ndarray] = {}
    for name, net in nets.items():
        meta["nets"][name] = {
            "layer_dims": list(net.layer_dims),
            "hidden_activation": net.hidden_activation,
            "output_activation": net.output_activation,
        }
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            payload[f"{name}/W{i}"] = w.data
            payload[f"{name}/b{i}"] = b.data
    for key, arr in (arrays or {}).items():
        payload[f"extra/{key}"] = np.asarray(arr)
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_nets(path) -> tuple[dict[str, Mlp], dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            files = {k: archive[k] for k in archive.files}
    except (zipfile.BadZipFile, ValueError, EOFError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if "__meta__" not in files:
        raise CheckpointError(f"{path}: missing metadata record")
    try:
        meta = json.loads(files["__meta__"].tobytes().decode())
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format_version {version!r}, expected {CHECKPOINT_VERSION}")
    nets = {}
    for name, info in meta["nets"].items():
        n_layers = len(info["layer_dims"]) - 1
        try:
            weights = [Tensor(files[f"{name}/W{i}"]) for i in range(n_layers)]
            biases = [Tensor(files[f"{name}/b{i}"]) for i in range(n_layers)]
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing array {exc}") from exc
        nets[name] = Mlp(info["layer_dims"], weights, biases,
                         info["hidden_activation"], info["output_activation"])
    arrays = {k[len("extra/"):]: v for k, v in files.items() if k.startswith("extra/")}
    return nets, meta.get("extra", {}), arrays


def save_checkpoint(net: Mlp, path, extra: dict | None = None) -> Path:
    return save_nets(path, {"net": net}, extra)


def load_checkpoint(path) -> Mlp:
    nets, _, _ = load_nets(path)
    if "net" not in nets:
        raise CheckpointError(f"{path}: no single-network entry")
    return nets["net"]
