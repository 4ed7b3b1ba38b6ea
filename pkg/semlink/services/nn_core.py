"""A small f64 tensor engine: reverse-mode differentiation, conv/dense layers, Adam.

Ops are ``Function`` subclasses with a numpy ``forward`` and an analytic
``backward``; calling one records the graph when any input requires grad.
``Tensor.backward`` walks the graph in reverse topological order.
"""
from __future__ import annotations

import logging
from contextvars import ContextVar
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from semlink.storage.containers import META_PREFIX, read_weights, split_meta, write_weights

log = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int]


class ShapeError(ValueError):
    pass


class LabelError(ValueError):
    pass


class NonFiniteGradient(ArithmeticError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class UntrainedModel(RuntimeError):
    pass


# grad mode is per thread/task so map building can train in parallel
_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)


class no_grad:
    def __enter__(self):
        self._token = _grad_enabled.set(False)
        return self

    def __exit__(self, *args):
        _grad_enabled.reset(self._token)

    def __call__(self, func):
        def wrapper_no_grad(*args, **kws):
            with no_grad():
                return func(*args, **kws)
        wrapper_no_grad.__name__ = getattr(func, "__name__", "wrapper_no_grad")
        wrapper_no_grad.__doc__ = getattr(func, "__doc__", None)
        return wrapper_no_grad


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_fn")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._fn: Optional[Function] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __getitem__(self, index): return GetItem()(self, index=index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape()(self, shape=shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum()(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean()(self, axis=axis, keepdims=keepdims)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        order = _topological_order(self)
        grads: Dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            fn = node._fn
            if fn is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = fn.backward(g)
            if not isinstance(in_grads, tuple):
                in_grads = (in_grads,)
            for inp, ig in zip(fn.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = unbroadcast(np.asarray(ig, dtype=np.float64), inp.data.shape)
                if not np.all(np.isfinite(ig)):
                    raise NonFiniteGradient(f"non-finite gradient flowing out of {type(fn).__name__}")
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._fn is not None:
            for parent in node._fn.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One graph node. ``forward`` sees numpy arrays, ``backward`` returns one gradient per input."""

    inputs: Tuple[Tensor, ...] = ()
    needs_input_grad: Tuple[bool, ...] = ()

    def __call__(self, *inputs: ArrayLike, **params) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        self.needs_input_grad = tuple(t.requires_grad for t in tensors)
        out = Tensor(self.forward(*(t.data for t in tensors), **params))
        if grad_enabled() and any(self.needs_input_grad):
            out.requires_grad = True
            out._fn = self
            self.inputs = tensors
        return out

    def forward(self, *arrays, **params) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def backward(self, grad: np.ndarray):  # pragma: no cover - abstract
        raise NotImplementedError


# ---- elementwise -------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return (grad * b if self.needs_input_grad[0] else None,
                grad * a if self.needs_input_grad[1] else None)


class Div(Function):
    def forward(self, a, b):
        self.saved = (a, b)
        return a / b

    def backward(self, grad):
        a, b = self.saved
        return (grad / b if self.needs_input_grad[0] else None,
                -grad * a / b ** 2 if self.needs_input_grad[1] else None)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return -grad


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return grad * self.mask


class Sigmoid(Function):
    def forward(self, x):
        self.out = expit(x)
        return self.out

    def backward(self, grad):
        return grad * self.out * (1.0 - self.out)


def add(a: ArrayLike, b: ArrayLike) -> Tensor: return Add()(a, b)
def sub(a: ArrayLike, b: ArrayLike) -> Tensor: return Sub()(a, b)
def mul(a: ArrayLike, b: ArrayLike) -> Tensor: return Mul()(a, b)
def div(a: ArrayLike, b: ArrayLike) -> Tensor: return Div()(a, b)
def neg(a: ArrayLike) -> Tensor: return Neg()(a)
def relu(x: ArrayLike) -> Tensor: return Relu()(x)
def sigmoid(x: ArrayLike) -> Tensor: return Sigmoid()(x)


# ---- shape ops ---------------------------------------------------------------

class Reshape(Function):
    def forward(self, x, shape):
        self.in_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return grad.reshape(self.in_shape)


class GetItem(Function):
    def forward(self, x, index):
        self.in_shape = x.shape
        self.index = index
        return x[index]

    def backward(self, grad):
        out = np.zeros(self.in_shape)
        np.add.at(out, self.index, grad)
        return out


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.sum(x, axis=axis, keepdims=keepdims)

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return np.broadcast_to(grad, self.in_shape).copy()


class Mean(Sum):
    def forward(self, x, axis=None, keepdims=False):
        out = super().forward(x, axis=axis, keepdims=keepdims)
        self.count = x.size // max(out.size, 1)
        return out / self.count

    def backward(self, grad):
        return super().backward(grad) / self.count


class Concat(Function):
    def forward(self, *xs, axis=0):
        self.axis = axis
        self.sizes = [x.shape[axis] for x in xs]
        return np.concatenate(xs, axis=axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, cuts, axis=self.axis))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Concat()(*tensors, axis=axis)


# ---- dense / conv ------------------------------------------------------------

class DenseFn(Function):
    def forward(self, x, w):
        if x.shape[-1] != w.shape[1]:
            raise ShapeError(f"dense: input features {x.shape[-1]} != weight columns {w.shape[1]} "
                             f"(input {x.shape}, weight {w.shape})")
        self.saved = (x, w)
        return x @ w.T

    def backward(self, grad):
        x, w = self.saved
        gx = grad @ w if self.needs_input_grad[0] else None
        gw = None
        if self.needs_input_grad[1]:
            gw = grad.reshape(-1, grad.shape[-1]).T @ x.reshape(-1, x.shape[-1])
        return gx, gw


def dense(x: ArrayLike, w: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """y = x W^T + b with W shaped [out][in]."""
    y = DenseFn()(x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (y.shape[-1],):
            raise ShapeError(f"dense: bias shape {b.shape} != ({y.shape[-1]},)")
        y = y + b
    return y


class Conv2dFn(Function):
    def forward(self, x, w, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects NCHW input and OCkk weight, got {x.shape} and {w.shape}")
        N, C, H, W = x.shape
        O, Cw, kh, kw = w.shape
        if kh != kw:
            raise ShapeError(f"conv2d kernel must be square, got {kh}x{kw}")
        if Cw != C:
            raise ShapeError(f"conv2d: input channels {C} != weight channels {Cw} "
                             f"(input {x.shape}, weight {w.shape})")
        k = kh
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        Ho, Wo = win.shape[2], win.shape[3]
        if Ho != -(-H // stride) or Wo != -(-W // stride):
            raise ShapeError(f"conv2d: pad {pad} gives {Ho}x{Wo} output for {H}x{W} input at stride {stride}; "
                             f"expected {-(-H // stride)}x{-(-W // stride)}")
        self.saved = (win, w, xp.shape, (H, W), k, stride, pad)
        return np.einsum("nchwij,ocij->nohw", win, w, optimize=True)

    def backward(self, grad):
        win, w, xp_shape, (H, W), k, s, p = self.saved
        gx = gw = None
        if self.needs_input_grad[1]:
            gw = np.einsum("nohw,nchwij->ocij", grad, win, optimize=True)
        if self.needs_input_grad[0]:
            Ho, Wo = grad.shape[2], grad.shape[3]
            gxp = np.zeros(xp_shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += \
                        np.einsum("nohw,oc->nchw", grad, w[:, :, i, j], optimize=True)
            gx = gxp[:, :, p:p + H, p:p + W]
        return gx, gw


def conv2d(x: ArrayLike, w: ArrayLike, stride: int = 1, pad: Optional[int] = None) -> Tensor:
    """Cross-correlation over NCHW input; default pad keeps the output at ceil(in/stride)."""
    w = as_tensor(w)
    if pad is None:
        pad = w.shape[-1] // 2
    return Conv2dFn()(x, w, stride=stride, pad=pad)


class UpsampleNearest(Function):
    def forward(self, x, factor):
        fh, fw = (factor, factor) if isinstance(factor, int) else factor
        self.factors = (fh, fw)
        return np.repeat(np.repeat(x, fh, axis=2), fw, axis=3)

    def backward(self, grad):
        fh, fw = self.factors
        N, C, H, W = grad.shape
        return grad.reshape(N, C, H // fh, fh, W // fw, fw).sum(axis=(3, 5))


def upsample_nearest(x: ArrayLike, factor: Union[int, Tuple[int, int]]) -> Tensor:
    return UpsampleNearest()(x, factor=factor)


class GatherGrid(Function):
    """out[n, c, a, b] = x[n, c, rows[c, a], cols[b]]; rows may also be shared across channels."""

    def forward(self, x, rows, cols):
        C = x.shape[1]
        rows = np.asarray(rows)
        if rows.ndim == 1:
            rows = np.broadcast_to(rows, (C, rows.shape[0]))
        if rows.shape[0] != C:
            raise ShapeError(f"gather_grid: row table has {rows.shape[0]} channels, input has {C}")
        self.in_shape = x.shape
        self.index = (slice(None), np.arange(C)[:, None, None], rows[:, :, None], np.asarray(cols)[None, None, :])
        return x[self.index]

    def backward(self, grad):
        out = np.zeros(self.in_shape)
        np.add.at(out, self.index, grad)
        return out


def gather_grid(x: ArrayLike, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    return GatherGrid()(x, rows=rows, cols=cols)


class NormalizePower(Function):
    """Scales each row (last axis) to the given mean square: y = x * sqrt(target * n / sum(x^2))."""

    def forward(self, x, target=1.0):
        n = x.shape[-1]
        energy = np.sum(x * x, axis=-1, keepdims=True)
        if np.any(energy <= 0):
            raise ArithmeticError("normalize_power: zero-energy input")
        self.c = target * n
        self.scale = np.sqrt(self.c / energy)
        self.x = x
        return x * self.scale

    def backward(self, grad):
        s, x = self.scale, self.x
        return s * grad - (s ** 3 / self.c) * x * np.sum(grad * x, axis=-1, keepdims=True)


def normalize_power(x: ArrayLike, target: float = 1.0) -> Tensor:
    return NormalizePower()(x, target=target)


# ---- losses ------------------------------------------------------------------

class MseLoss(Function):
    def forward(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"loss_mse: shapes differ {a.shape} vs {b.shape}")
        self.diff = a - b
        return np.mean(self.diff ** 2)

    def backward(self, grad):
        g = grad * 2.0 * self.diff / self.diff.size
        return g, -g


def loss_mse(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MseLoss()(a, b)


class CrossEntropyLoss(Function):
    def forward(self, logits, labels):
        if logits.ndim == 3:
            logits = logits[None]
        labels = np.asarray(labels)
        if labels.ndim == 2:
            labels = labels[None]
        N, C, H, W = logits.shape
        if labels.shape != (N, H, W):
            raise ShapeError(f"loss_ce: labels {labels.shape} do not match logits {logits.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            if np.any(labels != np.round(labels)):
                raise LabelError("loss_ce: labels must be integer class indices")
            labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= C):
            raise LabelError(f"loss_ce: labels must lie in [0, {C}), got range "
                             f"[{labels.min()}, {labels.max()}]")
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        onehot = np.moveaxis(np.eye(C)[labels], -1, 1)
        self.softmax_minus_onehot = np.exp(logp) - onehot
        self.count = N * H * W
        return -np.sum(logp * onehot) / self.count

    def backward(self, grad):
        g = grad * self.softmax_minus_onehot / self.count
        return g.reshape(self.inputs[0].shape), None


def loss_ce(logits: ArrayLike, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over pixels; logits [N][C][H][W] or [C][H][W]."""
    return CrossEntropyLoss()(logits, labels)


def require_trained(model, what: str) -> None:
    if not getattr(model, "trained", False):
        raise UntrainedModel(f"{what} has not been trained")


def check_finite_loss(loss: Tensor, where: str) -> float:
    value = float(loss.data)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"{where}: non-finite loss {value}")
    return value


def check_not_diverged(history: Sequence[float], where: str) -> None:
    """Raises when the last epoch loss ends above the first."""
    if history and history[-1] > history[0] * (1.0 + 1e-6) + 1e-12:
        raise TrainingDiverged(f"{where}: final loss {history[-1]:.6g} above initial {history[0]:.6g}")


# ---- parameters & Adam -------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Named trainable tensors plus their Adam moments and scalar metadata."""

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}
        self._state: Dict[str, AdamState] = {}
        self.meta: Dict[str, float] = {}
        self.frozen = False

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        if name.startswith(META_PREFIX):
            raise KeyError(f"parameter names may not start with {META_PREFIX!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=not self.frozen)
        self._params[name] = t
        self._state[name] = AdamState(np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def state(self, name: str) -> AdamState:
        return self._state[name]

    def grads(self) -> Dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self._params.items()}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def freeze(self) -> "ParamStore":
        self.frozen = True
        self._params = {k: Tensor(t.data, requires_grad=False) for k, t in self._params.items()}
        return self

    def arrays(self) -> Dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self._params) - set(arrays)
        unexpected = set(arrays) - set(self._params)
        if strict and (missing or unexpected):
            raise ShapeError(f"weight set mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, value in arrays.items():
            if name not in self._params:
                continue
            value = np.asarray(value, dtype=np.float64)
            if value.shape != self._params[name].shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != parameter shape {self._params[name].shape}")
            self._params[name] = Tensor(value.copy(), requires_grad=not self.frozen)
            self._state[name] = AdamState(np.zeros_like(value), np.zeros_like(value))

    def save(self, path: Path) -> Path:
        payload: Dict[str, np.ndarray] = dict(self.arrays())
        for key, value in self.meta.items():
            payload[META_PREFIX + key] = np.asarray(float(value))
        return write_weights(path, payload)

    def load(self, path: Path, strict: bool = True) -> "ParamStore":
        params, meta = split_meta(read_weights(path))
        self.load_arrays(params, strict=strict)
        self.meta.update(meta)
        return self


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> ParamStore:
    """One Adam update. The whole step is rejected if any gradient is non-finite."""
    if store.frozen:
        raise RuntimeError("adam_step on a frozen ParamStore")
    for name, g in grads.items():
        if name not in store:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != store[name].shape:
            raise ShapeError(f"{name}: gradient shape {np.shape(g)} != parameter shape {store[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"{name}: non-finite gradient, step rejected")
    b1, b2 = betas
    for name, g in grads.items():
        st = store.state(name)
        st.step += 1
        st.m = b1 * st.m + (1.0 - b1) * g
        st.v = b2 * st.v + (1.0 - b2) * g * g
        m_hat = st.m / (1.0 - b1 ** st.step)
        v_hat = st.v / (1.0 - b2 ** st.step)
        p = store[name]
        store._params[name] = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + eps), requires_grad=True)
    return store


# ---- layers ------------------------------------------------------------------

def _init(kind: str, shape: Tuple[int, ...], fan_in: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    if kind == "zero":
        return np.zeros(shape)
    if kind == "identity":
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ShapeError(f"identity init needs a square matrix, got {shape}")
        return np.eye(shape[0])
    if rng is None:
        raise ValueError(f"{kind!r} init needs an rng")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d:
    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int, kernel: int,
                 stride: int = 1, rng: Optional[np.random.Generator] = None, init: str = "he"):
        self.store, self.name, self.stride = store, name, stride
        store.add(f"{name}.w", _init(init, (out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, rng))
        store.add(f"{name}.b", np.zeros(out_ch))

    def __call__(self, x: ArrayLike) -> Tensor:
        b = self.store[f"{self.name}.b"]
        return conv2d(x, self.store[f"{self.name}.w"], stride=self.stride) + b.reshape(1, -1, 1, 1)


class Dense:
    def __init__(self, store: ParamStore, name: str, in_features: int, out_features: int,
                 rng: Optional[np.random.Generator] = None, init: str = "he", bias: bool = True):
        self.store, self.name, self.bias = store, name, bias
        store.add(f"{name}.w", _init(init, (out_features, in_features), in_features, rng))
        if bias:
            store.add(f"{name}.b", np.zeros(out_features))

    def __call__(self, x: ArrayLike) -> Tensor:
        b = self.store[f"{self.name}.b"] if self.bias else None
        return dense(x, self.store[f"{self.name}.w"], b)


# ---- utilities ---------------------------------------------------------------

def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients of a scalar ``fn``."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    worst = 0.0
    for idx, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(arrays[idx])
        flat = arrays[idx].reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(fn(*[Tensor(a) for a in arrays]).data)
                flat[i] = orig - h
                down = float(fn(*[Tensor(a) for a in arrays]).data)
                flat[i] = orig
                num_flat[i] = (up - down) / (2.0 * h)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
