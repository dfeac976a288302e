"""Dense-tensor network core: layers, sequential networks, Adam.

Tensors are plain numpy arrays, row-major, float32 for training and float64
for gradient checking. Every layer caches what its backward pass needs, so a
Network instance is single-threaded during forward/backward; distinct
instances are independent.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import backend
from .errors import NumericError

LAYER_KINDS = ("affine", "relu", "sigmoid", "tanh")


def glorot_uniform(rng: np.random.Generator, out_dim: int, in_dim: int, dtype=np.float32):
    """Seeded uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)


def fingerprint(arrays) -> str:
    """sha256 over dtype, shape, and raw bytes of each array, in order."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class Layer:
    kind: str

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        """Returns (list of parameter grads, input grad)."""
        raise NotImplementedError

    def params(self) -> list[np.ndarray]:
        return []

    def copy(self) -> "Layer":
        raise NotImplementedError

    def astype(self, dtype) -> "Layer":
        return self.copy()

    def _require_cache(self, cache):
        if cache is None:
            raise RuntimeError(f"{self.kind}: backward called without a matching forward")
        return cache


class Affine(Layer):
    """y = x @ W.T + b with W of shape (out_dim, in_dim)."""

    kind = "affine"

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ValueError(
                f"affine expects weight (out, in) and bias (out,), got {weight.shape} / {bias.shape}"
            )
        self.weight = weight
        self.bias = bias
        self._x = None

    @classmethod
    def seeded(cls, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32):
        w = glorot_uniform(rng, out_dim, in_dim, dtype)
        b = np.zeros(out_dim, dtype=dtype)
        return cls(w, b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        if x.shape[1] != self.in_dim:
            raise ValueError(f"affine expects input dim {self.in_dim}, got {x.shape[1]}")
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, grad):
        x = self._require_cache(self._x)
        if grad.shape != (x.shape[0], self.out_dim):
            raise ValueError(f"affine upstream grad shape {grad.shape} mismatches {(x.shape[0], self.out_dim)}")
        dw = grad.T @ x
        db = grad.sum(axis=0)
        dx = grad @ self.weight
        self._x = None
        return [dw, db], dx

    def params(self):
        return [self.weight, self.bias]

    def copy(self):
        return Affine(self.weight.copy(), self.bias.copy())

    def astype(self, dtype):
        return Affine(self.weight.astype(dtype), self.bias.astype(dtype))


class Relu(Layer):
    kind = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, grad):
        mask = self._require_cache(self._mask)
        self._mask = None
        return [], np.where(mask, grad, grad.dtype.type(0))

    def copy(self):
        return Relu()


class Sigmoid(Layer):
    kind = "sigmoid"

    def __init__(self):
        self._y = None

    def forward(self, x):
        # Piecewise form avoids exp overflow on large |x|.
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._y = y
        return y

    def backward(self, grad):
        y = self._require_cache(self._y)
        self._y = None
        return [], grad * y * (1.0 - y)

    def copy(self):
        return Sigmoid()


class Tanh(Layer):
    kind = "tanh"

    def __init__(self):
        self._y = None

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad):
        y = self._require_cache(self._y)
        self._y = None
        return [], grad * (1.0 - y * y)

    def copy(self):
        return Tanh()


_ACTIVATIONS = {"relu": Relu, "sigmoid": Sigmoid, "tanh": Tanh}


def activation(kind: str) -> Layer:
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}, expected one of {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[kind]()


class Network:
    """Ordered layer stack. Frozen networks propagate gradients to their
    input but their parameters must never be updated by callers."""

    def __init__(self, layers: list[Layer], frozen: bool = False):
        self.layers = list(layers)
        self.frozen = frozen
        self._forward_ready = False
        self._check_adjacency()

    def _check_adjacency(self):
        dim = None
        for layer in self.layers:
            if isinstance(layer, Affine):
                if dim is not None and layer.in_dim != dim:
                    raise ValueError(
                        f"adjacent layers incompatible: got input dim {dim}, affine expects {layer.in_dim}"
                    )
                dim = layer.out_dim

    @property
    def in_dim(self) -> int | None:
        for layer in self.layers:
            if isinstance(layer, Affine):
                return layer.in_dim
        return None

    @property
    def out_dim(self) -> int | None:
        for layer in reversed(self.layers):
            if isinstance(layer, Affine):
                return layer.out_dim
        return None

    @property
    def dtype(self):
        for layer in self.layers:
            if isinstance(layer, Affine):
                return layer.weight.dtype
        return np.dtype(np.float32)

    def forward(self, batch: np.ndarray) -> np.ndarray:
        if batch.ndim != 2:
            raise ValueError(f"expected a (batch, features) array, got shape {batch.shape}")
        if self.in_dim is not None and batch.shape[1] != self.in_dim:
            raise ValueError(f"network expects input dim {self.in_dim}, got {batch.shape[1]}")
        out = batch.astype(self.dtype, copy=False)
        # Overflow is detected via the isfinite check, not numpy warnings.
        with np.errstate(over="ignore", invalid="ignore"):
            for layer in self.layers:
                out = layer.forward(out)
                if not np.isfinite(out).all():
                    raise NumericError(f"non-finite values after {layer.kind} layer")
        self._forward_ready = True
        return out

    def backward(self, upstream_grad: np.ndarray, need_param_grads: bool = True):
        """Backpropagate `upstream_grad` through the cached forward pass.

        Returns (param_grads, input_grad) with param_grads aligned with
        parameters(). Frozen networks still return param grads when asked;
        callers discard them.
        """
        if not self._forward_ready:
            raise RuntimeError("backward called before forward")
        self._forward_ready = False
        grad = upstream_grad
        rev_param_grads: list[list[np.ndarray]] = []
        for layer in reversed(self.layers):
            if isinstance(layer, Affine) and not need_param_grads:
                x = layer._require_cache(layer._x)
                layer._x = None
                grad = grad @ layer.weight
                rev_param_grads.append([])
                del x
            else:
                pg, grad = layer.backward(grad)
                rev_param_grads.append(pg)
        if not np.isfinite(grad).all():
            raise NumericError("non-finite input gradient")
        param_grads: list[np.ndarray] = []
        for pg in reversed(rev_param_grads):
            param_grads.extend(pg)
        return param_grads, grad

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def fingerprint(self) -> str:
        return fingerprint(self.parameters())

    def copy(self, frozen: bool | None = None) -> "Network":
        return Network([l.copy() for l in self.layers], self.frozen if frozen is None else frozen)

    def astype(self, dtype) -> "Network":
        return Network([l.astype(dtype) for l in self.layers], self.frozen)


def mlp(dims: list[int], hidden: str, final: str | None, rng: np.random.Generator, dtype=np.float32) -> Network:
    """Affine stack dims[0] -> ... -> dims[-1] with `hidden` activations
    between affines and `final` (or none) on top."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    layers: list[Layer] = []
    for i in range(len(dims) - 1):
        layers.append(Affine.seeded(dims[i], dims[i + 1], rng, dtype))
        if i < len(dims) - 2:
            layers.append(activation(hidden))
        elif final is not None:
            layers.append(activation(final))
    return Network(layers)


class Adam:
    """Adam with bias correction; state shapes mirror the parameter list."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be > 0")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self._shapes = [p.shape for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(self._shapes) or len(grads) != len(self._shapes):
            raise ValueError("parameter/gradient count mismatch with optimizer state")
        for p, g, shape in zip(params, grads, self._shapes):
            if p.shape != shape or g.shape != shape:
                raise ValueError(f"shape mismatch: state {shape}, param {p.shape}, grad {g.shape}")
            if not np.isfinite(g).all():
                raise NumericError("non-finite gradient in adam step")
        self.step_count += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            backend.adam_update(
                p, np.ascontiguousarray(g), m, v,
                lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                eps=self.eps, step=self.step_count,
            )
