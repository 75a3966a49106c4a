"""A small numpy layer kit with hand-written backward passes.

Each :class:`Module` caches what it needs during ``forward`` and accumulates
parameter gradients into ``grads`` during ``backward``.  Tensors flowing
through the network are ``(batch, channels, time)`` float64 arrays.

Non-smooth ops (ReLU, LeakyReLU, max pooling) record how close the last
forward pass came to a kink in ``margin``; gradient checks use this to reject
evaluation points where finite differences would straddle a corner.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterator

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values."""


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container with named children, in registration order."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True
        self.margin = math.inf

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = np.asarray(value, dtype=np.float64)
        self.grads[name] = np.zeros_like(self.params[name])
        return self.params[name]

    def add_child(self, name: str, module: Module) -> Module:
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, value
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.grads.items():
            yield prefix + name, value
        for cname, child in self.children.items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self.buffers.items():
            yield prefix + name, value
        for cname, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0.0
        for child in self.children.values():
            child.zero_grad()

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def kink_margin(self) -> float:
        return min([self.margin] + [c.kink_margin() for c in self.children.values()])

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    # -- state ------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer, keyed by dotted name."""
        out = {k: v.copy() for k, v in self.named_parameters()}
        out.update({k: v.copy() for k, v in self.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        targets = dict(self.named_parameters())
        targets.update(self.named_buffers())
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, dst in targets.items():
            src = np.asarray(state[k], dtype=np.float64)
            if src.shape != dst.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {dst.shape}")
            dst[...] = src


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add_child(str(i), layer)

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, dy):
        for layer in reversed(list(self.children.values())):
            dy = layer.backward(dy)
        return dy


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class Conv1d(Module):
    """Same-padded 1-D convolution (cross-correlation) with odd kernel width."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 7, rng: np.random.Generator | None = None,
                 bias: bool = True):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel width must be odd for same padding")
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out, self.k = c_in, c_out, kernel
        self.add_param("W", glorot_uniform(rng, (c_out, c_in, kernel), c_in * kernel, c_out * kernel))
        if bias:
            self.add_param("b", np.zeros(c_out))

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.c_in:
            raise ValueError(f"Conv1d expects (N, {self.c_in}, L), got {x.shape}")
        n, _, length = x.shape
        half = self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (half, half)))
        win = np.lib.stride_tricks.sliding_window_view(xp, self.k, axis=2)  # (N, Cin, L, k)
        cols = win.transpose(0, 2, 1, 3).reshape(n * length, self.c_in * self.k)
        self._cols, self._shape = cols, x.shape
        y = cols @ self.params["W"].reshape(self.c_out, -1).T
        if "b" in self.params:
            y += self.params["b"]
        return y.reshape(n, length, self.c_out).transpose(0, 2, 1)

    def backward(self, dy):
        n, _, length = self._shape
        dy2 = dy.transpose(0, 2, 1).reshape(n * length, self.c_out)
        w = self.params["W"].reshape(self.c_out, -1)
        self.grads["W"] += (dy2.T @ self._cols).reshape(self.params["W"].shape)
        if "b" in self.params:
            self.grads["b"] += dy2.sum(axis=0)
        dcols = (dy2 @ w).reshape(n, length, self.c_in, self.k)
        dxp = np.zeros((n, self.c_in, length + self.k - 1))
        for j in range(self.k):
            dxp[:, :, j:j + length] += dcols[:, :, :, j].transpose(0, 2, 1)
        half = self.k // 2
        return dxp[:, :, half:half + length]


class BatchNorm1d(Module):
    """Per-channel normalization over (batch, time)."""

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x):
        g = self.params["gamma"][None, :, None]
        b = self.params["beta"][None, :, None]
        if self.training:
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            m = x.shape[0] * x.shape[2]
            mom = self.momentum
            self.buffers["running_mean"] *= 1.0 - mom
            self.buffers["running_mean"] += mom * mean
            self.buffers["running_var"] *= 1.0 - mom
            self.buffers["running_var"] += mom * var * (m / max(m - 1, 1))
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None]) * inv[None, :, None]
        self._xhat, self._inv, self._train = xhat, inv, self.training
        return g * xhat + b

    def backward(self, dy):
        xhat, inv = self._xhat, self._inv
        self.grads["gamma"] += (dy * xhat).sum(axis=(0, 2))
        self.grads["beta"] += dy.sum(axis=(0, 2))
        dxhat = dy * self.params["gamma"][None, :, None]
        if not self._train:
            return dxhat * inv[None, :, None]
        m = dy.shape[0] * dy.shape[2]
        s1 = dxhat.sum(axis=(0, 2), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        return inv[None, :, None] / m * (m * dxhat - s1 - xhat * s2)


class ReLU(Module):
    def forward(self, x):
        self._mask = x > 0
        self.margin = float(np.min(np.abs(x))) if x.size else math.inf
        return np.where(self._mask, x, 0.0)

    def backward(self, dy):
        return np.where(self._mask, dy, 0.0)


class ConvBNReLU(Module):
    """Convolution, batch normalization, ReLU."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 7, rng: np.random.Generator | None = None):
        super().__init__()
        self.conv = self.add_child("conv", Conv1d(c_in, c_out, kernel, rng))
        self.bn = self.add_child("bn", BatchNorm1d(c_out))
        self.relu = self.add_child("relu", ReLU())

    def forward(self, x):
        return self.relu.forward(self.bn.forward(self.conv.forward(x)))

    def backward(self, dy):
        return self.conv.backward(self.bn.backward(self.relu.backward(dy)))


class Linear(Module):
    """Affine map ``x @ W.T + b`` on the last axis."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.add_param("W", glorot_uniform(rng, (n_out, n_in), n_in, n_out))
        self.add_param("b", np.zeros(n_out))

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"Linear expects last dim {self.n_in}, got {x.shape}")
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, dy):
        x2 = self._x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.grads["W"] += dy2.T @ x2
        self.grads["b"] += dy2.sum(axis=0)
        return dy @ self.params["W"]


class AdaptiveAvgPool1d(Module):
    """Average over ``out_len`` bins covering the time axis."""

    def __init__(self, out_len: int):
        super().__init__()
        if out_len < 1:
            raise ValueError("out_len must be >= 1")
        self.out_len = out_len

    def forward(self, x):
        self._length = x.shape[-1]
        self._mat = adaptive_pool_matrix(self._length, self.out_len)
        return x @ self._mat

    def backward(self, dy):
        return dy @ self._mat.T


def adaptive_pool_bins(length: int, out_len: int) -> list[tuple[int, int]]:
    """Bin ``i`` spans [floor(i L / m), ceil((i + 1) L / m))."""
    if out_len < 1:
        raise ValueError("out_len must be >= 1")
    if out_len > length:
        raise ValueError(f"out_len {out_len} exceeds length {length}")
    return [((i * length) // out_len, -((-(i + 1) * length) // out_len)) for i in range(out_len)]


def adaptive_pool_matrix(length: int, out_len: int) -> np.ndarray:
    mat = np.zeros((length, out_len))
    for i, (lo, hi) in enumerate(adaptive_pool_bins(length, out_len)):
        mat[lo:hi, i] = 1.0 / (hi - lo)
    return mat


# --------------------------------------------------------------------------
# functional forms
# --------------------------------------------------------------------------

def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_stable(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def dense(x, W, b, activation: str = "none") -> np.ndarray:
    """``activation(W x + b)`` for a vector ``x``."""
    x, W, b = (np.asarray(a, dtype=np.float64) for a in (x, W, b))
    if W.ndim != 2 or W.shape[1] != x.shape[-1] or b.shape != (W.shape[0],):
        raise ValueError(f"dense shape mismatch: W{W.shape}, x{x.shape}, b{b.shape}")
    z = x @ W.T + b
    if activation == "none":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    raise ValueError(f"unknown activation {activation!r}")


def conv_bn_relu(x, p: dict, mode: str = "train") -> np.ndarray:
    """Stateless CBR: ``p`` holds W, b, gamma, beta and optionally running stats.

    Running statistics in ``p`` are updated in place in train mode.
    """
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(p["W"], dtype=np.float64)
    c_out, c_in, k = W.shape
    layer = ConvBNReLU(c_in, c_out, k)
    layer.conv.params["W"][...] = W
    layer.conv.params["b"][...] = p.get("b", 0.0)
    layer.bn.params["gamma"][...] = p.get("gamma", 1.0)
    layer.bn.params["beta"][...] = p.get("beta", 0.0)
    for name in ("running_mean", "running_var"):
        if name in p:
            layer.bn.buffers[name][...] = p[name]
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    layer.train(mode == "train")
    y = layer.forward(x)
    for name in ("running_mean", "running_var"):
        if name in p and mode == "train":
            p[name][...] = layer.bn.buffers[name]
    return y


def pool(x, kind: str, out_len: int = 1) -> np.ndarray:
    """Temporal pooling of an (N, H, L) tensor."""
    x = np.asarray(x, dtype=np.float64)
    if out_len < 1:
        raise ValueError("out_len must be >= 1")
    if kind == "global_avg":
        return x.mean(axis=-1, keepdims=True)
    if kind == "global_max":
        return x.max(axis=-1, keepdims=True)
    if kind == "adaptive_avg":
        return x @ adaptive_pool_matrix(x.shape[-1], out_len)
    raise ValueError(f"unknown pooling kind {kind!r}")


# --------------------------------------------------------------------------
# gradient verification
# --------------------------------------------------------------------------

def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], point, eps: float = 1e-4) -> float:
    """Max componentwise relative error between analytic and central-difference gradients.

    ``f(theta)`` returns ``(value, gradient)``.  The relative error of each
    component is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    theta = np.array(point, dtype=np.float64).ravel()
    value, analytic = f(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if not np.isfinite(value) or not np.all(np.isfinite(analytic)):
        raise NumericError("non-finite value or gradient at the check point")
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + eps
        fp, _ = f(theta.copy())
        theta[i] = old - eps
        fm, _ = f(theta.copy())
        theta[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite value while perturbing component {i}")
        numeric[i] = (fp - fm) / (2.0 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def module_objective(module: Module, x: np.ndarray, weights: np.ndarray | None = None,
                     wrt: str = "params") -> tuple[Callable, np.ndarray]:
    """Scalar probe ``mean(weights * module(x))`` as a function of a flat vector.

    ``wrt="params"`` differentiates with respect to every parameter (in
    ``named_parameters`` order); ``wrt="input"`` with respect to ``x``.
    Returns the objective and the starting point.
    """
    names = [n for n, _ in module.named_parameters()]
    arrays = dict(module.named_parameters())
    out = module.forward(x)
    if weights is None:
        weights = np.random.default_rng(12345).standard_normal(out.shape)
    weights = weights / out.size

    def unflatten(theta):
        pos = 0
        for n in names:
            a = arrays[n]
            a[...] = theta[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    if wrt == "params":
        start = np.concatenate([arrays[n].ravel() for n in names])

        def f(theta):
            unflatten(theta)
            module.zero_grad()
            y = module.forward(x)
            module.backward(weights)
            grads = dict(module.named_grads())
            return float(np.sum(weights * y)), np.concatenate([grads[n].ravel() for n in names])

        return f, start
    if wrt == "input":
        def f(theta):
            xi = theta.reshape(x.shape)
            module.zero_grad()
            y = module.forward(xi)
            dx = module.backward(weights)
            return float(np.sum(weights * y)), dx.ravel()

        return f, x.ravel().copy()
    raise ValueError("wrt must be 'params' or 'input'")


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def dump_state(state: dict[str, np.ndarray], header: dict | None = None) -> str:
    """JSON checkpoint: ``{"header": ..., "tensors": {name: {shape, values}}}``.

    Values use Python's shortest round-trip float repr, so loading is exact.
    """
    doc = {
        "header": header or {},
        "tensors": {k: {"shape": list(v.shape), "values": np.asarray(v, dtype=np.float64).ravel().tolist()}
                    for k, v in state.items()},
    }
    return json.dumps(doc)


def parse_state(text: str) -> tuple[dict, dict[str, np.ndarray]]:
    doc = json.loads(text)
    tensors = {}
    for k, v in doc["tensors"].items():
        arr = np.array(v["values"], dtype=np.float64)
        shape = tuple(v["shape"])
        if arr.size != math.prod(shape):
            raise ValueError(f"tensor {k}: {arr.size} values for shape {shape}")
        tensors[k] = arr.reshape(shape)
    return doc.get("header", {}), tensors
