"""Small reverse-mode layer kit: conv1d, batchnorm1d, relu, linear, SGD.

Activations are numpy arrays laid out channel-last, ``(batch, length,
channels)``, so every convolution tap is a single BLAS matmul over
contiguous rows. Each layer caches what its backward pass needs during
``forward(x, train=True)``; ``backward(grad_out)`` accumulates parameter
gradients into ``layer.grads`` and returns the gradient w.r.t. the input.
"""
from __future__ import annotations

import copy
import math
import warnings
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError, StateError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
INIT_SCHEME = "he_uniform"


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _saved(self):
        if self._cache is None:
            raise StateError(f"{self.kind}.backward called without a preceding training forward pass")
        return self._cache

    def astype(self, dtype) -> "Layer":
        for d in (self.params, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        self.zero_grad()
        return self


class Conv1d(Layer):
    """Stride-1 cross-correlation with zero 'same' padding; weight is (out, in, kernel)."""

    kind = "conv1d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        if kernel < 1 or kernel % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kernel}")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * kernel
        self.params["weight"] = he_uniform(rng, (out_ch, in_ch, kernel), fan_in, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=dtype)
        self.zero_grad()

    def _taps(self) -> np.ndarray:
        # (kernel, in, out), contiguous: strided weight views fall off the BLAS path
        return np.ascontiguousarray(self.params["weight"].transpose(2, 1, 0))

    def forward(self, x, train=True):
        if x.ndim != 3 or x.shape[2] != self.in_ch:
            raise ShapeError(f"conv1d expects (batch, length, {self.in_ch}), got {x.shape}")
        L = x.shape[1]
        p = self.kernel // 2
        taps = self._taps()
        out = x @ taps[p]
        for t in range(self.kernel):
            d = t - p
            if d == 0 or abs(d) >= L:
                continue
            if d > 0:
                out[:, :L - d] += x[:, d:] @ taps[t]
            else:
                out[:, -d:] += x[:, :L + d] @ taps[t]
        if "bias" in self.params:
            out += self.params["bias"]
        self._cache = (x, taps) if train else None
        return out

    def backward(self, grad_out):
        x, taps = self._saved()
        B, L, C = x.shape
        p = self.kernel // 2
        g2 = grad_out.reshape(-1, self.out_ch)
        gx = grad_out @ np.ascontiguousarray(taps[p].T)
        gw = np.empty((self.kernel, C, self.out_ch), dtype=grad_out.dtype)
        gw[p] = x.reshape(-1, C).T @ g2
        for t in range(self.kernel):
            d = t - p
            if d == 0:
                continue
            if abs(d) >= L:
                gw[t] = 0
                continue
            wt = np.ascontiguousarray(taps[t].T)
            if d > 0:
                # out[l] += x[l + d] w_t
                xs, gs = x[:, d:], grad_out[:, :L - d]
                gx[:, d:] += gs @ wt
            else:
                xs, gs = x[:, :L + d], grad_out[:, -d:]
                gx[:, :L + d] += gs @ wt
            gw[t] = xs.reshape(-1, C).T @ gs.reshape(-1, self.out_ch)
        self.grads["weight"] += gw.transpose(2, 1, 0)
        if "bias" in self.params:
            self.grads["bias"] += g2.sum(axis=0)
        return gx


class BatchNorm1d(Layer):
    """Per-channel normalisation over batch and length.

    Training mode uses biased batch statistics and updates running stats with
    ``running = (1 - momentum) * running + momentum * batch`` (unbiased
    variance for the running estimate).
    """

    kind = "batchnorm1d"

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM, dtype=np.float32):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.buffers["num_batches"] = np.zeros(1, dtype=np.int64)
        self.zero_grad()

    def astype(self, dtype):
        n = self.buffers["num_batches"]
        super().astype(dtype)
        self.buffers["num_batches"] = n
        return self

    @property
    def initialized(self) -> bool:
        return int(self.buffers["num_batches"][0]) > 0

    def forward(self, x, train=True):
        if x.ndim != 3 or x.shape[2] != self.channels:
            raise ShapeError(f"batchnorm1d expects (batch, length, {self.channels}), got {x.shape}")
        gamma, beta = self.params["gamma"], self.params["beta"]
        if not train:
            if not self.initialized:
                raise StateError("batchnorm running statistics are uninitialised; run a training step first")
            scale = gamma / np.sqrt(self.buffers["running_var"] + self.eps)
            shift = beta - self.buffers["running_mean"] * scale
            self._cache = None
            return x * scale + shift
        m = x.shape[0] * x.shape[1]
        # statistics accumulate in float64 whatever the storage type
        mean = x.mean(axis=(0, 1), dtype=np.float64)
        xc = x - mean.astype(x.dtype)
        var = np.mean(xc * xc, axis=(0, 1), dtype=np.float64)
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = xc * inv
        unbiased = var * (m / (m - 1)) if m > 1 else var
        mom = self.momentum
        self.buffers["running_mean"] = ((1 - mom) * self.buffers["running_mean"] + mom * mean).astype(x.dtype)
        self.buffers["running_var"] = ((1 - mom) * self.buffers["running_var"] + mom * unbiased).astype(x.dtype)
        self.buffers["num_batches"] = self.buffers["num_batches"] + 1
        self._cache = (xhat, inv, m)
        return xhat * gamma + beta

    def backward(self, grad_out):
        xhat, inv, m = self._saved()
        gamma = self.params["gamma"]
        gbeta = grad_out.sum(axis=(0, 1))
        ggamma = (grad_out * xhat).sum(axis=(0, 1))
        self.grads["gamma"] += ggamma
        self.grads["beta"] += gbeta
        return (gamma * inv / m) * (m * grad_out - gbeta - xhat * ggamma)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=True):
        if not train:
            self._cache = None
            return np.maximum(x, 0)
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad_out):
        return grad_out * self._saved()


class Linear(Layer):
    """Affine map on the last axis: ``x @ weight.T + bias`` with weight (out, in)."""

    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32, zero_init: bool = False):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        if zero_init:
            w = np.zeros((out_features, in_features), dtype=dtype)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            w = he_uniform(rng, (out_features, in_features), in_features, dtype)
        self.params["weight"] = w
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=True):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear expects {self.in_features} input features, got {x.shape[-1]}")
        self._cache = x if train else None
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad_out):
        x = self._saved()
        g2 = grad_out.reshape(-1, self.out_features)
        self.grads["weight"] += g2.T @ x.reshape(-1, self.in_features)
        self.grads["bias"] += g2.sum(axis=0)
        return grad_out @ self.params["weight"]


class Sequential:
    def __init__(self, layers: Sequence[Layer]):
        self.layers: List[Layer] = list(layers)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    __call__ = forward

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self) -> Iterator[Tuple[Layer, str]]:
        for layer in self.layers:
            for name in layer.params:
                yield layer, name

    def astype(self, dtype) -> "Sequential":
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def clear_cache(self):
        for layer in self.layers:
            layer._cache = None


# ---------------------------------------------------------------- optimiser

class SGD:
    """SGD with heavy-ball momentum: ``v = momentum * v + g; theta -= lr * v``."""

    def __init__(self, params: Sequence[Tuple[Layer, str]], lr: float, momentum: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(layer.params[name]) for layer, name in self.params]

    def step(self):
        thetas = [layer.params[name] for layer, name in self.params]
        grads = [layer.grads[name] for layer, name in self.params]
        sgd_step(thetas, grads, self.velocity, self.lr, self.momentum)


def sgd_step(params: List[np.ndarray], grads: List[np.ndarray], velocity: List[np.ndarray],
             lr: float, momentum: float):
    """In-place momentum update of ``params`` and ``velocity``."""
    for theta, g, v in zip(params, grads, velocity):
        if theta.shape != g.shape or v.shape != g.shape:
            raise ShapeError(f"parameter/gradient shape mismatch: {theta.shape} vs {g.shape}")
        v *= momentum
        v += g
        theta -= (lr * v).astype(theta.dtype, copy=False)


def cosine_lr(t: float, T: float, lr0: float, t_start: float = 0) -> float:
    """Hold ``lr0`` until ``t_start``, then cosine-anneal to 0 at ``T``."""
    if T <= t_start:
        raise ValueError(f"total epochs {T} must exceed the decay start {t_start}")
    if t < t_start:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * (t - t_start) / (T - t_start)))


# ---------------------------------------------------------------- gradient check

class DegenerateCheckWarning(UserWarning):
    pass


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def _central_diff(arr: np.ndarray, f, eps: float) -> np.ndarray:
    """Numeric gradient of ``f()`` w.r.t. ``arr``, perturbing it in place."""
    num = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        num[idx] = (fp - fm) / (2 * eps)
    return num


def grad_check(model: Sequential, x: np.ndarray, eps: float = 1e-5, seed: int = 0, train: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    The network output is reduced to a scalar through a fixed random
    projection (a plain sum is constant through batchnorm). Runs on a float64
    copy of ``model``. Relative error is measured per tensor as
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` in the 2-norm,
    for the input and for every parameter, where ``floor`` is 1e-5 times the
    largest gradient norm in the check; the floor keeps structurally-zero
    gradients (a conv bias feeding batchnorm) from comparing finite-difference
    noise against exact zeros. Returns NaN, with a warning, when a
    batchnorm layer would normalise a single value per channel.
    """
    m = copy.deepcopy(model).astype(np.float64)
    x = np.array(x, dtype=np.float64)
    if train and any(isinstance(l, BatchNorm1d) for l in m.layers) and x.shape[0] * x.shape[1] < 2:
        warnings.warn("batchnorm over a single value per channel is degenerate; check skipped",
                      DegenerateCheckWarning, stacklevel=2)
        return math.nan
    out = m.forward(x, train)
    proj = np.random.default_rng(seed).standard_normal(out.shape)

    def f() -> float:
        return float(np.sum(m.forward(x, train) * proj))

    m.zero_grad()
    m.forward(x, train)
    gx = m.backward(proj)
    pairs = [(gx, _central_diff(x, f, eps))]
    for layer, name in m.parameters():
        pairs.append((layer.grads[name], _central_diff(layer.params[name], f, eps)))
    scale = max(max(np.linalg.norm(a), np.linalg.norm(n)) for a, n in pairs)
    floor = max(1e-5 * scale, np.finfo(np.float64).tiny)
    return max(_rel_err(a, n, floor) for a, n in pairs)
