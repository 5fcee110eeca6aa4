"""Minimal dense-tensor layers with analytic backward passes.

Exactly the five layer types the per-target branches need (same-padding
convolution, fully-connected, locally-connected, spatial softmax, and the
elementwise activations), plus plain-SGD updates and a finite-difference
gradient checker.  Everything is float64; batches are leading-axis
``(S, H, W, C)`` / ``(S, D)`` arrays.
"""

from __future__ import annotations

import numpy as np

from . import kernels

__all__ = [
    "Layer",
    "Conv2D",
    "Dense",
    "LocallyConnected",
    "SpatialSoftmax",
    "ReLU",
    "Sigmoid",
    "relu",
    "sigmoid",
    "spatial_softmax",
    "cross_entropy",
    "cross_entropy_grad",
    "sgd_step",
    "grad_check",
    "CE_EPS",
]

CE_EPS = 1e-7


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def spatial_softmax(m: np.ndarray) -> np.ndarray:
    """Softmax over the spatial cells of a (H, W) or (S, H, W) map."""
    single = m.ndim == 2
    x = m[None] if single else m
    shifted = x - x.max(axis=(1, 2), keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=(1, 2), keepdims=True)
    return out[0] if single else out


def cross_entropy(pred: np.ndarray, target: np.ndarray, eps: float = CE_EPS) -> float:
    """Mean binary cross-entropy; predictions clamped to [eps, 1-eps]."""
    p = np.clip(np.asarray(pred, dtype=np.float64), eps, 1.0 - eps)
    t = np.asarray(target, dtype=np.float64)
    return float(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))))


def cross_entropy_grad(pred: np.ndarray, target: np.ndarray, eps: float = CE_EPS) -> np.ndarray:
    """d(mean CE)/d pred, with the clamp treated as identity."""
    p = np.clip(np.asarray(pred, dtype=np.float64), eps, 1.0 - eps)
    t = np.asarray(target, dtype=np.float64)
    return (-(t / p) + (1.0 - t) / (1.0 - p)) / p.size


class Layer:
    """Base: forward caches what backward needs; backward returns d loss/d input."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def _require_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a stored forward")
        return self._cache


class Conv2D(Layer):
    """Stride-1, zero same-padding convolution; output keeps the spatial size."""

    def __init__(self, kh: int, kw: int, cin: int, cout: int, rng: np.random.Generator,
                 std: float = 0.01):
        super().__init__()
        self.kh, self.kw, self.cin, self.cout = kh, kw, cin, cout
        self.params = {
            "w": rng.normal(0.0, std, size=(kh, kw, cin, cout)),
            "b": np.zeros(cout),
        }

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[3] != self.cin:
            raise ValueError(f"conv input shape {x.shape} does not match cin={self.cin}")
        if self.kh > x.shape[1] + 2 * (self.kh // 2) or self.kw > x.shape[2] + 2 * (self.kw // 2):
            raise ValueError("kernel larger than padded input")
        self._cache = x
        return kernels.conv2d_forward(x, self.params["w"], self.params["b"])

    def backward(self, gy: np.ndarray, need_input_grad: bool = True):
        x = self._require_cache()
        gx, gw, gb = kernels.conv2d_backward(x, self.params["w"], gy, need_input_grad)
        self.grads = {"w": gw, "b": gb}
        return gx


class Dense(Layer):
    """Fully connected y = x W + b; flattens trailing input dims."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator, std: float = 0.01):
        super().__init__()
        self.din, self.dout = din, dout
        self.params = {"w": rng.normal(0.0, std, size=(din, dout)), "b": np.zeros(dout)}

    def forward(self, x: np.ndarray) -> np.ndarray:
        s = x.shape[0]
        flat = x.reshape(s, -1)
        if flat.shape[1] != self.din:
            raise ValueError(f"dense input dim {flat.shape[1]} != {self.din}")
        self._cache = (flat, x.shape)
        return flat @ self.params["w"] + self.params["b"]

    def backward(self, gy: np.ndarray) -> np.ndarray:
        flat, shape = self._require_cache()
        self.grads = {"w": flat.T @ gy, "b": gy.sum(axis=0)}
        return (gy @ self.params["w"].T).reshape(shape)


class LocallyConnected(Layer):
    """One independent (weight, bias) per spatial cell of a (S, H, W) map."""

    def __init__(self, h: int, w: int, rng: np.random.Generator, std: float = 0.01):
        super().__init__()
        self.h, self.w = h, w
        self.params = {"w": rng.normal(0.0, std, size=(h, w)), "b": np.zeros((h, w))}

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-2:] != (self.h, self.w):
            raise ValueError(f"map shape {x.shape} does not match ({self.h}, {self.w})")
        self._cache = x
        return x * self.params["w"] + self.params["b"]

    def backward(self, gy: np.ndarray) -> np.ndarray:
        x = self._require_cache()
        self.grads = {"w": (gy * x).sum(axis=0), "b": gy.sum(axis=0)}
        return gy * self.params["w"]


class SpatialSoftmax(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        out = spatial_softmax(x)
        self._cache = out
        return out

    def backward(self, gy: np.ndarray) -> np.ndarray:
        out = self._require_cache()
        single = out.ndim == 2
        o = out[None] if single else out
        g = gy[None] if single else gy
        dot = (g * o).sum(axis=(1, 2), keepdims=True)
        gx = o * (g - dot)
        return gx[0] if single else gx


class ReLU(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x > 0.0
        return np.where(self._cache, x, 0.0)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        mask = self._require_cache()
        return np.where(mask, gy, 0.0)


class Sigmoid(Layer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        out = sigmoid(x)
        self._cache = out
        return out

    def backward(self, gy: np.ndarray) -> np.ndarray:
        out = self._require_cache()
        return gy * out * (1.0 - out)


def sgd_step(layers, lr: float) -> None:
    """Plain SGD: p <- p - lr * g for every parameter with a stored gradient."""
    for layer in layers:
        for name, p in layer.params.items():
            g = layer.grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} ({name})")
            p -= lr * g


def grad_check(loss_fn, layers, step: float = 1e-4, rel_floor: float = 1e-4) -> float:
    """Max relative error between stored analytic grads and central differences.

    ``loss_fn()`` must evaluate the scalar loss from the layers' current
    parameters; the analytic backward pass must already have populated each
    layer's ``grads`` for the same input. Every parameter is perturbed.
    """
    max_err = 0.0
    for layer in layers:
        for name, p in layer.params.items():
            g = layer.grads[name]
            pf, gf = p.ravel(), g.ravel()
            for idx in range(pf.size):
                orig = pf[idx]
                pf[idx] = orig + step
                lp = loss_fn()
                pf[idx] = orig - step
                lm = loss_fn()
                pf[idx] = orig
                numeric = (lp - lm) / (2.0 * step)
                err = abs(numeric - gf[idx]) / max(abs(numeric), abs(gf[idx]), rel_floor)
                if err > max_err:
                    max_err = err
    return max_err
