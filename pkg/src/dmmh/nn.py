"""Minimal layer substrate with explicit forward/backward adjoints.

Tensors are plain numpy arrays. Every layer keeps its parameters and
gradient accumulators in two dicts with identical keys and shapes, and
``backward`` recomputes whatever it needs from the layer input, so no
activation cache is threaded through the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when a NaN/Inf reaches a layer boundary."""


class ShapeError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    # Philox is counter based, so draws are reproducible across platforms.
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values at {where}")
    return x


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                 dtype=np.float64) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    kind = "layer"

    def __init__(self, name: str = ""):
        self.name = name or self.kind
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def _add(self, key: str, value: np.ndarray) -> None:
        self.params[key] = value
        self.grads[key] = np.zeros_like(value)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for key, p in self.params.items():
            yield f"{self.name}.{key}", p, self.grads[key]

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, x: np.ndarray, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)


class Linear(Layer):
    """``y = x @ W.T + b`` over the last axis; leading axes are batch."""

    kind = "linear"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator | None = None,
                 name: str = "", dtype=np.float64):
        super().__init__(name)
        self.d_in, self.d_out = d_in, d_out
        if rng is None:
            w = np.zeros((d_out, d_in), dtype=dtype)
        else:
            w = uniform_init(rng, (d_out, d_in), d_in, dtype)
        self._add("weight", w)
        self._add("bias", np.zeros(d_out, dtype=dtype))

    def _check(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.d_in:
            raise ShapeError(
                f"{self.name}: input shape {x.shape} does not match weight shape "
                f"{self.params['weight'].shape}")

    def forward(self, x):
        self._check(x)
        check_finite(x, f"{self.name} input")
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, x, dy, need_dx: bool = True):
        self._check(x)
        if dy.shape != x.shape[:-1] + (self.d_out,):
            raise ShapeError(f"{self.name}: cotangent shape {dy.shape} vs output "
                             f"{x.shape[:-1] + (self.d_out,)}")
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        self.grads["weight"] += dy2.T @ x2
        self.grads["bias"] += dy2.sum(axis=0)
        if not need_dx:
            return None
        return dy @ self.params["weight"]


class Conv1d(Layer):
    """Same-padded cross-correlation along axis 1 of ``[batch, L, c_in]``.

    Weight layout is ``[c_out, c_in, width]``.
    """

    kind = "conv1d"

    def __init__(self, c_in: int, c_out: int, width: int,
                 rng: np.random.Generator | None = None, name: str = "", dtype=np.float64):
        super().__init__(name)
        if width < 1 or width % 2 == 0:
            raise ShapeError(f"{self.name}: kernel width must be odd, got {width}")
        self.c_in, self.c_out, self.width = c_in, c_out, width
        fan_in = c_in * width
        if rng is None:
            w = np.zeros((c_out, c_in, width), dtype=dtype)
        else:
            w = uniform_init(rng, (c_out, c_in, width), fan_in, dtype)
        self._add("weight", w)
        self._add("bias", np.zeros(c_out, dtype=dtype))

    def _windows(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[2] != self.c_in:
            raise ShapeError(f"{self.name}: expected [batch, L, {self.c_in}], got {x.shape}")
        pad = self.width // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        L = x.shape[1]
        # [batch, L, width, c_in]
        return np.stack([xp[:, j:j + L, :] for j in range(self.width)], axis=2)

    def forward(self, x):
        cols = self._windows(x)
        check_finite(x, f"{self.name} input")
        return np.einsum("blkc,ock->blo", cols, self.params["weight"]) + self.params["bias"]

    def backward(self, x, dy):
        cols = self._windows(x)
        self.grads["weight"] += np.einsum("blo,blkc->ock", dy, cols)
        self.grads["bias"] += dy.sum(axis=(0, 1))
        dcols = np.einsum("blo,ock->blkc", dy, self.params["weight"])
        pad = self.width // 2
        L = x.shape[1]
        dxp = np.zeros((x.shape[0], L + 2 * pad, self.c_in), dtype=dy.dtype)
        for j in range(self.width):
            dxp[:, j:j + L, :] += dcols[:, :, j, :]
        return dxp[:, pad:pad + L, :]


class LayerNorm(Layer):
    kind = "layernorm"

    def __init__(self, d: int, name: str = "", dtype=np.float64):
        super().__init__(name)
        if d < 1:
            raise ShapeError("layernorm width must be >= 1")
        self.d = d
        self._add("gamma", np.ones(d, dtype=dtype))
        self._add("beta", np.zeros(d, dtype=dtype))

    def _normalize(self, x):
        if x.shape[-1] != self.d:
            raise ShapeError(f"{self.name}: expected last axis {self.d}, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
        return xc * inv, inv

    def forward(self, x):
        check_finite(x, f"{self.name} input")
        xhat, _ = self._normalize(x)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, x, dy):
        xhat, inv = self._normalize(x)
        lead = tuple(range(dy.ndim - 1))
        self.grads["gamma"] += (dy * xhat).sum(axis=lead)
        self.grads["beta"] += dy.sum(axis=lead)
        g = dy * self.params["gamma"]
        return inv * (g - g.mean(axis=-1, keepdims=True)
                      - xhat * (g * xhat).mean(axis=-1, keepdims=True))


class Activation(Layer):
    kind = "activation"
    KINDS = ("relu", "tanh")

    def __init__(self, fn: str, name: str = ""):
        if fn not in self.KINDS:
            raise ValueError(f"unknown activation {fn!r}; expected one of {self.KINDS}")
        super().__init__(name or fn)
        self.fn = fn

    def forward(self, x):
        if self.fn == "relu":
            return np.maximum(x, 0.0)
        return np.tanh(x)

    def backward(self, x, dy):
        if self.fn == "relu":
            return dy * (x > 0)
        t = np.tanh(x)
        return dy * (1.0 - t * t)


class Adam:
    """Bias-corrected Adam over a fixed list of ``(name, param, grad)`` triples."""

    def __init__(self, params: list[tuple[str, np.ndarray, np.ndarray]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for _, p, _ in params]
        self.v = [np.zeros_like(p) for _, p, _ in params]
        self.t = 0

    def zero_grad(self) -> None:
        for _, _, g in self.params:
            g.fill(0.0)

    def step(self) -> None:
        for name, _, g in self.params:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in {name}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for (_, p, g), m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: dict, lr: float, t: int, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Functional single Adam update; ``state`` holds ``m``/``v`` lists and is updated."""
    if t < 1:
        raise ValueError("t must be >= 1")
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter {i}")
        m = state["m"][i] = beta1 * state["m"][i] + (1 - beta1) * g
        v = state["v"][i] = beta2 * state["v"][i] + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    return out


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger gradient magnitude of the tensor."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale < 1e-12:
        return float(diff)
    return float(diff / scale)


def grad_check(loss_fn: Callable[[], float], tensors: dict[str, np.ndarray],
               analytic: dict[str, np.ndarray], tolerance: float = 1e-4, h: float = 1e-5,
               max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``tensors`` are perturbed in place (and restored); ``loss_fn`` must read
    them live. With ``max_entries`` only a random subset of each tensor's
    entries is probed.
    """
    report = GradCheckReport(tolerance)
    for name, t in tensors.items():
        if t.dtype != np.float64:
            raise TypeError("gradient checks require float64 tensors")
        flat = t.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or make_rng(0)).choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn()
            flat[i] = old - h
            fm = loss_fn()
            flat[i] = old
            num[j] = (fp - fm) / (2 * h)
        report.errors[name] = relative_error(analytic[name].reshape(-1)[idx], num)
    return report


def check_layer(layer: Layer, x: np.ndarray, rng: np.random.Generator,
                tolerance: float = 1e-4, h: float = 1e-5,
                max_entries: int | None = None) -> GradCheckReport:
    """Gradient check of one layer under a random linear read-out of its output."""
    probe = rng.standard_normal(layer.forward(x).shape)
    layer.zero_grad()
    dx = layer.backward(x, probe)
    analytic = {name: g.copy() for name, _, g in layer.named_parameters()}
    analytic["input"] = dx
    tensors = {name: p for name, p, _ in layer.named_parameters()}
    tensors["input"] = x

    def loss():
        return float(np.sum(probe * layer.forward(x)))

    return grad_check(loss, tensors, analytic, tolerance, h, max_entries, rng)
