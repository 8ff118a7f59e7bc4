"""Selective state-space block with a work-efficient parallel scan.

Recurrence per channel ``d`` and state ``n``::

    h[t] = Abar[t] * h[t-1] + Bx[t],   h[-1] = 0
    y[t] = sum_n C[t, n] * h[t, d, n] + Dx[t]

``Abar = exp(delta * A)`` (zero-order hold), ``Bx = delta * B * u`` (Euler).
Scan tensors are laid out ``[batch, L, d_model, d_state]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Layer, Linear, ShapeError, check_finite, inverse_softplus, sigmoid, softplus


def discretize_zoh(A, B, delta):
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0):
        raise ValueError("discretization step delta must be > 0")
    return np.exp(delta * A), delta * B


@dataclass
class ScanInputs:
    abar: np.ndarray  # [batch, L, d_model, d_state]
    bx: np.ndarray    # [batch, L, d_model, d_state]
    c: np.ndarray     # [batch, L, d_state]
    dx: np.ndarray    # [batch, L, d_model]

    def validate(self) -> None:
        if self.abar.ndim != 4 or self.abar.shape != self.bx.shape:
            raise ShapeError(f"abar {self.abar.shape} / bx {self.bx.shape} mismatch")
        b, L, d, n = self.abar.shape
        if L < 1:
            raise ShapeError("scan length must be >= 1")
        if self.c.shape != (b, L, n) or self.dx.shape != (b, L, d):
            raise ShapeError(f"c {self.c.shape} / dx {self.dx.shape} inconsistent with "
                             f"{self.abar.shape}")


def _readout(scan: ScanInputs, h: np.ndarray) -> np.ndarray:
    return np.einsum("bldn,bln->bld", h, scan.c) + scan.dx


def linear_recurrence_seq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``h[t] = a[t] * h[t-1] + b[t]`` along axis 1, one step at a time."""
    h = np.empty_like(b)
    prev = np.zeros_like(b[:, 0])
    for t in range(b.shape[1]):
        prev = a[:, t] * prev + b[:, t]
        h[:, t] = prev
    return h


def linear_recurrence_par(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same recurrence via a Blelloch up-sweep/down-sweep over pairs ``(a, b)``.

    Pairs compose as ``(a1, b1) then (a2, b2) = (a2*a1, a2*b1 + b2)``. The
    time axis is padded with identity pairs to a power of two; every level
    runs as one vectorized update, so the combination order is fixed.
    """
    L = b.shape[1]
    P = 1 << max(L - 1, 0).bit_length()
    # time-major working copies
    sa = np.ones((P,) + a.shape[:1] + a.shape[2:], dtype=np.result_type(a, b))
    sb = np.zeros_like(sa)
    sa[:L] = np.moveaxis(a, 1, 0)
    sb[:L] = np.moveaxis(b, 1, 0)

    step = 1
    while step < P:
        right = np.arange(2 * step - 1, P, 2 * step)
        left = right - step
        sb[right] = sa[right] * sb[left] + sb[right]
        sa[right] = sa[right] * sa[left]
        step *= 2

    sa[P - 1] = 1.0
    sb[P - 1] = 0.0
    step = P // 2
    while step >= 1:
        right = np.arange(2 * step - 1, P, 2 * step)
        left = right - step
        la, lb = sa[left].copy(), sb[left].copy()
        sa[left], sb[left] = sa[right], sb[right]
        # prefix(right) = prefix(parent) then left subtree
        sb[right] = la * sb[right] + lb
        sa[right] = la * sa[right]
        step //= 2

    # exclusive prefix -> inclusive state
    h = np.moveaxis(a, 1, 0) * sb[:L] + np.moveaxis(b, 1, 0)
    return np.moveaxis(h, 0, 1)


def selective_scan_seq(scan: ScanInputs) -> np.ndarray:
    scan.validate()
    return _readout(scan, linear_recurrence_seq(scan.abar, scan.bx))


def selective_scan_par(scan: ScanInputs) -> np.ndarray:
    scan.validate()
    return _readout(scan, linear_recurrence_par(scan.abar, scan.bx))


def silu(z):
    return z * sigmoid(z)


class SsmBlock(Layer):
    """Gated selective SSM with a residual connection: ``x + out(scan(x) * silu(gate(x)))``."""

    kind = "ssm"

    def __init__(self, d_model: int, d_state: int = 8, rng: np.random.Generator | None = None,
                 name: str = "ssm", dtype=np.float64, dt_range: tuple[float, float] = (0.01, 0.1)):
        super().__init__(name)
        self.d_model, self.d_state = d_model, d_state
        self.proj_dt = Linear(d_model, d_model, rng, f"{name}.dt", dtype)
        self.proj_b = Linear(d_model, d_state, rng, f"{name}.B", dtype)
        self.proj_c = Linear(d_model, d_state, rng, f"{name}.C", dtype)
        self.proj_gate = Linear(d_model, d_model, rng, f"{name}.gate", dtype)
        self.proj_out = Linear(d_model, d_model, rng, f"{name}.out", dtype)
        # B and C carry no bias
        for lin in (self.proj_b, self.proj_c):
            del lin.params["bias"], lin.grads["bias"]
        if rng is not None:
            lo, hi = np.log(dt_range[0]), np.log(dt_range[1])
            dt = np.exp(rng.uniform(lo, hi, size=d_model))
            self.proj_dt.params["bias"][:] = inverse_softplus(dt)
            # small dt weights keep softplus inside dt_range at init
            self.proj_dt.params["weight"] *= 0.1
        a_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=dtype), (d_model, 1)))
        self._add("a_log", a_log)
        self._add("d_skip", np.ones(d_model, dtype=dtype))
        self.linears = (self.proj_dt, self.proj_b, self.proj_c, self.proj_gate, self.proj_out)

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.params["a_log"])

    def zero_grad(self):
        super().zero_grad()
        for lin in self.linears:
            lin.zero_grad()

    def named_parameters(self):
        for lin in self.linears:
            yield from lin.named_parameters()
        yield from super().named_parameters()

    @staticmethod
    def _proj(lin: Linear, x):
        y = x @ lin.params["weight"].T
        if "bias" in lin.params:
            y = y + lin.params["bias"]
        return y

    def _lin_backward(self, lin: Linear, x, dy):
        x2 = x.reshape(-1, lin.d_in)
        dy2 = dy.reshape(-1, lin.d_out)
        lin.grads["weight"] += dy2.T @ x2
        if "bias" in lin.grads:
            lin.grads["bias"] += dy2.sum(axis=0)
        return dy @ lin.params["weight"]

    def scan_inputs(self, x: np.ndarray):
        """Per-token projections and discretization; returns scan inputs plus intermediates."""
        if x.ndim != 3 or x.shape[2] != self.d_model:
            raise ShapeError(f"{self.name}: expected [batch, L, {self.d_model}], got {x.shape}")
        z_dt = self._proj(self.proj_dt, x)
        delta = softplus(z_dt)
        bm = self._proj(self.proj_b, x)
        cm = self._proj(self.proj_c, x)
        abar = np.exp(delta[..., None] * self.A)
        bx = (delta * x)[..., None] * bm[:, :, None, :]
        scan = ScanInputs(abar, bx, cm, x * self.params["d_skip"])
        return scan, (z_dt, delta, bm)

    def forward(self, x, parallel: bool = True):
        check_finite(x, f"{self.name} input")
        scan, _ = self.scan_inputs(x)
        y = selective_scan_par(scan) if parallel else selective_scan_seq(scan)
        g = silu(self._proj(self.proj_gate, x))
        return x + self._proj(self.proj_out, y * g)

    def backward(self, x, dy):
        scan, (z_dt, delta, bm) = self.scan_inputs(x)
        cm = scan.c
        h = linear_recurrence_par(scan.abar, scan.bx)
        y = _readout(scan, h)
        zg = self._proj(self.proj_gate, x)
        sg = sigmoid(zg)
        g = zg * sg

        dx = dy.copy()
        dyg = self._lin_backward(self.proj_out, y * g, dy)
        dy_scan = dyg * g
        dzg = dyg * y * (sg + zg * sg * (1.0 - sg))
        dx += self._lin_backward(self.proj_gate, x, dzg)

        # readout
        dcm = np.einsum("bld,bldn->bln", dy_scan, h)
        self.grads["d_skip"] += (dy_scan * x).sum(axis=(0, 1))
        du = dy_scan * self.params["d_skip"]
        # state adjoint runs backwards in time: dh[t] = src[t] + abar[t+1] * dh[t+1]
        src = dy_scan[..., None] * cm[:, :, None, :]
        a_next = np.zeros_like(scan.abar)
        a_next[:, :-1] = scan.abar[:, 1:]
        dh = linear_recurrence_par(a_next[:, ::-1], src[:, ::-1])[:, ::-1]

        h_prev = np.zeros_like(h)
        h_prev[:, 1:] = h[:, :-1]
        dabar = dh * h_prev
        dbx = dh

        A = self.A
        ga = dabar * scan.abar  # d/d(delta*A)
        ddelta = np.einsum("bldn,dn->bld", ga, A)
        dA = np.einsum("bldn,bld->dn", ga, delta)
        self.grads["a_log"] += dA * A

        # bx = delta * x * bm
        ddelta += np.einsum("bldn,bln->bld", dbx, bm) * x
        du += np.einsum("bldn,bln->bld", dbx, bm) * delta
        dbm = np.einsum("bldn,bld->bln", dbx, delta * x)

        dz_dt = ddelta * sigmoid(z_dt)
        dx += du
        dx += self._lin_backward(self.proj_dt, x, dz_dt)
        dx += self._lin_backward(self.proj_b, x, dbm)
        dx += self._lin_backward(self.proj_c, x, dcm)
        return dx
