"""Minimal reverse-mode autodiff over float64 numpy arrays.

Just enough machinery for the cross-attention decoder: dense tensors, a
recording tape, the handful of primitives the decoder and losses need, and
an optimizer with parameter freezing. Everything is deterministic: fixed
reduction orders, no threading, float64 throughout. Bit-identical
invariance to code permutations is achieved upstream, where the decoder
canonicalizes code-row order before any reduction touches them.
"""

from __future__ import annotations

import numpy as np


class NumericError(RuntimeError):
    """Raised when a NaN/Inf shows up anywhere in a computation."""


class DimensionError(ValueError):
    """Raised on shape mismatches; message carries both shapes."""


def _check_finite(values: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite value produced in {where}")


class DTensor:
    """Dense float64 array with a same-shape gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        self.values = np.array(values, dtype=np.float64)
        _check_finite(self.values, name or "DTensor")
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"DTensor(shape={self.values.shape}, name={self.name!r})"


class Tape:
    """Ordered record of primitive ops; inputs always precede outputs.

    The reverse sweep propagates per-sweep adjoints and then adds them into
    each tensor's .grad, so sweeping twice without re-running the forward
    pass accumulates exactly double gradients.
    """

    def __init__(self):
        # each entry: (output tensor, [(input tensor, vjp(adjoint) -> array)])
        self._ops: list[tuple[DTensor, list[tuple[DTensor, object]]]] = []

    def record(self, out: DTensor, pulls) -> None:
        self._ops.append((out, pulls))

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: DTensor) -> None:
        if loss.values.size != 1:
            raise DimensionError(
                f"backward needs a scalar loss, got shape {loss.values.shape}"
            )
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        touched: dict[int, DTensor] = {id(loss): loss}
        for out, pulls in reversed(self._ops):
            g = adjoint.get(id(out))
            if g is None:
                continue
            for inp, vjp in pulls:
                contrib = vjp(g)
                key = id(inp)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + contrib
                else:
                    adjoint[key] = contrib.copy()
                    touched[key] = inp
        for key, t in touched.items():
            _check_finite(adjoint[key], f"gradient of {t.name or 'tensor'}")
            t.grad += adjoint[key]


def backward(tape: Tape, loss: DTensor) -> None:
    tape.backward(loss)


def _rec(tape: Tape | None, out: DTensor, pulls) -> DTensor:
    if tape is not None:
        tape.record(out, pulls)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(tape, a: DTensor, b: DTensor) -> DTensor:
    out = DTensor(a.values + b.values)
    return _rec(tape, out, [
        (a, lambda g, s=a.shape: _unbroadcast(g, s)),
        (b, lambda g, s=b.shape: _unbroadcast(g, s)),
    ])


def sub(tape, a: DTensor, b: DTensor) -> DTensor:
    out = DTensor(a.values - b.values)
    return _rec(tape, out, [
        (a, lambda g, s=a.shape: _unbroadcast(g, s)),
        (b, lambda g, s=b.shape: -_unbroadcast(g, s)),
    ])


def mul(tape, a: DTensor, b: DTensor) -> DTensor:
    out = DTensor(a.values * b.values)
    return _rec(tape, out, [
        (a, lambda g, bv=b.values, s=a.shape: _unbroadcast(g * bv, s)),
        (b, lambda g, av=a.values, s=b.shape: _unbroadcast(g * av, s)),
    ])


def scale(tape, a: DTensor, c: float) -> DTensor:
    out = DTensor(a.values * c)
    return _rec(tape, out, [(a, lambda g: g * c)])


def matmul(tape, a: DTensor, b: DTensor) -> DTensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = DTensor(a.values @ b.values)
    return _rec(tape, out, [
        (a, lambda g, bv=b.values: g @ bv.T),
        (b, lambda g, av=a.values: av.T @ g),
    ])


def matmul_nt(tape, a: DTensor, b: DTensor) -> DTensor:
    """a @ b.T for (m,k) x (n,k) -> (m,n)."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"matmul_nt shape mismatch: {a.shape} x {b.shape}")
    out = DTensor(a.values @ b.values.T)
    return _rec(tape, out, [
        (a, lambda g, bv=b.values: g @ bv),
        (b, lambda g, av=a.values: g.T @ av),
    ])


def relu(tape, a: DTensor) -> DTensor:
    out = DTensor(np.maximum(a.values, 0.0))
    mask = (a.values > 0.0).astype(np.float64)
    return _rec(tape, out, [(a, lambda g, m=mask: g * m)])


def sigmoid(tape, a: DTensor) -> DTensor:
    v = np.empty_like(a.values)
    pos = a.values >= 0
    v[pos] = 1.0 / (1.0 + np.exp(-a.values[pos]))
    ez = np.exp(a.values[~pos])
    v[~pos] = ez / (1.0 + ez)
    out = DTensor(v)
    return _rec(tape, out, [(a, lambda g, vv=v: g * vv * (1.0 - vv))])


def log(tape, a: DTensor) -> DTensor:
    out = DTensor(np.log(a.values))
    return _rec(tape, out, [(a, lambda g, av=a.values: g / av)])


def clamp(tape, a: DTensor, lo: float, hi: float) -> DTensor:
    out = DTensor(np.clip(a.values, lo, hi))
    mask = ((a.values > lo) & (a.values < hi)).astype(np.float64)
    return _rec(tape, out, [(a, lambda g, m=mask: g * m)])


def abs_(tape, a: DTensor) -> DTensor:
    out = DTensor(np.abs(a.values))
    sign = np.sign(a.values)
    return _rec(tape, out, [(a, lambda g, s=sign: g * s)])


def softmax_rows(tape, logits: DTensor) -> DTensor:
    """Row-wise softmax with max-subtraction.

    Reduction order is fixed by the caller's (canonical) column order, so
    outputs are deterministic for a given ordering.
    """
    if logits.values.ndim != 2 or logits.shape[1] < 1:
        raise DimensionError(f"softmax_rows needs (m,n) with n>=1, got {logits.shape}")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    p = e / denom
    out = DTensor(p)

    def pull(g, pv=p):
        dot = (g * pv).sum(axis=1, keepdims=True)
        return pv * (g - dot)

    return _rec(tape, out, [(logits, pull)])


def attn_matmul(tape, attn: DTensor, v: DTensor) -> DTensor:
    """attn @ v, the attention-weighted sum over the code axis.

    Callers canonicalize code order first, which is what makes decode
    outputs bit-identical under code permutations.
    """
    if attn.shape[1] != v.shape[0]:
        raise DimensionError(f"attn_matmul shape mismatch: {attn.shape} x {v.shape}")
    out = DTensor(attn.values @ v.values)
    return _rec(tape, out, [
        (attn, lambda g, vv=v.values: g @ vv.T),
        (v, lambda g, av=attn.values: av.T @ g),
    ])


def layer_norm(tape, x: DTensor, gain: DTensor, bias: DTensor,
               eps: float = 1e-6) -> DTensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs feature dim >= 2, got {x.shape}")
    mean = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = DTensor(xhat * gain.values + bias.values)

    def pull_x(g, xh=xhat, iv=inv, gv=gain.values, n=d):
        gx = g * gv
        return iv * (gx - gx.mean(axis=-1, keepdims=True)
                     - xh * (gx * xh).mean(axis=-1, keepdims=True))

    return _rec(tape, out, [
        (x, pull_x),
        (gain, lambda g, xh=xhat, s=gain.shape: _unbroadcast(g * xh, s)),
        (bias, lambda g, s=bias.shape: _unbroadcast(g, s)),
    ])


def take_rows(tape, a: DTensor, idx: np.ndarray) -> DTensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = DTensor(a.values[idx])

    def pull(g, n=a.shape, ii=idx):
        full = np.zeros(n, dtype=np.float64)
        np.add.at(full, ii, g)
        return full

    return _rec(tape, out, [(a, pull)])


def slice_cols(tape, a: DTensor, j0: int, j1: int) -> DTensor:
    out = DTensor(a.values[:, j0:j1])

    def pull(g, n=a.shape, a0=j0, a1=j1):
        full = np.zeros(n, dtype=np.float64)
        full[:, a0:a1] = g
        return full

    return _rec(tape, out, [(a, pull)])


def rows_l2norm(tape, a: DTensor) -> DTensor:
    """Per-row Euclidean norm, (m,d) -> (m,1). Zero rows get zero gradient."""
    n = np.sqrt((a.values ** 2).sum(axis=1, keepdims=True))
    out = DTensor(n)

    def pull(g, av=a.values, nv=n):
        safe = np.where(nv > 0.0, nv, 1.0)
        return g * av / safe * (nv > 0.0)

    return _rec(tape, out, [(a, pull)])


def sum_all(tape, a: DTensor) -> DTensor:
    out = DTensor(np.array(a.values.sum()))
    return _rec(tape, out, [(a, lambda g, s=a.shape: np.broadcast_to(g, s).copy())])


def mean_all(tape, a: DTensor) -> DTensor:
    k = a.values.size
    out = DTensor(np.array(a.values.mean()))
    return _rec(tape, out, [
        (a, lambda g, s=a.shape, kk=k: np.broadcast_to(g / kk, s).copy())
    ])


def constant(values) -> DTensor:
    return DTensor(values, requires_grad=False)


class MLP:
    """Affine stack with ReLU between layers and a linear final layer."""

    def __init__(self, weights: list[DTensor], biases: list[DTensor]):
        if len(weights) != len(biases):
            raise DimensionError("weights/biases length mismatch")
        for w, b in zip(weights, biases):
            if w.shape[1] != b.shape[-1]:
                raise DimensionError(f"affine shape mismatch: {w.shape} vs {b.shape}")
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, widths: list[int], rng: np.random.Generator,
             prefix: str = "mlp") -> "MLP":
        weights, biases = [], []
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / (fi + fo))
            w = DTensor(rng.uniform(-bound, bound, size=(fi, fo)),
                        requires_grad=True, name=f"{prefix}.{i}.W")
            b = DTensor(np.zeros((1, fo)), requires_grad=True,
                        name=f"{prefix}.{i}.b")
            weights.append(w)
            biases.append(b)
        return cls(weights, biases)

    def forward(self, tape, x: DTensor) -> DTensor:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if h.shape[1] != w.shape[0]:
                raise DimensionError(
                    f"mlp layer {i} width mismatch: input {h.shape} vs weight {w.shape}"
                )
            h = add(tape, matmul(tape, h, w), b)
            if i != last:
                h = relu(tape, h)
        return h

    def parameters(self) -> list[DTensor]:
        return list(self.weights) + list(self.biases)


def mlp_forward(tape, x: DTensor, mlp: MLP) -> DTensor:
    return mlp.forward(tape, x)


class Optimizer:
    """Adam (default) or plain gradient descent over named parameters.

    Frozen parameters are never touched: no value update, no moment update.
    step() zeroes the gradients of every parameter it owns, frozen included.
    """

    def __init__(self, params: dict[str, DTensor], lr: float,
                 method: str = "adam", betas=(0.9, 0.999), eps: float = 1e-8):
        if method not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer method {method!r}")
        self.params = dict(params)
        self.lr = lr
        self.method = method
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.frozen: set[str] = set()
        self.steps: dict[str, int] = {name: 0 for name in self.params}
        if method == "adam":
            self.m = {n: np.zeros_like(p.values) for n, p in self.params.items()}
            self.v = {n: np.zeros_like(p.values) for n, p in self.params.items()}

    def freeze(self, name: str) -> None:
        if name not in self.params:
            raise KeyError(name)
        self.frozen.add(name)

    def unfreeze(self, name: str) -> None:
        self.frozen.discard(name)

    def reset_moment_rows(self, name: str, rows) -> None:
        """Clear Adam state for specific rows (used after code pruning)."""
        if self.method == "adam":
            self.m[name][rows] = 0.0
            self.v[name][rows] = 0.0

    def step(self, active=None) -> None:
        names = sorted(self.params) if active is None else sorted(active)
        for name in names:
            p = self.params[name]
            if name in self.frozen:
                continue
            if np.any(np.isnan(p.grad)):
                raise NumericError(f"NaN gradient in parameter {name!r}")
            self.steps[name] += 1
            if self.method == "sgd":
                p.values -= self.lr * p.grad
            else:
                t = self.steps[name]
                m = self.m[name]
                v = self.v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * p.grad ** 2
                mhat = m / (1.0 - self.beta1 ** t)
                vhat = v / (1.0 - self.beta2 ** t)
                p.values -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
            _check_finite(p.values, f"parameter {name!r} after step")
        for name in self.params:
            self.params[name].zero_grad()


def halved_lr(base_lr: float, epoch: int, period: int) -> float:
    """Learning rate after halving once every `period` epochs."""
    if period <= 0:
        return base_lr
    return base_lr * 0.5 ** (epoch // period)
