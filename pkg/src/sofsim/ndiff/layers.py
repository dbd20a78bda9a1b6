"""Parameterised building blocks on top of :mod:`sofsim.ndiff.tensor`."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Container of parameters, buffers and child modules, addressed by dotted names."""

    training = True

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix="") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for child in value:
                    yield from child.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.value.copy() for name, p in self.named_parameters()}
        state.update({name: np.array(b, copy=True) for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        missing = (params.keys() | buffers) - state.keys()
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} vs model shape {p.shape}")
            p.value = value.astype(p.value.dtype)
        for name in buffers:
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.asarray(state[name], dtype=getattr(owner, attr).dtype).copy())

    def _resolve(self, dotted: str):
        parts = dotted.split(".")
        obj = self
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
        return obj, parts[-1]

    def astype(self, dtype):
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Tensor):
                    value.value = value.value.astype(dtype)
            for name in getattr(m, "_buffers", ()):
                setattr(m, name, getattr(m, name).astype(dtype))
        return self


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """``y = x @ weight + bias`` with weight of shape (d_in, d_out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(d_in)
        self.weight = T.parameter(_uniform(rng, bound, (d_in, d_out)))
        self.bias = T.parameter(_uniform(rng, bound, (d_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"Linear: input {x.shape} vs weight {self.weight.shape}")
        return T.add(T.matmul(x, self.weight), self.bias)


class BatchNorm1d(Module):
    """Batch statistics in training mode (running averages, momentum 0.1); running
    statistics in eval mode, where the call does not touch any state."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, d: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = T.parameter(np.ones(d))
        self.beta = T.parameter(np.zeros(d))
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        if self.training:
            out, mu, var = T.batchnorm(x, self.gamma, self.beta, self.eps)
            n = x.shape[0]
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
            return out
        scale = 1.0 / np.sqrt(self.running_var + self.eps)
        return T.affine(x, scale, -self.running_mean * scale, self.gamma, self.beta)

    def folded(self) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode transform as ``x * a + b``."""
        scale = self.gamma.value / np.sqrt(self.running_var + self.eps)
        return scale, self.beta.value - self.running_mean * scale


class MLP(Module):
    """Stack of Linear layers. Hidden layers apply Linear -> BatchNorm -> ReLU; the
    final layer does the same only when ``activate_last`` is set."""

    def __init__(self, dims, rng: np.random.Generator, activate_last: bool = False, batchnorm: bool = True):
        dims = tuple(int(d) for d in dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"MLP needs at least two positive dims, got {dims}")
        self.dims = dims
        self.activate_last = activate_last
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        n_norm = len(self.layers) if activate_last else len(self.layers) - 1
        self.norms = [BatchNorm1d(d) for d in dims[1 : 1 + n_norm]] if batchnorm else []
        self.batchnorm = batchnorm

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.activate_last:
                if self.batchnorm:
                    x = self.norms[i](x)
                x = T.relu(x)
        return x


GATES = ("i", "f", "g", "o")


class LSTMCell(Module):
    """Single-layer LSTM cell; each gate has weight (d_h, d_in + d_h) and bias (d_h,)."""

    def __init__(self, d_in: int, d_h: int, rng: np.random.Generator):
        self.d_in, self.d_h = d_in, d_h
        bound = 1.0 / math.sqrt(d_h)
        for gate in GATES:
            setattr(self, f"w_{gate}", T.parameter(_uniform(rng, bound, (d_h, d_in + d_h))))
        for gate in GATES:
            setattr(self, f"b_{gate}", T.parameter(_uniform(rng, bound, (d_h,))))

    def fused(self) -> tuple[Tensor, Tensor]:
        """Gate weights stacked to ((d_in + d_h), 4 d_h) and biases to (4 d_h,)."""
        w = T.transpose(T.concat([getattr(self, f"w_{g}") for g in GATES], axis=0))
        b = T.concat([getattr(self, f"b_{g}") for g in GATES], axis=0)
        return w, b

    def __call__(self, x, h, c, fused=None):
        return lstm_step(self, x, h, c, fused)


def lstm_step(cell: LSTMCell, x: Tensor, h: Tensor, c: Tensor, fused=None) -> tuple[Tensor, Tensor]:
    """One LSTM update. ``fused`` lets a caller reuse :meth:`LSTMCell.fused` across steps."""
    if x.shape[-1] != cell.d_in or h.shape[-1] != cell.d_h or c.shape != h.shape or x.shape[0] != h.shape[0]:
        raise ShapeError(
            f"lstm_step: x {x.shape}, h {h.shape}, c {c.shape} for cell ({cell.d_in}, {cell.d_h})"
        )
    w, b = fused if fused is not None else cell.fused()
    z = T.add(T.matmul(T.concat([x, h], axis=1), w), b)
    return T.lstm_gates(z, c)


def reparameterize(mu: Tensor, log_sigma: Tensor, epsilon) -> Tensor:
    """``mu + exp(log_sigma) * epsilon``; ``epsilon`` is treated as a constant."""
    eps = epsilon.value if isinstance(epsilon, Tensor) else np.asarray(epsilon, dtype=mu.value.dtype)
    if mu.shape != log_sigma.shape or eps.shape != mu.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape}, log_sigma {log_sigma.shape}, epsilon {eps.shape}")
    return T.add(mu, T.mul(T.exp(log_sigma), T.constant(eps, dtype=mu.value.dtype)))
