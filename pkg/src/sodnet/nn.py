"""Parameter containers and the small layers every block is built from."""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor. ``init`` names the initialisation rule."""

    __slots__ = ("init",)

    def __init__(self, shape, init: str = "trunc_normal"):
        super().__init__(np.zeros(shape), requires_grad=True)
        self.init = init


class Module:
    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) truncated to +-bound*std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def init_parameters(module: Module, seed: int) -> None:
    """Deterministically initialise every parameter.

    Each parameter draws from its own stream keyed by (seed, name), so adding
    or removing a branch never shifts the values of unrelated parameters.
    """
    dtype = T.get_default_dtype()
    for name, p in module.named_parameters():
        if p.init == "zeros":
            vals = np.zeros(p.shape)
        elif p.init == "ones":
            vals = np.ones(p.shape)
        elif p.init == "trunc_normal":
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            vals = trunc_normal(rng, p.shape)
        else:
            raise ValueError(f"unknown init rule {p.init!r} for {name}")
        p.data = vals.astype(dtype)
        p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        self.weight = Parameter((n_in, n_out))
        self.bias = Parameter((n_out,), init="zeros") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.gamma = Parameter((c,), init="ones")
        self.beta = Parameter((c,), init="zeros")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    """Token-wise Linear -> GELU -> Linear."""

    def __init__(self, n_in: int, hidden: int, n_out: int | None = None):
        if hidden < 1:
            raise ValueError("hidden width must be >= 1")
        self.fc1 = Linear(n_in, hidden)
        self.fc2 = Linear(hidden, n_out if n_out is not None else n_in)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def mlp2(x: Tensor, fc1: Linear, fc2: Linear) -> Tensor:
    """Functional two-layer MLP with explicit layers."""
    return fc2(T.gelu(fc1(x)))
