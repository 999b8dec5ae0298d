"""Small module/optimizer layer over the autodiff engine."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class: anything holding parameters or sub-modules."""

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = ""):
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}"))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out.append((f"{name}.{i}", item))
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_parameters())
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in named.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.astype(p.data.dtype)


def _init_normal(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.normal(0.0, scale, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 bias: bool = True, scale: float | None = None):
        s = scale if scale is not None else 1.0 / math.sqrt(in_dim)
        self.w = ad.parameter(_init_normal(rng, (in_dim, out_dim), s))
        self.b = ad.parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y


_ACTS = {
    "silu": ad.silu,
    "tanh": ad.tanh,
    "gelu": ad.gelu,
    "sigmoid": ad.sigmoid,
    "none": lambda x: x,
}


class MLP(Module):
    """Stack of Linear + activation; optional linear output head."""

    def __init__(self, in_dim: int, units: int, layers: int, rng,
                 act: str = "silu", out_dim: int | None = None):
        self.act = act
        self.hidden = []
        d = in_dim
        for _ in range(layers):
            self.hidden.append(Linear(d, units, rng))
            d = units
        self.out = Linear(d, out_dim, rng) if out_dim is not None else None
        self.out_dim = out_dim if out_dim is not None else d

    def __call__(self, x: Tensor) -> Tensor:
        f = _ACTS[self.act]
        for layer in self.hidden:
            x = f(layer(x))
        if self.out is not None:
            x = self.out(x)
        return x


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.g = ad.parameter(np.ones(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        ms = ad.tmean(ad.square(x), axis=-1, keepdims=True)
        return x * ad.power(ms + self.eps, -0.5) * self.g


class GRUCell(Module):
    """Standard GRU cell: reset/update gates + candidate state."""

    def __init__(self, input_dim: int, hidden_dim: int, rng):
        s_i = 1.0 / math.sqrt(input_dim)
        s_h = 1.0 / math.sqrt(hidden_dim)
        self.w_i = ad.parameter(_init_normal(rng, (input_dim, 3 * hidden_dim), s_i))
        self.w_h = ad.parameter(_init_normal(rng, (hidden_dim, 3 * hidden_dim), s_h))
        self.b = ad.parameter(np.zeros(3 * hidden_dim))
        self.hidden_dim = hidden_dim

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        gi = ad.matmul(x, self.w_i) + self.b
        gh = ad.matmul(h, self.w_h)
        n = self.hidden_dim
        r = ad.sigmoid(gi[..., :n] + gh[..., :n])
        z = ad.sigmoid(gi[..., n : 2 * n] + gh[..., n : 2 * n])
        cand = ad.tanh(gi[..., 2 * n :] + r * gh[..., 2 * n :])
        return (1.0 - z) * cand + z * h


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, rng):
        s = 1.0 / math.sqrt(cin * k * k)
        self.w = ad.parameter(_init_normal(rng, (cout, cin, k, k), s))
        self.b = ad.parameter(np.zeros(cout))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, rng):
        s = 1.0 / math.sqrt(cin * k * k)
        self.w = ad.parameter(_init_normal(rng, (cin, cout, k, k), s))
        self.b = ad.parameter(np.zeros(cout))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.w, self.b, stride=self.stride)


class Adam:
    """Adam with global-norm gradient clipping."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = 100.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> float:
        """Apply one update; returns the (pre-clip) global gradient norm."""
        norm = ad.global_grad_norm(self.params)
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        b1t = 1.0 - self.b1**self.t
        b2t = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad * scale
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / b1t
            vhat = self.v[i] / b2t
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return norm

    def zero_grad(self) -> None:
        ad.zero_grads(self.params)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.asarray(m) for m in state["m"]]
        self.v = [np.asarray(v) for v in state["v"]]
