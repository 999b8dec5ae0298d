"""Distributions used by the world model and the actor-critic.

Three families:
  * multi-variable one-hot categorical with uniform mixing and a
    straight-through sample (the stochastic latent),
  * two-hot discrete regression over symlog-spaced bins (reward head and
    critic),
  * tanh-squashed diagonal Gaussian (the actor).
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def symlog(x):
    if isinstance(x, Tensor):
        raise TypeError("symlog operates on plain arrays")
    x = np.asarray(x)
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(x):
    x = np.asarray(x)
    return np.sign(x) * np.expm1(np.abs(x))


class CategoricalLatent:
    """Batch of independent one-hot categoricals (vars x classes) with
    1%% uniform mixing and straight-through samples."""

    def __init__(self, logits: Tensor, unimix: float = 0.01):
        # logits: [..., V, K]
        self.raw_logits = logits
        k = logits.shape[-1]
        p = ad.softmax(logits, axis=-1)
        if unimix > 0.0:
            p = p * (1.0 - unimix) + unimix / k
        self.probs = p
        self.logp = ad.log(p)
        self.k = k

    def detached(self) -> "CategoricalLatent":
        """Stop-gradient copy sharing the computed probabilities."""
        out = object.__new__(CategoricalLatent)
        out.raw_logits = self.raw_logits.detach()
        out.probs = self.probs.detach()
        out.logp = self.logp.detach()
        out.k = self.k
        return out

    def sample(self, rng: np.random.Generator) -> Tensor:
        """One-hot sample with straight-through gradient through probs."""
        onehot = self._draw(rng)
        return self.probs + (onehot - self.probs.data)

    def _draw(self, rng: np.random.Generator) -> np.ndarray:
        p = self.probs.data
        cdf = np.cumsum(p, axis=-1)
        u = rng.random(p.shape[:-1] + (1,)).astype(p.dtype)
        idx = (u > cdf).sum(axis=-1)
        return _one_hot(idx, self.k, p.dtype)

    def mode(self) -> Tensor:
        idx = self.probs.data.argmax(axis=-1)
        onehot = _one_hot(idx, self.k, self.probs.dtype)
        return self.probs + (onehot - self.probs.data)

    def soft(self) -> Tensor:
        """Differentiable pass-through of the mixed probabilities (test hook
        for finite-difference checks; not used in training)."""
        return self.probs

    def entropy(self) -> Tensor:
        return -ad.tsum(self.probs * self.logp, axis=(-2, -1))


def _one_hot(idx: np.ndarray, k: int, dtype) -> np.ndarray:
    out = np.zeros(idx.shape + (k,), dtype=dtype)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def categorical_kl(q: CategoricalLatent, p: CategoricalLatent) -> Tensor:
    """KL[q || p] summed over classes and variables -> [...]."""
    per_class = q.probs * (q.logp - p.logp)
    return ad.tsum(per_class, axis=(-2, -1))


class TwoHotSymlog:
    """Discrete regression head: softmax over bins equally spaced in symlog
    space; scalars encode as weight split over the two adjacent bins."""

    def __init__(self, logits: Tensor, low: float = -20.0, high: float = 20.0):
        self.logits = logits
        self.num_bins = logits.shape[-1]
        self.bins = np.linspace(low, high, self.num_bins)

    def mean(self) -> Tensor:
        p = ad.softmax(self.logits, axis=-1)
        s = ad.tsum(p * self.bins.astype(p.dtype), axis=-1)
        # symexp on the expected symlog value
        return _t_symexp(s)

    def encode(self, values: np.ndarray) -> np.ndarray:
        """Two-hot target weights for raw scalar values: [...,] -> [..., K]."""
        s = symlog(values)
        s = np.clip(s, self.bins[0], self.bins[-1])
        step = self.bins[1] - self.bins[0]
        pos = (s - self.bins[0]) / step
        lo = np.floor(pos).astype(np.int64)
        lo = np.clip(lo, 0, self.num_bins - 2)
        frac = pos - lo
        target = np.zeros(s.shape + (self.num_bins,), dtype=np.result_type(s, np.float32))
        np.put_along_axis(target, lo[..., None], (1.0 - frac)[..., None], axis=-1)
        hi_w = np.take_along_axis(target, lo[..., None] + 1, axis=-1) + frac[..., None]
        np.put_along_axis(target, lo[..., None] + 1, hi_w, axis=-1)
        return target

    def decode(self, target: np.ndarray) -> np.ndarray:
        return symexp((target * self.bins).sum(axis=-1))

    def neg_log_prob(self, values: np.ndarray) -> Tensor:
        """Cross-entropy against the two-hot encoding of `values` -> [...]."""
        target = self.encode(values)
        logp = ad.log_softmax(self.logits, axis=-1)
        return -ad.tsum(logp * target.astype(logp.dtype), axis=-1)

    def neg_log_prob_target(self, target: np.ndarray) -> Tensor:
        logp = ad.log_softmax(self.logits, axis=-1)
        return -ad.tsum(logp * target.astype(logp.dtype), axis=-1)


def _t_symexp(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return (ad.exp(x * sign) - 1.0) * sign


_LOG_SQRT_2PI_E = 0.5 * math.log(2.0 * math.pi * math.e)


class SquashedGaussian:
    """Diagonal Gaussian squashed through tanh onto [-1, 1]."""

    def __init__(self, mean: Tensor, std: Tensor):
        self.mean = mean
        self.std = std

    def sample(self, rng: np.random.Generator) -> Tensor:
        eps = rng.standard_normal(self.mean.shape).astype(self.mean.dtype)
        pre = self.mean + self.std * eps
        return ad.tanh(pre)

    def mode(self) -> Tensor:
        return ad.tanh(self.mean)

    def log_prob(self, action: Tensor) -> Tensor:
        """log-density of a squashed action (change of variables)."""
        a = np.clip(action.data if isinstance(action, Tensor) else np.asarray(action),
                    -1.0 + 1e-6, 1.0 - 1e-6)
        pre = np.arctanh(a)
        pre_t = Tensor(pre)
        z = (pre_t - self.mean) / self.std
        base = -0.5 * ad.square(z) - ad.log(self.std) - 0.5 * math.log(2.0 * math.pi)
        # d tanh(x)/dx = 1 - tanh(x)^2
        jac = np.log1p(-(a * a) + 1e-12)
        return ad.tsum(base - jac, axis=-1)

    def entropy(self) -> Tensor:
        """Entropy of the underlying Gaussian (closed form)."""
        return ad.tsum(ad.log(self.std) + _LOG_SQRT_2PI_E, axis=-1)
