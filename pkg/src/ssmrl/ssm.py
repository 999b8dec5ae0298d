"""Diagonal linear state-space sequence layer with a resettable parallel scan.

The layer keeps a diagonal continuous-time system (complex eigenvalues stored
as explicit re/im pairs with conjugate symmetry, so outputs stay real),
discretizes it with zero-order hold, and runs the recurrence either
step-by-step or as an associative prefix scan whose elements carry a reset
flag. A reset marks an episode boundary: everything before it is discarded
exactly, without breaking associativity.

Shapes: sequences are [batch, length, width]; the stored state has
``p_half = state_size // 2`` complex pairs (the effective real state size is
``state_size``).
"""
from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

DEBUG_CHECKS = False

# magnitude below which the ZOH input factor switches to its first-order limit
_LAMBDA_EPS = 1e-8


@dataclass
class SsmParams:
    """Learnable continuous-time diagonal system."""

    lambda_re: Tensor  # [P]
    lambda_im: Tensor  # [P]
    b_re: Tensor  # [P, H]
    b_im: Tensor  # [P, H]
    c_re: Tensor  # [P, H]
    c_im: Tensor  # [P, H]
    d_vector: Tensor  # [H]
    log_delta: Tensor  # [P]

    @property
    def p_half(self) -> int:
        return self.lambda_re.shape[0]

    @property
    def width(self) -> int:
        return self.b_re.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.lambda_re, self.lambda_im, self.b_re, self.b_im,
                self.c_re, self.c_im, self.d_vector, self.log_delta]


@dataclass
class DiscreteSsm:
    """Zero-order-hold discretization of the diagonal system."""

    a_re: Tensor  # [P]
    a_im: Tensor  # [P]
    b_re: Tensor  # [P, H]
    b_im: Tensor  # [P, H]


@dataclass
class ScanElement:
    """Associative-scan element: transition factor, accumulated input
    contribution, and a blocking reset flag in {0, 1}."""

    a_re: Tensor
    a_im: Tensor
    b_re: Tensor
    b_im: Tensor
    c: np.ndarray  # [..., 1], values in {0, 1}; broadcasts against the state


class ScanStats:
    """Instrumentation for the parallel scan (combine stages and counts)."""

    def __init__(self):
        self.lock = threading.Lock()
        self.reset()

    def reset(self):
        self.depth = 0
        self.combines = 0

    def record(self, depth: int, combines: int):
        with self.lock:
            self.depth = max(self.depth, depth)
            self.combines += combines


scan_stats = ScanStats()


def _cmul(ar, ai, br, bi):
    """(ar + i ai) * (br + i bi) elementwise."""
    return ar * br - ai * bi, ar * bi + ai * br


def init_s5(state_size: int, width: int, rng: np.random.Generator,
            dt_min: float = 1e-3, dt_max: float = 1e-1) -> SsmParams:
    """HiPPO-style diagonal initialization (conjugate-pair half).

    Eigenvalues follow the diagonal approximation lambda_n = -1/2 + i*pi*n;
    input/output maps are variance-scaled Gaussians; timescales are
    log-uniform in [dt_min, dt_max].
    """
    if state_size % 2 != 0:
        raise ValueError("state_size must be even (conjugate pairs)")
    p = state_size // 2
    lam_re = np.full(p, -0.5)
    lam_im = np.pi * np.arange(p, dtype=np.float64)
    b_scale = 1.0 / math.sqrt(2.0 * width)
    b_re = rng.normal(0.0, b_scale, size=(p, width))
    b_im = rng.normal(0.0, b_scale, size=(p, width))
    # scale C so the layer output variance at init stays near the input's
    dt_mean = math.sqrt(dt_min * dt_max)
    c_scale = 0.5 / math.sqrt(p * dt_mean)
    c_re = rng.normal(0.0, c_scale, size=(p, width))
    c_im = rng.normal(0.0, c_scale, size=(p, width))
    d = rng.normal(0.0, 1.0, size=width)
    log_delta = rng.uniform(math.log(dt_min), math.log(dt_max), size=p)
    return SsmParams(
        lambda_re=ad.parameter(lam_re),
        lambda_im=ad.parameter(lam_im),
        b_re=ad.parameter(b_re),
        b_im=ad.parameter(b_im),
        c_re=ad.parameter(c_re),
        c_im=ad.parameter(c_im),
        d_vector=ad.parameter(d),
        log_delta=ad.parameter(log_delta),
    )


def discretize(params: SsmParams) -> DiscreteSsm:
    """Zero-order hold on the diagonal system.

    a_bar = exp(delta * lambda);  b_bar = (a_bar - 1) / lambda * B,
    with the first-order limit b_bar = delta * B for |lambda| ~ 0
    (removable singularity).
    """
    delta = ad.exp(params.log_delta)
    dre = delta * params.lambda_re
    dim = delta * params.lambda_im
    mag = ad.exp(dre)
    a_re = mag * _cos(dim)
    a_im = mag * _sin(dim)

    lam2 = params.lambda_re * params.lambda_re + params.lambda_im * params.lambda_im
    small = lam2.data < _LAMBDA_EPS**2
    lam2_safe = ad.where(small, ad.Tensor(np.ones_like(lam2.data)), lam2)
    # (a_bar - 1) / lambda = (a_bar - 1) * conj(lambda) / |lambda|^2
    num_re = a_re - 1.0
    num_im = a_im
    f_re = (num_re * params.lambda_re + num_im * params.lambda_im) / lam2_safe
    f_im = (num_im * params.lambda_re - num_re * params.lambda_im) / lam2_safe
    f_re = ad.where(small, delta, f_re)
    f_im = ad.where(small, ad.Tensor(np.zeros_like(f_im.data)), f_im)

    b_re = f_re[:, None] * params.b_re - f_im[:, None] * params.b_im
    b_im = f_re[:, None] * params.b_im + f_im[:, None] * params.b_re

    if DEBUG_CHECKS:
        amag = np.hypot(a_re.data, a_im.data)
        stable = params.lambda_re.data < 0
        if np.any(amag[stable] >= 1.0):
            raise FloatingPointError("discrete transition left the unit disk")
    return DiscreteSsm(a_re=a_re, a_im=a_im, b_re=b_re, b_im=b_im)


def _cos(x: Tensor) -> Tensor:
    out = np.cos(x.data)
    s = np.sin(x.data)
    return ad._make(out, (x,), lambda g: (-g * s,))


def _sin(x: Tensor) -> Tensor:
    out = np.sin(x.data)
    c = np.cos(x.data)
    return ad._make(out, (x,), lambda g: (g * c,))


def identity_element(shape, dtype=None) -> ScanElement:
    """Neutral element: unit transition, zero contribution, no reset."""
    dtype = dtype or ad.default_dtype()
    ones = Tensor(np.ones(shape, dtype=dtype))
    zeros = Tensor(np.zeros(shape, dtype=dtype))
    c = np.zeros(shape[:-1] + (1,), dtype=dtype)
    return ScanElement(ones, Tensor(np.zeros(shape, dtype=dtype)),
                       zeros, Tensor(np.zeros(shape, dtype=dtype)), c)


def combine(e_i: ScanElement, e_j: ScanElement) -> ScanElement:
    """Associative operator with reset semantics.

    If the right element carries a reset, it wins outright; otherwise the
    transitions compose and the left contribution is carried through the
    right transition.
    """
    if e_i.a_re.shape[-1] != e_j.a_re.shape[-1]:
        raise ValueError(
            f"scan element dimension mismatch: {e_i.a_re.shape[-1]} vs {e_j.a_re.shape[-1]}")
    cj = e_j.c
    keep = 1.0 - cj
    prod_re, prod_im = _cmul(e_j.a_re, e_j.a_im, e_i.a_re, e_i.a_im)
    a_re = ad.where(cj, e_j.a_re, prod_re)
    a_im = ad.where(cj, e_j.a_im, prod_im)
    carry_re, carry_im = _cmul(e_j.a_re, e_j.a_im, e_i.b_re, e_i.b_im)
    b_re = e_j.b_re + Tensor(keep) * carry_re
    b_im = e_j.b_im + Tensor(keep) * carry_im
    c = np.maximum(np.broadcast_to(e_i.c, np.broadcast_shapes(e_i.c.shape, cj.shape)),
                   cj)
    return ScanElement(a_re, a_im, b_re, b_im, np.ascontiguousarray(c))


def make_elements(u_seq: Tensor, resets: np.ndarray, dssm: DiscreteSsm,
                  x0=None) -> ScanElement:
    """Build per-step scan elements for a [B, L, H] input sequence.

    ``resets[b, t] = 1`` zeroes the state entering step t. The initial hidden
    state ``x0`` (pair of [B, P] tensors) is folded into element 1 unless
    element 1 itself carries a reset.
    """
    b, l, _ = u_seq.shape
    p = dssm.a_re.shape[0]
    resets = np.asarray(resets, dtype=u_seq.data.dtype).reshape(b, l, 1)
    if not np.all((resets == 0) | (resets == 1)):
        raise ValueError("resets must be exactly 0 or 1")

    bu_re = ad.matmul(u_seq, dssm.b_re.T)  # [B, L, P]
    bu_im = ad.matmul(u_seq, dssm.b_im.T)

    a_re = ad.broadcast_to(dssm.a_re, (b, l, p))
    a_im = ad.broadcast_to(dssm.a_im, (b, l, p))

    if x0 is not None:
        x0_re, x0_im = x0
        inj_re, inj_im = _cmul(dssm.a_re, dssm.a_im, x0_re, x0_im)  # [B, P]
        keep0 = Tensor(1.0 - resets[:, 0, :])  # [B, 1]
        first_re = bu_re[:, 0:1, :] + (keep0 * inj_re)[:, None, :]
        first_im = bu_im[:, 0:1, :] + (keep0 * inj_im)[:, None, :]
        bu_re = ad.concat([first_re, bu_re[:, 1:, :]], axis=1)
        bu_im = ad.concat([first_im, bu_im[:, 1:, :]], axis=1)

    return ScanElement(a_re, a_im, bu_re, bu_im, resets)


def _slice_elem(e: ScanElement, idx) -> ScanElement:
    return ScanElement(e.a_re[idx], e.a_im[idx], e.b_re[idx], e.b_im[idx],
                       e.c[idx])


def _pad_pow2(e: ScanElement, axis_len: int) -> tuple[ScanElement, int]:
    l = axis_len
    lp = 1 << (l - 1).bit_length()
    if lp == l:
        return e, l
    pad = lp - l
    shape = e.a_re.shape[:1] + (pad,) + e.a_re.shape[2:]
    ident = identity_element(shape, dtype=e.a_re.dtype)
    merged = ScanElement(
        ad.concat([e.a_re, ident.a_re], axis=1),
        ad.concat([e.a_im, ident.a_im], axis=1),
        ad.concat([e.b_re, ident.b_re], axis=1),
        ad.concat([e.b_im, ident.b_im], axis=1),
        np.concatenate([e.c, ident.c], axis=1),
    )
    return merged, l


def _scan_tree(e: ScanElement) -> tuple[ScanElement, int, int]:
    """Sklansky-style in-place tree over axis 1 (power-of-two length)."""
    b, lp, p = e.a_re.shape
    levels = int(math.log2(lp))
    combines = 0
    for k in range(levels):
        half = 1 << k
        block = half * 2
        nb = lp // block

        def view(t: Tensor):
            return ad.reshape(t, (b, nb, block, p))

        ar, ai = view(e.a_re), view(e.a_im)
        br, bi = view(e.b_re), view(e.b_im)
        c = e.c.reshape(b, nb, block, 1)
        pivot = ScanElement(ar[:, :, half - 1 : half, :], ai[:, :, half - 1 : half, :],
                            br[:, :, half - 1 : half, :], bi[:, :, half - 1 : half, :],
                            c[:, :, half - 1 : half, :])
        right = ScanElement(ar[:, :, half:, :], ai[:, :, half:, :],
                            br[:, :, half:, :], bi[:, :, half:, :],
                            c[:, :, half:, :])
        new_right = combine(pivot, right)
        combines += right.a_re.data.shape[1] * right.a_re.data.shape[2]

        def merge(left: Tensor, new: Tensor):
            return ad.reshape(ad.concat([left, new], axis=2), (b, lp, p))

        e = ScanElement(
            merge(ar[:, :, :half, :], new_right.a_re),
            merge(ai[:, :, :half, :], new_right.a_im),
            merge(br[:, :, :half, :], new_right.b_re),
            merge(bi[:, :, :half, :], new_right.b_im),
            np.concatenate([c[:, :, :half, :], new_right.c], axis=2).reshape(b, lp, 1),
        )
    return e, levels, combines


def _scan_fused_forward(a_re, a_im, b_re, b_im, c):
    """In-place Sklansky tree on plain arrays; returns saved per-level state
    for the custom backward: (pre-right a, pivot a, pivot b, right c)."""
    bsz, lp, p = a_re.shape
    levels = int(math.log2(lp))
    saved = []
    for k in range(levels):
        h = 1 << k
        block = h * 2
        nb = lp // block
        ar = a_re.reshape(bsz, nb, block, p)
        ai = a_im.reshape(bsz, nb, block, p)
        br = b_re.reshape(bsz, nb, block, p)
        bi = b_im.reshape(bsz, nb, block, p)
        cv = c.reshape(bsz, nb, block, 1)
        pa_re = ar[:, :, h - 1 : h, :].copy()
        pa_im = ai[:, :, h - 1 : h, :].copy()
        pb_re = br[:, :, h - 1 : h, :].copy()
        pb_im = bi[:, :, h - 1 : h, :].copy()
        r_a_re = ar[:, :, h:, :].copy()
        r_a_im = ai[:, :, h:, :].copy()
        rc = cv[:, :, h:, :]
        keep = 1.0 - rc
        # transitions compose unless the right side blocks
        ar[:, :, h:, :] = np.where(rc.astype(bool), r_a_re,
                                   r_a_re * pa_re - r_a_im * pa_im)
        ai[:, :, h:, :] = np.where(rc.astype(bool), r_a_im,
                                   r_a_re * pa_im + r_a_im * pa_re)
        br[:, :, h:, :] += keep * (r_a_re * pb_re - r_a_im * pb_im)
        bi[:, :, h:, :] += keep * (r_a_re * pb_im + r_a_im * pb_re)
        cv[:, :, h:, :] = np.maximum(cv[:, :, h:, :], cv[:, :, h - 1 : h, :])
        saved.append((r_a_re, r_a_im, pa_re, pa_im, pb_re, pb_im, rc, keep))
    return saved, levels


def _scan_fused_backward(g_b_re, g_b_im, saved, lp, p):
    """Reverse the Sklansky tree; only the b-components carry output grads."""
    bsz = g_b_re.shape[0]
    ga_re = np.zeros((bsz, lp, p), dtype=g_b_re.dtype)
    ga_im = np.zeros((bsz, lp, p), dtype=g_b_re.dtype)
    gb_re = g_b_re
    gb_im = g_b_im
    for k in range(len(saved) - 1, -1, -1):
        h = 1 << k
        block = h * 2
        nb = lp // block
        r_a_re, r_a_im, pa_re, pa_im, pb_re, pb_im, rc, keep = saved[k]
        gar = ga_re.reshape(bsz, nb, block, p)
        gai = ga_im.reshape(bsz, nb, block, p)
        gbr = gb_re.reshape(bsz, nb, block, p)
        gbi = gb_im.reshape(bsz, nb, block, p)
        g_ar = gar[:, :, h:, :]
        g_ai = gai[:, :, h:, :]
        g_br = gbr[:, :, h:, :]
        g_bi = gbi[:, :, h:, :]
        blocked = rc.astype(bool)
        # b_r' = b_j + keep * (a_j (x) b_i): grads into a_j and pivot b_i
        kg_br = keep * g_br
        kg_bi = keep * g_bi
        da_re_b = kg_br * pb_re + kg_bi * pb_im
        da_im_b = -kg_br * pb_im + kg_bi * pb_re
        pb_g_re = (kg_br * r_a_re + kg_bi * r_a_im).sum(axis=2, keepdims=True)
        pb_g_im = (-kg_br * r_a_im + kg_bi * r_a_re).sum(axis=2, keepdims=True)
        # a_r' = a_j (x) a_i unless blocked: grads into a_j and pivot a_i
        g_ar_eff = np.where(blocked, 0.0, g_ar)
        g_ai_eff = np.where(blocked, 0.0, g_ai)
        da_re_a = g_ar_eff * pa_re + g_ai_eff * pa_im
        da_im_a = -g_ar_eff * pa_im + g_ai_eff * pa_re
        pa_g_re = (g_ar_eff * r_a_re + g_ai_eff * r_a_im).sum(axis=2, keepdims=True)
        pa_g_im = (-g_ar_eff * r_a_im + g_ai_eff * r_a_re).sum(axis=2, keepdims=True)
        gar[:, :, h:, :] = np.where(blocked, g_ar, da_re_a) + da_re_b
        gai[:, :, h:, :] = np.where(blocked, g_ai, da_im_a) + da_im_b
        gar[:, :, h - 1 : h, :] += pa_g_re
        gai[:, :, h - 1 : h, :] += pa_g_im
        gbr[:, :, h - 1 : h, :] += pb_g_re
        gbi[:, :, h - 1 : h, :] += pb_g_im
        # b_j grad passes through unchanged (already in place)
    return ga_re, ga_im, gb_re, gb_im


def scan_fused(e: ScanElement) -> tuple[Tensor, int, int]:
    """Whole-scan primitive: one graph node, hand-written backward.

    Returns the hidden sequence stacked as [B, L, 2P] (re | im), plus the
    tree depth and total element combinations. Semantically identical to
    ``parallel_scan`` (verified against it in the tests).
    """
    bsz, l, p = e.a_re.shape
    lp = 1 << (l - 1).bit_length()
    dtype = e.a_re.data.dtype
    a_re = np.ones((bsz, lp, p), dtype=dtype)
    a_im = np.zeros((bsz, lp, p), dtype=dtype)
    b_re = np.zeros((bsz, lp, p), dtype=dtype)
    b_im = np.zeros((bsz, lp, p), dtype=dtype)
    c = np.zeros((bsz, lp, 1), dtype=dtype)
    a_re[:, :l] = e.a_re.data
    a_im[:, :l] = e.a_im.data
    b_re[:, :l] = e.b_re.data
    b_im[:, :l] = e.b_im.data
    c[:, :l] = e.c
    saved, levels = _scan_fused_forward(a_re, a_im, b_re, b_im, c)
    combines = sum(s[0].shape[1] * s[0].shape[2] for s in saved)
    out = np.concatenate([b_re[:, :l], b_im[:, :l]], axis=-1)

    parents = (e.a_re, e.a_im, e.b_re, e.b_im)
    if ad._track(*parents):
        def vjp(g):
            gr = np.zeros((bsz, lp, p), dtype=dtype)
            gi = np.zeros((bsz, lp, p), dtype=dtype)
            gr[:, :l] = g[..., :p]
            gi[:, :l] = g[..., p:]
            ga_re, ga_im, gb_re, gb_im = _scan_fused_backward(gr, gi, saved, lp, p)
            return (ga_re[:, :l], ga_im[:, :l], gb_re[:, :l], gb_im[:, :l])

        return Tensor(out, requires_grad=True, _parents=parents, _vjp=vjp), \
            levels, combines
    return Tensor(out), levels, combines


def parallel_scan_elements(e: ScanElement, workers: int = 0) -> ScanElement:
    """All prefix combinations of ``e`` along axis 1 (the sequence axis)."""
    b, l, p = e.a_re.shape
    if l < 1:
        raise ValueError("scan needs at least one element")
    padded, orig_l = _pad_pow2(e, l)
    if workers and workers > 1 and b >= workers:
        bounds = np.linspace(0, b, workers + 1).astype(int)
        chunks = [_slice_elem(padded, slice(int(s), int(t)))
                  for s, t in zip(bounds[:-1], bounds[1:]) if t > s]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_scan_tree, chunks))
        scanned = ScanElement(
            ad.concat([r[0].a_re for r in results], axis=0),
            ad.concat([r[0].a_im for r in results], axis=0),
            ad.concat([r[0].b_re for r in results], axis=0),
            ad.concat([r[0].b_im for r in results], axis=0),
            np.concatenate([r[0].c for r in results], axis=0),
        )
        depth = max(r[1] for r in results)
        combines = sum(r[2] for r in results)
    else:
        scanned, depth, combines = _scan_tree(padded)
    scan_stats.record(depth, combines)
    if orig_l != scanned.a_re.shape[1]:
        scanned = _slice_elem(scanned, (slice(None), slice(0, orig_l)))
    return scanned


def parallel_scan(e: ScanElement, workers: int = 0,
                  fused: bool = True) -> tuple[Tensor, Tensor]:
    """Hidden-state sequence x_{1:L}: the b-components of all prefixes.

    ``fused=True`` runs the single-node fast path; ``fused=False`` builds the
    scan from the generic combine operator (same tree, same results)."""
    if fused and not (workers and workers > 1):
        stacked, depth, combines = scan_fused(e)
        scan_stats.record(depth, combines)
        p = e.a_re.shape[-1]
        return stacked[..., :p], stacked[..., p:]
    scanned = parallel_scan_elements(e, workers=workers)
    return scanned.b_re, scanned.b_im


def parallel_scan_stacked(e: ScanElement, workers: int = 0) -> Tensor:
    """Fused scan returning [B, L, 2P] (re | im) in one graph node."""
    if workers and workers > 1:
        xr, xi = parallel_scan(e, workers=workers, fused=False)
        return ad.concat([xr, xi], axis=-1)
    stacked, depth, combines = scan_fused(e)
    scan_stats.record(depth, combines)
    return stacked


def sequential_scan(dssm: DiscreteSsm, u_seq: Tensor, resets: np.ndarray,
                    x0=None) -> tuple[Tensor, Tensor]:
    """Step-by-step reference recurrence (oracle and timing baseline)."""
    b, l, _ = u_seq.shape
    p = dssm.a_re.shape[0]
    resets = np.asarray(resets, dtype=u_seq.data.dtype).reshape(b, l, 1)
    bu_re = ad.matmul(u_seq, dssm.b_re.T)
    bu_im = ad.matmul(u_seq, dssm.b_im.T)
    if x0 is None:
        x_re = Tensor(np.zeros((b, p), dtype=u_seq.data.dtype))
        x_im = Tensor(np.zeros((b, p), dtype=u_seq.data.dtype))
    else:
        x_re, x_im = x0
    outs_re, outs_im = [], []
    for t in range(l):
        keep = Tensor(1.0 - resets[:, t, :])
        hr, hi = x_re * keep, x_im * keep
        sr, si = _cmul(dssm.a_re, dssm.a_im, hr, hi)
        x_re = sr + bu_re[:, t, :]
        x_im = si + bu_im[:, t, :]
        outs_re.append(x_re)
        outs_im.append(x_im)
    return ad.stack(outs_re, axis=1), ad.stack(outs_im, axis=1)


def half_glu(u: Tensor, gate: nn.Linear) -> Tensor:
    """Gating nonlinearity: u * sigmoid(W GELU(u))."""
    return u * ad.sigmoid(gate(ad.gelu(u)))


class S5Layer(nn.Module):
    """Pre-norm residual block around the resettable diagonal SSM.

    normalize -> discretize -> scan -> output map (C x, feedthrough D u) ->
    gated nonlinearity -> residual.
    """

    def __init__(self, width: int, state_size: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1,
                 norm: str = "rms", residual: bool = True,
                 feedthrough: bool = True, gating: str = "half_glu",
                 glu_degree: int = 1, scan_workers: int = 0):
        self.params = SsmParamsHolder(init_s5(state_size, width, rng, dt_min, dt_max))
        self.norm = nn.RMSNorm(width) if norm == "rms" else None
        self.gates = [nn.Linear(width, width, rng) for _ in range(glu_degree)] \
            if gating == "half_glu" else []
        self.gating = gating
        self.residual = residual
        self.feedthrough = feedthrough
        self.width = width
        self.state_size = state_size
        self.scan_workers = scan_workers

    @property
    def p_half(self) -> int:
        return self.params.p.p_half

    def zero_state(self, batch: int) -> tuple[Tensor, Tensor]:
        dt = ad.default_dtype()
        return (Tensor(np.zeros((batch, self.p_half), dtype=dt)),
                Tensor(np.zeros((batch, self.p_half), dtype=dt)))

    def discrete(self) -> DiscreteSsm:
        return discretize(self.params.p)

    def _output(self, u_norm: Tensor, x_re: Tensor, x_im: Tensor) -> Tensor:
        p = self.params.p
        y = 2.0 * (ad.matmul(x_re, p.c_re) - ad.matmul(x_im, p.c_im))
        return self._finish_output(u_norm, y)

    def _output_stacked(self, u_norm: Tensor, x_stacked: Tensor) -> Tensor:
        # single GEMM: [.., 2P] @ [[2 C_re], [-2 C_im]]
        p = self.params.p
        w = ad.concat([2.0 * p.c_re, -2.0 * p.c_im], axis=0)
        return self._finish_output(u_norm, ad.matmul(x_stacked, w))

    def _finish_output(self, u_norm: Tensor, y: Tensor) -> Tensor:
        if self.feedthrough:
            y = y + self.params.p.d_vector * u_norm
        if self.gating == "half_glu":
            for gate in self.gates:
                y = half_glu(y, gate)
        return y

    def __call__(self, u_seq: Tensor, resets: np.ndarray, state=None,
                 dssm: DiscreteSsm | None = None):
        """Full-sequence forward via the parallel scan.

        Returns (y [B, L, H], final state). Raises on non-finite output.
        """
        b = u_seq.shape[0]
        if state is None:
            state = self.zero_state(b)
        u_norm = self.norm(u_seq) if self.norm is not None else u_seq
        dssm = dssm or self.discrete()
        elems = make_elements(u_norm, resets, dssm, x0=state)
        xs = parallel_scan_stacked(elems, workers=self.scan_workers)
        y = self._output_stacked(u_norm, xs)
        if self.residual:
            y = u_seq + y
        if not np.all(np.isfinite(y.data)):
            raise FloatingPointError("non-finite activations in S5 layer")
        p = self.p_half
        new_state = (xs[:, -1, :p], xs[:, -1, p:])
        return y, new_state

    def step(self, u: Tensor, reset: np.ndarray, state,
             dssm: DiscreteSsm | None = None):
        """Single recurrence step: u [B, H], reset [B] in {0, 1}."""
        b = u.shape[0]
        if state is None:
            state = self.zero_state(b)
        u_norm = self.norm(u) if self.norm is not None else u
        dssm = dssm or self.discrete()
        keep = Tensor(1.0 - np.asarray(reset, dtype=u.data.dtype).reshape(b, 1))
        hr, hi = state[0] * keep, state[1] * keep
        sr, si = _cmul(dssm.a_re, dssm.a_im, hr, hi)
        x_re = sr + ad.matmul(u_norm, dssm.b_re.T)
        x_im = si + ad.matmul(u_norm, dssm.b_im.T)
        y = self._output(u_norm, x_re, x_im)
        if self.residual:
            y = u + y
        return y, (x_re, x_im)


class SsmParamsHolder(nn.Module):
    """Wraps SsmParams so the module tree can find its tensors."""

    def __init__(self, p: SsmParams):
        self.lambda_re = p.lambda_re
        self.lambda_im = p.lambda_im
        self.b_re = p.b_re
        self.b_im = p.b_im
        self.c_re = p.c_re
        self.c_im = p.c_im
        self.d_vector = p.d_vector
        self.log_delta = p.log_delta
        self._raw = p

    @property
    def p(self) -> SsmParams:
        return self._raw


class S5Stack(nn.Module):
    """Stack of S5 layers with a shared final normalization."""

    def __init__(self, width: int, state_size: int, num_layers: int,
                 rng: np.random.Generator, **layer_kwargs):
        self.layers = [S5Layer(width, state_size, rng, **layer_kwargs)
                       for _ in range(num_layers)]
        self.final_norm = nn.RMSNorm(width)

    def zero_state(self, batch: int):
        return [layer.zero_state(batch) for layer in self.layers]

    def discrete(self) -> list[DiscreteSsm]:
        return [layer.discrete() for layer in self.layers]

    def __call__(self, u_seq: Tensor, resets: np.ndarray, states=None,
                 dssms=None):
        b = u_seq.shape[0]
        if states is None:
            states = self.zero_state(b)
        new_states = []
        y = u_seq
        for i, layer in enumerate(self.layers):
            try:
                y, st = layer(y, resets, states[i],
                              dssm=None if dssms is None else dssms[i])
            except FloatingPointError as err:
                raise FloatingPointError(f"layer {i}: {err}") from err
            new_states.append(st)
        return self.final_norm(y), new_states

    def step(self, u: Tensor, reset: np.ndarray, states, dssms=None):
        new_states = []
        y = u
        for i, layer in enumerate(self.layers):
            y, st = layer.step(y, reset, states[i],
                               dssm=None if dssms is None else dssms[i])
            new_states.append(st)
        return self.final_norm(y), new_states
