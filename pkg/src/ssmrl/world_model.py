"""Latent world model: encoder, sequence backbone, prediction heads, loss.

The model maps observations to a stochastic categorical posterior, runs a
sequence backbone over fused (latent, action) inputs — either the parallel
resettable S5 stack or a strictly sequential GRU baseline — infers a prior
from the deterministic output, and decodes observation/privileged-state,
reward, and continuation targets. Training minimizes a prediction loss plus
two KL terms with a one-nat floor and one-sided stop-gradients.

Convention: replay windows arrive as [batch, length, ...]; ``is_first``
marks steps that begin a new episode, and doubles as the scan reset flag.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dists, nn, ssm
from .autodiff import Tensor


class NumericalError(RuntimeError):
    """Raised when a loss or activation goes non-finite."""


@dataclass
class WmConfig:
    obs_mode: str = "state"            # state | vision
    obs_dim: int = 22                  # state / privileged vector width
    image_size: int = 32
    action_dim: int = 4
    action_history: int = 3            # past actions appended in vision mode
    units: int = 512
    mlp_layers: int = 2
    post_mlp_layers: int = 1
    act: str = "silu"
    y_dim: int = 512
    z_vars: int = 32
    z_classes: int = 32
    unimix: float = 0.01
    seq_model: str = "s5"              # s5 | gru
    posterior_mode: str = "obs_only"   # obs_only | recurrent
    decoder_mode: str = "observation"  # observation | privileged | image
    s5_state_size: int = 256
    s5_layers: int = 1
    glu_degree: int = 1
    norm: str = "rms"
    residual: bool = True
    feedthrough: bool = True
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    scan_workers: int = 0
    gru_units: int = 512     # recurrent state width (deter output of the baseline)
    gru_in_dim: int = 256    # fused-input projection width for the baseline
    cnn_depth: int = 32
    num_bins: int = 41
    free_bits: float = 1.0
    beta_pred: float = 1.0
    beta_dyn: float = 0.5
    beta_rep: float = 0.1

    @property
    def z_dim(self) -> int:
        return self.z_vars * self.z_classes


@dataclass
class SequenceBatch:
    """Replayed trajectory window. ``rewards`` is the training target (the
    curriculum already combined nominal/augmentation components)."""

    obs: np.ndarray                     # [B, L, obs_dim] state vector
    actions: np.ndarray                 # [B, L, action_dim]
    rewards: np.ndarray                 # [B, L]
    continues: np.ndarray               # [B, L] in {0, 1}
    is_first: np.ndarray                # [B, L] in {0, 1}
    image: np.ndarray | None = None     # [B, L, 1, H, W] vision mode
    action_history: np.ndarray | None = None  # [B, L, hist*action_dim]

    @property
    def batch_shape(self) -> tuple[int, int]:
        return self.obs.shape[0], self.obs.shape[1]


@dataclass
class WmLossReport:
    total: float
    pred: float
    dyn: float
    rep: float
    breakdown: dict = field(default_factory=dict)


@dataclass
class LatentState:
    """Per-step model state used by imagination and deployment."""

    y: Tensor            # deterministic output [B, y]
    z: Tensor            # flat one-hot sample [B, z_dim]
    backbone: object     # S5 per-layer (re, im) pairs, or GRU hidden tensor


class StateEncoder(nn.Module):
    def __init__(self, cfg: WmConfig, rng):
        self.mlp = nn.MLP(cfg.obs_dim, cfg.units, cfg.mlp_layers, rng, act=cfg.act)

    def __call__(self, obs: Tensor) -> Tensor:
        if not np.all(np.isfinite(obs.data)):
            raise NumericalError("non-finite observation input")
        return self.mlp(obs)


class VisionEncoder(nn.Module):
    """Four stride-2 conv stages on the rendered image, fused with the
    recent action history."""

    def __init__(self, cfg: WmConfig, rng):
        d = cfg.cnn_depth
        self.convs = [
            nn.Conv2d(1, d, 4, 2, rng),
            nn.Conv2d(d, 2 * d, 4, 2, rng),
            nn.Conv2d(2 * d, 4 * d, 4, 2, rng),
            nn.Conv2d(4 * d, 8 * d, 4, 2, rng),
        ]
        side = cfg.image_size // 16
        flat = 8 * d * side * side
        hist = cfg.action_history * cfg.action_dim
        self.out = nn.Linear(flat + hist, cfg.units, rng)

    def __call__(self, image: Tensor, action_history: Tensor) -> Tensor:
        if not np.all(np.isfinite(image.data)):
            raise NumericalError("non-finite image input")
        x = image
        for conv in self.convs:
            x = ad.silu(conv(ad.pad2d(x, 1)))
        b = x.shape[0]
        x = ad.reshape(x, (b, -1))
        return self.out(ad.concat([x, action_history], axis=-1))


class ImageDecoder(nn.Module):
    """Transposed-conv mean image (the no-privileged-information variant)."""

    def __init__(self, cfg: WmConfig, rng):
        d = cfg.cnn_depth
        self.d = d
        side = cfg.image_size // 16
        self.side = side
        self.fc = nn.Linear(cfg.y_dim + cfg.z_dim, 8 * d * side * side, rng)
        self.deconvs = [
            nn.ConvTranspose2d(8 * d, 4 * d, 4, 2, rng),
            nn.ConvTranspose2d(4 * d, 2 * d, 4, 2, rng),
            nn.ConvTranspose2d(2 * d, d, 4, 2, rng),
            nn.ConvTranspose2d(d, 1, 4, 2, rng),
        ]

    def __call__(self, feat: Tensor) -> Tensor:
        b = feat.shape[0]
        x = ad.reshape(self.fc(feat), (b, 8 * self.d, self.side, self.side))
        for i, deconv in enumerate(self.deconvs):
            x = deconv(x)[:, :, 1:-1, 1:-1]
            if i < len(self.deconvs) - 1:
                x = ad.silu(x)
        return x


class S5Backbone(nn.Module):
    def __init__(self, cfg: WmConfig, rng):
        self.stack = ssm.S5Stack(
            cfg.y_dim, cfg.s5_state_size, cfg.s5_layers, rng,
            dt_min=cfg.dt_min, dt_max=cfg.dt_max, norm=cfg.norm,
            residual=cfg.residual, feedthrough=cfg.feedthrough,
            gating="half_glu", glu_degree=cfg.glu_degree,
            scan_workers=cfg.scan_workers)

    def initial(self, batch: int):
        return self.stack.zero_state(batch)

    def forward_parallel(self, u_seq, resets, state):
        return self.stack(u_seq, resets, state)

    def step(self, u, reset, state, cache=None):
        return self.stack.step(u, reset, state, dssms=cache)

    def step_cache(self):
        return self.stack.discrete()


class GruBackbone(nn.Module):
    """Strictly sequential recurrent baseline (RSSM-style)."""

    def __init__(self, cfg: WmConfig, rng):
        self.cell = nn.GRUCell(cfg.gru_in_dim, cfg.gru_units, rng)
        self.units = cfg.gru_units

    def initial(self, batch: int):
        return Tensor(np.zeros((batch, self.units), dtype=ad.default_dtype()))

    def step(self, u, reset, state, cache=None):
        del cache
        keep = Tensor(1.0 - np.asarray(reset, dtype=u.data.dtype).reshape(-1, 1))
        h = self.cell(u, state * keep)
        return h, h

    def step_cache(self):
        return None


class WorldModel(nn.Module):
    """Full latent world model (either backbone) with all heads."""

    def __init__(self, cfg: WmConfig, rng: np.random.Generator):
        self.cfg = cfg
        if cfg.obs_mode == "state":
            self.encoder = StateEncoder(cfg, rng)
        elif cfg.obs_mode == "vision":
            self.encoder = VisionEncoder(cfg, rng)
        else:
            raise ValueError(f"unknown obs_mode {cfg.obs_mode!r}")

        self.seq_model = cfg.seq_model
        if cfg.seq_model == "s5":
            self.backbone = S5Backbone(cfg, rng)
            y_out = cfg.y_dim
        elif cfg.seq_model == "gru":
            self.backbone = GruBackbone(cfg, rng)
            y_out = cfg.gru_units
        else:
            raise ValueError(f"unknown seq_model {cfg.seq_model!r}")
        self.y_out = y_out

        zdim = cfg.z_dim
        fuse_out = cfg.y_dim if cfg.seq_model == "s5" else cfg.gru_in_dim
        self.fuse = nn.MLP(zdim + cfg.action_dim, cfg.units, cfg.mlp_layers - 1,
                           rng, act=cfg.act, out_dim=fuse_out)
        post_in = cfg.units if cfg.posterior_mode == "obs_only" else cfg.units + y_out
        self.post_head = nn.MLP(post_in, cfg.units, cfg.post_mlp_layers, rng,
                                act=cfg.act, out_dim=zdim)
        self.prior_head = nn.MLP(y_out, cfg.units, cfg.mlp_layers, rng,
                                 act=cfg.act, out_dim=zdim)

        feat = y_out + zdim
        if cfg.decoder_mode in ("observation", "privileged"):
            self.decoder = nn.MLP(feat, cfg.units, cfg.mlp_layers, rng,
                                  act=cfg.act, out_dim=cfg.obs_dim)
        elif cfg.decoder_mode == "image":
            self.decoder = ImageDecoder(cfg, rng)
        else:
            raise ValueError(f"unknown decoder_mode {cfg.decoder_mode!r}")
        self.reward_head = nn.MLP(feat, cfg.units, cfg.mlp_layers, rng,
                                  act=cfg.act, out_dim=cfg.num_bins)
        self.cont_head = nn.MLP(feat, cfg.units, cfg.mlp_layers, rng,
                                act=cfg.act, out_dim=1)

    # -- posteriors / priors --------------------------------------------
    def embed(self, batch: SequenceBatch) -> Tensor:
        b, l = batch.batch_shape
        if self.cfg.obs_mode == "state":
            flat = Tensor(batch.obs.reshape(b * l, -1))
            return self.encoder(flat)
        img = Tensor(batch.image.reshape((b * l,) + batch.image.shape[2:]))
        hist = Tensor(batch.action_history.reshape(b * l, -1))
        return self.encoder(img, hist)

    def encode(self, obs_input) -> Tensor:
        """Posterior logits from the observation alone: [..., V, K]."""
        if self.cfg.posterior_mode != "obs_only":
            raise RuntimeError("recurrent posterior needs the sequence loop")
        emb = self.encoder(obs_input) if self.cfg.obs_mode == "state" \
            else self.encoder(*obs_input)
        return self._logits_shape(self.post_head(emb))

    def posterior_logits_recurrent(self, y: Tensor, emb: Tensor) -> Tensor:
        return self._logits_shape(self.post_head(ad.concat([y, emb], axis=-1)))

    def dynamics_prior(self, y: Tensor) -> Tensor:
        return self._logits_shape(self.prior_head(y))

    def _logits_shape(self, flat: Tensor) -> Tensor:
        shape = flat.shape[:-1] + (self.cfg.z_vars, self.cfg.z_classes)
        return ad.reshape(flat, shape)

    def latent_dist(self, logits: Tensor) -> dists.CategoricalLatent:
        return dists.CategoricalLatent(logits, unimix=self.cfg.unimix)

    def sample_latent(self, logits: Tensor, rng, mode: str = "sample") -> Tensor:
        """One-hot straight-through sample ([..., V, K] -> flat [..., V*K]).

        mode: "sample" (training/imagination), "mode" (deterministic eval),
        "soft" (differentiable pass-through; finite-difference test hook).
        """
        dist = self.latent_dist(logits)
        if mode == "sample":
            z = dist.sample(rng)
        elif mode == "mode":
            z = dist.mode()
        elif mode == "soft":
            z = dist.soft()
        else:
            raise ValueError(f"unknown latent mode {mode!r}")
        return ad.reshape(z, z.shape[:-2] + (self.cfg.z_dim,))

    # -- sequence model ---------------------------------------------------
    def fuse_inputs(self, z_flat: Tensor, action: Tensor) -> Tensor:
        return self.fuse(ad.concat([z_flat, action], axis=-1))

    def initial_state(self, batch: int) -> LatentState:
        dt = ad.default_dtype()
        return LatentState(
            y=Tensor(np.zeros((batch, self.y_out), dtype=dt)),
            z=Tensor(np.zeros((batch, self.cfg.z_dim), dtype=dt)),
            backbone=self.backbone.initial(batch),
        )

    def sequence_step(self, z: Tensor, action: Tensor, cont, state,
                      cache=None) -> tuple[object, Tensor]:
        """One recurrence step. ``cont`` in {0,1}: 0 resets the state."""
        reset = 1.0 - np.asarray(cont, dtype=ad.default_dtype()).reshape(-1)
        u = self.fuse_inputs(z, action)
        return self._step_backbone(u, reset, state, cache)

    def _step_backbone(self, u, reset, state, cache=None):
        new_state, y = None, None
        if self.seq_model == "s5":
            y, new_state = self.backbone.step(u, reset, state, cache)
        else:
            y, new_state = self.backbone.step(u, reset, state)
        return new_state, y

    def sequence_forward_parallel(self, z_seq: Tensor, actions: np.ndarray,
                                  is_first: np.ndarray, state=None):
        """Whole-sequence forward: one scan per layer.

        Inputs at step t are the previous step's (detached) posterior sample
        and action, zeroed at episode starts; ``is_first`` doubles as the
        scan reset flags.
        """
        b, l = is_first.shape
        if state is None:
            state = self.backbone.initial(b)
        z_prev = self._shift_right(z_seq.detach(), is_first)
        a_prev = self._shift_right(Tensor(actions), is_first)
        u = self.fuse_inputs(z_prev, a_prev)
        if self.seq_model == "s5":
            y_seq, new_state = self.backbone.forward_parallel(u, is_first, state)
            return y_seq, new_state
        # sequential fallback (the GRU baseline never parallelizes)
        ys = []
        h = state
        for t in range(l):
            h, y = self._step_backbone(u[:, t, :], is_first[:, t], h)
            ys.append(y)
        return ad.stack(ys, axis=1), h

    @staticmethod
    def _shift_right(seq: Tensor, is_first: np.ndarray) -> Tensor:
        """[B, L, D] -> previous-step values; zeros at t=0 and episode starts."""
        b, l, d = seq.shape
        zeros = Tensor(np.zeros((b, 1, d), dtype=seq.data.dtype))
        shifted = ad.concat([zeros, seq[:, : l - 1, :]], axis=1)
        keep = 1.0 - is_first.reshape(b, l, 1)
        return shifted * Tensor(keep.astype(seq.data.dtype))

    # -- heads -------------------------------------------------------------
    def decode(self, y: Tensor, z: Tensor) -> Tensor:
        return self.decoder(ad.concat([y, z], axis=-1))

    def reward_dist(self, y: Tensor, z: Tensor) -> dists.TwoHotSymlog:
        logits = self.reward_head(ad.concat([y, z], axis=-1))
        return dists.TwoHotSymlog(logits)

    def continue_logit(self, y: Tensor, z: Tensor) -> Tensor:
        return self.cont_head(ad.concat([y, z], axis=-1))[..., 0]

    def continue_prob(self, y: Tensor, z: Tensor) -> Tensor:
        return ad.sigmoid(self.continue_logit(y, z))

    # -- losses -------------------------------------------------------------
    def kl_free_bits(self, post_logits: Tensor, prior_logits: Tensor,
                     stop_side: str) -> tuple[Tensor, Tensor]:
        """Summed categorical KL with a one-nat floor.

        stop_side="posterior": KL[sg(q) || p] (dynamics loss).
        stop_side="prior":     KL[q || sg(p)] (representation loss).
        Returns (clamped loss [...], raw kl [...]).
        """
        q = self.latent_dist(post_logits)
        p = self.latent_dist(prior_logits)
        return self._kl_term(q, p, stop_side)

    def _kl_term(self, q: dists.CategoricalLatent, p: dists.CategoricalLatent,
                 stop_side: str) -> tuple[Tensor, Tensor]:
        if stop_side == "posterior":
            kl = dists.categorical_kl(q.detached(), p)
        elif stop_side == "prior":
            kl = dists.categorical_kl(q, p.detached())
        else:
            raise ValueError(f"unknown stop_side {stop_side!r}")
        return ad.clamp_min(kl, self.cfg.free_bits), kl

    def observe(self, batch: SequenceBatch, rng, latent_mode: str = "sample",
                state=None):
        """Posterior/prior pass over a replay window.

        Returns dict with y, post_logits, prior_logits, z (flat samples),
        and the final backbone state.
        """
        b, l = batch.batch_shape
        cfg = self.cfg
        emb = self.embed(batch)  # [B*L, units]
        if cfg.posterior_mode == "obs_only":
            post_flat = self.post_head(emb)
            post_logits = ad.reshape(post_flat, (b, l, cfg.z_vars, cfg.z_classes))
            z = self.sample_latent(post_logits, rng, latent_mode)  # [B, L, zdim]
            y_seq, final_state = self.sequence_forward_parallel(
                z, batch.actions, batch.is_first, state)
            prior_logits = self.dynamics_prior(y_seq)
        else:
            emb_seq = ad.reshape(emb, (b, l, cfg.units))
            h = state if state is not None else self.backbone.initial(b)
            z_prev = Tensor(np.zeros((b, cfg.z_dim), dtype=ad.default_dtype()))
            a_prev = Tensor(np.zeros((b, cfg.action_dim), dtype=ad.default_dtype()))
            ys, posts, priors, zs = [], [], [], []
            for t in range(l):
                first = batch.is_first[:, t]
                keep = Tensor((1.0 - first).reshape(b, 1).astype(ad.default_dtype()))
                u = self.fuse_inputs(z_prev.detach() * keep, a_prev * keep)
                h, y = self._step_backbone(u, first, h)
                prior_t = self.dynamics_prior(y)
                post_t = self.posterior_logits_recurrent(y, emb_seq[:, t, :])
                z_t = self.sample_latent(post_t, rng, latent_mode)
                ys.append(y)
                priors.append(prior_t)
                posts.append(post_t)
                zs.append(z_t)
                z_prev = z_t
                a_prev = Tensor(batch.actions[:, t, :])
            y_seq = ad.stack(ys, axis=1)
            prior_logits = ad.stack(priors, axis=1)
            post_logits = ad.stack(posts, axis=1)
            z = ad.stack(zs, axis=1)
            final_state = h
        return {
            "y": y_seq,
            "post_logits": post_logits,
            "prior_logits": prior_logits,
            "z": z,
            "state": final_state,
        }

    def loss(self, batch: SequenceBatch, rng, latent_mode: str = "sample",
             outputs: dict | None = None):
        """Three-part loss; returns (scalar Tensor, WmLossReport, outputs)."""
        cfg = self.cfg
        out = outputs or self.observe(batch, rng, latent_mode)
        b, l = batch.batch_shape
        y2 = ad.reshape(out["y"], (b * l, self.y_out))
        z2 = ad.reshape(out["z"], (b * l, cfg.z_dim))

        # prediction loss: decoder + reward + continue
        if cfg.decoder_mode == "image":
            target = batch.image.reshape((b * l,) + batch.image.shape[2:])
            mean = self.decode(y2, z2)
            dim = float(np.prod(target.shape[1:]))
            err = ad.reshape(mean - Tensor(target), (b * l, -1))
        else:
            target = batch.obs.reshape(b * l, -1)
            mean = self.decode(y2, z2)
            dim = float(target.shape[-1])
            err = mean - Tensor(target)
        nll_dec = 0.5 * ad.tsum(ad.square(err), axis=-1) \
            + 0.5 * dim * math.log(2.0 * math.pi)

        rdist = self.reward_dist(y2, z2)
        nll_rew = rdist.neg_log_prob(batch.rewards.reshape(-1))

        clogit = self.continue_logit(y2, z2)
        cont = batch.continues.reshape(-1).astype(clogit.data.dtype)
        nll_cont = Tensor(cont) * ad.softplus(-clogit) \
            + Tensor(1.0 - cont) * ad.softplus(clogit)

        pred = ad.tmean(nll_dec + nll_rew + nll_cont)
        q = self.latent_dist(out["post_logits"])
        p = self.latent_dist(out["prior_logits"])
        dyn_c, _ = self._kl_term(q, p, "posterior")
        rep_c, _ = self._kl_term(q, p, "prior")
        dyn = ad.tmean(dyn_c)
        rep = ad.tmean(rep_c)
        total = cfg.beta_pred * pred + cfg.beta_dyn * dyn + cfg.beta_rep * rep

        report = WmLossReport(
            total=total.item(), pred=pred.item(), dyn=dyn.item(), rep=rep.item(),
            breakdown={
                "obs": float(nll_dec.data.mean()),
                "reward": float(nll_rew.data.mean()),
                "continue": float(nll_cont.data.mean()),
            },
        )
        if not math.isfinite(report.total):
            raise NumericalError(f"non-finite world-model loss: {report}")
        return total, report, out

    # -- parameter accounting ---------------------------------------------
    def dynamics_param_count(self) -> int:
        """Sequence-model budget: fuse + backbone + prior + posterior heads."""
        return (self.fuse.num_params() + self.backbone.num_params()
                + self.prior_head.num_params() + self.post_head.num_params())

    def decoder_param_count(self) -> int:
        return self.decoder.num_params()
