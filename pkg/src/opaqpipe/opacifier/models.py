"""Conditional noise predictor and the image condition encoder.

The denoiser is a two-resolution residual encoder-decoder.  Timestep and
image condition enter every residual block as a per-channel bias.  With a
single conditioning token, cross-attention collapses to a query-independent
affine map of that token, so an additive bias spans the same functions.
"""

from __future__ import annotations

import math

import numpy as np

from .. import maskops
from ..schedule import (DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_T, ScheduleTable,
                        build_schedule)
from ..tensorgrad import (Conv2d, ConvNormAct, GroupNorm, LayerNorm, Linear, Module, Tensor,
                          concat, freeze)
from ..tensorgrad import functional as F
from .codec import INPUT_CHANNELS, LATENT_CHANNELS

TIME_DIM = 32
EMB_DIM = 64
COND_DIM = 64


def timestep_embedding(t, T: int, dim: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal features of t/T (N×dim); t may be fractional."""
    x = np.asarray(t, dtype=np.float64).reshape(-1) / T
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    ang = 1000.0 * x[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class ResBlock(Module):
    """x + SiLU(GN(conv(SiLU(GN(conv(x))) + bias(emb, c))))."""

    def __init__(self, ch: int, groups: int, rng: np.random.Generator):
        self.conv1 = Conv2d(ch, ch, 3, rng)
        self.norm1 = GroupNorm(groups, ch)
        self.conv2 = Conv2d(ch, ch, 3, rng)
        self.norm2 = GroupNorm(groups, ch)
        self.time_proj = Linear(EMB_DIM, ch, rng)
        self.cond_proj = Linear(COND_DIM, ch, rng)

    def channel_bias(self, emb: Tensor, c: Tensor) -> Tensor:
        return self.time_proj(emb) + self.cond_proj(c)

    def forward(self, x: Tensor, emb: Tensor, c: Tensor) -> Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        h = F.add_channel_bias(h, self.channel_bias(emb, c))
        h = F.silu(self.norm2(self.conv2(h)))
        return x + h


class DenoiserNet(Module):
    """Noise predictor.

    With ``output="v"`` the convolutional trunk predicts ``v`` and the noise
    estimate is assembled as ``a_t v + sigma_t z_t``.  The function is still
    a noise predictor trained with the same loss, but the clean-image
    estimate it implies no longer amplifies small output errors by
    ``sigma_t / a_t`` at high noise levels.
    """

    def __init__(self, rng: np.random.Generator, base: int = 32, groups: int = 8,
                 table: ScheduleTable | None = None, latent_size: int = 16, output: str = "v"):
        if output not in ("eps", "v"):
            raise ValueError(f"unknown output parameterization {output!r}")
        self.table = table or build_schedule()
        T = self.table.T
        self.arch = {"kind": "denoiser", "base": base, "groups": groups, "T": T,
                     "latent_size": latent_size, "in_channels": INPUT_CHANNELS, "output": output}
        self.T = T
        self.output = output
        self.time_mlp = [Linear(TIME_DIM, EMB_DIM, rng), Linear(EMB_DIM, EMB_DIM, rng)]
        self.conv_in = Conv2d(INPUT_CHANNELS, base, 3, rng)
        self.enc = ResBlock(base, groups, rng)
        self.down = ConvNormAct(base, 2 * base, groups, rng, stride=2)
        self.mid = ResBlock(2 * base, groups, rng)
        self.fuse = ConvNormAct(3 * base, base, groups, rng)
        self.dec = ResBlock(base, groups, rng)
        self.conv_out = Conv2d(base, LATENT_CHANNELS, 3, rng, zero_init=True)

    def embed_time(self, t) -> Tensor:
        e = Tensor(timestep_embedding(t, self.T).astype(self.dtype))
        return F.silu(self.time_mlp[1](F.silu(self.time_mlp[0](e))))

    def forward(self, x: Tensor, t, c: Tensor) -> Tensor:
        """x: N×7×h×w model input, t: N timesteps, c: N×64 condition -> N×3×h×w noise."""
        if x.ndim != 4 or x.shape[1] != INPUT_CHANNELS:
            raise ValueError(f"denoiser expects N×{INPUT_CHANNELS}×h×w input, got {x.shape}")
        emb = self.embed_time(t)
        h0 = self.enc(self.conv_in(x), emb, c)
        h1 = self.mid(self.down(h0), emb, c)
        hh, ww = h1.shape[-2:]
        up = F.separable(h1, maskops.resize_matrix(hh, h0.shape[-2]),
                         maskops.resize_matrix(ww, h0.shape[-1]))
        h = self.fuse(concat([up, h0], axis=1))
        h = self.dec(h, emb, c)
        out = self.conv_out(h)
        if self.output == "eps":
            return out
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
        a = np.array([self.table.a_at(ti) for ti in t])
        s = np.array([self.table.sigma_at(ti) for ti in t])
        z_t = x.data[:, :LATENT_CHANNELS]
        shape = out.shape
        scale = np.broadcast_to(a[:, None, None, None], shape).astype(out.dtype)
        skip = (s[:, None, None, None] * z_t).astype(out.dtype)
        return out * Tensor(scale) + Tensor(skip)


class ConditionEncoder(Module):
    """Frozen conv feature extractor -> pooled token -> trainable mapper."""

    def __init__(self, rng: np.random.Generator, width: int = 16, groups: int = 4):
        self.arch = {"kind": "cond_encoder", "width": width, "groups": groups}
        self.features = freeze_all([
            ConvNormAct(3, width, groups, rng, stride=2),
            ConvNormAct(width, 2 * width, groups, rng, stride=2),
            ConvNormAct(2 * width, 64, groups, rng, stride=2),
        ])
        self.mapper = [Linear(64, 64, rng), Linear(64, 64, rng)]
        self.norm = LayerNorm(64)
        self.proj = Linear(64, COND_DIM, rng)

    def pooled_token(self, img: Tensor) -> Tensor:
        h = img
        for block in self.features:
            h = block(h)
        return F.spatial_mean(h)

    def forward(self, img: Tensor) -> Tensor:
        """N×3×H×W image -> N×64 condition vector."""
        f = self.pooled_token(img)
        f = self.mapper[1](F.silu(self.mapper[0](f)))
        return self.proj(self.norm(f))


def freeze_all(modules: list[Module]) -> list[Module]:
    for m in modules:
        freeze(m)
    return modules


class OpacifierModel(Module):
    """Denoiser plus condition encoder, checkpointed together."""

    def __init__(self, seed: int = 0, base: int = 32, latent_size: int = 16, output: str = "v",
                 T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN,
                 beta_max: float = DEFAULT_BETA_MAX):
        rng = np.random.default_rng(seed)
        table = build_schedule(T, beta_min, beta_max)
        self.denoiser = DenoiserNet(rng, base=base, table=table, latent_size=latent_size,
                                    output=output)
        self.cond = ConditionEncoder(rng)
        self.arch = {"kind": "opacifier", "seed": seed, "base": base, "latent_size": latent_size,
                     "output": output, "T": T, "beta_min": beta_min, "beta_max": beta_max,
                     "denoiser": self.denoiser.arch, "cond_encoder": self.cond.arch}

    @classmethod
    def from_arch(cls, arch: dict) -> "OpacifierModel":
        return cls(seed=arch["seed"], base=arch["base"], latent_size=arch["latent_size"],
                   output=arch["output"], T=arch["T"], beta_min=arch["beta_min"],
                   beta_max=arch["beta_max"])
