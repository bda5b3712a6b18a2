"""Class-conditioned feature synthesis and Phase-2 feature augmentation.

A VAE-style decoder maps a sampled latent ``z_hat`` and a text prototype
``t_c`` to synthetic feature maps shaped like the encoder's first L-1 taps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

SIGMA_FLOOR = 1e-6


@dataclass
class LatentPosterior:
    mu: torch.Tensor
    sigma: torch.Tensor


@dataclass
class SynthesisConfig:
    p_real: float = 0.5
    das_enabled: bool = False
    das_floor: float = 0.1
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_real <= 1.0:
            raise ValueError("p_real must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def real_probability(self, n_c: int, n_max: int) -> float:
        """``p_c``: fixed ``p_real``, or ``max(floor, N_c / N_max)`` with DAS."""
        if not self.das_enabled:
            return self.p_real
        return max(self.das_floor, n_c / n_max)


class PosteriorHeads(nn.Module):
    """Affine ``F_mu`` and ``F_sigma``; sigma = exp(half log-variance), floored."""

    def __init__(self, in_dim: int, latent_dim: int, zero_init: bool = False):
        super().__init__()
        self.f_mu = nn.Linear(in_dim, latent_dim)
        self.f_half_logvar = nn.Linear(in_dim, latent_dim)
        if zero_init:
            for lin in (self.f_mu, self.f_half_logvar):
                nn.init.zeros_(lin.weight)
                nn.init.zeros_(lin.bias)
        else:
            # start near the prior: sigma ~ 1
            nn.init.zeros_(self.f_half_logvar.weight)
            nn.init.zeros_(self.f_half_logvar.bias)

    def forward(self, z: torch.Tensor) -> LatentPosterior:
        mu = self.f_mu(z)
        sigma = torch.exp(self.f_half_logvar(z)).clamp_min(SIGMA_FLOOR)
        return LatentPosterior(mu, sigma)


def posterior(z: torch.Tensor, heads: PosteriorHeads) -> LatentPosterior:
    return heads(z)


def reparameterize(post: LatentPosterior, epsilon: torch.Tensor) -> torch.Tensor:
    if epsilon.shape[-1] != post.mu.shape[-1]:
        raise ValueError("epsilon and mu differ in dimension")
    return post.mu + post.sigma.clamp_min(SIGMA_FLOOR) * epsilon


def kl_divergence(post: LatentPosterior) -> torch.Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) summed over the last dimension."""
    mu, sigma = post.mu, post.sigma
    return 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * torch.log(sigma)).sum(dim=-1)


class FeatureDecoder(nn.Module):
    """Mirror of the toy encoder: ``[z_hat; t_c]`` -> L-1 feature maps.

    ``layer_shapes`` lists ``(C_l, H_l, W_l)`` from the finest layer to the
    coarsest; decoding runs coarse to fine with 2x transposed convolutions
    and resizes when a stage does not land exactly on the target size.
    """

    def __init__(self, latent_dim: int, cond_dim: int, layer_shapes: Sequence[tuple[int, int, int]], hidden: int = 128):
        super().__init__()
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.layer_shapes = [tuple(s) for s in layer_shapes]
        coarse_c, coarse_h, coarse_w = self.layer_shapes[-1]
        self.seed_shape = (hidden, coarse_h, coarse_w)
        self.stem = nn.Linear(latent_dim + cond_dim, hidden * coarse_h * coarse_w)
        self.blocks = nn.ModuleList()
        self.heads = nn.ModuleList()
        in_c = hidden
        for i, (c, _, _) in enumerate(reversed(self.layer_shapes)):
            if i == 0:
                self.blocks.append(nn.Conv2d(in_c, c, 3, padding=1))
            else:
                self.blocks.append(nn.ConvTranspose2d(in_c, c, 2, stride=2))
            self.heads.append(nn.Conv2d(c, c, 1))
            in_c = c

    def forward(self, z_hat: torch.Tensor, t_c: torch.Tensor) -> list[torch.Tensor]:
        if z_hat.shape[-1] != self.latent_dim or t_c.shape[-1] != self.cond_dim:
            raise ValueError(
                f"decoder expects latent {self.latent_dim} and condition {self.cond_dim}, "
                f"got {z_hat.shape[-1]} and {t_c.shape[-1]}"
            )
        single = z_hat.dim() == 1
        x = torch.cat([z_hat, t_c.to(z_hat.dtype)], dim=-1)
        if single:
            x = x.unsqueeze(0)
        h = F.relu(self.stem(x)).view(x.shape[0], *self.seed_shape)
        outs = []
        for block, head, (c, hh, ww) in zip(self.blocks, self.heads, reversed(self.layer_shapes)):
            h = F.relu(block(h))
            if tuple(h.shape[-2:]) != (hh, ww):
                h = F.interpolate(h, size=(hh, ww), mode="bilinear", align_corners=False)
            outs.append(head(h))
        outs.reverse()
        if single:
            outs = [o[0] for o in outs]
        return outs


def decode(z_hat: torch.Tensor, t_c: torch.Tensor, decoder: FeatureDecoder) -> list[torch.Tensor]:
    return decoder(z_hat, t_c)


def phase1_loss(
    f_syn: Sequence[torch.Tensor],
    f_real: Sequence[torch.Tensor],
    post: LatentPosterior,
    kl_weight: float = 1.0,
) -> torch.Tensor:
    """Layer-averaged elementwise MSE plus ``kl_weight`` times the batch-mean KL."""
    if len(f_syn) != len(f_real):
        raise ValueError("synthetic and real stacks differ in layer count")
    mse = []
    for s, r in zip(f_syn, f_real):
        if s.shape != r.shape:
            raise ValueError(f"layer shape mismatch {tuple(s.shape)} vs {tuple(r.shape)}")
        mse.append((s - r).pow(2).mean())
    rec = torch.stack(mse).mean()
    return rec + kl_weight * kl_divergence(post).mean()


class ChannelStats:
    """Running per-channel mean/std of patch tokens (Chan et al. batch merge)."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = torch.zeros(dim, dtype=torch.float64)
        self.m2 = torch.zeros(dim, dtype=torch.float64)

    def update(self, tokens: torch.Tensor) -> None:
        x = tokens.detach().reshape(-1, tokens.shape[-1]).to(torch.float64)
        nb = x.shape[0]
        if nb == 0:
            return
        mb = x.mean(0)
        m2b = (x - mb).pow(2).sum(0)
        delta = mb - self.mean
        total = self.n + nb
        self.mean = self.mean + delta * nb / total
        self.m2 = self.m2 + m2b + delta.pow(2) * self.n * nb / total
        self.n = total

    @property
    def std(self) -> torch.Tensor:
        if self.n < 2:
            return torch.ones_like(self.mean)
        return (self.m2 / (self.n - 1)).sqrt()


def inject_pseudo_anomaly(
    p_n: torch.Tensor,
    channel_std: torch.Tensor,
    noise_std: float,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """``p_a = p_n + eta`` with ``eta ~ N(0, (noise_std * s)^2)`` per channel."""
    eta = torch.randn(p_n.shape, generator=generator, dtype=p_n.dtype)
    return p_n + eta * (noise_std * channel_std.to(p_n.dtype))


def select_training_features(
    f_real: list[torch.Tensor],
    synthesize: Callable[[], list[torch.Tensor]],
    p_real: float,
    generator: Optional[torch.Generator] = None,
) -> tuple[list[torch.Tensor], bool]:
    """Return ``(features, is_real)``: real with probability ``p_real``, else a fresh synthetic draw."""
    u = torch.rand((), generator=generator).item()
    if u < p_real:
        return f_real, True
    return synthesize(), False


def make_synthesizer(
    heads: PosteriorHeads,
    decoder: FeatureDecoder,
    z: torch.Tensor,
    t_c: torch.Tensor,
    generator: Optional[torch.Generator] = None,
) -> Callable[[], list[torch.Tensor]]:
    """Closure drawing ``D(reparameterize(posterior(z)), t_c)`` without gradients."""

    @torch.no_grad()
    def draw() -> list[torch.Tensor]:
        post = heads(z)
        eps = torch.randn(post.mu.shape, generator=generator, dtype=post.mu.dtype)
        return decoder(reparameterize(post, eps), t_c)

    return draw
