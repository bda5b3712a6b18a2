"""Layer-aware projections into text space and the semantic anomaly score."""
from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

POOLINGS = ("max", "mean", "direct")
BCE_EPS = 1e-7


class ProjectionHeads(nn.Module):
    """Bias-free linear maps ``Phi_l: R^{C_l} -> R^d`` pooled over layers.

    ``pooling="direct"`` replaces the per-layer maps with a single map of
    the concatenated token.
    """

    def __init__(self, layer_channels: Sequence[int], d: int, pooling: str = "max", tau: float = 1.0):
        super().__init__()
        if pooling not in POOLINGS:
            raise ValueError(f"unknown pooling {pooling!r}")
        if tau <= 0:
            raise ValueError("temperature must be positive")
        self.pooling = pooling
        self.tau = tau
        # fixed per-channel input scaling; a reparameterisation of the same linear maps
        self.register_buffer("input_scale", torch.ones(sum(layer_channels)))
        self.d = d
        self.layer_channels = list(layer_channels)
        if pooling == "direct":
            self.phi = nn.ModuleList()
            self.direct_map = nn.Linear(sum(layer_channels), d, bias=False)
        else:
            self.phi = nn.ModuleList(nn.Linear(c, d, bias=False) for c in layer_channels)
            self.direct_map = None

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != sum(self.layer_channels):
            raise ValueError("token layout does not match the projection heads")
        tokens = tokens / self.input_scale.to(tokens.dtype)
        if self.direct_map is not None:
            return self.direct_map(tokens)
        parts = torch.split(tokens, self.layer_channels, dim=-1)
        projected = torch.stack([phi(p) for phi, p in zip(self.phi, parts)], dim=0)
        return pool_layers(projected, self.pooling)


    @torch.no_grad()
    def set_input_scale(self, std: torch.Tensor, rel_eps: float = 1e-3) -> None:
        std = std.to(self.input_scale.dtype)
        floor = rel_eps * float(std.mean()) if float(std.mean()) > 0 else 1.0
        self.input_scale.copy_(std.clamp_min(floor))


def pool_layers(projected: torch.Tensor, pooling: str) -> torch.Tensor:
    """Elementwise max or mean over the leading (layer) axis."""
    if pooling == "max":
        return projected.max(dim=0).values
    if pooling == "mean":
        return projected.mean(dim=0)
    raise ValueError(f"pooling {pooling!r} does not reduce over layers")


def project_patch(tokens: torch.Tensor, heads: ProjectionHeads) -> torch.Tensor:
    return heads(tokens)


def sem_logit(p_hat: torch.Tensor, t_n: torch.Tensor, t_a: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """``(t_a - t_n) . p_hat / tau``; ``t_*`` broadcast against ``p_hat``'s leading dims."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return ((t_a - t_n).to(p_hat.dtype) * p_hat).sum(dim=-1) / tau


def sem_score(p_hat: torch.Tensor, t_n: torch.Tensor, t_a: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Two-way softmax probability of the abnormal prompt, in (0, 1)."""
    return torch.sigmoid(sem_logit(p_hat, t_n, t_a, tau))


def sem_loss(scores: torch.Tensor, labels: torch.Tensor, literal: bool = False, eps: float = BCE_EPS) -> torch.Tensor:
    """Binary cross entropy over patches; ``literal`` keeps only the ``y log S`` term."""
    labels = labels.to(scores.dtype)
    if not torch.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    s = scores.clamp(eps, 1.0 - eps)
    per = labels * torch.log(s)
    if not literal:
        per = per + (1.0 - labels) * torch.log1p(-s)
    return -per.mean()


def sem_loss_from_logits(logits: torch.Tensor, labels: torch.Tensor, literal: bool = False) -> torch.Tensor:
    """The same loss from logits via ``logsigmoid`` (used in training).

    Agrees with ``sem_loss(sigmoid(logits))`` wherever the scores lie inside
    the clamping band; outside it the gradient stays informative instead of
    vanishing.
    """
    labels = labels.to(logits.dtype)
    if not torch.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    per = labels * F.logsigmoid(logits)
    if not literal:
        per = per + (1.0 - labels) * F.logsigmoid(-logits)
    return -per.mean()


class LearnedFreeClassifier(nn.Module):
    """Per-class trainable ``(t_n, t_a)`` with no text encoder involved."""

    def __init__(self, num_classes: int, d: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.t_n = nn.Parameter(F.normalize(torch.randn(num_classes, d, generator=g), dim=-1))
        self.t_a = nn.Parameter(F.normalize(torch.randn(num_classes, d, generator=g), dim=-1))

    def forward(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.t_n, self.t_a


class TextDerivedClassifier:
    """Pulls ``(t_n, t_a)`` for every class from the prompt bank through ``T``."""

    def __init__(self, bank, text_encoder, prefix_sets: Optional[Sequence[tuple[str, str]]] = None):
        self.bank = bank
        self.text_encoder = text_encoder
        self.prefix_sets = list(prefix_sets) if prefix_sets else None

    def __call__(self) -> tuple[torch.Tensor, torch.Tensor]:
        from .text import all_class_weights, ensemble_class_weights

        if self.prefix_sets:
            return ensemble_class_weights(self.prefix_sets, self.bank, self.text_encoder)
        t_n, t_a, _ = all_class_weights(self.bank, self.text_encoder)
        return t_n, t_a


def classifier_source(mode: str, *, bank=None, text_encoder=None, num_classes: int = 0, d: int = 0,
                      prefix_sets=None, seed: int = 0):
    """Weight provider: callable returning ``(t_n, t_a)`` of shape ``(C, d)``."""
    if mode == "text_derived":
        if bank is None or text_encoder is None:
            raise ValueError("text_derived weights need a prompt bank and a text encoder")
        return TextDerivedClassifier(bank, text_encoder, prefix_sets)
    if mode == "learned_free":
        return LearnedFreeClassifier(num_classes, d, seed)
    raise ValueError(f"unknown classifier source {mode!r}")
