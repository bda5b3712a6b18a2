"""Transformer reconstruction module and its score/loss."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn


@dataclass
class RMConfig:
    depth: int = 2
    width: int = 128
    heads: int = 4
    ff_mult: int = 2
    token_dim: int = 112
    num_positions: int = 784
    neighbor_mask: bool = False  # reserved; only the unmasked variant exists

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.neighbor_mask:
            raise NotImplementedError("the neighbourhood-masked attention variant is not implemented")

    def to_dict(self) -> dict:
        return asdict(self)


class ReconstructionModule(nn.Module):
    """Transformer ``Pi`` with full self-attention over all patch tokens.

    Tokens are standardised with fixed per-channel statistics of the normal
    training tokens (buffers, see ``set_token_stats``), projected to
    ``width``, tagged with a learned embedding per grid site and passed
    through ``depth`` encoder blocks. The head maps back to token space and
    undoes the standardisation, so outputs live in the input feature space.
    """

    def __init__(self, cfg: RMConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.register_buffer("token_shift", torch.zeros(cfg.token_dim))
        self.register_buffer("token_scale", torch.ones(cfg.token_dim))
        self.input_proj = nn.Linear(cfg.token_dim, w)
        self.pos = nn.Parameter(torch.randn(cfg.num_positions, w) * 0.02)
        layer = nn.TransformerEncoderLayer(w, cfg.heads, w * cfg.ff_mult, dropout=0.0, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, cfg.depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(w)
        self.output_proj = nn.Linear(w, cfg.token_dim)

    @torch.no_grad()
    def set_token_stats(self, mean: torch.Tensor, std: torch.Tensor, rel_eps: float = 1e-3) -> None:
        """Fix the standardisation; dead channels get a floor of ``rel_eps`` times the mean std."""
        std = std.to(self.token_scale.dtype)
        floor = rel_eps * float(std.mean()) if float(std.mean()) > 0 else 1.0
        self.token_shift.copy_(mean.to(self.token_shift.dtype))
        self.token_scale.copy_(std.clamp_min(floor))

    def forward(self, tokens: torch.Tensor, positions: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``tokens``: ``(B, N, token_dim)`` or ``(N, token_dim)``; ``positions`` site ids, default ``arange(N)``."""
        single = tokens.dim() == 2
        x = tokens.unsqueeze(0) if single else tokens
        if x.shape[-1] != self.cfg.token_dim:
            raise ValueError(f"token dim {x.shape[-1]} != configured {self.cfg.token_dim}")
        n = x.shape[1]
        if positions is None:
            if n != self.cfg.num_positions:
                raise ValueError(f"expected {self.cfg.num_positions} tokens, got {n}")
            positions = torch.arange(n)
        shift = self.token_shift.to(x.dtype)
        scale = self.token_scale.to(x.dtype)
        h = self.input_proj((x - shift) / scale) + self.pos[positions].to(x.dtype)
        out = self.output_proj(self.norm(self.encoder(h))) * scale + shift
        return out[0] if single else out


def reconstruct(tokens: torch.Tensor, rm: ReconstructionModule, positions: Optional[torch.Tensor] = None) -> torch.Tensor:
    return rm(tokens, positions)


def rec_score(p: torch.Tensor, p_hat: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean residual over the last dimension (unnormalised)."""
    if p.shape[-1] != p_hat.shape[-1]:
        raise ValueError("token dimensions differ")
    return (p_hat - p).pow(2).sum(dim=-1)


def rec_loss(reconstructed: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over tokens (and batch) of the squared residual to the clean tokens."""
    if reconstructed.shape != targets.shape:
        raise ValueError(f"misaligned batches {tuple(reconstructed.shape)} vs {tuple(targets.shape)}")
    return rec_score(targets, reconstructed).mean()
