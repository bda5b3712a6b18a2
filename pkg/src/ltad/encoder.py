"""Frozen image encoders, multi-layer feature stacks and patch tokens.

Token ``i`` of a ``PatchGrid`` sits at grid column ``i % W1`` and row
``i // W1`` (row-major).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class CapabilityError(RuntimeError):
    """An optional backend (foundation model weights, extra package) is unavailable."""


@dataclass
class EncoderSpec:
    kind: str = "toy"
    layer_ids: list[int] = field(default_factory=lambda: [1, 2, 3, 4])
    text_dim: int = 64
    layer_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    grid: tuple[int, int] = (28, 28)
    image_side: int = 224
    # foundation adapter only
    model_path: Optional[str] = None
    latent_pool: str = "mean"

    def __post_init__(self):
        self.grid = tuple(self.grid)
        if len(self.layer_ids) < 2:
            raise ValueError("an encoder needs at least two tap points")
        if len(self.layer_channels) != len(self.layer_ids):
            raise ValueError("layer_channels must list one channel count per tap point")

    @classmethod
    def foundation(cls, model_path: Optional[str] = None) -> "EncoderSpec":
        """ALIGN taps; channel counts and grid are re-probed when the adapter loads."""
        return cls(
            kind="foundation_adapter",
            layer_ids=[3, 10, 17, 37],
            text_dim=640,
            layer_channels=[0, 0, 0, 0],
            grid=(0, 0),
            model_path=model_path,
        )

    @property
    def token_dim(self) -> int:
        return int(sum(self.layer_channels[:-1]))

    @property
    def latent_dim(self) -> int:
        return int(self.layer_channels[-1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


@dataclass
class FeatureStack:
    """Spatial features of the first L-1 taps plus the pooled latent of tap L.

    ``layers[l]`` has shape ``(C_l, H_l, W_l)`` (or with a leading batch dim).
    """
    layers: list[torch.Tensor]
    z: torch.Tensor

    def detach(self) -> "FeatureStack":
        return FeatureStack([f.detach() for f in self.layers], self.z.detach())

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in [*self.layers, self.z]:
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


@dataclass
class PatchGrid:
    tokens: torch.Tensor  # (..., W1*H1, sum C_l)
    slices: list[tuple[int, int]]
    grid: tuple[int, int]

    @property
    def num_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def layer(self, l: int) -> torch.Tensor:
        a, b = self.slices[l]
        return self.tokens[..., a:b]


def layer_slices(channels: Sequence[int]) -> list[tuple[int, int]]:
    out, start = [], 0
    for c in channels:
        out.append((start, start + c))
        start += c
    return out


def resample_and_stack(stack: FeatureStack, grid: Optional[tuple[int, int]] = None) -> PatchGrid:
    """Bilinearly resize every spatial layer to the first layer's grid and concatenate.

    Works on unbatched ``(C, H, W)`` or batched ``(B, C, H, W)`` layers and
    returns tokens of shape ``(H1*W1, sum C)`` / ``(B, H1*W1, sum C)``.
    """
    layers = stack.layers
    batched = layers[0].dim() == 4
    if grid is None:
        h1, w1 = layers[0].shape[-2:]
    else:
        w1, h1 = grid
    parts = []
    for f in layers:
        x = f if batched else f.unsqueeze(0)
        if tuple(x.shape[-2:]) != (h1, w1):
            x = F.interpolate(x, size=(h1, w1), mode="bilinear", align_corners=False)
        parts.append(x)
    cat = torch.cat(parts, dim=1)  # (B, C, H1, W1)
    tokens = cat.flatten(2).transpose(1, 2)  # row-major sites
    if not batched:
        tokens = tokens[0]
    return PatchGrid(tokens=tokens, slices=layer_slices([f.shape[-3] for f in layers]), grid=(w1, h1))


def tokens_to_grid(values: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Per-token scalars ``(..., W1*H1)`` -> ``(..., H1, W1)``."""
    w1, h1 = grid
    return values.reshape(*values.shape[:-1], h1, w1)


def param_digest(module: nn.Module, extra: Optional[dict] = None) -> str:
    h = hashlib.sha256()
    if extra is not None:
        h.update(json.dumps(extra, sort_keys=True).encode())
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ToyEncoder(nn.Module):
    """Random-initialised, frozen six-block conv stack.

    Every block is a stride-1 3x3 conv with reflect padding, ReLU and 2x2
    average pooling; pooling instead of strided convs keeps the random
    features from aliasing on periodic textures. Stage outputs for a 224
    input: 28x28x16, 14x14x32, 7x7x64 and 3x3x128, the last one
    global-average-pooled into the latent ``z``.
    """

    def __init__(self, spec: EncoderSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        c1, c2, c3, c4 = spec.layer_channels
        g = torch.Generator().manual_seed(seed)

        def conv(i, o):
            return nn.Conv2d(i, o, 3, padding=1, padding_mode="reflect")

        self.stem = nn.ModuleList([conv(3, c1), conv(c1, c1)])
        self.stage1 = conv(c1, c1)
        self.stage2 = conv(c1, c2)
        self.stage3 = conv(c2, c3)
        self.stage4 = conv(c3, c4)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    m.weight.copy_(torch.randn(m.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    @property
    def side(self) -> int:
        return self.spec.image_side

    @staticmethod
    def _block(conv: nn.Conv2d, h: torch.Tensor) -> torch.Tensor:
        return F.avg_pool2d(F.relu(conv(h)), 2)

    def forward(self, x: torch.Tensor) -> FeatureStack:
        h = x - 0.5
        for conv in self.stem:
            h = self._block(conv, h)
        f1 = self._block(self.stage1, h)
        f2 = self._block(self.stage2, f1)
        f3 = self._block(self.stage3, f2)
        f4 = self._block(self.stage4, f3)
        return FeatureStack([f1, f2, f3], f4.mean(dim=(-2, -1)))

    def train(self, mode: bool = True):
        # frozen: always stays in eval mode
        return super().train(False)

    def digest(self) -> str:
        return param_digest(self, self.spec.to_dict())


class FoundationAdapter(nn.Module):
    """Vision tower of a pretrained ALIGN checkpoint behind the toy interface.

    Taps are hidden states of the EfficientNet image tower. The latent ``z``
    is the tap-L map global-average-pooled over space (``latent_pool="mean"``)
    or max-pooled (``"max"``). Requires ``transformers`` and locally
    available weights; anything missing raises ``CapabilityError``.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        try:
            from transformers import AlignModel  # noqa: F401
        except Exception as exc:  # pragma: no cover - depends on environment
            raise CapabilityError("foundation_adapter needs the 'transformers' package") from exc
        if not spec.model_path:
            raise CapabilityError(
                "foundation_adapter needs a local ALIGN checkpoint (EncoderSpec.model_path); none configured"
            )
        try:
            model = AlignModel.from_pretrained(spec.model_path, local_files_only=True)
        except Exception as exc:
            raise CapabilityError(f"cannot load ALIGN weights from {spec.model_path}: {exc}") from exc
        self.spec = spec
        self.vision = model.vision_model
        self.text_model = model.text_model
        self.text_projection = model.text_projection
        self.requires_grad_(False)
        self.eval()
        with torch.no_grad():
            probe = self.forward(torch.zeros(1, 3, spec.image_side, spec.image_side))
        spec.layer_channels = [f.shape[1] for f in probe.layers] + [probe.z.shape[-1]]
        spec.grid = (probe.layers[0].shape[-1], probe.layers[0].shape[-2])

    @property
    def side(self) -> int:
        return self.spec.image_side

    def forward(self, x: torch.Tensor) -> FeatureStack:  # pragma: no cover - needs weights
        mean = torch.tensor([0.485, 0.456, 0.406], dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225], dtype=x.dtype).view(1, 3, 1, 1)
        out = self.vision(pixel_values=(x - mean) / std, output_hidden_states=True)
        hidden = out.hidden_states
        taps = [hidden[i] for i in self.spec.layer_ids]
        last = taps[-1]
        z = last.amax(dim=(-2, -1)) if self.spec.latent_pool == "max" else last.mean(dim=(-2, -1))
        return FeatureStack(list(taps[:-1]), z)

    def train(self, mode: bool = True):
        return super().train(False)

    def digest(self) -> str:  # pragma: no cover - needs weights
        return param_digest(self, self.spec.to_dict())


def build_encoder(spec: EncoderSpec, seed: int = 0) -> nn.Module:
    if spec.kind == "toy":
        return ToyEncoder(spec, seed)
    if spec.kind == "foundation_adapter":
        return FoundationAdapter(spec)
    raise ValueError(f"unknown encoder kind {spec.kind!r}")


def _as_batch(image) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    # accept HWC arrays from load_image
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.permute(0, 3, 1, 2)
    return x.float().contiguous(), single


@torch.no_grad()
def extract_features(image, encoder: nn.Module) -> FeatureStack:
    """Run ``encoder`` on one HxWx3 image (or a batch) and return its stack."""
    x, single = _as_batch(image)
    side = encoder.side
    if tuple(x.shape[-2:]) != (side, side) or x.shape[1] != 3:
        raise ValueError(f"expected {side}x{side}x3 input, got {tuple(x.shape)}")
    x = x.to(next(encoder.parameters()).dtype)
    stack = encoder(x)
    if not all(torch.isfinite(t).all() for t in [*stack.layers, stack.z]):
        raise FloatingPointError("encoder produced non-finite features")
    if single:
        stack = FeatureStack([f[0] for f in stack.layers], stack.z[0])
    return stack
