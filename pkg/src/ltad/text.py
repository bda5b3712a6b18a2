"""Frozen text encoder, learnable pseudo class names and classifier weights."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import param_digest

# normal and abnormal prompt prefixes; the first entry of each is the default
NORMAL_PREFIXES = ("a", "a normal", "a good", "a flawless")
ABNORMAL_PREFIXES = ("a broken", "a damaged", "an abnormal", "a defective")


class ToyTokenizer:
    """Whitespace tokens hashed into a fixed number of buckets.

    Unknown words never raise: every string maps to some bucket.
    """

    def __init__(self, num_buckets: int = 4096, seed: int = 0):
        self.num_buckets = num_buckets
        self.seed = seed

    def bucket(self, word: str) -> int:
        h = hashlib.blake2b(f"{self.seed}:{word.lower()}".encode(), digest_size=8).digest()
        return int.from_bytes(h, "little") % self.num_buckets

    def __call__(self, text: str) -> list[int]:
        return [self.bucket(w) for w in text.split()]


class ToyTextEncoder(nn.Module):
    """Mean of token embeddings -> fixed linear map -> L2 normalisation.

    Mean pooling makes the encoder invariant to token order. All parameters
    are frozen; gradients still flow to embeddings passed in by the caller.
    """

    def __init__(self, dim: int = 64, num_buckets: int = 4096, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed + 7919)
        self.tokenizer = ToyTokenizer(num_buckets, seed)
        self.embedding = nn.Parameter(torch.randn(num_buckets, dim, generator=g), requires_grad=False)
        self.proj = nn.Parameter(torch.randn(dim, dim, generator=g) / dim**0.5, requires_grad=False)
        self.dim = dim
        self.token_dim = dim

    def embed(self, text: str) -> torch.Tensor:
        ids = self.tokenizer(text)
        if not ids:
            raise ValueError("cannot embed an empty string")
        return self.embedding[torch.tensor(ids)].clone()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """``tokens``: ``(n, token_dim)`` or ``(B, n, token_dim)`` -> unit vectors."""
        if tokens.shape[-2] == 0:
            raise ValueError("empty token sequence")
        pooled = tokens.mean(dim=-2)
        return F.normalize(pooled @ self.proj.to(tokens.dtype).T, dim=-1)

    def train(self, mode: bool = True):
        return super().train(False)

    def digest(self) -> str:
        return param_digest(self)


def encode_text(tokens: torch.Tensor, text_encoder: nn.Module) -> torch.Tensor:
    return text_encoder(tokens)


class PromptBank(nn.Module):
    """Per-class pseudo class names plus the static normal/abnormal prefixes."""

    def __init__(
        self,
        classes: Sequence[str],
        pseudo_names: torch.Tensor,
        normal_prefix: torch.Tensor,
        abnormal_prefix: torch.Tensor,
        init_word: str = "object",
        normal_text: str = "a",
        abnormal_text: str = "a broken",
    ):
        super().__init__()
        if pseudo_names.dim() != 3 or pseudo_names.shape[0] != len(classes):
            raise ValueError("pseudo_names must be (num_classes, m, token_dim)")
        self.classes = list(classes)
        self.pseudo_names = nn.Parameter(pseudo_names.clone())
        self.register_buffer("normal_prefix", normal_prefix.clone())
        self.register_buffer("abnormal_prefix", abnormal_prefix.clone())
        self.init_word = init_word
        self.normal_text = normal_text
        self.abnormal_text = abnormal_text

    @property
    def m(self) -> int:
        return self.pseudo_names.shape[1]

    def class_index(self, c) -> int:
        if isinstance(c, int):
            if not 0 <= c < len(self.classes):
                raise KeyError(f"class index {c} out of range")
            return c
        try:
            return self.classes.index(c)
        except ValueError:
            raise KeyError(f"unknown class {c!r}") from None

    def digest(self) -> str:
        return param_digest(self, {"classes": self.classes})

    def to_json_dict(self) -> dict:
        return {c: self.pseudo_names[i].detach().cpu().tolist() for i, c in enumerate(self.classes)}


def init_prompt_bank(
    classes: Sequence[str],
    text_encoder: ToyTextEncoder,
    init_word: str = "object",
    m: int = 2,
    normal_text: str = "a",
    abnormal_text: str = "a broken",
) -> PromptBank:
    """Every class starts from ``m`` copies of the embedding of ``init_word``."""
    if m < 1:
        raise ValueError("pseudo class name length must be >= 1")
    if not classes:
        raise ValueError("no classes")
    word = text_encoder.embed(init_word)[0]
    names = word.expand(len(classes), m, -1).clone()
    return PromptBank(
        classes,
        names,
        text_encoder.embed(normal_text),
        text_encoder.embed(abnormal_text),
        init_word=init_word,
        normal_text=normal_text,
        abnormal_text=abnormal_text,
    )


@dataclass
class ClassifierWeights:
    t_n: torch.Tensor
    t_a: torch.Tensor
    t_proto: torch.Tensor
    class_name: str


def _with_prefix(prefix: torch.Tensor, names: torch.Tensor) -> torch.Tensor:
    # names: (C, m, k) -> (C, len(prefix) + m, k)
    return torch.cat([prefix.to(names.dtype).expand(names.shape[0], -1, -1), names], dim=1)


def all_class_weights(bank: PromptBank, text_encoder: nn.Module) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(t_n, t_a, t_proto)`` for every class, each ``(C, d)``; differentiable in ``s_c``."""
    names = bank.pseudo_names
    t_n = text_encoder(_with_prefix(bank.normal_prefix, names))
    t_a = text_encoder(_with_prefix(bank.abnormal_prefix, names))
    t_proto = text_encoder(names)
    return t_n, t_a, t_proto


def derive_classifier_weights(bank: PromptBank, text_encoder: nn.Module, c) -> ClassifierWeights:
    i = bank.class_index(c)
    s = bank.pseudo_names[i]
    return ClassifierWeights(
        t_n=text_encoder(torch.cat([bank.normal_prefix.to(s.dtype), s])),
        t_a=text_encoder(torch.cat([bank.abnormal_prefix.to(s.dtype), s])),
        t_proto=text_encoder(s),
        class_name=bank.classes[i],
    )


def ensemble_prompts(
    prefix_sets: Sequence[tuple[str, str]], bank: PromptBank, text_encoder: ToyTextEncoder, c
) -> ClassifierWeights:
    """Average the text embeddings of several (normal, abnormal) prefix pairs, then renormalise."""
    if not prefix_sets:
        raise ValueError("need at least one prompt pair")
    i = bank.class_index(c)
    s = bank.pseudo_names[i]
    t_n = torch.stack([text_encoder(torch.cat([text_encoder.embed(vn).to(s.dtype), s])) for vn, _ in prefix_sets])
    t_a = torch.stack([text_encoder(torch.cat([text_encoder.embed(va).to(s.dtype), s])) for _, va in prefix_sets])
    return ClassifierWeights(
        t_n=F.normalize(t_n.mean(0), dim=-1),
        t_a=F.normalize(t_a.mean(0), dim=-1),
        t_proto=text_encoder(s),
        class_name=bank.classes[i],
    )


def ensemble_class_weights(
    prefix_sets: Sequence[tuple[str, str]], bank: PromptBank, text_encoder: ToyTextEncoder
) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched ``ensemble_prompts`` over all classes: ``(C, d)`` each."""
    names = bank.pseudo_names
    t_n = torch.stack([text_encoder(_with_prefix(text_encoder.embed(vn), names)) for vn, _ in prefix_sets])
    t_a = torch.stack([text_encoder(_with_prefix(text_encoder.embed(va), names)) for _, va in prefix_sets])
    return F.normalize(t_n.mean(0), dim=-1), F.normalize(t_a.mean(0), dim=-1)


def shuffle_pseudo_names(bank: PromptBank, permutation: Sequence[int]) -> PromptBank:
    """New bank where class ``j`` receives the pseudo name of class ``permutation[j]``.

    The permutation must be a derangement (no class keeps its own name).
    """
    perm = list(permutation)
    n = len(bank.classes)
    if sorted(perm) != list(range(n)):
        raise ValueError("not a permutation of the class indices")
    fixed = [j for j, i in enumerate(perm) if i == j]
    if fixed:
        raise ValueError(f"permutation has fixed points {fixed}")
    names = bank.pseudo_names.detach()[torch.tensor(perm)]
    return PromptBank(
        bank.classes,
        names,
        bank.normal_prefix,
        bank.abnormal_prefix,
        init_word=bank.init_word,
        normal_text=bank.normal_text,
        abnormal_text=bank.abnormal_text,
    )


def cyclic_derangement(n: int) -> list[int]:
    if n < 2:
        raise ValueError("a derangement needs at least two classes")
    return [(j + 1) % n for j in range(n)]


class FoundationTextEncoder(nn.Module):
    """Text tower of the ALIGN checkpoint configured on an ``EncoderSpec``.

    Takes prompt token embeddings ``(..., n, k)`` so that pseudo class names
    can be optimised in embedding space; needs ``transformers`` and local
    weights, otherwise raises ``CapabilityError``.
    """

    def __init__(self, spec):
        super().__init__()
        from .encoder import CapabilityError

        try:
            from transformers import AlignModel, AutoTokenizer
        except Exception as exc:  # pragma: no cover - depends on environment
            raise CapabilityError("foundation text encoder needs the 'transformers' package") from exc
        if not spec.model_path:
            raise CapabilityError("foundation text encoder needs EncoderSpec.model_path")
        try:  # pragma: no cover - needs weights
            model = AlignModel.from_pretrained(spec.model_path, local_files_only=True)
            self.tokenizer = AutoTokenizer.from_pretrained(spec.model_path, local_files_only=True)
        except Exception as exc:
            raise CapabilityError(f"cannot load ALIGN text tower from {spec.model_path}: {exc}") from exc
        self.text_model = model.text_model  # pragma: no cover
        self.text_projection = model.text_projection  # pragma: no cover
        self.dim = self.text_projection.out_features  # pragma: no cover
        self.token_dim = self.text_model.config.hidden_size  # pragma: no cover
        self.requires_grad_(False)  # pragma: no cover

    def embed(self, text: str) -> torch.Tensor:  # pragma: no cover - needs weights
        ids = self.tokenizer(text, add_special_tokens=False, return_tensors="pt").input_ids[0]
        return self.text_model.embeddings.word_embeddings(ids).detach().clone()

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:  # pragma: no cover - needs weights
        batched = tokens.dim() == 3
        x = tokens if batched else tokens.unsqueeze(0)
        out = self.text_model(inputs_embeds=x)
        feat = F.normalize(self.text_projection(out.last_hidden_state[:, 0]), dim=-1)
        return feat if batched else feat[0]

    def train(self, mode: bool = True):
        return super().train(False)

    def digest(self) -> str:  # pragma: no cover - needs weights
        return param_digest(self)
