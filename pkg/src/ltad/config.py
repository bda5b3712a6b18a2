"""Experiment configuration: nested dataclasses with dict/JSON round-trip."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

from .encoder import EncoderSpec
from .reconstruction import RMConfig
from .splits import SplitSpec
from .synthesis import SynthesisConfig


@dataclass
class PromptConfig:
    m: int = 2
    init_word: str = "object"
    normal_prefix: str = "a"
    abnormal_prefix: str = "a broken"
    # list of [normal, abnormal] pairs; empty -> single pair above
    ensembles: list[list[str]] = field(default_factory=list)
    num_buckets: int = 4096
    text_seed: int = 0


@dataclass
class SADConfig:
    pooling: str = "max"
    tau: float = 1.0
    classifier_source: str = "text_derived"
    # keep only the anomalous-label term of the BCE (normal patches contribute nothing)
    literal_one_term: bool = False
    # divide tokens by the per-channel std of normal training tokens before projecting
    standardize: bool = True


@dataclass
class OptimConfig:
    lr: float = 1e-4
    prompt_lr: Optional[float] = None  # defaults to lr
    weight_decay: float = 1e-2
    batch_size: int = 8
    epochs_phase1: int = 100
    epochs_phase2: int = 500


@dataclass
class AblationConfig:
    disable_sad: bool = False
    disable_rm: bool = False
    # applied to the prompt bank at evaluation time; class j gets the name of class perm[j]
    shuffle_permutation: Optional[list[int]] = None


@dataclass
class ExperimentConfig:
    data_root: Optional[str] = None
    manifest_path: Optional[str] = None
    # nominal per-class counts for popularity ordering; None -> available counts
    nominal_counts: Optional[dict[str, int]] = None
    split: SplitSpec = field(default_factory=SplitSpec)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    encoder_seed: int = 0
    prompts: PromptConfig = field(default_factory=PromptConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    latent_dim: int = 128
    decoder_hidden: int = 128
    kl_weight: float = 1.0
    rm: RMConfig = field(default_factory=RMConfig)
    sad: SADConfig = field(default_factory=SADConfig)
    lambda_fusion: float = 500.0
    smooth_sigma: float = 4.0
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    ablation: AblationConfig = field(default_factory=AblationConfig)
    deterministic: bool = True

    def __post_init__(self):
        if self.ablation.disable_sad and self.ablation.disable_rm:
            raise ValueError("disable_sad and disable_rm cannot both be set")
        if self.lambda_fusion < 0:
            raise ValueError("lambda_fusion must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["grid"] = list(self.encoder.grid)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        """Apply ``{"optim.lr": 1e-3, ...}`` dotted-key overrides."""
        d = self.to_dict()
        for key, value in overrides.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise KeyError(f"unknown config section {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise KeyError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return self.from_dict(d)


def _build(cls, d):
    if not dataclasses.is_dataclass(cls):
        return d
    hints = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in d.items():
        if k not in hints:
            raise KeyError(f"unknown field {k!r} for {cls.__name__}")
        sub = _NESTED.get((cls.__name__, k))
        kwargs[k] = _build(sub, v) if sub is not None and isinstance(v, dict) else v
    return cls(**kwargs)


_NESTED = {
    ("ExperimentConfig", "split"): SplitSpec,
    ("ExperimentConfig", "encoder"): EncoderSpec,
    ("ExperimentConfig", "prompts"): PromptConfig,
    ("ExperimentConfig", "synthesis"): SynthesisConfig,
    ("ExperimentConfig", "rm"): RMConfig,
    ("ExperimentConfig", "sad"): SADConfig,
    ("ExperimentConfig", "optim"): OptimConfig,
    ("ExperimentConfig", "ablation"): AblationConfig,
}


def toy_config(**overrides) -> ExperimentConfig:
    """Desk-scale defaults for the toy encoder and the synthetic corpus."""
    cfg = ExperimentConfig(
        split=SplitSpec("exponential", 10.0, "by_popularity", 0),
        lambda_fusion=TOY_LAMBDA,
        rm=RMConfig(depth=1, width=128, heads=4),
        optim=OptimConfig(lr=1e-3, weight_decay=1e-2, batch_size=8, epochs_phase1=20, epochs_phase2=50),
    )
    return cfg.with_overrides(overrides) if overrides else cfg


def full_scale_config(dataset: str = "mvtec", model_path: Optional[str] = None) -> ExperimentConfig:
    """Full-scale defaults for a foundation-model run."""
    from .scoring import LAMBDA_DEFAULTS

    spec = EncoderSpec.foundation(model_path)
    return ExperimentConfig(
        split=SplitSpec("exponential", 100.0),
        encoder=spec,
        rm=RMConfig(depth=4, width=256, heads=8, token_dim=spec.token_dim, num_positions=spec.grid[0] * spec.grid[1]),
        latent_dim=spec.latent_dim,
        lambda_fusion=LAMBDA_DEFAULTS[dataset],
        optim=OptimConfig(lr=1e-4, epochs_phase1=100, epochs_phase2=500),
    )


# pinned from the reference desk run on the synthetic corpus
TOY_LAMBDA = 0.3
