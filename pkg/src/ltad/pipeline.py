"""Two-phase training, evaluation and heatmap export."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import file_digest, load_checkpoint, prefixed, save_checkpoint, unprefixed
from .config import ExperimentConfig
from .data import DatasetIndex, ImageRecord, load_folder_dataset, load_image, load_mask
from .encoder import FeatureStack, build_encoder, resample_and_stack, tokens_to_grid
from .reconstruction import ReconstructionModule, rec_loss, rec_score
from .scoring import AnomalyMap, EvalReport, aggregate_report, class_metrics, fuse, write_heatmap
from .semantic import (
    LearnedFreeClassifier,
    ProjectionHeads,
    TextDerivedClassifier,
    sem_logit,
    sem_loss_from_logits,
)
from .splits import SplitManifest, index_digest, sample_split
from .synthesis import (
    ChannelStats,
    FeatureDecoder,
    PosteriorHeads,
    inject_pseudo_anomaly,
    kl_divergence,
    make_synthesizer,
    phase1_loss,
    reparameterize,
    select_training_features,
)
from .text import PromptBank, ToyTextEncoder, init_prompt_bank, shuffle_pseudo_names

log = logging.getLogger(__name__)


class FrozenParameterError(RuntimeError):
    """A parameter that must stay frozen changed during training."""


def derive_seed(seed: int, tag: str) -> int:
    h = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(h[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def set_deterministic(enabled: bool = True) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------
# feature extraction

@dataclass
class FeatureSet:
    ids: list[str]
    class_idx: torch.Tensor
    layers: list[torch.Tensor]  # each (N, C_l, H_l, W_l)
    z: torch.Tensor

    def __len__(self) -> int:
        return len(self.ids)

    def stack(self, rows) -> FeatureStack:
        return FeatureStack([f[rows] for f in self.layers], self.z[rows])


_FEATURE_CACHE: dict[tuple, FeatureStack] = {}


def _cache_key(digest: str, path: str, side: int) -> tuple:
    st = Path(path).stat()
    return (digest, path, st.st_mtime_ns, st.st_size, side)


def clear_feature_cache() -> None:
    _FEATURE_CACHE.clear()


@torch.no_grad()
def encode_records(records: Sequence[ImageRecord], encoder, classes: Sequence[str], batch_size: int = 16) -> FeatureSet:
    """Frozen-encoder features for ``records``; cached in-process by encoder digest and file stat."""
    digest = encoder.digest()
    side = encoder.side
    out: list[Optional[FeatureStack]] = [None] * len(records)
    todo = []
    for i, r in enumerate(records):
        hit = _FEATURE_CACHE.get(_cache_key(digest, r.path, side))
        if hit is None:
            todo.append(i)
        else:
            out[i] = hit
    for s in range(0, len(todo), batch_size):
        chunk = todo[s : s + batch_size]
        imgs = np.stack([load_image(records[i], side) for i in chunk])
        x = torch.from_numpy(imgs).permute(0, 3, 1, 2).contiguous()
        stack = encoder(x)
        for j, i in enumerate(chunk):
            item = FeatureStack([f[j].clone() for f in stack.layers], stack.z[j].clone())
            _FEATURE_CACHE[_cache_key(digest, records[i].path, side)] = item
            out[i] = item
    layers = [torch.stack([o.layers[l] for o in out]) for l in range(len(out[0].layers))] if out else []
    return FeatureSet(
        ids=[r.id for r in records],
        class_idx=torch.tensor([list(classes).index(r.class_name) for r in records], dtype=torch.long),
        layers=layers,
        z=torch.stack([o.z for o in out]) if out else torch.empty(0),
    )


# --------------------------------------------------------------------------
# shared setup

@dataclass
class Models:
    cfg: ExperimentConfig
    classes: list[str]
    encoder: torch.nn.Module
    text_encoder: ToyTextEncoder
    bank: PromptBank
    heads: Optional[PosteriorHeads] = None
    decoder: Optional[FeatureDecoder] = None
    channel_mean: Optional[torch.Tensor] = None
    channel_std: Optional[torch.Tensor] = None
    rm: Optional[ReconstructionModule] = None
    sad: Optional[ProjectionHeads] = None
    learned_classifier: Optional[LearnedFreeClassifier] = None
    kept_counts: dict[str, int] = field(default_factory=dict)

    def classifier(self, bank: Optional[PromptBank] = None):
        if self.learned_classifier is not None:
            return self.learned_classifier
        prefix_sets = [tuple(p) for p in self.cfg.prompts.ensembles] or None
        return TextDerivedClassifier(bank or self.bank, self.text_encoder, prefix_sets)


def build_text_encoder(cfg: ExperimentConfig) -> ToyTextEncoder:
    if cfg.encoder.kind != "toy":
        from .text import FoundationTextEncoder

        return FoundationTextEncoder(cfg.encoder)
    return ToyTextEncoder(cfg.encoder.text_dim, cfg.prompts.num_buckets, cfg.prompts.text_seed)


def resolve_dataset(cfg: ExperimentConfig, index: Optional[DatasetIndex] = None) -> DatasetIndex:
    if index is not None:
        return index
    if not cfg.data_root:
        raise ValueError("config has no data_root")
    return load_folder_dataset(cfg.data_root)


def resolve_manifest(cfg: ExperimentConfig, index: DatasetIndex, manifest: Optional[SplitManifest] = None) -> SplitManifest:
    if manifest is None:
        if cfg.manifest_path:
            manifest = SplitManifest.load(cfg.manifest_path)
        else:
            manifest = sample_split(index, cfg.split, cfg.nominal_counts)
    expected = index_digest({c: [r.id for r in index.train_normals[c]] for c in index.classes})
    if manifest.source_digest != expected:
        raise ValueError("manifest was built from a different dataset index")
    unknown = set(manifest.classes) - set(index.classes)
    if unknown:
        raise ValueError(f"manifest classes missing from dataset: {sorted(unknown)}")
    return manifest


def training_records(index: DatasetIndex, manifest: SplitManifest) -> list[ImageRecord]:
    lookup = index.train_lookup()
    return [lookup[i] for c in index.classes for i in manifest.per_class_samples.get(c, [])]


def _layer_shapes(features: FeatureSet) -> list[tuple[int, int, int]]:
    return [tuple(f.shape[1:]) for f in features.layers]


def _write_curve(path: Path, losses: Sequence[float], name: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", name])
        for e, v in enumerate(losses, 1):
            w.writerow([e, repr(float(v))])


def _check_frozen(before: dict[str, str], models: Models, include_bank: bool) -> None:
    now = {"encoder": models.encoder.digest(), "text_encoder": models.text_encoder.digest()}
    if include_bank:
        now["bank"] = models.bank.digest()
    for k, v in now.items():
        if before[k] != v:
            raise FrozenParameterError(f"{k} parameters changed during training")


# --------------------------------------------------------------------------
# phase 1

@dataclass
class PhaseResult:
    models: Models
    manifest: SplitManifest
    losses: list[float]
    digests: dict[str, str]
    checkpoint_path: Optional[Path] = None
    checkpoint_digest: Optional[str] = None


def run_phase1(
    cfg: ExperimentConfig,
    out_dir=None,
    index: Optional[DatasetIndex] = None,
    manifest: Optional[SplitManifest] = None,
) -> PhaseResult:
    """Train the posterior heads, feature decoder and pseudo class names."""
    set_deterministic(cfg.deterministic)
    index = resolve_dataset(cfg, index)
    manifest = resolve_manifest(cfg, index, manifest)
    classes = list(index.classes)

    encoder = build_encoder(cfg.encoder, cfg.encoder_seed)
    text_encoder = build_text_encoder(cfg)
    records = training_records(index, manifest)
    feats = encode_records(records, encoder, classes)

    torch.manual_seed(derive_seed(cfg.seed, "phase1-init"))
    pc = cfg.prompts
    bank = init_prompt_bank(classes, text_encoder, pc.init_word, pc.m, pc.normal_prefix, pc.abnormal_prefix)
    heads = PosteriorHeads(feats.z.shape[1], cfg.latent_dim)
    decoder = FeatureDecoder(cfg.latent_dim, text_encoder.dim, _layer_shapes(feats), cfg.decoder_hidden)
    models = Models(cfg, classes, encoder, text_encoder, bank, heads, decoder, kept_counts=manifest.kept_counts())

    frozen = {"encoder": encoder.digest(), "text_encoder": text_encoder.digest()}
    bank_init = bank.digest()

    oc = cfg.optim
    opt = torch.optim.AdamW(
        [
            {"params": [*heads.parameters(), *decoder.parameters()], "lr": oc.lr},
            {"params": [bank.pseudo_names], "lr": oc.prompt_lr or oc.lr},
        ],
        weight_decay=oc.weight_decay,
    )
    g = torch.Generator().manual_seed(derive_seed(cfg.seed, "phase1-draws"))
    n = len(feats)
    losses = []
    for epoch in range(oc.epochs_phase1):
        order = torch.randperm(n, generator=g)
        total, count = 0.0, 0
        for s in range(0, n, oc.batch_size):
            rows = order[s : s + oc.batch_size]
            real = feats.stack(rows)
            t_proto = text_encoder(bank.pseudo_names)[feats.class_idx[rows]]
            post = heads(real.z)
            eps = torch.randn(post.mu.shape, generator=g)
            syn = decoder(reparameterize(post, eps), t_proto)
            loss = phase1_loss(syn, real.layers, post, cfg.kl_weight)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(rows)
            count += len(rows)
        losses.append(total / count)
        log.info("phase1 epoch %d loss %.5f", epoch + 1, losses[-1])
    _check_frozen(frozen, models, include_bank=False)

    stats = ChannelStats(sum(f.shape[1] for f in feats.layers))
    for s in range(0, n, 32):
        stats.update(resample_and_stack(feats.stack(torch.arange(s, min(n, s + 32)))).tokens)
    models.channel_mean = stats.mean.to(torch.float32)
    models.channel_std = stats.std.to(torch.float32)

    digests = {
        **frozen,
        "manifest": manifest.digest(),
        "bank_init": bank_init,
        "bank": bank.digest(),
        "config": cfg.digest(),
    }
    result = PhaseResult(models, manifest, losses, digests)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        manifest.save(out / "manifest.json")
        _write_curve(out / "phase1_loss.csv", losses, "loss")
        path = out / "phase1.ckpt"
        result.checkpoint_digest = save_checkpoint(path, _phase1_tensors(models), _meta(models, "phase1", digests, losses, manifest))
        result.checkpoint_path = path
    return result


def _phase1_tensors(m: Models) -> dict[str, torch.Tensor]:
    t = {}
    t.update(prefixed("bank", m.bank.state_dict()))
    if m.heads is not None:
        t.update(prefixed("heads", m.heads.state_dict()))
        t.update(prefixed("decoder", m.decoder.state_dict()))
    if m.channel_std is not None:
        t["channel_mean"] = m.channel_mean
        t["channel_std"] = m.channel_std
    return t


def _meta(m: Models, kind: str, digests, losses, manifest: SplitManifest) -> dict:
    return {
        "kind": kind,
        "config": m.cfg.to_dict(),
        "classes": m.classes,
        "digests": dict(digests),
        "losses": [float(v) for v in losses],
        "manifest": manifest.to_json(),
        "layer_shapes": [list(s) for s in m.decoder.layer_shapes] if m.decoder is not None else None,
        "has_synthesis": m.heads is not None,
    }


def load_phase1(path, cfg: Optional[ExperimentConfig] = None) -> PhaseResult:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") not in ("phase1", "phase2"):
        raise ValueError(f"{path} is not a phase-1 checkpoint")
    return _restore(tensors, meta, cfg, path)


def _restore(tensors, meta, cfg: Optional[ExperimentConfig], path) -> PhaseResult:
    stored_cfg = ExperimentConfig.from_dict(meta["config"])
    cfg = cfg or stored_cfg
    if cfg.encoder.to_dict() != stored_cfg.encoder.to_dict() or cfg.encoder_seed != stored_cfg.encoder_seed:
        raise ValueError("checkpoint was trained with a different encoder spec")
    encoder = build_encoder(cfg.encoder, cfg.encoder_seed)
    if encoder.digest() != meta["digests"]["encoder"]:
        raise ValueError("encoder digest mismatch: refusing to load checkpoint")
    text_encoder = build_text_encoder(stored_cfg)
    if text_encoder.digest() != meta["digests"]["text_encoder"]:
        raise ValueError("text encoder digest mismatch: refusing to load checkpoint")
    classes = list(meta["classes"])
    bank_state = unprefixed("bank", tensors)
    pc = stored_cfg.prompts
    bank = PromptBank(
        classes, bank_state["pseudo_names"], bank_state["normal_prefix"], bank_state["abnormal_prefix"],
        pc.init_word, pc.normal_prefix, pc.abnormal_prefix,
    )
    manifest = SplitManifest.from_json(meta["manifest"])
    models = Models(cfg, classes, encoder, text_encoder, bank, kept_counts=manifest.kept_counts())
    if meta.get("has_synthesis"):
        shapes = [tuple(s) for s in meta["layer_shapes"]]
        models.heads = PosteriorHeads(cfg.encoder.latent_dim, stored_cfg.latent_dim)
        models.heads.load_state_dict(unprefixed("heads", tensors))
        models.decoder = FeatureDecoder(stored_cfg.latent_dim, text_encoder.dim, shapes, stored_cfg.decoder_hidden)
        models.decoder.load_state_dict(unprefixed("decoder", tensors))
    if "channel_std" in tensors:
        models.channel_mean = tensors["channel_mean"]
        models.channel_std = tensors["channel_std"]
    if "rm.pos" in tensors:
        models.rm = ReconstructionModule(_rm_config(stored_cfg))
        models.rm.load_state_dict(unprefixed("rm", tensors))
        models.rm.eval()
    if any(k.startswith("sad.") for k in tensors):
        models.sad = _sad_heads(stored_cfg)
        models.sad.load_state_dict(unprefixed("sad", tensors))
    if any(k.startswith("clf.") for k in tensors):
        models.learned_classifier = LearnedFreeClassifier(len(classes), text_encoder.dim)
        models.learned_classifier.load_state_dict(unprefixed("clf", tensors))
    return PhaseResult(models, manifest, list(meta["losses"]), dict(meta["digests"]), Path(path), file_digest(path))


# --------------------------------------------------------------------------
# phase 2

def _rm_config(cfg: ExperimentConfig):
    spec = cfg.encoder
    return dataclasses.replace(cfg.rm, token_dim=spec.token_dim, num_positions=spec.grid[0] * spec.grid[1])


def _sad_heads(cfg: ExperimentConfig) -> ProjectionHeads:
    return ProjectionHeads(cfg.encoder.layer_channels[:-1], cfg.encoder.text_dim, cfg.sad.pooling, cfg.sad.tau)


def _bootstrap_phase1(cfg: ExperimentConfig, index: DatasetIndex, manifest: SplitManifest) -> PhaseResult:
    """Prompt bank and channel statistics without a trained decoder (no synthesis)."""
    classes = list(index.classes)
    encoder = build_encoder(cfg.encoder, cfg.encoder_seed)
    text_encoder = build_text_encoder(cfg)
    pc = cfg.prompts
    bank = init_prompt_bank(classes, text_encoder, pc.init_word, pc.m, pc.normal_prefix, pc.abnormal_prefix)
    feats = encode_records(training_records(index, manifest), encoder, classes)
    stats = ChannelStats(sum(f.shape[1] for f in feats.layers))
    stats.update(resample_and_stack(feats.stack(torch.arange(len(feats)))).tokens)
    models = Models(cfg, classes, encoder, text_encoder, bank, channel_mean=stats.mean.float(), channel_std=stats.std.float(), kept_counts=manifest.kept_counts())
    digests = {"encoder": encoder.digest(), "text_encoder": text_encoder.digest(), "manifest": manifest.digest(),
               "bank_init": bank.digest(), "bank": bank.digest(), "config": cfg.digest()}
    return PhaseResult(models, manifest, [], digests)


def run_phase2(
    cfg: ExperimentConfig,
    phase1=None,
    out_dir=None,
    index: Optional[DatasetIndex] = None,
) -> PhaseResult:
    """Train the reconstruction module and the semantic projections.

    ``phase1`` is a ``PhaseResult`` or a checkpoint path. It may be omitted
    only when synthesis is off (``p_real == 1`` without DAS).
    """
    set_deterministic(cfg.deterministic)
    index = resolve_dataset(cfg, index)
    synthesis_on = cfg.synthesis.das_enabled or cfg.synthesis.p_real < 1.0
    if phase1 is None:
        if synthesis_on:
            raise ValueError("feature synthesis is enabled but no phase-1 checkpoint was given")
        p1 = _bootstrap_phase1(cfg, index, resolve_manifest(cfg, index))
    elif isinstance(phase1, PhaseResult):
        p1 = phase1
    else:
        p1 = load_phase1(phase1, cfg)
    if synthesis_on and p1.models.decoder is None:
        raise ValueError("feature synthesis is enabled but the phase-1 result has no decoder")

    manifest = p1.manifest
    m = p1.models
    m.cfg = cfg
    classes = m.classes
    feats = encode_records(training_records(index, manifest), m.encoder, classes)
    ab = cfg.ablation

    torch.manual_seed(derive_seed(cfg.seed, "phase2-rm-init"))
    m.rm = None if ab.disable_rm else ReconstructionModule(_rm_config(cfg))
    if m.rm is not None:
        m.rm.set_token_stats(m.channel_mean, m.channel_std)
    torch.manual_seed(derive_seed(cfg.seed, "phase2-sad-init"))
    m.sad = None if ab.disable_sad else _sad_heads(cfg)
    if m.sad is not None and cfg.sad.standardize:
        m.sad.set_input_scale(m.channel_std)
    m.learned_classifier = None
    if not ab.disable_sad and cfg.sad.classifier_source == "learned_free":
        m.learned_classifier = LearnedFreeClassifier(len(classes), m.text_encoder.dim, derive_seed(cfg.seed, "clf"))
    elif cfg.sad.classifier_source not in ("text_derived", "learned_free"):
        raise ValueError(f"unknown classifier source {cfg.sad.classifier_source!r}")

    for module in (m.bank, m.heads, m.decoder):
        if module is not None:
            module.requires_grad_(False)
    frozen = {"encoder": m.encoder.digest(), "text_encoder": m.text_encoder.digest(), "bank": m.bank.digest()}

    params = []
    for module in (m.rm, m.sad, m.learned_classifier):
        if module is not None:
            params += list(module.parameters())
    oc = cfg.optim
    opt = torch.optim.AdamW(params, lr=oc.lr, weight_decay=oc.weight_decay)

    g_order = torch.Generator().manual_seed(derive_seed(cfg.seed, "phase2-order"))
    g_select = torch.Generator().manual_seed(derive_seed(cfg.seed, "phase2-select"))
    g_synth = torch.Generator().manual_seed(derive_seed(cfg.seed, "phase2-synth"))
    g_noise = torch.Generator().manual_seed(derive_seed(cfg.seed, "phase2-noise"))

    with torch.no_grad():
        t_proto = m.text_encoder(m.bank.pseudo_names) if m.decoder is not None else None
    counts = m.kept_counts
    n_max = max(counts.values())
    p_real = {c: cfg.synthesis.real_probability(counts.get(c, n_max), n_max) for c in classes}
    if not synthesis_on:
        p_real = {c: 1.0 for c in classes}
    classifier = m.classifier()
    if m.rm is not None:
        m.rm.train()

    n = len(feats)
    losses = []
    for epoch in range(oc.epochs_phase2):
        order = torch.randperm(n, generator=g_order)
        total, count = 0.0, 0
        for s in range(0, n, oc.batch_size):
            rows = order[s : s + oc.batch_size]
            cls = feats.class_idx[rows]
            chosen = [[] for _ in feats.layers]
            for r, c in zip(rows.tolist(), cls.tolist()):
                real = [f[r] for f in feats.layers]
                synth = (
                    make_synthesizer(m.heads, m.decoder, feats.z[r], t_proto[c], g_synth)
                    if m.decoder is not None
                    else None
                )
                picked, _ = select_training_features(real, synth, p_real[classes[c]], g_select)
                for l, f in enumerate(picked):
                    chosen[l].append(f)
            stack = FeatureStack([torch.stack(ch) for ch in chosen], feats.z[rows])
            p_n = resample_and_stack(stack).tokens
            p_a = inject_pseudo_anomaly(p_n, m.channel_std, cfg.synthesis.noise_std, g_noise)

            loss = p_n.new_zeros(())
            if m.rm is not None:
                loss = loss + rec_loss(m.rm(p_a), p_n)
            if m.sad is not None:
                if isinstance(classifier, TextDerivedClassifier):
                    with torch.no_grad():
                        t_n, t_a = classifier()
                else:
                    t_n, t_a = classifier()
                logits = torch.cat(
                    [
                        sem_logit(m.sad(p_n), t_n[cls][:, None], t_a[cls][:, None], cfg.sad.tau),
                        sem_logit(m.sad(p_a), t_n[cls][:, None], t_a[cls][:, None], cfg.sad.tau),
                    ],
                    dim=1,
                )
                labels = torch.cat([torch.zeros_like(logits[:, : p_n.shape[1]]), torch.ones_like(logits[:, p_n.shape[1] :])], dim=1)
                loss = loss + sem_loss_from_logits(logits, labels, cfg.sad.literal_one_term)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(rows)
            count += len(rows)
        losses.append(total / count)
        log.info("phase2 epoch %d loss %.5f", epoch + 1, losses[-1])
    _check_frozen(frozen, m, include_bank=True)
    if m.rm is not None:
        m.rm.eval()

    digests = {**p1.digests, **frozen, "config": cfg.digest()}
    if p1.checkpoint_digest:
        digests["phase1_checkpoint"] = p1.checkpoint_digest
    result = PhaseResult(m, manifest, losses, digests)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_curve(out / "phase2_loss.csv", losses, "loss")
        path = out / "phase2.ckpt"
        result.checkpoint_digest = save_checkpoint(path, _phase2_tensors(m), _meta(m, "phase2", digests, losses, manifest))
        result.checkpoint_path = path
    return result


def _phase2_tensors(m: Models) -> dict[str, torch.Tensor]:
    t = _phase1_tensors(m)
    if m.rm is not None:
        t.update(prefixed("rm", m.rm.state_dict()))
    if m.sad is not None:
        t.update(prefixed("sad", m.sad.state_dict()))
    if m.learned_classifier is not None:
        t.update(prefixed("clf", m.learned_classifier.state_dict()))
    return t


def load_phase2(path) -> PhaseResult:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "phase2":
        raise ValueError(f"{path} is not a phase-2 checkpoint")
    return _restore(tensors, meta, None, path)


# --------------------------------------------------------------------------
# evaluation

@dataclass
class PatchScores:
    """Per-image reconstruction and semantic score grids, fused later."""
    s_rec: dict[str, np.ndarray]
    s_sem: dict[str, np.ndarray]


@torch.no_grad()
def compute_patch_scores(
    models: Models,
    records: Sequence[ImageRecord],
    shuffle_permutation: Optional[Sequence[int]] = None,
    batch_size: int = 8,
) -> PatchScores:
    """S_rec and S_sem on the patch grid for each record; no noise is injected."""
    m = models
    cfg = m.cfg
    feats = encode_records(records, m.encoder, m.classes)
    grid = cfg.encoder.grid
    t_n = t_a = None
    if m.sad is not None:
        if m.learned_classifier is not None:
            t_n, t_a = m.learned_classifier()
            if shuffle_permutation is not None:
                t_n, t_a = t_n[list(shuffle_permutation)], t_a[list(shuffle_permutation)]
        else:
            bank = shuffle_pseudo_names(m.bank, shuffle_permutation) if shuffle_permutation is not None else m.bank
            t_n, t_a = m.classifier(bank)()
    if m.rm is not None:
        m.rm.eval()
    s_rec, s_sem = {}, {}
    n = len(feats)
    for s in range(0, n, batch_size):
        rows = torch.arange(s, min(n, s + batch_size))
        tokens = resample_and_stack(feats.stack(rows)).tokens
        cls = feats.class_idx[rows]
        rec = rec_score(tokens, m.rm(tokens)) if m.rm is not None else torch.zeros(tokens.shape[:2])
        if m.sad is not None:
            logit = sem_logit(m.sad(tokens), t_n[cls][:, None], t_a[cls][:, None], cfg.sad.tau)
            sem = torch.sigmoid(logit)
        else:
            sem = torch.zeros(tokens.shape[:2])
        rec_g = tokens_to_grid(rec, grid).double().numpy()
        sem_g = tokens_to_grid(sem, grid).double().numpy()
        for j, r in enumerate(rows.tolist()):
            s_rec[feats.ids[r]] = rec_g[j]
            s_sem[feats.ids[r]] = sem_g[j]
    return PatchScores(s_rec, s_sem)


def anomaly_maps(scores: PatchScores, records: Sequence[ImageRecord], lam: float, side: int, smooth_sigma: float) -> dict[str, AnomalyMap]:
    return {
        r.id: AnomalyMap.from_patches(fuse(scores.s_rec[r.id], scores.s_sem[r.id], lam), (side, side), smooth_sigma)
        for r in records
    }


def report_from_scores(
    scores: PatchScores,
    index: DatasetIndex,
    manifest: SplitManifest,
    lam: float,
    side: int = 224,
    smooth_sigma: float = 4.0,
    digests: Optional[dict] = None,
) -> EvalReport:
    per_class = {}
    for c in manifest.classes:
        recs = index.test_samples.get(c, [])
        maps = anomaly_maps(scores, recs, lam, side, smooth_sigma)
        per_class[c] = class_metrics(
            [maps[r.id].image_score for r in recs],
            [r.is_anomalous for r in recs],
            [maps[r.id].pixel_map for r in recs],
            [load_mask(r, side) for r in recs],
            class_name=c,
        )
    return aggregate_report(per_class, manifest, digests)


def evaluate(
    phase2,
    index: Optional[DatasetIndex] = None,
    cfg: Optional[ExperimentConfig] = None,
    out_path=None,
    shuffle_permutation: Optional[Sequence[int]] = None,
    lam: Optional[float] = None,
    scores: Optional[PatchScores] = None,
) -> EvalReport:
    """Score every test image and aggregate per-class AUROCs into a report.

    ``phase2`` is a ``PhaseResult`` or a checkpoint path. ``cfg`` defaults
    to the stored config; its ``ablation.shuffle_permutation`` applies
    unless ``shuffle_permutation`` is given.
    """
    p2 = phase2 if isinstance(phase2, PhaseResult) else load_phase2(phase2)
    m = p2.models
    cfg = cfg or m.cfg
    m.cfg = cfg
    index = resolve_dataset(cfg, index)
    missing = [c for c in index.classes if c in p2.manifest.classes and c not in m.bank.classes]
    if missing:
        raise KeyError(f"test classes absent from the prompt bank: {missing}")
    perm = shuffle_permutation if shuffle_permutation is not None else cfg.ablation.shuffle_permutation
    records = [r for c in p2.manifest.classes for r in index.test_samples.get(c, [])]
    if scores is None:
        scores = compute_patch_scores(m, records, perm)
    lam = cfg.lambda_fusion if lam is None else lam
    if cfg.ablation.disable_rm:
        # semantic score alone; lambda only rescales, which AUROC ignores
        lam = max(lam, 1.0)
    digests = {
        "manifest": p2.manifest.digest(),
        "dataset": index.digest(),
        "encoder": p2.digests.get("encoder", ""),
    }
    if p2.checkpoint_digest:
        digests["checkpoint"] = p2.checkpoint_digest
    report = report_from_scores(scores, index, p2.manifest, lam, cfg.encoder.image_side, cfg.smooth_sigma, digests)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(report.to_json())
    return report


def export_heatmaps(phase2, index: Optional[DatasetIndex], out_dir, cfg: Optional[ExperimentConfig] = None) -> list[Path]:
    """Write ``heatmaps/<id>.png`` (+ JSON range sidecar) and ``overlays/<id>.png`` per test image."""
    p2 = phase2 if isinstance(phase2, PhaseResult) else load_phase2(phase2)
    m = p2.models
    cfg = cfg or m.cfg
    index = resolve_dataset(cfg, index)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write heatmaps to {out}: {exc}") from exc
    records = [r for c in p2.manifest.classes for r in index.test_samples.get(c, [])]
    scores = compute_patch_scores(m, records, cfg.ablation.shuffle_permutation)
    side = cfg.encoder.image_side
    maps = anomaly_maps(scores, records, cfg.lambda_fusion, side, cfg.smooth_sigma)
    written = []
    for r in records:
        heat = out / "heatmaps" / f"{r.id}.png"
        write_heatmap(maps[r.id].pixel_map, heat, out / "overlays" / f"{r.id}.png", load_image(r, side), load_mask(r, side))
        written.append(heat)
    return written
