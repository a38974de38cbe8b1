"""Training loop, configuration, checkpointing, and the ablation grid runner."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .corpus import Corpus, CorpusHeader
from .decoder import CaptionDecoder, DecoderInputError
from .encoders import InputError, PoolingHeadConfig, TextEncoder, VideoEncoder
from .evaluation import retrieval_metrics
from .objectives import (MemoryBank, combined_loss, cross_captioning_loss,
                         infonce_contrastive, similarity_matrix,
                         support_weights, triplet_contrastive)

CKPT_MAGIC = b"SSETCKPT"
CKPT_VERSION = 1


class ConfigError(ValueError):
    """An invalid or inconsistent training configuration."""


class DivergenceError(RuntimeError):
    """A loss term became non-finite during training."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated, or incompatible."""


@dataclass
class TrainConfig:
    """Every training tunable; numeric defaults follow the reference recipe."""

    margin: float = 0.2
    temperature: float = 0.1
    lam: float = 10.0
    learning_rate: float = 5e-5
    grad_clip_norm: float = 0.2
    dropout: float = 0.3
    batch_size: int = 16
    epochs: int = 20
    variant: str = "cross"             # none | identity | full | hybrid | cross
    support_source: str = "batch"      # batch | memory_bank
    memory_bank_capacity: int = 0
    contrastive: str = "triplet"       # triplet | infonce | none
    contrastive_mode: str = "inter"    # inter | inter+intra
    pooling: str = "transformer"       # transformer | mean | max
    embed_dim: int = 64
    num_heads: int = 4
    ffn_hidden: int = 128
    num_layers: int = 2
    conv_kernel_sizes: list = field(default_factory=lambda: [2, 3, 4, 6])
    norm: str = "batch"                # batch | layer
    support_sim: str = "cosine"        # cosine | dot
    mix_level: str = "pooled"          # pooled | sequence
    tie_embeddings: bool = False
    holdout_fraction: float = 0.1
    eval_ks: list = field(default_factory=lambda: [1, 5, 10])
    seed: int = 0

    def validate(self):
        if self.variant not in ("none", "identity", "full", "hybrid", "cross"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.support_source not in ("batch", "memory_bank"):
            raise ConfigError(f"unknown support_source {self.support_source!r}")
        if self.contrastive not in ("triplet", "infonce", "none"):
            raise ConfigError(f"unknown contrastive {self.contrastive!r}")
        if self.contrastive_mode not in ("inter", "inter+intra"):
            raise ConfigError(f"unknown contrastive_mode {self.contrastive_mode!r}")
        if self.pooling not in ("transformer", "mean", "max"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.mix_level not in ("pooled", "sequence"):
            raise ConfigError(f"unknown mix_level {self.mix_level!r}")
        if self.support_sim not in ("cosine", "dot"):
            raise ConfigError(f"unknown support_sim {self.support_sim!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.contrastive != "none" and self.batch_size < 2:
            raise ConfigError("a contrastive loss needs batch_size >= 2")
        if (self.variant == "cross" and self.support_source == "batch"
                and self.batch_size < 2):
            raise ConfigError("cross variant with batch support needs batch_size >= 2 "
                              "(support set would be empty)")
        if self.support_source == "memory_bank" and self.memory_bank_capacity <= 0:
            raise ConfigError("memory_bank support needs a positive memory_bank_capacity")
        if self.support_source == "memory_bank" and self.mix_level == "sequence":
            raise ConfigError("memory_bank support stores pooled conditioning vectors; "
                              "mix_level must be 'pooled'")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in [0, 1)")
        try:
            PoolingHeadConfig(
                embed_dim=self.embed_dim, num_heads=self.num_heads,
                ffn_hidden=self.ffn_hidden, num_layers=self.num_layers,
                conv_kernel_sizes=tuple(self.conv_kernel_sizes),
                dropout=self.dropout, norm=self.norm).validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def replace(self, **overrides):
        unknown = set(overrides) - set(self.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a JSON object")
    cfg = TrainConfig.from_dict(data)
    cfg.validate()
    return cfg


def batch_tensors(samples):
    """Stack corpus samples into model inputs.

    Returns (features, video_mask, tokens, text_mask, true_len, class_ids).
    """
    feats = torch.tensor(
        np.stack([s.video_features for s in samples]), dtype=torch.float32)
    B, M, _ = feats.shape
    vmask = torch.ones(B, M, dtype=torch.bool)
    tokens = torch.tensor([s.caption_tokens for s in samples], dtype=torch.long)
    lens = torch.tensor([s.caption_true_len for s in samples], dtype=torch.long)
    positions = torch.arange(tokens.shape[1]).unsqueeze(0)
    tmask = positions < lens.unsqueeze(1)
    class_ids = torch.tensor([s.class_id for s in samples], dtype=torch.long)
    return feats, vmask, tokens, tmask, lens, class_ids


class JointModel(nn.Module):
    """Video encoder, text encoder, and caption decoder sharing one config."""

    def __init__(self, config: TrainConfig, header: CorpusHeader):
        super().__init__()
        config.validate()
        head_cfg = PoolingHeadConfig(
            embed_dim=config.embed_dim, num_heads=config.num_heads,
            ffn_hidden=config.ffn_hidden, num_layers=config.num_layers,
            conv_kernel_sizes=tuple(config.conv_kernel_sizes),
            dropout=config.dropout, norm=config.norm)
        self.video_encoder = VideoEncoder(header.feature_dim, head_cfg, config.pooling)
        self.text_encoder = TextEncoder(header.vocab_size, head_cfg, config.pooling)
        self.decoder = CaptionDecoder(
            header.vocab_size, config.embed_dim, max_len=header.caption_len_max,
            num_heads=config.num_heads, dropout=config.dropout,
            embedding=self.text_encoder.embedding if config.tie_embeddings else None)


def stratified_split(corpus: Corpus, fraction: float, seed: int):
    """Class-stratified (train, holdout) index split, deterministic in the seed."""
    rng = np.random.default_rng(seed + 0x5eed)
    by_class = {}
    for idx, s in enumerate(corpus.samples):
        by_class.setdefault(s.class_id, []).append(idx)
    train, holdout = [], []
    for cid in sorted(by_class):
        members = by_class[cid]
        k = int(len(members) * fraction)
        perm = rng.permutation(len(members))
        held = {members[p] for p in perm[:k]}
        for idx in members:
            (holdout if idx in held else train).append(idx)
    return sorted(train), sorted(holdout)


@dataclass
class EpochStats:
    epoch: int
    contrast: float
    caption: float
    total: float
    grad_norm_max: float
    retrieval: dict | None = None  # direction -> {recall_at, median_rank}

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class TrainReport:
    seed: int
    config_hash: str
    config: dict
    epochs: list = field(default_factory=list)
    final_retrieval: dict | None = None
    wall_clock_sec: float = 0.0

    def to_dict(self):
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": self.config,
            "epochs": [e.to_dict() if isinstance(e, EpochStats) else e for e in self.epochs],
            "final_retrieval": self.final_retrieval,
            "wall_clock_sec": self.wall_clock_sec,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _retrieval_summary(model, samples, ks):
    model.eval()
    with torch.no_grad():
        feats, vmask, tokens, tmask, _, _ = batch_tensors(samples)
        _, c_v, _ = model.video_encoder(feats, vmask)
        _, c_t, _ = model.text_encoder(tokens, tmask)
        sim = similarity_matrix(c_t, c_v)
    results = retrieval_metrics(sim, ks=ks)
    return {
        direction: {"recall_at": {str(k): v for k, v in res.recall_at.items()},
                    "median_rank": res.median_rank}
        for direction, res in results.items()
    }


def _check_finite(value, name, epoch, step):
    if not bool(torch.isfinite(torch.as_tensor(value)).all()):
        raise DivergenceError(
            f"{name} became non-finite at epoch {epoch}, step {step}")


def _forward_losses(model, config, batch, bank):
    """One batch's loss breakdown; shared by training and gradient checking."""
    feats, vmask, tokens, tmask, lens, _ = (
        batch if isinstance(batch, tuple) else batch_tensors(batch))
    e_v, c_v, cond_v = model.video_encoder(feats, vmask)
    e_t, c_t, _ = model.text_encoder(tokens, tmask)

    zero = torch.zeros((), dtype=c_v.dtype)
    if config.contrastive == "none":
        contrast = zero
    else:
        sim = similarity_matrix(c_t, c_v)
        if config.contrastive == "triplet":
            contrast = triplet_contrastive(sim, margin=config.margin)
        else:
            kwargs = {}
            if config.contrastive_mode == "inter+intra":
                kwargs = {"sim_tt": similarity_matrix(c_t, c_t),
                          "sim_vv": similarity_matrix(c_v, c_v)}
            contrast = infonce_contrastive(
                sim, config.temperature, mode=config.contrastive_mode, **kwargs)

    if config.variant == "none":
        caption = zero
    else:
        if config.mix_level == "sequence":
            # mix full intermediate sequences framewise, then average over valid frames
            pool_cond = (e_v * vmask.unsqueeze(-1).to(e_v.dtype)).sum(1) \
                / vmask.sum(1, keepdim=True).to(e_v.dtype)
        else:
            pool_cond = cond_v
        pool_joint = c_v
        if bank is not None:
            pool_joint, pool_cond = bank.pool(c_v, pool_cond)
        w = support_weights(c_t, pool_joint, config.variant, config.temperature,
                            sim=config.support_sim)
        caption = cross_captioning_loss(model.decoder, tokens, lens, w, pool_cond)

    breakdown = combined_loss(contrast, caption, config.lam, margin=config.margin)
    return breakdown, c_v, cond_v


def _scalar(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def _clip_grad_norm(parameters, max_norm):
    """Global L2 gradient clip; returns the post-clip norm.

    The norm is accumulated in float64 and re-checked after scaling, so the
    returned value genuinely satisfies ``norm <= max_norm`` (float32 rounding
    of the scale factor can otherwise overshoot by ~1e-8).
    """
    grads = [p.grad.detach() for p in parameters if p.grad is not None]

    def norm():
        return math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads))

    total = norm()
    while math.isfinite(total) and total > max_norm:
        shrink = min(max_norm / total, 1.0 - 1e-7)
        for g in grads:
            g.mul_(shrink)
        total = norm()
    return total


def train(config: TrainConfig, corpus: Corpus):
    """Run the optimization loop; returns (model, TrainReport)."""
    config.validate()
    if not corpus.samples:
        raise ConfigError("corpus is empty")
    start = time.perf_counter()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    model = JointModel(config, corpus.header)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    bank = None
    if config.support_source == "memory_bank":
        bank = MemoryBank(config.memory_bank_capacity, config.embed_dim)

    train_idx, holdout_idx = stratified_split(
        corpus, config.holdout_fraction, config.seed)
    if not train_idx:
        raise ConfigError("holdout split left no training samples")
    train_samples = [corpus.samples[i] for i in train_idx]
    holdout_samples = [corpus.samples[i] for i in holdout_idx]

    needs_pair = config.contrastive != "none" or (
        config.variant == "cross" and config.support_source == "batch")
    report = TrainReport(seed=config.seed, config_hash=config.hash(),
                         config=config.to_dict())

    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(train_samples))
        sums = {"contrast": 0.0, "caption": 0.0, "total": 0.0}
        steps = 0
        grad_norm_max = 0.0
        for lo in range(0, len(order), config.batch_size):
            chunk = order[lo:lo + config.batch_size]
            if len(chunk) < 2 and needs_pair:
                continue  # short trailing batch has no negatives / support
            batch = [train_samples[i] for i in chunk]
            try:
                breakdown, c_v, cond_v = _forward_losses(model, config, batch, bank)
            except (InputError, DecoderInputError) as e:
                # parameters blew up: encoders/decoder now see non-finite values
                raise DivergenceError(
                    f"non-finite activations at epoch {epoch}, step {steps}: {e}") from e
            _check_finite(breakdown.contrast, "contrastive loss", epoch, steps)
            _check_finite(breakdown.caption, "captioning loss", epoch, steps)
            if torch.is_tensor(breakdown.total) and breakdown.total.requires_grad:
                optimizer.zero_grad()
                breakdown.total.backward()
                grad_norm = _clip_grad_norm(model.parameters(), config.grad_clip_norm)
                grad_norm_max = max(grad_norm_max, grad_norm)
                optimizer.step()
            if bank is not None:
                bank.push(c_v, cond_v)
            sums["contrast"] += _scalar(breakdown.contrast)
            sums["caption"] += _scalar(breakdown.caption)
            sums["total"] += _scalar(breakdown.total)
            steps += 1
        denom = max(steps, 1)
        stats = EpochStats(
            epoch=epoch,
            contrast=sums["contrast"] / denom,
            caption=sums["caption"] / denom,
            total=sums["total"] / denom,
            grad_norm_max=grad_norm_max,
            retrieval=_retrieval_summary(model, holdout_samples, config.eval_ks)
            if holdout_samples else None,
        )
        report.epochs.append(stats)

    if holdout_samples:
        report.final_retrieval = _retrieval_summary(model, holdout_samples, config.eval_ks)
    report.wall_clock_sec = time.perf_counter() - start
    return model, report


def save_checkpoint(model: JointModel, config: TrainConfig, header: CorpusHeader, path):
    """Header (version, config, manifest) followed by little-endian f32 blocks."""
    state = model.state_dict()
    manifest = [{"name": name, "shape": list(tensor.shape)}
                for name, tensor in state.items()]
    meta = {
        "format_version": CKPT_VERSION,
        "config": config.to_dict(),
        "corpus_header": header.to_dict(),
        "manifest": manifest,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name, _ in ((m["name"], m["shape"]) for m in manifest):
            array = state[name].detach().to(torch.float32).contiguous().numpy()
            f.write(array.astype("<f4", copy=False).tobytes())


def read_checkpoint_meta(path):
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        raw = f.read(8)
        if len(raw) < 8:
            raise CheckpointError(f"{path}: truncated checkpoint header")
        (blob_len,) = struct.unpack("<Q", raw)
        blob = f.read(blob_len)
        if len(blob) < blob_len:
            raise CheckpointError(f"{path}: truncated checkpoint header")
        try:
            meta = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt checkpoint header: {e}") from e
        if meta.get("format_version") != CKPT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint format version {meta.get('format_version')} "
                f"does not match expected {CKPT_VERSION}")
        offset = f.tell()
    return meta, offset


def load_checkpoint(path, model: JointModel | None = None):
    """Rebuild (model, config, header) from a checkpoint file.

    When ``model`` is given its parameter shapes must match the manifest;
    a mismatch (e.g. a different embed_dim) raises CheckpointError.
    """
    meta, offset = read_checkpoint_meta(path)
    config = TrainConfig.from_dict(meta["config"])
    header_dict = dict(meta["corpus_header"])
    header_dict.pop("version", None)
    header = CorpusHeader(**header_dict)
    if model is None:
        model = JointModel(config, header)
    state = model.state_dict()

    manifest = meta["manifest"]
    manifest_names = [m["name"] for m in manifest]
    if set(manifest_names) != set(state.keys()):
        raise CheckpointError(f"{path}: parameter manifest does not match the model")
    for m in manifest:
        expected = list(state[m["name"]].shape)
        if m["shape"] != expected:
            raise CheckpointError(
                f"{path}: shape mismatch for {m['name']}: checkpoint {m['shape']} "
                f"vs model {expected}")

    new_state = {}
    with open(path, "rb") as f:
        f.seek(offset)
        for m in manifest:
            count = int(np.prod(m["shape"])) if m["shape"] else 1
            raw = f.read(count * 4)
            if len(raw) < count * 4:
                raise CheckpointError(f"{path}: truncated parameter block for {m['name']}")
            array = np.frombuffer(raw, dtype="<f4").reshape(m["shape"])
            new_state[m["name"]] = torch.from_numpy(array.copy()).to(
                state[m["name"]].dtype)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    model.load_state_dict(new_state)
    return model, config, header


def ablate(base_config: TrainConfig, cells, corpus: Corpus):
    """Train one seeded run per grid cell; failures are recorded, not raised.

    ``cells`` is a list of ``(name, overrides)`` pairs of config overrides on
    top of the base config. Returns a list of row dicts mirroring the cells.
    """
    rows = []
    for name, overrides in cells:
        row = {"name": name, "overrides": dict(overrides)}
        try:
            cfg = base_config.replace(**overrides)
            cfg.validate()
            _, rep = train(cfg, corpus)
            last = rep.epochs[-1].to_dict() if rep.epochs else None
            row.update({
                "status": "ok",
                "seed": cfg.seed,
                "config_hash": rep.config_hash,
                "final_loss": {k: last[k] for k in ("contrast", "caption", "total")}
                if last else None,
                "final_retrieval": rep.final_retrieval,
            })
        except Exception as e:  # noqa: BLE001 - per-cell isolation is the contract
            row.update({"status": "error", "error": f"{type(e).__name__}: {e}"})
        rows.append(row)
    return rows


def grid_cells(grid: dict):
    """Expand a grid file object into (name, overrides) cells.

    Accepts either {"cells": [{"name", "overrides"}]} or
    {"axis": {"param": [values...]}} for a one-dimensional sweep.
    """
    if "cells" in grid:
        cells = []
        for i, cell in enumerate(grid["cells"]):
            if not isinstance(cell, dict) or "overrides" not in cell:
                raise ConfigError(f"grid cell {i} must be an object with 'overrides'")
            cells.append((cell.get("name", f"cell{i}"), cell["overrides"]))
        return cells
    if "axis" in grid:
        axis = grid["axis"]
        if not isinstance(axis, dict) or len(axis) != 1:
            raise ConfigError("'axis' must map exactly one parameter to a value list")
        (param, values), = axis.items()
        return [(f"{param}={v}", {param: v}) for v in values]
    raise ConfigError("grid file must contain 'cells' or 'axis'")
