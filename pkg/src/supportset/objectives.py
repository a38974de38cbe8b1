"""Loss functions and the support-set attention mechanism.

Triplet contrastive loss with hard-negative mining, InfoNCE ablation,
row-stochastic support weights in four variants (identity / full / hybrid /
cross), the cross-captioning loss that conditions each caption on a mixture
of video embeddings from its support set, and a FIFO memory bank that can
enlarge the support pool beyond the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

VARIANTS = ("identity", "full", "hybrid", "cross")


class ObjectiveError(ValueError):
    """Invalid inputs to a loss or support-weight computation."""


def similarity_matrix(c_t: Tensor, c_v: Tensor) -> Tensor:
    """Cosine similarities, entry (i, j) = s(c_t[i], c_v[j])."""
    return F.normalize(c_t, dim=-1) @ F.normalize(c_v, dim=-1).T


def triplet_contrastive(sim: Tensor, margin: float = 0.2) -> Tensor:
    """Hinge-based triplet ranking loss with hard negatives, both directions.

    For each query the single hardest negative (j != i) is penalized:
    mean_i([margin - s_ii + max_j s_ij]_+ + [margin - s_ii + max_j s_ji]_+).
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ObjectiveError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    B = sim.shape[0]
    if B < 2:
        raise ObjectiveError("triplet loss needs B >= 2 (no negatives exist)")
    pos = sim.diagonal()
    eye = torch.eye(B, dtype=torch.bool, device=sim.device)
    neg_inf = torch.tensor(float("-inf"), dtype=sim.dtype, device=sim.device)
    cost_t2v = (margin - pos.unsqueeze(1) + sim).masked_fill(eye, neg_inf)
    cost_v2t = (margin - pos.unsqueeze(0) + sim).masked_fill(eye, neg_inf)
    t2v = cost_t2v.max(dim=1).values.clamp(min=0)
    v2t = cost_v2t.max(dim=0).values.clamp(min=0)
    return (t2v + v2t).mean()


def infonce_contrastive(sim: Tensor, temperature: float, mode: str = "inter",
                        sim_tt: Tensor = None, sim_vv: Tensor = None) -> Tensor:
    """Symmetric softmax cross-entropy against the diagonal pairing.

    "inter" uses only cross-modal similarities; "inter+intra" additionally
    appends within-modality similarities (diagonal excluded) as extra
    negatives in each direction's denominator.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ObjectiveError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    if temperature <= 0:
        raise ObjectiveError(f"temperature must be positive, got {temperature}")
    if mode not in ("inter", "inter+intra"):
        raise ObjectiveError(f"unknown InfoNCE mode {mode!r}")
    B = sim.shape[0]
    target = torch.arange(B, device=sim.device)
    rows = sim / temperature
    cols = sim.T / temperature
    if mode == "inter+intra":
        if sim_tt is None or sim_vv is None:
            raise ObjectiveError("inter+intra mode requires sim_tt and sim_vv")
        eye = torch.eye(B, dtype=torch.bool, device=sim.device)
        neg_inf = torch.tensor(float("-inf"), dtype=sim.dtype, device=sim.device)
        intra_t = (sim_tt / temperature).masked_fill(eye, neg_inf)
        intra_v = (sim_vv / temperature).masked_fill(eye, neg_inf)
        rows = torch.cat([rows, intra_t], dim=1)
        cols = torch.cat([cols, intra_v], dim=1)
    loss_t = F.cross_entropy(rows, target)
    loss_v = F.cross_entropy(cols, target)
    return (loss_t + loss_v) / 2


@dataclass
class SupportWeights:
    """Row-stochastic attention over a support pool of video embeddings."""

    weights: Tensor  # (B, P); pool convention: columns [0, B) are the current batch
    variant: str
    temperature: float


def support_weights(c_t: Tensor, c_v_pool: Tensor, variant: str,
                    temperature: float, sim: str = "cosine") -> SupportWeights:
    """Softmax mixture weights comparing each caption to the video pool.

    By default embeddings are unit-normalized before the dot product, so the
    softmax runs over cosine similarities scaled by 1/temperature; ``sim="dot"``
    keeps raw dot products. Excluded indices get exact zeros.
    """
    if variant not in VARIANTS:
        raise ObjectiveError(f"unknown support variant {variant!r}")
    if temperature <= 0:
        raise ObjectiveError(f"temperature must be positive, got {temperature}")
    if sim not in ("cosine", "dot"):
        raise ObjectiveError(f"unknown support similarity {sim!r}")
    B = c_t.shape[0]
    P = c_v_pool.shape[0]
    if P < B:
        raise ObjectiveError(f"pool size {P} smaller than batch size {B}")
    if variant == "cross" and P < 2:
        raise ObjectiveError("cross variant needs a pool of size >= 2 (empty support set)")

    eye = torch.zeros(B, P, dtype=c_t.dtype, device=c_t.device)
    eye[:, :B] = torch.eye(B, dtype=c_t.dtype, device=c_t.device)
    if variant == "identity":
        return SupportWeights(eye, variant, temperature)

    if sim == "cosine":
        scores = similarity_matrix(c_t, c_v_pool) / temperature
    else:
        scores = (c_t @ c_v_pool.T) / temperature
    if variant == "cross":
        scores = scores.masked_fill(eye.bool(), float("-inf"))
    full = torch.softmax(scores, dim=1)
    if variant == "full":
        weights = full
    elif variant == "cross":
        weights = full.masked_fill(eye.bool(), 0.0)  # exact zeros on the diagonal
    else:  # hybrid: average of identity and full weights
        weights = 0.5 * (eye + full)
    return SupportWeights(weights, variant, temperature)


def cross_captioning_loss(decoder, tokens: Tensor, true_len: Tensor,
                          weights: SupportWeights, cond_pool: Tensor) -> Tensor:
    """Caption NLL where each sample is conditioned on its support mixture."""
    if weights.weights.shape[1] != cond_pool.shape[0]:
        raise ObjectiveError(
            f"support weights cover {weights.weights.shape[1]} pool entries but the "
            f"pool has {cond_pool.shape[0]}")
    conditioning = weights.weights @ cond_pool
    return decoder.nll(tokens, true_len, conditioning).mean()


@dataclass
class LossBreakdown:
    contrast: float
    caption: float
    lam: float
    margin: float
    total: float


def combined_loss(contrast, caption, lam: float, margin: float = 0.2) -> LossBreakdown:
    """Total objective: contrastive term plus lam times the captioning term."""
    return LossBreakdown(
        contrast=contrast, caption=caption, lam=lam, margin=margin,
        total=contrast + lam * caption)


class MemoryBank:
    """Fixed-capacity FIFO ring of detached (joint, conditioning) video embeddings."""

    def __init__(self, capacity: int, dim: int):
        if capacity <= 0:
            raise ObjectiveError(f"memory bank capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.joint = torch.zeros(capacity, dim)
        self.cond = torch.zeros(capacity, dim)
        self.count = 0
        self.cursor = 0

    def __len__(self):
        return self.count

    @torch.no_grad()
    def push(self, joint: Tensor, cond: Tensor):
        """Store a batch of embeddings, overwriting the oldest entries first."""
        joint = joint.detach()
        cond = cond.detach()
        for i in range(joint.shape[0]):
            self.joint[self.cursor] = joint[i]
            self.cond[self.cursor] = cond[i]
            self.cursor = (self.cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def pool(self, joint: Tensor, cond: Tensor):
        """Current batch followed by stored entries; stored parts carry no gradient."""
        if self.count == 0:
            return joint, cond
        stored_joint = self.joint[:self.count].to(joint.dtype)
        stored_cond = self.cond[:self.count].to(cond.dtype)
        return torch.cat([joint, stored_joint]), torch.cat([cond, stored_cond])
