"""Bidirectional retrieval metrics and support-attention exports."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .objectives import support_weights


class EvaluationError(ValueError):
    """Invalid inputs to a metric computation."""


@dataclass
class RetrievalResult:
    direction: str                      # "text->video" or "video->text"
    recall_at: dict = field(default_factory=dict)  # K -> fraction in [0, 1]
    median_rank: float = 0.0
    ranks: list = field(default_factory=list)      # 1-based rank of the true match per query

    def to_dict(self):
        return {
            "direction": self.direction,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "median_rank": self.median_rank,
            "ranks": list(self.ranks),
        }


def _ranks_from_rows(sim: np.ndarray) -> np.ndarray:
    # pessimistic ties: every candidate scoring >= the true match counts ahead of it
    pos = np.diagonal(sim)
    ahead = (sim >= pos[:, None]).sum(axis=1) - 1  # drop the true match itself
    return ahead + 1


def retrieval_metrics(sim, ks=(1, 5, 10)):
    """R@K and median rank for both retrieval directions.

    ``sim`` is a square similarity matrix whose diagonal is the ground-truth
    pairing: rows are text queries over video candidates, columns the reverse.
    """
    if isinstance(sim, torch.Tensor):
        sim = sim.detach().cpu().numpy()
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise EvaluationError(f"similarity matrix must be square, got {sim.shape}")
    results = {}
    for direction, matrix in (("text->video", sim), ("video->text", sim.T)):
        ranks = _ranks_from_rows(matrix)
        recall = {int(k): float((ranks <= k).mean()) for k in ks}
        results[direction] = RetrievalResult(
            direction=direction,
            recall_at=recall,
            median_rank=float(np.median(ranks)),
            ranks=[int(r) for r in ranks],
        )
    return results


@dataclass
class AttentionDump:
    """Support-attention weights of one batch, for inspection and export."""

    ids: list
    variant: str
    temperature: float
    weights: np.ndarray  # (B, P), rows sum to 1

    def to_dict(self):
        return {
            "ids": list(self.ids),
            "variant": self.variant,
            "temperature": self.temperature,
            "weights": self.weights.reshape(-1).tolist(),
            "shape": list(self.weights.shape),
        }


def attention_dump(model, batch, config) -> AttentionDump:
    """Compute support weights for one batch of corpus samples in eval mode."""
    from .trainer import batch_tensors  # local import to avoid a cycle

    feats, vmask, tokens, tmask, lens, _ = batch_tensors(batch)
    model.eval()
    with torch.no_grad():
        _, c_v, _ = model.video_encoder(feats, vmask)
        _, c_t, _ = model.text_encoder(tokens, tmask)
        w = support_weights(c_t, c_v, config.variant, config.temperature,
                            sim=config.support_sim)
    return AttentionDump(
        ids=[s.id for s in batch],
        variant=config.variant,
        temperature=config.temperature,
        weights=w.weights.cpu().numpy(),
    )


def export_attention(model, batch, config, path, png_path=None) -> AttentionDump:
    """Write an attention dump as JSON; optionally render a heatmap PNG."""
    dump = attention_dump(model, batch, config)
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(dump.to_dict(), f, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise EvaluationError(f"cannot write attention dump to {path}: {e}") from e
    if png_path is not None:
        _render_heatmap(dump, png_path)
    return dump


def _render_heatmap(dump: AttentionDump, png_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(dump.weights, cmap="viridis", vmin=0.0)
    ax.set_title(f"support weights ({dump.variant}, T={dump.temperature})")
    ax.set_xlabel("support pool index")
    ax.set_ylabel("batch index")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)


def entropy_summary(dump) -> dict:
    """Shannon entropy (nats) of each attention row, with summary statistics."""
    weights = dump.weights if isinstance(dump, AttentionDump) else np.asarray(dump)
    w = np.asarray(weights, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, -w * np.log(w), 0.0)
    per_row = terms.sum(axis=1)
    return {
        "per_row": [float(h) for h in per_row],
        "mean": float(per_row.mean()),
        "min": float(per_row.min()),
        "max": float(per_row.max()),
    }
