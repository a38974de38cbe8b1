"""Encoders mapping feature/token sequences to joint-space embeddings.

Both modalities share the same pooling head design: a modality-specific
pre-encoder refines the sequence, multi-head self-attention and a
feed-forward block (each with a residual and a normalization) contextualize
it, and the first valid position is read out as the summary vector. A final
linear map projects that summary into the joint embedding space; the
pre-projection summary doubles as the decoder conditioning vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import PAD


class InputError(ValueError):
    """Non-finite inputs, invalid token ids, or an empty length mask."""


@dataclass(frozen=True)
class PoolingHeadConfig:
    embed_dim: int = 64
    num_heads: int = 4
    ffn_hidden: int = 128
    num_layers: int = 2
    conv_kernel_sizes: tuple = (2, 3, 4, 6)
    dropout: float = 0.3
    norm: str = "batch"  # "batch" per the reference design; "layer" for small-batch stability

    def validate(self):
        if self.embed_dim <= 0 or self.num_heads <= 0:
            raise ValueError("embed_dim and num_heads must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"num_heads ({self.num_heads}) must divide embed_dim ({self.embed_dim})")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not self.conv_kernel_sizes or any(k <= 0 for k in self.conv_kernel_sizes):
            raise ValueError("conv_kernel_sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.norm not in ("batch", "layer"):
            raise ValueError(f"unknown norm mode {self.norm!r}")


def _mask_fill(x: Tensor, mask: Tensor) -> Tensor:
    """Zero out masked positions of a (B, L, D) tensor."""
    return x * mask.unsqueeze(-1).to(x.dtype)


class MaskedNorm(nn.Module):
    """Normalization restricted to valid sequence positions.

    Mode "batch" normalizes each feature channel with statistics over all
    valid positions in the batch (running statistics in eval mode, matching
    batch-norm semantics); mode "layer" normalizes over the feature axis of
    each position independently.
    """

    def __init__(self, dim, mode="batch", eps=1e-5, momentum=0.1):
        super().__init__()
        self.mode = mode
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))

    def forward(self, x, mask):
        if self.mode == "layer":
            mean = x.mean(-1, keepdim=True)
            var = x.var(-1, unbiased=False, keepdim=True)
            out = (x - mean) / torch.sqrt(var + self.eps)
        elif self.training:
            m = mask.unsqueeze(-1).to(x.dtype)
            count = m.sum().clamp(min=1.0)
            mean = (x * m).sum(dim=(0, 1)) / count
            var = (((x - mean) ** 2) * m).sum(dim=(0, 1)) / count
            with torch.no_grad():
                self.running_mean.lerp_(mean.detach().to(self.running_mean.dtype), self.momentum)
                self.running_var.lerp_(var.detach().to(self.running_var.dtype), self.momentum)
            out = (x - mean) / torch.sqrt(var + self.eps)
        else:
            out = (x - self.running_mean) / torch.sqrt(self.running_var + self.eps)
        out = out * self.weight + self.bias
        return _mask_fill(out, mask)


class ConvPreEncoder(nn.Module):
    """Parallel temporal 1D convolutions, concatenated and projected back to d."""

    def __init__(self, dim, kernel_sizes, dropout):
        super().__init__()
        n = len(kernel_sizes)
        widths = [dim // n] * n
        widths[-1] += dim - sum(widths)
        self.convs = nn.ModuleList(
            nn.Conv1d(dim, w, k) for w, k in zip(widths, kernel_sizes))
        # asymmetric same-length padding; avoids the even-kernel 'same' copy
        self.pads = [((k - 1) // 2, k // 2) for k in kernel_sizes]
        self.proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = _mask_fill(x, mask)
        xt = x.transpose(1, 2)
        out = torch.cat(
            [conv(F.pad(xt, pad)) for conv, pad in zip(self.convs, self.pads)],
            dim=1).transpose(1, 2)
        out = self.dropout(self.proj(F.relu(out)))
        return _mask_fill(out, mask)


class RecurrentPreEncoder(nn.Module):
    """Bidirectional GRU over the valid prefix of each sequence."""

    def __init__(self, dim, dropout):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("embed_dim must be even for a bidirectional pre-encoder")
        self.gru = nn.GRU(dim, dim // 2, batch_first=True, bidirectional=True)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = _mask_fill(x, mask)
        lengths = mask.sum(dim=1).to("cpu", torch.int64)
        packed = pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
        out, _ = self.gru(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=x.size(1))
        return _mask_fill(self.dropout(out), mask)


class AttentionPoolLayer(nn.Module):
    """Pre-encoder, residual self-attention, and residual FFN with masked norms."""

    def __init__(self, config: PoolingHeadConfig, pre_encoder: nn.Module):
        super().__init__()
        d = config.embed_dim
        self.pre = pre_encoder
        self.attn = nn.MultiheadAttention(
            d, config.num_heads, dropout=config.dropout, batch_first=True)
        self.norm_attn = MaskedNorm(d, config.norm)
        self.norm_ffn = MaskedNorm(d, config.norm)
        self.ffn = nn.Sequential(
            nn.Linear(d, config.ffn_hidden),
            nn.ReLU(),
            nn.Dropout(config.dropout),
            nn.Linear(config.ffn_hidden, d),
        )

    def forward(self, x, mask):
        h = self.pre(x, mask)
        attn_out, _ = self.attn(h, h, h, key_padding_mask=~mask, need_weights=False)
        h = self.norm_attn(_mask_fill(attn_out, mask) + h, mask)
        h = self.norm_ffn(self.ffn(h) + h, mask)
        return h


def _check_mask(mask: Tensor):
    if mask.dtype != torch.bool:
        raise InputError("length mask must be boolean")
    if not bool(mask.any(dim=-1).all()):
        raise InputError("length mask has a row with no valid positions")


def pool_baseline(e: Tensor, mask: Tensor, mode: str) -> Tensor:
    """Mean or max over valid positions of a (B, L, D) sequence."""
    _check_mask(mask)
    m = mask.unsqueeze(-1)
    if mode == "mean":
        return (e * m.to(e.dtype)).sum(dim=-2) / m.to(e.dtype).sum(dim=-2)
    if mode == "max":
        return e.masked_fill(~m, float("-inf")).max(dim=-2).values
    raise ValueError(f"unknown pooling mode {mode!r}")


class _PoolingEncoder(nn.Module):
    """Shared pooling logic over a pre-projected input sequence."""

    def __init__(self, config: PoolingHeadConfig, pooling: str, make_pre):
        super().__init__()
        config.validate()
        if pooling not in ("transformer", "mean", "max"):
            raise ValueError(f"unknown pooling {pooling!r}")
        self.pooling = pooling
        d = config.embed_dim
        if pooling == "transformer":
            self.layers = nn.ModuleList(
                AttentionPoolLayer(config, make_pre()) for _ in range(config.num_layers))
        else:
            self.layers = nn.ModuleList()
        self.joint_proj = nn.Linear(d, d)

    def pool(self, x, mask):
        if self.pooling == "transformer":
            for layer in self.layers:
                x = layer(x, mask)
            summary = x[:, 0]
        else:
            summary = pool_baseline(x, mask, self.pooling)
        joint = self.joint_proj(summary)
        return x, joint, summary


class VideoEncoder(_PoolingEncoder):
    """Maps fixed upstream frame features to a joint embedding.

    The upstream feature extractor lives outside the model and is never
    trained; only the input projection and pooling head carry parameters.

    forward returns ``(e_seq, c, cond)``: the contextualized sequence, the
    joint-space embedding, and the pre-projection summary used to condition
    the caption decoder.
    """

    def __init__(self, feature_dim, config: PoolingHeadConfig, pooling="transformer"):
        super().__init__(
            config, pooling,
            lambda: ConvPreEncoder(config.embed_dim, config.conv_kernel_sizes, config.dropout))
        self.input_proj = nn.Linear(feature_dim, config.embed_dim)

    def forward(self, features: Tensor, mask: Tensor):
        if not bool(torch.isfinite(features).all()):
            raise InputError("video features contain non-finite values")
        _check_mask(mask)
        x = _mask_fill(self.input_proj(features), mask)
        return self.pool(x, mask)


class TextEncoder(_PoolingEncoder):
    """Maps caption token sequences to a joint embedding."""

    def __init__(self, vocab_size, config: PoolingHeadConfig, pooling="transformer"):
        super().__init__(
            config, pooling,
            lambda: RecurrentPreEncoder(config.embed_dim, config.dropout))
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, config.embed_dim, padding_idx=PAD)

    def forward(self, tokens: Tensor, mask: Tensor):
        if bool((tokens < 0).any()) or bool((tokens >= self.vocab_size).any()):
            raise InputError(
                f"token ids out of range [0, {self.vocab_size})")
        _check_mask(mask)
        x = _mask_fill(self.embedding(tokens), mask)
        return self.pool(x, mask)
