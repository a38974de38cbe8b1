"""Autoregressive caption decoder conditioned on a single context vector.

A single causal self-attention layer over the sequence
``[projected conditioning, BOS, t_1, ...]``; the output at position k sees
only the conditioning vector and tokens before k, so the per-position logits
are causal by construction.
"""
from __future__ import annotations

import torch
from torch import Tensor, nn

from .corpus import BOS, EOS, PAD


class DecoderInputError(ValueError):
    """Invalid caption/conditioning inputs to the decoder."""


class CaptionDecoder(nn.Module):
    def __init__(self, vocab_size, dim, max_len, num_heads=4, dropout=0.0, embedding=None):
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embedding = embedding if embedding is not None else nn.Embedding(
            vocab_size, dim, padding_idx=PAD)
        self.cond_proj = nn.Linear(dim, dim)
        self.pos = nn.Parameter(torch.empty(max_len + 1, dim))
        self.attn = nn.MultiheadAttention(dim, num_heads, dropout=dropout, batch_first=True)
        self.out_proj = nn.Linear(dim, vocab_size)
        nn.init.normal_(self.pos, std=0.02)

    def logits(self, tokens_in: Tensor, conditioning: Tensor) -> Tensor:
        """Next-token logits for decoder inputs ``tokens_in`` (B, L).

        Returns (B, L+1, vocab): the output at position k predicts the token
        following ``tokens_in[:, :k]`` (position 0 conditions only on the
        context vector).
        """
        if not bool(torch.isfinite(conditioning).all()):
            raise DecoderInputError("conditioning vector contains non-finite values")
        B, L = tokens_in.shape
        if L > self.max_len:
            raise DecoderInputError(f"decoder input length {L} exceeds max_len {self.max_len}")
        x = self.embedding(tokens_in) + self.pos[1:L + 1]
        c = self.cond_proj(conditioning).unsqueeze(1) + self.pos[0]
        seq = torch.cat([c, x], dim=1)
        causal = torch.triu(
            torch.ones(L + 1, L + 1, dtype=torch.bool, device=seq.device), diagonal=1)
        h, _ = self.attn(seq, seq, seq, attn_mask=causal, need_weights=False)
        h = h + seq
        return self.out_proj(h)

    def nll(self, tokens: Tensor, true_len: Tensor, conditioning: Tensor) -> Tensor:
        """Per-sample mean negative log-likelihood under teacher forcing.

        ``tokens`` is (B, N) BOS-prefixed/EOS-terminated with PAD tail;
        ``true_len`` is (B,). The mean is over the ``true_len - 1`` predicted
        positions (everything after BOS, including EOS); PAD positions carry
        no loss and, being past the causal horizon, cannot affect it.
        """
        if tokens.ndim != 2:
            raise DecoderInputError("tokens must be a (B, N) batch")
        if bool((true_len < 2).any()):
            raise DecoderInputError("caption_true_len < 2: nothing to predict")
        L = int(true_len.max().item()) - 1
        inputs = tokens[:, :L]
        out = self.logits(inputs, conditioning)
        preds = out[:, 1:, :]                      # position k predicts tokens[:, k], k >= 1
        targets = tokens[:, 1:L + 1]
        logprobs = torch.log_softmax(preds, dim=-1)
        token_nll = -logprobs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
        positions = torch.arange(1, L + 1, device=tokens.device).unsqueeze(0)
        valid = positions < true_len.unsqueeze(1)
        per_sample = (token_nll * valid.to(token_nll.dtype)).sum(dim=1)
        return per_sample / (true_len - 1).to(token_nll.dtype)

    @torch.no_grad()
    def greedy_decode(self, conditioning: Tensor, max_len=None) -> list[int]:
        """Greedy argmax decoding from BOS; stops at EOS or ``max_len`` tokens.

        Argmax ties break toward the lowest token id (torch.argmax returns
        the first maximal index), which pins down the degenerate all-zero
        decoder to a deterministic output.
        """
        if max_len is None:
            max_len = self.max_len
        if not 1 <= max_len <= self.max_len:
            raise DecoderInputError(f"max_len must be in [1, {self.max_len}]")
        if conditioning.ndim != 1:
            raise DecoderInputError("greedy_decode expects a single conditioning vector")
        tokens = [BOS]
        while len(tokens) < max_len:
            inp = torch.tensor([tokens], dtype=torch.long, device=conditioning.device)
            out = self.logits(inp, conditioning.unsqueeze(0))
            nxt = int(torch.argmax(out[0, -1]).item())
            tokens.append(nxt)
            if nxt == EOS:
                break
        return tokens
