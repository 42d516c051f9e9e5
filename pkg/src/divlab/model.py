"""Toy-scale factored transformer.

Source tokens and their EQ/DIV factors are embedded separately and
concatenated; the decoder does the same for target tokens and the
time-shifted factor stream. Two output heads read the final decoder
state: one over the target token vocabulary and one over the factor
labels. The factor stream predicted at step t is the label of the token
emitted at step t-1 (the label for the first position is a reserved
BEGIN id that shares the padding slot, so the factor head stays 3-wide).

Setting d_factor_embed=0 and factored=False yields the plain unfactored
baseline with the identical token pipeline.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .bpe import (BOS_ID, EOS_ID, FACTOR_BEGIN_ID, FACTOR_PAD_ID,
                  FACTOR_VOCAB_SIZE, PAD_ID)


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_token_embed: int = 28
    d_factor_embed: int = 4
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    dropout: float = 0.1
    label_smoothing: float = 0.1
    factor_vocab_size: int = FACTOR_VOCAB_SIZE
    factored: bool = True
    tie_target_embeddings: bool = False
    max_len: int = 512

    @property
    def d_model(self):
        return self.d_token_embed + self.d_factor_embed

    def validate(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(
                f"d_model {self.d_model} not divisible by n_heads "
                f"{self.n_heads}")
        if self.factored and self.tie_target_embeddings:
            raise ModelError("factored models must not tie target embeddings")
        if self.factored and self.d_factor_embed <= 0 and self.d_token_embed <= 0:
            raise ModelError("embedding widths must be positive")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


@dataclass
class FactoredBatch:
    """Integer grids of shape (batch, time).

    tgt_ids holds the reference tokens followed by EOS; tgt_factor_ids is
    aligned with it; shifted_factor_targets[t] = tgt_factor_ids[t-1] with
    the BEGIN label at position 0. Decoder inputs (BOS-shifted tokens,
    twice-shifted factors) are derived in the forward pass.
    """
    src_ids: torch.Tensor
    src_factor_ids: torch.Tensor
    tgt_ids: torch.Tensor
    tgt_factor_ids: torch.Tensor
    shifted_factor_targets: torch.Tensor
    src_pad_mask: torch.Tensor  # True at padding
    tgt_pad_mask: torch.Tensor

    @property
    def n_sentences(self):
        return self.src_ids.shape[0]


def make_batch(examples, device=None):
    """Pad a list of encoded examples into one FactoredBatch.

    Each example is a dict with src_ids, src_factor_ids, tgt_ids,
    tgt_factor_ids (no BOS/EOS). EOS is appended to both sides here; the
    EOS target factor is the EQ label continuation of the sentence.
    """
    n = len(examples)
    src_len = max(len(e["src_ids"]) for e in examples) + 1
    tgt_len = max(len(e["tgt_ids"]) for e in examples) + 1
    src = torch.full((n, src_len), PAD_ID, dtype=torch.long)
    src_fac = torch.full((n, src_len), FACTOR_PAD_ID, dtype=torch.long)
    tgt = torch.full((n, tgt_len), PAD_ID, dtype=torch.long)
    tgt_fac = torch.full((n, tgt_len), FACTOR_PAD_ID, dtype=torch.long)
    shifted = torch.full((n, tgt_len), FACTOR_PAD_ID, dtype=torch.long)
    for i, e in enumerate(examples):
        s = e["src_ids"] + [EOS_ID]
        sf = e["src_factor_ids"] + [e["src_factor_ids"][-1]
                                    if e["src_factor_ids"] else 1]
        t = e["tgt_ids"] + [EOS_ID]
        tf = e["tgt_factor_ids"] + [e["tgt_factor_ids"][-1]
                                    if e["tgt_factor_ids"] else 1]
        src[i, :len(s)] = torch.tensor(s)
        src_fac[i, :len(sf)] = torch.tensor(sf)
        tgt[i, :len(t)] = torch.tensor(t)
        tgt_fac[i, :len(tf)] = torch.tensor(tf)
        shifted[i, 0] = FACTOR_BEGIN_ID
        shifted[i, 1:len(tf)] = torch.tensor(tf[:-1])
    batch = FactoredBatch(src, src_fac, tgt, tgt_fac, shifted,
                          src.eq(PAD_ID), tgt.eq(PAD_ID))
    return batch


def sinusoidal_positions(max_len, d_model, dtype=torch.float32):
    pos = torch.arange(max_len, dtype=dtype).unsqueeze(1)
    dim = torch.arange(0, d_model, 2, dtype=dtype)
    angle = pos / torch.pow(10000.0, dim / d_model)
    pe = torch.zeros(max_len, d_model, dtype=dtype)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d_model // 2])
    return pe


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model, n_heads, dropout):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, memory, mask=None):
        b, tq, _ = query.shape
        tk = memory.shape[1]

        def split(x, t):
            return x.view(b, t, self.n_heads, self.d_head).transpose(1, 2)

        q = split(self.q(query), tq)
        k = split(self.k(memory), tk)
        v = split(self.v(memory), tk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        attn = self.dropout(attn)
        ctx = (attn @ v).transpose(1, 2).reshape(b, tq, -1)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ff, dropout):
        super().__init__()
        self.w1 = nn.Linear(d_model, d_ff)
        self.w2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.w2(self.dropout(F.relu(self.w1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask):
        h = self.ln1(x)
        x = x + self.dropout(self.attn(h, h, mask=pad_mask))
        x = x + self.dropout(self.ff(self.ln2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads,
                                            cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads,
                                             cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, causal_mask, mem_mask):
        h = self.ln1(x)
        x = x + self.dropout(self.self_attn(h, h, mask=causal_mask))
        x = x + self.dropout(self.cross_attn(self.ln2(x), memory,
                                             mask=mem_mask))
        x = x + self.dropout(self.ff(self.ln3(x)))
        return x


class FactoredTransformer(nn.Module):
    """Encoder-decoder with factor embedding concatenation and dual heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.d_model
        self.src_tok_embed = nn.Embedding(config.vocab_size,
                                          config.d_token_embed,
                                          padding_idx=PAD_ID)
        self.tgt_tok_embed = nn.Embedding(config.vocab_size,
                                          config.d_token_embed,
                                          padding_idx=PAD_ID)
        if config.d_factor_embed > 0:
            self.src_fac_embed = nn.Embedding(config.factor_vocab_size,
                                              config.d_factor_embed)
            self.tgt_fac_embed = nn.Embedding(config.factor_vocab_size,
                                              config.d_factor_embed)
        else:
            self.src_fac_embed = None
            self.tgt_fac_embed = None
        self.encoder = nn.ModuleList(EncoderLayer(config)
                                     for _ in range(config.n_layers))
        self.decoder = nn.ModuleList(DecoderLayer(config)
                                     for _ in range(config.n_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.dec_norm = nn.LayerNorm(d)
        self.token_head = nn.Linear(d, config.vocab_size)
        if config.tie_target_embeddings:
            if config.d_factor_embed != 0:
                raise ModelError("cannot tie embeddings with factor widths > 0")
            self.token_head.weight = self.tgt_tok_embed.weight
        self.factor_head = (nn.Linear(d, config.factor_vocab_size)
                            if config.factored else None)
        self.register_buffer(
            "positions", sinusoidal_positions(config.max_len, d),
            persistent=False)
        self.dropout = nn.Dropout(config.dropout)

    def _check_ids(self, ids, limit, what):
        if ids.numel() and (ids.min() < 0 or ids.max() >= limit):
            raise ModelError(f"{what} id out of range [0, {limit})")

    def embed_source(self, src_ids, src_factor_ids):
        self._check_ids(src_ids, self.config.vocab_size, "source token")
        tok = self.src_tok_embed(src_ids)
        if self.src_fac_embed is None:
            return tok
        self._check_ids(src_factor_ids, self.config.factor_vocab_size,
                        "source factor")
        return torch.cat([tok, self.src_fac_embed(src_factor_ids)], dim=-1)

    def embed_target(self, tgt_ids, tgt_factor_ids):
        self._check_ids(tgt_ids, self.config.vocab_size, "target token")
        tok = self.tgt_tok_embed(tgt_ids)
        if self.tgt_fac_embed is None:
            return tok
        self._check_ids(tgt_factor_ids, self.config.factor_vocab_size,
                        "target factor")
        return torch.cat([tok, self.tgt_fac_embed(tgt_factor_ids)], dim=-1)

    def _add_positions(self, x):
        t = x.shape[1]
        scale = math.sqrt(self.config.d_model)
        return x * scale + self.positions[:t].to(x.dtype)

    def encode(self, src_ids, src_factor_ids, src_pad_mask):
        x = self.dropout(self._add_positions(
            self.embed_source(src_ids, src_factor_ids)))
        attn_mask = src_pad_mask[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, attn_mask)
        return self.enc_norm(x)

    def decode(self, memory, src_pad_mask, dec_tok_in, dec_fac_in):
        t = dec_tok_in.shape[1]
        x = self.dropout(self._add_positions(
            self.embed_target(dec_tok_in, dec_fac_in)))
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool,
                                       device=x.device), diagonal=1)
        causal = causal[None, None, :, :]
        mem_mask = src_pad_mask[:, None, None, :]
        for layer in self.decoder:
            x = layer(x, memory, causal, mem_mask)
        x = self.dec_norm(x)
        token_logits = self.token_head(x)
        factor_logits = (self.factor_head(x)
                         if self.factor_head is not None else None)
        return token_logits, factor_logits

    def decoder_inputs(self, batch):
        tok_in = torch.cat(
            [torch.full_like(batch.tgt_ids[:, :1], BOS_ID),
             batch.tgt_ids[:, :-1]], dim=1)
        fac_in = torch.cat(
            [torch.full_like(batch.shifted_factor_targets[:, :1],
                             FACTOR_BEGIN_ID),
             batch.shifted_factor_targets[:, :-1]], dim=1)
        # keep padding ids clean after the shift
        tok_in = tok_in.masked_fill(batch.tgt_pad_mask, PAD_ID)
        fac_in = fac_in.masked_fill(batch.tgt_pad_mask, FACTOR_PAD_ID)
        return tok_in, fac_in

    def forward(self, batch, train_mode=False):
        was_training = self.training
        self.train(train_mode)
        try:
            memory = self.encode(batch.src_ids, batch.src_factor_ids,
                                 batch.src_pad_mask)
            tok_in, fac_in = self.decoder_inputs(batch)
            return self.decode(memory, batch.src_pad_mask, tok_in, fac_in)
        finally:
            self.train(was_training)


@dataclass
class LossBreakdown:
    mt_loss: torch.Tensor
    factor_loss: torch.Tensor

    @property
    def total(self):
        return self.mt_loss + self.factor_loss


def _smoothed_nll(logits, targets, mask, label_smoothing):
    """Label-smoothed cross-entropy averaged over unmasked positions.

    The smoothed target distribution puts (1 - ls) on the gold class and
    spreads ls uniformly over all classes.
    """
    if not torch.isfinite(logits).all():
        raise ModelError("non-finite logits")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if label_smoothing > 0:
        uniform = -logp.mean(dim=-1)
        nll = (1.0 - label_smoothing) * nll + label_smoothing * uniform
    keep = ~mask
    count = keep.sum()
    if count == 0:
        return logits.new_zeros(())
    return (nll * keep).sum() / count


def divergent_aware_loss(token_logits, factor_logits, batch,
                         label_smoothing=0.1) -> LossBreakdown:
    """Token cross-entropy plus time-shifted factor cross-entropy.

    Both terms are label-smoothed, exclude padding, and are normalized by
    their own non-pad token counts. A factor head of width 1 (or a missing
    factor head) contributes exactly zero.
    """
    mt = _smoothed_nll(token_logits, batch.tgt_ids, batch.tgt_pad_mask,
                       label_smoothing)
    if factor_logits is None or factor_logits.shape[-1] <= 1:
        fac = token_logits.new_zeros(())
    else:
        fac = _smoothed_nll(factor_logits, batch.shifted_factor_targets,
                            batch.tgt_pad_mask, label_smoothing)
    return LossBreakdown(mt_loss=mt, factor_loss=fac)


def unfactored_loss(token_logits, batch, label_smoothing=0.1):
    """Plain token-level cross-entropy (the baseline training objective)."""
    return _smoothed_nll(token_logits, batch.tgt_ids, batch.tgt_pad_mask,
                         label_smoothing)


def backward(model, loss):
    """Populate and return gradients for every parameter, zeros if unused."""
    grads = torch.autograd.grad(loss, list(model.parameters()),
                                allow_unused=True, retain_graph=False)
    out = {}
    for (name, param), grad in zip(model.named_parameters(), grads):
        if grad is None:
            grad = torch.zeros_like(param)
        if not torch.isfinite(grad).all():
            raise ModelError(f"non-finite gradient for parameter {name}")
        out[name] = grad
    return out


def grad_check(model, batch, eps=1e-4, n_samples=200, seed=0,
               label_smoothing=0.0):
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 with dropout disabled, sampling at least n_samples
    scalar parameters (all of them on toy models).
    """
    model = model.double()
    model.eval()

    def loss_fn():
        token_logits, factor_logits = model.forward(batch, train_mode=False)
        return divergent_aware_loss(token_logits, factor_logits, batch,
                                    label_smoothing).total

    loss = loss_fn()
    grads = backward(model, loss)

    coords = []
    for name, param in model.named_parameters():
        for flat_idx in range(param.numel()):
            coords.append((name, flat_idx))
    gen = torch.Generator().manual_seed(seed)
    if len(coords) > n_samples:
        picks = torch.randperm(len(coords), generator=gen)[:n_samples]
        coords = [coords[i] for i in picks.tolist()]

    params = dict(model.named_parameters())
    max_rel = 0.0
    with torch.no_grad():
        for name, flat_idx in coords:
            p = params[name].view(-1)
            orig = p[flat_idx].item()
            p[flat_idx] = orig + eps
            up = loss_fn().item()
            p[flat_idx] = orig - eps
            down = loss_fn().item()
            p[flat_idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[name].view(-1)[flat_idx].item()
            denom = max(abs(numeric), abs(analytic), 1e-8)
            max_rel = max(max_rel, abs(numeric - analytic) / denom)
    return max_rel
