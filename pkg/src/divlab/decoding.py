"""Beam search over tokens with greedily decoded factor labels.

Factor labels never participate in beam ranking: each surviving
hypothesis extends its factor prefix with the deterministic argmax over
the EQ/DIV logits at the step just committed (ties break toward EQ).
Because of the training-time shift, the factor recorded at step k is the
model's label for the token emitted at step k-1; the entry at step 0
fills the begin slot.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import torch

from .bpe import BOS_ID, EOS_ID, FACTOR_BEGIN_ID, FACTOR_IDS, PAD_ID
from .corpus import DIV, EQ

FACTOR_NAMES = {v: k for k, v in FACTOR_IDS.items()}


class DecodeError(ValueError):
    pass


@dataclass
class Hypothesis:
    tokens: list            # token ids, EOS included when finished
    token_probs: list       # per-step probability of each token
    factors: list           # per-step greedy EQ/DIV label
    score: float            # sum of log token probabilities
    finished: bool = False

    def normalized_score(self, length_norm):
        if not length_norm or not self.tokens:
            return self.score
        return self.score / len(self.tokens)


def tag_inference_source(tokens):
    """All-EQ factor sequence for inference-time source tagging."""
    return [EQ] * len(tokens)


def _encode_src(model, src_ids, src_factor_ids=None):
    if src_factor_ids is None:
        src_factor_ids = [FACTOR_IDS[f]
                          for f in tag_inference_source(src_ids)]
    src = torch.tensor([list(src_ids) + [EOS_ID]], dtype=torch.long)
    fac = torch.tensor([list(src_factor_ids) + [FACTOR_IDS[EQ]]],
                       dtype=torch.long)
    pad = src.eq(PAD_ID)
    memory = model.encode(src, fac, pad)
    return memory, pad


def _decoder_grids(hyps, device=None):
    """Build (tok_in, fac_in) grids for a set of same-length prefixes."""
    t = len(hyps[0].tokens) + 1
    tok_in = torch.full((len(hyps), t), PAD_ID, dtype=torch.long)
    fac_in = torch.full((len(hyps), t), FACTOR_BEGIN_ID, dtype=torch.long)
    for i, hyp in enumerate(hyps):
        tok_in[i, 0] = BOS_ID
        if hyp.tokens:
            tok_in[i, 1:] = torch.tensor(hyp.tokens)
        # fac_in[1] is always BEGIN; predictions enter from position 2 on
        for k in range(2, t):
            fac_in[i, k] = FACTOR_IDS[hyp.factors[k - 1]]
    return tok_in, fac_in


def _greedy_factor(factor_logits_row):
    """Argmax over the EQ/DIV logits, ties toward EQ (lowest id)."""
    eq_id, div_id = FACTOR_IDS[EQ], FACTOR_IDS[DIV]
    eq, div = float(factor_logits_row[eq_id]), float(factor_logits_row[div_id])
    return DIV if div > eq else EQ


@torch.no_grad()
def beam_search(model, src_ids, beam=5, max_len=80, length_norm=False,
                src_factor_ids=None):
    """Beam search over tokens; returns hypotheses sorted best-first.

    PAD and BOS are never expanded. Finished hypotheses are frozen and
    compete by final score; search stops once the best finished hypothesis
    cannot be beaten by any live continuation, or at max_len.
    """
    if beam < 1:
        raise DecodeError("beam must be >= 1")
    if max_len < 1:
        raise DecodeError("max_len must be >= 1")
    model.eval()
    memory, src_pad = _encode_src(model, src_ids, src_factor_ids)
    banned = (PAD_ID, BOS_ID)

    live = [Hypothesis([], [], [], 0.0)]
    finished = []
    for _ in range(max_len):
        tok_in, fac_in = _decoder_grids(live)
        mem = memory.expand(len(live), -1, -1)
        pad = src_pad.expand(len(live), -1)
        token_logits, factor_logits = model.decode(mem, pad, tok_in, fac_in)
        logp = torch.log_softmax(token_logits[:, -1, :].double(), dim=-1)
        probs = logp.exp()

        candidates = []
        for i, hyp in enumerate(live):
            if model.config.factored and factor_logits is not None:
                label = _greedy_factor(factor_logits[i, -1, :])
            else:
                label = EQ
            for tok in range(logp.shape[1]):
                if tok in banned:
                    continue
                candidates.append(Hypothesis(
                    hyp.tokens + [tok],
                    hyp.token_probs + [float(probs[i, tok])],
                    hyp.factors + [label],
                    hyp.score + float(logp[i, tok]),
                    finished=(tok == EOS_ID)))
        candidates.sort(key=lambda h: (-h.score, tuple(h.tokens)))
        kept = candidates[:beam]
        live = [h for h in kept if not h.finished]
        finished.extend(h for h in kept if h.finished)
        if not live:
            break
        best_live = max(h.score for h in live)
        if finished and max(h.score for h in finished) >= best_live:
            # log-probs only decrease with extension
            break

    results = finished + live
    results.sort(key=lambda h: (-h.normalized_score(length_norm),
                                tuple(h.tokens)))
    return results[:beam]


@torch.no_grad()
def forced_decode(model, src_ids, ref_ids, src_factor_ids=None):
    """Teacher-forced probability of each reference token.

    The factor prefix is rebuilt greedily from the model's own argmax over
    the forced token prefix, mirroring free decoding.
    """
    if not ref_ids:
        raise DecodeError("empty reference")
    model.eval()
    memory, src_pad = _encode_src(model, src_ids, src_factor_ids)
    t = len(ref_ids) + 1
    tok_in = torch.tensor([[BOS_ID] + list(ref_ids)], dtype=torch.long)
    fac_in = torch.full((1, t), FACTOR_BEGIN_ID, dtype=torch.long)

    probs = []
    for k in range(len(ref_ids)):
        token_logits, factor_logits = model.decode(memory, src_pad,
                                                   tok_in[:, :k + 1],
                                                   fac_in[:, :k + 1])
        p = torch.softmax(token_logits[0, k, :].double(), dim=-1)
        probs.append(float(p[ref_ids[k]]))
        if k + 2 < t and model.config.factored and factor_logits is not None:
            label = _greedy_factor(factor_logits[0, k, :])
            fac_in[0, k + 2] = FACTOR_IDS[label]
    return probs


@dataclass
class DecodeRecord:
    """One decode-log line; the wire contract consumed by the eval module."""
    src: list
    ref: list
    hyp_tokens: list
    token_probs: list
    factors: list
    score: float
    beam: int
    forced_probs: list = field(default_factory=list)

    def to_json(self):
        return {"src": self.src, "ref": self.ref,
                "hyp_tokens": self.hyp_tokens,
                "token_probs": self.token_probs, "factors": self.factors,
                "score": self.score, "beam": self.beam,
                "forced_probs": self.forced_probs}

    @classmethod
    def from_json(cls, obj):
        return cls(src=obj["src"], ref=obj["ref"],
                   hyp_tokens=obj["hyp_tokens"],
                   token_probs=obj["token_probs"], factors=obj["factors"],
                   score=obj["score"], beam=obj["beam"],
                   forced_probs=obj.get("forced_probs", []))


def write_decode_log(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False,
                                sort_keys=True) + "\n")


def read_decode_log(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(DecodeRecord.from_json(json.loads(line)))
    return records


def decode_corpus(model, encoded_examples, bpe_model, beam=5, max_len=80,
                  length_norm=False, with_forced=True):
    """Decode every example and assemble decode-log records with surfaces."""
    id_to_sym = bpe_model.id_to_symbol()

    def surfaces(ids):
        return [id_to_sym.get(i, "<unk>") for i in ids
                if i not in (PAD_ID, BOS_ID, EOS_ID)]

    records = []
    for ex in encoded_examples:
        hyps = beam_search(model, ex["src_ids"], beam=beam, max_len=max_len,
                           length_norm=length_norm,
                           src_factor_ids=None)
        best = hyps[0]
        n = len(best.tokens)
        forced = (forced_decode(model, ex["src_ids"], ex["tgt_ids"])
                  if with_forced and ex["tgt_ids"] else [])
        records.append(DecodeRecord(
            src=surfaces(ex["src_ids"]),
            ref=surfaces(ex["tgt_ids"]),
            hyp_tokens=surfaces(best.tokens),
            token_probs=[round(p, 10) for p in best.token_probs[:n]],
            factors=list(best.factors),
            score=round(best.score, 10),
            beam=beam,
            forced_probs=[round(p, 10) for p in forced]))
    return records
