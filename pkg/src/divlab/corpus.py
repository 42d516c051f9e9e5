"""Parallel corpus handling: parsing, filtering, mixing, sentence tags.

Corpora are read from a CoNLL-U-like TSV format (one token per line,
blank line between sentences) where source and target files are aligned
sentence by sentence. Token and head indices are 1-based; head 0 marks
the root and -1 marks a missing annotation. Alignment links are 1-based
indices into the opposite side.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

EQ = "EQ"
DIV = "DIV"

# reserved sentence-level constraint tokens (protected from BPE splitting)
EQ_TAG = "<EQ>"
DIV_TAG = "<DIV>"
RESERVED_TOKENS = (EQ_TAG, DIV_TAG)


class CorpusError(ValueError):
    pass


class ParseError(CorpusError):
    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f"{path}:"
        if line is not None:
            loc += f"{line}: "
        super().__init__(loc + message)
        self.path = path
        self.line = line


@dataclass
class AnnotatedToken:
    surface: str
    pos: str = "_"
    head: int = -1
    deprel: str = ""
    align: frozenset = frozenset()

    def __post_init__(self):
        self.align = frozenset(self.align)


@dataclass
class AnnotatedSentencePair:
    src: list
    tgt: list
    src_factors: list = None
    tgt_factors: list = None
    provenance: object = None  # Optional[synthdiv.CorruptionRecord]

    def __post_init__(self):
        if self.src_factors is None:
            self.src_factors = [EQ] * len(self.src)
        if self.tgt_factors is None:
            self.tgt_factors = [EQ] * len(self.tgt)
        if len(self.src_factors) != len(self.src):
            raise CorpusError("src_factors length does not match src tokens")
        if len(self.tgt_factors) != len(self.tgt):
            raise CorpusError("tgt_factors length does not match tgt tokens")

    def src_surfaces(self):
        return [t.surface for t in self.src]

    def tgt_surfaces(self):
        return [t.surface for t in self.tgt]

    def side_tokens(self, side):
        return self.src if side == "SRC" else self.tgt

    def side_factors(self, side):
        return self.src_factors if side == "SRC" else self.tgt_factors


@dataclass
class Corpus:
    pairs: list
    name: str = ""
    has_factor_tags: bool = False  # True when read from 7-column files

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


@dataclass
class FilterConfig:
    min_len: int = 3
    max_len: int = 80
    numeric_ratio_max: float = 0.5
    copy_edit_ratio_min: float = 0.1


@dataclass
class FilterStats:
    kept: int = 0
    removed_length: int = 0
    removed_numeric: int = 0
    removed_copy: int = 0


_NUMERIC_RE = re.compile(r"[\d.,:%/-]*\d[\d.,:%/-]*")


def _read_sentences(path):
    """Yield (first_line_number, list of raw column rows) per sentence block."""
    sent = []
    start = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                if sent:
                    yield start, sent
                    sent = []
                    start = None
                continue
            if start is None:
                start = lineno
            sent.append((lineno, line))
    if sent:
        yield start, sent


def _parse_sentence(rows, path):
    tokens = []
    saw_factor_column = False
    for lineno, line in rows:
        cols = line.split("\t")
        if len(cols) not in (6, 7):
            raise ParseError(
                f"expected 6 or 7 tab-separated columns, got {len(cols)}",
                path=path, line=lineno)
        idx_s, surface, pos, head_s, deprel, align_s = cols[:6]
        factor = cols[6] if len(cols) == 7 else "_"
        saw_factor_column = saw_factor_column or len(cols) == 7
        try:
            idx = int(idx_s)
            head = int(head_s)
        except ValueError:
            raise ParseError("INDEX and HEAD must be integers",
                             path=path, line=lineno) from None
        if idx != len(tokens) + 1:
            raise ParseError(f"token index {idx} out of order", path=path,
                             line=lineno)
        if not surface:
            raise ParseError("empty SURFACE field", path=path, line=lineno)
        if align_s == "_" or not align_s:
            align = frozenset()
        else:
            try:
                align = frozenset(int(a) for a in align_s.split(","))
            except ValueError:
                raise ParseError("malformed ALIGN field", path=path,
                                 line=lineno) from None
        if factor not in ("_", EQ, DIV):
            raise ParseError(f"unknown FACTOR value {factor!r}", path=path,
                             line=lineno)
        tokens.append((lineno, AnnotatedToken(surface, pos, head,
                                              "" if deprel == "_" else deprel,
                                              align),
                       EQ if factor == "_" else factor))

    n = len(tokens)
    for lineno, tok, _ in tokens:
        if not (tok.head == -1 or 0 <= tok.head <= n):
            raise ParseError(
                f"head index {tok.head} out of range for sentence of "
                f"length {n}", path=path, line=lineno)
    for i, (lineno, tok, _) in enumerate(tokens, start=1):
        if tok.head == i:
            raise ParseError(f"token {i} is its own head", path=path,
                             line=lineno)
    return ([t for _, t, _ in tokens], [f for _, _, f in tokens],
            saw_factor_column)


def parse_parallel(src_file, tgt_file) -> Corpus:
    """Read an aligned pair of annotated TSV files into a Corpus."""
    src_file, tgt_file = Path(src_file), Path(tgt_file)
    src_sents = list(_read_sentences(src_file))
    tgt_sents = list(_read_sentences(tgt_file))
    if len(src_sents) != len(tgt_sents):
        raise ParseError(
            f"sentence count mismatch: {len(src_sents)} in {src_file} vs "
            f"{len(tgt_sents)} in {tgt_file}")
    pairs = []
    has_factor_tags = False
    for (s_start, s_rows), (t_start, t_rows) in zip(src_sents, tgt_sents):
        src_toks, src_facs, s_fac = _parse_sentence(s_rows, src_file)
        tgt_toks, tgt_facs, t_fac = _parse_sentence(t_rows, tgt_file)
        has_factor_tags = has_factor_tags or s_fac or t_fac
        _check_align(src_toks, len(tgt_toks), src_file, s_start)
        _check_align(tgt_toks, len(src_toks), tgt_file, t_start)
        pairs.append(AnnotatedSentencePair(src_toks, tgt_toks,
                                           src_facs, tgt_facs))
    name = src_file.stem
    return Corpus(pairs, name=name, has_factor_tags=has_factor_tags)


def _check_align(tokens, opposite_len, path, line):
    for tok in tokens:
        for a in tok.align:
            if not 1 <= a <= opposite_len:
                raise ParseError(
                    f"alignment index {a} out of range for opposite side of "
                    f"length {opposite_len}", path=path, line=line)


def write_corpus(corpus, src_file, tgt_file):
    """Write a Corpus back to the aligned TSV format (factor column kept)."""

    def fmt_side(tokens, factors, fh):
        for i, (tok, fac) in enumerate(zip(tokens, factors), start=1):
            align = ",".join(str(a) for a in sorted(tok.align)) or "_"
            fh.write("\t".join([str(i), tok.surface, tok.pos or "_",
                                str(tok.head), tok.deprel or "_", align,
                                fac]) + "\n")
        fh.write("\n")

    with open(src_file, "w", encoding="utf-8") as sf, \
            open(tgt_file, "w", encoding="utf-8") as tf:
        for pair in corpus:
            fmt_side(pair.src, pair.src_factors, sf)
            fmt_side(pair.tgt, pair.tgt_factors, tf)


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Plain edit distance between two sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1,
                           prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _is_numeric_token(tok):
    return _NUMERIC_RE.fullmatch(tok) is not None


def heuristic_filter(corpus, cfg: FilterConfig = None):
    """Drop pairs that are too short/long, mostly numbers, or near-copies."""
    cfg = cfg or FilterConfig()
    stats = FilterStats()
    kept = []
    for pair in corpus:
        ns, nt = len(pair.src), len(pair.tgt)
        if not (cfg.min_len <= ns <= cfg.max_len
                and cfg.min_len <= nt <= cfg.max_len):
            stats.removed_length += 1
            continue
        src_num = sum(_is_numeric_token(t.surface) for t in pair.src) / ns
        tgt_num = sum(_is_numeric_token(t.surface) for t in pair.tgt) / nt
        if src_num > cfg.numeric_ratio_max or tgt_num > cfg.numeric_ratio_max:
            stats.removed_numeric += 1
            continue
        s = " ".join(pair.src_surfaces())
        t = " ".join(pair.tgt_surfaces())
        ratio = levenshtein(s, t) / max(len(s), len(t), 1)
        if ratio < cfg.copy_edit_ratio_min:
            stats.removed_copy += 1
            continue
        kept.append(pair)
        stats.kept += 1
    return Corpus(kept, name=corpus.name), stats


def round_half_up(x):
    return int(math.floor(x + 0.5))


def mix_corpora(equivalents, divergents, divergent_fraction, seed) -> Corpus:
    """Replace round(N*fraction) pairs with their divergent versions.

    The two corpora must be index-parallel: divergents[i] is the corrupted
    version of equivalents[i]. Output order is shuffled under the seed.
    """
    if not 0 <= divergent_fraction <= 1:
        raise CorpusError(f"divergent_fraction {divergent_fraction} not in [0, 1]")
    if len(equivalents) != len(divergents):
        raise CorpusError(
            f"index misalignment: {len(equivalents)} equivalents vs "
            f"{len(divergents)} divergents")
    n = len(equivalents)
    rng = random.Random(seed)
    k = round_half_up(n * divergent_fraction)
    chosen = set(rng.sample(range(n), k))
    mixed = [divergents.pairs[i] if i in chosen else equivalents.pairs[i]
             for i in range(n)]
    rng.shuffle(mixed)
    frac_pct = round_half_up(100 * divergent_fraction)
    return Corpus(mixed, name=f"{equivalents.name}+div{frac_pct}")


def prepend_sentence_tag(pair, tag):
    """Insert the reserved <EQ>/<DIV> token at source position 0."""
    if tag not in (EQ, DIV):
        raise CorpusError(f"unknown sentence tag {tag!r}")
    if pair.src and pair.src[0].surface in RESERVED_TOKENS:
        raise CorpusError("pair already carries a sentence tag")
    surface = EQ_TAG if tag == EQ else DIV_TAG
    tag_tok = AnnotatedToken(surface, pos="TAG", head=-1)
    new_src = [tag_tok]
    for tok in pair.src:
        head = tok.head + 1 if tok.head > 0 else tok.head
        new_src.append(replace(tok, head=head))
    # target-side alignment links point into the source: shift them
    new_tgt = [replace(tok, align=frozenset(a + 1 for a in tok.align))
               for tok in pair.tgt]
    return AnnotatedSentencePair(new_src, new_tgt,
                                 [EQ] + list(pair.src_factors),
                                 list(pair.tgt_factors),
                                 provenance=pair.provenance)
