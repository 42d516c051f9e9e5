"""Synthetic fine-grained divergence generation.

Three corruption kinds are supported, each starting from an equivalent
pair: lexical substitution (swap a word for a hypernym/hyponym from a
file-based lexicon), phrase replacement (swap a span for a different
corpus phrase with the same POS sequence), and subtree deletion (remove a
dependency subtree). Corrupted token positions are tagged DIV; everything
else keeps its surface form and EQ tag.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field, replace

from .corpus import (DIV, EQ, AnnotatedSentencePair, Corpus, CorpusError)

LEX_SUB = "LEX_SUB"
PHRASE_REP = "PHRASE_REP"
SUBTREE_DEL = "SUBTREE_DEL"
KINDS = (LEX_SUB, PHRASE_REP, SUBTREE_DEL)


class SynthDivError(ValueError):
    pass


@dataclass
class CorruptionRecord:
    kind: str
    side: str  # SRC or TGT
    affected_spans: list  # [(start, end)) on the corrupted side; for
                          # SUBTREE_DEL the spans index the original sentence
    original_tokens: list

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SynthDivError(f"unknown corruption kind {self.kind!r}")
        if self.side not in ("SRC", "TGT"):
            raise SynthDivError(f"unknown side {self.side!r}")
        spans = sorted(self.affected_spans)
        if not spans or any(s >= e for s, e in spans):
            raise SynthDivError("affected spans must be nonempty")
        for (_, e1), (s2, _) in zip(spans, spans[1:]):
            if s2 < e1:
                raise SynthDivError("affected spans overlap")


@dataclass
class CorruptionStats:
    sentences: int
    tokens: int
    types: int
    mean_length: float
    pct_corrupted: float

    CSV_HEADER = "#Sents.,#Tokens,#Types,Length,%Corr"

    def to_csv_row(self):
        return (f"{self.sentences},{self.tokens},{self.types},"
                f"{self.mean_length:.2f},{self.pct_corrupted:.2f}")


class Lexicon:
    """Flat word -> {hypernyms, hyponyms} substitution lexicon."""

    def __init__(self, entries):
        self.entries = {}
        for word, entry in entries.items():
            hyper = list(entry.get("hypernyms", []))
            hypo = list(entry.get("hyponyms", []))
            if word in hyper or word in hypo:
                raise SynthDivError(f"{word!r} lists itself as a substitute")
            self.entries[word] = {"hypernyms": hyper, "hyponyms": hypo}

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def substitutes(self, word):
        entry = self.entries.get(word)
        if entry is None:
            return []
        return entry["hypernyms"] + entry["hyponyms"]

    def __len__(self):
        return len(self.entries)


def _require_equivalent(pair):
    if any(f != EQ for f in pair.src_factors + pair.tgt_factors):
        raise SynthDivError("corruption requires an all-EQ equivalent pair")


def _tag_aligned_opposite(pair, side, positions):
    """Tag opposite-side tokens aligned to the given 0-based positions DIV."""
    targets = {p + 1 for p in positions}  # align links are 1-based
    opp_tokens = pair.tgt if side == "SRC" else pair.src
    opp_factors = pair.tgt_factors if side == "SRC" else pair.src_factors
    for i, tok in enumerate(opp_tokens):
        if tok.align and tok.align & targets:
            opp_factors[i] = DIV


def lexical_substitution(pair, lexicon, rng, max_subs=2, side="TGT",
                         tag_opposite=False):
    """Replace up to max_subs words with hypernyms/hyponyms.

    Returns (corrupted_pair, CorruptionRecord) or None when no token on the
    chosen side has a lexicon entry. With tag_opposite, aligned tokens on
    the other side are tagged DIV as well (oracle tags for factored
    training).
    """
    _require_equivalent(pair)
    tokens = list(pair.side_tokens(side))
    candidates = [i for i, t in enumerate(tokens)
                  if lexicon.substitutes(t.surface)]
    if not candidates:
        return None
    n = rng.randint(1, min(max_subs, len(candidates)))
    positions = sorted(rng.sample(candidates, n))
    new_tokens = list(tokens)
    originals = []
    for i in positions:
        subs = lexicon.substitutes(tokens[i].surface)
        originals.append(tokens[i].surface)
        new_tokens[i] = replace(tokens[i], surface=rng.choice(subs))
    factors = [EQ] * len(tokens)
    for i in positions:
        factors[i] = DIV
    record = CorruptionRecord(LEX_SUB, side,
                              [(i, i + 1) for i in positions], originals)
    if side == "SRC":
        out = AnnotatedSentencePair(new_tokens, list(pair.tgt), factors,
                                    [EQ] * len(pair.tgt), provenance=record)
    else:
        out = AnnotatedSentencePair(list(pair.src), new_tokens,
                                    [EQ] * len(pair.src), factors,
                                    provenance=record)
    if tag_opposite:
        _tag_aligned_opposite(out, side, positions)
    return out, record


class PhraseTable:
    """POS-tag-sequence -> deduplicated list of surface phrases."""

    def __init__(self):
        self._table = {}

    def add(self, pos_seq, phrase):
        pos_seq, phrase = tuple(pos_seq), tuple(phrase)
        if len(pos_seq) != len(phrase):
            raise SynthDivError("phrase length does not match its POS key")
        bucket = self._table.setdefault(pos_seq, [])
        if phrase not in bucket:
            bucket.append(phrase)

    def phrases(self, pos_seq):
        return self._table.get(tuple(pos_seq), [])

    def keys(self):
        return self._table.keys()

    def __len__(self):
        return len(self._table)


def build_phrase_table(corpus, min_len=2, max_len=4) -> PhraseTable:
    """Index every n-gram (min_len <= n <= max_len) by its POS sequence."""
    if len(corpus) == 0:
        raise SynthDivError("cannot build a phrase table from an empty corpus")
    table = PhraseTable()
    for pair in corpus:
        for tokens in (pair.src, pair.tgt):
            for n in range(min_len, max_len + 1):
                for i in range(len(tokens) - n + 1):
                    window = tokens[i:i + n]
                    table.add([t.pos for t in window],
                              [t.surface for t in window])
    return table


def phrase_replacement(pair, table, rng, side="TGT", min_len=2, max_len=4,
                       max_span_frac=0.25, tag_opposite=False):
    """Swap one span for a different phrase with the same POS sequence.

    Spans longer than max_span_frac of the sentence are not considered,
    which keeps the per-sentence corruption ratio in a narrow band even on
    short sentences. Returns None when no span has an alternative.
    """
    _require_equivalent(pair)
    tokens = list(pair.side_tokens(side))
    options = []
    for n in range(min_len, max_len + 1):
        if n > max_span_frac * len(tokens):
            continue
        for i in range(len(tokens) - n + 1):
            window = tokens[i:i + n]
            original = tuple(t.surface for t in window)
            alts = [p for p in table.phrases([t.pos for t in window])
                    if p != original]
            if alts:
                options.append((i, n, alts))
    if not options:
        return None
    i, n, alts = options[rng.randrange(len(options))]
    phrase = alts[rng.randrange(len(alts))]
    new_tokens = list(tokens)
    originals = []
    for k in range(n):
        originals.append(tokens[i + k].surface)
        new_tokens[i + k] = replace(tokens[i + k], surface=phrase[k])
    factors = [EQ] * len(tokens)
    for k in range(i, i + n):
        factors[k] = DIV
    record = CorruptionRecord(PHRASE_REP, side, [(i, i + n)], originals)
    if side == "SRC":
        out = AnnotatedSentencePair(new_tokens, list(pair.tgt), factors,
                                    [EQ] * len(pair.tgt), provenance=record)
    else:
        out = AnnotatedSentencePair(list(pair.src), new_tokens,
                                    [EQ] * len(pair.src), factors,
                                    provenance=record)
    if tag_opposite:
        _tag_aligned_opposite(out, side, list(range(i, i + n)))
    return out, record


def _subtrees(tokens):
    """Map 1-based node index -> set of 0-based indices in its subtree."""
    children = {i: [] for i in range(1, len(tokens) + 1)}
    for i, tok in enumerate(tokens, start=1):
        if tok.head > 0:
            children[tok.head].append(i)
    out = {}

    def collect(node):
        acc = {node - 1}
        for ch in children[node]:
            acc |= collect(ch)
        out[node] = acc
        return acc

    roots = [i for i, tok in enumerate(tokens, start=1) if tok.head == 0]
    for r in roots:
        collect(r)
    return out


def _spans_from_indices(indices):
    spans = []
    for i in sorted(indices):
        if spans and spans[-1][1] == i:
            spans[-1] = (spans[-1][0], i + 1)
        else:
            spans.append((i, i + 1))
    return spans


def subtree_deletion(pair, rng, side="TGT", min_size=1, max_frac=0.4):
    """Delete one dependency subtree from the chosen side.

    The opposite side keeps its tokens; those whose alignment links all
    fell inside the deleted span are tagged DIV (content left without a
    counterpart). Returns None when the side lacks dependency annotations
    or no subtree satisfies the size constraints.
    """
    _require_equivalent(pair)
    if side == "RANDOM":
        side = rng.choice(["SRC", "TGT"])
    tokens = list(pair.side_tokens(side))
    if not tokens or any(t.head == -1 for t in tokens):
        return None
    limit = max_frac * len(tokens)
    subtrees = _subtrees(tokens)
    candidates = [node for node, idxs in sorted(subtrees.items())
                  if min_size <= len(idxs) <= limit
                  and len(idxs) < len(tokens)]
    if not candidates:
        return None
    node = candidates[rng.randrange(len(candidates))]
    deleted = subtrees[node]
    keep = [i for i in range(len(tokens)) if i not in deleted]
    old_to_new = {old + 1: new + 1 for new, old in enumerate(keep)}

    new_tokens = []
    for old in keep:
        tok = tokens[old]
        head = tok.head if tok.head <= 0 else old_to_new[tok.head]
        new_tokens.append(replace(tok, head=head))

    deleted_1based = {i + 1 for i in deleted}
    opp_tokens = pair.tgt if side == "SRC" else pair.src
    opp_factors = [EQ] * len(opp_tokens)
    new_opp = []
    for i, tok in enumerate(opp_tokens):
        if tok.align and tok.align <= deleted_1based:
            opp_factors[i] = DIV
        kept_links = frozenset(old_to_new[a] for a in tok.align
                               if a in old_to_new)
        new_opp.append(replace(tok, align=kept_links))

    record = CorruptionRecord(SUBTREE_DEL, side, _spans_from_indices(deleted),
                              [tokens[i].surface for i in sorted(deleted)])
    if side == "SRC":
        out = AnnotatedSentencePair(new_tokens, new_opp,
                                    [EQ] * len(new_tokens), opp_factors,
                                    provenance=record)
    else:
        out = AnnotatedSentencePair(new_opp, new_tokens, opp_factors,
                                    [EQ] * len(new_tokens), provenance=record)
    return out, record


def _pair_rng(seed, index):
    return random.Random((seed << 32) ^ index)


def corrupt_pair(pair, kind, params, rng):
    params = dict(params or {})
    if kind == LEX_SUB:
        lexicon = params.pop("lexicon")
        return lexical_substitution(pair, lexicon, rng, **params)
    if kind == PHRASE_REP:
        table = params.pop("table")
        return phrase_replacement(pair, table, rng, **params)
    if kind == SUBTREE_DEL:
        return subtree_deletion(pair, rng, **params)
    raise SynthDivError(f"unknown corruption kind {kind!r}")


def corrupt_corpus_indexed(corpus, kind, params, seed):
    """Corrupt every pair; returns (corpus, original indices of kept pairs).

    Pairs where the corruption is not applicable are dropped, so the output
    may be smaller than the input. Each pair gets its own random stream
    derived from (seed, index), making the result order-independent.
    """
    pairs, indices = [], []
    for i, pair in enumerate(corpus):
        result = corrupt_pair(pair, kind, params, _pair_rng(seed, i))
        if result is None:
            continue
        pairs.append(result[0])
        indices.append(i)
    return Corpus(pairs, name=f"{corpus.name}.{kind.lower()}"), indices


def corrupt_corpus(corpus, kind, params, seed) -> Corpus:
    return corrupt_corpus_indexed(corpus, kind, params, seed)[0]


def _corrupted_fraction(pair):
    rec = pair.provenance
    if rec is None:
        return 0.0
    if rec.kind == SUBTREE_DEL:
        n_deleted = len(rec.original_tokens)
        original_len = len(pair.side_tokens(rec.side)) + n_deleted
        return n_deleted / original_len
    factors = pair.side_factors(rec.side)
    return sum(f == DIV for f in factors) / len(factors)


def corruption_stats(corpus, side="TGT") -> CorruptionStats:
    """Table-style corpus statistics for one side.

    pct_corrupted averages, per sentence, the fraction of corrupted tokens
    on the side named by the pair's provenance (deleted tokens count
    against the original length for subtree deletion).
    """
    if len(corpus) == 0:
        return CorruptionStats(0, 0, 0, 0.0, 0.0)
    token_counter = Counter()
    lengths = []
    fracs = []
    for pair in corpus:
        tokens = pair.side_tokens(side)
        lengths.append(len(tokens))
        token_counter.update(t.surface for t in tokens)
        fracs.append(_corrupted_fraction(pair))
    total_tokens = sum(lengths)
    return CorruptionStats(
        sentences=len(corpus),
        tokens=total_tokens,
        types=len(token_counter),
        mean_length=total_tokens / len(corpus),
        pct_corrupted=100.0 * sum(fracs) / len(fracs),
    )
