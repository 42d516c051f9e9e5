"""Deterministic toy translation task with full annotations.

Sentences follow a small NP V NP (PP) grammar over pseudo-words; the
target side is a deterministic word-for-word mapping of the source, so a
toy transformer can learn the task in minutes on CPU. Every token carries
a POS tag, a dependency head, and a 1:1 alignment link, which is enough
to drive all three corruption kinds.
"""

from __future__ import annotations

import random

from .corpus import AnnotatedSentencePair, AnnotatedToken, Corpus
from .synthdiv import Lexicon

SRC_DET = ["da", "di", "du", "do"]
SRC_ADJ = ["aki", "ilo", "ube", "ora", "esk", "uni", "alo", "epi"]
SRC_NOUN = ["naro", "nilu", "nemo", "noki", "nula", "nive", "nola", "nuri",
            "neta", "nomo", "nezu", "napi", "nuvo", "nima", "noro", "nelu"]
SRC_VERB = ["vati", "volo", "veku", "vamo", "vilo", "vena", "vuko", "visa"]
SRC_PREP = ["pa", "po", "pe", "pu"]


def tgt_of(word):
    """Deterministic source-to-target word mapping."""
    return word + "k"


TGT_DET = [tgt_of(w) for w in SRC_DET]
TGT_ADJ = [tgt_of(w) for w in SRC_ADJ]
TGT_NOUN = [tgt_of(w) for w in SRC_NOUN]
TGT_VERB = [tgt_of(w) for w in SRC_VERB]
TGT_PREP = [tgt_of(w) for w in SRC_PREP]


def _toy_sentence(rng, pp_continue=0.7, max_pps=4):
    """One sentence as a list of [surface, pos, head] rows (1-based heads)."""
    rows = []

    def add(surface, pos, head):
        rows.append([surface, pos, head])
        return len(rows)

    def noun_phrase(head):
        det_i = add(rng.choice(SRC_DET), "D", 0)
        adj_is = []
        r = rng.random()
        n_adj = 0 if r < 0.4 else (1 if r < 0.8 else 2)
        for _ in range(n_adj):
            adj_is.append(add(rng.choice(SRC_ADJ), "A", 0))
        noun_i = add(rng.choice(SRC_NOUN), "N", head)
        rows[det_i - 1][2] = noun_i
        for a in adj_is:
            rows[a - 1][2] = noun_i
        return noun_i

    subj = noun_phrase(0)
    verb = add(rng.choice(SRC_VERB), "V", 0)
    rows[subj - 1][2] = verb
    noun_phrase(verb)
    pps = 0
    while pps < max_pps and rng.random() < pp_continue:
        prep = add(rng.choice(SRC_PREP), "P", verb)
        noun_phrase(prep)
        pps += 1
    return rows


def toy_corpus(n_pairs, seed=0, name="toy", pp_continue=0.7,
               max_pps=4) -> Corpus:
    """Generate an annotated, aligned, all-EQ parallel corpus.

    pp_continue and max_pps control sentence length (each extra
    prepositional phrase adds 3-5 tokens); the defaults average around 13
    tokens per sentence.
    """
    rng = random.Random(seed)
    pairs = []
    for _ in range(n_pairs):
        rows = _toy_sentence(rng, pp_continue=pp_continue, max_pps=max_pps)
        src, tgt = [], []
        for i, (surface, pos, head) in enumerate(rows, start=1):
            align = frozenset([i])
            src.append(AnnotatedToken(surface, pos, head, "dep", align))
            tgt.append(AnnotatedToken(tgt_of(surface), pos, head, "dep",
                                      align))
        pairs.append(AnnotatedSentencePair(src, tgt))
    return Corpus(pairs, name=name)


def _lexicon_entries(words):
    """Ring-map each word to the next one of its class as a 'hypernym'."""
    entries = {}
    for i, w in enumerate(words):
        entries[w] = {"hypernyms": [words[(i + 1) % len(words)]],
                      "hyponyms": []}
    return entries


def build_demo_lexicon_entries():
    entries = {}
    for group in (SRC_NOUN, SRC_VERB, SRC_ADJ,
                  TGT_NOUN, TGT_VERB, TGT_ADJ):
        entries.update(_lexicon_entries(group))
    return entries


def demo_lexicon() -> Lexicon:
    return Lexicon(build_demo_lexicon_entries())


def train_dev_test_split(corpus, dev_size, test_size, seed=0):
    """Deterministic shuffle-and-slice split."""
    pairs = list(corpus.pairs)
    random.Random(seed).shuffle(pairs)
    test = Corpus(pairs[:test_size], name=f"{corpus.name}.test")
    dev = Corpus(pairs[test_size:test_size + dev_size],
                 name=f"{corpus.name}.dev")
    train = Corpus(pairs[test_size + dev_size:], name=f"{corpus.name}.train")
    return train, dev, test
