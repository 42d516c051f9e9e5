import random

import pytest
import torch

from divlab.corpus import AnnotatedSentencePair, AnnotatedToken, Corpus

torch.set_num_threads(1)


def make_pair(src_words, tgt_words, src_pos=None, tgt_pos=None,
              src_heads=None, tgt_heads=None, aligned=True,
              src_factors=None, tgt_factors=None):
    """Build an annotated pair; 1:1 alignment by default when lengths match."""

    def side(words, pos, heads, opp_len):
        pos = pos or ["_"] * len(words)
        heads = heads or [-1] * len(words)
        toks = []
        for i, w in enumerate(words):
            align = frozenset([i + 1]) if aligned and i < opp_len else frozenset()
            toks.append(AnnotatedToken(w, pos[i], heads[i], "dep", align))
        return toks

    src = side(src_words, src_pos, src_heads, len(tgt_words))
    tgt = side(tgt_words, tgt_pos, tgt_heads, len(src_words))
    return AnnotatedSentencePair(src, tgt, src_factors, tgt_factors)


def make_corpus(n, seed=0, vocab=("a", "b", "c", "d", "e"), max_len=8,
                name="rand"):
    rng = random.Random(seed)
    pairs = []
    for _ in range(n):
        ns = rng.randint(1, max_len)
        nt = rng.randint(1, max_len)
        pairs.append(make_pair([rng.choice(vocab) for _ in range(ns)],
                               [rng.choice(vocab) for _ in range(nt)],
                               aligned=False))
    return Corpus(pairs, name=name)


@pytest.fixture(scope="session")
def toy500():
    from divlab.demo import toy_corpus
    return toy_corpus(500, seed=3)
