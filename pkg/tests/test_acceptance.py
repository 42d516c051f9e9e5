"""Acceptance suite: nine checks, one printed PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -s` to see the verdict lines as
they appear. The slow end-to-end check (criterion 8) trains nine toy
models and takes around ten minutes on one CPU core.
"""

import json
import math
import random
from collections import Counter

import pytest
import torch

from divlab.bpe import (BOS_ID, EOS_ID, FACTOR_BEGIN_ID, FACTOR_IDS, PAD_ID,
                        encode_corpus, learn_bpe)
from divlab.cli import main as cli_main
from divlab.corpus import DIV, EQ, levenshtein, write_corpus
from divlab.decoding import beam_search, decode_corpus
from divlab.demo import (build_demo_lexicon_entries, demo_lexicon, toy_corpus,
                         train_dev_test_split)
from divlab.metrics import (DEFAULT_STOPLIST, inf_ece, is_degenerated,
                            ter_align, token_records_from_decode)
from divlab.model import (FactoredTransformer, ModelConfig,
                          divergent_aware_loss, grad_check, make_batch,
                          unfactored_loss)
from divlab.synthdiv import (LEX_SUB, PHRASE_REP, SUBTREE_DEL,
                             build_phrase_table, corrupt_corpus,
                             corrupt_corpus_indexed, corruption_stats)
from divlab.training import OptimConfig, train, train_unfactored

torch.set_num_threads(1)


def verdict(number, name, ok):
    line = f"acceptance {number} ({name}): {'PASS' if ok else 'FAIL'}"
    print(line, flush=True)
    assert ok, line


def random_example(g, vocab, max_src=5, max_tgt=5):
    ns = int(torch.randint(1, max_src, (1,), generator=g))
    nt = int(torch.randint(1, max_tgt, (1,), generator=g))
    return {"src_ids": torch.randint(4, vocab, (ns,), generator=g).tolist(),
            "src_factor_ids": torch.randint(1, 3, (ns,),
                                            generator=g).tolist(),
            "tgt_ids": torch.randint(4, vocab, (nt,), generator=g).tolist(),
            "tgt_factor_ids": torch.randint(1, 3, (nt,),
                                            generator=g).tolist()}


def test_1_gradient_fidelity():
    configs = [
        dict(d_token_embed=12, d_factor_embed=4, n_layers=1, n_heads=2),
        dict(d_token_embed=12, d_factor_embed=4, n_layers=2, n_heads=4),
        dict(d_token_embed=28, d_factor_embed=4, n_layers=1, n_heads=2),
        dict(d_token_embed=28, d_factor_embed=4, n_layers=2, n_heads=4),
        dict(d_token_embed=28, d_factor_embed=4, n_layers=2, n_heads=2),
    ]
    errs = []
    for seed, kw in enumerate(configs):
        torch.manual_seed(seed)
        cfg = ModelConfig(vocab_size=12, d_ff=16, dropout=0.0,
                          label_smoothing=0.0, **kw).validate()
        assert cfg.d_model in (16, 32)
        model = FactoredTransformer(cfg)
        g = torch.Generator().manual_seed(seed)
        batch = make_batch([random_example(g, 12) for _ in range(2)])
        errs.append(grad_check(model, batch, eps=1e-4, n_samples=120,
                               seed=seed))
    verdict(1, "gradient fidelity", max(errs) < 1e-4)


def test_2_singleton_factor_vocab_reduction():
    g = torch.Generator().manual_seed(2)
    worst = 0.0
    for _ in range(100):
        batch = make_batch([random_example(g, 12) for _ in range(3)])
        b, t = batch.tgt_ids.shape
        token_logits = torch.randn(b, t, 12, generator=g)
        factor_logits = torch.randn(b, t, 1, generator=g)
        combined = divergent_aware_loss(token_logits, factor_logits, batch,
                                        label_smoothing=0.0)
        plain = unfactored_loss(token_logits, batch, label_smoothing=0.0)
        worst = max(worst, abs(float(combined.total) - float(plain)))
    verdict(2, "singleton factor vocab reduction", worst < 1e-6)


def brute_force_degenerated(hyp, ref, n_min=2, n_max=4,
                            stoplist=DEFAULT_STOPLIST):
    hyp = [t for t in hyp if t.lower() not in stoplist]
    ref = [t for t in ref if t.lower() not in stoplist]
    for n in range(n_min, n_max + 1):
        hc = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
        rc = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        for gram, c in hc.items():
            if c >= 2 and rc[gram] <= 1:
                return True
    return False


def test_3_degeneration_oracle():
    rng = random.Random(33)
    vocab = ["a", "b", "c", "d", "e"]
    ok = True
    for _ in range(1000):
        hyp = [rng.choice(vocab) for _ in range(rng.randint(0, 12))]
        ref = [rng.choice(vocab) for _ in range(rng.randint(0, 12))]
        ok = ok and (is_degenerated(hyp, ref) ==
                     brute_force_degenerated(hyp, ref))
    hyp = ("sculpture , engineering and architecture , and the "
           "engineering and architecture").split()
    ref = "sculpture , engineering and architecture".split()
    ok = ok and is_degenerated(hyp, ref)
    verdict(3, "degeneration oracle", ok)


def ref_spans(ref):
    return {tuple(ref[i:i + n]) for n in range(1, len(ref) + 1)
            for i in range(len(ref) - n + 1)}


def exhaustive_ter_edits(hyp, ref, max_depth=3):
    spans = ref_spans(ref)
    best = levenshtein(hyp, ref)

    def rec(cur, k):
        nonlocal best
        d = levenshtein(cur, ref)
        best = min(best, k + d)
        if k >= max_depth or d == 0 or k + 1 >= best:
            return
        n = len(cur)
        for length in range(1, n + 1):
            for start in range(n - length + 1):
                if tuple(cur[start:start + length]) not in spans:
                    continue
                span = cur[start:start + length]
                rest = cur[:start] + cur[start + length:]
                for pos in range(len(rest) + 1):
                    if pos == start:
                        continue
                    rec(rest[:pos] + span + rest[pos:], k + 1)

    rec(list(hyp), 0)
    return best


CURATED = [
    ("a b c", "a b c"),
    ("b a", "a b"),
    ("a x", "a b"),
    ("a b c", "c a b"),
    ("b c a", "a b c"),
    ("x y", "y x"),
    ("a b c d", "b a d c"),
    ("the cat sat", "cat the sat"),
    ("a a b", "b a a"),
    ("", "a b"),
    ("d c b a", "a b c d"),
    ("a b x d", "a b c d"),
]


def test_4_ter_oracle():
    ok = True
    for hyp, ref in CURATED:
        hyp, ref = hyp.split(), ref.split()
        assert len(hyp) <= 6 and len(ref) <= 6
        out = ter_align(hyp, ref)
        ok = ok and out.edits == exhaustive_ter_edits(hyp, ref)
    out = ter_align(["b", "a"], ["a", "b"])
    ok = ok and out.ter_score == pytest.approx(0.5)
    rng = random.Random(44)
    vocab = ["a", "b", "c", "d", "e"]
    for _ in range(1000):
        hyp = [rng.choice(vocab) for _ in range(rng.randint(0, 8))]
        ref = [rng.choice(vocab) for _ in range(rng.randint(0, 8))]
        ok = ok and ter_align(hyp, ref).edits <= levenshtein(hyp, ref)
    verdict(4, "TER oracle", ok)


def test_5_calibration_identities():
    rng = random.Random(55)
    records = []
    for _ in range(10 ** 6):
        c = rng.random()
        records.append((c, rng.random() < c))
    calibrated = inf_ece(records).inf_ece
    hand = inf_ece([(0.8, True), (0.6, False)], n_bins=1).inf_ece
    verdict(5, "calibration identities",
            calibrated < 0.01 and hand == pytest.approx(0.2, abs=1e-12))


ALLOWED = [EOS_ID, 3, 4]


def random_toy_model(seed, factored):
    torch.manual_seed(seed)
    cfg = ModelConfig(vocab_size=5,
                      d_token_embed=12 if factored else 16,
                      d_factor_embed=4 if factored else 0,
                      n_layers=1, n_heads=2, d_ff=16, dropout=0.0,
                      factored=factored)
    model = FactoredTransformer(cfg)
    model.eval()
    return model


def oracle_step_logp(model, src_ids, prefix, factors):
    src = torch.tensor([list(src_ids) + [EOS_ID]])
    fac = torch.full_like(src, FACTOR_IDS[EQ])
    pad = src.eq(PAD_ID)
    memory = model.encode(src, fac, pad)
    t = len(prefix) + 1
    tok_in = torch.tensor([[BOS_ID] + list(prefix)])
    fac_in = torch.full((1, t), FACTOR_BEGIN_ID, dtype=torch.long)
    for k in range(2, t):
        fac_in[0, k] = FACTOR_IDS[factors[k - 1]]
    token_logits, factor_logits = model.decode(memory, pad, tok_in, fac_in)
    logp = torch.log_softmax(token_logits[0, -1].double(), dim=-1)
    if factor_logits is not None:
        eq = float(factor_logits[0, -1, FACTOR_IDS[EQ]])
        dv = float(factor_logits[0, -1, FACTOR_IDS[DIV]])
        label = DIV if dv > eq else EQ
    else:
        label = EQ
    return logp, label


def enumerate_best(model, src_ids, max_len):
    best = None

    def visit(prefix, factors, score):
        nonlocal best
        done = prefix and (prefix[-1] == EOS_ID or len(prefix) == max_len)
        if done:
            key = (-score, tuple(prefix))
            if best is None or key < best[0]:
                best = (key, list(prefix), score)
            return
        with torch.no_grad():
            logp, label = oracle_step_logp(model, src_ids, prefix, factors)
        for tok in ALLOWED:
            visit(prefix + [tok], factors + [label], score + float(logp[tok]))

    visit([], [], 0.0)
    return best[1], best[2]


def greedy_tokens(model, src_ids, max_len):
    prefix, factors = [], []
    with torch.no_grad():
        while len(prefix) < max_len:
            logp, label = oracle_step_logp(model, src_ids, prefix, factors)
            masked = logp.clone()
            masked[PAD_ID] = masked[BOS_ID] = -math.inf
            tok = int(masked.argmax())
            prefix.append(tok)
            factors.append(label)
            if tok == EOS_ID:
                break
    return prefix


def test_6_beam_search_oracle():
    ok = True
    for seed in range(50):
        model = random_toy_model(seed, factored=seed % 2 == 0)
        src = [3, 4, 3][: 1 + seed % 3]
        hyps = beam_search(model, src, beam=27, max_len=3)
        tokens, score = enumerate_best(model, src, max_len=3)
        ok = ok and hyps[0].tokens == tokens
        ok = ok and abs(hyps[0].score - score) < 1e-9
        one = beam_search(model, src, beam=1, max_len=3)
        ok = ok and one[0].tokens == greedy_tokens(model, src, max_len=3)
    verdict(6, "beam search oracle", ok)


def tree_is_valid(tokens):
    n = len(tokens)
    heads = [t.head for t in tokens]
    if not all(0 <= h <= n for h in heads):
        return False
    for i in range(n):
        seen, node = set(), i + 1
        while node != 0:
            if node in seen:
                return False
            seen.add(node)
            node = heads[node - 1]
    return True


def check_spans_only(original, corrupted):
    rec = corrupted.provenance
    before = [t.surface for t in original.side_tokens(rec.side)]
    after = [t.surface for t in corrupted.side_tokens(rec.side)]
    if rec.kind == SUBTREE_DEL:
        deleted = {i for s, e in rec.affected_spans for i in range(s, e)}
        survivors = [w for i, w in enumerate(before) if i not in deleted]
        return after == survivors
    if len(before) != len(after):
        return False
    changed = {i for s, e in rec.affected_spans for i in range(s, e)}
    return all(a == b for i, (a, b) in enumerate(zip(before, after))
               if i not in changed)


def test_7_corruption_soundness(toy500):
    params = {LEX_SUB: {"lexicon": demo_lexicon()},
              PHRASE_REP: {"table": build_phrase_table(toy500, 2, 4)},
              SUBTREE_DEL: {}}
    ok = True
    bands = {}
    for kind, kw in params.items():
        corrupted, kept = corrupt_corpus_indexed(toy500, kind, kw, seed=1)
        for out, idx in zip(corrupted, kept):
            pair = toy500[idx]
            ok = ok and check_spans_only(pair, out)
            rec = out.provenance
            if kind == PHRASE_REP:
                ok = ok and ([t.pos for t in out.side_tokens(rec.side)] ==
                             [t.pos for t in pair.side_tokens(rec.side)])
            if kind == SUBTREE_DEL:
                ok = ok and tree_is_valid(out.side_tokens(rec.side))
        pct = corruption_stats(corrupted).pct_corrupted
        bands[kind] = pct
        ok = ok and 5.0 <= pct <= 20.0
    print("  %Corr per kind:", {k: round(v, 2) for k, v in bands.items()})
    verdict(7, "corruption soundness", ok)


@pytest.mark.slow
def test_8_directional_end_to_end():
    corpus = toy_corpus(1900, seed=7, pp_continue=0.3, max_pps=1)
    train_c, dev_c, test_c = train_dev_test_split(corpus, 150, 150, seed=7)
    params = {"lexicon": demo_lexicon(), "max_subs": 4, "tag_opposite": True}
    train_div = corrupt_corpus(train_c, LEX_SUB, params, seed=11)
    dev_div = corrupt_corpus(dev_c, LEX_SUB, params, seed=12)
    bpe = learn_bpe(train_c, 350)
    cfg = ModelConfig(vocab_size=bpe.vocab_size, d_token_embed=28,
                      d_factor_embed=4, n_layers=2, n_heads=4, d_ff=64,
                      dropout=0.1, label_smoothing=0.0)
    opt = OptimConfig(learning_rate=2e-3, max_updates=2600,
                      checkpoint_every=100)
    test_ex = encode_corpus(test_c, bpe)

    def evaluate(model):
        recs = decode_corpus(model, test_ex, bpe, beam=5, max_len=20)
        report = inf_ece(token_records_from_decode(recs))
        forced = [p for r in recs for p in r.forced_probs]
        return (report.overall_acc, report.inf_ece,
                sum(forced) / len(forced))

    setups = {"EQ": (train_unfactored, train_c, dev_c),
              "AG": (train_unfactored, train_div, dev_div),
              "FA": (train, train_div, dev_div)}
    encoded = {name: (encode_corpus(tr, bpe), encode_corpus(dv, bpe))
               for name, (_, tr, dv) in setups.items()}
    results = {name: [] for name in setups}
    for seed in (1, 2, 3):
        for name, (fn, _, _) in setups.items():
            model, _ = fn(*encoded[name], cfg, opt, seed=seed)
            results[name].append(evaluate(model))
            print(f"  seed {seed} {name}:",
                  [round(x, 4) for x in results[name][-1]], flush=True)

    def mean(name, col):
        return sum(r[col] for r in results[name]) / len(results[name])

    acc_eq, acc_ag, acc_fa = (mean(n, 0) for n in ("EQ", "AG", "FA"))
    ece_ag, ece_fa = mean("AG", 1), mean("FA", 1)
    forced_eq, forced_ag = mean("EQ", 2), mean("AG", 2)
    ok = (acc_ag < acc_eq
          and forced_ag < forced_eq
          and acc_fa - acc_ag >= 0.5 * (acc_eq - acc_ag)
          and ece_fa < ece_ag)
    verdict(8, "directional end to end", ok)


def run_pipeline(root, out):
    root.mkdir(parents=True, exist_ok=True)
    corpus = toy_corpus(60, seed=5, pp_continue=0.3, max_pps=1)
    train_part, dev, test = train_dev_test_split(corpus, 10, 10, seed=5)
    for name, part in (("train", train_part), ("dev", dev), ("test", test)):
        write_corpus(part, root / f"{name}.src.tsv", root / f"{name}.tgt.tsv")
    (root / "lexicon.json").write_text(
        json.dumps(build_demo_lexicon_entries()), encoding="utf-8")

    def cfg(name, **body):
        path = root / name
        path.write_text(json.dumps(body), encoding="utf-8")
        return str(path)

    assert cli_main(["corrupt", "--config", cfg(
        "corrupt.json", train_src=str(root / "train.src.tsv"),
        train_tgt=str(root / "train.tgt.tsv"),
        lexicon=str(root / "lexicon.json"), filter=False, seed=3,
        out_dir=str(out))]) == 0
    assert cli_main(["mix", "--config", cfg(
        "mix.json",
        equivalents_src=str(root / "train.src.tsv"),
        equivalents_tgt=str(root / "train.tgt.tsv"),
        divergents_src=str(out / "corpora" / "lex_sub.src.tsv"),
        divergents_tgt=str(out / "corpora" / "lex_sub.tgt.tsv"),
        divergents_kept=str(out / "corpora" / "lex_sub.kept.json"),
        fractions=[0.5], seed=3, out_dir=str(out))]) == 0
    train_cfg = cfg(
        "train.json",
        train_src=str(out / "corpora" / "mix_f50.src.tsv"),
        train_tgt=str(out / "corpora" / "mix_f50.tgt.tsv"),
        dev_src=str(root / "dev.src.tsv"), dev_tgt=str(root / "dev.tgt.tsv"),
        bpe_merges=60,
        model={"d_token_embed": 12, "d_factor_embed": 4, "n_layers": 1,
               "n_heads": 2, "d_ff": 16, "dropout": 0.0,
               "label_smoothing": 0.0},
        optimizer={"learning_rate": 0.002, "batch_tokens": 256,
                   "checkpoint_every": 10, "max_updates": 20},
        seeds=[1], fraction=0.5, out_dir=str(out))
    assert cli_main(["train", "--config", train_cfg,
                     "--variant", "DIV_FACTORIZED"]) == 0
    assert cli_main(["train", "--config", train_cfg,
                     "--variant", "DIV_AGNOSTIC"]) == 0
    assert cli_main(["decode", "--config", cfg(
        "decode.json", test_src=str(root / "test.src.tsv"),
        test_tgt=str(root / "test.tgt.tsv"), beams=[1, 2], max_len=12,
        out_dir=str(out))]) == 0
    assert cli_main(["report", "--config", cfg(
        "report.json", out_dir=str(out))]) == 0


def test_9_report_layer_determinism(tmp_path):
    run_pipeline(tmp_path / "a", tmp_path / "a" / "out")
    run_pipeline(tmp_path / "b", tmp_path / "b" / "out")
    ok = True
    for name in ("reports/metrics.csv", "reports/plots.json",
                 "reports/corruption_stats.csv"):
        first = (tmp_path / "a" / "out" / name).read_bytes()
        second = (tmp_path / "b" / "out" / name).read_bytes()
        ok = ok and first == second
    verdict(9, "report layer determinism", ok)
