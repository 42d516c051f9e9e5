"""Experiment orchestration CLI.

    divlab corrupt|mix|train|decode|report --config <file> [--seed N --out DIR]

Configuration lives in a JSON file; command-line flags win over config
values. Outputs land in out_dir/{corpora,checkpoints,logs,reports} with
names that include variant, divergent fraction, seed, and beam so reruns
can skip work that already exists.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from pathlib import Path

import torch

from . import bpe as bpe_mod
from . import metrics as metrics_mod
from .corpus import (DIV, EQ, Corpus, CorpusError, FilterConfig,
                     heuristic_filter, mix_corpora, parse_parallel,
                     prepend_sentence_tag, round_half_up, write_corpus)
from .decoding import decode_corpus, read_decode_log, write_decode_log
from .model import ModelConfig
from .synthdiv import (KINDS, SUBTREE_DEL, CorruptionStats, Lexicon,
                       SynthDivError, build_phrase_table,
                       corrupt_corpus_indexed, corruption_stats)
from .training import (OptimConfig, load_checkpoint, save_checkpoint, train,
                       train_unfactored)

VARIANTS = ("EQUIVALENTS", "DIV_AGNOSTIC", "DIV_TAGGED", "DIV_FACTORIZED")


class CliError(RuntimeError):
    pass


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _out_dirs(cfg):
    out = Path(cfg.get("out_dir", "out"))
    dirs = {name: out / name
            for name in ("corpora", "checkpoints", "logs", "reports")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def _frac_pct(fraction):
    return round_half_up(100 * fraction)


def _read_corpus(cfg, key_prefix):
    src = cfg.get(f"{key_prefix}_src")
    tgt = cfg.get(f"{key_prefix}_tgt")
    if not src or not tgt:
        raise CliError(f"config must set {key_prefix}_src and {key_prefix}_tgt")
    return parse_parallel(src, tgt)


def cmd_corrupt(cfg):
    """Write one corrupted corpus per corruption kind plus a stats CSV."""
    dirs = _out_dirs(cfg)
    corpus = _read_corpus(cfg, "train")
    if cfg.get("filter", True):
        corpus, _ = heuristic_filter(corpus,
                                     FilterConfig(**cfg.get("filter_config",
                                                            {})))
    seed = int(cfg.get("seed", 1))
    kinds = cfg.get("corruption_kinds", list(KINDS))
    params_all = cfg.get("corruption_params", {})
    stats_side = cfg.get("stats_side", "TGT")

    stats_rows = []
    for kind in kinds:
        if kind not in KINDS:
            raise CliError(f"unknown corruption kind {kind!r}")
        params = dict(params_all.get(kind, {}))
        if kind == "LEX_SUB":
            lex_path = cfg.get("lexicon")
            if not lex_path:
                raise CliError("LEX_SUB requires a 'lexicon' path in config")
            params["lexicon"] = Lexicon.load(lex_path)
        elif kind == "PHRASE_REP":
            params["table"] = build_phrase_table(
                corpus, params.pop("min_len", 2), params.pop("max_len", 4))
        elif kind == SUBTREE_DEL:
            side = params.get("side", "TGT")
            check_sides = ["SRC", "TGT"] if side == "RANDOM" else [side]
            for s in check_sides:
                if all(any(t.head == -1 for t in p.side_tokens(s))
                       for p in corpus):
                    raise CliError(
                        f"subtree deletion needs dependency annotations on "
                        f"the {s} side")
        corrupted, kept = corrupt_corpus_indexed(corpus, kind, params, seed)
        stem = dirs["corpora"] / kind.lower()
        write_corpus(corrupted, f"{stem}.src.tsv", f"{stem}.tgt.tsv")
        with open(f"{stem}.kept.json", "w", encoding="utf-8") as fh:
            json.dump(kept, fh)
        stats = corruption_stats(corrupted, side=stats_side)
        stats_rows.append((kind, stats))

    equiv_stats = corruption_stats(corpus, side=stats_side)
    stats_path = dirs["reports"] / "corruption_stats.csv"
    with open(stats_path, "w", encoding="utf-8") as fh:
        fh.write("version," + CorruptionStats.CSV_HEADER + "\n")
        fh.write(f"equivalents,{equiv_stats.to_csv_row()}\n")
        for kind, stats in stats_rows:
            fh.write(f"{kind.lower()},{stats.to_csv_row()}\n")
    return stats_path


def cmd_mix(cfg):
    """Write one mixed corpus per divergent fraction in the grid."""
    dirs = _out_dirs(cfg)
    equivalents = _read_corpus(cfg, "equivalents")
    divergents = _read_corpus(cfg, "divergents")
    kept_path = cfg.get("divergents_kept")
    if kept_path:
        with open(kept_path, encoding="utf-8") as fh:
            kept = json.load(fh)
        equivalents = Corpus([equivalents.pairs[i] for i in kept],
                             name=equivalents.name)
    seed = int(cfg.get("seed", 1))
    outputs = []
    for fraction in cfg.get("fractions", [0.0, 0.1, 0.2, 0.5, 0.7, 1.0]):
        mixed = mix_corpora(equivalents, divergents, fraction, seed)
        stem = dirs["corpora"] / f"mix_f{_frac_pct(fraction)}"
        write_corpus(mixed, f"{stem}.src.tsv", f"{stem}.tgt.tsv")
        outputs.append(stem)
    return outputs


def _tag_for_pair(pair):
    divergent = (any(f == DIV for f in pair.src_factors)
                 or any(f == DIV for f in pair.tgt_factors))
    return DIV if divergent else EQ


def cmd_train(cfg, variant=None):
    """Train one model variant per seed on the configured corpus."""
    variant = variant or cfg.get("variant")
    if variant not in VARIANTS:
        raise CliError(f"variant must be one of {VARIANTS}, got {variant!r}")
    dirs = _out_dirs(cfg)
    torch.set_num_threads(int(cfg.get("torch_threads", 1)))

    train_corpus = _read_corpus(cfg, "train")
    dev_corpus = _read_corpus(cfg, "dev")
    has_div = any(_tag_for_pair(p) == DIV for p in train_corpus)
    if variant == "DIV_FACTORIZED" and not train_corpus.has_factor_tags:
        raise CliError(
            "DIV_FACTORIZED requires a corpus with a factor column")

    if variant == "DIV_TAGGED":
        train_corpus = Corpus([prepend_sentence_tag(p, _tag_for_pair(p))
                               for p in train_corpus],
                              name=train_corpus.name)
        # inference-style tagging for dev: every pair is tagged <EQ>
        dev_corpus = Corpus([prepend_sentence_tag(p, EQ)
                             for p in dev_corpus], name=dev_corpus.name)

    num_merges = int(cfg.get("bpe_merges", 500))
    bpe = bpe_mod.learn_bpe(train_corpus, num_merges)

    model_cfg_dict = dict(cfg.get("model", {}))
    model_cfg_dict["vocab_size"] = bpe.vocab_size
    model_cfg_dict["factored"] = variant == "DIV_FACTORIZED"
    config = ModelConfig(**model_cfg_dict).validate()
    optim = OptimConfig(**cfg.get("optimizer", {}))

    train_ex = bpe_mod.encode_corpus(train_corpus, bpe)
    dev_ex = bpe_mod.encode_corpus(dev_corpus, bpe)

    fraction = cfg.get("fraction", 1.0 if has_div else 0.0)
    outputs = []
    for seed in cfg.get("seeds", [1]):
        stem = f"{variant}_f{_frac_pct(fraction)}_s{seed}"
        ckpt_path = dirs["checkpoints"] / f"{stem}.pt"
        log_path = dirs["logs"] / f"{stem}.train.csv"
        if variant == "DIV_FACTORIZED":
            model, log = train(train_ex, dev_ex, config, optim, seed=seed)
        else:
            model, log = train_unfactored(train_ex, dev_ex, config, optim,
                                          seed=seed)
        save_checkpoint(model, ckpt_path)
        bpe.save(dirs["checkpoints"] / f"{stem}.bpe.json")
        log.save(log_path)
        outputs.append(ckpt_path)
    return outputs


def cmd_decode(cfg):
    """Produce one decode log per (checkpoint, beam); skips existing logs."""
    dirs = _out_dirs(cfg)
    torch.set_num_threads(int(cfg.get("torch_threads", 1)))
    test_corpus = _read_corpus(cfg, "test")
    beams = cfg.get("beams", [5])
    max_len = int(cfg.get("max_len", 80))
    length_norm = bool(cfg.get("length_norm", False))

    checkpoints = cfg.get("checkpoints")
    if not checkpoints:
        checkpoints = sorted(str(p) for p in
                             dirs["checkpoints"].glob("*.pt"))
    outputs = []
    for ckpt in checkpoints:
        ckpt = Path(ckpt)
        model = load_checkpoint(ckpt)
        bpe = bpe_mod.BpeModel.load(ckpt.with_suffix("").as_posix()
                                    + ".bpe.json")
        corpus = test_corpus
        if ckpt.stem.startswith("DIV_TAGGED"):
            corpus = Corpus([prepend_sentence_tag(p, EQ) for p in corpus],
                            name=corpus.name)
        examples = bpe_mod.encode_corpus(corpus, bpe)
        for beam in beams:
            log_path = dirs["logs"] / f"{ckpt.stem}_b{beam}.jsonl"
            if log_path.exists():
                outputs.append(log_path)
                continue
            records = decode_corpus(model, examples, bpe, beam=beam,
                                    max_len=max_len,
                                    length_norm=length_norm)
            write_decode_log(records, log_path)
            outputs.append(log_path)
    return outputs


def _parse_log_name(stem):
    # <variant>_f<frac>_s<seed>_b<beam>
    parts = stem.rsplit("_", 3)
    if len(parts) != 4:
        raise CliError(f"cannot parse decode log name {stem!r}")
    variant, frac, seed, beam = parts
    return variant, int(frac[1:]), int(seed[1:]), int(beam[1:])


def _metrics_for_log(records, degen_cfg=None, n_bins=10):
    hyps = [r.hyp_tokens for r in records]
    refs = [r.ref for r in records]
    token_records = metrics_mod.token_records_from_decode(records)
    report = metrics_mod.inf_ece(token_records, n_bins=n_bins)
    forced = metrics_mod.confidence_profile(records, mode="FORCED")
    forced_conf = (sum(forced.mean_probs) / len(forced.mean_probs)
                   if forced.mean_probs else 0.0)
    return {
        "bleu": metrics_mod.corpus_bleu(hyps, refs),
        "degeneration_pct": metrics_mod.degeneration_rate(records,
                                                          degen_cfg),
        "length_ratio": metrics_mod.length_ratio(hyps, refs),
        "confidence": report.overall_conf,
        "accuracy": report.overall_acc,
        "inf_ece": report.inf_ece,
        "forced_confidence": forced_conf,
    }


METRIC_COLUMNS = ("bleu", "degeneration_pct", "length_ratio", "confidence",
                  "accuracy", "inf_ece", "forced_confidence")


def cmd_report(cfg):
    """Aggregate decode logs into a metrics CSV and plot arrays JSON."""
    dirs = _out_dirs(cfg)
    logs = cfg.get("decode_logs")
    if not logs:
        logs = sorted(str(p) for p in dirs["logs"].glob("*_b*.jsonl"))
    if not logs:
        raise CliError("no decode logs to report on")

    rows = []
    plots = {}
    for log_path in logs:
        log_path = Path(log_path)
        variant, frac, seed, beam = _parse_log_name(log_path.stem)
        records = read_decode_log(log_path)
        row = _metrics_for_log(records)
        rows.append(((variant, frac, seed, beam), row))
        free = metrics_mod.confidence_profile(records, mode="FREE")
        forced = metrics_mod.confidence_profile(records, mode="FORCED")
        plots[log_path.stem] = {"free_profile": free.to_json(),
                                "forced_profile": forced.to_json()}

    csv_path = dirs["reports"] / "metrics.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("variant,fraction_pct,seed,beam,"
                 + ",".join(METRIC_COLUMNS) + "\n")
        for (variant, frac, seed, beam), row in sorted(rows):
            vals = ",".join(f"{row[c]:.4f}" for c in METRIC_COLUMNS)
            fh.write(f"{variant},{frac},{seed},{beam},{vals}\n")
        # aggregate rows: mean and stdev over seeds
        groups = {}
        for (variant, frac, seed, beam), row in rows:
            groups.setdefault((variant, frac, beam), []).append(row)
        for (variant, frac, beam), group in sorted(groups.items()):
            means = {c: statistics.fmean(r[c] for r in group)
                     for c in METRIC_COLUMNS}
            stds = {c: (statistics.stdev(r[c] for r in group)
                        if len(group) > 1 else 0.0)
                    for c in METRIC_COLUMNS}
            vals = ",".join(f"{means[c]:.4f}" for c in METRIC_COLUMNS)
            fh.write(f"{variant}:mean,{frac},-,{beam},{vals}\n")
            vals = ",".join(f"{stds[c]:.4f}" for c in METRIC_COLUMNS)
            fh.write(f"{variant}:stdev,{frac},-,{beam},{vals}\n")

    plots_path = dirs["reports"] / "plots.json"
    with open(plots_path, "w", encoding="utf-8") as fh:
        json.dump(plots, fh, indent=1, sort_keys=True)
    return csv_path


COMMANDS = {
    "corrupt": cmd_corrupt,
    "mix": cmd_mix,
    "train": cmd_train,
    "decode": cmd_decode,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="divlab",
        description="desk-scale experiments on semantic divergences in NMT")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        if name == "train":
            p.add_argument("--variant", choices=VARIANTS, default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
            cfg["seeds"] = [args.seed]
        if args.out is not None:
            cfg["out_dir"] = args.out
        if args.command == "train":
            cmd_train(cfg, variant=getattr(args, "variant", None))
        else:
            COMMANDS[args.command](cfg)
    except (CliError, CorpusError, SynthDivError, OSError,
            json.JSONDecodeError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
