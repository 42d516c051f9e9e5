"""Analysis metrics: degeneration, confidence, TER alignment, token
accuracy, inference calibration (InfECE), corpus BLEU, length statistics.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .corpus import levenshtein

DEFAULT_STOPLIST = frozenset(
    list(".,;:!?()[]{}\"'«»-–—…") +
    ["and", "or", "but", "nor", "so", "yet", "for",
     "et", "ou", "mais", "donc", "car", "ni", "or"])


class MetricError(ValueError):
    pass


@dataclass
class DegenConfig:
    n_min: int = 2
    n_max: int = 4
    stoplist: frozenset = DEFAULT_STOPLIST

    def __post_init__(self):
        if not 1 <= self.n_min <= self.n_max:
            raise MetricError("need 1 <= n_min <= n_max")


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i:i + n])
                   for i in range(len(tokens) - n + 1))


def is_degenerated(hyp_tokens, ref_tokens, cfg: DegenConfig = None) -> bool:
    """True iff some n-gram repeats in the hypothesis but not the reference.

    Stoplist tokens (punctuation, conjunctions) are removed before n-gram
    extraction. An n-gram counts as repeated when it occurs more than once.
    """
    cfg = cfg or DegenConfig()
    hyp = [t for t in hyp_tokens if t.lower() not in cfg.stoplist]
    ref = [t for t in ref_tokens if t.lower() not in cfg.stoplist]
    for n in range(cfg.n_min, cfg.n_max + 1):
        hyp_counts = _ngram_counts(hyp, n)
        ref_counts = _ngram_counts(ref, n)
        for gram, count in hyp_counts.items():
            if count > 1 and ref_counts[gram] <= 1:
                return True
    return False


def degeneration_rate(records, cfg: DegenConfig = None) -> float:
    """Percentage of decode-log records flagged as degenerated."""
    if not records:
        return 0.0
    flagged = sum(is_degenerated(r.hyp_tokens, r.ref, cfg) for r in records)
    return 100.0 * flagged / len(records)


@dataclass
class ConfidenceProfile:
    mode: str                 # FORCED or FREE
    mean_probs: list          # per time step
    supports: list            # sentences contributing at each step

    def to_json(self):
        return {"mode": self.mode, "mean_probs": self.mean_probs,
                "supports": self.supports}


def confidence_profile(records, mode="FREE", max_step=50,
                       min_support=1) -> ConfidenceProfile:
    """Mean token probability per time step across sentences."""
    if mode not in ("FREE", "FORCED"):
        raise MetricError(f"unknown mode {mode!r}")
    sums = [0.0] * max_step
    counts = [0] * max_step
    for rec in records:
        probs = rec.token_probs if mode == "FREE" else rec.forced_probs
        for t, p in enumerate(probs[:max_step]):
            sums[t] += p
            counts[t] += 1
    means, supports = [], []
    for s, c in zip(sums, counts):
        if c >= min_support and c > 0:
            means.append(s / c)
            supports.append(c)
    return ConfidenceProfile(mode=mode, mean_probs=means, supports=supports)


MATCH, SUB, INS, DEL, SHIFT = "MATCH", "SUB", "INS", "DEL", "SHIFT"


@dataclass
class TerAlignment:
    ops: list          # [(op, ...), ...]; shifts first, then edit ops
    ter_score: float
    matched: list      # per original-hypothesis-token flag
    shifts: int
    edits: int         # shifts + sub + ins + del


def _lev_align(hyp, ref):
    """Levenshtein alignment; returns (edits, ops, matched_hyp_positions).

    Backtrace prefers matches, then substitutions, deletions, insertions,
    which makes the alignment deterministic.
    """
    n, m = len(hyp), len(ref)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = hyp[i - 1] == ref[j - 1]
            dist[i][j] = min(dist[i - 1][j - 1] + (0 if same else 1),
                             dist[i - 1][j] + 1,
                             dist[i][j - 1] + 1)
    ops = []
    matched = [False] * n
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and hyp[i - 1] == ref[j - 1] \
                and dist[i][j] == dist[i - 1][j - 1]:
            ops.append((MATCH, i - 1, j - 1))
            matched[i - 1] = True
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i][j] == dist[i - 1][j - 1] + 1:
            ops.append((SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i][j] == dist[i - 1][j] + 1:
            ops.append((DEL, i - 1))
            i -= 1
        else:
            ops.append((INS, j - 1))
            j -= 1
    ops.reverse()
    return dist[n][m], ops, matched


def _ref_spans(ref):
    spans = set()
    for n in range(1, len(ref) + 1):
        for i in range(len(ref) - n + 1):
            spans.add(tuple(ref[i:i + n]))
    return spans


def enumerate_shifts(tokens, ref_spans, max_span=10):
    """All (new_token_list, moved_index_map) single-shift results."""
    n = len(tokens)
    for length in range(1, min(max_span, n) + 1):
        for start in range(n - length + 1):
            span = tokens[start:start + length]
            if tuple(t for t, _ in span) not in ref_spans:
                continue
            rest = tokens[:start] + tokens[start + length:]
            for pos in range(len(rest) + 1):
                if pos == start:
                    continue
                yield rest[:pos] + span + rest[pos:], (start, length, pos)


def ter_align(hyp, ref, case_insensitive=True, max_span=10) -> TerAlignment:
    """Greedy-shift TER alignment.

    Repeatedly applies the block shift that most reduces the Levenshtein
    distance (the shifted span must exactly match a span of the
    reference), then computes the final edit alignment. ter_score =
    (shifts + substitutions + insertions + deletions) / |ref|; an empty
    reference scores |hyp| edits over a length of 1.
    """
    norm = (lambda t: t.lower()) if case_insensitive else (lambda t: t)
    h = [norm(t) for t in hyp]
    r = [norm(t) for t in ref]
    # carry original indices through shifts so matched flags map back
    current = list(zip(h, range(len(h))))
    ref_spans = _ref_spans(r)
    shift_ops = []

    while True:
        base = levenshtein([t for t, _ in current], r)
        if base == 0:
            break
        best = None
        for cand, move in enumerate_shifts(current, ref_spans, max_span):
            d = levenshtein([t for t, _ in cand], r)
            if d < base and (best is None or d < best[0]):
                best = (d, cand, move)
        if best is None:
            break
        _, current, move = best
        shift_ops.append((SHIFT, move[0], move[1], move[2]))

    edit_count, edit_ops, matched_now = _lev_align([t for t, _ in current], r)
    matched = [False] * len(h)
    for pos, (_, orig) in enumerate(current):
        matched[orig] = matched_now[pos]
    total = len(shift_ops) + edit_count
    denom = len(ref) if ref else 1
    return TerAlignment(ops=shift_ops + edit_ops,
                        ter_score=total / denom,
                        matched=matched,
                        shifts=len(shift_ops),
                        edits=total)


def token_accuracy(alignment: TerAlignment):
    """Per-hypothesis-token correctness flags and the overall accuracy."""
    flags = list(alignment.matched)
    acc = sum(flags) / len(flags) if flags else 0.0
    return flags, acc


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    count: int
    mean_conf: float
    mean_acc: float


@dataclass
class CalibrationReport:
    bins: list
    inf_ece: float
    overall_conf: float
    overall_acc: float

    def to_json(self):
        return {"bins": [vars(b) for b in self.bins],
                "inf_ece": self.inf_ece,
                "overall_conf": self.overall_conf,
                "overall_acc": self.overall_acc}


def inf_ece(token_records, n_bins=10) -> CalibrationReport:
    """Inference expected calibration error over (confidence, correct) pairs.

    Equal-width bins over [0, 1]; a confidence c lands in bin
    floor(c * K), with c = 1.0 assigned to the last bin. Empty bins
    contribute zero.
    """
    if n_bins < 1:
        raise MetricError("need at least one bin")
    records = list(token_records)
    total = len(records)
    sums = [[0.0, 0.0, 0] for _ in range(n_bins)]
    conf_total, acc_total = 0.0, 0.0
    for conf, correct in records:
        if not 0.0 <= conf <= 1.0:
            raise MetricError(f"confidence {conf} outside [0, 1]")
        k = min(int(conf * n_bins), n_bins - 1)
        sums[k][0] += conf
        sums[k][1] += 1.0 if correct else 0.0
        sums[k][2] += 1
        conf_total += conf
        acc_total += 1.0 if correct else 0.0
    bins = []
    ece = 0.0
    for k, (c_sum, a_sum, count) in enumerate(sums):
        lo, hi = k / n_bins, (k + 1) / n_bins
        mean_conf = c_sum / count if count else 0.0
        mean_acc = a_sum / count if count else 0.0
        bins.append(CalibrationBin(lo, hi, count, mean_conf, mean_acc))
        if count:
            ece += (count / total) * abs(mean_acc - mean_conf)
    return CalibrationReport(
        bins=bins, inf_ece=ece,
        overall_conf=conf_total / total if total else 0.0,
        overall_acc=acc_total / total if total else 0.0)


def corpus_bleu(hyps, refs, max_n=4, smoothing=None) -> float:
    """Corpus BLEU (0..100): clipped n-gram precisions, brevity penalty.

    smoothing=None returns 0 when any precision is 0; smoothing="exp"
    replaces a zero count at order n with 1 / 2^k (k-th zero), the usual
    exponential fallback.
    """
    if len(hyps) != len(refs):
        raise MetricError("hypothesis and reference counts differ")
    if not hyps:
        return 0.0
    clipped = [0] * max_n
    totals = [0] * max_n
    hyp_len, ref_len = 0, 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h_counts = _ngram_counts(hyp, n)
            r_counts = _ngram_counts(ref, n)
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            clipped[n - 1] += sum(min(c, r_counts[g])
                                  for g, c in h_counts.items())
    log_prec = 0.0
    zeros = 0
    for n in range(max_n):
        if totals[n] == 0:
            return 0.0
        num = clipped[n]
        if num == 0:
            if smoothing == "exp":
                zeros += 1
                p = 1.0 / (2 ** zeros) / totals[n]
            else:
                return 0.0
        else:
            p = num / totals[n]
        log_prec += math.log(p) / max_n
    if hyp_len == 0:
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


def length_ratio(hyps, refs) -> float:
    """Total hypothesis length over total reference length."""
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise MetricError("empty reference corpus")
    return sum(len(h) for h in hyps) / total_ref


def token_records_from_decode(records, case_insensitive=True):
    """TER-align each record and pair token confidences with correctness."""
    out = []
    for rec in records:
        if not rec.hyp_tokens:
            continue
        alignment = ter_align(rec.hyp_tokens, rec.ref,
                              case_insensitive=case_insensitive)
        flags, _ = token_accuracy(alignment)
        for conf, ok in zip(rec.token_probs, flags):
            out.append((conf, ok))
    return out
