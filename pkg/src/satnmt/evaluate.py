"""BLEU, position-wise cross-entropy, theoretical speedups and report tables."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import torch

from satnmt import masks
from satnmt.data import pad_batch
from satnmt.errors import InvalidArgument
from satnmt.model import BOS, PAD, self_mask_for

Tokens = Sequence[str] | str


def _as_tokens(line: Tokens) -> list[str]:
    return line.split() if isinstance(line, str) else list(line)


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.bleu:.2f} {ps} (BP={self.brevity_penalty:.3f}, "
                f"hyp_len={self.hyp_len}, ref_len={self.ref_len})")


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens],
         max_order: int = 4) -> BleuReport:
    """Corpus-level BLEU-4 against a single reference, no smoothing.

    Orders for which the hypotheses contain no n-gram at all are left out
    of the geometric mean; a zero precision on any other order gives 0.
    """
    if len(hypotheses) != len(references):
        raise InvalidArgument("hypothesis and reference line counts differ")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _as_tokens(hyp), _as_tokens(ref)
        if not r:
            raise InvalidArgument("empty reference line")
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            h_counts, r_counts = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
            totals[n - 1] += sum(h_counts.values())
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    bp = 1.0 if hyp_len >= ref_len else (math.exp(1 - ref_len / hyp_len) if hyp_len else 0.0)
    used = [p for p, t in zip(precisions, totals) if t]
    if not used or min(used) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in used) / len(used))
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


def position_wise_cross_entropy(model, srcs: Sequence[Sequence[int]],
                                tgts: Sequence[Sequence[int]], max_position: int,
                                K: int | None = None, batch_size: int = 64) -> list[float]:
    """Mean teacher-forced cross-entropy per target position ``0..max_position-1``.

    Targets are id sequences (normally ending in eos).  Buckets with no
    tokens are NaN.
    """
    K = model.K if K is None else K
    sums = torch.zeros(max_position, dtype=torch.float64)
    counts = torch.zeros(max_position, dtype=torch.float64)
    with torch.inference_mode():
        for i in range(0, len(srcs), batch_size):
            src = pad_batch(srcs[i:i + batch_size])
            tgt = pad_batch(tgts[i:i + batch_size])
            enc, src_mask = model.encode(src)
            dec_in = masks.shift_targets_batch(tgt, K, BOS)
            logits = model.decoder_forward(dec_in, enc, src_mask,
                                           self_mask_for(tgt.shape[1], K))
            logp = torch.log_softmax(logits.double(), -1)
            ce = -logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
            keep = (tgt != PAD).double()
            width = min(max_position, tgt.shape[1])
            sums[:width] += (ce * keep).sum(0)[:width]
            counts[:width] += keep.sum(0)[:width]
    return [float(s / c) if c > 0 else math.nan for s, c in zip(sums, counts)]


@dataclass
class PeriodicitySummary:
    K: int
    offset_means: list[float]
    monotone_groups: int
    total_groups: int

    @property
    def monotone_fraction(self) -> float:
        return self.monotone_groups / self.total_groups if self.total_groups else math.nan

    def __str__(self) -> str:
        means = " ".join(f"{m:.3f}" for m in self.offset_means)
        return (f"K={self.K} mean CE by in-group offset: {means}; "
                f"non-decreasing within {self.monotone_groups}/{self.total_groups} groups")


def periodicity_summary(ce: Sequence[float], K: int) -> PeriodicitySummary:
    """How position-wise CE behaves inside each complete group of K positions."""
    full = [list(ce[s:s + K]) for s in range(0, len(ce) - K + 1, K)]
    full = [g for g in full if not any(math.isnan(x) for x in g)]
    monotone = sum(all(a <= b for a, b in zip(g, g[1:])) for g in full)
    means = [sum(g[j] for g in full) / len(full) if full else math.nan for j in range(K)]
    return PeriodicitySummary(K, means, monotone, len(full))


def theoretical_acceleration(K: int, a: float = 1.0, b: float = 0.0,
                             strategy: str = "greedy") -> float:
    """Ideal speedup over the word-by-word model.

    ``a`` is the network time per step and ``b`` the search time per step.
    Greedy search gains the full factor K; beam search still pays the search
    cost once per word, giving ``K (a + b) / (a + K b)``.
    """
    if K < 1 or a <= 0 or b < 0:
        raise InvalidArgument("need K >= 1, a > 0, b >= 0")
    if strategy == "greedy":
        return float(K)
    if strategy == "beam":
        return K * (a + b) / (a + K * b)
    raise InvalidArgument(f"unknown strategy {strategy!r}")


@dataclass
class RunSummary:
    label: str
    K: int
    beam: int
    bleu: float
    latency_ms: float


@dataclass
class SpeedQualityRow:
    label: str
    K: int
    beam: int
    bleu: float
    degeneration: int
    latency_ms: float
    speedup: float


def degeneration_percent(bleu_value: float, baseline_bleu: float) -> int:
    """Relative BLEU loss in whole percent; a zero baseline has nothing to lose."""
    if baseline_bleu <= 0:
        return 0
    return round(100 * (1 - bleu_value / baseline_bleu))


def speed_quality_report(baseline: RunSummary | None,
                         runs: Sequence[RunSummary]) -> list[SpeedQualityRow]:
    """Degeneration and speedup of every run relative to the baseline run."""
    if baseline is None:
        raise InvalidArgument("a baseline run is required")
    rows = []
    for r in [baseline, *runs]:
        rows.append(SpeedQualityRow(r.label, r.K, r.beam, r.bleu,
                                    degeneration_percent(r.bleu, baseline.bleu),
                                    r.latency_ms, baseline.latency_ms / r.latency_ms))
    return rows


def format_report(rows: Sequence[SpeedQualityRow], delimiter: str | None = None) -> str:
    header = ["model", "K", "beam", "BLEU", "degeneration", "latency_ms", "speedup"]
    body = [[r.label, str(r.K), str(r.beam), f"{r.bleu:.2f}", f"{r.degeneration}%",
             f"{r.latency_ms:.2f}", f"{r.speedup:.2f}x"] for r in rows]
    if delimiter is not None:
        return "\n".join(delimiter.join(r) for r in [header] + body) + "\n"
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
                     for r in [header] + body) + "\n"


@dataclass
class RepetitionStats:
    consecutive_duplicates: int
    repeated_bigrams: int
    tokens: int


def repetition_stats(sentences: Sequence[Tokens]) -> RepetitionStats:
    """Descriptive counts of immediately repeated tokens and re-used bigrams."""
    dup = rep = total = 0
    for line in sentences:
        toks = _as_tokens(line)
        total += len(toks)
        dup += sum(a == b for a, b in zip(toks, toks[1:]))
        rep += sum(c - 1 for c in _ngrams(toks, 2).values() if c > 1)
    return RepetitionStats(dup, rep, total)


def token_accuracy(hypotheses: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Position-aligned matches divided by the longer length, summed over the corpus."""
    hits = total = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _as_tokens(hyp), _as_tokens(ref)
        hits += sum(a == b for a, b in zip(h, r))
        total += max(len(h), len(r))
    return hits / total if total else 1.0
