"""Group-parallel generation: every decoder invocation emits K positions.

No key/value cache is kept: each invocation re-runs the decoder over the
whole prefix, so the per-sentence invocation count is the quantity that the
group size shrinks.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import torch

from satnmt.data import pad_batch
from satnmt.model import BOS, EOS, self_mask_for


class Seq2SeqModel(Protocol):
    def encode(self, src: torch.Tensor): ...

    def decoder_forward(self, dec_inputs, enc_states, src_mask, self_mask): ...


MaxLen = int | Callable[[int], int]


@dataclass
class DecodeStats:
    decoder_invocations: int
    emitted_length: int
    K: int
    wall_time: float = 0.0

    def __post_init__(self):
        expected = math.ceil(self.emitted_length / self.K)
        if self.decoder_invocations != expected:
            raise AssertionError(
                f"decoder invocations {self.decoder_invocations} != ceil("
                f"{self.emitted_length}/{self.K}) = {expected}")


@dataclass
class DecodeResult:
    tokens: list[int]
    stats: DecodeStats
    finished: bool
    logprob: float = 0.0


@dataclass
class Hypothesis:
    tokens: tuple[int, ...] = ()
    logprob: float = 0.0
    finished: bool = False
    group_cursor: int = 0

    def sort_key(self):
        return (-self.logprob, self.tokens)


def _resolve_max_len(max_len: MaxLen, src: Sequence[int]) -> int:
    value = max_len(len(src)) if callable(max_len) else int(max_len)
    if value < 1:
        raise ValueError("max_len must be >= 1")
    return value


def _step_inputs(prefixes: torch.Tensor, n: int, K: int) -> torch.Tensor:
    """Shifted decoder inputs of length n from already emitted tokens."""
    lead = torch.full((prefixes.shape[0], min(K, n)), BOS, dtype=torch.long)
    return torch.cat([lead, prefixes[:, : max(n - K, 0)]], dim=1)


def _position_logprobs(model, dec_in, enc, src_mask, start, stop, K, min_len):
    n = dec_in.shape[1]
    logits = model.decoder_forward(dec_in, enc, src_mask, self_mask_for(n, K))
    logp = torch.log_softmax(logits[:, start:stop].double(), dim=-1)
    if min_len:
        ban = torch.arange(start, stop) < min_len
        logp[:, ban, EOS] = -math.inf
    return logp


def greedy_batch(model: Seq2SeqModel, srcs: Sequence[Sequence[int]], K: int,
                 max_len: MaxLen = 64, min_len: int = 0) -> list[DecodeResult]:
    """Greedy decoding of a padded batch; finished sentences leave the batch."""
    t0 = time.perf_counter()
    limits = [_resolve_max_len(max_len, s) for s in srcs]
    enc, src_mask = model.encode(pad_batch(srcs))
    B = len(srcs)
    emitted: list[list[int]] = [[] for _ in range(B)]
    logprob = [0.0] * B
    calls = [0] * B
    done = [False] * B
    g = 0
    while True:
        active = [b for b in range(B) if not done[b]]
        if not active:
            break
        start = g * K
        width = min(K, max(limits[b] for b in active) - start)
        n = start + width
        prefixes = torch.tensor([emitted[b] for b in active], dtype=torch.long).reshape(
            len(active), start)
        idx = torch.tensor(active)
        logp = _position_logprobs(model, _step_inputs(prefixes, n, K), enc[idx],
                                  src_mask[idx], start, n, K, min_len)
        best = logp.argmax(-1)
        for row, b in enumerate(active):
            calls[b] += 1
            take = min(width, limits[b] - start)
            for j in range(take):
                tok = int(best[row, j])
                emitted[b].append(tok)
                logprob[b] += float(logp[row, j, tok])
                if tok == EOS:
                    break
            if emitted[b][-1] == EOS or len(emitted[b]) >= limits[b]:
                done[b] = True
        g += 1
    elapsed = (time.perf_counter() - t0) / B
    results = []
    for b in range(B):
        toks = emitted[b]
        finished = bool(toks) and toks[-1] == EOS
        stats = DecodeStats(calls[b], len(toks), K, elapsed)
        results.append(DecodeResult(toks[:-1] if finished else toks, stats, finished,
                                    logprob[b]))
    return results


def greedy_decode(model: Seq2SeqModel, src: Sequence[int], K: int,
                  max_len: MaxLen = 64, min_len: int = 0) -> DecodeResult:
    """Emit K argmax tokens per invocation until a group contains the terminator.

    The returned tokens stop before the first terminator; anything the same
    group produced after it is discarded.
    """
    return greedy_batch(model, [list(src)], K, max_len, min_len)[0]


def _expand_group(hyps: list[Hypothesis], logp: torch.Tensor, beam: int,
                  width: int) -> list[Hypothesis]:
    """Word-by-word expansion of a group against fixed per-position distributions.

    ``logp[i, j]`` is the distribution hypothesis ``i`` assigns to the j-th
    position of the group; it does not depend on in-group choices.
    """
    V = logp.shape[-1]
    keep = min(beam, V)
    cands = [(h, i) for i, h in enumerate(hyps)]
    for j in range(width):
        pool: list[tuple[Hypothesis, int]] = []
        for h, i in cands:
            if h.finished:
                pool.append((h, i))
                continue
            row = logp[i, j]
            vals, order = torch.sort(row, descending=True, stable=True)
            for v, tok in zip(vals[:keep].tolist(), order[:keep].tolist()):
                if v == -math.inf:
                    break
                pool.append((Hypothesis(h.tokens + (tok,), h.logprob + v, tok == EOS,
                                        h.group_cursor), i))
        pool.sort(key=lambda item: item[0].sort_key())
        cands = pool[:beam]
    return [Hypothesis(h.tokens, h.logprob, h.finished, h.group_cursor + 1)
            for h, _ in cands]


def beam_batch(model: Seq2SeqModel, srcs: Sequence[Sequence[int]], K: int,
               beam_size: int = 4, max_len: MaxLen = 64,
               min_len: int = 0) -> list[DecodeResult]:
    """Beam search for several sentences with one network call per group.

    Scores are raw summed log-probabilities; ties break on the token
    sequence.  A sentence stops once its best finished hypothesis scores at
    least as well as every live one, or at its length limit.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    t0 = time.perf_counter()
    limits = [_resolve_max_len(max_len, s) for s in srcs]
    enc, src_mask = model.encode(pad_batch(srcs))
    B = len(srcs)
    live: list[list[Hypothesis]] = [[Hypothesis()] for _ in range(B)]
    finished: list[list[Hypothesis]] = [[] for _ in range(B)]
    calls = [0] * B
    done = [False] * B
    g = 0
    while True:
        active = [b for b in range(B) if not done[b]]
        if not active:
            break
        start = g * K
        width = min(K, max(limits[b] for b in active) - start)
        n = start + width
        owners = [b for b in active for _ in live[b]]
        prefixes = torch.tensor([list(h.tokens) for b in active for h in live[b]],
                                dtype=torch.long).reshape(len(owners), start)
        idx = torch.tensor(owners)
        logp = _position_logprobs(model, _step_inputs(prefixes, n, K), enc[idx],
                                  src_mask[idx], start, n, K, min_len)
        offset = 0
        for b in active:
            count = len(live[b])
            calls[b] += 1
            take = min(width, limits[b] - start)
            cands = _expand_group(live[b], logp[offset:offset + count], beam_size, take)
            offset += count
            finished[b].extend(h for h in cands if h.finished)
            live[b] = [h for h in cands if not h.finished]
            if not live[b] or start + take >= limits[b]:
                done[b] = True
            elif finished[b]:
                best_done = min(finished[b], key=Hypothesis.sort_key)
                if best_done.logprob >= max(h.logprob for h in live[b]):
                    done[b] = True
        g += 1
    elapsed = (time.perf_counter() - t0) / B
    results = []
    for b in range(B):
        pool = finished[b] or live[b]
        best = min(pool, key=Hypothesis.sort_key)
        length = min(calls[b] * K, limits[b])
        toks = list(best.tokens)
        if best.finished:
            toks = toks[:-1]
        results.append(DecodeResult(toks, DecodeStats(calls[b], length, K, elapsed),
                                    best.finished, best.logprob))
    return results


def beam_search_decode(model: Seq2SeqModel, src: Sequence[int], K: int,
                       beam_size: int = 4, max_len: MaxLen = 64,
                       min_len: int = 0) -> DecodeResult:
    return beam_batch(model, [list(src)], K, beam_size, max_len, min_len)[0]


@dataclass
class SearchConfig:
    beam_size: int = 1
    max_len: MaxLen = 64
    min_len: int = 0


def batch_decode(model: Seq2SeqModel, srcs: Sequence[Sequence[int]], K: int,
                 config: SearchConfig | None = None,
                 batch_size: int = 32) -> list[DecodeResult]:
    """Decode ``srcs`` in consecutive chunks of ``batch_size``; order is preserved."""
    config = config or SearchConfig()
    if not srcs:
        raise ValueError("empty batch")
    out: list[DecodeResult] = []
    for i in range(0, len(srcs), batch_size):
        chunk = [list(s) for s in srcs[i:i + batch_size]]
        if config.beam_size == 1:
            out.extend(greedy_batch(model, chunk, K, config.max_len, config.min_len))
        else:
            out.extend(beam_batch(model, chunk, K, config.beam_size, config.max_len,
                                  config.min_len))
    return out


# --- latency ---------------------------------------------------------------

@dataclass
class LatencyCell:
    K: int
    batch: int
    mean_ms: float
    invocations: int
    speedup_vs_K1: float = float("nan")
    samples_ms: list[float] = field(default_factory=list)


def measure_latency(models: dict[int, Seq2SeqModel], srcs: Sequence[Sequence[int]],
                    batch_sizes: Sequence[int] = (1,), config: SearchConfig | None = None,
                    repetitions: int = 3, warmup: int = 1) -> list[LatencyCell]:
    """Mean per-sentence decode time for every (K, batch size) cell.

    ``models`` maps each group size to the model decoded with it.  Timing runs
    in a single thread; ``warmup`` untimed passes precede the timed ones.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    config = config or SearchConfig()
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    cells = []
    try:
        with torch.inference_mode():
            for K, model in sorted(models.items()):
                for bs in batch_sizes:
                    for _ in range(warmup):
                        batch_decode(model, srcs, K, config, bs)
                    samples = []
                    results = None
                    for _ in range(repetitions):
                        t0 = time.perf_counter()
                        results = batch_decode(model, srcs, K, config, bs)
                        samples.append((time.perf_counter() - t0) * 1000 / len(srcs))
                    calls = sum(r.stats.decoder_invocations for r in results)
                    cells.append(LatencyCell(K, bs, sum(samples) / len(samples), calls,
                                             samples_ms=samples))
    finally:
        torch.set_num_threads(threads)
    base = {c.batch: c.mean_ms for c in cells if c.K == 1}
    for c in cells:
        if c.batch in base:
            c.speedup_vs_K1 = base[c.batch] / c.mean_ms
    return cells


def format_latency(cells: Sequence[LatencyCell], delimiter: str | None = None) -> str:
    """Column-aligned table, or delimited rows when ``delimiter`` is given."""
    header = ["K", "batch", "mean_ms", "invocations", "speedup_vs_K1"]
    rows = [[str(c.K), str(c.batch), f"{c.mean_ms:.3f}", str(c.invocations),
             f"{c.speedup_vs_K1:.2f}"] for c in cells]
    if delimiter is not None:
        return "\n".join(delimiter.join(r) for r in [header] + rows) + "\n"
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths))
                     for r in [header] + rows) + "\n"


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10
