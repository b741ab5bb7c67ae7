import itertools
import math

import pytest
import torch

from conftest import random_model
from satnmt import decode
from satnmt.masks import relaxed_causal_mask, shift_targets
from satnmt.model import BOS, EOS


class StreamStub:
    """Argmax at target position t is stream[t], whatever the inputs; counts calls."""

    def __init__(self, stream, V=8):
        self.stream, self.V, self.calls = stream, V, 0

    def encode(self, src):
        return torch.zeros(src.shape[0], src.shape[1], 1), src != 0

    def decoder_forward(self, dec_inputs, enc, src_mask, self_mask):
        self.calls += 1
        B, n = dec_inputs.shape
        logits = torch.zeros(B, n, self.V)
        for t in range(n):
            logits[:, t, self.stream[t] if t < len(self.stream) else 4] = 5.0
        return logits


def test_stub_stream_two_groups():
    stub = StreamStub([4, 5, EOS, 6, 7, 7])
    res = decode.greedy_decode(stub, [4, 2], K=2, max_len=10)
    assert res.tokens == [4, 5] and res.finished
    assert res.stats.decoder_invocations == 2 == stub.calls


def test_invocation_count_law_on_stub():
    stream = [4, 5, 6, 4, 5, 6, EOS, 4, 4]
    res = decode.greedy_decode(StreamStub(stream), [4, 2], K=3, max_len=20)
    assert res.stats.emitted_length == 7 and res.stats.decoder_invocations == 3
    for K in range(1, 10):
        res = decode.greedy_decode(StreamStub(stream), [4, 2], K=K, max_len=20)
        assert res.stats.decoder_invocations == math.ceil(7 / K)
        assert res.tokens == stream[:6]


def test_unfinished_at_max_len():
    res = decode.greedy_decode(StreamStub([4] * 10), [4, 2], K=3, max_len=7)
    assert not res.finished and res.tokens == [4] * 7
    assert res.stats.decoder_invocations == 3


def test_decode_stats_assertion():
    with pytest.raises(AssertionError):
        decode.DecodeStats(decoder_invocations=2, emitted_length=7, K=3)


def test_min_len_suppresses_terminator():
    res = decode.greedy_decode(StreamStub([EOS] * 8), [4, 2], K=2, max_len=6, min_len=6)
    assert len(res.tokens) == 6 and EOS not in res.tokens


def classic_greedy(model, src, max_len):
    """Token-by-token greedy with the strict mask, written out directly."""
    enc, sm = model.encode(torch.tensor([src]))
    out = []
    for _ in range(max_len):
        dec_in = torch.tensor([[BOS] + out])
        logits = model.decoder_forward(dec_in, enc, sm,
                                       torch.ones(len(out) + 1, len(out) + 1).tril().bool())
        tok = int(torch.log_softmax(logits[0, -1].double(), -1).argmax())
        out.append(tok)
        if tok == EOS:
            return out[:-1]
    return out


def sequential_oracle(model, src, K, max_len):
    """Recompute the whole decoder after every group, building inputs from scratch."""
    enc, sm = model.encode(torch.tensor([src]))
    out = []
    while len(out) < max_len:
        n = min(len(out) + K, max_len)
        dec_in = torch.tensor([shift_targets(out + [0] * (n - len(out)), K, BOS)])
        mask = torch.tensor([[j // K <= i // K for j in range(n)] for i in range(n)])
        logp = torch.log_softmax(model.decoder_forward(dec_in, enc, sm, mask)[0].double(), -1)
        for t in range(len(out), n):
            out.append(int(logp[t].argmax()))
            if out[-1] == EOS:
                return out[:-1]
    return out


def test_k1_greedy_is_classic_greedy():
    for seed in range(8):
        model = random_model(seed, V=9)
        src = [4 + (seed + i) % 5 for i in range(5)] + [EOS]
        assert decode.greedy_decode(model, src, 1, 12).tokens == classic_greedy(model, src, 12)


@pytest.mark.parametrize("K", [1, 2, 3, 4])
def test_greedy_equals_sequential_oracle(K):
    for seed in range(6):
        model = random_model(seed, K=K, V=9)
        src = [4 + (3 * seed + i) % 5 for i in range(4)] + [EOS]
        res = decode.greedy_decode(model, src, K, 11)
        assert res.tokens == sequential_oracle(model, src, K, 11)


def test_beam_one_is_greedy():
    for seed in range(6):
        for K in (1, 2, 3):
            model = random_model(seed, K=K, V=9)
            src = [4 + (seed + 2 * i) % 5 for i in range(6)] + [EOS]
            g = decode.greedy_decode(model, src, K, 10)
            b = decode.beam_search_decode(model, src, K, 1, 10)
            assert b.tokens == g.tokens and b.finished == g.finished
            assert b.logprob == pytest.approx(g.logprob, abs=1e-9)


def sequence_logprob(model, src, seq):
    enc, sm = model.encode(torch.tensor([src]))
    dec_in = torch.tensor([[BOS] + seq[:-1]])
    n = len(seq)
    logp = torch.log_softmax(
        model.decoder_forward(dec_in, enc, sm, relaxed_causal_mask(n, 1))[0].double(), -1)
    return sum(float(logp[t, tok]) for t, tok in enumerate(seq))


def brute_force_best(model, src, V, max_len):
    best = None
    for length in range(1, max_len + 1):
        for body in itertools.product([v for v in range(V) if v != EOS], repeat=length - 1):
            seq = list(body) + [EOS]
            score = sequence_logprob(model, src, seq)
            if best is None or score > best[0]:
                best = (score, seq)
    return best


def test_exhaustive_beam_equals_enumeration():
    V, max_len = 5, 4
    for seed in range(3):
        model = random_model(seed, V=V, scale=2.0, dtype=torch.float64)
        src = [3, 4, 4, EOS]
        res = decode.beam_search_decode(model, src, 1, V ** max_len, max_len)
        score, seq = brute_force_best(model, src, V, max_len)
        assert res.tokens + [EOS] == seq
        assert res.logprob == pytest.approx(score, abs=1e-9)


def test_wider_beam_never_scores_worse():
    for seed in range(4):
        model = random_model(seed, K=2, V=7, scale=2.0)
        src = [4, 5, 6, EOS]
        scores = [decode.beam_search_decode(model, src, 2, b, 6) for b in (1, 2, 4, 8, 49)]
        finished = [r.logprob for r in scores if r.finished]
        assert finished == sorted(finished)


def test_batch_decode_matches_single():
    model = random_model(4, K=2, V=12)
    srcs = [[4, 5, 6, 7, 8, EOS], [9, EOS], [5, 5, 10, EOS], [11, 4, 4, 4, 4, 4, 6, EOS]]
    for beam in (1, 3):
        config = decode.SearchConfig(beam, 9)
        single = [decode.batch_decode(model, [s], 2, config, 1)[0].tokens for s in srcs]
        batched = [r.tokens for r in decode.batch_decode(model, srcs, 2, config, 4)]
        assert batched == single
        perm = [2, 0, 3, 1]
        permuted = decode.batch_decode(model, [srcs[i] for i in perm], 2, config, 3)
        assert [r.tokens for r in permuted] == [single[i] for i in perm]


def test_measure_latency_table():
    models = {1: random_model(1, K=1), 2: random_model(1, K=2), 4: random_model(1, K=4)}
    srcs = [[4, 5, 6, EOS], [7, 8, EOS]]
    config = decode.SearchConfig(1, 8, min_len=8)
    cells = decode.measure_latency(models, srcs, (1, 2), config, repetitions=3)
    assert [(c.K, c.batch) for c in cells] == [(1, 1), (1, 2), (2, 1), (2, 2), (4, 1), (4, 2)]
    for c in cells:
        assert c.invocations == 2 * math.ceil(8 / c.K)
        assert len(c.samples_ms) == 3 and c.mean_ms > 0
    assert all(c.speedup_vs_K1 == 1.0 for c in cells if c.K == 1)
    counts = [c.invocations for c in cells if c.batch == 1]
    assert counts == sorted(counts, reverse=True)
    tsv = decode.format_latency(cells, "\t").splitlines()
    assert tsv[0].split("\t") == ["K", "batch", "mean_ms", "invocations", "speedup_vs_K1"]
    assert len(tsv) == 7
    with pytest.raises(ValueError):
        decode.measure_latency(models, srcs, (1,), config, repetitions=2)
