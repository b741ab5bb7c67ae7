"""
Training a toy semi-autoregressive model
========================================

Train a word-by-word Transformer (K=1) and a two-at-a-time model (K=2) on a
synthetic copy task, then compare quality and decoder calls.  On one CPU the
default budget takes a few minutes; pass a smaller step count to go faster::

    python demos/train_toy_sat.py 600
"""
import sys

import torch

from satnmt import decode, evaluate, train
from satnmt.data import EncodedCorpus, build_vocab, make_toy_corpus
from satnmt.model import HyperParams, SATModel

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500

corpus = make_toy_corpus(5000, vocab_size=16, min_len=3, max_len=10, task="copy", seed=0)
test = make_toy_corpus(100, vocab_size=16, min_len=3, max_len=10, task="copy", seed=1)
vocab = build_vocab(corpus.src + corpus.tgt, 100)
encoded = EncodedCorpus.from_corpus(corpus, vocab, vocab)
print(f"{len(corpus)} pairs, vocabulary of {len(vocab)}")

models = {}
for K in (1, 2):
    hp = HyperParams(len(vocab), len(vocab), d_model=64, N=2, h=4, d_ff=256, K=K,
                     dropout=0.0, warmup=200)
    config = train.TrainConfig(hp, steps=steps, batch_tokens=1000,
                               ckpt_interval=max(steps // 10, 1), avg_last=3, lr_scale=0.3)
    run = train.train_loop(config, encoded)
    print(f"K={K}: final loss {run.metrics[-1][1]:.3f}")
    # evaluate the average of the last few checkpoints
    models[K] = SATModel(hp, run.averaged(3))

# %%
# Greedy decoding; the number of decoder calls per sentence is ceil(L / K)
srcs = [vocab.encode(s) for s in test.src]
rows = []
for K, model in models.items():
    with torch.inference_mode():
        out = decode.batch_decode(model, srcs, K, decode.SearchConfig(1, decode.default_max_len))
    hyps = [vocab.decode(r.tokens) for r in out]
    calls = sum(r.stats.decoder_invocations for r in out)
    score = evaluate.bleu(hyps, test.tgt).bleu
    print(f"K={K}: BLEU {score:.2f}, {calls} decoder calls")
    print("   ", " ".join(test.src[0]), "->", " ".join(hyps[0]))
    rows.append(evaluate.RunSummary(f"K={K}", K, 1, score, calls / len(srcs)))

# %%
# The same table shape as a speed/quality report (calls stand in for latency)
print(evaluate.format_report(evaluate.speed_quality_report(rows[0], rows[1:])))
