"""
Sequence-level knowledge distillation
=====================================

Train a word-by-word teacher, replace every training target with the
teacher's beam-search output, then train a K=2 student on that data starting
from the teacher's encoder and embeddings.  The student's decoder starts
fresh.
"""
import sys
import tempfile

import torch

from satnmt import decode, evaluate, train
from satnmt.data import build_vocab, make_toy_corpus
from satnmt.model import HyperParams, SATModel

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500

corpus = make_toy_corpus(3000, vocab_size=16, min_len=3, max_len=10, task="copy", seed=0)
test = make_toy_corpus(100, vocab_size=16, min_len=3, max_len=10, task="copy", seed=1)
vocab = build_vocab(corpus.src + corpus.tgt, 100)


def config(K):
    hp = HyperParams(len(vocab), len(vocab), d_model=64, N=2, h=4, d_ff=256, K=K,
                     dropout=0.0, warmup=200)
    return train.TrainConfig(hp, steps=steps, batch_tokens=1000,
                             ckpt_interval=max(steps // 8, 1), avg_last=3, lr_scale=0.3)


with tempfile.TemporaryDirectory() as out:
    result = train.distillation_pipeline(corpus, vocab, vocab, config(1), config(2),
                                         beam_size=4, out_dir=out)

# %%
# How much did the teacher change the targets?
changed = sum(a != b for a, b in zip(result.distilled.tgt, corpus.tgt))
print(f"teacher rewrote {changed} of {len(corpus)} targets")

# %%
# Score teacher and student on held-out pairs
srcs = [vocab.encode(s) for s in test.src]
for name, run, K in [("teacher", result.teacher, 1), ("student", result.student, 2)]:
    model = SATModel(config(K).hp, run.averaged(3))
    with torch.inference_mode():
        out = decode.batch_decode(model, srcs, K, decode.SearchConfig(1, decode.default_max_len))
    hyps = [vocab.decode(r.tokens) for r in out]
    print(f"{name} (K={K}): BLEU {evaluate.bleu(hyps, test.tgt).bleu:.2f}")
