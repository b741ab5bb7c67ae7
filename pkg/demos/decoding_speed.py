"""
Where the speedup comes from
============================

Decoding cost is dominated by decoder calls.  This script times greedy
decoding of randomly initialised models with K = 1, 2, 4 and 6 and sets the
measurements beside the ideal factors.  Weights do not matter for timing, so
no training is needed; the output length is forced so every K emits the
same number of tokens.
"""
import torch

from satnmt import decode, evaluate
from satnmt.model import HyperParams, SATModel

V = 40
hp = HyperParams(V, V, d_model=64, N=2, h=4, d_ff=256, dropout=0.0)
g = torch.Generator().manual_seed(0)
srcs = [torch.randint(4, V, (24,), generator=g).tolist() + [2] for _ in range(8)]
config = decode.SearchConfig(beam_size=1, max_len=24, min_len=24)

models = {K: SATModel(hp.replace(K=K)) for K in (1, 2, 4, 6)}
cells = decode.measure_latency(models, srcs, batch_sizes=(1, 4), config=config,
                               repetitions=3)
print(decode.format_latency(cells))

# %%
# Greedy search ideally gains the full factor K.  Beam search still pays the
# per-word search cost b on top of the network cost a.
for K in (2, 4, 6):
    print(f"K={K}: greedy {evaluate.theoretical_acceleration(K):.1f}x, "
          f"beam (a=1, b=0.2) {evaluate.theoretical_acceleration(K, 1.0, 0.2, 'beam'):.2f}x")
