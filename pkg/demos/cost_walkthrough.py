"""Walk through the closed-form cost model and compare it with a measured ledger.

Run: python3 demos/cost_walkthrough.py
"""

import numpy as np

from tlinformer import TLinFormer, ledger_read, ledger_reset, no_grad
from tlinformer.cost import baseline_cost, cost_cache_hit, cost_cache_miss, memory_eval, miss_slope
from tlinformer.model import ModelConfig

D, Woh, Wog, H, n_blocks = 64, 32, 32, 2, 2
depth = n_blocks * (H + 2)

print("Per-token interaction units (D multiply-accumulates per query-key pair)")
print(f"{'N':>6} {'miss':>12} {'hit':>10} {'baseline':>14} {'baseline/miss':>14}")
for N in (128, 512, 2048, 8192, 32768):
    miss = n_blocks * cost_cache_miss(N, D, Woh, Wog, H).total
    hit = n_blocks * cost_cache_hit(N, D, Woh, Wog, H)
    base = baseline_cost(N, D, depth)
    print(f"{N:>6} {miss:>12} {hit:>10} {base:>14} {base / miss:>14.1f}")

print(f"\nmiss cost grows by exactly {n_blocks * miss_slope(D, Woh, Wog)} units per extra token")

# the left/right split of one block
br = cost_cache_miss(1024, D, Woh, Wog, H)
print(f"one block at N=1024: context path {br.c_left}, generation path {br.c_right}")

# the ledger counts the same quantity while a real forward pass runs
cfg = ModelConfig(vocab_size=32, D=D, n_head=4, H=H, n_blocks=n_blocks, Woh=Woh, Wog=Wog, dtype="float32")
model = TLinFormer(cfg)
tokens = np.random.default_rng(0).integers(0, 32, size=1024)
ledger_reset()
with no_grad():
    model.forward(tokens)
print(f"measured ledger for that forward: {ledger_read()[0]} (formula {n_blocks * br.total})")

m = memory_eval(B=1, L=8192, d_model=D, P_bytes=4, N_layers=depth, H=H)
print(f"\ncache bytes at N=8192: standard {m.m_transformer}, windowed estimate {float(m.m_tlinformer):.0f}"
      f" (ratio {m.ratio})")
