"""Greedy decoding with the dual-mode cache, printing the miss/slide/hit event stream.

Run: python3 demos/cached_generation.py
"""

import numpy as np

from tlinformer import TLinFormer, generate, generate_uncached
from tlinformer.kv_cache import EventKind
from tlinformer.model import ModelConfig

cfg = ModelConfig(vocab_size=50, D=32, n_head=4, H=1, n_blocks=2, Woh=8, Wog=8)
model = TLinFormer(cfg)
prompt = np.random.default_rng(1).integers(0, cfg.vocab_size, size=40)

gen = generate(model, prompt, n_new=2 * cfg.Wog + 1)
for e in gen.events:
    tag = {EventKind.MISS: "MISS ", EventKind.SLIDE: "SLIDE", EventKind.HIT: "hit  "}[e.kind]
    print(f"{tag} N={e.N:<4} fill={e.g:<2} units={e.interaction_units:<8} cache={e.bytes_cached} B")

# the cache is an optimisation only: recomputing every step gives the same logits
ref = generate_uncached(model, prompt, n_new=len(gen.tokens))
worst = max(np.max(np.abs(a - b)) for a, b in zip(gen.logits, ref.logits))
print(f"\ntokens equal: {gen.tokens == ref.tokens}, max logit difference {worst:.1e}")
