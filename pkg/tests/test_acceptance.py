"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line."""

import math
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest

from tlinformer import kv_cache as kvc
from tlinformer.bench import SweepConfig, build_bench_models, desk_model_config, power_law_exponent, run_sweep
from tlinformer.cost import baseline_cost, cost_cache_miss, memory_eval
from tlinformer.model import BaselineTransformer, ModelConfig, TLinFormer
from tlinformer.training import (
    TrainConfig,
    bundled_corpus_path,
    evaluate_ppl,
    ingest_corpus,
    model_config_for_corpus,
    train,
)
from tlinformer.verify import (
    LEDGER_GRID,
    check_cache_equivalence,
    check_chunked_equivalence,
    check_cost_identity,
    check_ledger_equality,
    gradient_check,
    micro_config,
    randomize_parameters,
)


def test_c1_cost_formula_identity(criterion):
    t0 = time.perf_counter()
    res = check_cost_identity(1000)
    dt = time.perf_counter() - t0
    criterion(1, "layer-sum miss cost == closed form, slope exact", res.passed and dt < 1.0,
              f"max |delta|={res.delta:g}, {dt:.2f}s")


def test_c2_ledger_equals_formula(criterion):
    assert len(LEDGER_GRID) >= 20 and all(h >= woh for h, woh, _, _ in LEDGER_GRID)
    t0 = time.perf_counter()
    res = check_ledger_equality()
    dt = time.perf_counter() - t0
    criterion(2, "prefill/step ledger == n_blocks x miss/hit formula", res.passed and dt < 60,
              f"{res.detail}, {dt:.1f}s")


def test_c3_cache_equivalence(criterion):
    cfg = micro_config()
    t0 = time.perf_counter()
    res = check_cache_equivalence(cfg, n_new=3 * cfg.Wog)
    dt = time.perf_counter() - t0
    slides = int(res.detail.split(" slides")[0].split()[-1])
    criterion(3, "cached greedy generation == uncached", res.passed and slides >= 2 and dt < 120,
              f"max |dlogit|={res.delta:.2e}, {slides} slides, {dt:.1f}s")


def test_c4_gradients_all_parameters(criterion):
    cfg = micro_config()
    model = randomize_parameters(TLinFormer(cfg))
    toks = np.random.default_rng(1).integers(0, cfg.vocab_size, size=(1, 9))
    t0 = time.perf_counter()
    errs = gradient_check(model, toks, hist_len=4)
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    criterion(4, "every parameter gradient matches central differences", worst < 1e-4 and dt < 120,
              f"{model.num_parameters()} params, max rel err={worst:.2e}, {dt:.1f}s")


def test_c5_memory_ratio(criterion):
    cfg = desk_model_config(H=2, dtype="float64")
    N = 64 * cfg.W_total
    prompt = np.random.default_rng(0).integers(0, cfg.vocab_size, size=N)
    t0 = time.perf_counter()
    _, tl = kvc.prefill(TLinFormer(cfg), prompt)
    _, base = kvc.baseline_prefill(BaselineTransformer(cfg), prompt)
    dt = time.perf_counter() - t0
    ratio = tl.bytes_cached() / base.bytes_cached()
    target = 1 / (cfg.H + 2)
    analytic = memory_eval(1, 1000, 432, 2, 8, 8).ratio
    ok = abs(ratio - target) <= 0.15 * target and analytic == Fraction(1, 10) and dt < 60
    criterion(5, "cached-byte ratio near 1/(H+2); H=8 gives exactly 1/10", ok,
              f"N={N}, measured {ratio:.4f} vs {target}, analytic {analytic}, {dt:.1f}s")


def test_c6_complexity_trend(criterion):
    D, Woh, Wog, H, nb = 64, 32, 32, 2, 2
    Ns = list(range(64, 8193, 128))
    miss = [nb * cost_cache_miss(N, D, Woh, Wog, H).total for N in Ns]
    # exact integer line through the first two points
    slope = (miss[1] - miss[0]) // (Ns[1] - Ns[0])
    residual = max(abs(m - (miss[0] + slope * (N - Ns[0]))) for N, m in zip(Ns, miss))
    depth = nb * (H + 2)
    base_exact = all(baseline_cost(N, D, depth) == depth * D * N * N for N in Ns)
    ratios = [Fraction(baseline_cost(N, D, depth), m) for N, m in zip(Ns, miss)]
    increasing = all(a < b for a, b in zip(ratios, ratios[1:]))
    criterion(6, "miss cost linear, baseline quadratic, unit speedup increasing",
              residual == 0 and base_exact and increasing,
              f"residual={residual}, slope={slope}, speedup {float(ratios[0]):.2f}->{float(ratios[-1]):.2f}")


@pytest.mark.slow
def test_c7_wall_clock_trend(criterion):
    grid = (128, 512, 1024, 2048, 4096, 8192)
    models = build_bench_models(["tlinformer", "baseline"], desk_model_config())
    rows = run_sweep(SweepConfig(grid=grid, repeats=5, warmup_runs=2), models)
    tl = [r for r in rows if r.model == "tlinformer"]
    base = [r for r in rows if r.model == "baseline"]
    hit_lt_miss = all(r.t_third_nanos < r.t_first_nanos for r in tl)
    big = [i for i, N in enumerate(grid) if N >= 1024]
    e_tl = power_law_exponent([grid[i] for i in big], [tl[i].t_first_nanos for i in big])
    e_b = power_law_exponent([grid[i] for i in big], [base[i].t_first_nanos for i in big])
    criterion(7, "hit faster than miss; miss latency sub-quadratic vs quadratic baseline",
              hit_lt_miss and len(tl) == len(base) == len(grid) and e_tl < 1.5 < e_b,
              f"exponents tlinformer={e_tl:.2f} baseline={e_b:.2f}, "
              f"miss/hit at 8192 = {tl[-1].t_first_nanos / 1e6:.1f}/{tl[-1].t_third_nanos / 1e6:.1f} ms")


@pytest.mark.slow
def test_c8_training_sanity(criterion):
    corpus = ingest_corpus(bundled_corpus_path(), eval_fraction=0.1)
    shape = dict(D=32, n_head=4, H=1, n_blocks=2, Woh=16, Wog=16, seed=0)
    seq = shape["Woh"] + shape["Wog"]  # W_total == N
    tc = dict(seq_len=seq, batch_size=8, lr=1e-3, max_steps=200, seed=0)
    mcfg = model_config_for_corpus(corpus.tokenizer, **shape)
    t0 = time.perf_counter()
    tl = TLinFormer(mcfg)
    log_tl = train(tl, corpus.train, TrainConfig(**tc))
    base = BaselineTransformer(mcfg)
    train(base, corpus.train, TrainConfig(**tc, model_kind="baseline"))
    ppl_tl = evaluate_ppl(tl, corpus.eval, seq)
    ppl_b = evaluate_ppl(base, corpus.eval, seq)
    dt = time.perf_counter() - t0
    ln_v = math.log(mcfg.vocab_size)
    final = statistics.mean(r.loss for r in log_tl[-10:])
    chunked = check_chunked_equivalence(micro_config())
    parity = abs(ppl_tl - ppl_b) <= 0.10 * ppl_b
    criterion(8, "training lowers loss below ln V; chunked == prefix; PPL parity within 10%",
              final < ln_v and chunked.passed and parity,
              f"loss {log_tl[0].loss:.3f}->{final:.3f} (ln V={ln_v:.3f}), chunk delta={chunked.delta:.1e}, "
              f"PPL tlinformer={ppl_tl:.2f} baseline={ppl_b:.2f}, {dt:.0f}s")
