import numpy as np
import pytest

from tlinformer import kv_cache as kvc
from tlinformer.cost import cost_cache_hit, cost_cache_miss
from tlinformer.kv_cache import (
    BaselineCacheStore,
    CacheState,
    CacheStateError,
    EventKind,
    KVCacheStore,
    MustSlideError,
    cache_report,
    events_csv,
    generate,
    generate_uncached,
)
from tlinformer.model import BaselineTransformer, LayoutError, ModelConfig, TLinFormer
from tlinformer.tensor import ledger_read, ledger_reset, no_grad


@pytest.fixture
def model(micro_cfg):
    return TLinFormer(micro_cfg)


def prompt(rng, n, vocab=11):
    return rng.integers(0, vocab, size=n)


def test_prefill_matches_uncached_forward_bitwise(model, rng):
    p = prompt(rng, 13)
    lg, store = kvc.prefill(model, p)
    with no_grad():
        ref = model.forward(p).data[-1]
    assert np.array_equal(lg.data, ref)
    assert store.state is CacheState.WARM and store.fill == model.cfg.Wog


def test_prefill_and_step_charges(micro_cfg, rng):
    c = micro_cfg
    m = TLinFormer(c)
    hist = 9
    store = KVCacheStore(tokens=list(prompt(rng, hist + 1)))
    ledger_reset()
    kvc._miss(m, store, hist, store.tokens[hist:])
    N = hist + c.Wog
    assert ledger_read()[0] == c.n_blocks * cost_cache_miss(N, c.D, c.Woh, c.Wog, c.H).total
    charges = []
    for t in (3, 5):
        ledger_reset()
        kvc.step(m, store, t)
        charges.append(ledger_read()[0])
    assert charges[0] == charges[1] == c.n_blocks * cost_cache_hit(N, c.D, c.Woh, c.Wog, c.H)
    assert charges[0] < c.n_blocks * cost_cache_miss(N, c.D, c.Woh, c.Wog, c.H).total


def test_step_logits_match_uncached(model, rng):
    c = model.cfg
    hist = 8
    toks = list(prompt(rng, hist + 1))
    store = KVCacheStore(tokens=list(toks))
    kvc._miss(model, store, hist, toks[hist:])
    for t in (4, 7, 1):
        lg, store = kvc.step(model, store, t)
        toks.append(t)
        with no_grad():
            ref = model.forward(np.asarray(toks), hist_len=hist).data[-1]
        assert np.max(np.abs(lg.data - ref)) < 1e-9
    assert store.fill == 4 == c.Wog


def test_history_buffers_static_across_steps(model, rng):
    store = KVCacheStore(tokens=list(prompt(rng, 9)))
    kvc._miss(model, store, 8, store.tokens[8:])
    snap = [(k.copy(), v.copy()) for b in store.blocks for k, v in [b.hist_kv, *b.ctx_kv]]
    kvc.step(model, store, 2)
    kvc.step(model, store, 3)
    now = [(k, v) for b in store.blocks for k, v in [b.hist_kv, *b.ctx_kv]]
    assert all(np.array_equal(a, c) and np.array_equal(b, d) for (a, b), (c, d) in zip(snap, now))


def test_state_machine_errors(model, rng):
    store = KVCacheStore()
    with pytest.raises(CacheStateError):
        kvc.step(model, store, 1)
    with pytest.raises(CacheStateError):
        kvc.slide(model, store, [1])
    _, store = kvc.prefill(model, prompt(rng, 9))
    with pytest.raises(MustSlideError):
        kvc.step(model, store, 1)
    with pytest.raises(CacheStateError):
        kvc.prefill(model, prompt(rng, 9), store)
    with pytest.raises(LayoutError):
        kvc.prefill(model, prompt(rng, 2))


def test_slide_extends_history_and_charges_miss(model, rng):
    c = model.cfg
    _, store = kvc.prefill(model, prompt(rng, 12))
    N0 = store.N
    ledger_reset()
    _, store = kvc.slide(model, store, [5])
    assert store.N == N0 + c.Wog and store.fill == 1
    assert ledger_read()[0] == c.n_blocks * cost_cache_miss(store.N, c.D, c.Woh, c.Wog, c.H).total
    kinds = [e.kind for e in store.events]
    assert kinds == [EventKind.MISS, EventKind.SLIDE, EventKind.MISS]


@pytest.mark.parametrize("n_new", [1, 2, 5, 8, 13])
def test_cached_generation_equals_uncached(model, rng, n_new):
    p = prompt(rng, 10)
    a = generate(model, p, n_new)
    b = generate_uncached(model, p, n_new)
    assert a.tokens == b.tokens
    assert max(np.max(np.abs(x - y)) for x, y in zip(a.logits, b.logits)) < 1e-9


def test_event_stream_pattern_and_units(model, rng):
    c = model.cfg
    gen = generate(model, prompt(rng, 12), c.Wog + 1)
    kinds = [e.kind for e in gen.events]
    assert kinds.count(EventKind.SLIDE) == 1
    assert kinds[:3] == [EventKind.MISS, EventKind.SLIDE, EventKind.MISS]
    assert all(k is EventKind.HIT for k in kinds[3:])
    for e in gen.events:
        if e.kind is EventKind.MISS:
            assert e.interaction_units == c.n_blocks * cost_cache_miss(e.N, c.D, c.Woh, c.Wog, c.H).total
        elif e.kind is EventKind.HIT:
            assert e.interaction_units == c.n_blocks * cost_cache_hit(e.N, c.D, c.Woh, c.Wog, c.H)
    sizes = [e.bytes_cached for e in gen.events]
    assert sizes == sorted(sizes)
    text = events_csv(gen.events)
    assert text.splitlines()[0] == ",".join(kvc.EVENT_COLUMNS)
    assert len(text.splitlines()) == len(gen.events) + 1


def test_temperature_sampling_reproducible(model, rng):
    p = prompt(rng, 10)
    a = generate(model, p, 6, temperature=1.0, rng=np.random.default_rng(3))
    b = generate(model, p, 6, temperature=1.0, rng=np.random.default_rng(3))
    assert a.tokens == b.tokens


def test_baseline_cache_equivalence_and_charges(micro_cfg, rng):
    m = BaselineTransformer(micro_cfg)
    p = prompt(rng, 7)
    a = generate(m, p, 6)
    b = generate_uncached(m, p, 6)
    assert a.tokens == b.tokens
    assert max(np.max(np.abs(x - y)) for x, y in zip(a.logits, b.logits)) < 1e-9
    D, L = micro_cfg.D, micro_cfg.equivalent_depth
    hits = [e for e in a.events if e.kind is EventKind.HIT]
    assert [e.interaction_units for e in hits] == [L * e.N * D for e in hits]


def test_cache_report_examples(rng):
    assert cache_report(KVCacheStore())[0] == 0
    assert cache_report(BaselineCacheStore())[0] == 0
    cfg = ModelConfig(vocab_size=11, D=64, n_head=4, H=2, n_blocks=2)
    _, store = kvc.baseline_prefill(BaselineTransformer(cfg), prompt(rng, 100))
    assert store.bytes_cached() == 2 * 1 * 100 * 64 * 8 * 8 == 819200


def test_history_bytes_slope(micro_cfg, rng):
    c = micro_cfg
    m, b = TLinFormer(c), BaselineTransformer(c)
    sizes, base = [], []
    for N in (16, 24):
        sizes.append(kvc.prefill(m, prompt(rng, N))[1].bytes_cached())
        base.append(kvc.baseline_prefill(b, prompt(rng, N))[1].bytes_cached())
    slope = (sizes[1] - sizes[0]) // 8
    assert slope == 2 * c.D * 8 * c.n_blocks
    assert slope < (base[1] - base[0]) // 8
