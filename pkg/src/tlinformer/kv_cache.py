"""Dual-mode KV cache for autoregressive decoding.

A TLinFormer session cycles through three transitions:

* **miss** (``prefill``) -- full forward over history + generation window; every
  cache is (re)built.
* **hit** (``step``) -- one new token enters the window.  History and context
  K/V are reused untouched; the window's causal attention is recomputed over
  all ``Wog`` slots.
* **slide** -- once the window holds ``Wog`` tokens the history grows by
  ``Wog`` and the next token triggers a fresh miss.

The window buffer always has ``Wog`` slots.  Slots past the fill level hold a
pad token; causality keeps them from influencing real rows.
"""

from __future__ import annotations

import csv
import enum
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .model import BaselineTransformer, LayoutError, TLinFormer
from .tensor import Tensor, current_ledger, embedding, no_grad

PAD_TOKEN = 0


class CacheStateError(RuntimeError):
    pass


class MustSlideError(CacheStateError):
    pass


class CacheState(enum.Enum):
    EMPTY = "empty"
    WARM = "warm"


class EventKind(enum.Enum):
    MISS = "miss"
    HIT = "hit"
    SLIDE = "slide"


EVENT_COLUMNS = ("event_kind", "N", "g", "interaction_units", "bytes_cached", "wall_nanos")


@dataclass
class CacheEvent:
    kind: EventKind
    N: int
    g: int
    tokens_processed: int
    interaction_units: int
    bytes_cached: int
    wall_nanos: int = 0

    def row(self) -> dict:
        return {
            "event_kind": self.kind.value,
            "N": self.N,
            "g": self.g,
            "interaction_units": self.interaction_units,
            "bytes_cached": self.bytes_cached,
            "wall_nanos": self.wall_nanos,
        }


def events_csv(events: list[CacheEvent]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=EVENT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for e in events:
        w.writerow(e.row())
    return buf.getvalue()


@dataclass
class BlockCache:
    """Cached tensors of one block, indexed by generation layer.

    ``gen[L]`` holds the window's ``q``/``k``/``v`` (``Wog`` slots) and, where
    the layer reads a context source, its ``kc``/``vc``: raw history for
    ``L == 0``, the width-``Woh`` context state ``C_{L-1}`` otherwise.
    """

    gen: list[dict]

    @property
    def hist_kv(self) -> tuple[np.ndarray, np.ndarray] | None:
        g0 = self.gen[0]
        return (g0["kc"], g0["vc"]) if "kc" in g0 else None

    @property
    def ctx_kv(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(g["kc"], g["vc"]) for g in self.gen[1:] if "kc" in g]


@dataclass
class KVCacheStore:
    blocks: list[BlockCache] = field(default_factory=list)
    fill: int = 0
    hist_len: int = 0
    Wog: int = 0
    tokens: list[int] = field(default_factory=list)
    state: CacheState = CacheState.EMPTY
    events: list[CacheEvent] = field(default_factory=list)

    @property
    def N(self) -> int:
        """Window-aligned sequence length ``hist_len + Wog`` used by the cost model."""
        return self.hist_len + self.Wog

    def element_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for b, blk in enumerate(self.blocks):
            for L, layer in enumerate(blk.gen):
                for key, arr in layer.items():
                    if key in ("kc", "vc"):
                        name = "hist" if L == 0 else f"ctx{L - 1}"
                        counts[f"block{b}.{name}.{key[0]}"] = arr.size
                    else:
                        counts[f"block{b}.gen{L}.{key}"] = arr.size
        return counts

    def bytes_cached(self) -> int:
        """K/V payload bytes; the window's query buffer is a recompute aid and is not counted."""
        total = 0
        for blk in self.blocks:
            for layer in blk.gen:
                total += sum(a.nbytes for k, a in layer.items() if k != "q")
        return total


def cache_report(store) -> tuple[int, dict[str, int]]:
    """``(bytes_cached, per-buffer element counts)`` for either cache store type."""
    return store.bytes_cached(), store.element_counts()


def _record(store, kind: EventKind, units: int, wall: int, processed: int, N: int) -> CacheEvent:
    ev = CacheEvent(kind, N, store.fill, processed, units, store.bytes_cached(), wall)
    store.events.append(ev)
    return ev


def _miss(model: TLinFormer, store: KVCacheStore, hist_len: int, window: list[int]) -> Tensor:
    cfg = model.cfg
    fill = len(window)
    seq = np.asarray(store.tokens[:hist_len] + window + [PAD_TOKEN] * (cfg.Wog - fill), dtype=np.int64)
    ledger = current_ledger()
    u0 = ledger.interaction_units
    t0 = time.perf_counter_ns()
    cap: list = []
    with no_grad():
        logits, _ = model.forward_states(seq, hist_len=hist_len, capture=cap)
    store.blocks = [BlockCache(gen=c) for c in cap]
    store.hist_len = hist_len
    store.Wog = cfg.Wog
    store.fill = fill
    store.state = CacheState.WARM
    wall = time.perf_counter_ns() - t0
    _record(store, EventKind.MISS, ledger.interaction_units - u0, wall, len(seq), store.N)
    return logits[fill - 1]


def prefill(model: TLinFormer, tokens, store: KVCacheStore | None = None) -> tuple[Tensor, KVCacheStore]:
    """Cache miss over ``tokens``: history is all but the last ``Wog`` tokens."""
    store = store if store is not None else KVCacheStore()
    if store.state is not CacheState.EMPTY:
        raise CacheStateError("prefill needs an empty store")
    toks = [int(t) for t in np.asarray(tokens).reshape(-1)]
    Wog = model.cfg.Wog
    if len(toks) < Wog:
        raise LayoutError(f"prefill needs at least Wog={Wog} tokens, got {len(toks)}")
    store.tokens = toks
    hist = len(toks) - Wog
    return _miss(model, store, hist, toks[hist:]), store


def step(model: TLinFormer, store: KVCacheStore, new_token: int) -> tuple[Tensor, KVCacheStore]:
    """Cache hit: append one token to the window and return its logits."""
    if store.state is not CacheState.WARM:
        raise CacheStateError("step needs a warm store")
    cfg = model.cfg
    if store.fill >= cfg.Wog:
        raise MustSlideError("generation window is full; slide first")
    slot = store.fill
    pos = store.hist_len + slot
    ledger = current_ledger()
    u0 = ledger.interaction_units
    t0 = time.perf_counter_ns()
    with no_grad():
        h = model._embed(np.asarray([[new_token]], dtype=np.int64), pos)
        for blk, block in zip(store.blocks, model.blocks):
            for cache, layer in zip(blk.gen, block.gen):
                h = layer.step_row(h, slot, cache, cfg.n_head)
        logits = model._logits(h)
    store.tokens.append(int(new_token))
    store.fill += 1
    wall = time.perf_counter_ns() - t0
    _record(store, EventKind.HIT, ledger.interaction_units - u0, wall, 1, store.N)
    return logits.reshape(logits.shape[-1:]), store


def slide(model: TLinFormer, store: KVCacheStore, tokens) -> tuple[Tensor, KVCacheStore]:
    """Grow the history by ``Wog`` and rebuild every cache with ``tokens`` seeding the window.

    Returns the logits of the last seeded token.
    """
    if store.state is not CacheState.WARM:
        raise CacheStateError("slide needs a warm store")
    cfg = model.cfg
    if store.fill != cfg.Wog:
        raise CacheStateError(f"slide needs a full window (fill={store.fill}, Wog={cfg.Wog})")
    new = [int(t) for t in np.asarray(tokens).reshape(-1)]
    if not 1 <= len(new) <= cfg.Wog:
        raise LayoutError("slide seeds the window with 1..Wog tokens")
    hist = store.hist_len + cfg.Wog
    _record(store, EventKind.SLIDE, 0, 0, 0, hist + cfg.Wog)
    store.tokens.extend(new)
    return _miss(model, store, hist, new), store


# -- baseline cache -------------------------------------------------------------

@dataclass
class BaselineCacheStore:
    layers: list[dict] = field(default_factory=list)
    length: int = 0
    tokens: list[int] = field(default_factory=list)
    state: CacheState = CacheState.EMPTY
    events: list[CacheEvent] = field(default_factory=list)
    fill: int = 0

    @property
    def N(self) -> int:
        return self.length

    def element_counts(self) -> dict[str, int]:
        return {f"layer{i}.{k}": a.size for i, d in enumerate(self.layers) for k, a in d.items()}

    def bytes_cached(self) -> int:
        return sum(a.nbytes for d in self.layers for a in d.values())


def baseline_prefill(model: BaselineTransformer, tokens, store: BaselineCacheStore | None = None):
    store = store if store is not None else BaselineCacheStore()
    if store.state is not CacheState.EMPTY:
        raise CacheStateError("prefill needs an empty store")
    toks = [int(t) for t in np.asarray(tokens).reshape(-1)]
    ledger = current_ledger()
    u0 = ledger.interaction_units
    t0 = time.perf_counter_ns()
    cap: list = []
    with no_grad():
        logits = model.forward(np.asarray(toks), capture=cap)
    store.layers = cap
    store.tokens = toks
    store.length = len(toks)
    store.state = CacheState.WARM
    wall = time.perf_counter_ns() - t0
    _record(store, EventKind.MISS, ledger.interaction_units - u0, wall, len(toks), store.N)
    return logits[len(toks) - 1], store


def baseline_step(model: BaselineTransformer, store: BaselineCacheStore, new_token: int):
    if store.state is not CacheState.WARM:
        raise CacheStateError("step needs a warm store")
    ledger = current_ledger()
    u0 = ledger.interaction_units
    t0 = time.perf_counter_ns()
    with no_grad():
        x = model._embed(np.asarray([[new_token]], dtype=np.int64), store.length)
        for cache, layer in zip(store.layers, model.layers):
            x = layer.step_row(x, cache, model.cfg.n_head)
        logits = model._logits(x)
    store.tokens.append(int(new_token))
    store.length += 1
    wall = time.perf_counter_ns() - t0
    _record(store, EventKind.HIT, ledger.interaction_units - u0, wall, 1, store.N)
    return logits.reshape(logits.shape[-1:]), store


# -- generation drivers ------------------------------------------------------------

def _pick(logits: np.ndarray, temperature: float | None, rng) -> int:
    if not temperature:
        return int(np.argmax(logits))
    z = logits / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


@dataclass
class Generation:
    tokens: list[int]
    logits: list[np.ndarray]
    events: list[CacheEvent]


def generate(model, prompt, n_new: int, temperature: float | None = None, rng=None) -> Generation:
    """Cached decoding.  ``temperature=None`` means greedy."""
    rng = rng if rng is not None else np.random.default_rng(0)
    out, all_logits = [], []
    if isinstance(model, BaselineTransformer):
        lg, store = baseline_prefill(model, prompt)
        for i in range(n_new):
            all_logits.append(lg.data)
            tok = _pick(lg.data, temperature, rng)
            out.append(tok)
            if i + 1 < n_new:
                lg, store = baseline_step(model, store, tok)
        return Generation(out, all_logits, store.events)

    lg, store = prefill(model, prompt)
    for i in range(n_new):
        all_logits.append(lg.data)
        tok = _pick(lg.data, temperature, rng)
        out.append(tok)
        if i + 1 == n_new:
            break
        if store.fill < model.cfg.Wog:
            lg, store = step(model, store, tok)
        else:
            lg, store = slide(model, store, [tok])
    return Generation(out, all_logits, store.events)


def generate_uncached(model, prompt, n_new: int, temperature: float | None = None, rng=None) -> Generation:
    """Reference decoding: a full forward for every token, same window schedule, no caches."""
    rng = rng if rng is not None else np.random.default_rng(0)
    seq = [int(t) for t in np.asarray(prompt).reshape(-1)]
    out, all_logits = [], []
    is_base = isinstance(model, BaselineTransformer)
    if not is_base:
        Wog = model.cfg.Wog
        hist = len(seq) - Wog
        if hist < 0:
            raise LayoutError("prompt shorter than Wog")
    for _ in range(n_new):
        with no_grad():
            if is_base:
                lg = model.forward(np.asarray(seq)).data[-1]
            else:
                if len(seq) - hist > Wog:
                    hist += Wog
                lg = model.forward(np.asarray(seq), hist_len=hist).data[-1]
        all_logits.append(lg)
        tok = _pick(lg, temperature, rng)
        out.append(tok)
        seq.append(tok)
    return Generation(out, all_logits, [])
