"""Incremental-N inference benchmark: per-token latency, ledger units, cache bytes."""

from __future__ import annotations

import csv
import dataclasses
import os
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import kv_cache as kvc
from .cost import baseline_cost, cost_cache_hit, cost_cache_miss
from .model import BaselineTransformer, ModelConfig, TLinFormer, atomic_write, build_model
from .tensor import current_ledger


class LedgerMismatchError(AssertionError):
    """Measured interaction units disagree with the closed-form cost."""


@dataclass
class SweepConfig:
    n_start: int = 128
    n_step: int = 512
    n_max: int = 8192
    tokens_per_point: int = 6
    repeats: int = 5
    warmup_runs: int = 2
    models: tuple[str, ...] = ("tlinformer", "baseline")
    grid: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.tokens_per_point < 3:
            raise ValueError("tokens_per_point must be >= 3 (first and third token are measured)")
        if self.repeats < 1 or self.warmup_runs < 0:
            raise ValueError("repeats must be >= 1 and warmup_runs >= 0")

    def lengths(self) -> list[int]:
        if self.grid is not None:
            return list(self.grid)
        return list(range(self.n_start, self.n_max + 1, self.n_step))


def desk_model_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=256, D=64, n_head=4, H=2, n_blocks=2, Woh=32, Wog=32, dtype="float32")
    base.update(overrides)
    return ModelConfig(**base)


ROW_COLUMNS = (
    "model",
    "N",
    "t_first_nanos",
    "t_third_nanos",
    "interaction_units_miss",
    "interaction_units_hit",
    "bytes_cached",
)


@dataclass
class SweepRow:
    model: str
    N: int
    t_first_nanos: int
    t_third_nanos: int
    interaction_units_miss: int
    interaction_units_hit: int
    bytes_cached: int


def _generate_timed(model, prompt: np.ndarray, n_tokens: int):
    """Greedy decode ``n_tokens``; return per-token wall nanos, per-token units, final store."""
    ledger = current_ledger()
    times, units = [], []
    is_base = isinstance(model, BaselineTransformer)
    store = None
    tok = None
    for i in range(n_tokens):
        u0 = ledger.interaction_units
        t0 = time.perf_counter_ns()
        if i == 0:
            lg, store = (kvc.baseline_prefill if is_base else kvc.prefill)(model, prompt)
        elif is_base:
            lg, store = kvc.baseline_step(model, store, tok)
        elif store.fill < model.cfg.Wog:
            lg, store = kvc.step(model, store, tok)
        else:
            lg, store = kvc.slide(model, store, [tok])
        times.append(time.perf_counter_ns() - t0)
        units.append(ledger.interaction_units - u0)
        tok = int(np.argmax(lg.data))
    return times, units, store


def expected_units(model, N: int) -> tuple[int, int]:
    """Closed-form units for the first (miss) and third (hit) token of a length-``N`` prompt."""
    cfg = model.cfg
    if isinstance(model, BaselineTransformer):
        return baseline_cost(N, cfg.D, cfg.equivalent_depth), cfg.equivalent_depth * (N + 2) * cfg.D
    # token 2 slides the full prefill window, so token 3 is a hit at N + Wog
    miss = cfg.n_blocks * cost_cache_miss(N, cfg.D, cfg.Woh, cfg.Wog, cfg.H).total
    hit = cfg.n_blocks * cost_cache_hit(N + cfg.Wog, cfg.D, cfg.Woh, cfg.Wog, cfg.H)
    return miss, hit


def run_sweep(cfg: SweepConfig, models: dict, check_ledger: bool = True, log=None) -> list[SweepRow]:
    """Benchmark every model over the length grid.

    For each length: fresh caches, a uniform random prompt of that length,
    ``tokens_per_point`` greedy tokens; medians over ``repeats`` after
    ``warmup_runs``.  A ``MemoryError`` ends that model's sweep.
    """
    if not models:
        raise ValueError("run_sweep needs at least one model")
    rows: list[SweepRow] = []
    for name, model in models.items():
        rng = np.random.default_rng(cfg.seed)
        for N in cfg.lengths():
            try:
                firsts, thirds = [], []
                for r in range(cfg.warmup_runs + cfg.repeats):
                    prompt = rng.integers(0, model.cfg.vocab_size, size=N)
                    times, units, store = _generate_timed(model, prompt, cfg.tokens_per_point)
                    if r >= cfg.warmup_runs:
                        firsts.append(times[0])
                        thirds.append(times[2])
            except MemoryError:
                if log:
                    log(f"{name}: out of memory at N={N}; last successful N={rows[-1].N if rows else None}")
                break
            row = SweepRow(
                name, N, int(statistics.median(firsts)), int(statistics.median(thirds)), units[0], units[2],
                store.bytes_cached(),
            )
            is_tl = isinstance(model, TLinFormer)
            if check_ledger and (not is_tl or N - model.cfg.Wog >= model.cfg.Woh):
                exp_miss, exp_hit = expected_units(model, N)
                if (row.interaction_units_miss, row.interaction_units_hit) != (exp_miss, exp_hit):
                    raise LedgerMismatchError(
                        f"{name} N={N}: measured ({row.interaction_units_miss}, {row.interaction_units_hit}) "
                        f"!= formula ({exp_miss}, {exp_hit})"
                    )
            rows.append(row)
            if log:
                log(f"{name} N={N} first={row.t_first_nanos / 1e6:.2f}ms third={row.t_third_nanos / 1e6:.2f}ms")
    return rows


def speedup_table(rows_baseline: list[SweepRow], rows_model: list[SweepRow]) -> list[dict]:
    """Per-N ratios baseline/model for wall time and interaction units, in both modes."""
    na = [r.N for r in rows_baseline]
    nb = [r.N for r in rows_model]
    if na != nb:
        raise ValueError(f"misaligned length grids: {na} vs {nb}")
    out = []
    for a, b in zip(rows_baseline, rows_model):
        out.append(
            {
                "N": a.N,
                "miss_speedup": a.t_first_nanos / b.t_first_nanos,
                "hit_speedup": a.t_third_nanos / b.t_third_nanos,
                "miss_unit_ratio": a.interaction_units_miss / b.interaction_units_miss,
                "hit_unit_ratio": a.interaction_units_hit / b.interaction_units_hit,
            }
        )
    return out


def power_law_exponent(Ns, values) -> float:
    """Slope of the least-squares line through ``(log N, log value)``."""
    slope, _ = np.polyfit(np.log(np.asarray(Ns, float)), np.log(np.asarray(values, float)), 1)
    return float(slope)


def read_rows_csv(path) -> list[SweepRow]:
    with open(path, encoding="utf-8", newline="") as fh:
        rd = csv.DictReader(fh)
        return [
            SweepRow(r["model"], *(int(r[c]) for c in ROW_COLUMNS[1:]))
            for r in rd
        ]


def _plot(path, title, ylabel, series: dict[str, tuple[list, list]], logy: bool = False) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel("sequence length N")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if logy:
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    if series:
        ax.legend()
    atomic_write(path, lambda fh: fig.savefig(fh, format="svg"))
    plt.close(fig)


def emit_outputs(rows: list[SweepRow], out_dir) -> dict[str, str]:
    """Write ``bench.csv``, ``latency.svg``, ``speedup.svg`` and ``memory.svg``."""
    if not rows:
        raise ValueError("no benchmark rows to emit")
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, k) for k in ("bench.csv", "latency.svg", "speedup.svg", "memory.svg")}

    def write_csv(fh):
        w = csv.DictWriter(fh, fieldnames=ROW_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(dataclasses.asdict(r))

    atomic_write(paths["bench.csv"], write_csv, mode="w")

    by_model: dict[str, list[SweepRow]] = {}
    for r in rows:
        by_model.setdefault(r.model, []).append(r)

    lat = {}
    mem = {}
    for name, rs in by_model.items():
        xs = [r.N for r in rs]
        lat[f"{name} first (miss)"] = (xs, [r.t_first_nanos / 1e6 for r in rs])
        lat[f"{name} third (hit)"] = (xs, [r.t_third_nanos / 1e6 for r in rs])
        mem[name] = (xs, [r.bytes_cached / 2**20 for r in rs])
    _plot(paths["latency.svg"], "Per-token latency", "ms", lat, logy=True)
    _plot(paths["memory.svg"], "KV cache size", "MiB", mem)

    speed = {}
    if "baseline" in by_model:
        for name, rs in by_model.items():
            if name == "baseline":
                continue
            common = sorted(set(r.N for r in rs) & set(r.N for r in by_model["baseline"]))
            a = [r for r in by_model["baseline"] if r.N in common]
            b = [r for r in rs if r.N in common]
            if common:
                tab = speedup_table(a, b)
                speed[f"{name} miss"] = (common, [t["miss_speedup"] for t in tab])
                speed[f"{name} hit"] = (common, [t["hit_speedup"] for t in tab])
    _plot(paths["speedup.svg"], "Speedup over baseline", "x", speed)
    return paths


def build_bench_models(names, cfg: ModelConfig | None = None) -> dict:
    cfg = cfg or desk_model_config()
    return {name: build_model(name, cfg) for name in names}
