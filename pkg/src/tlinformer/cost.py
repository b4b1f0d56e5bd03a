"""Closed-form interaction-unit costs and KV-cache memory model.

All cost arithmetic is integer; memory ratios are exact fractions.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction


class CostDomainError(ValueError):
    pass


@dataclass(frozen=True)
class CostBreakdown:
    c_left: int
    c_right: int
    c1: int
    c0: int

    @property
    def total(self) -> int:
        return self.c_left + self.c_right


def _check(N, D, Woh, Wog, H):
    for name, v in (("N", N), ("D", D), ("Woh", Woh), ("Wog", Wog), ("H", H)):
        if int(v) != v:
            raise CostDomainError(f"{name} must be an integer")
    if D < 1 or Wog < 1 or Woh < 0 or H < 0:
        raise CostDomainError("need D >= 1, Wog >= 1, Woh >= 0, H >= 0")
    if N < Wog:
        raise CostDomainError(f"N={N} is shorter than the generation window Wog={Wog}")


def miss_slope(D: int, Woh: int, Wog: int) -> int:
    return D * (2 * Woh + Wog)


def miss_intercept(D: int, Woh: int, Wog: int, H: int) -> int:
    return D * (H * (Woh * Woh + Wog * Wog + Wog * Woh) + Wog * Wog - Wog * Woh)


def cost_cache_miss(N: int, D: int, Woh: int, Wog: int, H: int) -> CostBreakdown:
    """Per-block cost of a full forward (history window + generation window)."""
    _check(N, D, Woh, Wog, H)
    hist = N - Wog
    c_left = 2 * D * hist * Woh + H * D * Woh * Woh
    c_right = D * Wog * hist + (H + 1) * D * Wog * Woh + (H + 2) * D * Wog * Wog
    return CostBreakdown(c_left, c_right, miss_slope(D, Woh, Wog), miss_intercept(D, Woh, Wog, H))


def cost_cache_miss_closed_form(N: int, D: int, Woh: int, Wog: int, H: int) -> int:
    """The factored total ``D[N(2Woh+Wog) + H(Woh^2+Wog^2+Wog Woh) + Wog^2 - Wog Woh]``."""
    _check(N, D, Woh, Wog, H)
    return D * (N * (2 * Woh + Wog) + H * (Woh**2 + Wog**2 + Wog * Woh) + Wog**2 - Wog * Woh)


def cost_cache_hit(N: int, D: int, Woh: int, Wog: int, H: int) -> int:
    """Per-block cost of one cached generation step."""
    _check(N, D, Woh, Wog, H)
    return D * (N - Wog) + (H + 1) * D * Woh + (H + 2) * D * Wog * Wog


def cost_cache_hit_expanded(N: int, D: int, Woh: int, Wog: int, H: int) -> int:
    _check(N, D, Woh, Wog, H)
    return D * N - D * Wog + (H + 1) * D * Woh + (H + 2) * D * Wog**2


def baseline_cost(N: int, D: int, n_layers: int) -> int:
    """Full causal self-attention over ``N`` tokens in every layer (window-area convention)."""
    if N < 1 or D < 1 or n_layers < 1:
        raise CostDomainError("baseline_cost needs positive arguments")
    return n_layers * N * N * D


@dataclass(frozen=True)
class MemoryModel:
    B: int
    L: int
    d_model: int
    P_bytes: int
    N_layers: int
    H: int
    m_transformer: int
    m_tlinformer: Fraction
    ratio: Fraction


def memory_eval(B: int, L: int, d_model: int, P_bytes: int, N_layers: int, H: int) -> MemoryModel:
    """KV-cache bytes of a standard decoder vs. the asymptotic TLinFormer estimate."""
    if min(B, L, d_model, P_bytes, N_layers) < 1 or H < 0:
        raise CostDomainError("memory_eval needs positive arguments")
    m_t = 2 * B * L * d_model * P_bytes * N_layers
    m_tl = Fraction(m_t, H + 2)
    return MemoryModel(B, L, d_model, P_bytes, N_layers, H, m_t, m_tl, m_tl / m_t)


SWEEP_COLUMNS = ("N", "miss_units", "hit_units", "baseline_units", "m_transformer", "m_tlinformer", "ratio")


def cost_sweep(Ns, D: int, Woh: int, Wog: int, H: int, n_blocks: int, P_bytes: int = 8, B: int = 1) -> list[dict]:
    """Model-level (all blocks) costs and cache bytes over a grid of lengths."""
    n_layers = n_blocks * (H + 2)
    rows = []
    for N in Ns:
        mem = memory_eval(B, N, D, P_bytes, n_layers, H)
        rows.append(
            {
                "N": N,
                "miss_units": n_blocks * cost_cache_miss(N, D, Woh, Wog, H).total,
                "hit_units": n_blocks * cost_cache_hit(N, D, Woh, Wog, H),
                "baseline_units": baseline_cost(N, D, n_layers),
                "m_transformer": mem.m_transformer,
                "m_tlinformer": mem.m_tlinformer,
                "ratio": mem.ratio,
            }
        )
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        # exact rationals: integers stay integers, the rest render as p/q
        w.writerow({k: (str(v) if isinstance(v, Fraction) else v) for k, v in r.items()})
    return buf.getvalue()
