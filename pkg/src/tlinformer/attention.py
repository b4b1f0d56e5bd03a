"""Exact multi-head softmax attention under the four connection patterns.

``SelfFull``  every query sees every key of the same sequence.
``Causal``    query ``i`` sees keys ``j <= i``.
``Focused``   queries are a chosen subset of the input rows, keys/values the whole input.
``Cross``     queries from one sequence, keys/values from another.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, grad_enabled, current_ledger, getitem, make_result, matmul

MASK_VALUE = -1e9
# Query-block size used to bound score-matrix memory when no tape is recorded.
_INFERENCE_SCORE_BUDGET = 1 << 22
_CAUSAL_MIN_BLOCK = 64


class DegenerateMaskError(ValueError):
    """A query row has no admissible key."""


class PatternKind(enum.Enum):
    SELF_FULL = "self"
    CAUSAL = "causal"
    FOCUSED = "focused"
    CROSS = "cross"


@dataclass(frozen=True)
class AttentionPattern:
    kind: PatternKind
    query_selection: tuple[int, ...] | None = None
    causal_offset: int = 0

    def __post_init__(self):
        if self.kind is PatternKind.FOCUSED:
            sel = self.query_selection
            if sel is None or len(sel) == 0:
                raise ValueError("focused attention needs a non-empty query_selection")
            if any(b <= a for a, b in zip(sel, sel[1:])) or sel[0] < 0:
                raise ValueError("query_selection must be strictly increasing and non-negative")

    @classmethod
    def self_full(cls) -> AttentionPattern:
        return cls(PatternKind.SELF_FULL)

    @classmethod
    def causal(cls) -> AttentionPattern:
        return cls(PatternKind.CAUSAL)

    @classmethod
    def focused(cls, selection) -> AttentionPattern:
        return cls(PatternKind.FOCUSED, tuple(int(i) for i in selection))

    @classmethod
    def cross(cls) -> AttentionPattern:
        return cls(PatternKind.CROSS)


SELF_FULL = AttentionPattern.self_full()
CAUSAL = AttentionPattern.causal()
CROSS = AttentionPattern.cross()


@dataclass
class AttentionInputs:
    Q: Tensor
    K: Tensor
    V: Tensor
    n_head: int

    @property
    def d_k(self) -> int:
        return self.Q.shape[-1] // self.n_head


@dataclass
class AttentionProjections:
    """Per-site ``W_Q, W_K, W_V, W_O``; ``None`` entries act as identity."""

    wq: Tensor | None = None
    wk: Tensor | None = None
    wv: Tensor | None = None
    wo: Tensor | None = None
    names: tuple[str, ...] = field(default=("wq", "wk", "wv", "wo"), repr=False)

    @classmethod
    def init(cls, D: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float64):
        def w():
            return Tensor(rng.normal(0.0, std, size=(D, D)).astype(dtype), requires_grad=True)

        return cls(w(), w(), w(), w())

    def parameters(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in self.names if getattr(self, n) is not None}

    def q(self, x: Tensor) -> Tensor:
        return x if self.wq is None else matmul(x, self.wq)

    def k(self, x: Tensor) -> Tensor:
        return x if self.wk is None else matmul(x, self.wk)

    def v(self, x: Tensor) -> Tensor:
        return x if self.wv is None else matmul(x, self.wv)

    def out(self, x: Tensor) -> Tensor:
        return x if self.wo is None else matmul(x, self.wo)


IDENTITY = AttentionProjections()


def build_mask(pattern: AttentionPattern, Lq: int, Lk: int) -> np.ndarray | None:
    """Additive mask: 0 where allowed, ``MASK_VALUE`` where not.

    ``None`` means every pair is allowed.  Causal masks honour
    ``pattern.causal_offset`` so query ``i`` may see keys ``j <= i + offset``.
    """
    if Lq < 1 or Lk < 1:
        raise ShapeError(f"mask needs positive sizes, got {Lq}x{Lk}")
    if pattern.kind is not PatternKind.CAUSAL:
        return None
    i = np.arange(Lq)[:, None] + pattern.causal_offset
    j = np.arange(Lk)[None, :]
    return np.where(j <= i, 0.0, MASK_VALUE)


def dense_mask(pattern: AttentionPattern, Lq: int, Lk: int) -> np.ndarray:
    m = build_mask(pattern, Lq, Lk)
    return np.zeros((Lq, Lk)) if m is None else m


def _split_heads(x: np.ndarray, n_head: int) -> np.ndarray:
    *lead, L, D = x.shape
    nl = len(lead)
    axes = (*range(nl), nl + 1, nl, nl + 2)
    return x.reshape(*lead, L, n_head, D // n_head).transpose(axes)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, h, L, dk = x.shape
    nl = len(lead)
    axes = (*range(nl), nl + 1, nl, nl + 2)
    return x.transpose(axes).reshape(*lead, L, h * dk)


def _softmax(z: np.ndarray) -> np.ndarray:
    # in place: callers always pass a freshly computed score array
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def _causal_block(r0: int, r1: int, Lk: int, offset: int, dtype) -> np.ndarray:
    i = np.arange(r0, r1)[:, None] + offset
    return np.where(np.arange(Lk)[None, :] <= i, 0.0, MASK_VALUE).astype(dtype, copy=False)


def attention_core(
    q: Tensor, k: Tensor, v: Tensor, n_head: int, mask: np.ndarray | None = None, causal_offset: int | None = None
) -> Tensor:
    """Multi-head ``softmax(q k^T / sqrt(d_k) + mask) v`` on projected inputs.

    ``q`` is ``(..., Lq, D)``, ``k``/``v`` are ``(..., Lk, D)``.  Charges
    ``batch * Lq * Lk * D`` interaction units regardless of the mask.
    ``causal_offset`` requests the causal mask of :func:`build_mask` without
    materialising it; inference then skips key columns a query block cannot
    see (their softmax weight underflows to exactly zero anyway).
    """
    if causal_offset is not None:
        if mask is not None:
            raise ValueError("pass either mask or causal_offset")
        if q.shape[-2] + causal_offset < 1:
            raise DegenerateMaskError("a query row has every key masked")
    D = q.shape[-1]
    if k.shape[-1] != D or v.shape[-1] != D:
        raise ShapeError(f"q/k/v widths differ: {q.shape}, {k.shape}, {v.shape}")
    if n_head < 1 or D % n_head:
        raise ShapeError(f"width {D} is not divisible by n_head={n_head}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("keys and values differ in length")
    Lq, Lk = q.shape[-2], k.shape[-2]
    if Lk == 0:
        raise DegenerateMaskError("attention over zero keys")
    if mask is not None:
        if mask.shape != (Lq, Lk):
            raise ShapeError(f"mask shape {mask.shape} != ({Lq}, {Lk})")
        if not (mask == 0).any(axis=1).all():
            raise DegenerateMaskError("a query row has every key masked")
    lead_q, lead_k = q.shape[:-2], k.shape[:-2]
    batch = math.prod(lead_q if lead_q == lead_k else np.broadcast_shapes(lead_q, lead_k))
    ledger = current_ledger()
    ledger.charge_interaction(batch * Lq * Lk * D)
    ledger.charge_flops(2 * batch * Lq * Lk * D)

    dk = D // n_head
    scale = 1.0 / math.sqrt(dk)
    Qh = _split_heads(q.data, n_head)
    Kh = _split_heads(k.data, n_head)
    Vh = _split_heads(v.data, n_head)
    track = grad_enabled() and (q.requires_grad or k.requires_grad or v.requires_grad)

    if not track:
        block = max(1, _INFERENCE_SCORE_BUDGET // max(1, Lk * n_head * batch))
        if causal_offset is not None:
            # rows per block capped at Lq/16 (floor 64): the skipped share of the square stays ~1/2 at every long Lq
            block = min(block, max(_CAUSAL_MIN_BLOCK, -(-Lq // 16)))
        KhT = np.swapaxes(Kh, -1, -2)
        Qs = Qh * np.asarray(scale, dtype=Qh.dtype)
        parts = []
        for r0 in range(0, Lq, block):
            r1 = min(Lq, r0 + block)
            s = np.matmul(Qs[..., r0:r1, :], KhT if causal_offset is None else KhT[..., : max(0, min(Lk, r1 + causal_offset))])
            if mask is not None:
                s += mask[r0:r1]
            elif causal_offset is not None:
                # keys before r0 + offset are visible to every row of the block
                k0 = max(0, r0 + causal_offset)
                s[..., k0:] += _causal_block(r0, r1, s.shape[-1], causal_offset, s.dtype)[:, k0:]
            parts.append(np.matmul(_softmax(s), Vh[..., : s.shape[-1], :]))
        out = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-2)
        return make_result(_merge_heads(out), (), None, "attention")

    if causal_offset is not None:
        mask = _causal_block(0, Lq, Lk, causal_offset, np.float64)
    s = np.matmul(Qh, np.swapaxes(Kh, -1, -2)) * scale
    if mask is not None:
        s = s + mask
    P = _softmax(s)
    Oh = np.matmul(P, Vh)
    qs, ks, vs = q.shape, k.shape, v.shape

    def backward(g):
        from .tensor import _unbroadcast

        gO = _split_heads(g, n_head)
        gV = np.matmul(np.swapaxes(P, -1, -2), gO)
        gP = np.matmul(gO, np.swapaxes(Vh, -1, -2))
        gS = P * (gP - (gP * P).sum(axis=-1, keepdims=True)) * scale
        gQ = np.matmul(gS, Kh)
        gK = np.matmul(np.swapaxes(gS, -1, -2), Qh)
        return (
            _unbroadcast(_merge_heads(gQ), qs),
            _unbroadcast(_merge_heads(gK), ks),
            _unbroadcast(_merge_heads(gV), vs),
        )

    return make_result(_merge_heads(Oh), (q, k, v), backward, "attention")


def attend(
    inputs: AttentionInputs,
    pattern: AttentionPattern,
    proj: AttentionProjections = IDENTITY,
) -> Tensor:
    """Project, attend under ``pattern``, merge heads, output-project."""
    Q, K, V = inputs.Q, inputs.K, inputs.V
    D = Q.shape[-1]
    if D % inputs.n_head:
        raise ShapeError(f"D={D} not divisible by n_head={inputs.n_head}")
    if pattern.kind is PatternKind.FOCUSED:
        sel = np.asarray(pattern.query_selection)
        if sel[-1] >= Q.shape[-2]:
            raise ValueError("query_selection exceeds the input length")
        Q = getitem(Q, (Ellipsis, sel, slice(None)))
    if pattern.kind is PatternKind.CAUSAL and Q.shape[-2] != K.shape[-2]:
        raise ShapeError("causal attention needs Lq == Lk")
    if pattern.kind is PatternKind.CAUSAL:
        return proj.out(attention_core(proj.q(Q), proj.k(K), proj.v(V), inputs.n_head, causal_offset=pattern.causal_offset))
    return proj.out(attention_core(proj.q(Q), proj.k(K), proj.v(V), inputs.n_head))
