"""TLinFormer blocks, the stacked model, and a standard decoder-only baseline."""

from __future__ import annotations

import dataclasses
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .attention import (
    CROSS,
    SELF_FULL,
    AttentionInputs,
    AttentionPattern,
    AttentionProjections,
    attend,
    attention_core,
)
from .tensor import Tensor, embedding, gelu, layer_norm, matmul, transpose

CHECKPOINT_VERSION = 1


class LayoutError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 64
    D: int = 32
    n_head: int = 4
    H: int = 2
    n_blocks: int = 2
    Woh: int = 16
    Wog: int = 16
    ffn_mult: int = 4
    max_seq: int = 1 << 16
    seed: int = 0
    dtype: str = "float64"
    # The last block's restore layer feeds nothing, but the cache-miss cost
    # formula counts it; keep it on so ledgers match the formula per block.
    restore_last: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def equivalent_depth(self) -> int:
        return self.n_blocks * (self.H + 2)

    @property
    def W_total(self) -> int:
        return self.Woh + self.Wog

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> None:
        if self.D <= 0 or self.n_head <= 0 or self.D % self.n_head:
            raise ValueError(f"D={self.D} must be a positive multiple of n_head={self.n_head}")
        if self.Woh < 0 or self.Wog < 1:
            raise ValueError("need Woh >= 0 and Wog >= 1")
        if self.H < 0 or self.n_blocks < 1 or self.vocab_size < 1:
            raise ValueError("need H >= 0, n_blocks >= 1, vocab_size >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def reference_scale(cls, **overrides) -> ModelConfig:
        """The 41M-parameter comparison configuration (2 blocks x (H+2) = depth 8)."""
        base = dict(vocab_size=50257, D=432, n_head=12, H=2, n_blocks=2, Woh=256, Wog=256)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class WindowLayout:
    N: int
    Woh: int
    Wog: int

    def __post_init__(self):
        if self.Wog < 1 or self.Woh < 0:
            raise LayoutError("need Wog >= 1 and Woh >= 0")
        if self.N < self.Wog:
            raise LayoutError(f"sequence length N={self.N} is shorter than Wog={self.Wog}")

    @classmethod
    def for_config(cls, N: int, cfg: ModelConfig) -> WindowLayout:
        return cls(N, cfg.Woh, cfg.Wog)

    @property
    def W_total(self) -> int:
        return self.Woh + self.Wog

    @property
    def ratio(self) -> float:
        return self.Woh / self.W_total

    @property
    def stride(self) -> int:
        return self.Wog

    @property
    def hist_len(self) -> int:
        return self.N - self.Wog


@dataclass
class BlockState:
    """Per-block outputs: ``context_layers`` C_0..C_{H+1} and ``gen_layers`` H_0..H_{H+2}."""

    context_layers: list[Tensor] = field(default_factory=list)
    gen_layers: list[Tensor] = field(default_factory=list)


def sinusoidal_positions(positions, D: int, dtype=np.float64) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)


# -- parameterised modules ----------------------------------------------------

class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            yield from _walk(val, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(val, path: str):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield path, val
    elif isinstance(val, Module):
        yield from val.named_parameters(path + ".")
    elif isinstance(val, AttentionProjections):
        for n, t in val.parameters().items():
            yield f"{path}.{n}", t
    elif isinstance(val, list):
        for i, item in enumerate(val):
            yield from _walk(item, f"{path}.{i}")


def _param(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype, std: float = 0.02):
        self.w = _param(rng, (d_in, d_out), std, dtype)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b


class LayerNorm(Module):
    def __init__(self, D: int, dtype):
        self.gain = Tensor(np.ones(D, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(D, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, D: int, mult: int, rng, dtype):
        self.up = Linear(D, mult * D, rng, dtype)
        self.down = Linear(mult * D, D, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))


def _proj(D, rng, dtype) -> AttentionProjections:
    return AttentionProjections.init(D, rng, dtype=dtype)


class ContextLayer(Module):
    """One context-path layer: ``kind`` is ``focus``, ``self`` or ``restore``."""

    def __init__(self, kind: str, cfg: ModelConfig, rng):
        dt = cfg.np_dtype
        self.kind = kind
        self.ln1 = LayerNorm(cfg.D, dt)
        if kind == "restore":
            self.ln_kv = LayerNorm(cfg.D, dt)
        self.attn = _proj(cfg.D, rng, dt)
        self.ln2 = LayerNorm(cfg.D, dt)
        self.ffn = FeedForward(cfg.D, cfg.ffn_mult, rng, dt)

    def __call__(self, x: Tensor, n_head: int, *, width: int = 0, hist: Tensor | None = None) -> Tensor:
        if self.kind == "focus":
            L = x.shape[-2]
            sel = range(L - width, L)
            n = self.ln1(x)
            a = attend(AttentionInputs(n, n, n, n_head), AttentionPattern.focused(sel), self.attn)
            u = x[..., L - width :, :] + a
        elif self.kind == "self":
            n = self.ln1(x)
            u = x + attend(AttentionInputs(n, n, n, n_head), SELF_FULL, self.attn)
        else:
            q = self.ln1(hist)
            kv = self.ln_kv(x)
            u = hist + attend(AttentionInputs(q, kv, kv, n_head), CROSS, self.attn)
        return u + self.ffn(self.ln2(u))


class GenLayer(Module):
    """Generation-path layer: causal self-attention plus cross-attention into a context source."""

    def __init__(self, cfg: ModelConfig, rng):
        dt = cfg.np_dtype
        self.ln1 = LayerNorm(cfg.D, dt)
        self.self_attn = _proj(cfg.D, rng, dt)
        self.ln_src = LayerNorm(cfg.D, dt)
        self.cross_attn = _proj(cfg.D, rng, dt)
        self.ln2 = LayerNorm(cfg.D, dt)
        self.ffn = FeedForward(cfg.D, cfg.ffn_mult, rng, dt)

    def __call__(self, h: Tensor, src: Tensor | None, n_head: int, cap: list | None = None) -> Tensor:
        n = self.ln1(h)
        p = self.self_attn
        q, k, v = p.q(n), p.k(n), p.v(n)
        u = h + p.out(attention_core(q, k, v, n_head, causal_offset=0))
        entry = {"q": q, "k": k, "v": v}
        if src is not None:
            c = self.cross_attn
            s = self.ln_src(src)
            kc, vc = c.k(s), c.v(s)
            u = u + c.out(attention_core(c.q(n), kc, vc, n_head))
            entry["kc"], entry["vc"] = kc, vc
        if cap is not None:
            cap.append({key: t.data.copy() for key, t in entry.items()})
        return u + self.ffn(self.ln2(u))

    def step_row(self, h_row: Tensor, slot: int, cache: dict, n_head: int) -> Tensor:
        """Advance one new generation row using cached window and context K/V.

        The causal self-attention is recomputed over every slot of the window
        buffer; only row ``slot`` is kept.
        """
        n = self.ln1(h_row)
        p = self.self_attn
        cache["q"][..., slot : slot + 1, :] = p.q(n).data
        cache["k"][..., slot : slot + 1, :] = p.k(n).data
        cache["v"][..., slot : slot + 1, :] = p.v(n).data
        full = attention_core(
            Tensor(cache["q"]), Tensor(cache["k"]), Tensor(cache["v"]), n_head, causal_offset=0
        )
        u = h_row + p.out(full[..., slot : slot + 1, :])
        if "kc" in cache:
            c = self.cross_attn
            u = u + c.out(attention_core(c.q(n), Tensor(cache["kc"]), Tensor(cache["vc"]), n_head))
        return u + self.ffn(self.ln2(u))


class TLinBlock(Module):
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.ctx = [ContextLayer("focus", cfg, rng)]
        self.ctx += [ContextLayer("self", cfg, rng) for _ in range(cfg.H)]
        self.ctx.append(ContextLayer("restore", cfg, rng))
        self.gen = [GenLayer(cfg, rng) for _ in range(cfg.H + 2)]

    def named_parameters(self, prefix: str = ""):
        yield from _walk(self.ctx, prefix + "ctx")
        yield from _walk(self.gen, prefix + "gen")

    def context_path_forward(self, x_hist: Tensor | None, restore: bool) -> list[Tensor]:
        """Compress, refine and (optionally) restore the history.

        Returns ``[C_0, ..., C_H]`` plus the restored ``C_{H+1}`` when ``restore``.
        An empty history yields an empty list.
        """
        if x_hist is None or x_hist.shape[-2] == 0:
            return []
        nh = self.cfg.n_head
        width = min(self.cfg.Woh, x_hist.shape[-2])
        if width == 0:
            return []
        c = self.ctx[0](x_hist, nh, width=width)
        layers = [c]
        for layer in self.ctx[1:-1]:
            c = layer(c, nh)
            layers.append(c)
        if restore:
            layers.append(self.ctx[-1](c, nh, hist=x_hist))
        return layers

    def generation_path_forward(
        self, x_gen: Tensor, x_hist: Tensor | None, context_layers: list[Tensor], cap: list | None = None
    ) -> list[Tensor]:
        """Returns ``[H_0 = x_gen, H_1, ..., H_{H+2}]``."""
        has_hist = x_hist is not None and x_hist.shape[-2] > 0
        nh = self.cfg.n_head
        h = x_gen
        out = [h]
        for L, layer in enumerate(self.gen):
            src = None
            if has_hist:
                # layer 0 reads the raw history; later layers read C_{L-1}
                src = x_hist if L == 0 else (context_layers[L - 1] if context_layers else None)
            h = layer(h, src, nh, cap)
            out.append(h)
        return out

    def __call__(self, x_hist, x_gen, restore: bool, cap: list | None = None):
        ctx = self.context_path_forward(x_hist, restore)
        gen = self.generation_path_forward(x_gen, x_hist, ctx, cap)
        restored = ctx[-1] if (restore and ctx) else None
        return BlockState(ctx, gen), restored


class _LanguageModel(Module):
    kind = "base"

    def _embed(self, tokens: np.ndarray, start: int) -> Tensor:
        cfg = self.cfg
        L = tokens.shape[-1]
        if start + L > cfg.max_seq:
            raise LayoutError(f"position {start + L} exceeds max_seq={cfg.max_seq}")
        x = embedding(self.tok_emb, tokens) * math.sqrt(cfg.D)
        return x + Tensor(sinusoidal_positions(range(start, start + L), cfg.D, cfg.np_dtype))

    def _logits(self, h: Tensor) -> Tensor:
        return matmul(self.ln_f(h), transpose(self.tok_emb, (1, 0)))


def _tokens(tokens) -> tuple[np.ndarray, bool]:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim != 2:
        raise LayoutError(f"tokens must be 1-d or 2-d, got shape {arr.shape}")
    return arr, False


def _squeeze(t: Tensor, squeeze: bool) -> Tensor:
    return t.reshape(t.shape[1:]) if squeeze else t


class TLinFormer(_LanguageModel):
    kind = "tlinformer"

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        self.tok_emb = _param(rng, (cfg.vocab_size, cfg.D), 0.02, dt)
        self.blocks = [TLinBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.ln_f = LayerNorm(cfg.D, dt)

    def named_parameters(self, prefix: str = ""):
        yield prefix + "tok_emb", self.tok_emb
        yield from _walk(self.blocks, prefix + "blocks")
        yield from _walk(self.ln_f, prefix + "ln_f")

    def forward_states(self, tokens, hist_len: int | None = None, capture: list | None = None):
        """Full uncached forward; returns ``(logits, states)``.

        ``hist_len`` defaults to ``N - Wog``; any split with a generation part of
        1..Wog tokens is accepted.  ``capture`` (a list) receives per-block
        dicts with the K/V needed to resume generation from cache.
        """
        cfg = self.cfg
        toks, squeeze = _tokens(tokens)
        N = toks.shape[-1]
        if hist_len is None:
            hist_len = WindowLayout.for_config(N, cfg).hist_len
        gen_len = N - hist_len
        if hist_len < 0 or not 1 <= gen_len <= cfg.Wog:
            raise LayoutError(f"generation part of {gen_len} tokens does not fit Wog={cfg.Wog}")
        x_hist = self._embed(toks[:, :hist_len], 0) if hist_len else None
        x_gen = self._embed(toks[:, hist_len:], hist_len)
        states = []
        for b, block in enumerate(self.blocks):
            restore = cfg.restore_last or b < cfg.n_blocks - 1
            cap = [] if capture is not None else None
            state, restored = block(x_hist, x_gen, restore, cap)
            if capture is not None:
                capture.append(cap)
            states.append(state)
            x_gen = state.gen_layers[-1]
            x_hist = restored if restored is not None else x_hist
        return _squeeze(self._logits(x_gen), squeeze), states

    def forward(self, tokens, hist_len: int | None = None) -> Tensor:
        return self.forward_states(tokens, hist_len)[0]

    __call__ = forward


def tlinformer_forward(model: TLinFormer, tokens, layout: WindowLayout | None = None) -> Tensor:
    """Logits over the generation window (last ``Wog`` positions)."""
    toks = np.asarray(tokens)
    if layout is not None:
        if layout.N != toks.shape[-1] or layout.Wog != model.cfg.Wog or layout.Woh != model.cfg.Woh:
            raise LayoutError("layout does not match tokens/model")
    return model.forward(toks)


class BaselineLayer(Module):
    def __init__(self, cfg: ModelConfig, rng):
        dt = cfg.np_dtype
        self.ln1 = LayerNorm(cfg.D, dt)
        self.attn = _proj(cfg.D, rng, dt)
        self.ln2 = LayerNorm(cfg.D, dt)
        self.ffn = FeedForward(cfg.D, cfg.ffn_mult, rng, dt)

    def __call__(self, x: Tensor, n_head: int, cap: list | None = None) -> Tensor:
        n = self.ln1(x)
        p = self.attn
        q, k, v = p.q(n), p.k(n), p.v(n)
        L = x.shape[-2]
        x = x + p.out(attention_core(q, k, v, n_head, causal_offset=0))
        if cap is not None:
            cap.append({"k": k.data.copy(), "v": v.data.copy()})
        return x + self.ffn(self.ln2(x))

    def step_row(self, x_row: Tensor, cache: dict, n_head: int) -> Tensor:
        n = self.ln1(x_row)
        p = self.attn
        # append-and-copy: the cache is reallocated on every step
        cache["k"] = np.concatenate([cache["k"], p.k(n).data], axis=-2)
        cache["v"] = np.concatenate([cache["v"], p.v(n).data], axis=-2)
        a = attention_core(p.q(n), Tensor(cache["k"]), Tensor(cache["v"]), n_head)
        x = x_row + p.out(a)
        return x + self.ffn(self.ln2(x))


class BaselineTransformer(_LanguageModel):
    """Pre-norm decoder-only Transformer with ``equivalent_depth`` layers."""

    kind = "baseline"

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        self.tok_emb = _param(rng, (cfg.vocab_size, cfg.D), 0.02, dt)
        self.layers = [BaselineLayer(cfg, rng) for _ in range(cfg.equivalent_depth)]
        self.ln_f = LayerNorm(cfg.D, dt)

    def named_parameters(self, prefix: str = ""):
        yield prefix + "tok_emb", self.tok_emb
        yield from _walk(self.layers, prefix + "layers")
        yield from _walk(self.ln_f, prefix + "ln_f")

    def forward(self, tokens, capture: list | None = None) -> Tensor:
        toks, squeeze = _tokens(tokens)
        x = self._embed(toks, 0)
        for layer in self.layers:
            x = layer(x, self.cfg.n_head, capture)
        return _squeeze(self._logits(x), squeeze)

    __call__ = forward


def baseline_forward(model: BaselineTransformer, tokens) -> Tensor:
    return model.forward(tokens)


def build_model(kind: str, cfg: ModelConfig):
    if kind == "tlinformer":
        return TLinFormer(cfg)
    if kind == "baseline":
        return BaselineTransformer(cfg)
    raise ValueError(f"unknown model kind {kind!r}")


def parameter_parity(cfg: ModelConfig) -> dict:
    """Parameter counts of both models at equal equivalent depth, and their difference."""
    tl = TLinFormer(cfg).num_parameters()
    base = BaselineTransformer(cfg).num_parameters()
    return {
        "equivalent_depth": cfg.equivalent_depth,
        "tlinformer": tl,
        "baseline": base,
        "delta": tl - base,
        "attention_sites_tlinformer": cfg.n_blocks * (3 * (cfg.H + 2)),
        "attention_sites_baseline": cfg.equivalent_depth,
    }


# -- checkpoints ----------------------------------------------------------------

def atomic_write(path: str | os.PathLike, write_fn, mode: str = "wb") -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        kwargs = {} if "b" in mode else {"encoding": "utf-8", "newline": ""}
        with os.fdopen(fd, mode, **kwargs) as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model_kind": model.kind,
        "config": model.cfg.to_dict(),
        "extra": extra or {},
    }
    arrays = {name: p.data.astype("<f8") for name, p in model.named_parameters()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    atomic_write(path, lambda fh: np.savez(fh, **arrays))


def load_checkpoint(path):
    """Return ``(model, meta)``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise CheckpointError("checkpoint has no metadata record")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {meta.get('format_version')!r} (expected {CHECKPOINT_VERSION})"
        )
    cfg = ModelConfig.from_dict(meta["config"])
    model = build_model(meta["model_kind"], cfg)
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        raise CheckpointError("checkpoint parameter names do not match the model")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}")
        p.data = arrays[name].astype(cfg.np_dtype)
    return model, meta
