"""Sliding-window chunked training, perplexity evaluation, and corpus ingestion."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import BaselineTransformer, ModelConfig, TLinFormer, atomic_write
from .tensor import Tensor, backward, concat, cross_entropy, no_grad


class ConfigError(ValueError):
    pass


class TrainingDivergedError(ArithmeticError):
    pass


# -- corpus ---------------------------------------------------------------------

@dataclass
class CharTokenizer:
    """Character vocabulary sorted by code point."""

    chars: list[str]

    @classmethod
    def fit(cls, text: str) -> CharTokenizer:
        return cls(sorted(set(text)))

    @property
    def vocab_size(self) -> int:
        return len(self.chars)

    def encode(self, text: str) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.chars)}
        try:
            return np.fromiter((index[c] for c in text), dtype=np.int64, count=len(text))
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.chars[int(i)] for i in ids)

    def to_dict(self) -> dict:
        return {"chars": "".join(self.chars)}

    @classmethod
    def from_dict(cls, d: dict) -> CharTokenizer:
        return cls(list(d["chars"]))


@dataclass
class Corpus:
    train: np.ndarray
    eval: np.ndarray
    tokenizer: CharTokenizer


def ingest_corpus(path, eval_fraction: float = 0.1) -> Corpus:
    """Read UTF-8 text, build a char vocabulary, split the tail off for evaluation."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"corpus not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text:
        raise ValueError(f"corpus is empty: {path}")
    if not 0.0 <= eval_fraction < 1.0:
        raise ConfigError("eval_fraction must be in [0, 1)")
    tok = CharTokenizer.fit(text)
    ids = tok.encode(text)
    n_eval = int(round(len(ids) * eval_fraction))
    cut = len(ids) - n_eval
    return Corpus(ids[:cut], ids[cut:], tok)


def synthetic_pattern_text(n_chars: int, seed: int = 0) -> str:
    """Sentences drawn from a tiny template grammar: predictable but not trivial."""
    rng = np.random.default_rng(seed)
    subjects = ["the cat", "a dog", "my bird", "the fox", "one owl", "her fish"]
    verbs = ["sat on", "ran to", "looked at", "slept by", "jumped over"]
    objects = ["the mat", "a log", "the hill", "my hat", "the box", "a tree"]
    parts = []
    total = 0
    while total < n_chars:
        s = f"{subjects[rng.integers(len(subjects))]} {verbs[rng.integers(len(verbs))]} {objects[rng.integers(len(objects))]}. "
        parts.append(s)
        total += len(s)
    return "".join(parts)[:n_chars]


def synthetic_pattern_tokens(n: int, vocab_size: int = 64, seed: int = 0, n_patterns: int = 6) -> np.ndarray:
    """Token stream built by concatenating randomly chosen fixed patterns."""
    rng = np.random.default_rng(seed)
    patterns = [rng.integers(0, vocab_size, size=rng.integers(4, 9)) for _ in range(n_patterns)]
    out: list[int] = []
    while len(out) < n:
        out.extend(patterns[rng.integers(n_patterns)].tolist())
    return np.asarray(out[:n], dtype=np.int64)


def bundled_corpus_path() -> str:
    return os.path.join(os.path.dirname(__file__), "data", "tiny_corpus.txt")


# -- chunking ---------------------------------------------------------------------

@dataclass(frozen=True)
class Chunk:
    index: int
    hist_span: tuple[int, int]
    gen_span: tuple[int, int]


def chunk_sequence(N: int, Wog: int) -> list[Chunk]:
    """Split ``[0, N)`` into generation windows of stride ``Wog``; chunk ``k`` sees ``[0, k*Wog)``."""
    if Wog < 1 or N < 1 or N % Wog:
        raise ConfigError(f"sequence length {N} is not a positive multiple of Wog={Wog}")
    return [Chunk(k, (0, k * Wog), (k * Wog, (k + 1) * Wog)) for k in range(N // Wog)]


def chunked_logits(model: TLinFormer, tokens) -> Tensor:
    """Concatenated generation-window logits over every chunk, shape ``(..., N, V)``."""
    toks = np.asarray(tokens, dtype=np.int64)
    N = toks.shape[-1]
    parts = []
    for ch in chunk_sequence(N, model.cfg.Wog):
        parts.append(model.forward(toks[..., : ch.gen_span[1]], hist_len=ch.hist_span[1]))
    return parts[0] if len(parts) == 1 else concat(parts, axis=-2)


def sequence_logits(model, tokens) -> Tensor:
    if isinstance(model, BaselineTransformer):
        return model.forward(tokens)
    return chunked_logits(model, tokens)


def sequence_loss(model, batch) -> Tensor:
    """Mean next-token cross-entropy; ``batch`` has shape ``(B, N + 1)``."""
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim == 1:
        batch = batch[None]
    logits = sequence_logits(model, batch[:, :-1])
    return cross_entropy(logits, batch[:, 1:])


# -- optimisation -------------------------------------------------------------------

class Adam:
    def __init__(self, params: list[Tensor], lr: float = 3e-4, betas=(0.9, 0.95), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    corpus_path: str | None = None
    seq_len: int = 64
    batch_size: int = 4
    accum_steps: int = 1
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.95)
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    eval_fraction: float = 0.1
    model_kind: str = "tlinformer"

    def validate(self, Wog: int | None = None) -> None:
        if self.seq_len < 1 or self.batch_size < 1 or self.accum_steps < 1:
            raise ConfigError("seq_len, batch_size and accum_steps must be positive")
        if self.model_kind == "tlinformer" and Wog is not None and self.seq_len % Wog:
            raise ConfigError(f"seq_len={self.seq_len} must be a multiple of Wog={Wog}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def load_config_file(path) -> tuple[dict, dict]:
    """Return ``(model_overrides, train_overrides)`` from a JSON document."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc.get("model", {}), doc.get("train", {})


def train_step(model, token_batch, optimizer: Adam | None = None, accum_steps: int = 1) -> float:
    """Forward + backward on one micro-batch; steps the optimizer when given one.

    The loss is scaled by ``1/accum_steps`` before back-propagation so that
    several calls followed by one optimizer step average their gradients.
    """
    loss = sequence_loss(model, token_batch)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss {value}")
    backward(loss * (1.0 / accum_steps) if accum_steps != 1 else loss)
    if optimizer is not None:
        optimizer.step()
        optimizer.zero_grad()
    return value


def sample_batch(ids: np.ndarray, seq_len: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if len(ids) < seq_len + 1:
        raise ConfigError(f"corpus has {len(ids)} tokens; need at least seq_len+1={seq_len + 1}")
    starts = rng.integers(0, len(ids) - seq_len, size=batch_size)
    return np.stack([ids[s : s + seq_len + 1] for s in starts])


def steps_per_epoch(n_tokens: int, cfg: TrainConfig) -> int:
    return max(1, n_tokens // (cfg.seq_len * cfg.batch_size * cfg.accum_steps))


@dataclass
class TrainLogRow:
    step: int
    loss: float
    tokens_seen: int
    wall_nanos: int


LOG_COLUMNS = ("step", "loss", "tokens_seen", "wall_nanos")


def train(
    model,
    ids: np.ndarray,
    cfg: TrainConfig,
    on_step: Callable[[TrainLogRow], None] | None = None,
) -> list[TrainLogRow]:
    """Optimise ``model`` on random windows of ``ids``; deterministic for a fixed seed."""
    cfg.validate(model.cfg.Wog if isinstance(model, TLinFormer) else None)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * steps_per_epoch(len(ids), cfg)
    log: list[TrainLogRow] = []
    seen = 0
    t0 = time.perf_counter_ns()
    for s in range(total):
        losses = []
        for _ in range(cfg.accum_steps):
            batch = sample_batch(ids, cfg.seq_len, cfg.batch_size, rng)
            try:
                losses.append(train_step(model, batch, None, cfg.accum_steps))
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"step {s}: {exc}; tokens_seen={seen}") from None
            seen += batch.shape[0] * cfg.seq_len
        opt.step()
        opt.zero_grad()
        row = TrainLogRow(s, float(np.mean(losses)), seen, time.perf_counter_ns() - t0)
        log.append(row)
        if on_step is not None:
            on_step(row)
    return log


def write_log_csv(path, rows: list[TrainLogRow]) -> None:
    def write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r.step, repr(r.loss), r.tokens_seen, r.wall_nanos])

    atomic_write(path, write, mode="w")


def evaluate_ppl(model, eval_tokens, seq_len: int, batch_size: int = 8) -> float:
    """``exp`` of the mean token cross-entropy over non-overlapping windows."""
    ids = np.asarray(eval_tokens, dtype=np.int64)
    n_win = (len(ids) - 1) // seq_len
    if len(ids) < 2 or n_win == 0:
        raise ValueError(f"evaluation set too small: {len(ids)} tokens for seq_len={seq_len}")
    windows = np.stack([ids[i * seq_len : i * seq_len + seq_len + 1] for i in range(n_win)])
    total, count = 0.0, 0
    with no_grad():
        for b in range(0, n_win, batch_size):
            batch = windows[b : b + batch_size]
            loss = sequence_loss(model, batch)
            n = batch.shape[0] * seq_len
            total += loss.item() * n
            count += n
    return float(math.exp(total / count))


def model_config_for_corpus(tok: CharTokenizer, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=tok.vocab_size, **overrides)
