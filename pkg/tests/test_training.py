import math

import numpy as np
import pytest

from tlinformer.model import BaselineTransformer, ModelConfig, TLinFormer
from tlinformer.tensor import backward, no_grad
from tlinformer.training import (
    Adam,
    CharTokenizer,
    ConfigError,
    TrainConfig,
    bundled_corpus_path,
    chunk_sequence,
    chunked_logits,
    evaluate_ppl,
    ingest_corpus,
    load_config_file,
    sequence_loss,
    synthetic_pattern_tokens,
    train,
    train_step,
    write_log_csv,
)


def test_chunk_sequence_examples():
    ch = chunk_sequence(12, 4)
    assert [c.hist_span for c in ch] == [(0, 0), (0, 4), (0, 8)]
    assert chunk_sequence(4, 4)[0].hist_span == (0, 0)
    covered = [i for c in ch for i in range(*c.gen_span)]
    assert covered == list(range(12))
    with pytest.raises(ConfigError):
        chunk_sequence(10, 4)


def test_chunked_logits_equal_prefix_forwards(micro_cfg, rng):
    m = TLinFormer(micro_cfg)
    t = rng.integers(0, 11, size=16)
    with no_grad():
        got = chunked_logits(m, t).data
        for k in range(4):
            ref = m.forward(t[: (k + 1) * 4], hist_len=4 * k).data
            assert np.max(np.abs(got[4 * k : 4 * k + 4] - ref)) <= 1e-9


def test_each_target_contributes_once(micro_cfg, rng):
    m = TLinFormer(micro_cfg)
    batch = rng.integers(0, 11, size=(2, 13))
    with no_grad():
        logits = chunked_logits(m, batch[:, :-1]).data
    assert logits.shape == (2, 12, 11)
    z = logits - logits.max(-1, keepdims=True)
    lp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    ref = -np.take_along_axis(lp, batch[:, 1:, None], -1).mean()
    with no_grad():
        assert abs(sequence_loss(m, batch).item() - ref) < 1e-12


def test_initial_loss_near_uniform(micro_cfg, rng):
    m = TLinFormer(micro_cfg)
    with no_grad():
        loss = sequence_loss(m, rng.integers(0, 11, size=(4, 17))).item()
    assert abs(loss - math.log(11)) < 0.1 * math.log(11)


def test_untrained_ppl_near_vocab(micro_cfg, rng):
    m = TLinFormer(micro_cfg)
    ppl = evaluate_ppl(m, rng.integers(0, 11, size=401), seq_len=8)
    assert abs(ppl - 11) < 1.1


def test_training_reduces_loss_and_is_deterministic():
    cfg = ModelConfig(vocab_size=16, D=16, n_head=2, H=1, n_blocks=1, Woh=8, Wog=8)
    ids = synthetic_pattern_tokens(4000, vocab_size=16, seed=3)
    tc = TrainConfig(seq_len=16, batch_size=4, lr=3e-3, max_steps=40, seed=5)
    log_a = train(TLinFormer(cfg), ids, tc)
    log_b = train(TLinFormer(cfg), ids, tc)
    assert [r.loss for r in log_a] == [r.loss for r in log_b]
    assert np.mean([r.loss for r in log_a[-5:]]) < log_a[0].loss


def test_memorising_a_constant_stream_drives_ppl_to_one():
    cfg = ModelConfig(vocab_size=4, D=8, n_head=2, H=0, n_blocks=1, Woh=4, Wog=4)
    ids = np.full(400, 2)
    m = TLinFormer(cfg)
    train(m, ids, TrainConfig(seq_len=8, batch_size=2, lr=3e-2, max_steps=60))
    assert evaluate_ppl(m, ids[:97], seq_len=8) < 1.05


def test_gradient_accumulation_matches_big_batch(micro_cfg, rng):
    batch = rng.integers(0, 11, size=(4, 9))

    def grads(chunks):
        m = TLinFormer(micro_cfg)
        for c in chunks:
            train_step(m, c, None, accum_steps=len(chunks))
        return [p.grad.copy() for p in m.parameters() if p.grad is not None]

    big = grads([batch])
    acc = grads([batch[:2], batch[2:]])
    assert all(np.allclose(a, b, atol=1e-14) for a, b in zip(big, acc))


def test_adam_moves_toward_minimum():
    from tlinformer.tensor import parameter, sum_all

    w = parameter([3.0, -2.0])
    opt = Adam([w], lr=0.1)
    for _ in range(200):
        backward(sum_all(w * w))
        opt.step()
        opt.zero_grad()
    assert np.all(np.abs(w.data) < 0.05)


def test_train_config_checks():
    with pytest.raises(ConfigError):
        TrainConfig(seq_len=10).validate(Wog=4)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})
    assert TrainConfig.from_dict({"betas": [0.8, 0.9]}).betas == (0.8, 0.9)


def test_tokenizer_examples():
    tok = CharTokenizer.fit("abab")
    assert tok.encode("abab").tolist() == [0, 1, 0, 1]
    tok = CharTokenizer.fit("zyx a")
    assert tok.chars == sorted(tok.chars)
    s = "x a zy"
    assert tok.decode(tok.encode(s)) == s
    with pytest.raises(ValueError):
        tok.encode("q")
    assert CharTokenizer.from_dict(tok.to_dict()) == tok


def test_ingest_corpus(tmp_path):
    with pytest.raises(FileNotFoundError, match="corpus not found"):
        ingest_corpus(tmp_path / "missing.txt")
    empty = tmp_path / "e.txt"
    empty.write_text("", encoding="utf-8")
    with pytest.raises(ValueError):
        ingest_corpus(empty)
    c = ingest_corpus(bundled_corpus_path(), eval_fraction=0.1)
    assert len(c.eval) == round(0.1 * (len(c.train) + len(c.eval)))
    assert c.tokenizer.vocab_size < 64


def test_config_file_and_log_csv(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text('{"model": {"D": 16}, "train": {"lr": 0.01}}', encoding="utf-8")
    assert load_config_file(p) == ({"D": 16}, {"lr": 0.01})
    cfg = ModelConfig(vocab_size=5, D=8, n_head=2, H=0, n_blocks=1, Woh=2, Wog=2)
    log = train(BaselineTransformer(cfg), np.arange(50) % 5, TrainConfig(seq_len=4, batch_size=2, max_steps=3,
                                                                       model_kind="baseline"))
    out = tmp_path / "log.csv"
    write_log_csv(out, log)
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "step,loss,tokens_seen,wall_nanos" and len(lines) == 4
