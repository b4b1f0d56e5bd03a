"""Command-line entry point: ``tlinformer {train,eval,generate,bench,cost,verify}``.

Settings resolve as: command-line flag, then the ``--config`` JSON file,
then the built-in default.  The config file holds a ``"model"`` section
(model shape) and one section per subcommand, e.g. ``{"model": {"D": 32},
"train": {"lr": 0.001}}``.

Exit codes: 0 ok, 1 verification failure, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

MODEL_KEYS = ("D", "n_head", "H", "n_blocks", "Woh", "Wog", "ffn_mult", "seed", "dtype")


class UsageFailure(Exception):
    pass


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise UsageFailure(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageFailure(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageFailure("config file must hold a JSON object")
    return doc


def _resolve(args, section: dict, key: str, default=None, flag: str | None = None):
    """Flag beats config section beats default."""
    val = getattr(args, flag or key, None)
    if val is not None:
        return val
    return section.get(key, default)


def _model_overrides(args, doc: dict) -> dict:
    sec = doc.get("model", {})
    out = {}
    for k in MODEL_KEYS:
        v = _resolve(args, sec, k)
        if v is not None:
            out[k] = v
    unknown = set(sec) - set(MODEL_KEYS) - {"vocab_size", "max_seq", "restore_last"}
    if unknown:
        raise UsageFailure(f"unknown model keys in config: {sorted(unknown)}")
    for k in ("max_seq", "restore_last"):
        if k in sec:
            out[k] = sec[k]
    return out


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model shape")
    g.add_argument("--D", type=int, help="model width")
    g.add_argument("--n-head", dest="n_head", type=int)
    g.add_argument("--H", type=int, help="intermediate context layers per block")
    g.add_argument("--n-blocks", dest="n_blocks", type=int)
    g.add_argument("--Woh", type=int, help="context window length")
    g.add_argument("--Wog", type=int, help="generation window length")
    g.add_argument("--ffn-mult", dest="ffn_mult", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--dtype", choices=("float32", "float64"))


def _grid(args, sec: dict, n_start=128, n_step=512, n_max=8192) -> list[int]:
    grid = _resolve(args, sec, "grid")
    if grid is not None:
        vals = [int(x) for x in (grid.split(",") if isinstance(grid, str) else grid)]
    else:
        a = _resolve(args, sec, "n_start", n_start)
        s = _resolve(args, sec, "n_step", n_step)
        b = _resolve(args, sec, "n_max", n_max)
        if s < 1 or a < 1 or b < a:
            raise UsageFailure("need 1 <= n_start <= n_max and n_step >= 1")
        vals = list(range(a, b + 1, s))
    if not vals:
        raise UsageFailure("empty length grid")
    return vals


# -- subcommands ------------------------------------------------------------------

def cmd_train(args) -> int:
    from .model import build_model, save_checkpoint
    from .training import (
        TrainConfig,
        bundled_corpus_path,
        evaluate_ppl,
        ingest_corpus,
        model_config_for_corpus,
        train,
        write_log_csv,
    )

    doc = _read_config(args.config)
    sec = doc.get("train", {})
    tc = {}
    for key, flag in (("corpus_path", "corpus"), ("seq_len", None), ("batch_size", None), ("accum_steps", None),
                      ("lr", None), ("epochs", None), ("max_steps", "steps"), ("eval_fraction", None),
                      ("model_kind", "model")):
        v = _resolve(args, sec, key, flag=flag)
        if v is not None:
            tc[key] = v
    seed = _resolve(args, sec, "seed", flag="train_seed")
    if seed is not None:
        tc["seed"] = seed
    extra_keys = set(sec) - {"corpus_path", "seq_len", "batch_size", "accum_steps", "lr", "epochs", "max_steps",
                             "eval_fraction", "model_kind", "seed", "betas"}
    if extra_keys:
        raise UsageFailure(f"unknown train keys in config: {sorted(extra_keys)}")
    if "betas" in sec:
        tc["betas"] = sec["betas"]
    cfg = TrainConfig.from_dict(tc)
    cfg.corpus_path = cfg.corpus_path or bundled_corpus_path()
    corpus = ingest_corpus(cfg.corpus_path, cfg.eval_fraction)
    mcfg = model_config_for_corpus(corpus.tokenizer, **_model_overrides(args, doc))
    model = build_model(cfg.model_kind, mcfg)

    def report(row):
        if not args.quiet and (row.step % max(1, args.log_every) == 0):
            print(f"step {row.step:5d}  loss {row.loss:.4f}", file=sys.stderr)

    log = train(model, corpus.train, cfg, on_step=report)
    result = {"steps": len(log), "final_loss": log[-1].loss if log else None}
    if len(corpus.eval) > cfg.seq_len:
        result["eval_ppl"] = evaluate_ppl(model, corpus.eval, cfg.seq_len)
    extra = {"tokenizer": corpus.tokenizer.to_dict(), "train": cfg.__dict__ | {"betas": list(cfg.betas)}, **result}
    save_checkpoint(args.out, model, extra)
    write_log_csv(args.log, log)
    print(json.dumps(result | {"checkpoint": args.out, "log": args.log}))
    return EXIT_OK


def _load(path):
    from .model import load_checkpoint
    from .training import CharTokenizer

    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, meta = load_checkpoint(path)
    tok = meta.get("extra", {}).get("tokenizer")
    return model, meta, (CharTokenizer.from_dict(tok) if tok else None)


def cmd_eval(args) -> int:
    from .training import evaluate_ppl

    model, meta, tok = _load(args.checkpoint)
    if tok is None:
        raise UsageFailure("checkpoint carries no tokenizer; cannot encode a corpus")
    tmeta = meta["extra"].get("train", {})
    path = args.corpus or tmeta.get("corpus_path")
    if path is None or not os.path.exists(path):
        raise FileNotFoundError(f"corpus not found: {path}")
    with open(path, encoding="utf-8") as fh:
        ids = tok.encode(fh.read())
    frac = tmeta.get("eval_fraction", 0.1) if args.eval_fraction is None else args.eval_fraction
    if not args.full:
        ids = ids[len(ids) - int(round(len(ids) * frac)):]
    seq_len = args.seq_len or tmeta.get("seq_len", 64)
    ppl = evaluate_ppl(model, ids, seq_len)
    print(json.dumps({"ppl": ppl, "tokens": int(len(ids)), "seq_len": seq_len, "model": model.kind}))
    return EXIT_OK


def cmd_generate(args) -> int:
    from .kv_cache import events_csv, generate
    from .model import TLinFormer, atomic_write

    model, _, tok = _load(args.checkpoint)
    if args.n_tokens < 1:
        raise UsageFailure("--n-tokens must be >= 1")
    if tok is not None:
        prompt = tok.encode(args.prompt)
    else:
        prompt = np.asarray([int(x) for x in args.prompt.split(",")], dtype=np.int64)
    if isinstance(model, TLinFormer) and len(prompt) < model.cfg.Wog:
        raise UsageFailure(f"prompt has {len(prompt)} tokens; need at least Wog={model.cfg.Wog}")
    rng = np.random.default_rng(args.seed)
    gen = generate(model, prompt, args.n_tokens, temperature=args.temperature, rng=rng)
    text = tok.decode(gen.tokens) if tok is not None else ",".join(map(str, gen.tokens))
    if args.events:
        atomic_write(args.events, lambda fh: fh.write(events_csv(gen.events)), mode="w")
    sys.stdout.write(text + "\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import LedgerMismatchError, SweepConfig, build_bench_models, desk_model_config, emit_outputs, run_sweep

    doc = _read_config(args.config)
    sec = doc.get("bench", {})
    models = _resolve(args, sec, "models", "tlinformer,baseline")
    names = tuple(m.strip() for m in (models.split(",") if isinstance(models, str) else models) if m.strip())
    if not names:
        raise UsageFailure("no models to benchmark")
    cfg = SweepConfig(
        tokens_per_point=_resolve(args, sec, "tokens_per_point", 6),
        repeats=_resolve(args, sec, "repeats", 5),
        warmup_runs=_resolve(args, sec, "warmup_runs", 2, flag="warmup"),
        models=names,
        grid=tuple(_grid(args, sec)),
    )
    mcfg = desk_model_config(**_model_overrides(args, doc))
    built = build_bench_models(names, mcfg)
    log = None if args.quiet else (lambda m: print(m, file=sys.stderr))
    try:
        rows = run_sweep(cfg, built, log=log)
    except LedgerMismatchError as exc:
        print(f"ledger mismatch: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    out_dir = _resolve(args, sec, "out_dir", "bench_out")
    paths = emit_outputs(rows, out_dir)
    print(json.dumps(paths))
    return EXIT_OK


def cmd_cost(args) -> int:
    from .cost import cost_sweep, sweep_csv
    from .model import atomic_write

    doc = _read_config(args.config)
    sec = doc.get("cost", {})
    m = doc.get("model", {})

    def pick(key, default):
        v = getattr(args, key, None)
        if v is not None:
            return v
        return sec.get(key, m.get(key, default))

    rows = cost_sweep(
        _grid(args, sec),
        D=pick("D", 64),
        Woh=pick("Woh", 32),
        Wog=pick("Wog", 32),
        H=pick("H", 2),
        n_blocks=pick("n_blocks", 2),
        P_bytes=pick("P_bytes", 8),
        B=pick("B", 1),
    )
    text = sweep_csv(rows)
    if args.out:
        atomic_write(args.out, lambda fh: fh.write(text), mode="w")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .model import atomic_write
    from .verify import run_verify

    report = run_verify(inject_cache_bug=args.inject_cache_bug, quick=args.quick)
    text = report.to_json()
    if args.out:
        atomic_write(args.out, lambda fh: fh.write(text + "\n"), mode="w")
    sys.stdout.write(text + "\n")
    return EXIT_OK if report.passed else EXIT_VERIFY


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tlinformer",
        description="Windowed linear-attention language model: training, generation, benchmarks, cost model.",
        epilog="Precedence: command-line flag > --config JSON file > built-in default. "
        "Exit codes: 0 ok, 1 verification failure, 2 usage/config error, 3 I/O error.",
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    t = sub.add_parser("train", help="train a model on a character corpus and write a checkpoint")
    t.add_argument("--config", help="JSON config with 'model' and 'train' sections")
    t.add_argument("--corpus", help="UTF-8 text file (default: bundled synthetic corpus)")
    t.add_argument("--model", choices=("tlinformer", "baseline"))
    t.add_argument("--steps", type=int, help="optimizer steps (overrides epochs)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seq-len", dest="seq_len", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--accum-steps", dest="accum_steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--eval-fraction", dest="eval_fraction", type=float)
    t.add_argument("--train-seed", dest="train_seed", type=int, help="batch sampling seed")
    t.add_argument("--out", default="checkpoint.npz")
    t.add_argument("--log", default="train_log.csv")
    t.add_argument("--log-every", dest="log_every", type=int, default=10)
    t.add_argument("--quiet", action="store_true")
    _add_model_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", help="default: the corpus recorded in the checkpoint")
    e.add_argument("--seq-len", dest="seq_len", type=int)
    e.add_argument("--eval-fraction", dest="eval_fraction", type=float)
    e.add_argument("--full", action="store_true", help="score the whole corpus, not just the held-out tail")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("generate", help="decode from a checkpoint with the KV cache")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prompt", required=True)
    g.add_argument("--n-tokens", dest="n_tokens", type=int, default=32)
    g.add_argument("--temperature", type=float, help="sampling temperature (omit for greedy)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--events", help="write the cache event stream as CSV")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="incremental-length latency and cache sweep")
    b.add_argument("--config")
    b.add_argument("--n-start", dest="n_start", type=int)
    b.add_argument("--n-step", dest="n_step", type=int)
    b.add_argument("--n-max", dest="n_max", type=int)
    b.add_argument("--grid", help="explicit comma-separated lengths (overrides start/step/max)")
    b.add_argument("--repeats", type=int)
    b.add_argument("--warmup", type=int)
    b.add_argument("--tokens-per-point", dest="tokens_per_point", type=int)
    b.add_argument("--models", help="comma-separated: tlinformer,baseline")
    b.add_argument("--out-dir", dest="out_dir")
    b.add_argument("--quiet", action="store_true")
    _add_model_flags(b)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("cost", help="closed-form cost and memory sweep as CSV")
    c.add_argument("--config")
    c.add_argument("--n-start", dest="n_start", type=int)
    c.add_argument("--n-step", dest="n_step", type=int)
    c.add_argument("--n-max", dest="n_max", type=int)
    c.add_argument("--grid")
    c.add_argument("--D", type=int)
    c.add_argument("--Woh", type=int)
    c.add_argument("--Wog", type=int)
    c.add_argument("--H", type=int)
    c.add_argument("--n-blocks", dest="n_blocks", type=int)
    c.add_argument("--P-bytes", dest="P_bytes", type=int)
    c.add_argument("--B", type=int)
    c.add_argument("--out")
    c.set_defaults(func=cmd_cost)

    v = sub.add_parser("verify", help="run the invariant suites and print a JSON report")
    v.add_argument("--inject-cache-bug", dest="inject_cache_bug", action="store_true",
                   help="corrupt cached history values (negative control; verify must fail)")
    v.add_argument("--quick", action="store_true", help="fewer random tuples and gradient samples")
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    from .model import CheckpointError, LayoutError
    from .training import ConfigError, TrainingDivergedError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        msg = str(exc)
        if "corpus not found" in msg:
            print(f"error: {msg}", file=sys.stderr)
            return EXIT_USAGE
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_IO
    except (UsageFailure, ConfigError, LayoutError, CheckpointError, TrainingDivergedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
