"""Command-line front end: ``kvformer {train,cost,attnmap,gen}``.

Exit codes: 0 success, 1 configuration error, 2 training divergence,
3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .attention import AttentionKind
from .config import KEYS, RunConfig, parse_config
from .exceptions import ConfigError, DivergenceError
from .model import generate, load_checkpoint, save_checkpoint
from .reporting import CsvLog, cost_configs, emit_cost_table, export_attention_map, reference_table
from .tasks import SYNTHETIC_TASKS, SyntheticTask, batch_rng, synthetic_batch
from .training import LOSS_CSV_HEADER, METRICS_CSV_HEADER, DataSource, train_run

log = logging.getLogger("kvformer")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


def _run_one(cfg: RunConfig, kind: AttentionKind, run_dir: Path, summary: CsvLog | None):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.for_variant(kind.variant).to_text(), encoding="utf-8")
    train_cfg = cfg.train_config()
    data = DataSource(cfg.task_spec(), train_cfg.batch_size, train_cfg.eval_batches, train_cfg.test_batches)
    model_cfg = cfg.model_config(kind, data.vocab_size)
    with CsvLog(run_dir / "loss.csv", LOSS_CSV_HEADER) as loss_log:
        model, report = train_run(model_cfg, cfg.task_spec(), train_cfg,
                                  on_record=lambda r: loss_log.write(r.csv_row()), data=data)
    with CsvLog(run_dir / "metrics.csv", METRICS_CSV_HEADER) as metrics:
        metrics.write(report.metrics_row())
    if summary is not None:
        summary.write(report.metrics_row())
    if cfg.checkpoint:
        meta = {"task": cfg.task}
        if data.corpus is not None:
            meta["vocab"] = list(data.corpus.vocab)
        save_checkpoint(model, run_dir / "model.npz", **meta)
    maps = run_dir / "attention"
    maps.mkdir(exist_ok=True)
    sample = data.test[0][0][0]
    layers = range(cfg.n_layers) if cfg.attn_all else [cfg.n_layers - 1]
    heads = range(cfg.n_heads) if cfg.attn_all else [0]
    for li in layers:
        for hi in heads:
            export_attention_map(model, sample, li, hi, maps / f"layer{li}_head{hi}")
    return report


def run(cfg: RunConfig) -> int:
    """Execute every variant in the sweep; return an exit status."""
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        summary = CsvLog(out / "metrics.csv", METRICS_CSV_HEADER)
    except OSError as e:
        log.error("cannot write to %s: %s", out, e)
        return EXIT_IO
    status = EXIT_OK
    with summary:
        kinds = cfg.attention_kinds()
        for i, kind in enumerate(kinds, 1):
            name = cfg.run_name(kind)
            print(f"[{i}/{len(kinds)}] {name}", file=sys.stderr, flush=True)
            try:
                report = _run_one(cfg, kind, out / name, summary)
            except DivergenceError as e:
                log.error("%s diverged: %s", name, e)
                status = max(status, EXIT_DIVERGED)
                continue
            except OSError as e:
                log.error("%s: I/O failure: %s", name, e)
                status = EXIT_IO
                continue
            print(f"    token_acc={report.token_acc:.4f} seq_acc={report.seq_acc:.4f}",
                  file=sys.stderr, flush=True)
    return status


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(text: str) -> list:
    return [int(t) for t in text.split(",") if t.strip()]


def _add_config_flags(p: argparse.ArgumentParser):
    group = p.add_argument_group("config keys (override the config file)")
    for key, (_conv, default, desc) in KEYS.items():
        group.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="VALUE",
                           help=f"{desc} (default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one or more attention variants on a task")
    p.add_argument("-c", "--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="extra override")
    _add_config_flags(p)

    p = sub.add_parser("cost", help="print per-layer cost counts as CSV")
    p.add_argument("--n", type=_int_list, default=[16], help="sequence lengths, comma-separated")
    p.add_argument("--d", type=_int_list, default=[64], help="embedding sizes")
    p.add_argument("--heads", type=_int_list, default=[2], help="head counts")
    p.add_argument("--m", type=_int_list, default=[10], help="kvpos table depths")
    p.add_argument("--attention", default="qkv,kv,kvpos")
    p.add_argument("--out", help="write the CSV here instead of stdout")
    p.add_argument("--reference", help="also write the evaluated closed-form table to this path")

    p = sub.add_parser("attnmap", help="export attention maps from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--tokens", help="comma-separated token ids (default: one random task sample)")
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--all", action="store_true", help="every layer and head")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="attn", help="output path prefix")

    p = sub.add_parser("gen", help="generate text from a causal LM checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--prompt", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _overrides(args) -> dict:
    out = {key: getattr(args, key) for key in KEYS if getattr(args, key, None) is not None}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _cmd_train(args) -> int:
    cfg = parse_config(args.config, _overrides(args))
    return run(cfg)


def _cmd_cost(args) -> int:
    variants = [AttentionKind.from_name(v).variant for v in args.attention.split(",")]
    configs = cost_configs(args.n, args.d, args.heads, args.m, variants)
    if not configs:
        raise ConfigError("no valid (n, d, H, m) combination; d must be divisible by H")
    text = emit_cost_table(configs)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.reference:
        Path(args.reference).write_text(reference_table(configs), encoding="utf-8")
    return EXIT_OK


def _cmd_attnmap(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    if args.tokens:
        tokens = np.array(_int_list(args.tokens), dtype=np.int64)
    else:
        n = model.config.max_len
        rng = batch_rng(args.seed, 0, 3)
        if meta.get("task") in SYNTHETIC_TASKS:
            tokens = synthetic_batch(SyntheticTask(meta["task"], n), 1, rng)[0][0]
        else:
            tokens = rng.integers(0, model.config.vocab_size, size=n)
    n_layers = len(model.attention_layers())
    layers = range(n_layers) if args.all else [args.layer % n_layers]
    heads = range(model.config.n_heads) if args.all else [args.head]
    for li in layers:
        for hi in heads:
            prefix = f"{args.out}_layer{li}_head{hi}"
            paths = export_attention_map(model, tokens, li, hi, prefix)
            print(paths["weights"])
    return EXIT_OK


def _cmd_gen(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    vocab = meta.get("vocab")
    if not vocab:
        raise ConfigError("checkpoint carries no vocabulary; it was not trained on an LM task")
    index = {tok: i for i, tok in enumerate(vocab)}
    char_level = all(len(t) == 1 for t in vocab)
    pieces = list(args.prompt) if char_level else args.prompt.split()
    try:
        prompt = [index[p] for p in pieces]
    except KeyError as e:
        raise ConfigError(f"prompt token {e.args[0]!r} is not in the checkpoint vocabulary") from None
    ids = generate(model, prompt, args.steps, args.temperature, seed=args.seed)
    sep = "" if char_level else " "
    print(sep.join(vocab[i] for i in ids))
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "cost": _cmd_cost, "attnmap": _cmd_attnmap, "gen": _cmd_gen}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, IndexError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
