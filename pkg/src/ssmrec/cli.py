"""Command-line entry point: ``ssmrec {prepare,train,eval,bench,synth}``.

Configuration is a flat ``section.key=value`` file (sections ``model``,
``train``, ``eval``, ``bench``) plus ``--set section.key=value`` overrides;
dedicated flags such as ``--encoder`` are applied last. Every command prints
its resolved configuration to stderr before running.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import config as kv
from .bench import BenchSpec, run_suite, write_gnuplot
from .data import gen_synthetic, load_cache, prepare, save_cache, write_tsv
from .errors import CheckpointError, ConfigError, SsmRecError
from .evaluation import MetricSpec, average_reports, evaluate
from .model import ModelConfig
from .numerics.rng import derive_seed
from .numerics.tensor import TRACKER
from .training import TrainConfig, load_model, train

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "eval": MetricSpec, "bench": BenchSpec}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: MetricSpec = field(default_factory=MetricSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)
    explicit: frozenset = frozenset()  # keys given by the user

    @classmethod
    def resolve(cls, path=None, overrides=()) -> "RunConfig":
        values = kv.load_file(path) if path else {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            key, _, value = item.partition("=")
            values[key.strip()] = value.strip()
        for key in values:
            if key.partition(".")[0] not in SECTIONS:
                raise ConfigError(f"unknown config key {key!r}; sections are {sorted(SECTIONS)}")
        built = {name: kv.from_kv(kind, values, name) for name, kind in SECTIONS.items()}
        return cls(**built, explicit=frozenset(values))

    def values(self) -> dict[str, str]:
        out = {}
        for name in SECTIONS:
            out.update(kv.to_kv(getattr(self, name), name))
        return out

    def text(self) -> str:
        return kv.dumps(self.values())


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _echo(*parts) -> None:
    print(*parts, flush=True)


def _log_config(run: RunConfig, sections) -> None:
    for key, value in sorted(run.values().items()):
        if key.partition(".")[0] in sections:
            print(f"config {key}={value}", file=sys.stderr)


def _apply_seed(run: RunConfig, seed) -> RunConfig:
    if seed is None:
        return run
    return replace(run, train=replace(run.train, seed=seed), eval=replace(run.eval, seed=seed),
                   bench=replace(run.bench, seed=seed))


# ---------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    if args.format != "tsv":
        raise ConfigError(f"unsupported input format {args.format!r}; only tsv is implemented")
    split, stats = prepare(args.input, args.min_interactions, _names(args.columns), not args.no_header)
    save_cache(split, args.output)
    s = split.stats()
    _echo(f"#users={s['users']} #items={s['items']} #interactions={s['interactions']} "
          f"#avg.len={s['avg_len']:.2f}")
    if stats.malformed:
        print(f"skipped {stats.malformed} malformed lines", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    run = _apply_seed(RunConfig.resolve(args.config, args.set), args.seed)
    split = load_cache(args.data)
    model_updates = {"vocab_size": split.vocab_size}
    if "model.vocab_size" in run.explicit and run.model.vocab_size != split.vocab_size:
        raise ConfigError(f"model.vocab_size={run.model.vocab_size} conflicts with the dataset "
                          f"({split.vocab_size} = items + 1)")
    if args.encoder:
        model_updates["encoder"] = args.encoder
    if args.max_len:
        model_updates["max_len"] = args.max_len
    train_updates = {"checkpoint_dir": str(args.out)}
    if args.epochs is not None:
        train_updates["epochs"] = args.epochs
    run = replace(run, model=replace(run.model, **model_updates), train=replace(run.train, **train_updates))
    _log_config(run, ("model", "train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(run.text(), encoding="utf-8")
    with TRACKER.limited(args.memory_limit or None):
        result = train(run.model, run.train, split, resume=args.resume,
                       log=None if args.quiet else (lambda m: print(m, file=sys.stderr, flush=True)))
    _echo(f"trained {result.epochs_run} epochs; best epoch {result.best_epoch} "
          f"validation NDCG@10={max(result.best_ndcg, 0.0):.4f}; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    run = _apply_seed(RunConfig.resolve(args.config, args.set), args.seed)
    spec = run.eval
    if args.k:
        spec = replace(spec, cutoffs=args.k)
    if args.candidates:
        policy, count = MetricSpec.parse_policy(args.candidates)
        spec = replace(spec, policy=policy, num_candidates=count)
    _log_config(replace(run, eval=spec), ("eval",))
    split = load_cache(args.data)
    reports = []
    for ckpt in args.checkpoint:
        model, _, _ = load_model(ckpt)
        if model.config.vocab_size != split.vocab_size:
            raise CheckpointError(f"checkpoint {ckpt} has vocab_size {model.config.vocab_size} but data "
                                  f"{args.data} has {split.vocab_size}")
        for i in range(args.seeds):
            seed = spec.seed if i == 0 else derive_seed(spec.seed, "eval-repeat", i)
            reports.append(evaluate(model, split, replace(spec, seed=seed), args.phase))
    report = average_reports(reports) if len(reports) > 1 else reports[0]
    _echo(report.summary() + (f" (mean of {len(reports)} runs)" if len(reports) > 1 else ""))
    if args.out:
        report.write_csv(args.out)
    return 0


def cmd_bench(args) -> int:
    run = _apply_seed(RunConfig.resolve(args.config, args.set), args.seed)
    updates = {}
    if args.models:
        updates["encoders"] = _names(args.models)
    if args.lengths:
        updates["lengths"] = args.lengths
    if args.batch:
        updates["batch"] = args.batch
    if args.memory_limit:
        updates["memory_limit"] = args.memory_limit
    spec = replace(run.bench, **updates)
    _log_config(replace(run, bench=spec), ("bench",))
    out = Path(args.out)
    if out.exists():
        out.unlink()
    rows = run_suite(spec, out, log=None if args.quiet else _echo)
    if args.gnuplot:
        write_gnuplot(rows, args.gnuplot)
    return 0


def cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    records = gen_synthetic(args.users, args.items, args.len, args.lag, args.noise,
                            derive_seed(seed, "synth"))
    write_tsv(records, args.out)
    _echo(f"wrote {len(records)} interactions for {args.users} users to {args.out}")
    return 0


# ---------------------------------------------------------------- parser

def _config_flags(p) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmrec", description="Sequential recommendation with selective SSMs")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="filter, split and cache an interaction log")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="tsv")
    p.add_argument("--output", required=True)
    p.add_argument("--min-interactions", type=int, default=3)
    p.add_argument("--columns", default="user,item,timestamp", help="column names or 0-based positions")
    p.add_argument("--no-header", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train a model on a prepared cache")
    _config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--encoder", choices=["ssm", "attention", "gru", "linear", "linear_attention"])
    p.add_argument("--max-len", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    p.add_argument("--memory-limit", type=int, default=0, help="tracked-byte allocation cap")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="rank held-out items with a checkpoint")
    _config_flags(p)
    p.add_argument("--checkpoint", required=True, action="append", help="repeat to average several runs")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=_ints, help="cutoffs, default 5,10,20")
    p.add_argument("--candidates", help="'full' or 'sampled:C'")
    p.add_argument("--phase", default="test", choices=["validation", "test"])
    p.add_argument("--seeds", type=int, default=1, help="average over this many candidate-sampling seeds")
    p.add_argument("--out", help="MetricReport CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="time and memory versus sequence length")
    _config_flags(p)
    p.add_argument("--models", help="comma-separated encoder kinds (default: all four)")
    p.add_argument("--lengths", type=_ints)
    p.add_argument("--batch", type=int)
    p.add_argument("--memory-limit", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--gnuplot", help="also write gnuplot data blocks here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic lag-k interaction log")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--len", type=int, required=True)
    p.add_argument("--lag", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "seeds", 1) < 1:
        print("error: ConfigError: --seeds must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (SsmRecError, OSError, MemoryError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
