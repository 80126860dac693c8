"""Command line: mechbench {gen,train,circuit-track,causal-track,report}."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, RunConfig, from_dict, override

log = logging.getLogger("mechbench")


def _config(args: argparse.Namespace, track: str) -> RunConfig:
    raw: dict = {}
    if args.config:
        raw = yaml.safe_load(Path(args.config).read_text()) or {}
    raw.setdefault("track", track)
    for key in ("task", "method", "seed", "ablation", "output_dir"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    cfg = from_dict(raw)
    if cfg.track != track:
        raise ConfigError("track", f"config is for the {cfg.track} track")
    dotted = {}
    for item in args.set or []:
        key, _, text = item.partition("=")
        if not _:
            raise ConfigError(item, "overrides look like key.path=value")
        dotted[key] = yaml.safe_load(text)
    return override(cfg, dotted) if dotted else cfg


def cmd_gen(args: argparse.Namespace) -> int:
    from .tasks import generate
    from .tasks.common import write_jsonl

    kwargs = {"op": args.op} if args.task == "arithmetic" else {}
    instances = generate(args.task, args.n, args.seed, args.split, **kwargs)
    write_jsonl(instances, args.out)
    log.info("wrote %d %s instances to %s", len(instances), args.task, args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .model import save_model
    from .pipeline import train_task_model

    cfg = from_dict({"task": args.task, "method": "random", "seed": args.seed,
                     "model": {"train_steps": args.steps, "n_layers": args.layers}})
    model = train_task_model(args.task, cfg)
    save_model(model, args.out)
    log.info("saved %s model to %s", args.task, args.out)
    return 0


def _run_track(args: argparse.Namespace, track: str) -> int:
    from .pipeline import run, run_dir

    cfg = _config(args, track)
    record, _ = run(cfg)
    print(json.dumps(record["metrics"], sort_keys=True))
    log.info("results in %s", run_dir(cfg))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from .report import aggregate_report, load_records, write_report

    records = load_records(args.records)
    filters = {}
    for item in args.filter or []:
        key, _, values = item.partition("=")
        filters[key] = [yaml.safe_load(v) for v in values.split(",")]
    report = aggregate_report(records, args.metric, filters)
    sys.stdout.write(report.to_tsv())
    if args.out:
        write_report(report, records, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mechbench", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a task dataset as JSONL")
    g.add_argument("task", choices=["ioi", "arithmetic", "mcqa"])
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--split", default="train", choices=["train", "validation", "test_public", "test_private"])
    g.add_argument("--op", default="+", choices=["+", "-"])
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a toy model on a task")
    t.add_argument("task", choices=["ioi", "arithmetic", "mcqa"])
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--steps", type=int, default=1500)
    t.add_argument("--layers", type=int, default=2)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    for name, track in (("circuit-track", "circuit"), ("causal-track", "causal")):
        r = sub.add_parser(name, help=f"run the {track} localization track")
        r.add_argument("--config", help="YAML/JSON run config")
        r.add_argument("--task")
        r.add_argument("--method")
        r.add_argument("--seed", type=int)
        r.add_argument("--ablation")
        r.add_argument("--output-dir", dest="output_dir")
        r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. circuit.ig_steps=10")
        r.set_defaults(func=lambda a, track=track: _run_track(a, track))

    rep = sub.add_parser("report", help="aggregate result records into a leaderboard")
    rep.add_argument("records", nargs="+", help="record files or result directories")
    rep.add_argument("--metric", default="cmd")
    rep.add_argument("--filter", action="append", metavar="KEY=V1,V2")
    rep.add_argument("--out", help="directory for leaderboard and curve files")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
