"""Command-line entry point: ``hcd <verb> ...`` (or ``python -m hcd``).

Verbs: ``run``, ``selftest``, ``gen-data``, ``eval``, ``inspect-mask``.
Outputs go under ``$HCD_OUTPUT_ROOT`` (default: the current directory).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

from hcd import config as config_mod
from hcd import experiment, maskstats, selftest, synthbench
from hcd.config import ConfigError, ExperimentConfig
from hcd.trainloop import evaluate

EXIT_FAIL = 1
EXIT_USAGE = 2


def _read_config(args) -> ExperimentConfig:
    """Config file (if any) plus command-line overrides, validated as one."""
    cp = configparser.ConfigParser(interpolation=None)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"no such file: {path}")
        try:
            cp.read_string(path.read_text())
        except configparser.Error as exc:
            raise ConfigError("config", str(exc)) from None

    def put(section, key, value):
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, key, str(value))

    for flag, key in (("method", "method"), ("seeds", "seeds"), ("epochs", "epochs"),
                      ("output_dir", "output_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            put("experiment", key, value)
    if getattr(args, "literal", False):
        put("experiment", "literal", "true")
    for item in getattr(args, "set", None) or []:
        target, sep, value = item.partition("=")
        section, dot, key = target.partition(".")
        if not sep or not dot:
            raise ConfigError(item, "expected section.key=value")
        put(section.strip(), key.strip(), value.strip())
    return config_mod.from_parser(cp)


def cmd_run(args) -> int:
    cfg = _read_config(args)
    res = experiment.run_experiment(cfg, resume=args.resume, workers=args.workers)
    sys.stdout.write(experiment.format_summary(res.summary))
    print(f"outputs: {res.out_dir}")
    return 0


def cmd_selftest(args) -> int:
    ok, report = selftest.run(mutate=args.mutate, quick=args.quick)
    sys.stdout.write(report)
    return 0 if ok else EXIT_FAIL


def cmd_gen_data(args) -> int:
    cfg = _read_config(args)
    out = experiment.output_root() / args.out
    out.mkdir(parents=True, exist_ok=True)
    for ds in synthbench.generate(cfg.data):
        synthbench.save(ds, out / f"{ds.split}.bin")
        if args.csv:
            synthbench.export_csv(ds, out / ds.split)
        print(f"{ds.split}: {len(ds)} samples -> {out / (ds.split + '.bin')}")
    return 0


def _split(cfg: ExperimentConfig, name: str):
    return synthbench.generate_split(cfg.data, name)


def cmd_eval(args) -> int:
    run = Path(args.run_dir)
    cfg = config_mod.load(run / "config.ini")
    trainer = experiment.load_trainer(run, args.seed, cfg)
    metrics = evaluate(trainer.model, _split(cfg, args.split), cfg.experiment.eval_batch_size,
                       cfg.optim.batch_size, config_mod.bandwidth_value(cfg))
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def cmd_inspect_mask(args) -> int:
    run = Path(args.run_dir)
    cfg = config_mod.load(run / "config.ini")
    trainer = experiment.load_trainer(run, args.seed, cfg)
    if trainer.model.gate is None:
        print("error: this run has no channel gate (method erm)", file=sys.stderr)
        return EXIT_FAIL
    report = maskstats.channel_report(trainer.model, _split(cfg, args.split), cfg.experiment.eval_batch_size)
    csv_text = report.to_csv()
    if args.out:
        Path(args.out).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    g = report.group_means()
    print(f"# cue-dominant channels: {g['cue_channels']}, mean mask {g['mask_cue']:.4f}")
    print(f"# causal-dominant channels: {g['causal_channels']}, mean mask {g['mask_causal']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="INI file; missing keys take their defaults")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")

    r = sub.add_parser("run", help="train all seeds and write summaries")
    config_args(r)
    r.add_argument("--method", choices=config_mod.METHODS)
    r.add_argument("--seeds", help="e.g. 0..4 or 0,2,3")
    r.add_argument("--epochs", type=int)
    r.add_argument("--output-dir", dest="output_dir", help="relative to $HCD_OUTPUT_ROOT")
    r.add_argument("--literal", action="store_true",
                   help="plain (non-inverted) dropout scaling and no gradient clipping")
    r.add_argument("--resume", action="store_true", help="continue each seed from its checkpoint")
    r.add_argument("--workers", type=int, default=1, help="seeds trained in parallel")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("selftest", help="gradient, entropy and oracle suites")
    s.add_argument("--mutate", action="store_true", help="flip the sign of the domain-MI gradient")
    s.add_argument("--quick", action="store_true", help="a tenth of the cases")
    s.set_defaults(func=cmd_selftest)

    g = sub.add_parser("gen-data", help="write the synthetic splits")
    config_args(g)
    g.add_argument("--out", default="data", help="directory relative to $HCD_OUTPUT_ROOT")
    g.add_argument("--csv", action="store_true", help="also export each split as CSV")
    g.set_defaults(func=cmd_gen_data)

    for name, func, help_text in (("eval", cmd_eval, "evaluate a checkpoint"),
                                  ("inspect-mask", cmd_inspect_mask, "per-channel mask statistics")):
        e = sub.add_parser(name, help=help_text)
        e.add_argument("run_dir", help="directory holding config.ini and seed_<k>/")
        e.add_argument("--seed", type=int, default=0)
        e.add_argument("--split", choices=synthbench.SPLITS, default="id_test" if name == "inspect-mask" else "ood_test")
        if name == "inspect-mask":
            e.add_argument("--out", help="write the CSV here instead of stdout")
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
