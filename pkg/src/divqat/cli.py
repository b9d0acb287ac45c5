"""Experiment workbench for divergence-regularized QAT and model extraction.

Every subcommand reads a JSON experiment config. The staged subcommands
(train, quantize, defend, attack) run the pipeline up to that stage for
the first cell and one seed, writing its artifacts under ``--out``.
Exit status: 0 success, 1 invalid input, 2 runtime failure.
"""
import argparse
import json
import os
import sys

from . import harness as H
from .checkpoint import save_checkpoint
from .errors import ConfigError, DatasetFormatError, UsageError

VALIDATION_ERRORS = (ConfigError, UsageError, DatasetFormatError)


def _parser():
    p = argparse.ArgumentParser(prog="divqat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help, config=True):
        sp = sub.add_parser(name, help=help)
        if config:
            sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the config's seed list with one seed")
        sp.add_argument("--out", default=None, help="output directory")
        return sp

    add("train", "train the float victim")
    add("quantize", "train the float victim, then quantize it")
    add("defend", "calibrate the output defense on the quantized victim")
    add("attack", "run the configured extraction attack")
    add("evaluate", "run every cell and print metrics without writing artifacts")
    add("run", "full pipeline over every cell and seed, with reports")
    add("sweep", "DivQAT alpha sweep")
    rp = add("report", "re-emit a report file with median rows", config=False)
    rp.add_argument("--from", dest="source", required=True, help="reports.json or reports.csv")
    rp.add_argument("--format", choices=("csv", "json"), default="csv")
    return p


def _setup(args):
    config = H.load_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seeds": [args.seed]})
    out = args.out or config.output_dir
    if out:
        os.makedirs(out, exist_ok=True)
    return config, out


def _print(obj):
    print(json.dumps(obj, sort_keys=True, indent=1))


def _staged(args):
    config, out = _setup(args)
    seed = config.seeds[0]
    cell = config.cells()[0]
    pipe = H.Pipeline(config, seed)
    if args.command == "train":
        model, history = pipe.float_model()
        summary = {"stage": "train", "seed": seed, "final": history[-1] if history else None}
    else:
        model, info = pipe.victim(cell.quant)
        summary = {"stage": args.command, "seed": seed, "quant_method": cell.quant.label(), "alpha": info.get("alpha"),
                   "quant_l1_mean": info.get("l1_mean")}
        if args.command in ("defend", "attack"):
            cal = pipe.defense(model, cell.defense)
            summary.update(defense=cal.config.to_dict(), defense_l1_mean=cal.mean_l1, defense_l1_max=cal.max_l1)
            if args.command == "attack":
                if cell.attack.kind == "none":
                    raise ConfigError("attack kind is none")
                result, oracle = pipe.attack(model, cal.config, cell.attack)
                summary.update(query_count=oracle.query_count, truncated=result.truncated)
                if out:
                    save_checkpoint(result.student, os.path.join(out, "student.dqckpt"), seed=seed)
                    result.transfer.save(os.path.join(out, "transfer.dqxfer"))
    if out:
        name = "victim_float.dqckpt" if args.command == "train" else "victim.dqckpt"
        save_checkpoint(model, os.path.join(out, name), seed=seed)
        with open(os.path.join(out, f"{args.command}.json"), "w") as fh:
            json.dump(summary, fh, sort_keys=True, indent=1)
    _print(summary)


def _evaluate(args):
    config, _ = _setup(args)
    reports = H.run_experiment(config.model_copy(update={"output_dir": None}))
    _print([r.to_dict() for r in reports])
    return reports


def _run(args):
    config, out = _setup(args)
    reports = H.run_experiment(config, out_dir=out)
    for row in H.aggregate(reports):
        _print({k: v for k, v in row.to_dict().items() if v is not None})
    return reports


def _sweep(args):
    config, out = _setup(args)
    _, series = H.sweep_alpha(config, out_dir=out)
    _print(series)


def _report(args):
    rows = H.load_report(args.source)
    reports = H.reports_from_rows(rows)
    target = args.out or os.path.dirname(os.path.abspath(args.source))
    os.makedirs(target, exist_ok=True)
    path = H.emit_report(reports, os.path.join(target, f"reports.{args.format}"), args.format)
    print(path)


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    handlers = {"evaluate": _evaluate, "run": _run, "sweep": _sweep, "report": _report}
    try:
        reports = handlers.get(args.command, _staged)(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    if reports and any(r.status != "ok" for r in reports):
        print("one or more cells failed; see the error column", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
