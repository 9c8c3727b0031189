"""Command-line entry point: ``locood {synth,run,tune,report}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 total run failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import harness, report
from .config import load_config
from .data import generate_subjects, load_dataset, save_dataset
from .errors import CellError, ConfigError, DataFormatError, LocoodError, ValidationError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUN = 0, 2, 3, 4

log = logging.getLogger("locood")


def _default_jobs():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _dataset_dirs(paths):
    """Expand each path: a dataset directory, or a parent holding several (sorted)."""
    out = []
    for p in map(Path, paths):
        if (p / "manifest.json").exists():
            out.append(p)
        elif p.is_dir():
            children = sorted(c for c in p.iterdir() if (c / "manifest.json").exists())
            if not children:
                raise DataFormatError(f"{p} contains no dataset directories")
            out.extend(children)
        else:
            raise DataFormatError(f"no dataset at {p}")
    return out


def _load_run_config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _datasets(cfg, data_args):
    paths = data_args or cfg.data_paths
    if paths:
        return [load_dataset(p) for p in _dataset_dirs(paths)]
    if cfg.synth is None:
        raise ConfigError("no data source: pass --data or add a [synth] section")
    return generate_subjects(cfg.synth, cfg.n_subjects)


def _out_dir(args, cfg):
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigError("no output directory: pass --out or set [run] out")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args):
    cfg = _load_run_config(args)
    if cfg.synth is None:
        raise ConfigError("synth needs a [synth] section in the config")
    out = _out_dir(args, cfg)
    for ds in generate_subjects(cfg.synth, cfg.n_subjects):
        save_dataset(ds, out / ds.subject)
        print(out / ds.subject)
    return EXIT_OK


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_tune(args):
    cfg = _load_run_config(args)
    datasets = _datasets(cfg, args.data)
    out = _out_dir(args, cfg)
    if not cfg.experiment.tuned_methods:
        raise ConfigError("tune needs d-KNN or DUQ among the enabled methods")
    tuned = harness.tune_all(cfg.experiment, datasets[0], args.jobs)
    _write_json(out / "tuned.json", tuned.to_json())
    print(out / "tuned.json")
    return EXIT_OK


def cmd_run(args):
    cfg = _load_run_config(args)
    datasets = _datasets(cfg, args.data)
    out = _out_dir(args, cfg)
    tuned = None
    if args.tuned:
        tuned = harness.TunedParams.from_json(json.loads(Path(args.tuned).read_text()))
    try:
        result = harness.run_experiment(cfg.experiment, datasets, jobs=args.jobs, tuned=tuned)
    except CellError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_json(out / "summary.json", {"methods": [], "failures": [str(exc)]})
        return EXIT_RUN
    report.write_results_csv(result.rows, out / "results.csv")
    _write_json(out / "summary.json", report.summarize(result.rows, result.failures))
    _write_json(out / "tuned.json", result.tuned.to_json())
    for f in result.failures:
        print(f"warning: cell {f.subject}/{f.ood_class} failed: {f.error}", file=sys.stderr)
    print(out / "results.csv")
    return EXIT_OK


def cmd_report(args):
    rows = []
    for path in args.results:
        rows.extend(report.read_results_csv(path))
    dataset = ",".join(Path(p).parent.name or Path(p).stem for p in args.results)
    rep = report.build_report(rows, react=args.compare_react, classes=args.by_class,
                              id_classes=args.compare_id_classes, dataset=dataset)
    sys.stdout.write(report.render_report(rep, args.format))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="locood", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        if data:
            p.add_argument("--data", action="append", default=[],
                           help="dataset directory, or a parent of several; repeatable")
            p.add_argument("--jobs", type=int, default=_default_jobs(),
                           help="worker processes for independent cells")

    common(sub.add_parser("synth", help="write synthetic subjects to disk"), data=False)
    run = sub.add_parser("run", help="run the leave-one-class-out experiment")
    common(run)
    run.add_argument("--tuned", help="tuned.json from a previous tune/run (skips tuning)")
    common(sub.add_parser("tune", help="tune d-KNN k and DUQ on the first subject"))
    rep = sub.add_parser("report", help="render median/IQR tables and significance tests")
    rep.add_argument("results", nargs="+", help="results.csv file(s)")
    rep.add_argument("--format", choices=("csv", "json", "md"), default="md")
    rep.add_argument("--compare-react", action="store_true", help="Wilcoxon ReAct vs plain")
    rep.add_argument("--by-class", action="store_true", help="Kruskal-Wallis across OOD classes")
    rep.add_argument("--compare-id-classes", action="store_true",
                     help="Mann-Whitney between ID-class counts")
    return parser


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "tune": cmd_tune, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ValidationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LocoodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
