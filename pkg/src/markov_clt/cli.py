"""Command-line entry point ``markov-clt``.

Exit status: 0 when every check passes, 2 when a check or hypothesis fails,
1 on an execution error (bad config, missing file, numerical failure).
Artifacts are written to ``--out-dir`` via temp file plus rename.
"""

import argparse
import json
import os
import sys

from . import __version__
from .config import PRESETS, load_preset, parse_config, parse_override
from .errors import HypothesisFailure, MarkovCltError
from .harness import (
    Pipeline, atomic_write, full_report, gnuplot_script, histogram_csv, merge_reports, report_json, variance_csv,
)
from .processes import save_ensemble, set_threads

SUBCOMMANDS = ("simulate", "verify-hypotheses", "corrector", "martingale-diagnostics", "clt", "oracle",
               "full-report", "merge")

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


def build_parser():
    parser = argparse.ArgumentParser(prog="markov-clt", description="CLT toolkit for contracting Markov processes")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        if name == "merge":
            p.add_argument("reports", nargs="+", help="report JSON files from the same configuration")
            p.add_argument("--out-dir", default=None)
            continue
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="TOML experiment file")
        src.add_argument("--preset", choices=PRESETS)
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides meta.seed)")
        p.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")
        p.add_argument("--out-dir", default=None, help="artifact directory (overrides output.out_dir)")
        p.add_argument("--emit-plots", action="store_true", help="write a gnuplot script for the CLT histogram")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. lln.n_paths=2000")
    return parser


def _load(args):
    overrides = dict(parse_override(o) for o in args.overrides)
    if args.preset:
        return load_preset(args.preset, overrides)
    return parse_config(args.config, overrides)


def _write(out_dir, name, text):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    atomic_write(path, text)
    return path


def _emit(out_dir, name, payload, meta):
    payload = {**payload, "meta": meta}
    return _write(out_dir, name, report_json(payload))


def _status(passed):
    return EXIT_PASS if passed else EXIT_FAIL


def run(argv=None):
    """Parse ``argv``, run the subcommand and return the exit status."""
    args = build_parser().parse_args(argv)
    try:
        if args.command == "merge":
            reports = []
            for path in args.reports:
                with open(path) as fh:
                    reports.append(json.load(fh))
            merged = merge_reports(reports)
            out = _write(args.out_dir or ".", "merged.json", report_json(merged))
            print(out)
            return _status(merged["pass"])
        set_threads(args.threads)
        cfg = _load(args)
        out_dir = args.out_dir or cfg.output.out_dir
        return _dispatch(args, cfg, out_dir)
    except HypothesisFailure as exc:
        print(f"hypothesis failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (MarkovCltError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def _dispatch(args, cfg, out_dir):
    cmd = args.command
    if cmd == "full-report":
        rep = full_report(cfg, args.seed)
        _write(out_dir, "report.json", report_json(rep))
        if rep.get("variance_curve"):
            _write(out_dir, "variance_curve.csv", variance_csv(rep["variance_curve"]))
        if rep.get("clt") and rep["clt"].get("histogram"):
            _write(out_dir, "histogram.csv", histogram_csv(rep["clt"]["histogram"]))
            if args.emit_plots:
                _write(out_dir, "clt_histogram.gp", gnuplot_script(rep["clt"]["sigma"]))
        print(f"{os.path.join(out_dir, 'report.json')}: {'pass' if rep['pass'] else 'FAIL'}")
        return _status(rep["pass"])
    p = Pipeline(cfg, args.seed)
    if cmd == "simulate":
        ens = p.ensemble()
        os.makedirs(out_dir, exist_ok=True)
        save_ensemble(ens, os.path.join(out_dir, "ensemble.bin"))
        lln = p.lln()
        _emit(out_dir, "simulate.json", {"lln": lln.to_dict(), "n_paths": ens.n_paths,
                                         "times": ens.times.tolist()}, p.meta())
        return EXIT_PASS
    if cmd == "verify-hypotheses":
        if p.cfg.model.kind == "vorticity":
            rep = p.vorticity()
            _emit(out_dir, "hypotheses.json", {"vorticity": rep}, p.meta())
            return _status(rep["pass"])
        rep = p.hypotheses()["report"]
        _emit(out_dir, "hypotheses.json", {"hypotheses": rep}, p.meta())
        return _status(rep["pass"])
    if cmd == "corrector":
        c = p.corrector()
        est = c["estimate"]
        _emit(out_dir, "corrector.json", {"corrector": {**est.to_dict(), "lipschitz_check": c["lipschitz"].to_dict()}},
              p.meta())
        return _status(c["lipschitz"].passed)
    if cmd == "martingale-diagnostics":
        rep = p.martingale()["report"]
        _emit(out_dir, "martingale.json", {"martingale": rep}, p.meta())
        ok = rep["diagnostics"]["pass"] and rep.get("negative_control", {}).get("all_failed", True)
        return _status(ok)
    if cmd == "clt":
        rep = p.clt_report()
        _emit(out_dir, "clt.json", {"clt": rep, "variance_curve": p.variance().to_dict()}, p.meta())
        _write(out_dir, "variance_curve.csv", variance_csv(p.variance().to_dict()))
        if rep.get("histogram"):
            _write(out_dir, "histogram.csv", histogram_csv(rep["histogram"]))
            if args.emit_plots:
                _write(out_dir, "clt_histogram.gp", gnuplot_script(rep["sigma"]))
        return _status(rep["pass"])
    if cmd == "oracle":
        o = {k: v for k, v in p.oracle().items() if not k.startswith("_")}
        o["comparison"] = p.oracle_comparison()
        _emit(out_dir, "oracle.json", {"oracle": o}, p.meta())
        return _status(o["comparison"]["pass"])
    raise AssertionError(cmd)


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
