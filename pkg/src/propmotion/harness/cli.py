"""Command-line entry point: ``propmotion <stage> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import load_config
from .pipeline import STAGES, PipelineError, format_summary, run_all, summary_table


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="propmotion", description=__doc__)
    sub = p.add_subparsers(dest="stage", required=True)
    for name in (*STAGES, "all"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, default=None, help="INI file layered over the defaults")
        s.add_argument("--seed", type=int, default=None, help="override experiment.seed")
        s.add_argument("--out", type=Path, default=Path("out"), help="artifact directory")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        if name in ("train-upper", "run"):
            s.add_argument("--controllers", default=None, help="comma-separated subset")
            s.add_argument("--tasks", default=None, help="comma-separated subset of eval tasks")
        if name == "run":
            s.add_argument("--trials", type=int, default=None)
    return p


def _split(s):
    return [x.strip() for x in s.split(",") if x.strip()] if s else None


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        overrides = {}
        for item in args.set:
            key, sep, val = item.partition("=")
            if not sep or "." not in key:
                raise ValueError(f"bad --set {item!r}; expected SECTION.KEY=VALUE")
            overrides[key.strip()] = val.strip()
        if args.seed is not None:
            overrides["experiment.seed"] = str(args.seed)
        cfg = load_config(args.config, overrides)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.stage == "all":
            run_all(cfg, out)
            result = None
        elif args.stage in ("train-upper", "run"):
            kw = {"controllers": _split(args.controllers), "tasks": _split(args.tasks)}
            if args.stage == "run":
                kw["trials"] = args.trials
            result = STAGES[args.stage](cfg, out, **kw)
        else:
            result = STAGES[args.stage](cfg, out)
        if args.stage in ("run", "all"):
            sys.stdout.write((out / "runs" / "summary.txt").read_text())
        elif args.stage == "eval-report":
            sys.stdout.write((out / "report" / "report.txt").read_text())
        else:
            print(f"ok stage={args.stage} out={out}")
        del result
        return 0
    except PipelineError as e:
        err = {"error": e.kind, "stage": e.stage, "message": str(e)}
    except (FileNotFoundError, ValueError, KeyError, RuntimeError) as e:
        err = {"error": type(e).__name__, "stage": args.stage, "message": str(e)}
    print(json.dumps(err), file=sys.stderr)
    return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
