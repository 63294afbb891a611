"""``calmix run|compare|plot-data``. Set CALMIX_WORKERS to run cells in parallel."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, expand_grid, load_document, parse_overrides
from .report import PLOT_KINDS, ReportError, compare_dir, emit_plot_data, format_table
from .runner import run


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="calmix", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="train and evaluate every grid cell and seed")
    r.add_argument("config", help="YAML experiment file")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    c = sub.add_parser("compare", help="summarise records against a baseline cell")
    c.add_argument("dir")
    c.add_argument("--baseline", required=True)
    d = sub.add_parser("plot-data", help="write plot-ready CSVs")
    d.add_argument("dir")
    d.add_argument("--kind", required=True, choices=PLOT_KINDS)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args, extra = _parser().parse_known_args(argv)
    try:
        if extra and args.verb != "run":
            raise ConfigError(f"unrecognized arguments: {' '.join(extra)}")
        if args.verb == "run":
            configs = expand_grid(load_document(args.config, parse_overrides(extra)))
            out = args.out or configs[0].output_dir
            records = run(configs, out)
            bad = [f"{r['name']}/seed_{r['seed']}" for r in records if r["status"] != "ok"]
            print(f"wrote {len(records)} records to {out}")
            if bad:
                print(f"aborted: {', '.join(bad)}", file=sys.stderr)
        elif args.verb == "compare":
            print(format_table(compare_dir(args.dir, args.baseline)), end="")
        else:
            print(emit_plot_data(args.dir, args.kind))
    except (ConfigError, ReportError, FileNotFoundError, ValueError) as exc:
        print(f"calmix: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
