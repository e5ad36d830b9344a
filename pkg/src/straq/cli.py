"""Command-line entry point.

Subcommands: ingest, profile, plan, build, query, repl, stats, refresh, zipf.
STRAQ_SEED and STRAQ_CONFIDENCE set the default seed and confidence.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import frontend, optimizer, parser, sampling
from .catalog import Catalog, Schema, load_manifest, persist_manifest
from .errors import StraqError

DEFAULT_BASE_CAP = 100_000
DEFAULT_RATIO = 2


def _env_seed() -> int:
    return int(os.environ.get("STRAQ_SEED", "0"))


def _env_confidence() -> float:
    return float(os.environ.get("STRAQ_CONFIDENCE", "0.95"))


def _open_catalog(args) -> Catalog:
    return load_manifest(Path(args.catalog))


def build_arg_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="straq")
    ap.add_argument("--catalog", default="straq_data",
                    help="catalog directory (default: straq_data)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="ingest a CSV file into the catalog")
    p.add_argument("csv")
    p.add_argument("--table", required=True)
    p.add_argument("--schema", required=True,
                   help="comma-separated name:type list (integer|float|string)")

    p = sub.add_parser("profile", help="extract query templates from a query log")
    p.add_argument("query_log")
    p.add_argument("--out", default="workload.straq")

    p = sub.add_parser("plan", help="solve the sample-selection program")
    p.add_argument("--table", required=True)
    p.add_argument("--workload", default="workload.straq")
    p.add_argument("--budget", type=float, required=True,
                   help="storage budget as a fraction of the table rows")
    p.add_argument("--drift", type=float, default=1.0,
                   help="fraction of existing sample storage replanning may churn")
    p.add_argument("--max-cols", type=int, default=optimizer.DEFAULT_MAX_COLS)
    p.add_argument("--cap", type=int, default=DEFAULT_BASE_CAP)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true")
    mode.add_argument("--heuristic", action="store_true")
    p.add_argument("--out", default="plan.straq")

    p = sub.add_parser("build", help="materialize the families a plan chose")
    p.add_argument("plan")
    p.add_argument("--ratio", type=int, default=DEFAULT_RATIO)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--uniform", type=float, default=None,
                   help="also build a uniform sample with this probability")

    p = sub.add_parser("query", help="run one query")
    p.add_argument("sql")
    p.add_argument("--tsv", action="store_true")

    sub.add_parser("repl", help="interactive loop, one query per line")

    p = sub.add_parser("stats", help="show a table's statistics")
    p.add_argument("table")

    p = sub.add_parser("refresh", help="rebuild a sample family with a new seed")
    p.add_argument("family", help="family id, e.g. sessions/Browser")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("zipf", help="Zipf storage-overhead ratio")
    p.add_argument("--s", type=float, required=True)
    p.add_argument("--M", type=float, required=True)
    p.add_argument("--K", type=float, required=True)
    return ap


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except StraqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "zipf":
        ratio = sampling.zipf_overhead(args.s, args.M, args.K)
        print(f"{ratio:.3g}")
        return 0

    if args.command == "ingest":
        cat = Catalog(args.catalog)
        try:
            cat = load_manifest(Path(args.catalog))
        except StraqError:
            pass  # fresh catalog directory
        handle = cat.ingest_csv(args.csv, args.table, Schema.parse(args.schema))
        persist_manifest(cat)
        print(f"ingested {handle.row_count} rows into {args.table} "
              f"({len(handle.blocks)} blocks)")
        return 0

    if args.command == "profile":
        queries = []
        with open(args.query_log, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    queries.append(parser.parse(line))
                except StraqError as exc:
                    raise StraqError(f"{args.query_log}:{lineno}: {exc}") from None
        profile = optimizer.extract_templates(queries)
        optimizer.save_workload(profile, args.out)
        print(f"{len(profile.templates)} templates -> {args.out}")
        return 0

    if args.command == "plan":
        cat = _open_catalog(args)
        if args.table not in cat.tables:
            raise StraqError(f"unknown table {args.table!r}")
        table = cat.tables[args.table]
        profile = optimizer.load_workload(args.workload)
        candidates = optimizer.generate_candidates(profile, cat, table, args.cap,
                                                   args.max_cols)
        stats = cat.compute_stats(table, [tuple(t.phi) for t in profile.templates])
        tails = [optimizer.tail_length(stats, t.phi, args.cap)
                 for t in profile.templates]
        dists = [stats.distinct(tuple(t.phi)) for t in profile.templates]
        mode = "exact" if args.exact else "heuristic" if args.heuristic else "auto"
        budget_rows = int(args.budget * table.row_count)
        plan = optimizer.solve_plan(
            candidates, profile, budget_rows, args.drift,
            template_tails=tails, template_distincts=dists, mode=mode,
            table=args.table, base_cap=args.cap)
        optimizer.save_plan(plan, args.out)
        cat.set_plan(plan)
        persist_manifest(cat)
        chosen = ", ".join(str(p) for p in plan.chosen_sets()) or "(none)"
        print(f"plan -> {args.out}: chose {chosen}; G={plan.objective!r}; "
              f"{plan.budget_used}/{plan.budget_rows} rows")
        return 0

    if args.command == "build":
        cat = _open_catalog(args)
        plan = optimizer.load_plan(args.plan)
        if plan.table not in cat.tables:
            raise StraqError(f"plan references unknown table {plan.table!r}")
        table = cat.tables[plan.table]
        seed = args.seed if args.seed is not None else _env_seed()
        stats = cat.compute_stats(table, [tuple(c.phi) for c in plan.candidates])
        built = []
        for phi in plan.chosen_sets():
            fam = sampling.build_family(table, phi, plan.base_cap, args.ratio,
                                        seed, stats)
            built.append(fam)
        uniform = None
        if args.uniform is not None:
            uniform = sampling.build_uniform(table, args.uniform, seed)
        # register only after everything built, so failures leave no side effects
        for fam in built:
            cat.add_family(fam)
        if uniform is not None:
            cat.add_uniform(uniform)
        cat.set_plan(plan)
        persist_manifest(cat)
        names = ", ".join(f.family_id for f in built) or "(none)"
        print(f"built {len(built)} families: {names}"
              + (f"; uniform p={args.uniform}" if uniform else ""))
        return 0

    if args.command == "query":
        cat = _open_catalog(args)
        result = frontend.run(args.sql, cat,
                              default_confidence=_env_confidence())
        for w in result.warnings:
            print(f"warning: {w}", file=sys.stderr)
        print(result.format(tsv=args.tsv))
        return 0

    if args.command == "repl":
        cat = _open_catalog(args)
        frontend.repl(cat, sys.stdin, sys.stdout,
                      default_confidence=_env_confidence(),
                      prompt=sys.stdin.isatty())
        return 0

    if args.command == "stats":
        cat = _open_catalog(args)
        if args.table not in cat.tables:
            raise StraqError(f"unknown table {args.table!r}")
        table = cat.tables[args.table]
        stats = cat.compute_stats(table, [(c,) for c in table.schema.names])
        print(f"table {table.name}: {table.row_count} rows, "
              f"{len(table.blocks)} blocks, "
              f"avg row bytes {stats.avg_row_bytes:.1f}")
        for name, ctype in table.schema.columns:
            print(f"  {name} ({ctype}): {stats.distinct((name,))} distinct")
        persist_manifest(cat)
        return 0

    if args.command == "refresh":
        cat = _open_catalog(args)
        family = cat.families.get(args.family)
        if family is None:
            raise StraqError(f"unknown family {args.family!r}")
        seed = args.seed if args.seed is not None else family.seed + 1
        fresh = sampling.refresh_family(cat, family, seed)
        persist_manifest(cat)
        print(f"refreshed {fresh.family_id} with seed {seed}")
        return 0

    raise StraqError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
