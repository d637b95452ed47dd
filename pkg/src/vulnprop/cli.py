"""Command-line entry point.

Exit codes: 0 ok, 1 usage, 2 validation, 3 resource limit, 4 analysis error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Sequence

from . import __version__
from .classifier import ENDPOINT_ENV, RemoteClassifier, serve_stub
from .depgraph import build_p_graph, write_pgraph
from .oracle import DEFAULT_NODE_CAP, GraphTooLarge, oracle_propagate, write_oracle
from .patchvf import MalformedDiff, identify_vfs, load_filter_config, load_function_map, read_source_tree
from .propagation import (
    AnalysisError,
    PassBoundExceeded,
    PropagationInterrupted,
    load_result,
    load_vuln,
    propagate,
    write_result,
)
from .snapshot import SnapshotError, load_snapshot, parse_timestamp, validate_snapshot
from .synthgen import generate, load_config, write_generated
from .vpss import load_params, score_at, timeseries, write_vpss

logger = logging.getLogger("vulnprop")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RESOURCE, EXIT_ANALYSIS = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which we reserve
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, data: object) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")
    return path


def _load_validated(snapshot_dir: str, out: Path | None = None):
    """Load and validate; returns (snapshot, report) or raises SystemExit(2) on fatal findings."""
    try:
        s = load_snapshot(snapshot_dir)
    except SnapshotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if out is not None:
            _write_json(out / "validation.json", {"usable": False, "error": str(exc), "findings": []})
        raise SystemExit(EXIT_VALIDATION)
    report = validate_snapshot(s)
    if out is not None:
        _write_json(out / "validation.json", report.to_json())
    for f in report.warnings:
        logger.warning("%s %s %s", f.code, f.subject, f.detail)
    if not report.usable:
        for f in report.fatal:
            print(f"fatal: {f.code} {f.subject} {f.detail}", file=sys.stderr)
        if out is not None:
            print(f"validation report: {out / 'validation.json'}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)
    return s, report


# -- commands ------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    out = Path(args.out)
    s, report = _load_validated(args.snapshot, out)
    g = build_p_graph(s)
    print(f"{s.total_p} projects, {s.total_pv} project-versions, {g.edge_count()} P-level edges")
    print(f"validation report: {out / 'validation.json'} ({len(report.warnings)} warnings)")
    if g.self_support:
        print(f"note: {len(g.self_support)} project(s) depend on other versions of themselves; not traversed")
    if args.export_pgraph:
        path = write_pgraph(g, args.export_pgraph)
        print(f"P-level graph: {path}")
    return EXIT_OK


def cmd_vf(args: argparse.Namespace) -> int:
    try:
        diff_text = Path(args.diff).read_text(encoding="utf-8")
        pre_map = load_function_map(args.pre_map)
        post_map = load_function_map(args.post_map)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if bool(args.pre_src) != bool(args.post_src):
        print("error: --pre-src and --post-src go together", file=sys.stderr)
        return EXIT_USAGE
    endpoint = args.classifier or os.environ.get(ENDPOINT_ENV)
    classifier = RemoteClassifier(endpoint, timeout=args.timeout, retries=args.retries) if endpoint else None
    try:
        report = identify_vfs(
            diff_text,
            pre_map,
            post_map,
            cve=args.cve,
            classifier=classifier,
            config=load_filter_config(args.filters),
            pre_sources=read_source_tree(args.pre_src) if args.pre_src else None,
            post_sources=read_source_tree(args.post_src) if args.post_src else None,
        )
    except MalformedDiff as exc:
        print(f"error: malformed diff: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    path = _write_json(Path(args.out), report.to_json())
    for d in report.decisions:
        print(f"{d.verdict:4}  {d.fqn}  [{d.source}] {d.reason}")
    print(f"{len(report.final_vfs)} vulnerable function(s) -> {path}")
    if report.degraded:
        print("warning: classifier unreachable for some candidates; heuristic verdicts used", file=sys.stderr)
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    s, _ = _load_validated(args.snapshot)
    try:
        vuln = load_vuln(args.vuln)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: bad vulnerability file: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    g = build_p_graph(s)
    try:
        result = propagate(s, g, vuln, jobs=args.jobs, cache_dir=args.cache, max_passes=args.max_passes)
    except (PropagationInterrupted, PassBoundExceeded) as exc:
        print(f"stopped: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except AnalysisError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    result_path, log_path = write_result(result, args.out)
    n_pv = len(result.affected_pvs())
    print(f"{len(result.affected)} affected projects, {n_pv} affected project-versions, {len(result.pass_log)} passes")
    print(f"result: {result_path}\npass log: {log_path}")
    return EXIT_OK


def _parse_series(text: str, result) -> tuple[datetime, int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError("--series expects t0,interval_days,count")
    if parts[0] in ("", "disclosed"):
        if result.disclosed_at is None:
            raise ValueError("result has no disclosure time; pass an explicit t0")
        t0 = result.disclosed_at
    else:
        t0 = parse_timestamp(parts[0])
    return t0, int(parts[1]), int(parts[2])


def cmd_score(args: argparse.Namespace) -> int:
    try:
        result = load_result(args.result)
        params = load_params(args.params)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    s, _ = _load_validated(args.snapshot)
    try:
        if args.series:
            t0, interval, count = _parse_series(args.series, result)
            records = timeseries(result, s, params, t0, interval, count)
        else:
            records = [score_at(result, s, params, parse_timestamp(args.at) if args.at else None)]
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    json_path, csv_path = write_vpss(records, params, out)
    for rec in records:
        stamp = rec.timestamp.isoformat() if rec.timestamp else "full snapshot"
        print(f"{stamp}  VPSS {rec.vpss:.2f} ({rec.tier})")
    print(f"scores: {json_path}, {csv_path}")
    if args.plot and len(records) > 1:
        from .plotting import plot_vpss_series

        png = plot_vpss_series([r.to_json() for r in records], out / "vpss.png", title=result.cve_id)
        print(f"figure: {png}")
    return EXIT_OK


def cmd_gen(args: argparse.Namespace) -> int:
    try:
        config = load_config(args.config)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: bad generator config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    gen = generate(config)
    out = write_generated(gen, args.out_dir)
    print(f"{gen.snapshot.total_p} projects, {gen.snapshot.total_pv} project-versions -> {out}")
    print(f"planted {gen.vuln.cve_id} in {gen.vuln.root_project}; {len(gen.truth['affected'])} PVs affected")
    return EXIT_OK


def cmd_oraclecheck(args: argparse.Namespace) -> int:
    s, _ = _load_validated(args.snapshot)
    try:
        vuln = load_vuln(args.vuln)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: bad vulnerability file: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        expected = oracle_propagate(s, vuln, node_cap=args.node_cap)
    except GraphTooLarge as exc:
        print(f"GraphTooLarge: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    try:
        got = propagate(s, build_p_graph(s), vuln)
    except AnalysisError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    if args.out:
        write_oracle(expected, Path(args.out) / "oracle.json")
    problems = []
    if got.affected_pvs() != expected.affected:
        problems.append(f"affected PVs differ: engine-only {sorted(map(str, got.affected_pvs() - expected.affected))}, "
                        f"oracle-only {sorted(map(str, expected.affected - got.affected_pvs()))}")
    if got.eps_map() != expected.eps:
        problems.append("entry-point sets differ")
    if got.inter_pv_calls != expected.inter_pv_calls:
        problems.append("inter-PV call pairs differ")
    if problems:
        for p in problems:
            print(f"MISMATCH: {p}")
        return EXIT_ANALYSIS
    print(f"ok: engine matches oracle on {len(expected.affected)} affected PVs")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from .plotting import plot_stage_stats, plot_vpss_series
    from .report import summarize

    try:
        result = json.loads(Path(args.result).read_text(encoding="utf-8"))
        vpss = json.loads(Path(args.vpss).read_text(encoding="utf-8")) if args.vpss else None
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    text = summarize(result, vpss)
    sys.stdout.write(text)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(text, encoding="utf-8")
    written = [out / "report.txt", plot_stage_stats(result["stage_stats"], out / "stages.png", title=result["cve"])]
    if vpss and len(vpss.get("records", [])) > 1:
        written.append(plot_vpss_series(vpss["records"], out / "vpss.png", title=result["cve"]))
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_serve_stub(args: argparse.Namespace) -> int:
    serve_stub(args.host, args.port)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vulnprop", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate a snapshot and build the P-level graph")
    p.add_argument("snapshot")
    p.add_argument("--out", default=".", help="directory for validation.json")
    p.add_argument("--export-pgraph", metavar="PATH", nargs="?", const="pgraph.json")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("vf", help="identify vulnerable functions from a patch")
    p.add_argument("diff")
    p.add_argument("pre_map")
    p.add_argument("post_map")
    p.add_argument("--classifier", metavar="URL", help=f"remote classifier (env {ENDPOINT_ENV})")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--retries", type=int, default=1)
    p.add_argument("--cve", default="")
    p.add_argument("--filters", metavar="TOML", help="logging matcher configuration")
    p.add_argument("--pre-src", metavar="DIR")
    p.add_argument("--post-src", metavar="DIR")
    p.add_argument("--out", default="vfs.json")
    p.set_defaults(func=cmd_vf)

    p = sub.add_parser("analyze", help="propagate a vulnerability through a snapshot")
    p.add_argument("snapshot")
    p.add_argument("vuln")
    p.add_argument("--cache", metavar="DIR", help="persist state here and resume from it")
    p.add_argument("--out", default=".")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--max-passes", type=int, help="stop after N passes (state kept in --cache)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("score", help="VPSS scores for a propagation result")
    p.add_argument("result")
    p.add_argument("snapshot")
    p.add_argument("--params", metavar="TOML")
    when = p.add_mutually_exclusive_group()
    when.add_argument("--at", metavar="TIME")
    when.add_argument("--series", metavar="T0,DAYS,COUNT", help="T0 may be 'disclosed'; DAYS is the interval")
    p.add_argument("--out", default=".")
    p.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gen", help="generate a synthetic ecosystem")
    p.add_argument("config")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("oraclecheck", help="compare the engine with the brute-force oracle")
    p.add_argument("snapshot")
    p.add_argument("vuln")
    p.add_argument("--node-cap", type=int, default=DEFAULT_NODE_CAP)
    p.add_argument("--out", help="directory for oracle.json")
    p.set_defaults(func=cmd_oraclecheck)

    p = sub.add_parser("report", help="text summary and figures for a result")
    p.add_argument("result")
    p.add_argument("--vpss", metavar="JSON")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve-stub", help="run the stub classifier")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(func=cmd_serve_stub)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.ERROR,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
