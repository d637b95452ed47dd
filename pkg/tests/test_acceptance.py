"""Acceptance criteria 1-9, one test each, with a pass/fail line per criterion.

The lines are collected in ``REPORT_LINES`` and printed in the pytest
terminal summary (see conftest.py); running this file directly prints them too.
"""

from __future__ import annotations

import json
import math
import sys
import time
from datetime import timedelta
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))
sys.path.insert(0, str(Path(__file__).parent / "oracles"))

from helpers import T0, anomaly, cycle, diamond, fat, pid, two_point  # noqa: E402
from vpss_reference import reference  # noqa: E402

from vulnprop.cli import main as cli_main  # noqa: E402
from vulnprop.depgraph import build_p_graph  # noqa: E402
from vulnprop.oracle import oracle_propagate  # noqa: E402
from vulnprop.patchvf import DROP, KEEP, identify_vfs, load_function_map, read_source_tree  # noqa: E402
from vulnprop.propagation import (  # noqa: E402
    STAGES,
    Propagator,
    VulnSpec,
    intrinsic_scope,
    pass_bound,
    priority_order,
    propagate,
)
from vulnprop.synthgen import GenConfig, generate, write_generated  # noqa: E402
from vulnprop.vpss import BreadthCounts, VpssParams, breadth_factor, depth_factor, score, score_at, tier  # noqa: E402

REPORT_LINES: dict[int, str] = {}
PATCHES = Path(__file__).parent / "fixtures" / "patches"
SEEDS = range(100)


def record(n: int, ok: bool, detail: str) -> None:
    REPORT_LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


def check(n: int, failures: list[str], detail: str) -> None:
    record(n, not failures, detail if not failures else f"{detail}; " + "; ".join(failures[:5]))
    assert not failures, failures


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_1_vpss_golden_vector():
    start = time.perf_counter()
    p = VpssParams()
    # ratios realized exactly: 10/10^4, 4/10^4 for projects; 2/10^4, 1/10^4 for PVs
    counts = BreadthCounts(10, 4, 2, 1, total_p=10_000, total_pv=10_000)
    pbf = breadth_factor(counts, p)
    pdf = depth_factor(3, 1.5, p)
    raw, vpss = score(pbf, pdf, p)
    elapsed = time.perf_counter() - start

    ref_pbf, ref_pdf, ref_raw, ref_vpss = (float(x) for x in reference(("0.001", "0.0004", "0.0002", "0.0001"), 3, "1.5"))
    failures = []
    for name, got, want in (
        ("PBF", pbf, ref_pbf),
        ("PBF=ln(4.375)", pbf, math.log(4.375)),
        ("PDF", pdf, ref_pdf),
        ("PDF=1.225", pdf, 1.225),
        ("raw", raw, ref_raw),
        ("raw=PBF*1.225", raw, math.log(4.375) * 1.225),
        ("vpss", vpss, ref_vpss),
        ("vpss=10(1-e^-2raw)", vpss, 10 * (1 - math.exp(-2 * raw))),
    ):
        if abs(got - want) > 1e-9:
            failures.append(f"{name}: {got!r} vs {want!r}")
    if elapsed >= 1.0:
        failures.append(f"runtime {elapsed:.3f}s")
    check(1, failures, f"PBF={pbf:.10f} PDF={pdf} raw={raw:.10f} vpss={vpss:.10f} (1e-9 vs decimal oracle, {elapsed*1e3:.1f} ms)")


# -- 2 ---------------------------------------------------------------------------------


def test_criterion_2_tiers():
    expected = {0: "low", 3.999: "low", 4: "medium", 7: "high", 7.35: "high", 9: "critical"}
    failures = [f"{v}->{tier(v)}" for v, t in expected.items() if tier(v) != t]
    check(2, failures, ", ".join(f"{v}->{t}" for v, t in expected.items()))


# -- 3 and 4 ---------------------------------------------------------------------------


def acceptance_config(seed: int, **extra) -> GenConfig:
    return GenConfig(seed=seed, n_projects=40, versions_per_project=(1, 4), dep_density=0.15,
                     cycle_probability=0.1, fat_package_probability=0.3, **extra)


@pytest.fixture(scope="module")
def seed_runs():
    """Engine runs (with per-pass stage sets) and oracle runs over the 100 seeds."""
    start = time.perf_counter()
    runs = []
    for seed in SEEDS:
        gen = generate(acceptance_config(seed))
        s = gen.snapshot
        engine = Propagator(s, build_p_graph(s), gen.vuln)
        result = engine.run()
        runs.append((seed, result, oracle_propagate(s, gen.vuln)))
    return runs, time.perf_counter() - start


def test_criterion_3_oracle_equivalence(seed_runs):
    runs, elapsed = seed_runs
    failures = []
    for seed, r, o in runs:
        if r.affected_pvs() != o.affected:
            failures.append(f"seed {seed}: affected PVs differ")
        if r.eps_map() != o.eps:
            failures.append(f"seed {seed}: EP sets differ")
        if r.inter_pv_calls != o.inter_pv_calls:
            failures.append(f"seed {seed}: inter-PV call pairs differ")
    if elapsed >= 120:
        failures.append(f"runtime {elapsed:.1f}s")
    affected = sum(len(r.affected_pvs()) for _, r, _ in runs)
    check(3, failures, f"{len(runs)} seeds equal on affected/EPs/call pairs ({affected} affected PVs total, {elapsed:.1f}s)")


def test_criterion_4_pruning_nesting(seed_runs):
    runs, _ = seed_runs
    failures = []
    n_passes = 0
    for seed, r, _ in runs:
        for rec in r.pass_log:
            n_passes += 1
            if not rec.stages["v3"] <= rec.stages["v2"] <= rec.stages["v1"]:
                failures.append(f"seed {seed} pass {rec.seq}: nesting broken")
    for seed in SEEDS:
        gen = generate(acceptance_config(seed, call_through_probability=0.0))
        r = propagate(gen.snapshot, build_p_graph(gen.snapshot), gen.vuln)
        if set(r.affected) != {gen.vuln.root_project}:
            failures.append(f"seed {seed}: no call-through but affected={sorted(r.affected)}")
        if any(rec.stages["v3"] for rec in r.pass_log):
            failures.append(f"seed {seed}: no call-through but v3 non-empty")
    check(4, failures, f"v3<=v2<=v1 on {n_passes} passes; call_through=0 leaves only the root on {len(SEEDS)} seeds")


# -- 5 ---------------------------------------------------------------------------------


def test_criterion_5_fixpoint_properties():
    failures = []
    s = diamond()
    v = VulnSpec("CVE-TEST-DIAMOND", "A", {"1"}, {"A.Core.decode"}, T0)
    abc = propagate(s, build_p_graph(s), v, pick=priority_order(["A", "B", "C"]))
    acb = propagate(s, build_p_graph(s), v, pick=priority_order(["A", "C", "B"]))
    if abc.affected_pvs() != acb.affected_pvs():
        failures.append("affected differs between orders")
    if abc.eps_map() != acb.eps_map():
        failures.append("EPs differ between orders")
    if abc.inter_pv_calls != acb.inter_pv_calls:
        failures.append("call pairs differ between orders")
    if acb.pass_counts().get("C") != 2:
        failures.append(f"pass_count(C) under A,C,B = {acb.pass_counts().get('C')}")

    c = cycle()
    g = build_p_graph(c)
    cv = VulnSpec("CVE-TEST-CYCLE", "dom", {"1"}, {"dom.Parser.parse"}, T0)
    bound = pass_bound(c, g)
    cr = propagate(c, g, cv, bound=bound)
    if len(cr.pass_log) > bound:
        failures.append(f"cycle used {len(cr.pass_log)} passes > bound {bound}")
    if cr.affected_pvs() != oracle_propagate(c, cv).affected:
        failures.append("cycle result differs from oracle")
    check(5, failures, f"diamond orders agree, pass_count(C)={acb.pass_counts().get('C')} under A,C,B; "
                       f"cycle terminated in {len(cr.pass_log)} passes (bound {bound})")


# -- 6 ---------------------------------------------------------------------------------


def test_criterion_6_time_awareness():
    failures = []
    p = VpssParams()
    s = two_point()
    v = VulnSpec("CVE-TEST-TIME", "R", {"1"}, {"R.Core.vuln"}, T0)
    r = propagate(s, build_p_graph(s), v)
    at30 = score_at(r, s, p, T0 + timedelta(days=30)).affected_pvs
    at60 = score_at(r, s, p, T0 + timedelta(days=60)).affected_pvs
    if not at30 < at60:
        failures.append(f"{sorted(map(str, at30))} not a strict subset of {sorted(map(str, at60))}")
    untimed = score_at(r, s, p).vpss
    latest = score_at(r, s, p, s.latest_release()).vpss
    if abs(untimed - latest) > 1e-12:
        failures.append(f"score at latest timestamp {latest!r} != untimed {untimed!r}")

    a = anomaly()
    ra = propagate(a, build_p_graph(a), v)
    v0 = score_at(ra, a, p, T0).vpss
    v1 = score_at(ra, a, p, T0 + timedelta(days=30)).vpss
    if not v1 > v0:
        failures.append(f"anomaly: vpss(t1)={v1} not > vpss(t0)={v0}")
    check(6, failures, f"|set(t0+30d)|={len(at30)} < |set(t0+60d)|={len(at60)}; |latest-untimed|={abs(untimed - latest):.1e}; "
                       f"anomaly vpss {v0:.3f} -> {v1:.3f}")


# -- 7 ---------------------------------------------------------------------------------


def vf_report(name: str):
    d = PATCHES / name
    return identify_vfs(
        (d / "patch.diff").read_text(),
        load_function_map(d / "pre_map.json"),
        load_function_map(d / "post_map.json"),
        pre_sources=read_source_tree(d / "pre"),
        post_sources=read_source_tree(d / "post"),
    )


def test_criterion_7_vf_pipeline():
    failures = []
    addition = vf_report("addition")
    if addition.final_vfs:
        failures.append(f"addition-only gave {addition.final_vfs}")
    expected = {
        "quote": [("SqlBuilder.placeholders()", DROP)],
        "getter": [("AMQSession.getAdvisorySession()", DROP), ("AMQSession.setAdvisorySession()", DROP)],
        "bounds": [("Buffer.read()", KEEP)],
    }
    for name, want in expected.items():
        rep = vf_report(name)
        got = [(d.fqn, d.verdict) for d in rep.decisions]
        if got != want or any(d.source != "heuristic" for d in rep.decisions):
            failures.append(f"{name}: {got}")
    check(7, failures, "addition-only -> no VFs; quote-style and getter removal dropped; bounds check kept")


# -- 8 ---------------------------------------------------------------------------------


def test_criterion_8_intrinsic_scope():
    scope = intrinsic_scope(fat(), pid("F@1"))
    failures = [] if scope == {"a", "b"} else [f"scope {sorted(scope)}"]
    check(8, failures, "Up={a,b,lib1,lib2}, direct dep ships lib1, dep-of-dep ships lib2 -> Up\\Down={a,b}")


# -- 9 ---------------------------------------------------------------------------------


def test_criterion_9_stage_statistics_schema(tmp_path, capsys):
    gen = generate(acceptance_config(7))
    eco = write_generated(gen, tmp_path / "eco")
    failures = []
    if cli_main(["analyze", str(eco), str(eco / "vuln.json"), "--out", str(tmp_path)]) != 0:
        failures.append("analyze failed")
    if cli_main(["report", str(tmp_path / "result.json"), "--out", str(tmp_path)]) != 0:
        failures.append("report failed")
    result = json.loads((tmp_path / "result.json").read_text())
    stats = result.get("stage_stats", {})
    fields = {"p_dir", "p_trans", "pv_dir", "pv_trans", "l_max", "l_avg"}
    if list(stats) != list(STAGES) or any(set(stats[s_]) != fields for s_ in stats):
        failures.append(f"stage_stats schema {json.dumps(stats)}")
    if not (tmp_path / "stages.png").exists() or "pruning stages" not in (tmp_path / "report.txt").read_text():
        failures.append("report artifacts missing")
    capsys.readouterr()
    v3 = stats.get("v3", {})
    check(9, failures, "demo emits per-stage p_dir/p_trans/pv_dir/pv_trans/l_max/l_avg "
                       f"(v3: {v3.get('p_dir')}+{v3.get('p_trans')} P); "
                       "ecosystem-scale Maven figures not reproduced by design")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q"])
    for key in sorted(REPORT_LINES):
        print(REPORT_LINES[key])
    sys.exit(code)
