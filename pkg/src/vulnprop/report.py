"""Plain-text summaries of propagation and scoring outputs."""

from __future__ import annotations

from typing import Any, Sequence

from .propagation import STAGES

STAGE_LABELS = {"v0": "declared", "v1": "v1 version", "v2": "v2 import", "v3": "v3 call-graph"}
STAGE_COLUMNS = ("p_dir", "p_trans", "pv_dir", "pv_trans", "l_max", "l_avg")


def _table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [list(map(str, header))] + [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for n, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def stage_table(stage_stats: dict[str, dict[str, float]]) -> str:
    rows = [[STAGE_LABELS.get(s, s)] + [stage_stats[s][c] for c in STAGE_COLUMNS] for s in STAGES if s in stage_stats]
    return _table(["stage", *STAGE_COLUMNS], rows)


def pruning_rates(stage_stats: dict[str, dict[str, float]]) -> dict[str, float]:
    """Share of declared dependents (P and PV) removed by the end of CG pruning."""
    before, after = stage_stats.get("v0"), stage_stats.get("v3")
    if not before or not after:
        return {}
    out = {}
    for unit in ("p", "pv"):
        b = before[f"{unit}_dir"] + before[f"{unit}_trans"]
        a = after[f"{unit}_dir"] + after[f"{unit}_trans"]
        out[unit] = (b - a) / b if b else 0.0
    return out


def summarize(result: dict[str, Any], vpss: dict[str, Any] | None = None) -> str:
    affected = result["affected"]
    n_pv = sum(len(a["versions"]) for a in affected.values())
    lines = [
        f"CVE            {result['cve']}",
        f"root project   {result['root']}",
        f"affected       {len(affected)} projects / {n_pv} project-versions",
        f"passes         {result['passes']}",
        "",
        "pruning stages",
        stage_table(result["stage_stats"]),
    ]
    rates = pruning_rates(result["stage_stats"])
    if rates:
        lines += ["", f"pruned         {rates['p']:.1%} of projects, {rates['pv']:.1%} of project-versions"]
    if vpss and vpss.get("records"):
        rows = [
            [r["timestamp"] or "-", r["vpss"], r["tier"], r["pbf"], r["pdf"],
             r["counts"]["p_dir"] + r["counts"]["p_trans"], r["counts"]["pv_dir"] + r["counts"]["pv_trans"]]
            for r in vpss["records"]
        ]
        lines += ["", "VPSS", _table(["timestamp", "vpss", "tier", "pbf", "pdf", "P", "PV"], rows)]
    if result.get("warnings"):
        lines += ["", f"warnings       {len(result['warnings'])}"]
        lines += [f"  - {w}" for w in result["warnings"][:20]]
    return "\n".join(lines) + "\n"
