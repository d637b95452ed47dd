"""Time-aware Vulnerability Propagation Scoring System (VPSS).

    PBF = ln(1 + gamma * (w1 r_p_dir + w2 r_p_trans + w3 r_pv_dir + w4 r_pv_trans))
    PDF = 1 + (L_max + L_avg) / (2 L_norm)
    raw = PBF * PDF
    VPSS = 10 (1 - exp(-raw / k))
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Iterable

from .propagation import PropagationResult
from .snapshot import EcosystemSnapshot, PvId, format_timestamp

logger = logging.getLogger(__name__)

VPSS_SCHEMA_VERSION = 1
TIERS = ("low", "medium", "high", "critical")


class ZeroTotals(ValueError):
    pass


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class VpssParams:
    w1: float = 5.0
    w2: float = 2.5
    w3: float = 3.0
    w4: float = 1.5
    gamma: float = 500.0
    l_norm: float = 10.0
    k: float = 0.5

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"VPSS parameter {name} must be > 0, got {value}")
        if not self.w1 > self.w3 > self.w2 > self.w4:
            logger.warning("weights (%s, %s, %s, %s) break the w1 > w3 > w2 > w4 guideline",
                           self.w1, self.w2, self.w3, self.w4)

    @property
    def weights(self) -> tuple[float, float, float, float]:
        return (self.w1, self.w2, self.w3, self.w4)

    def to_json(self) -> dict[str, float]:
        return asdict(self)


def load_params(path: str | Path | None) -> VpssParams:
    """Read ``[weights] w1..w4`` plus ``gamma``, ``l_norm``, ``k`` from a TOML file.

    The three scalars may sit at top level or in a ``[scaling]`` table.
    """
    if path is None:
        return VpssParams()
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    flat: dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    known = set(VpssParams.__dataclass_fields__)
    unknown = set(flat) - known
    if unknown:
        raise ValueError(f"unknown VPSS parameters: {sorted(unknown)}")
    return VpssParams(**{k: float(v) for k, v in flat.items()})


@dataclass(frozen=True)
class BreadthCounts:
    p_dir: int = 0
    p_trans: int = 0
    pv_dir: int = 0
    pv_trans: int = 0
    total_p: int = 0
    total_pv: int = 0

    def __post_init__(self) -> None:
        if min(asdict(self).values()) < 0:
            raise ValueError(f"negative count in {self}")
        if self.p_dir + self.p_trans > self.total_p or self.pv_dir + self.pv_trans > self.total_pv:
            raise ValueError(f"affected counts exceed ecosystem totals: {self}")

    def ratios(self) -> tuple[float, float, float, float]:
        if self.total_p <= 0 or self.total_pv <= 0:
            raise ZeroTotals("ecosystem totals must be positive")
        return (
            self.p_dir / self.total_p,
            self.p_trans / self.total_p,
            self.pv_dir / self.total_pv,
            self.pv_trans / self.total_pv,
        )


@dataclass
class VpssRecord:
    cve: str
    timestamp: datetime | None
    vpss: float
    tier: str
    pbf: float
    pdf: float
    raw: float
    counts: BreadthCounts
    l_max: int
    l_avg: float
    affected_pvs: frozenset[PvId] = field(default=frozenset(), repr=False, compare=False)

    def to_json(self) -> dict[str, Any]:
        return {
            "cve": self.cve,
            "timestamp": format_timestamp(self.timestamp) if self.timestamp else None,
            "vpss": self.vpss,
            "tier": self.tier,
            "pbf": self.pbf,
            "pdf": self.pdf,
            "raw": self.raw,
            "counts": asdict(self.counts),
            "l_max": self.l_max,
            "l_avg": self.l_avg,
        }


def breadth_factor(c: BreadthCounts, p: VpssParams) -> float:
    weighted = sum(w * r for w, r in zip(p.weights, c.ratios()))
    return math.log1p(p.gamma * weighted)


def depth_factor(l_max: float, l_avg: float, p: VpssParams) -> float:
    if l_avg < 0 or l_max < l_avg:
        raise ValueError(f"need l_max >= l_avg >= 0, got l_max={l_max}, l_avg={l_avg}")
    return 1.0 + (l_max + l_avg) / (2.0 * p.l_norm)


def score(pbf: float, pdf: float, p: VpssParams) -> tuple[float, float]:
    if pbf < 0 or pdf < 0:
        raise ValueError("pbf and pdf must be non-negative")
    raw = pbf * pdf
    # -expm1 keeps precision for tiny raw; saturates below 10 for large raw
    vpss = -10.0 * math.expm1(-raw / p.k)
    return raw, min(vpss, math.nextafter(10.0, 0.0))


def tier(vpss: float) -> str:
    if not 0.0 <= vpss <= 10.0 or math.isnan(vpss):
        raise OutOfRange(f"VPSS {vpss} outside [0, 10]")
    if vpss < 4.0:
        return "low"
    if vpss < 7.0:
        return "medium"
    if vpss < 9.0:
        return "high"
    return "critical"


# -- time-aware scoring over a propagation result --------------------------------


def _released_by(s: EcosystemSnapshot, pv: PvId, t: datetime | None) -> bool:
    if t is None:
        return True
    ts = s[pv].released_at
    return ts is not None and ts <= t


def filtered_affected(
    r: PropagationResult, s: EcosystemSnapshot, t: datetime | None
) -> tuple[set[PvId], set[PvId], dict[PvId, set[PvId]]]:
    """Root PVs, reachable affected PVs and PV-level affected edges visible at ``t``.

    Only PVs released by ``t`` survive, and a downstream PV stays only while a
    chain of surviving affected edges still connects it to a surviving root PV.
    """
    roots = {pv for pv in r.root_pvs if pv in s and _released_by(s, pv, t)}
    adj: dict[PvId, set[PvId]] = {}
    for up, down in r.inter_pv_calls:
        if up in s and down in s and _released_by(s, up, t) and _released_by(s, down, t):
            adj.setdefault(up, set()).add(down)
    seen = set(roots)
    queue = deque(sorted(roots))
    while queue:
        cur = queue.popleft()
        for nxt in sorted(adj.get(cur, ())):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return roots, seen, adj


def breadth_and_depth(
    r: PropagationResult, s: EcosystemSnapshot, t: datetime | None
) -> tuple[BreadthCounts, int, float, frozenset[PvId]]:
    root = r.root_project
    roots, reached, adj = filtered_affected(r, s, t)
    downstream = {pv for pv in reached if pv.project != root}
    direct_pv = {pv for pv in downstream if set(s[pv].deps) & roots}
    direct_p = {pv.project for pv in direct_pv}
    all_p = {pv.project for pv in downstream}

    # P-level shortest depths over the surviving affected subgraph
    p_adj: dict[str, set[str]] = {}
    for up, downs in adj.items():
        if up not in reached:
            continue
        for down in downs:
            if down in reached and up.project != down.project:
                p_adj.setdefault(up.project, set()).add(down.project)
    depth = {root: 0}
    queue = deque([root])
    while queue:
        cur = queue.popleft()
        for nxt in sorted(p_adj.get(cur, ())):
            if nxt not in depth:
                depth[nxt] = depth[cur] + 1
                queue.append(nxt)
    hops = [d for p, d in depth.items() if p != root]
    l_max = max(hops, default=0)
    l_avg = sum(hops) / len(hops) if hops else 0.0

    if t is None:
        total_p, total_pv = s.total_p, s.total_pv
    else:
        visible = [pv for pv in s.pvs if _released_by(s, pv, t)]
        total_pv = len(visible)
        total_p = len({pv.project for pv in visible})
    counts = BreadthCounts(
        p_dir=len(direct_p),
        p_trans=len(all_p - direct_p),
        pv_dir=len(direct_pv),
        pv_trans=len(downstream - direct_pv),
        total_p=total_p,
        total_pv=total_pv,
    )
    return counts, l_max, l_avg, frozenset(reached)


def score_at(
    r: PropagationResult, s: EcosystemSnapshot, p: VpssParams, t: datetime | None = None
) -> VpssRecord:
    """VPSS at time ``t``; ``t=None`` scores the whole snapshot."""
    counts, l_max, l_avg, reached = breadth_and_depth(r, s, t)
    pbf = breadth_factor(counts, p) if counts.total_p and counts.total_pv else 0.0
    pdf = depth_factor(l_max, l_avg, p)
    raw, value = score(pbf, pdf, p)
    return VpssRecord(
        cve=r.cve_id,
        timestamp=t,
        vpss=value,
        tier=tier(value),
        pbf=pbf,
        pdf=pdf,
        raw=raw,
        counts=counts,
        l_max=l_max,
        l_avg=l_avg,
        affected_pvs=reached,
    )


def timeseries(
    r: PropagationResult,
    s: EcosystemSnapshot,
    p: VpssParams,
    t0: datetime,
    interval_days: int = 30,
    points: int = 24,
) -> list[VpssRecord]:
    return [score_at(r, s, p, t0 + timedelta(days=interval_days * i)) for i in range(points)]


# -- output ------------------------------------------------------------------------

CSV_COLUMNS = (
    "timestamp", "vpss", "tier", "pbf", "pdf", "raw",
    "p_dir", "p_trans", "pv_dir", "pv_trans", "total_p", "total_pv",
    "l_max", "l_avg",
)


def records_to_csv(records: Iterable[VpssRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in records:
        c = rec.counts
        writer.writerow([
            format_timestamp(rec.timestamp) if rec.timestamp else "",
            f"{rec.vpss:.6f}", rec.tier, f"{rec.pbf:.9f}", f"{rec.pdf:.9f}", f"{rec.raw:.9f}",
            c.p_dir, c.p_trans, c.pv_dir, c.pv_trans, c.total_p, c.total_pv,
            rec.l_max, f"{rec.l_avg:.6f}",
        ])
    return buf.getvalue()


def write_vpss(records: list[VpssRecord], p: VpssParams, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "vpss.json"
    payload = {
        "schema_version": VPSS_SCHEMA_VERSION,
        "params": p.to_json(),
        "records": [rec.to_json() for rec in records],
    }
    json_path.write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    csv_path = out / "vpss.csv"
    csv_path.write_text(records_to_csv(records), encoding="utf-8")
    return json_path, csv_path
