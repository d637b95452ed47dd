"""Hierarchical worklist propagation of a vulnerability through an ecosystem.

Each pass pops one project from the worklist, works out which of its versions
and functions became newly affected, derives new entry points (public,
intrinsic functions that reach a target function), and pushes that change to
direct dependents through three pruning levels:

* version: the dependent PV must declare a dependency on a changed upstream version;
* import: it must import a file from the upstream's intrinsic scope;
* call graph: one of its intrinsic functions must call a new upstream entry point.

Dependents that survive all three are enqueued, with their calling functions
as target functions for their own pass.  The loop ends when the worklist is
empty; the lattice of (versions, functions, entry points) only grows, so it
terminates on finite snapshots.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from .depgraph import PDepGraph, direct_downstream, pv_dep_records
from .snapshot import (
    EcosystemSnapshot,
    PvId,
    encode_component,
    format_timestamp,
    parse_timestamp,
)

logger = logging.getLogger(__name__)

RESULT_SCHEMA_VERSION = 1
STAGES = ("v0", "v1", "v2", "v3")

Pair = tuple[PvId, PvId]  # (downstream PV, upstream PV)
CallPair = tuple[str, str]  # (downstream caller fqn, upstream EP fqn)


class AnalysisError(Exception):
    pass


class UnknownRootProject(AnalysisError):
    pass


class NoVulnerableVersionInSnapshot(AnalysisError):
    pass


class PassBoundExceeded(AnalysisError):
    pass


class PropagationInterrupted(AnalysisError):
    """Raised when ``max_passes`` stops a run before the fixpoint; the cache holds the state."""


@dataclass(frozen=True)
class VulnSpec:
    cve_id: str
    root_project: str
    vulnerable_versions: frozenset[str]
    vulnerable_functions: frozenset[str]
    disclosed_at: datetime | None = None

    def __post_init__(self) -> None:
        if not self.vulnerable_functions:
            raise ValueError(f"{self.cve_id}: at least one vulnerable function is required")

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "VulnSpec":
        disclosed = data.get("disclosed_at")
        return cls(
            cve_id=str(data["cve"]),
            root_project=str(data["project"]),
            vulnerable_versions=frozenset(map(str, data["versions"])),
            vulnerable_functions=frozenset(map(str, data["vfs"])),
            disclosed_at=parse_timestamp(disclosed) if disclosed else None,
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "cve": self.cve_id,
            "project": self.root_project,
            "versions": sorted(self.vulnerable_versions),
            "vfs": sorted(self.vulnerable_functions),
            "disclosed_at": format_timestamp(self.disclosed_at) if self.disclosed_at else None,
        }


def load_vuln(path: str | Path) -> VulnSpec:
    return VulnSpec.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# -- intrinsic scope and entry points ---------------------------------------


def dependency_closure(s: EcosystemSnapshot, pv: PvId) -> set[PvId]:
    """PVs reachable through declared deps, excluding every version of ``pv``'s own project."""
    seen: set[PvId] = set()
    stack = [pv]
    while stack:
        cur = stack.pop()
        for dep in s.resolved_deps(cur):
            if dep.project == pv.project or dep in seen:
                continue
            seen.add(dep)
            stack.append(dep)
    return seen


def intrinsic_scope(s: EcosystemSnapshot, pv: PvId) -> frozenset[str]:
    down: set[str] = set()
    for dep in dependency_closure(s, pv):
        down |= s[dep].files
    return frozenset(s[pv].files - down)


class ScopeCache:
    """Memoized intrinsic scopes; one per analysis run."""

    def __init__(self, s: EcosystemSnapshot):
        self.s = s
        self._scopes: dict[PvId, frozenset[str]] = {}

    def __call__(self, pv: PvId) -> frozenset[str]:
        scope = self._scopes.get(pv)
        if scope is None:
            scope = self._scopes[pv] = intrinsic_scope(self.s, pv)
        return scope

    def intrinsic_functions(self, pv: PvId) -> set[str]:
        scope = self(pv)
        return {f.fqn for f in self.s[pv].functions if f.file in scope}


def compute_eps(
    s: EcosystemSnapshot,
    pv: PvId,
    tfs: Iterable[str],
    scope: ScopeCache | None = None,
) -> set[str]:
    """Public intrinsic functions of ``pv`` from which some target function is reachable."""
    m = s[pv]
    declared = m.function_index
    targets = set()
    for t in tfs:
        if t in declared:
            targets.add(t)
        else:
            logger.warning("%s: target function %s is not declared; dropped", pv, t)
    if not targets:
        return set()

    callers: dict[str, set[str]] = {}
    for c in m.calls:
        if c.callee in declared and c.caller in declared:
            callers.setdefault(c.callee, set()).add(c.caller)

    reached = set(targets)
    queue = deque(targets)
    while queue:
        fn = queue.popleft()
        for caller in callers.get(fn, ()):
            if caller not in reached:
                reached.add(caller)
                queue.append(caller)

    in_scope = (scope or ScopeCache(s))(pv)
    return {fn for fn in reached if declared[fn].is_public and declared[fn].file in in_scope}


# -- the three pruning levels -----------------------------------------------


def prune_version(records: Iterable[Pair], d_tvs: Iterable[str]) -> set[Pair]:
    versions = set(d_tvs)
    return {(down, up) for down, up in records if up.version in versions}


def prune_import(v1: Iterable[Pair], s: EcosystemSnapshot, scope: ScopeCache | None = None) -> set[Pair]:
    # imports.json is taken to list references made by the PV's own code, so the
    # downstream-side intrinsic restriction is already applied by the harvester
    scope = scope or ScopeCache(s)
    return {(down, up) for down, up in v1 if s[down].imports & scope(up)}


def prune_cg(
    v2: Iterable[Pair],
    d_eps: dict[PvId, set[str]],
    s: EcosystemSnapshot,
    scope: ScopeCache | None = None,
) -> tuple[set[Pair], dict[PvId, set[str]], dict[Pair, set[CallPair]]]:
    """Keep pairs where an intrinsic downstream function calls a new upstream EP.

    Returns the surviving pairs, the calling functions per downstream PV (its
    next target functions) and the call pairs per surviving PV pair.
    """
    scope = scope or ScopeCache(s)
    v3: set[Pair] = set()
    tfs: dict[PvId, set[str]] = {}
    calls: dict[Pair, set[CallPair]] = {}
    for down, up in sorted(v2):
        eps = d_eps.get(up)
        if not eps:
            continue
        intrinsic = scope.intrinsic_functions(down)
        found = {(c.caller, c.callee) for c in s[down].calls if c.callee in eps and c.caller in intrinsic}
        if found:
            v3.add((down, up))
            calls[(down, up)] = found
            tfs.setdefault(down, set()).update(caller for caller, _ in found)
    return v3, tfs, calls


# -- state and result --------------------------------------------------------


@dataclass
class ProjectState:
    tvs: set[str] = field(default_factory=set)
    tfs: dict[str, set[str]] = field(default_factory=dict)
    eps: dict[PvId, set[str]] = field(default_factory=dict)
    # this project as upstream: (upstream PV, downstream PV) -> call pairs
    inter_pv_calls: dict[tuple[PvId, PvId], set[CallPair]] = field(default_factory=dict)
    stage_sets: dict[str, set[Pair]] = field(default_factory=lambda: {k: set() for k in STAGES})
    pass_count: int = 0


@dataclass
class PassRecord:
    project: str
    pass_no: int  # per-project pass number, 1-based
    seq: int  # global pass sequence number, 1-based
    d_tvs: int
    d_tfs: int
    d_eps: int
    stages: dict[str, set[Pair]]
    enqueued: list[str]
    # stage sizes as logged; set when the record was restored from a cache
    logged_sizes: dict[str, int] | None = None

    def stage_sizes(self) -> dict[str, int]:
        if self.logged_sizes is not None:
            return dict(self.logged_sizes)
        return {k: len(self.stages[k]) for k in STAGES}

    def to_json(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "project": self.project,
            "pass": self.pass_no,
            "d_tvs": self.d_tvs,
            "d_tfs": self.d_tfs,
            "d_eps": self.d_eps,
            **self.stage_sizes(),
            "enqueued": self.enqueued,
        }


@dataclass
class AffectedPv:
    eps: set[str]
    tfs: set[str]
    upstream: set[PvId]


@dataclass
class AffectedProject:
    versions: set[str]
    depth: int
    per_pv: dict[str, AffectedPv]


@dataclass
class PropagationResult:
    cve_id: str
    root_project: str
    affected: dict[str, AffectedProject]
    inter_pv_calls: dict[tuple[PvId, PvId], set[CallPair]]
    stage_stats: dict[str, dict[str, float]]
    pass_log: list[PassRecord]
    root_pvs: set[PvId] = field(default_factory=set)
    warnings: list[str] = field(default_factory=list)
    disclosed_at: datetime | None = None
    # pass totals of a result read back from JSON, whose pass log is not kept
    loaded_pass_counts: dict[str, int] | None = None

    @property
    def affected_edges(self) -> set[tuple[PvId, PvId, frozenset[CallPair]]]:
        return {(up, down, frozenset(calls)) for (up, down), calls in self.inter_pv_calls.items()}

    def affected_pvs(self) -> set[PvId]:
        return {PvId(p, v) for p, a in self.affected.items() for v in a.versions}

    def eps_map(self) -> dict[PvId, set[str]]:
        return {
            PvId(p, v): set(info.eps) for p, a in self.affected.items() for v, info in a.per_pv.items()
        }

    def pass_counts(self) -> dict[str, int]:
        if not self.pass_log and self.loaded_pass_counts is not None:
            return dict(self.loaded_pass_counts)
        counts: dict[str, int] = {}
        for rec in self.pass_log:
            counts[rec.project] = max(counts.get(rec.project, 0), rec.pass_no)
        return counts

    def to_json(self) -> dict[str, Any]:
        return {
            "schema_version": RESULT_SCHEMA_VERSION,
            "cve": self.cve_id,
            "root": self.root_project,
            "disclosed_at": format_timestamp(self.disclosed_at) if self.disclosed_at else None,
            "root_pvs": [pv.to_json() for pv in sorted(self.root_pvs)],
            "affected": affected_to_json(self.affected),
            "affected_edges": [
                {
                    "upstream": up.to_json(),
                    "downstream": down.to_json(),
                    "calls": sorted([list(c) for c in calls]),
                }
                for (up, down), calls in sorted(self.inter_pv_calls.items())
            ],
            "stage_stats": self.stage_stats,
            "pass_count": dict(sorted(self.pass_counts().items())),
            "passes": len(self.pass_log) or sum(self.pass_counts().values()),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "PropagationResult":
        if data.get("schema_version") != RESULT_SCHEMA_VERSION:
            raise ValueError(f"unsupported result schema {data.get('schema_version')!r}")
        calls = {
            (PvId.from_json(e["upstream"]), PvId.from_json(e["downstream"])): {tuple(c) for c in e["calls"]}
            for e in data["affected_edges"]
        }
        disclosed = data.get("disclosed_at")
        return cls(
            cve_id=data["cve"],
            root_project=data["root"],
            affected=affected_from_json(data["affected"]),
            inter_pv_calls=calls,
            stage_stats=data.get("stage_stats", {}),
            pass_log=[],
            root_pvs={PvId.from_json(p) for p in data.get("root_pvs", [])},
            warnings=list(data.get("warnings", [])),
            disclosed_at=parse_timestamp(disclosed) if disclosed else None,
            loaded_pass_counts={p: int(n) for p, n in data.get("pass_count", {}).items()},
        )


def affected_to_json(affected: dict[str, AffectedProject]) -> dict[str, Any]:
    return {
        p: {
            "versions": sorted(a.versions),
            "depth": a.depth,
            "per_pv": {
                v: {
                    "eps": sorted(info.eps),
                    "tfs": sorted(info.tfs),
                    "upstream": [u.to_json() for u in sorted(info.upstream)],
                }
                for v, info in sorted(a.per_pv.items())
            },
        }
        for p, a in sorted(affected.items())
    }


def affected_from_json(data: dict[str, Any]) -> dict[str, AffectedProject]:
    return {
        p: AffectedProject(
            versions=set(a["versions"]),
            depth=int(a["depth"]),
            per_pv={
                v: AffectedPv(set(i["eps"]), set(i["tfs"]), {PvId.from_json(u) for u in i["upstream"]})
                for v, i in a["per_pv"].items()
            },
        )
        for p, a in data.items()
    }


def load_result(path: str | Path) -> PropagationResult:
    return PropagationResult.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def write_result(result: PropagationResult, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result_path = out / "result.json"
    result_path.write_text(json.dumps(result.to_json(), indent=1) + "\n", encoding="utf-8")
    log_path = out / "passlog.jsonl"
    with log_path.open("w", encoding="utf-8") as fh:
        for rec in result.pass_log:
            fh.write(json.dumps(rec.to_json()) + "\n")
    return result_path, log_path


# -- worklist ordering helpers ------------------------------------------------

Picker = Callable[[Sequence[str]], int]


def fifo(worklist: Sequence[str]) -> int:
    return 0


def priority_order(order: Sequence[str]) -> Picker:
    """Pick the queued project that comes first in ``order`` (unknown ones last, FIFO)."""
    rank = {p: i for i, p in enumerate(order)}

    def pick(worklist: Sequence[str]) -> int:
        return min(range(len(worklist)), key=lambda i: (rank.get(worklist[i], len(rank)), i))

    return pick


def pass_bound(s: EcosystemSnapshot, g: PDepGraph) -> int:
    """Upper bound on total passes.

    Every pass after a project's first is triggered by an upstream pass that
    found new entry points, and each project can gain at most
    ``versions x functions`` entry points.
    """
    total = 0
    for p, pvs in s.index.items():
        fmax = max((len(s[pv].functions) for pv in pvs), default=0)
        total += 1 + len(g.edges.get(p, ())) * len(pvs) * max(fmax, 1)
    return total


# -- the engine ----------------------------------------------------------------


class Propagator:
    def __init__(
        self,
        s: EcosystemSnapshot,
        g: PDepGraph,
        v: VulnSpec,
        pick: Picker = fifo,
        jobs: int = 1,
        cache_dir: str | Path | None = None,
        on_pass: Callable[[PassRecord], None] | None = None,
    ):
        self.s = s
        self.g = g
        self.v = v
        self.pick = pick
        self.jobs = max(1, jobs)
        self.on_pass = on_pass
        self.scope = ScopeCache(s)
        self.warnings: list[str] = []
        self.state: dict[str, ProjectState] = {}
        # downstream project -> version -> callers recorded by upstream passes
        self.incoming: dict[str, dict[str, set[str]]] = {}
        self.worklist: list[str] = []
        self.pass_log: list[PassRecord] = []
        self.root_done = False
        self.root_seed = self._seed_root()
        self.cache = PropagationCache(cache_dir, self) if cache_dir is not None else None

    def _warn(self, msg: str) -> None:
        logger.warning(msg)
        self.warnings.append(msg)

    def _seed_root(self) -> dict[str, set[str]]:
        v, s = self.v, self.s
        if v.root_project not in s.index or v.root_project not in self.g:
            raise UnknownRootProject(v.root_project)
        present = set(s.versions(v.root_project))
        for ver in sorted(v.vulnerable_versions - present):
            self._warn(f"vulnerable version {v.root_project}@{ver} not in snapshot; dropped")
        seed: dict[str, set[str]] = {}
        for ver in sorted(v.vulnerable_versions & present):
            declared = s[PvId(v.root_project, ver)].function_index
            vfs = {f for f in v.vulnerable_functions if f in declared}
            if not vfs:
                self._warn(f"{v.root_project}@{ver} declares none of the vulnerable functions; skipped")
                continue
            seed[ver] = vfs
        if not seed:
            raise NoVulnerableVersionInSnapshot(f"{v.cve_id}: no usable vulnerable version of {v.root_project}")
        return seed

    def _enqueue(self, p: str) -> bool:
        if p in self.worklist:
            return False
        self.worklist.append(p)
        return True

    def run(self, max_passes: int | None = None, bound: int | None = None) -> PropagationResult:
        if self.cache is not None and self.cache.restore():
            logger.info("resumed from cache at pass %d", len(self.pass_log))
        elif not self.pass_log:
            self.worklist = [self.v.root_project]
        bound = bound if bound is not None else pass_bound(self.s, self.g)
        done_now = 0
        while self.worklist:
            if max_passes is not None and done_now >= max_passes:
                raise PropagationInterrupted(f"stopped after {done_now} passes; {len(self.worklist)} queued")
            if len(self.pass_log) >= bound:
                raise PassBoundExceeded(f"pass bound {bound} exceeded")
            item = self.worklist.pop(self.pick(self.worklist))
            rec = self._pass(item)
            done_now += 1
            if self.cache is not None:
                self.cache.commit(item)
            if self.on_pass is not None:
                self.on_pass(rec)
        if self.cache is not None:
            self.cache.mark_complete()
        return self.result()

    def _gather(self, item: str) -> dict[str, set[str]]:
        tfs: dict[str, set[str]] = {ver: set(c) for ver, c in self.incoming.get(item, {}).items()}
        if item == self.v.root_project and not self.root_done:
            for ver, vfs in self.root_seed.items():
                tfs.setdefault(ver, set()).update(vfs)
        return tfs

    def _pass(self, item: str) -> PassRecord:
        st = self.state.setdefault(item, ProjectState())
        st.pass_count += 1
        # steps 1-2: new target versions and functions
        tfs = self._gather(item)
        self.root_done = self.root_done or item == self.v.root_project
        d_tvs = set(tfs) - st.tvs
        st.tvs |= set(tfs)
        d_tfs: dict[str, set[str]] = {}
        for ver, fns in tfs.items():
            new = fns - st.tfs.get(ver, set())
            if new:
                d_tfs[ver] = new
                st.tfs.setdefault(ver, set()).update(new)

        # step 6 is computed up front: the new EPs per upstream PV drive CG pruning
        d_eps: dict[PvId, set[str]] = {}
        for ver in sorted(set(d_tfs) | d_tvs):
            pv = PvId(item, ver)
            old = st.eps.setdefault(pv, set())
            new = compute_eps(self.s, pv, d_tfs.get(ver, ()), self.scope) - old
            if new:
                d_eps[pv] = new
                old |= new
        changed_versions = d_tvs | set(d_tfs)

        # steps 3-8: per direct dependent, hierarchical pruning
        downs = [d for d in direct_downstream(self.g, item) if d != item]
        if self.jobs > 1 and len(downs) > 1:
            with ThreadPoolExecutor(self.jobs) as pool:
                outcomes = list(pool.map(lambda d: self._prune(d, item, changed_versions, d_eps), downs))
        else:
            outcomes = [self._prune(d, item, changed_versions, d_eps) for d in downs]

        stages: dict[str, set[Pair]] = {k: set() for k in STAGES}
        enqueued: list[str] = []
        for down, (sets, down_tfs, calls) in zip(downs, outcomes):
            for k in STAGES:
                stages[k] |= sets[k]
            for (dpv, upv), pairs in calls.items():
                st.inter_pv_calls.setdefault((upv, dpv), set()).update(pairs)
            # step 9: hand versions and callers to the dependent
            inbox = self.incoming.setdefault(down, {})
            for dpv, callers in down_tfs.items():
                inbox.setdefault(dpv.version, set()).update(callers)
            # step 10
            if sets["v3"] and self._enqueue(down):
                enqueued.append(down)
        for k in STAGES:
            st.stage_sets[k] |= stages[k]

        rec = PassRecord(
            project=item,
            pass_no=st.pass_count,
            seq=len(self.pass_log) + 1,
            d_tvs=len(d_tvs),
            d_tfs=sum(len(v) for v in d_tfs.values()),
            d_eps=sum(len(v) for v in d_eps.values()),
            stages=stages,
            enqueued=enqueued,
        )
        self.pass_log.append(rec)
        return rec

    def _prune(self, down: str, up: str, changed_versions: set[str], d_eps: dict[PvId, set[str]]):
        records = pv_dep_records(self.s, down, up)
        v1 = prune_version(records, changed_versions)
        v2 = prune_import(v1, self.s, self.scope)
        v3, tfs, calls = prune_cg(v2, d_eps, self.s, self.scope)
        return {"v0": set(records), "v1": v1, "v2": v2, "v3": v3}, tfs, calls

    # -- result assembly ------------------------------------------------------

    def result(self) -> PropagationResult:
        root = self.v.root_project
        inter: dict[tuple[PvId, PvId], set[CallPair]] = {}
        upstream_of: dict[PvId, set[PvId]] = {}
        for st in self.state.values():
            for (up, down), calls in st.inter_pv_calls.items():
                inter[(up, down)] = set(calls)
                upstream_of.setdefault(down, set()).add(up)
        depths = p_level_depths(root, ((up.project, down.project) for up, down in inter))

        affected: dict[str, AffectedProject] = {}
        for p in sorted(self.state):
            st = self.state[p]
            if not st.tvs:
                continue
            per_pv = {
                ver: AffectedPv(
                    eps=set(st.eps.get(PvId(p, ver), set())),
                    tfs=set(st.tfs.get(ver, set())),
                    upstream=upstream_of.get(PvId(p, ver), set()),
                )
                for ver in st.tvs
            }
            affected[p] = AffectedProject(set(st.tvs), depths.get(p, 0 if p == root else -1), per_pv)

        stage_sets = {k: set().union(*(st.stage_sets[k] for st in self.state.values())) for k in STAGES}
        return PropagationResult(
            cve_id=self.v.cve_id,
            root_project=root,
            affected=affected,
            inter_pv_calls=inter,
            stage_stats=stage_statistics(root, stage_sets),
            pass_log=list(self.pass_log),
            root_pvs={PvId(root, ver) for ver in self.root_seed},
            warnings=list(self.warnings),
            disclosed_at=self.v.disclosed_at,
        )


def p_level_depths(root: str, edges: Iterable[tuple[str, str]]) -> dict[str, int]:
    """Shortest hop count from ``root`` over (upstream, downstream) project edges."""
    adj: dict[str, set[str]] = {}
    for up, down in edges:
        if up != down:
            adj.setdefault(up, set()).add(down)
    depth = {root: 0}
    queue = deque([root])
    while queue:
        cur = queue.popleft()
        for nxt in sorted(adj.get(cur, ())):
            if nxt not in depth:
                depth[nxt] = depth[cur] + 1
                queue.append(nxt)
    return depth


def path_lengths(depths: dict[str, int], root: str) -> tuple[int, float]:
    hops = [d for p, d in depths.items() if p != root]
    if not hops:
        return 0, 0.0
    return max(hops), sum(hops) / len(hops)


def stage_statistics(root: str, stage_sets: dict[str, set[Pair]]) -> dict[str, dict[str, float]]:
    """Direct/transitive P and PV counts plus path lengths for each pruning stage."""
    stats = {}
    for stage in STAGES:
        pairs = stage_sets[stage]
        direct_pv = {down for down, up in pairs if up.project == root and down.project != root}
        all_pv = {down for down, _ in pairs if down.project != root}
        direct_p = {pv.project for pv in direct_pv}
        all_p = {pv.project for pv in all_pv}
        l_max, l_avg = path_lengths(p_level_depths(root, ((u.project, d.project) for d, u in pairs)), root)
        stats[stage] = {
            "p_dir": len(direct_p),
            "p_trans": len(all_p - direct_p),
            "pv_dir": len(direct_pv),
            "pv_trans": len(all_pv - direct_pv),
            "l_max": l_max,
            "l_avg": l_avg,
        }
    return stats


def propagate(
    s: EcosystemSnapshot,
    g: PDepGraph,
    v: VulnSpec,
    pick: Picker = fifo,
    jobs: int = 1,
    cache_dir: str | Path | None = None,
    max_passes: int | None = None,
    bound: int | None = None,
    on_pass: Callable[[PassRecord], None] | None = None,
) -> PropagationResult:
    return Propagator(s, g, v, pick=pick, jobs=jobs, cache_dir=cache_dir, on_pass=on_pass).run(
        max_passes=max_passes, bound=bound
    )


# -- cache persistence ------------------------------------------------------------


def snapshot_fingerprint(s: EcosystemSnapshot) -> str:
    return hashlib.sha256(s.dumps().encode("utf-8")).hexdigest()


def _pv_key(pv: PvId) -> list[str]:
    return [pv.project, pv.version]


class PropagationCache:
    """Directory-backed propagation state so an interrupted run can resume.

    Layout: ``tvs/``, ``tfs/``, ``eps/``, ``interpv/``, ``stages/`` hold one
    JSON file per project; ``worklist.json``, ``passlog.jsonl`` and
    ``meta.json`` hold the loop state.  Each pass is staged under
    ``.staging/`` and then moved into place; ``meta.json`` records a pending
    commit so a crash mid-move is finished on the next open.
    """

    STORES = ("tvs", "tfs", "eps", "interpv", "stages")

    def __init__(self, root: str | Path, engine: Propagator):
        self.root = Path(root)
        self.engine = engine
        self.fingerprint = snapshot_fingerprint(engine.s)

    # meta helpers
    def _meta_path(self) -> Path:
        return self.root / "meta.json"

    def _read_meta(self) -> dict[str, Any] | None:
        path = self._meta_path()
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def _write_atomic(self, path: Path, text: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)

    def _meta(self, **extra: Any) -> dict[str, Any]:
        e = self.engine
        return {
            "schema_version": RESULT_SCHEMA_VERSION,
            "cve": e.v.cve_id,
            "vuln": e.v.to_json(),
            "snapshot": self.fingerprint,
            "root_done": e.root_done,
            "passes": len(e.pass_log),
            "pending": None,
            "complete": False,
            **extra,
        }

    def _finish_pending(self, meta: dict[str, Any]) -> None:
        staging = self.root / ".staging"
        if staging.exists():
            for src in sorted(staging.rglob("*")):
                if src.is_file():
                    dst = self.root / src.relative_to(staging)
                    dst.parent.mkdir(parents=True, exist_ok=True)
                    os.replace(src, dst)
            shutil.rmtree(staging)
        log_path = self.root / "passlog.jsonl"
        lines = log_path.read_text(encoding="utf-8").splitlines() if log_path.exists() else []
        lines = lines[: meta["passes"] - 1] + [json.dumps(meta["pending_record"])]
        self._write_atomic(log_path, "".join(line + "\n" for line in lines))
        meta["pending"] = None
        meta.pop("pending_record", None)
        self._write_atomic(self._meta_path(), json.dumps(meta, indent=1))

    # serialization of one project's state
    def _project_files(self, p: str) -> dict[str, Any]:
        st = self.engine.state[p]
        name = encode_component(p) + ".json"
        return {
            f"tvs/{name}": sorted(st.tvs),
            f"tfs/{name}": {v: sorted(f) for v, f in sorted(st.tfs.items())},
            f"eps/{name}": {pv.version: sorted(f) for pv, f in sorted(st.eps.items())},
            f"interpv/{name}": [
                {"upstream": _pv_key(up), "downstream": _pv_key(down), "calls": sorted(map(list, c))}
                for (up, down), c in sorted(st.inter_pv_calls.items())
            ],
            f"stages/{name}": {
                "project": p,
                "pass_count": st.pass_count,
                **{k: sorted([_pv_key(d), _pv_key(u)] for d, u in st.stage_sets[k]) for k in STAGES},
            },
        }

    def commit(self, item: str) -> None:
        e = self.engine
        staging = self.root / ".staging"
        if staging.exists():
            shutil.rmtree(staging)  # leftovers of a pass that never committed
        files = self._project_files(item)
        files["worklist.json"] = list(e.worklist)
        for rel, data in files.items():
            self._write_atomic(staging / rel, json.dumps(data, sort_keys=True))
        meta = self._meta(pending=len(e.pass_log), pending_record=e.pass_log[-1].to_json())
        self._write_atomic(self._meta_path(), json.dumps(meta, indent=1))
        self._finish_pending(meta)

    def mark_complete(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self._write_atomic(self._meta_path(), json.dumps(self._meta(complete=True), indent=1))

    def restore(self) -> bool:
        """Load cached state into the engine; False when there is nothing to resume."""
        meta = self._read_meta()
        if meta is None:
            return False
        if meta.get("snapshot") != self.fingerprint or meta.get("vuln") != self.engine.v.to_json():
            raise AnalysisError(f"cache {self.root} belongs to a different snapshot or vulnerability")
        if meta.get("pending") is not None:
            self._finish_pending(meta)
        elif (self.root / ".staging").exists():
            shutil.rmtree(self.root / ".staging")
        e = self.engine
        e.root_done = bool(meta["root_done"])
        log_path = self.root / "passlog.jsonl"
        lines = log_path.read_text(encoding="utf-8").splitlines() if log_path.exists() else []
        lines = lines[: meta["passes"]]
        e.pass_log = [
            PassRecord(
                project=r["project"],
                pass_no=r["pass"],
                seq=r["seq"],
                d_tvs=r["d_tvs"],
                d_tfs=r["d_tfs"],
                d_eps=r["d_eps"],
                stages={k: set() for k in STAGES},  # only the sizes survive a resume
                enqueued=r["enqueued"],
                logged_sizes={k: r[k] for k in STAGES},
            )
            for r in map(json.loads, lines)
        ]
        self._write_atomic(log_path, "".join(line + "\n" for line in lines))
        for path in sorted((self.root / "stages").glob("*.json")):
            stages = json.loads(path.read_text(encoding="utf-8"))
            p = stages["project"]
            name = path.name
            st = ProjectState(pass_count=stages["pass_count"])
            st.stage_sets = {
                k: {(PvId(*d), PvId(*u)) for d, u in stages[k]} for k in STAGES
            }
            st.tvs = set(json.loads((self.root / "tvs" / name).read_text(encoding="utf-8")))
            st.tfs = {
                v: set(f) for v, f in json.loads((self.root / "tfs" / name).read_text(encoding="utf-8")).items()
            }
            st.eps = {
                PvId(p, v): set(f)
                for v, f in json.loads((self.root / "eps" / name).read_text(encoding="utf-8")).items()
            }
            for rec in json.loads((self.root / "interpv" / name).read_text(encoding="utf-8")):
                up, down = PvId(*rec["upstream"]), PvId(*rec["downstream"])
                st.inter_pv_calls[(up, down)] = {tuple(c) for c in rec["calls"]}
                e.incoming.setdefault(down.project, {}).setdefault(down.version, set()).update(
                    caller for caller, _ in rec["calls"]
                )
            e.state[p] = st
        e.worklist = json.loads((self.root / "worklist.json").read_text(encoding="utf-8"))
        return True
