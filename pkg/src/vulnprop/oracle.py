"""Brute-force reference for propagation results.

Materializes every (PV, function) node of the ecosystem, wires intra-PV call
edges and resolvable cross-PV call edges, then walks backwards from the
vulnerable functions.  Nothing here is shared with the worklist engine.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Any

from .snapshot import EcosystemSnapshot, PvId

DEFAULT_NODE_CAP = 10**6

Node = tuple[PvId, str]


class GraphTooLarge(Exception):
    pass


def _own_files(s: EcosystemSnapshot) -> dict[PvId, set[str]]:
    out = {}
    for pv, m in s.pvs.items():
        bundled: set[str] = set()
        visited = {pv}
        todo = [d for d in m.deps if d in s.pvs]
        while todo:
            dep = todo.pop()
            if dep in visited or dep.project == pv.project:
                continue
            visited.add(dep)
            bundled.update(s.pvs[dep].files)
            todo.extend(d for d in s.pvs[dep].deps if d in s.pvs)
        out[pv] = set(m.files) - bundled
        # NB: files listed by every version of pv's own project stay intrinsic
    return out


class OracleResult:
    def __init__(self, affected: set[PvId], eps: dict[PvId, set[str]], calls: dict[tuple[PvId, PvId], set[tuple[str, str]]], root: str):
        self.affected = affected
        self.eps = eps
        self.inter_pv_calls = calls
        self.root = root

    def depths(self) -> dict[str, int]:
        adj = defaultdict(set)
        for up, down in self.inter_pv_calls:
            if up.project != down.project:
                adj[up.project].add(down.project)
        depth = {self.root: 0}
        frontier = [self.root]
        while frontier:
            nxt = []
            for p in frontier:
                for q in adj[p]:
                    if q not in depth:
                        depth[q] = depth[p] + 1
                        nxt.append(q)
            frontier = nxt
        return depth

    def to_json(self) -> dict[str, Any]:
        upstream = defaultdict(set)
        for up, down in self.inter_pv_calls:
            upstream[down].add(up)
        depth = self.depths()
        by_project: dict[str, dict[str, Any]] = {}
        for pv in sorted(self.affected):
            entry = by_project.setdefault(
                pv.project, {"versions": [], "depth": depth.get(pv.project, -1), "per_pv": {}}
            )
            entry["versions"].append(pv.version)
            entry["per_pv"][pv.version] = {
                "eps": sorted(self.eps.get(pv, ())),
                "upstream": [u.to_json() for u in sorted(upstream[pv])],
            }
        return {"schema_version": 1, "affected": by_project}


def oracle_propagate(s: EcosystemSnapshot, v, node_cap: int = DEFAULT_NODE_CAP) -> OracleResult:
    """Affected PVs and entry points by global backward reachability from the VFs."""
    n_nodes = sum(len(m.functions) for m in s.pvs.values())
    if n_nodes > node_cap:
        raise GraphTooLarge(f"{n_nodes} function nodes exceed the cap of {node_cap}")

    own = _own_files(s)
    decl = {pv: {f.fqn: f for f in m.functions} for pv, m in s.pvs.items()}

    def intrinsic(pv: PvId, fqn: str) -> bool:
        return decl[pv][fqn].file in own[pv]

    def entry_point(pv: PvId, fqn: str) -> bool:
        f = decl[pv].get(fqn)
        return f is not None and f.visibility == "public" and f.file in own[pv]

    # reverse adjacency: callee node -> caller nodes
    rev: dict[Node, set[Node]] = defaultdict(set)
    cross: list[tuple[Node, Node]] = []
    for pv, m in s.pvs.items():
        linked = []
        for dep in set(m.deps):
            if dep in s.pvs and dep.project != pv.project and m.imports & own[dep]:
                linked.append(dep)
        for c in m.calls:
            if c.caller not in decl[pv]:
                continue
            if c.callee in decl[pv]:
                rev[(pv, c.callee)].add((pv, c.caller))
            if not intrinsic(pv, c.caller):
                continue
            for dep in linked:
                if entry_point(dep, c.callee):
                    rev[(dep, c.callee)].add((pv, c.caller))
                    cross.append(((pv, c.caller), (dep, c.callee)))

    roots = set()
    for ver in v.vulnerable_versions:
        pv = PvId(v.root_project, ver)
        if pv in s.pvs:
            for vf in v.vulnerable_functions:
                if vf in decl[pv]:
                    roots.add((pv, vf))

    reach = set(roots)
    stack = list(roots)
    while stack:
        node = stack.pop()
        for caller in rev[node]:
            if caller not in reach:
                reach.add(caller)
                stack.append(caller)

    affected = {pv for pv, _ in roots}
    calls: dict[tuple[PvId, PvId], set[tuple[str, str]]] = defaultdict(set)
    for (dpv, caller), (upv, callee) in cross:
        if (upv, callee) in reach:
            affected.add(dpv)
            calls[(upv, dpv)].add((caller, callee))

    eps = {pv: {fqn for (p, fqn) in reach if p == pv and entry_point(pv, fqn)} for pv in affected}
    return OracleResult(affected, eps, dict(calls), v.root_project)


def write_oracle(result: OracleResult, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(result.to_json(), indent=1) + "\n", encoding="utf-8")
    return path
