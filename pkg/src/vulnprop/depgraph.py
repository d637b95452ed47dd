"""Project-level dependency graph aggregated from PV dependency records."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .snapshot import EcosystemSnapshot, PvId

PGRAPH_SCHEMA_VERSION = 1


@dataclass
class PDepGraph:
    nodes: list[str] = field(default_factory=list)
    # upstream -> downstream projects (downstream depends on upstream)
    edges: dict[str, set[str]] = field(default_factory=dict)
    edge_support: dict[tuple[str, str], int] = field(default_factory=dict)
    # P-level self-loops are kept as metadata only; never traversed
    self_support: dict[str, int] = field(default_factory=dict)

    def __contains__(self, project: object) -> bool:
        return project in self._node_set

    @property
    def _node_set(self) -> set[str]:
        return set(self.nodes)

    def edge_count(self) -> int:
        return sum(len(v) for v in self.edges.values())

    def to_json(self) -> dict[str, Any]:
        return {
            "schema_version": PGRAPH_SCHEMA_VERSION,
            "nodes": list(self.nodes),
            "edges": [
                {"upstream": up, "downstream": down, "support": self.edge_support[(up, down)]}
                for up in sorted(self.edges)
                for down in sorted(self.edges[up])
            ],
            "self_loops": [
                {"project": p, "support": n} for p, n in sorted(self.self_support.items())
            ],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "PDepGraph":
        g = cls(nodes=sorted(data["nodes"]))
        for e in data["edges"]:
            g.edges.setdefault(e["upstream"], set()).add(e["downstream"])
            g.edge_support[(e["upstream"], e["downstream"])] = int(e["support"])
        for loop in data.get("self_loops", []):
            g.self_support[loop["project"]] = int(loop["support"])
        return g


def build_p_graph(s: EcosystemSnapshot) -> PDepGraph:
    g = PDepGraph(nodes=sorted(s.index))
    support: dict[tuple[str, str], int] = {}
    for pv in s.pvs:
        # resolved_deps is duplicate-free, so each (down PV, up PV) pair counts once
        for dep in s.resolved_deps(pv):
            if dep.project == pv.project:
                g.self_support[pv.project] = g.self_support.get(pv.project, 0) + 1
                continue
            key = (dep.project, pv.project)
            support[key] = support.get(key, 0) + 1
    for up, down in sorted(support):
        g.edges.setdefault(up, set()).add(down)
    g.edge_support = dict(sorted(support.items()))
    return g


def direct_downstream(g: PDepGraph, p: str) -> list[str]:
    return sorted(g.edges.get(p, ()))


def pv_dep_records(s: EcosystemSnapshot, down: str, up: str) -> list[tuple[PvId, PvId]]:
    """All (downstream PV, upstream PV) pairs where a PV of ``down`` declares a PV of ``up``."""
    records = []
    for dpv in s.index.get(down, []):
        for dep in s.resolved_deps(dpv):
            if dep.project == up:
                records.append((dpv, dep))
    return sorted(records)


def write_pgraph(g: PDepGraph, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(g.to_json(), indent=1) + "\n", encoding="utf-8")
    return path


def read_pgraph(path: str | Path) -> PDepGraph:
    return PDepGraph.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
