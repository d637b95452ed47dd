"""Seeded synthetic ecosystems with a planted vulnerability and known ground truth.

Randomness comes from SplitMix64 (Steele, Lea and Flood 2014) so the same
seed produces the same ecosystem in any implementation of this generator:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)            (all arithmetic mod 2**64)

``uniform()`` is ``(next() >> 11) * 2**-53`` and ``below(n)`` is ``next() % n``.
Decisions are drawn in the exact order the code below makes them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any

from .propagation import VulnSpec
from .snapshot import (
    INTERNAL,
    PUBLIC,
    CallEdge,
    EcosystemSnapshot,
    FunctionDecl,
    PvId,
    PvManifest,
    dump_snapshot,
    format_timestamp,
)

MASK64 = (1 << 64) - 1
EPOCH = datetime(2020, 1, 1, tzinfo=timezone.utc)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        return (self.next() >> 11) * (1.0 / (1 << 53))

    def chance(self, p: float) -> bool:
        return p > 0 and self.uniform() < p

    def below(self, n: int) -> int:
        return self.next() % n

    def choice(self, seq):
        return seq[self.below(len(seq))]


@dataclass
class GenConfig:
    seed: int = 0
    n_projects: int = 10
    versions_per_project: tuple[int, int] = (1, 3)
    dep_density: float = 0.2
    cycle_probability: float = 0.0
    fat_package_probability: float = 0.0
    call_through_probability: float = 0.6
    release_span_days: int = 720
    import_probability: float = 0.8
    functions_per_project: int = 3

    def __post_init__(self) -> None:
        self.versions_per_project = tuple(self.versions_per_project)
        lo, hi = self.versions_per_project
        if self.n_projects < 1:
            raise ValueError("n_projects must be >= 1")
        if not 1 <= lo <= hi:
            raise ValueError(f"bad versions_per_project range {self.versions_per_project}")
        for name in (
            "dep_density",
            "cycle_probability",
            "fat_package_probability",
            "call_through_probability",
            "import_probability",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if self.functions_per_project < 1:
            raise ValueError("functions_per_project must be >= 1")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "GenConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown generator options: {sorted(unknown)}")
        return cls(**data)


def load_config(path: str | Path) -> GenConfig:
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(path.read_text(encoding="utf-8"))
        data = data.get("generator", data)
    else:
        data = json.loads(path.read_text(encoding="utf-8"))
    return GenConfig.from_dict(data)


@dataclass
class _Proj:
    name: str
    versions: list[str]
    times: list[datetime]
    api: list[str]  # public entry functions, api[i] -> core[i]
    core: list[str]  # internal functions
    file: str
    api_file: str
    deps: list[int] = field(default_factory=list)  # upstream project indices


@dataclass
class Generated:
    snapshot: EcosystemSnapshot
    vuln: VulnSpec
    truth: dict[str, Any]


def _project_name(i: int) -> str:
    return f"org.synth:p{i:03d}"


def generate(c: GenConfig) -> Generated:
    rng = SplitMix64(c.seed)
    n = c.n_projects
    lo, hi = c.versions_per_project
    k = c.functions_per_project

    projects: list[_Proj] = []
    for i in range(n):
        n_versions = lo + rng.below(hi - lo + 1)
        start = rng.below(max(c.release_span_days // 2, 1))
        times = []
        t = start
        for _ in range(n_versions):
            times.append(EPOCH + timedelta(days=t))
            t += 1 + rng.below(max(c.release_span_days // max(n_versions, 1), 1))
        short = f"p{i:03d}"
        projects.append(
            _Proj(
                name=_project_name(i),
                versions=[f"1.{j}" for j in range(n_versions)],
                times=times,
                api=[f"{short}.Api.call{j}" for j in range(k)],
                core=[f"{short}.Core.work{j}" for j in range(k)],
                file=f"{short}/Core.src",
                api_file=f"{short}/Api.src",
            )
        )

    # P-level edges: project i may depend on any j < i; index 1 always depends on the root
    for i in range(1, n):
        for j in range(i):
            if (i == 1 and j == 0) or rng.chance(c.dep_density):
                projects[i].deps.append(j)
    back_edges: list[tuple[int, int]] = []
    for i in range(1, n):
        for j in list(projects[i].deps):
            if rng.chance(c.cycle_probability):
                back_edges.append((j, i))
    for j, i in back_edges:
        if i not in projects[j].deps:
            projects[j].deps.append(i)

    # PV-level wiring
    pv_deps: dict[PvId, list[PvId]] = {}
    pv_imports: dict[PvId, set[str]] = {}
    pv_calls: dict[PvId, list[CallEdge]] = {}
    pv_files: dict[PvId, set[str]] = {}
    wired: list[dict[str, str]] = []

    for proj in projects:
        for ver in proj.versions:
            pv = PvId(proj.name, ver)
            files = {proj.file, proj.api_file}
            calls: list[CallEdge] = []
            # intra-PV structure: api[j] -> core[j] -> core[j+1] (some links vary by version)
            for j in range(k):
                calls.append(CallEdge(proj.api[j], proj.core[j]))
                if j + 1 < k and rng.chance(0.5):
                    calls.append(CallEdge(proj.core[j], proj.core[j + 1]))
            deps: list[PvId] = []
            imports: set[str] = set()
            for j in proj.deps:
                up = projects[j]
                if rng.chance(0.25):
                    continue  # this version does not carry the dependency
                uv = rng.below(len(up.versions))
                upv = PvId(up.name, up.versions[uv])
                deps.append(upv)
                if not rng.chance(c.import_probability):
                    continue
                imports.add(up.api_file if rng.chance(0.8) else up.file)
                if rng.chance(c.call_through_probability):
                    caller = proj.core[rng.below(k)]
                    callee = up.api[rng.below(k)]
                    calls.append(CallEdge(caller, callee))
                    wired.append({"downstream": str(pv), "upstream": str(upv), "caller": caller, "callee": callee})
            pv_deps[pv] = deps
            pv_imports[pv] = imports
            pv_calls[pv] = calls
            pv_files[pv] = files

    # fat packages bundle the files (and public functions) of their dependency closure,
    # skipping projects that themselves depend on the fat package's project; bundling
    # those would push a project's own files into its own Down set through a cycle
    depends_on: dict[str, set[str]] = {}
    for proj in projects:
        seen: set[str] = set()
        todo = list(proj.deps)
        while todo:
            j = todo.pop()
            if projects[j].name not in seen:
                seen.add(projects[j].name)
                todo.extend(projects[j].deps)
        depends_on[proj.name] = seen
    manifests_fns: dict[PvId, list[FunctionDecl]] = {}
    by_name = {p.name: p for p in projects}
    for proj in projects:
        for ver in proj.versions:
            pv = PvId(proj.name, ver)
            fns = [FunctionDecl(f, proj.api_file, PUBLIC) for f in proj.api]
            fns += [FunctionDecl(f, proj.file, INTERNAL) for f in proj.core]
            if pv_deps[pv] and rng.chance(c.fat_package_probability):
                closure: list[PvId] = []
                todo = list(pv_deps[pv])
                while todo:
                    d = todo.pop(0)
                    if d in closure or d.project == proj.name:
                        continue
                    closure.append(d)
                    todo.extend(pv_deps[d])
                declared = {f.fqn for f in fns}
                for d in closure:
                    if proj.name in depends_on[d.project]:
                        continue
                    bundled = by_name[d.project]
                    pv_files[pv] |= {bundled.file, bundled.api_file}
                    for fqn in bundled.api:
                        if fqn not in declared:
                            fns.append(FunctionDecl(fqn, bundled.api_file, PUBLIC))
                            declared.add(fqn)
            manifests_fns[pv] = fns

    manifests = []
    for proj in projects:
        for ver, ts in zip(proj.versions, proj.times):
            pv = PvId(proj.name, ver)
            manifests.append(
                PvManifest(
                    id=pv,
                    released_at=ts,
                    deps=tuple(pv_deps[pv]),
                    files=frozenset(pv_files[pv]),
                    imports=frozenset(pv_imports[pv]),
                    functions=tuple(manifests_fns[pv]),
                    calls=tuple(pv_calls[pv]),
                )
            )
    snapshot = EcosystemSnapshot(f"synth-{c.seed}", manifests)

    root = projects[0]
    n_vuln = max(1, len(root.versions) - 1) if len(root.versions) > 1 else 1
    vuln = VulnSpec(
        cve_id=f"CVE-SYNTH-{c.seed}",
        root_project=root.name,
        vulnerable_versions=frozenset(root.versions[:n_vuln]),
        vulnerable_functions=frozenset({root.core[k - 1]}),
        disclosed_at=root.times[0],
    )
    truth = _ground_truth(snapshot, vuln, wired, c)
    return Generated(snapshot, vuln, truth)


def _ground_truth(s: EcosystemSnapshot, v: VulnSpec, wired: list[dict[str, str]], c: GenConfig) -> dict[str, Any]:
    """Affected PVs implied by the planted call wiring.

    A wire (caller in D -> api in U) carries the vulnerability when U is
    affected, the api function reaches a tainted function inside U, D really
    imports U's own files, and the caller is D's own code.
    """
    def own_files(pv: PvId) -> set[str]:
        prefix = pv.project.split(":")[1]
        return {f for f in s[pv].files if f.startswith(prefix + "/")}

    tainted: dict[PvId, set[str]] = {}
    for ver in v.vulnerable_versions:
        tainted[PvId(v.root_project, ver)] = set(v.vulnerable_functions)

    def close(pv: PvId) -> set[str]:
        # internal call chains are forward-only, so a few sweeps reach the fixpoint
        m = s[pv]
        hot = set(tainted[pv])
        changed = True
        while changed:
            changed = False
            for e in m.calls:
                if e.callee in hot and e.caller not in hot and e.caller in m.function_index:
                    hot.add(e.caller)
                    changed = True
        return hot

    changed = True
    while changed:
        changed = False
        for pv in list(tainted):
            tainted[pv] = close(pv)
        for w in wired:
            down = _parse_pv(w["downstream"])
            up = _parse_pv(w["upstream"])
            if up not in tainted or w["callee"] not in tainted[up]:
                continue
            if not s[down].imports & own_files(up):
                continue
            if w["caller"] not in tainted.setdefault(down, set()):
                tainted[down].add(w["caller"])
                changed = True

    affected = sorted(str(pv) for pv in tainted)
    return {
        "schema_version": 1,
        "seed": c.seed,
        "config": {**asdict(c), "versions_per_project": list(c.versions_per_project)},
        "root": v.root_project,
        "affected": affected,
        "wired_calls": wired,
    }


def _parse_pv(text: str) -> PvId:
    project, _, version = text.rpartition("@")
    return PvId(project, version)


def write_generated(gen: Generated, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    dump_snapshot(gen.snapshot, out)
    (out / "vuln.json").write_text(json.dumps(gen.vuln.to_json(), indent=1) + "\n", encoding="utf-8")
    (out / "truth.json").write_text(json.dumps(gen.truth, indent=1) + "\n", encoding="utf-8")
    return out


def disclosure_string(gen: Generated) -> str:
    return format_timestamp(gen.vuln.disclosed_at) if gen.vuln.disclosed_at else ""
