"""Ecosystem snapshots: on-disk format, loading, validation and serialization.

A snapshot directory looks like::

    index.json                          [{"project", "version", "released_at"}]
    pv/<project>/<version>/deps.json    [{"project", "version"}]
    pv/<project>/<version>/files.json   ["file id", ...]
    pv/<project>/<version>/imports.json ["file id", ...]
    pv/<project>/<version>/functions.json [{"fqn", "file", "visibility"}]
    pv/<project>/<version>/calls.json   [{"caller", "callee"}]

Project and version path components have ``%``, ``/`` and ``:`` percent-encoded.
Missing per-PV files are read as empty lists.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable

logger = logging.getLogger(__name__)

PUBLIC = "public"
INTERNAL = "internal"
_VISIBILITIES = (PUBLIC, INTERNAL)


class SnapshotError(Exception):
    """Base class for snapshot loading failures."""


class MissingIndex(SnapshotError):
    pass


class MalformedRecord(SnapshotError):
    def __init__(self, path: Path | str, message: str, line: int | None = None):
        self.path = str(path)
        self.line = line
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class DuplicatePv(SnapshotError):
    def __init__(self, pv: "PvId"):
        self.pv = pv
        super().__init__(f"duplicate project-version {pv}")


@dataclass(frozen=True, order=True)
class PvId:
    project: str
    version: str

    def __str__(self) -> str:
        return f"{self.project}@{self.version}"

    def to_json(self) -> dict[str, str]:
        return {"project": self.project, "version": self.version}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "PvId":
        return cls(str(obj["project"]), str(obj["version"]))


@dataclass(frozen=True)
class FunctionDecl:
    fqn: str
    file: str
    visibility: str = PUBLIC

    @property
    def is_public(self) -> bool:
        return self.visibility == PUBLIC


@dataclass(frozen=True)
class CallEdge:
    caller: str
    callee: str


@dataclass(frozen=True)
class PvManifest:
    id: PvId
    released_at: datetime | None
    deps: tuple[PvId, ...] = ()
    files: frozenset[str] = frozenset()
    imports: frozenset[str] = frozenset()
    functions: tuple[FunctionDecl, ...] = ()
    calls: tuple[CallEdge, ...] = ()

    @cached_property
    def function_index(self) -> dict[str, FunctionDecl]:
        return {f.fqn: f for f in self.functions}

    @cached_property
    def public_fqns(self) -> frozenset[str]:
        return frozenset(f.fqn for f in self.functions if f.is_public)


@dataclass(frozen=True)
class Finding:
    code: str
    fatal: bool
    subject: str
    detail: str = ""

    def to_json(self) -> dict[str, Any]:
        return {
            "code": self.code,
            "severity": "fatal" if self.fatal else "warning",
            "subject": self.subject,
            "detail": self.detail,
        }


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def fatal(self) -> list[Finding]:
        return [f for f in self.findings if f.fatal]

    @property
    def warnings(self) -> list[Finding]:
        return [f for f in self.findings if not f.fatal]

    @property
    def usable(self) -> bool:
        return not self.fatal

    def codes(self) -> set[str]:
        return {f.code for f in self.findings}

    def to_json(self) -> dict[str, Any]:
        return {
            "usable": self.usable,
            "fatal": len(self.fatal),
            "warnings": len(self.warnings),
            "findings": [f.to_json() for f in self.findings],
        }


class EcosystemSnapshot:
    """Immutable, indexed view of an ecosystem."""

    def __init__(self, name: str, manifests: Iterable[PvManifest]):
        self.name = name
        pvs: dict[PvId, PvManifest] = {}
        for m in manifests:
            if m.id in pvs:
                raise DuplicatePv(m.id)
            pvs[m.id] = m
        self.pvs: dict[PvId, PvManifest] = {k: pvs[k] for k in sorted(pvs)}
        index: dict[str, list[PvId]] = {}
        for pv in self.pvs:
            index.setdefault(pv.project, []).append(pv)
        for project, ids in index.items():
            ids.sort(key=lambda p: (_ts_key(self.pvs[p].released_at), p.version))
        self.index: dict[str, list[PvId]] = {p: index[p] for p in sorted(index)}

    @property
    def total_p(self) -> int:
        return len(self.index)

    @property
    def total_pv(self) -> int:
        return len(self.pvs)

    def __contains__(self, pv: object) -> bool:
        return pv in self.pvs

    def __getitem__(self, pv: PvId) -> PvManifest:
        return self.pvs[pv]

    def versions(self, project: str) -> list[str]:
        return [pv.version for pv in self.index.get(project, [])]

    def resolved_deps(self, pv: PvId) -> list[PvId]:
        """Declared deps of ``pv`` that exist in the snapshot, duplicate-free and sorted."""
        return sorted({d for d in self.pvs[pv].deps if d in self.pvs})

    @cached_property
    def dependents(self) -> dict[PvId, tuple[PvId, ...]]:
        """Reverse PV-level dependency index (upstream -> downstream PVs)."""
        rev: dict[PvId, set[PvId]] = {}
        for pv, m in self.pvs.items():
            for d in m.deps:
                if d in self.pvs:
                    rev.setdefault(d, set()).add(pv)
        return {k: tuple(sorted(v)) for k, v in sorted(rev.items())}

    def earliest_release(self) -> datetime | None:
        stamps = [m.released_at for m in self.pvs.values() if m.released_at]
        return min(stamps) if stamps else None

    def latest_release(self) -> datetime | None:
        stamps = [m.released_at for m in self.pvs.values() if m.released_at]
        return max(stamps) if stamps else None

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "pvs": [manifest_to_json(self.pvs[pv]) for pv in self.pvs],
        }

    def dumps(self) -> str:
        """Canonical serialization; equal snapshots give identical strings."""
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))


def _ts_key(ts: datetime | None) -> float:
    return ts.timestamp() if ts is not None else float("-inf")


# -- timestamps and path encoding -------------------------------------------


def parse_timestamp(value: str) -> datetime:
    """Parse an RFC 3339 timestamp into an aware UTC datetime."""
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def encode_component(text: str) -> str:
    return text.replace("%", "%25").replace("/", "%2F").replace(":", "%3A")


def pv_dir(root: Path, pv: PvId) -> Path:
    return root / "pv" / encode_component(pv.project) / encode_component(pv.version)


# -- loading ----------------------------------------------------------------


def _read_json(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedRecord(path, f"not UTF-8: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedRecord(path, exc.msg, exc.lineno) from exc


def _read_array(path: Path, required: bool = False) -> list[Any]:
    if not path.exists():
        if required:
            raise MissingIndex(f"{path} not found")
        return []
    data = _read_json(path)
    if not isinstance(data, list):
        raise MalformedRecord(path, "expected a JSON array")
    return data


def _field(path: Path, i: int, rec: Any, key: str) -> str:
    if not isinstance(rec, dict) or not isinstance(rec.get(key), str) or not rec[key]:
        raise MalformedRecord(path, f"record {i}: missing or empty string field {key!r}")
    return rec[key]


def load_snapshot(root_path: str | Path, name: str | None = None) -> EcosystemSnapshot:
    root = Path(root_path)
    index_path = root / "index.json"
    if not index_path.is_file():
        raise MissingIndex(f"{index_path} not found")
    entries = _read_array(index_path, required=True)

    manifests: list[PvManifest] = []
    seen: set[PvId] = set()
    for i, rec in enumerate(entries):
        pv = PvId(_field(index_path, i, rec, "project"), _field(index_path, i, rec, "version"))
        if pv in seen:
            raise DuplicatePv(pv)
        seen.add(pv)
        raw_ts = rec.get("released_at")
        released_at = None
        if raw_ts is not None:
            try:
                released_at = parse_timestamp(str(raw_ts))
            except ValueError as exc:
                raise MalformedRecord(index_path, f"record {i}: bad timestamp {raw_ts!r}") from exc
        manifests.append(_load_manifest(root, pv, released_at))
    return EcosystemSnapshot(name or root.resolve().name, manifests)


def _load_manifest(root: Path, pv: PvId, released_at: datetime | None) -> PvManifest:
    d = pv_dir(root, pv)
    deps_path = d / "deps.json"
    deps = []
    for i, rec in enumerate(_read_array(deps_path)):
        dep = PvId(_field(deps_path, i, rec, "project"), _field(deps_path, i, rec, "version"))
        if dep == pv:
            raise MalformedRecord(deps_path, f"record {i}: self-dependency on {pv}")
        deps.append(dep)

    def strings(fname: str) -> frozenset[str]:
        path = d / fname
        items = _read_array(path)
        for i, item in enumerate(items):
            if not isinstance(item, str):
                raise MalformedRecord(path, f"entry {i}: expected string")
        return frozenset(items)

    fn_path = d / "functions.json"
    functions = []
    for i, rec in enumerate(_read_array(fn_path)):
        vis = rec.get("visibility", PUBLIC) if isinstance(rec, dict) else None
        if vis not in _VISIBILITIES:
            raise MalformedRecord(fn_path, f"record {i}: bad visibility {vis!r}")
        functions.append(
            FunctionDecl(_field(fn_path, i, rec, "fqn"), _field(fn_path, i, rec, "file"), vis)
        )

    calls_path = d / "calls.json"
    calls = [
        CallEdge(_field(calls_path, i, rec, "caller"), _field(calls_path, i, rec, "callee"))
        for i, rec in enumerate(_read_array(calls_path))
    ]
    return PvManifest(
        id=pv,
        released_at=released_at,
        deps=tuple(deps),
        files=strings("files.json"),
        imports=strings("imports.json"),
        functions=tuple(functions),
        calls=tuple(calls),
    )


# -- writing ----------------------------------------------------------------


def manifest_to_json(m: PvManifest) -> dict[str, Any]:
    return {
        "project": m.id.project,
        "version": m.id.version,
        "released_at": format_timestamp(m.released_at) if m.released_at else None,
        "deps": [d.to_json() for d in m.deps],
        "files": sorted(m.files),
        "imports": sorted(m.imports),
        "functions": [
            {"fqn": f.fqn, "file": f.file, "visibility": f.visibility} for f in m.functions
        ],
        "calls": [{"caller": c.caller, "callee": c.callee} for c in m.calls],
    }


def _write(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def dump_snapshot(s: EcosystemSnapshot, root_path: str | Path) -> Path:
    """Write ``s`` in the on-disk layout; inverse of :func:`load_snapshot`."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    for pv, m in s.pvs.items():
        index.append(
            {
                "project": pv.project,
                "version": pv.version,
                "released_at": format_timestamp(m.released_at) if m.released_at else None,
            }
        )
        rec = manifest_to_json(m)
        d = pv_dir(root, pv)
        for key in ("deps", "files", "imports", "functions", "calls"):
            _write(d / f"{key}.json", rec[key])
    _write(root / "index.json", index)
    return root


# -- validation -------------------------------------------------------------


def validate_snapshot(s: EcosystemSnapshot) -> ValidationReport:
    """Check the cross-record invariants the loader cannot check alone."""
    report = ValidationReport()
    add = report.findings.append
    for pv, m in s.pvs.items():
        subject = str(pv)
        if m.released_at is None:
            add(Finding("missing_timestamp", True, subject, "released_at is required"))
        for dep in m.deps:
            if dep == pv:
                add(Finding("self_dependency", True, subject))
            elif dep not in s.pvs:
                add(Finding("unresolved_dep", False, subject, f"dependency {dep} not in index"))
        seen: set[str] = set()
        for f in m.functions:
            if f.fqn in seen:
                add(Finding("duplicate_function", True, subject, f.fqn))
            seen.add(f.fqn)
            if f.file not in m.files:
                add(Finding("unknown_file", True, subject, f"{f.fqn} declared in {f.file}"))
        upstream_public: set[str] = set()
        for dep in m.deps:
            if dep in s.pvs:
                upstream_public |= s.pvs[dep].public_fqns
        for c in m.calls:
            if c.caller not in m.function_index:
                add(Finding("dangling_caller", True, subject, f"{c.caller} -> {c.callee}"))
            if c.callee not in m.function_index and c.callee not in upstream_public:
                add(Finding("dangling_callee", False, subject, f"{c.caller} -> {c.callee}"))
    return report
