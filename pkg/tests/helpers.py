"""Small builders for hand-written snapshot fixtures."""

from __future__ import annotations

from datetime import datetime, timedelta, timezone
from typing import Iterable, Sequence

from vulnprop.snapshot import CallEdge, EcosystemSnapshot, FunctionDecl, PvId, PvManifest

T0 = datetime(2021, 6, 1, tzinfo=timezone.utc)


def pid(text: str) -> PvId:
    project, _, version = text.rpartition("@")
    return PvId(project, version)


def pv(
    ident: str,
    *,
    day: float = 0,
    deps: Iterable[str] = (),
    files: Iterable[str] = (),
    imports: Iterable[str] = (),
    public: Sequence[tuple[str, str]] = (),
    internal: Sequence[tuple[str, str]] = (),
    calls: Iterable[tuple[str, str]] = (),
    released: datetime | None = None,
) -> PvManifest:
    """One manifest; ``public``/``internal`` are (fqn, file) pairs, ``day`` offsets from T0."""
    fns = [FunctionDecl(f, file, "public") for f, file in public] + [
        FunctionDecl(f, file, "internal") for f, file in internal
    ]
    fn_files = {file for _, file in [*public, *internal]}
    return PvManifest(
        id=pid(ident),
        released_at=released if released is not None else T0 + timedelta(days=day),
        deps=tuple(pid(d) for d in deps),
        files=frozenset(files) | fn_files,
        imports=frozenset(imports),
        functions=tuple(fns),
        calls=tuple(CallEdge(a, b) for a, b in calls),
    )


def snap(*manifests: PvManifest, name: str = "fixture") -> EcosystemSnapshot:
    return EcosystemSnapshot(name, manifests)


def diamond() -> EcosystemSnapshot:
    """A is the root; B wraps A's API; C calls A directly and through B."""
    return snap(
        pv("A@1", day=-100, public=[("A.Api.parse", "A/Api.src")], internal=[("A.Core.decode", "A/Core.src")],
           calls=[("A.Api.parse", "A.Core.decode")]),
        pv("A@2", day=-50, public=[("A.Api.parse", "A/Api.src")], internal=[("A.Core.decode", "A/Core.src")],
           calls=[("A.Api.parse", "A.Core.decode")]),
        pv("B@1", day=-90, deps=["A@1"], imports=["A/Api.src"],
           public=[("B.Wrap.parseAll", "B/Wrap.src")], calls=[("B.Wrap.parseAll", "A.Api.parse")]),
        pv("C@1", day=-80, deps=["A@1", "B@1"], imports=["A/Api.src", "B/Wrap.src"],
           public=[("C.App.run", "C/App.src"), ("C.App.batch", "C/App.src")],
           calls=[("C.App.run", "A.Api.parse"), ("C.App.batch", "B.Wrap.parseAll")]),
        name="diamond",
    )


def cycle() -> EcosystemSnapshot:
    """Two projects depending on each other; only the second calls into the first."""
    return snap(
        pv("dom@1", day=-60, deps=["jax@1"], imports=["jax/XPath.src"],
           public=[("dom.Reader.read", "dom/Reader.src")], internal=[("dom.Parser.parse", "dom/Parser.src")],
           calls=[("dom.Reader.read", "dom.Parser.parse")]),
        pv("jax@1", day=-70, deps=["dom@1"], imports=["dom/Reader.src"],
           public=[("jax.XPath.eval", "jax/XPath.src")], calls=[("jax.XPath.eval", "dom.Reader.read")]),
        name="cycle",
    )


def fat() -> EcosystemSnapshot:
    """F ships its own files a, b plus lib1 (from its direct dep) and lib2 (dep of that dep)."""
    return snap(
        pv("F@1", deps=["L1@1"], files=["a", "b", "lib1", "lib2"],
           public=[("F.f", "a"), ("F.bundled1", "lib1"), ("F.bundled2", "lib2")]),
        pv("L1@1", deps=["L2@1"], files=["lib1"], public=[("L1.g", "lib1")]),
        pv("L2@1", files=["lib2"], public=[("L2.h", "lib2")]),
        name="fat",
    )


def _root(ident: str, day: float) -> PvManifest:
    return pv(ident, day=day, public=[("R.Api.open", "R/Api.src")], internal=[("R.Core.vuln", "R/Core.src")],
              calls=[("R.Api.open", "R.Core.vuln")])


def _user(ident: str, day: float, dep: str) -> PvManifest:
    name = ident.split("@")[0]
    return pv(ident, day=day, deps=[dep], imports=["R/Api.src"],
              public=[(f"{name}.Main.run", f"{name}/Main.src")], calls=[(f"{name}.Main.run", "R.Api.open")])


def two_point() -> EcosystemSnapshot:
    """X uses the root before disclosure (day 0); Y only appears on day 45."""
    return snap(
        _root("R@1", -10), _root("R@2", 200),
        _user("X@1", -5, "R@1"), _user("Y@1", 45, "R@1"),
        pv("Z@1", day=0),
        name="two-point",
    )


def migration() -> EcosystemSnapshot:
    """R is patched on day 80 and X moves to the patched version on day 90."""
    return snap(
        _root("R@1", -10), _root("R@2", 80),
        _user("X@1", -5, "R@1"), _user("X@2", 90, "R@2"),
        name="migration",
    )


def anomaly(fillers: int = 5000) -> EcosystemSnapshot:
    """A new dependent (Y, day 20) arrives between the first two samples, amid many unrelated projects."""
    return snap(
        _root("R@1", -10),
        _user("X@1", -5, "R@1"), _user("Y@1", 20, "R@1"),
        *(pv(f"filler{i:05d}@1", day=-100) for i in range(fillers)),
        name="anomaly",
    )
