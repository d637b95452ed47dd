import json
import random
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from helpers import T0, cycle, diamond, fat, pid, pv, snap
from vulnprop.depgraph import build_p_graph, pv_dep_records
from vulnprop.oracle import oracle_propagate
from vulnprop.propagation import (
    STAGES,
    NoVulnerableVersionInSnapshot,
    PassBoundExceeded,
    PropagationCache,
    PropagationInterrupted,
    PropagationResult,
    Propagator,
    UnknownRootProject,
    VulnSpec,
    AnalysisError,
    compute_eps,
    intrinsic_scope,
    pass_bound,
    priority_order,
    propagate,
    prune_cg,
    prune_import,
    prune_version,
)
from vulnprop.synthgen import GenConfig, generate

FIX = Path(__file__).parent / "fixtures"


def vuln(project, versions, vfs, cve="CVE-TEST"):
    return VulnSpec(cve, project, set(versions), set(vfs), T0)


def run(s, v, **kw):
    return propagate(s, build_p_graph(s), v, **kw)


# -- intrinsic scope ---------------------------------------------------------------


def test_scope_without_deps_is_all_files():
    s = snap(pv("A@1", files=["x", "y"]))
    assert intrinsic_scope(s, pid("A@1")) == {"x", "y"}


def test_fat_package_direct_and_transitive_bundles_removed():
    s = fat()
    assert intrinsic_scope(s, pid("F@1")) == {"a", "b"}
    assert intrinsic_scope(s, pid("L1@1")) == {"lib1"}


def test_scope_ignores_other_versions_of_same_project():
    # X@2 depends on X@1 which shares its file; the file is still X@2's own
    s = snap(pv("X@1", files=["x"]), pv("X@2", files=["x"], deps=["X@1"]))
    assert intrinsic_scope(s, pid("X@2")) == {"x"}


# -- entry points --------------------------------------------------------------------


def chain():
    return snap(pv("A@1", public=[("A", "f")], internal=[("B", "f"), ("C", "f")], calls=[("A", "B"), ("B", "C")]))


def test_eps_of_empty_tfs():
    assert compute_eps(chain(), pid("A@1"), set()) == set()


def test_eps_follow_internal_chain():
    assert compute_eps(chain(), pid("A@1"), {"C"}) == {"A"}


def test_public_uncalled_tf_is_its_own_ep():
    s = snap(pv("A@1", public=[("T", "f")]))
    assert compute_eps(s, pid("A@1"), {"T"}) == {"T"}


def test_undeclared_tf_is_dropped():
    assert compute_eps(chain(), pid("A@1"), {"ghost"}) == set()


def test_bundled_public_function_is_not_an_ep():
    s = fat()
    assert compute_eps(s, pid("F@1"), {"F.bundled1", "F.f"}) == {"F.f"}


# -- the pruning levels -----------------------------------------------------------


def two_version_root():
    return snap(
        pv("A@1", public=[("A.api", "A/api")]),
        pv("A@2", public=[("A.api", "A/api")]),
        pv("B@1", deps=["A@1"], imports=["A/api"], public=[("B.use", "B/use")], calls=[("B.use", "A.api")]),
        pv("B@2", deps=["A@2"], imports=["A/api"], public=[("B.use", "B/use")], calls=[("B.use", "A.api")]),
        pv("C@1", deps=["A@2"], public=[("C.x", "C/x")]),
        pv("D@1", deps=["A@2"], imports=["A/api"], public=[("D.y", "D/y")]),
    )


def test_prune_version():
    s = two_version_root()
    recs = pv_dep_records(s, "B", "A")
    assert prune_version(recs, set()) == set()
    assert prune_version(recs, {"2"}) == {(pid("B@2"), pid("A@2"))}
    assert prune_version(recs, {"1", "2"}) == set(recs)


def test_prune_import():
    s = two_version_root()
    assert prune_import({(pid("C@1"), pid("A@2"))}, s) == set()
    assert prune_import({(pid("D@1"), pid("A@2"))}, s) == {(pid("D@1"), pid("A@2"))}
    assert prune_import(set(), s) == set()


def test_prune_import_ignores_bundled_upstream_files():
    # G imports lib1, which F only bundles; the pair F -> G must go
    s = snap(*fat().pvs.values(), pv("G@1", deps=["F@1"], imports=["lib1"]))
    assert prune_import({(pid("G@1"), pid("F@1"))}, s) == set()


def test_prune_cg():
    s = two_version_root()
    eps = {pid("A@2"): {"A.api"}}
    v3, tfs, calls = prune_cg({(pid("D@1"), pid("A@2")), (pid("B@2"), pid("A@2"))}, eps, s)
    assert v3 == {(pid("B@2"), pid("A@2"))}
    assert tfs == {pid("B@2"): {"B.use"}}
    assert calls == {(pid("B@2"), pid("A@2")): {("B.use", "A.api")}}
    assert prune_cg({(pid("B@2"), pid("A@2"))}, {pid("A@2"): set()}, s)[0] == set()


# -- propagate ------------------------------------------------------------------------


def test_root_without_dependents_is_one_pass():
    s = snap(pv("A@1", public=[("A.f", "A/f")]), pv("Z@1"))
    r = run(s, vuln("A", ["1"], ["A.f"]))
    assert set(r.affected) == {"A"}
    assert len(r.pass_log) == 1
    assert r.affected["A"].depth == 0


def test_version_pruning_in_a_run():
    r = run(two_version_root(), vuln("A", ["1"], ["A.api"]))
    assert r.affected_pvs() == {pid("A@1"), pid("B@1")}
    st = r.stage_stats
    assert (st["v0"]["pv_dir"], st["v1"]["pv_dir"], st["v2"]["pv_dir"], st["v3"]["pv_dir"]) == (4, 1, 1, 1)


def test_unknown_root():
    with pytest.raises(UnknownRootProject):
        run(diamond(), vuln("Q", ["1"], ["x"]))


def test_no_vulnerable_version_in_snapshot():
    with pytest.raises(NoVulnerableVersionInSnapshot):
        run(diamond(), vuln("A", ["9"], ["A.Core.decode"]))


def test_missing_versions_and_vfs_warn_and_drop():
    s = snap(pv("A@1", public=[("A.f", "A/f")]), pv("A@2", public=[("A.g", "A/f")]))
    r = run(s, vuln("A", ["1", "2", "3"], ["A.f"]))
    assert r.root_pvs == {pid("A@1")}
    assert any("A@3" in w for w in r.warnings)
    assert any("A@2" in w for w in r.warnings)


def test_diamond_orders_converge_and_c_is_revisited():
    s = diamond()
    v = vuln("A", ["1"], ["A.Core.decode"])
    abc = run(s, v, pick=priority_order(["A", "B", "C"]))
    acb = run(s, v, pick=priority_order(["A", "C", "B"]))
    assert abc.affected_pvs() == acb.affected_pvs() == {pid("A@1"), pid("B@1"), pid("C@1")}
    assert abc.eps_map() == acb.eps_map()
    assert abc.inter_pv_calls == acb.inter_pv_calls
    assert abc.pass_counts()["C"] == 1
    assert acb.pass_counts()["C"] == 2
    assert acb.eps_map()[pid("C@1")] == {"C.App.run", "C.App.batch"}


def test_diamond_matches_golden():
    s = diamond()
    v = VulnSpec.from_json(json.loads((FIX / "diamond" / "vuln.json").read_text()))
    golden = json.loads((FIX / "golden" / "diamond.result.json").read_text())
    assert run(s, v).to_json() == golden


def test_cycle_terminates_within_bound():
    s = cycle()
    g = build_p_graph(s)
    v = vuln("dom", ["1"], ["dom.Parser.parse"])
    r = propagate(s, g, v)
    assert len(r.pass_log) <= pass_bound(s, g)
    assert r.affected_pvs() == {pid("dom@1"), pid("jax@1")} == oracle_propagate(s, v).affected


def test_pass_bound_is_enforced():
    s = diamond()
    with pytest.raises(PassBoundExceeded):
        run(s, vuln("A", ["1"], ["A.Core.decode"]), bound=2)


def test_result_json_round_trip(tmp_path):
    r = run(diamond(), vuln("A", ["1"], ["A.Core.decode"]))
    back = PropagationResult.from_json(json.loads(json.dumps(r.to_json())))
    assert back.to_json() == r.to_json()


def test_parallel_pruning_gives_same_result():
    gen = generate(GenConfig(seed=11, n_projects=30, dep_density=0.2))
    g = build_p_graph(gen.snapshot)
    one = propagate(gen.snapshot, g, gen.vuln)
    many = propagate(gen.snapshot, g, gen.vuln, jobs=4)
    assert one.to_json() == many.to_json()


# -- resumable runs -----------------------------------------------------------------


def big_case():
    gen = generate(GenConfig(seed=5, n_projects=40, versions_per_project=(1, 4), dep_density=0.2,
                             cycle_probability=0.1, fat_package_probability=0.3))
    return gen.snapshot, build_p_graph(gen.snapshot), gen.vuln


def test_interrupted_run_resumes_to_identical_result(tmp_path):
    s, g, v = big_case()
    fresh = propagate(s, g, v)
    assert len(fresh.pass_log) > 3
    cache = tmp_path / "cache"
    with pytest.raises(PropagationInterrupted):
        propagate(s, g, v, cache_dir=cache, max_passes=2)
    for sub in ("tvs", "tfs", "eps", "interpv", "stages"):
        assert (cache / sub).is_dir()
    with pytest.raises(PropagationInterrupted):
        propagate(s, g, v, cache_dir=cache, max_passes=1)
    resumed = propagate(s, g, v, cache_dir=cache)
    assert resumed.to_json() == fresh.to_json()
    lines = (cache / "passlog.jsonl").read_text().splitlines()
    assert [json.loads(x)["seq"] for x in lines] == list(range(1, len(fresh.pass_log) + 1))


def test_crash_between_stage_and_move_is_recovered(tmp_path, monkeypatch):
    s, g, v = big_case()
    fresh = propagate(s, g, v)
    cache = tmp_path / "cache"
    real = PropagationCache._finish_pending
    calls = {"n": 0}

    def flaky(self, meta):
        calls["n"] += 1
        if calls["n"] == 3:
            raise KeyboardInterrupt  # dies after staging, before the move
        return real(self, meta)

    monkeypatch.setattr(PropagationCache, "_finish_pending", flaky)
    with pytest.raises(KeyboardInterrupt):
        propagate(s, g, v, cache_dir=cache)
    monkeypatch.setattr(PropagationCache, "_finish_pending", real)
    assert json.loads((cache / "meta.json").read_text())["pending"] == 3
    assert propagate(s, g, v, cache_dir=cache).to_json() == fresh.to_json()


def test_cache_for_other_vulnerability_is_rejected(tmp_path):
    s, g, v = big_case()
    with pytest.raises(PropagationInterrupted):
        propagate(s, g, v, cache_dir=tmp_path, max_passes=1)
    other = VulnSpec("CVE-OTHER", v.root_project, v.vulnerable_versions, v.vulnerable_functions, v.disclosed_at)
    with pytest.raises(AnalysisError):
        propagate(s, g, other, cache_dir=tmp_path)


def test_completed_cache_reruns_nothing(tmp_path):
    s, g, v = big_case()
    first = propagate(s, g, v, cache_dir=tmp_path)
    again = propagate(s, g, v, cache_dir=tmp_path)
    assert again.to_json() == first.to_json()


# -- properties over generated ecosystems ------------------------------------------------

configs = st.builds(
    GenConfig,
    seed=st.integers(0, 2**64 - 1),
    n_projects=st.integers(1, 18),
    versions_per_project=st.sampled_from([(1, 1), (1, 3), (2, 4)]),
    dep_density=st.floats(0.05, 0.4),
    cycle_probability=st.floats(0, 0.5),
    fat_package_probability=st.floats(0, 0.5),
    call_through_probability=st.floats(0, 1),
)


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(configs, st.integers(0, 2**32))
def test_engine_invariants_on_generated_ecosystems(c, order_seed):
    gen = generate(c)
    s, v = gen.snapshot, gen.vuln
    g = build_p_graph(s)
    sizes: dict[str, list[tuple[int, int, int]]] = {}
    engine = Propagator(s, g, v)

    def check(rec):
        # nesting on every pass, and every stage drawn from real dependency records
        assert rec.stages["v3"] <= rec.stages["v2"] <= rec.stages["v1"] <= rec.stages["v0"]
        for down, up in rec.stages["v0"]:
            assert (down, up) in set(pv_dep_records(s, down.project, up.project))
        st_ = engine.state[rec.project]
        now = (len(st_.tvs), sum(map(len, st_.tfs.values())), sum(map(len, st_.eps.values())))
        prev = sizes.setdefault(rec.project, [now])[-1]
        assert all(a >= b for a, b in zip(now, prev))
        sizes[rec.project].append(now)

    engine.on_pass = check
    r = engine.run()
    assert len(r.pass_log) <= pass_bound(s, g)

    rng = random.Random(order_seed)
    shuffled = propagate(s, g, v, pick=lambda wl: rng.randrange(len(wl)))
    assert shuffled.affected_pvs() == r.affected_pvs()
    assert shuffled.eps_map() == r.eps_map()
    assert shuffled.inter_pv_calls == r.inter_pv_calls

    o = oracle_propagate(s, v)
    assert r.affected_pvs() == o.affected
    assert r.eps_map() == o.eps
    assert r.inter_pv_calls == o.inter_pv_calls

    assert r.affected[v.root_project].depth == 0
    linked = {down for (_, down) in r.inter_pv_calls}
    for p in r.affected_pvs():
        if p.project != v.root_project:
            assert p in linked
    for name in STAGES:
        assert set(r.stage_stats[name]) == {"p_dir", "p_trans", "pv_dir", "pv_trans", "l_max", "l_avg"}
