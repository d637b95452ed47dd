import socket
import time
from pathlib import Path

import pytest

from vulnprop.classifier import (
    PRINCIPLES,
    RemoteClassifier,
    RemoteSchemaError,
    StubClassifier,
    classify_remote,
    parse_response,
)
from vulnprop.patchvf import DROP, KEEP, build_candidates, identify_vfs, load_function_map, parse_patch, read_source_tree

PATCHES = Path(__file__).parent / "fixtures" / "patches"


def fixture(name):
    d = PATCHES / name
    return (d / "patch.diff").read_text(), load_function_map(d / "pre_map.json"), load_function_map(d / "post_map.json")


def candidates(name):
    diff, pre, post = fixture(name)
    d = PATCHES / name
    return build_candidates(parse_patch(diff, pre, post), pre, post,
                            read_source_tree(d / "pre"), read_source_tree(d / "post"))


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_parse_response():
    assert parse_response(b'{"verdict": "keep", "reason": "r"}') == ("keep", "r")
    for bad in (b"nope", b"[]", b'{"verdict": "maybe", "reason": "r"}', b'{"verdict": "drop"}'):
        with pytest.raises(RemoteSchemaError):
            parse_response(bad)


def test_stub_drops_getter_with_remote_source():
    with StubClassifier() as stub:
        decisions = classify_remote(candidates("getter"), stub.url, timeout=5)
    assert [(d.verdict, d.source, d.degraded) for d in decisions] == [(DROP, "remote", False)] * 2
    assert all(d.reason.startswith("stub:") for d in decisions)


def test_stub_keeps_bounds_check_and_sees_payload():
    with StubClassifier() as stub:
        report = identify_vfs(*fixture("bounds"), classifier=RemoteClassifier(stub.url))
    assert report.final_vfs == ["Buffer.read()"]
    assert report.decisions[0].source == "remote"
    (req,) = stub.requests
    assert set(req) == {"fqn", "hunk", "pre", "post", "principles"}
    assert req["fqn"] == "Buffer.read()"
    assert req["principles"] == list(PRINCIPLES)
    assert "+        if (i < 0" in req["hunk"]


def test_endpoint_down_falls_back_to_heuristic():
    url = f"http://127.0.0.1:{free_port()}"
    decisions = classify_remote(candidates("quote"), url, timeout=0.5, retries=1)
    (d,) = decisions
    assert (d.verdict, d.source, d.degraded) == (DROP, "heuristic", True)
    report = identify_vfs(*fixture("quote"), classifier=RemoteClassifier(url, timeout=0.5, retries=0))
    assert report.degraded and report.to_json()["degraded"] is True


def test_bad_schema_falls_back_without_retry():
    with StubClassifier(rule=lambda payload: {"verdict": "perhaps"}) as stub:
        (d,) = classify_remote(candidates("bounds"), stub.url, retries=3)
        assert len(stub.requests) == 1
    assert (d.verdict, d.source, d.degraded) == (KEEP, "heuristic", True)


def test_decisions_keep_candidate_order_under_concurrency():
    def slow_first(payload):
        if payload["fqn"].startswith("AMQSession.get"):
            time.sleep(0.2)
        return {"verdict": "drop", "reason": payload["fqn"]}

    with StubClassifier(rule=slow_first) as stub:
        cands = candidates("getter")
        decisions = RemoteClassifier(stub.url, workers=4).classify(cands)
    assert [d.fqn for d in decisions] == [c.fqn for c in cands]
    assert [d.reason for d in decisions] == [c.fqn for c in cands]


def test_unknown_path_is_404_and_degrades():
    with StubClassifier() as stub:
        (d,) = RemoteClassifier(stub.url + "/v2/other/", timeout=2, retries=0).classify(candidates("bounds"))
    assert d.degraded
