"""Remote VF classifier client and a small stub server for tests and demos.

Protocol: ``POST <endpoint>/classify`` with JSON
``{"fqn", "hunk", "pre", "post", "principles": [...]}``; the reply is
``{"verdict": "keep"|"drop", "reason": str}``.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Sequence

from .patchvf import DROP, KEEP, Candidate, FilterConfig, VfDecision, heuristic_filter

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "VULNPROP_CLASSIFIER"

PRINCIPLES = (
    "semantics-equivalent modification: if the function's semantics are unchanged by the hunk "
    "(renamed variables, whitespace, literal quoting), it is vulnerability-irrelevant",
    "semantics-changing modification: a semantic change can still be irrelevant, e.g. a hunk "
    "that only adds or removes logging or debugging code",
    "give a reason for every decision so it can be verified manually",
)


class RemoteSchemaError(ValueError):
    pass


def _classify_url(endpoint: str) -> str:
    endpoint = endpoint.rstrip("/")
    return endpoint if endpoint.endswith("/classify") else endpoint + "/classify"


def parse_response(body: bytes) -> tuple[str, str]:
    try:
        data = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RemoteSchemaError(f"unparseable classifier response: {exc}") from exc
    if not isinstance(data, dict):
        raise RemoteSchemaError("classifier response is not an object")
    verdict, reason = data.get("verdict"), data.get("reason")
    if verdict not in (KEEP, DROP) or not isinstance(reason, str):
        raise RemoteSchemaError(f"bad classifier response {data!r}")
    return verdict, reason


@dataclass
class RemoteClassifier:
    endpoint: str
    timeout: float = 10.0
    retries: int = 1
    workers: int = 4
    principles: Sequence[str] = PRINCIPLES

    def request_payload(self, c: Candidate) -> dict[str, Any]:
        return {
            "fqn": c.fqn,
            "hunk": c.hunk_text(),
            "pre": c.pre,
            "post": c.post,
            "principles": list(self.principles),
        }

    def _post(self, payload: dict[str, Any]) -> bytes:
        req = urllib.request.Request(
            _classify_url(self.endpoint),
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read()

    def classify_one(self, c: Candidate, config: FilterConfig | None = None) -> VfDecision:
        payload = self.request_payload(c)
        last_error: Exception | None = None
        for _ in range(max(1, self.retries + 1)):
            try:
                verdict, reason = parse_response(self._post(payload))
                return VfDecision(c.fqn, verdict, reason, "remote")
            except RemoteSchemaError as exc:
                last_error = exc
                break  # a bad schema will not fix itself on retry
            except (urllib.error.URLError, OSError, TimeoutError) as exc:
                last_error = exc
        logger.warning("classifier unavailable for %s (%s); using heuristic verdict", c.fqn, last_error)
        fallback = heuristic_filter(c.hunks[0], c.pre, c.post, config)
        return VfDecision(c.fqn, fallback.verdict, fallback.reason, "heuristic", degraded=True)

    def classify(self, candidates: Sequence[Candidate], config: FilterConfig | None = None) -> list[VfDecision]:
        if not candidates:
            return []
        with ThreadPoolExecutor(max(1, self.workers)) as pool:
            # map keeps candidate order regardless of completion order
            return list(pool.map(lambda c: self.classify_one(c, config), candidates))


def classify_remote(
    candidates: Sequence[Candidate],
    endpoint: str,
    timeout: float = 10.0,
    retries: int = 1,
    config: FilterConfig | None = None,
) -> list[VfDecision]:
    return RemoteClassifier(endpoint, timeout=timeout, retries=retries).classify(candidates, config)


# -- stub server -------------------------------------------------------------------

_ACCESSOR_NAME = re.compile(r"(?:^|\.)(?:get|set|is)[A-Z]\w*\(\)$")


def stub_rule(payload: dict[str, Any]) -> dict[str, str]:
    """Default stub policy: accessors are dropped, everything else kept."""
    if _ACCESSOR_NAME.search(payload.get("fqn", "")):
        return {"verdict": DROP, "reason": "stub: accessor method touches only field state"}
    return {"verdict": KEEP, "reason": "stub: semantics-changing edit"}


class StubClassifier:
    """In-process HTTP classifier; ``rule`` maps a request payload to a response object."""

    def __init__(self, rule: Callable[[dict[str, Any]], Any] = stub_rule, host: str = "127.0.0.1", port: int = 0):
        self.rule = rule
        self.requests: list[dict[str, Any]] = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self) -> None:  # noqa: N802
                if self.path.rstrip("/") != "/classify":
                    self.send_error(404)
                    return
                length = int(self.headers.get("Content-Length", 0))
                payload = json.loads(self.rfile.read(length) or b"{}")
                stub.requests.append(payload)
                reply = stub.rule(payload)
                body = reply if isinstance(reply, bytes) else json.dumps(reply).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args: Any) -> None:
                pass

        self.server = ThreadingHTTPServer((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "StubClassifier":
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()

    def __enter__(self) -> "StubClassifier":
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.stop()


def serve_stub(host: str = "127.0.0.1", port: int = 8765) -> None:
    stub = StubClassifier(host=host, port=port)
    logger.info("stub classifier listening on %s", stub.url)
    stub.server.serve_forever()
