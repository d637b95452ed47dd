"""Vulnerable-function candidates from a security patch.

A unified diff is split into per-function hunks using explicit function
boundary maps for the pre- and post-patch trees, each hunk is classified as
one of five function-modifying kinds, and additions are discarded.  The
remaining candidates are filtered: edits that leave the token stream
unchanged, that only touch logging, or that only touch trivial field
accessors are dropped.
"""

from __future__ import annotations

import difflib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

logger = logging.getLogger(__name__)

FUNCTION_ADDITION = "function_addition"
FUNCTION_DELETION = "function_deletion"
INTERNAL_DELETION = "internal_deletion"
INTERNAL_ADDITION = "internal_addition"
INTERNAL_MODIFICATION = "internal_modification"
HUNK_KINDS = (
    FUNCTION_ADDITION,
    FUNCTION_DELETION,
    INTERNAL_DELETION,
    INTERNAL_ADDITION,
    INTERNAL_MODIFICATION,
)

KEEP, DROP = "keep", "drop"


class MalformedDiff(ValueError):
    pass


class UnmappedRegion(UserWarning):
    """Changed lines that fall outside every known function."""


# -- function maps ----------------------------------------------------------------


@dataclass(frozen=True, order=True)
class FunctionSpan:
    file: str
    start_line: int
    end_line: int
    fqn: str

    def __contains__(self, line: int) -> bool:
        return self.start_line <= line <= self.end_line


@dataclass
class FunctionMap:
    side: str
    entries: list[FunctionSpan] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.side not in ("pre", "post"):
            raise ValueError(f"side must be 'pre' or 'post', got {self.side!r}")
        self.entries = sorted(self.entries)
        by_file: dict[str, list[FunctionSpan]] = {}
        for e in self.entries:
            if e.end_line < e.start_line:
                raise ValueError(f"{e.fqn}: end_line before start_line")
            by_file.setdefault(e.file, []).append(e)
        for spans in by_file.values():
            for a, b in zip(spans, spans[1:]):
                if b.start_line <= a.end_line:
                    raise ValueError(f"overlapping functions {a.fqn} and {b.fqn} in {a.file}")
        self._by_file = by_file

    def at(self, file: str, line: int) -> FunctionSpan | None:
        for span in self._by_file.get(file, ()):
            if line in span:
                return span
        return None

    def find(self, file: str, fqn: str) -> FunctionSpan | None:
        for span in self._by_file.get(file, ()):
            if span.fqn == fqn:
                return span
        return None

    def to_json(self) -> dict[str, Any]:
        return {
            "side": self.side,
            "entries": [
                {"file": e.file, "fqn": e.fqn, "start_line": e.start_line, "end_line": e.end_line}
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "FunctionMap":
        return cls(
            data["side"],
            [FunctionSpan(e["file"], int(e["start_line"]), int(e["end_line"]), e["fqn"]) for e in data["entries"]],
        )


def load_function_map(path: str | Path) -> FunctionMap:
    return FunctionMap.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


_CLASS_RE = re.compile(r"\b(?:class|interface|enum|struct)\s+([A-Za-z_]\w*)")
_FUNC_RE = re.compile(r"([A-Za-z_]\w*)\s*\([^;{}]*\)\s*(?:throws\s+[\w.,\s]+)?\{\s*$")
_NOT_FUNCS = {"if", "for", "while", "switch", "catch", "synchronized", "return", "else", "do", "try"}


def extract_functions(source: str, file: str, side: str = "pre") -> FunctionMap:
    """Function boundaries for a small brace-delimited language.

    Recognizes ``[modifiers] [type] name(args) {`` headers ending a line,
    optionally nested in ``class Name {`` blocks; fqns are ``Class.name()``.
    Good enough for Java/C-like test fixtures, not a real parser.
    """
    entries: list[FunctionSpan] = []
    depth = 0
    classes: list[tuple[str, int]] = []  # (name, depth at which the class body opened)
    current: tuple[str, int, int] | None = None  # (fqn, start line, body depth)
    for lineno, line in enumerate(source.splitlines(), 1):
        code = re.sub(r"//.*$|\"(?:\\.|[^\"\\])*\"|'(?:\\.|[^'\\])*'", "", line)
        if current is None:
            m_cls = _CLASS_RE.search(code)
            m_fn = _FUNC_RE.search(code)
            if m_cls and code.rstrip().endswith("{"):
                classes.append((m_cls.group(1), depth + 1))
            elif m_fn and m_fn.group(1) not in _NOT_FUNCS:
                prefix = ".".join(c for c, _ in classes)
                fqn = f"{prefix}.{m_fn.group(1)}()" if prefix else f"{m_fn.group(1)}()"
                current = (fqn, lineno, depth + 1)
        depth += code.count("{") - code.count("}")
        if current is not None and depth < current[2]:
            entries.append(FunctionSpan(file, current[1], lineno, current[0]))
            current = None
        while classes and depth < classes[-1][1]:
            classes.pop()
    return FunctionMap(side, entries)


# -- diff parsing -------------------------------------------------------------------

_HUNK_RE = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


@dataclass
class Hunk:
    file: str
    pre_range: tuple[int, int]  # (start, count) as in the @@ header
    post_range: tuple[int, int]
    removed: list[str]
    added: list[str]
    kind: str
    touched_fqns: frozenset[str]
    body: list[str] = field(default_factory=list, repr=False)  # prefixed diff lines
    pre_file: str | None = None
    post_file: str | None = None

    def render(self) -> str:
        (ps, pc), (qs, qc) = self.pre_range, self.post_range
        return f"@@ -{ps},{pc} +{qs},{qc} @@\n" + "".join(line + "\n" for line in self.body)

    def to_json(self) -> dict[str, Any]:
        return {
            "file": self.file,
            "pre_range": list(self.pre_range),
            "post_range": list(self.post_range),
            "kind": self.kind,
            "touched_fqns": sorted(self.touched_fqns),
            "removed": self.removed,
            "added": self.added,
        }


@dataclass
class PatchParse:
    hunks: list[Hunk]
    discarded: int = 0
    warnings: list[str] = field(default_factory=list)


def _strip_prefix(path: str) -> str | None:
    path = path.split("\t")[0].strip()
    if path == "/dev/null":
        return None
    if path.startswith(("a/", "b/")):
        return path[2:]
    return path


@dataclass
class _Line:
    tag: str  # ' ', '-', '+'
    text: str
    old: int  # line number in pre file (position for '+' lines: next old line)
    new: int


def _diff_hunks(diff_text: str) -> Iterable[tuple[str | None, str | None, int, int, int, int, list[_Line]]]:
    lines = diff_text.splitlines()
    pre_file = post_file = None
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("--- ") and i + 1 < len(lines) and lines[i + 1].startswith("+++ "):
            pre_file = _strip_prefix(line[4:])
            post_file = _strip_prefix(lines[i + 1][4:])
            i += 2
            continue
        m = _HUNK_RE.match(line)
        if not m:
            i += 1
            continue
        if pre_file is None and post_file is None:
            raise MalformedDiff(f"line {i + 1}: hunk without file header")
        ps, pc = int(m.group(1)), int(m.group(2)) if m.group(2) is not None else 1
        qs, qc = int(m.group(3)), int(m.group(4)) if m.group(4) is not None else 1
        old = ps if pc else ps + 1
        new = qs if qc else qs + 1
        seen_old = seen_new = 0
        body: list[_Line] = []
        i += 1
        while i < len(lines) and (seen_old < pc or seen_new < qc):
            raw = lines[i]
            tag, text = (raw[:1] or " "), raw[1:]
            if tag == "\\":  # "\ No newline at end of file"
                i += 1
                continue
            if tag == " ":
                body.append(_Line(" ", text, old, new))
                old += 1
                new += 1
                seen_old += 1
                seen_new += 1
            elif tag == "-":
                body.append(_Line("-", text, old, new))
                old += 1
                seen_old += 1
            elif tag == "+":
                body.append(_Line("+", text, old, new))
                new += 1
                seen_new += 1
            else:
                break
            i += 1
        if seen_old != pc or seen_new != qc:
            raise MalformedDiff(
                f"line {i + 1}: hunk @@ -{ps},{pc} +{qs},{qc} @@ has {seen_old} old / {seen_new} new lines"
            )
        while i < len(lines) and lines[i].startswith("\\"):
            i += 1
        yield pre_file, post_file, ps, pc, qs, qc, body


def parse_patch_detailed(diff_text: str, pre_map: FunctionMap, post_map: FunctionMap) -> PatchParse:
    out = PatchParse([])
    for pre_file, post_file, _ps, _pc, _qs, _qc, body in _diff_hunks(diff_text):
        # key each changed line by the function it belongs to on its own side
        keyed: list[tuple[_Line, str | None]] = []
        for ln in body:
            if ln.tag == "-":
                span = pre_map.at(pre_file, ln.old) if pre_file else None
                keyed.append((ln, span.fqn if span else None))
            elif ln.tag == "+":
                span = post_map.at(post_file, ln.new) if post_file else None
                keyed.append((ln, span.fqn if span else None))
            else:
                keyed.append((ln, ""))

        # group into segments: runs of changed lines with one key, plus the context between them
        segments: list[tuple[str | None, list[_Line]]] = []
        pending_ctx: list[_Line] = []
        for ln, key in keyed:
            if ln.tag == " ":
                pending_ctx.append(ln)
                continue
            if segments and segments[-1][0] == key:
                segments[-1][1].extend(pending_ctx)
                segments[-1][1].append(ln)
            else:
                segments.append((key, [ln]))
            pending_ctx = []

        for key, seg in segments:
            if key is None:
                if any(ln.text.strip() for ln in seg):
                    msg = f"{post_file or pre_file}: change outside any function near line {seg[0].old}; discarded"
                    logger.warning(msg)
                    out.warnings.append(msg)
                out.discarded += 1
                continue
            out.hunks.append(_make_hunk(key, seg, pre_file, post_file, pre_map, post_map))
    return out


def _make_hunk(
    fqn: str,
    seg: list[_Line],
    pre_file: str | None,
    post_file: str | None,
    pre_map: FunctionMap,
    post_map: FunctionMap,
) -> Hunk:
    removed = [ln.text for ln in seg if ln.tag == "-"]
    added = [ln.text for ln in seg if ln.tag == "+"]
    pre_count = sum(1 for ln in seg if ln.tag != "+")
    post_count = sum(1 for ln in seg if ln.tag != "-")
    first = seg[0]
    pre_start = first.old if pre_count else first.old - 1
    post_start = first.new if post_count else first.new - 1

    in_pre = pre_file is not None and pre_map.find(pre_file, fqn) is not None
    in_post = post_file is not None and post_map.find(post_file, fqn) is not None
    if not in_pre:
        kind = FUNCTION_ADDITION
    elif not in_post:
        kind = FUNCTION_DELETION
    elif removed and added:
        kind = INTERNAL_MODIFICATION
    elif removed:
        kind = INTERNAL_DELETION
    else:
        kind = INTERNAL_ADDITION
    return Hunk(
        file=post_file or pre_file or "",
        pre_range=(pre_start, pre_count),
        post_range=(post_start, post_count),
        removed=removed,
        added=added,
        kind=kind,
        touched_fqns=frozenset({fqn}),
        body=[ln.tag + ln.text for ln in seg],
        pre_file=pre_file,
        post_file=post_file,
    )


def parse_patch(diff_text: str, pre_map: FunctionMap, post_map: FunctionMap) -> list[Hunk]:
    return parse_patch_detailed(diff_text, pre_map, post_map).hunks


def render_patch(hunks: Sequence[Hunk]) -> str:
    """Unified diff text for ``hunks``; re-parsing it reproduces the same classification."""
    out = []
    header = None
    for h in hunks:
        pre = f"a/{h.pre_file}" if h.pre_file else "/dev/null"
        post = f"b/{h.post_file}" if h.post_file else "/dev/null"
        if (pre, post) != header:
            out.append(f"--- {pre}\n+++ {post}\n")
            header = (pre, post)
        out.append(h.render())
    return "".join(out)


def candidate_vfs(hunks: Iterable[Hunk]) -> set[str]:
    found: set[str] = set()
    for h in hunks:
        if h.kind != FUNCTION_ADDITION:
            found |= h.touched_fqns
    return found


# -- heuristic filtering ---------------------------------------------------------------


@dataclass
class VfDecision:
    fqn: str
    verdict: str
    reason: str
    source: str  # heuristic | remote | manual
    degraded: bool = False

    def to_json(self) -> dict[str, Any]:
        return {
            "fqn": self.fqn,
            "verdict": self.verdict,
            "reason": self.reason,
            "source": self.source,
            "degraded": self.degraded,
        }


DEFAULT_LOGGING_PATTERNS = (
    r"^(?:this\.)?(?:log|logger|LOG|LOGGER|_log|_logger|logging)\.\w+\(",
    r"^System\.(?:out|err)\.print\w*\(",
    r"^console\.\w+\(",
    r"^(?:print|printf|println|puts|fprintf|eprintln!?|dbg!?)\(",
    r"^\w+\.printStackTrace\(",
    r"^(?:debug|trace)\(",
)


@dataclass
class FilterConfig:
    logging_patterns: tuple[str, ...] = DEFAULT_LOGGING_PATTERNS
    accessor_rule: bool = True

    def __post_init__(self) -> None:
        self._compiled = [re.compile(p) for p in self.logging_patterns]

    def is_logging(self, statement: str) -> bool:
        return any(p.search(statement) for p in self._compiled)


def load_filter_config(path: str | Path | None) -> FilterConfig:
    """``[logging] patterns = [...]`` (replaces defaults) or ``extra = [...]`` (appends)."""
    if path is None:
        return FilterConfig()
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    data = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    section = data.get("logging", {})
    patterns = tuple(section.get("patterns", DEFAULT_LOGGING_PATTERNS)) + tuple(section.get("extra", ()))
    return FilterConfig(patterns, bool(data.get("accessors", {}).get("enabled", True)))


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>//[^\n]*|/\*.*?\*/|\#[^\n]*)
  | (?P<str>"(?:\\.|[^"\\])*"|'(?:\\.|[^'\\])*')
  | (?P<num>\d[\w.]*)
  | (?P<ident>[A-Za-z_$][\w$]*)
  | (?P<op>->|::|\+\+|--|&&|\|\||[<>=!]=|<<|>>|.)
    """,
    re.VERBOSE | re.DOTALL,
)


def tokens(text: str) -> list[str]:
    """Token stream with whitespace and comments removed and string quoting canonicalized."""
    out = []
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        if kind in ("ws", "comment"):
            continue
        tok = m.group()
        if kind == "str":
            body = tok[1:-1].replace("\\'", "'").replace('\\"', '"')
            tok = "STR:" + body
        out.append(tok)
    return out


def normalize_source(text: str) -> str:
    """Collapse whitespace outside literals and drop blank lines; filtering is invariant under it."""
    parts = []
    for m in _TOKEN_RE.finditer(text):
        if m.lastgroup == "ws":
            parts.append("\n" if "\n" in m.group() else " ")
        else:
            parts.append(m.group())
    lines = (line.strip() for line in "".join(parts).splitlines())
    return "\n".join(line for line in lines if line)


def _statements(toks: list[str]) -> list[str]:
    stmts: list[str] = []
    cur: list[str] = []
    for tok in toks:
        if tok in ("{", "}", ";"):
            if cur:
                stmts.append(" ".join(cur))
                cur = []
            continue
        cur.append(tok)
    if cur:
        stmts.append(" ".join(cur))
    return stmts


def _source_statement(stmt: str) -> str:
    # token-joined statements: "LOG . debug ( STR:x )" -> "LOG.debug(STR:x)"
    return re.sub(r"\s*([.()\[\],])\s*", r"\1", stmt)


_ACCESSOR_BODIES = (
    re.compile(r"^return (?:this \. )?[A-Za-z_$][\w$]*$"),
    re.compile(r"^(?:this \. )?[A-Za-z_$][\w$]* = [A-Za-z_$][\w$]*$"),
)


def is_trivial_accessor(text: str) -> bool:
    """True for functions whose body only returns or assigns a single field."""
    toks = tokens(text)
    if "{" not in toks:
        return False
    head, body = toks[: toks.index("{")], toks[toks.index("{") :]
    if not head or "(" not in head:
        return False
    stmts = _statements(body)
    return len(stmts) == 1 and any(p.match(stmts[0]) for p in _ACCESSOR_BODIES)


def heuristic_filter(
    hunk: Hunk | None,
    pre_text: str,
    post_text: str,
    config: FilterConfig | None = None,
) -> VfDecision:
    """Decide whether a touched function's change is vulnerability-relevant."""
    config = config or FilterConfig()
    fqn = next(iter(sorted(hunk.touched_fqns))) if hunk is not None and hunk.touched_fqns else "?"
    pre, post = normalize_source(pre_text), normalize_source(post_text)
    pre_toks, post_toks = tokens(pre), tokens(post)

    if pre_toks == post_toks:
        reason = "semantics-equivalent: whitespace/comment-only change"
        raw_pre = [t for t in _TOKEN_RE.finditer(pre) if t.lastgroup == "str"]
        raw_post = [t for t in _TOKEN_RE.finditer(post) if t.lastgroup == "str"]
        if [t.group() for t in raw_pre] != [t.group() for t in raw_post]:
            reason = "semantics-equivalent: literal quoting"
        return VfDecision(fqn, DROP, reason, "heuristic")

    pre_st, post_st = _statements(pre_toks), _statements(post_toks)
    delta: list[str] = []
    for op, i1, i2, j1, j2 in difflib.SequenceMatcher(a=pre_st, b=post_st, autojunk=False).get_opcodes():
        if op != "equal":
            delta += pre_st[i1:i2] + post_st[j1:j2]
    if delta and all(config.is_logging(_source_statement(s)) for s in delta):
        return VfDecision(fqn, DROP, "vulnerability-irrelevant: logging/debug statements only", "heuristic")

    if config.accessor_rule:
        sides = [t for t in (pre, post) if t.strip()]
        if sides and all(is_trivial_accessor(t) for t in sides):
            return VfDecision(fqn, DROP, "vulnerability-irrelevant: trivial field accessor", "heuristic")

    return VfDecision(fqn, KEEP, f"semantics-changing: {len(delta)} statement(s) differ", "heuristic")


# -- candidate contexts and the end-to-end pipeline ----------------------------------


def function_text(lines: Sequence[str] | None, span: FunctionSpan | None) -> str:
    if lines is None or span is None:
        return ""
    return "\n".join(lines[span.start_line - 1 : span.end_line])


@dataclass
class Candidate:
    fqn: str
    hunks: list[Hunk]
    pre: str
    post: str

    def hunk_text(self) -> str:
        return "".join(h.render() for h in self.hunks)


def build_candidates(
    hunks: Sequence[Hunk],
    pre_map: FunctionMap,
    post_map: FunctionMap,
    pre_sources: dict[str, list[str]] | None = None,
    post_sources: dict[str, list[str]] | None = None,
) -> list[Candidate]:
    """Group non-addition hunks by fqn and attach pre/post function text.

    Full function text comes from source trees when given; otherwise the
    hunk's own removed/added lines stand in for it.
    """
    by_fqn: dict[str, list[Hunk]] = {}
    for h in hunks:
        if h.kind == FUNCTION_ADDITION:
            continue
        for fqn in sorted(h.touched_fqns):
            by_fqn.setdefault(fqn, []).append(h)
    out = []
    for fqn in sorted(by_fqn):
        hs = by_fqn[fqn]
        h0 = hs[0]
        if pre_sources is not None and post_sources is not None:
            pre = function_text(pre_sources.get(h0.pre_file or ""), pre_map.find(h0.pre_file or "", fqn))
            post = function_text(post_sources.get(h0.file), post_map.find(h0.file, fqn))
        else:
            pre = "\n".join(line for h in hs for line in h.removed)
            post = "\n".join(line for h in hs for line in h.added)
        out.append(Candidate(fqn, hs, pre, post))
    return out


def heuristic_decisions(candidates: Sequence[Candidate], config: FilterConfig | None = None) -> list[VfDecision]:
    decisions = []
    for c in candidates:
        d = heuristic_filter(c.hunks[0], c.pre, c.post, config)
        decisions.append(VfDecision(c.fqn, d.verdict, d.reason, d.source))
    return decisions


VFS_SCHEMA_VERSION = 1


@dataclass
class VfReport:
    cve: str
    candidates: list[str]
    decisions: list[VfDecision]
    hunks: list[Hunk]
    discarded_hunks: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def final_vfs(self) -> list[str]:
        return sorted(d.fqn for d in self.decisions if d.verdict == KEEP)

    @property
    def degraded(self) -> bool:
        return any(d.degraded for d in self.decisions)

    def to_json(self) -> dict[str, Any]:
        return {
            "schema_version": VFS_SCHEMA_VERSION,
            "cve": self.cve,
            "candidates": list(self.candidates),
            "decisions": [d.to_json() for d in self.decisions],
            "final_vfs": self.final_vfs,
            "hunks": [h.to_json() for h in self.hunks],
            "discarded_hunks": self.discarded_hunks,
            "degraded": self.degraded,
            "warnings": list(self.warnings),
        }


def identify_vfs(
    diff_text: str,
    pre_map: FunctionMap,
    post_map: FunctionMap,
    cve: str = "",
    classifier: Any = None,
    config: FilterConfig | None = None,
    pre_sources: dict[str, list[str]] | None = None,
    post_sources: dict[str, list[str]] | None = None,
) -> VfReport:
    """Parse, generate candidates and filter them (remotely when ``classifier`` is set)."""
    parsed = parse_patch_detailed(diff_text, pre_map, post_map)
    candidates = build_candidates(parsed.hunks, pre_map, post_map, pre_sources, post_sources)
    if classifier is not None:
        decisions = classifier.classify(candidates, config)
    else:
        decisions = heuristic_decisions(candidates, config)
    return VfReport(
        cve=cve,
        candidates=[c.fqn for c in candidates],
        decisions=decisions,
        hunks=parsed.hunks,
        discarded_hunks=parsed.discarded,
        warnings=parsed.warnings,
    )


def read_source_tree(root: str | Path) -> dict[str, list[str]]:
    root = Path(root)
    return {
        p.relative_to(root).as_posix(): p.read_text(encoding="utf-8").splitlines()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }
