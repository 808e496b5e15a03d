"""Lexical scanner locating calls to critical PHP functions.

The scanner works on raw bytes so reported offsets are byte offsets into the
file. It is deliberately a lexer rather than a parser: WebShells are often
malformed or obfuscated, and a strict parser would reject them.
"""

from __future__ import annotations

import bisect
import logging
import re
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

from bfad.registry import CATEGORIES, BehaviorCategory, CriticalFunctionRegistry

log = logging.getLogger(__name__)

PHP_EXTENSIONS = (".php",)


@dataclass(frozen=True)
class SourceFile:
    path: str
    content: bytes

    @property
    def byte_length(self) -> int:
        return len(self.content)

    @classmethod
    def from_path(cls, path: str | Path) -> SourceFile:
        path = Path(path)
        return cls(str(path), path.read_bytes())

    @classmethod
    def from_text(cls, text: str, path: str = "<memory>") -> SourceFile:
        return cls(path, text.encode("utf-8"))

    def text(self) -> str:
        return self.content.decode("utf-8", errors="replace")


@dataclass(frozen=True, order=True)
class FunctionOccurrence:
    byte_offset: int
    function_name: str
    category: BehaviorCategory
    line: int

    def to_dict(self) -> dict:
        return {
            "function": self.function_name,
            "category": self.category.value,
            "byte_offset": self.byte_offset,
            "line": self.line,
        }


@dataclass(frozen=True)
class ScanOptions:
    count_in_strings: bool = False
    require_preg_e: bool = False


_IDENT_START = rb"A-Za-z_\x80-\xff"
_IDENT_CHAR = rb"A-Za-z0-9_\x80-\xff"
_NAME = rb"[" + _IDENT_START + rb"][" + _IDENT_CHAR + rb"]*"

_OPEN_TAG = re.compile(rb"<\?(?:php(?=\s|\Z)|=)", re.IGNORECASE)
_TOKEN = re.compile(
    rb"(?P<name>\\?" + _NAME + rb"(?:\\" + _NAME + rb")*)"
    rb"|(?P<var>\$" + _NAME + rb")"
    rb"|(?P<close>\?>)"
    rb"|(?P<line_comment>//|#(?!\[))"
    rb"|(?P<block_comment>/\*)"
    rb"|(?P<heredoc><<<[ \t]*(?P<hq>[\"']?)(?P<hid>" + _NAME + rb")(?P=hq)\r?\n)"
    rb"|(?P<quote>['\"`])"
    rb"|(?P<arrow>->)"
    rb"|(?P<dcolon>::)"
    rb"|(?P<punct>\S)"
)
_STRING_END = {
    ord("'"): re.compile(rb"[^'\\]*(?:\\(?:.|\Z)[^'\\]*)*(?:'|\Z)", re.DOTALL),
    ord('"'): re.compile(rb'[^"\\]*(?:\\(?:.|\Z)[^"\\]*)*(?:"|\Z)', re.DOTALL),
    ord("`"): re.compile(rb"[^`\\]*(?:\\(?:.|\Z)[^`\\]*)*(?:`|\Z)", re.DOTALL),
}
# Closed literals only: an unterminated pattern has no verifiable modifiers.
_CLOSED_PATTERN = {
    ord("'"): re.compile(rb"'([^'\\]*(?:\\.[^'\\]*)*)'", re.DOTALL),
    ord('"'): re.compile(rb'"([^"\\]*(?:\\.[^"\\]*)*)"', re.DOTALL),
}
_LINE_COMMENT_END = re.compile(rb"\r\n|\n|\r|\?>")
_SKIP_TRIVIA = re.compile(rb"(?:\s+|/\*.*?(?:\*/|\Z)|(?://|#(?!\[))[^\r\n]*)*", re.DOTALL)
_CALL_IN_STRING = re.compile(
    rb"(?<![" + _IDENT_CHAR + rb"$>:\\])(" + _NAME + rb")\s*\("
)
_NEWLINE = re.compile(rb"\n")

# Previous-significant-token kinds that disqualify a following name as a call.
_EXCLUDING_PREV = frozenset({"arrow", "dcolon", "function", "new"})


def _heredoc_terminator(identifier: bytes) -> re.Pattern[bytes]:
    return re.compile(
        rb"^[ \t]*" + re.escape(identifier) + rb"(?![" + _IDENT_CHAR + rb"])", re.MULTILINE
    )


def _preg_has_e_modifier(content: bytes, paren: int) -> bool:
    """True if the first argument after ``paren`` is a literal pattern carrying ``e``."""
    i = _SKIP_TRIVIA.match(content, paren + 1).end()
    if i >= len(content) or content[i] not in (ord("'"), ord('"')):
        return False
    m = _CLOSED_PATTERN[content[i]].match(content, i)
    if m is None:
        return False
    literal = m.group(1).strip()
    if len(literal) < 2:
        return False
    opener = literal[:1]
    closer = {b"(": b")", b"[": b"]", b"{": b"}", b"<": b">"}.get(opener, opener)
    end = literal.rfind(closer)
    if end <= 0:
        return False
    return b"e" in literal[end + 1 :]


class _Lines:
    def __init__(self, content: bytes):
        self._starts = [m.end() for m in _NEWLINE.finditer(content)]

    def line_of(self, offset: int) -> int:
        return bisect.bisect_right(self._starts, offset) + 1


def scan(
    file: SourceFile,
    registry: CriticalFunctionRegistry,
    options: ScanOptions | None = None,
) -> list[FunctionOccurrence]:
    """Return every call-position of a registry function in ``file``, sorted by offset.

    A name counts when it lies inside a PHP region, is followed (modulo
    whitespace and comments) by ``(``, is not inside a comment, string,
    heredoc or nowdoc, and is not preceded by ``->``, ``?->``, ``::``,
    ``function`` or ``new``.
    """
    options = options or ScanOptions()
    content = file.content
    n = len(content)
    try:
        content.decode("utf-8")
    except UnicodeDecodeError as exc:
        log.warning("%s: invalid UTF-8 at byte %d; treating content as opaque bytes", file.path, exc.start)

    lines = _Lines(content)
    found: dict[int, FunctionOccurrence] = {}

    def record(offset: int, name: str, paren: int) -> None:
        category = registry.lookup(name)
        if category is None:
            return
        if options.require_preg_e and name == "preg_replace" and not _preg_has_e_modifier(content, paren):
            return
        found[offset] = FunctionOccurrence(offset, name, category, lines.line_of(offset))

    def scan_string_body(start: int, end: int) -> None:
        for m in _CALL_IN_STRING.finditer(content, start, end):
            record(m.start(1), m.group(1).decode("latin-1").lower(), m.end() - 1)

    i = 0
    while i < n:
        m = _OPEN_TAG.search(content, i)
        if m is None:
            break
        i = m.end()
        prev = "other"
        while i < n:
            t = _TOKEN.search(content, i)
            if t is None:
                i = n
                break
            kind = t.lastgroup
            if kind == "hq" or kind == "hid":
                kind = "heredoc"
            start, i = t.start(), t.end()
            if kind == "name":
                token = t.group("name")
                bare = token[1:] if token.startswith(b"\\") else token
                lowered = bare.decode("latin-1").lower()
                if b"\\" not in bare and prev not in _EXCLUDING_PREV and lowered in registry:
                    after = _SKIP_TRIVIA.match(content, i).end()
                    if after < n and content[after] == ord("("):
                        record(start + len(token) - len(bare), lowered, after)
                prev = lowered if lowered in ("function", "new") else "other"
            elif kind == "close":
                break
            elif kind == "line_comment":
                e = _LINE_COMMENT_END.search(content, i)
                if e is None:
                    i = n
                elif e.group() == b"?>":
                    i = e.end()
                    break
                else:
                    i = e.start()
            elif kind == "block_comment":
                e = content.find(b"*/", i)
                i = n if e < 0 else e + 2
            elif kind == "quote":
                e = _STRING_END[content[start]].match(content, i)
                if options.count_in_strings:
                    scan_string_body(i, e.end())
                i = e.end()
                prev = "other"
            elif kind == "heredoc":
                e = _heredoc_terminator(t.group("hid")).search(content, i)
                body_end = n if e is None else e.start()
                if options.count_in_strings:
                    scan_string_body(i, body_end)
                i = n if e is None else e.end()
                prev = "other"
            elif kind in ("arrow", "dcolon"):
                prev = kind
            elif kind == "punct":
                if not (prev == "function" and content[start] == ord("&")):
                    prev = "other"
            else:
                prev = "other"
    return [found[k] for k in sorted(found)]


def count_by_category(occurrences: Iterable[FunctionOccurrence]) -> dict[BehaviorCategory, int]:
    counts = Counter(occ.category for occ in occurrences)
    return {category: counts.get(category, 0) for category in CATEGORIES}


def discover_php_files(paths: Iterable[str | Path]) -> tuple[list[Path], list[Path]]:
    """Expand ``paths`` into PHP files; directories are walked recursively.

    Returns ``(files, missing)``; files are sorted and de-duplicated.
    """
    files: set[Path] = set()
    missing: list[Path] = []
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            files.update(
                p for p in path.rglob("*") if p.is_file() and p.suffix.lower() in PHP_EXTENSIONS
            )
        elif path.is_file():
            files.add(path)
        else:
            missing.append(path)
    return sorted(files), missing
