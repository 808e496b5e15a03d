"""Turns hand labels (function, line, nth textual occurrence on that line) into byte offsets."""

import json
from pathlib import Path

SCANNER_FIXTURES = Path(__file__).parent / "fixtures" / "scanner"


def label_to_offset(content: bytes, function: str, line: int, nth: int) -> int:
    lines = content.split(b"\n")
    line_start = sum(len(lines[k]) + 1 for k in range(line - 1))
    haystack = lines[line - 1].lower()
    needle = function.encode()
    pos = -1
    for _ in range(nth + 1):
        pos = haystack.index(needle, pos + 1)
    return line_start + pos


def load_fixtures():
    expected = json.loads((SCANNER_FIXTURES / "expected.json").read_text())
    rows = []
    for name, labels in sorted(expected.items()):
        content = (SCANNER_FIXTURES / name).read_bytes()
        want = [
            (lab["function"], label_to_offset(content, lab["function"], lab["line"], lab["nth"]), lab["line"])
            for lab in labels
        ]
        rows.append((name, content, sorted(want, key=lambda w: w[1])))
    return rows
