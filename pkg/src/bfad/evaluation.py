"""Labeled manifests, corpus-level evaluation runs, and classification metrics."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import random
import tempfile
from collections.abc import Iterable, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from bfad.llm import LlmError, VerdictLabel
from bfad.pipeline import Detector
from bfad.profiling import Label
from bfad.scanner import SourceFile

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


class ManifestError(ValueError):
    pass


class AllRequestsFailedError(RuntimeError):
    def __init__(self, report: EvalReport):
        self.report = report
        super().__init__(f"every one of {len(report.per_file)} classification requests failed")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: Label
    split: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    split: str | None = None

    def __post_init__(self):
        paths = [e.path for e in self.entries]
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})
            raise ManifestError(f"duplicate manifest paths: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.entries)

    def with_split(self, split: str) -> DatasetManifest:
        return DatasetManifest(tuple(e for e in self.entries if e.split == split), split)

    @property
    def has_splits(self) -> bool:
        return any(e.split is not None for e in self.entries)

    @classmethod
    def load(cls, path: str | Path) -> DatasetManifest:
        """Read a JSONL manifest; relative paths resolve against the manifest's directory."""
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ManifestError(f"{path}: cannot read manifest: {exc.strerror}") from None
        entries = []
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                label = Label(row["label"])
                file_path = Path(row["path"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: bad manifest row: {exc}") from None
            if not file_path.is_absolute():
                file_path = path.parent / file_path
            split = row.get("split")
            if split not in (None, "library", "eval"):
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            entries.append(ManifestEntry(str(file_path), label, split))
        return cls(tuple(entries))

    def dump(self, path: str | Path) -> None:
        """Write JSONL; entries under the manifest's directory are stored relative to it."""
        base = Path(path).resolve().parent
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                entry_path = Path(e.path).resolve()
                stored = entry_path.relative_to(base) if entry_path.is_relative_to(base) else entry_path
                row = {"path": stored.as_posix(), "label": e.label.value}
                if e.split:
                    row["split"] = e.split
                fh.write(json.dumps(row) + "\n")

    def sources(self) -> list[tuple[SourceFile, Label]]:
        return [(SourceFile.from_path(e.path), e.label) for e in self.entries]


def split_manifest(
    manifest: DatasetManifest, library_fraction: float, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Stratified, seeded split into a demonstration library and an evaluation set."""
    if not 0 < library_fraction < 1:
        raise ValueError(f"library_fraction must be in (0, 1), got {library_fraction}")
    rng = random.Random(seed)
    library, held_out = [], []
    for label in (Label.WEBSHELL, Label.BENIGN):
        group = sorted((e for e in manifest.entries if e.label is label), key=lambda e: e.path)
        rng.shuffle(group)
        cut = round(len(group) * library_fraction)
        library += [ManifestEntry(e.path, e.label, "library") for e in group[:cut]]
        held_out += [ManifestEntry(e.path, e.label, "eval") for e in group[cut:]]
    order = {e.path: i for i, e in enumerate(manifest.entries)}
    library.sort(key=lambda e: order[e.path])
    held_out.sort(key=lambda e: order[e.path])
    return DatasetManifest(tuple(library), "library"), DatasetManifest(tuple(held_out), "eval")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[Label, Label]]) -> ConfusionMatrix:
        """Build from ``(gold, predicted)`` pairs; WebShell is the positive class."""
        tp = fp = tn = fn = 0
        for gold, predicted in pairs:
            if predicted is Label.WEBSHELL:
                if gold is Label.WEBSHELL:
                    tp += 1
                else:
                    fp += 1
            elif gold is Label.WEBSHELL:
                fn += 1
            else:
                tn += 1
        return cls(tp, fp, tn, fn)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float


def compute_metrics(matrix: ConfusionMatrix) -> Metrics:
    if matrix.total <= 0:
        raise ValueError("empty confusion matrix")
    if matrix.tp + matrix.fp == 0:
        log.warning("no positive predictions; precision defined as 0")
        precision = 0.0
    else:
        precision = matrix.tp / (matrix.tp + matrix.fp)
    if matrix.tp + matrix.fn == 0:
        log.warning("no positive gold labels; recall defined as 0")
        recall = 0.0
    else:
        recall = matrix.tp / (matrix.tp + matrix.fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    accuracy = (matrix.tp + matrix.tn) / matrix.total
    return Metrics(accuracy, precision, recall, f1)


@dataclass
class FileResult:
    path: str
    gold: str
    predicted: str
    verdict: str
    demo_id: str | None = None
    similarity: float | None = None
    n_occurrences: int = 0
    prompt_tokens: int = 0
    latency_ms: int = 0
    error: str | None = None


_VOLATILE = ("latency_ms",)


@dataclass
class EvalReport:
    matrix: ConfusionMatrix
    metrics: Metrics
    per_file: list[FileResult]
    config: Mapping = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        stable = {
            "config": self.config,
            "per_file": [
                {k: v for k, v in asdict(r).items() if k not in _VOLATILE} for r in self.per_file
            ],
        }
        return hashlib.sha256(json.dumps(stable, sort_keys=True).encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "matrix": asdict(self.matrix),
            "metrics": asdict(self.metrics),
            "per_file": [asdict(r) for r in self.per_file],
        }

    def write(self, path: str | Path, csv_path: str | Path | None = None) -> None:
        _atomic_write(Path(path), json.dumps(self.to_dict(), indent=2) + "\n")
        if csv_path is not None:
            names = list(FileResult.__dataclass_fields__)
            with tempfile.NamedTemporaryFile(
                "w", newline="", encoding="utf-8", dir=Path(csv_path).parent, delete=False
            ) as fh:
                writer = csv.DictWriter(fh, fieldnames=names)
                writer.writeheader()
                for r in self.per_file:
                    writer.writerow(asdict(r))
            os.replace(fh.name, csv_path)


def _atomic_write(path: Path, text: str) -> None:
    with tempfile.NamedTemporaryFile("w", encoding="utf-8", dir=path.parent, delete=False) as fh:
        fh.write(text)
    os.replace(fh.name, path)


def _evaluate_one(detector: Detector, entry: ManifestEntry, unparseable_as: Label) -> tuple[FileResult, bool]:
    """Returns the row and whether the failure was a request-level error."""
    result = FileResult(entry.path, entry.label.value, unparseable_as.value, VerdictLabel.UNPARSEABLE.value)
    try:
        source = SourceFile.from_path(entry.path)
        analysis = detector.analyze(source)
    except Exception as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        return result, False
    result.n_occurrences = len(analysis.occurrences)
    result.prompt_tokens = analysis.bundle.estimated_tokens
    if analysis.demonstrations:
        demo, score = analysis.demonstrations[0]
        result.demo_id, result.similarity = demo.file_id, score
    try:
        verdict = detector.classify(analysis)
    except LlmError as exc:
        result.error = f"{type(exc).__name__}: {exc}"
        return result, True
    result.verdict = verdict.label.value
    result.latency_ms = verdict.latency_ms
    if verdict.label is not VerdictLabel.UNPARSEABLE:
        result.predicted = verdict.label.value
    return result, False


def run_evaluation(
    eval_manifest: DatasetManifest,
    detector: Detector,
    unparseable_as: Label | str = Label.BENIGN,
    max_workers: int | None = None,
    config: Mapping | None = None,
) -> EvalReport:
    """Classify every manifest file and aggregate the confusion matrix.

    Per-file failures are recorded in the report and never abort the run;
    unparseable or failed files count as ``unparseable_as``. Raises
    :class:`AllRequestsFailedError` when every classification request failed.
    """
    if not eval_manifest.entries:
        raise ManifestError("evaluation manifest is empty")
    unparseable_as = Label(unparseable_as)
    workers = max_workers or detector.classifier.config.max_concurrent_requests
    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(lambda e: _evaluate_one(detector, e, unparseable_as), eval_manifest.entries))
    rows = [row for row, _ in outcomes]
    matrix = ConfusionMatrix.from_pairs((Label(r.gold), Label(r.predicted)) for r in rows)
    report = EvalReport(matrix, compute_metrics(matrix), rows, dict(config or {}))
    if all(failed for _, failed in outcomes):
        raise AllRequestsFailedError(report)
    return report
