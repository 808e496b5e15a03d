"""Per-category corpus statistics and behavior weights."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

from bfad.registry import CATEGORIES, BehaviorCategory, CriticalFunctionRegistry
from bfad.scanner import ScanOptions, SourceFile, count_by_category, scan

EPSILON = 1e-6
WEIGHTS_FORMAT_VERSION = 1


class Label(str, enum.Enum):
    WEBSHELL = "webshell"
    BENIGN = "benign"

    def __str__(self) -> str:
        return self.value


class DegenerateCorpusError(ValueError):
    pass


class UninformativeCorpusError(ValueError):
    pass


class RatioTransform(str, enum.Enum):
    RAW = "raw"
    SQUASH = "squash"
    LOG1P = "log1p"

    def apply(self, x: float) -> float:
        if self is RatioTransform.RAW:
            return x
        if self is RatioTransform.SQUASH:
            return x / (1.0 + x)
        return math.log1p(x)


@dataclass(frozen=True)
class CategoryStats:
    category: BehaviorCategory
    webshell_file_fraction: float
    benign_file_fraction: float
    webshell_avg_per_file: float
    benign_avg_per_file: float
    webshell_total: int
    benign_total: int

    def swapped(self) -> CategoryStats:
        return CategoryStats(
            self.category,
            self.benign_file_fraction,
            self.webshell_file_fraction,
            self.benign_avg_per_file,
            self.webshell_avg_per_file,
            self.benign_total,
            self.webshell_total,
        )


@dataclass(frozen=True)
class CorpusStats:
    per_category: Mapping[BehaviorCategory, CategoryStats]
    n_webshell: int
    n_benign: int
    fingerprint: str = ""

    def __post_init__(self):
        missing = set(CATEGORIES) - set(self.per_category)
        if missing:
            raise ValueError(f"corpus stats missing categories: {sorted(c.value for c in missing)}")
        if self.n_webshell <= 0 or self.n_benign <= 0:
            raise DegenerateCorpusError("degenerate corpus: need at least one file of each label")

    def swapped(self) -> CorpusStats:
        return CorpusStats(
            {c: s.swapped() for c, s in self.per_category.items()},
            self.n_benign,
            self.n_webshell,
            self.fingerprint,
        )

    def to_dict(self) -> dict:
        return {
            "n_webshell": self.n_webshell,
            "n_benign": self.n_benign,
            "fingerprint": self.fingerprint,
            "per_category": {
                c.value: {
                    "webshell_file_fraction": s.webshell_file_fraction,
                    "benign_file_fraction": s.benign_file_fraction,
                    "webshell_avg_per_file": s.webshell_avg_per_file,
                    "benign_avg_per_file": s.benign_avg_per_file,
                    "webshell_total": s.webshell_total,
                    "benign_total": s.benign_total,
                }
                for c, s in self.per_category.items()
            },
        }


@dataclass(frozen=True)
class ScoreParams:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.alpha, self.beta, self.gamma)):
            raise ValueError("score parameters must be finite")


@dataclass(frozen=True)
class WeightVector:
    weights: Mapping[BehaviorCategory, float]
    params: ScoreParams = field(default_factory=ScoreParams)
    ratio_transform: RatioTransform = RatioTransform.SQUASH
    fingerprint: str = ""

    def __post_init__(self):
        full = {c: float(self.weights.get(c, 0.0)) for c in CATEGORIES}
        if any(not math.isfinite(w) or w < 0 or w > 1 for w in full.values()):
            raise ValueError("weights must lie in [0, 1]")
        if abs(sum(full.values()) - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {sum(full.values())!r}, not 1")
        object.__setattr__(self, "weights", full)

    def __getitem__(self, category: BehaviorCategory) -> float:
        return self.weights[category]

    @classmethod
    def uniform(cls) -> WeightVector:
        return cls({c: 1.0 / len(CATEGORIES) for c in CATEGORIES})

    def to_dict(self) -> dict:
        return {
            "format_version": WEIGHTS_FORMAT_VERSION,
            "weights": {c.value: w for c, w in self.weights.items()},
            "params": {"alpha": self.params.alpha, "beta": self.params.beta, "gamma": self.params.gamma},
            "ratio_transform": self.ratio_transform.value,
            "corpus_fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> WeightVector:
        version = doc.get("format_version", WEIGHTS_FORMAT_VERSION)
        if version != WEIGHTS_FORMAT_VERSION:
            raise ValueError(f"unsupported weights format version {version}")
        params = doc.get("params", {})
        return cls(
            {BehaviorCategory(k): float(v) for k, v in doc["weights"].items()},
            ScoreParams(**params),
            RatioTransform(doc.get("ratio_transform", "squash")),
            doc.get("corpus_fingerprint", ""),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> WeightVector:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def stats_from_counts(
    rows: Iterable[tuple[Mapping[BehaviorCategory, int], Label]], fingerprint: str = ""
) -> CorpusStats:
    """Aggregate per-file category counts into corpus statistics.

    The reduction is a plain sum, so shards can be counted independently and
    concatenated.
    """
    files = {Label.WEBSHELL: 0, Label.BENIGN: 0}
    with_fn = {label: dict.fromkeys(CATEGORIES, 0) for label in files}
    totals = {label: dict.fromkeys(CATEGORIES, 0) for label in files}
    for counts, label in rows:
        label = Label(label)
        files[label] += 1
        for category in CATEGORIES:
            c = counts.get(category, 0)
            totals[label][category] += c
            if c > 0:
                with_fn[label][category] += 1
    n_w, n_b = files[Label.WEBSHELL], files[Label.BENIGN]
    if n_w == 0 or n_b == 0:
        raise DegenerateCorpusError(
            f"degenerate corpus: {n_w} webshell and {n_b} benign files; need at least one of each"
        )
    per_category = {
        c: CategoryStats(
            category=c,
            webshell_file_fraction=with_fn[Label.WEBSHELL][c] / n_w,
            benign_file_fraction=with_fn[Label.BENIGN][c] / n_b,
            webshell_avg_per_file=totals[Label.WEBSHELL][c] / n_w,
            benign_avg_per_file=totals[Label.BENIGN][c] / n_b,
            webshell_total=totals[Label.WEBSHELL][c],
            benign_total=totals[Label.BENIGN][c],
        )
        for c in CATEGORIES
    }
    return CorpusStats(per_category, n_w, n_b, fingerprint)


def corpus_fingerprint(corpus: Iterable[tuple[SourceFile, Label]]) -> str:
    digests = sorted(
        hashlib.sha256(f.content).hexdigest() + ":" + Label(label).value for f, label in corpus
    )
    return hashlib.sha256("\n".join(digests).encode()).hexdigest()[:16]


def compute_corpus_stats(
    corpus: Iterable[tuple[SourceFile, Label]],
    registry: CriticalFunctionRegistry,
    options: ScanOptions | None = None,
) -> CorpusStats:
    corpus = list(corpus)
    rows = [(count_by_category(scan(f, registry, options)), Label(label)) for f, label in corpus]
    return stats_from_counts(rows, corpus_fingerprint(corpus))


def contrast_statistics(stats: CorpusStats) -> dict[BehaviorCategory, tuple[float, float, float]]:
    """Per category ``(coverage difference, frequency ratio, usage ratio)`` before any transform."""
    out = {}
    for c in CATEGORIES:
        s = stats.per_category[c]
        r_c = s.webshell_file_fraction - s.benign_file_fraction
        r_f = s.webshell_avg_per_file / max(s.benign_avg_per_file, EPSILON)
        r_u = s.webshell_total / max(s.benign_total, EPSILON)
        out[c] = (r_c, r_f, r_u)
    return out


def discrimination_scores(
    stats: CorpusStats,
    params: ScoreParams | None = None,
    transform: RatioTransform | str = RatioTransform.SQUASH,
) -> dict[BehaviorCategory, float]:
    """Score each category as ``alpha*r_c + beta*T(r_f) + gamma*T(r_u)``, clamped at zero.

    ``T`` defaults to ``x / (1 + x)`` so the unbounded ratios share the
    coverage difference's scale.
    """
    params = params or ScoreParams()
    transform = RatioTransform(transform)
    scores = {}
    for c, (r_c, r_f, r_u) in contrast_statistics(stats).items():
        score = params.alpha * r_c + params.beta * transform.apply(r_f) + params.gamma * transform.apply(r_u)
        scores[c] = max(0.0, score)
    return scores


def normalize_weights(
    scores: Mapping[BehaviorCategory, float],
    params: ScoreParams | None = None,
    transform: RatioTransform | str = RatioTransform.SQUASH,
    fingerprint: str = "",
) -> WeightVector:
    values = {c: float(scores.get(c, 0.0)) for c in CATEGORIES}
    if any(v < 0 or not math.isfinite(v) for v in values.values()):
        raise ValueError("scores must be finite and non-negative")
    total = math.fsum(values.values())
    if total <= 0:
        raise UninformativeCorpusError("uninformative corpus: every category scored zero")
    return WeightVector(
        {c: v / total for c, v in values.items()},
        params or ScoreParams(),
        RatioTransform(transform),
        fingerprint,
    )


def compute_weights(
    stats: CorpusStats,
    params: ScoreParams | None = None,
    transform: RatioTransform | str = RatioTransform.SQUASH,
) -> WeightVector:
    params = params or ScoreParams()
    scores = discrimination_scores(stats, params, transform)
    return normalize_weights(scores, params, transform, stats.fingerprint)
