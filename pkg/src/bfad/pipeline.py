"""Per-file detection pipeline: scan, extract, profile, retrieve, prompt, classify."""

from __future__ import annotations

import enum
import logging
import os
from collections.abc import Iterable
from dataclasses import dataclass, field

from bfad.embeddings import EmbeddingProvider
from bfad.extraction import ExtractedView, ExtractionConfig, extract
from bfad.llm import ChatClassifier, PromptBundle, Verdict, build_prompt
from bfad.profiling import (
    CorpusStats,
    Label,
    RatioTransform,
    ScoreParams,
    UninformativeCorpusError,
    WeightVector,
    compute_weights,
    corpus_fingerprint,
    stats_from_counts,
)
from bfad.registry import CriticalFunctionRegistry
from bfad.retrieval import (
    BehavioralProfile,
    DemonstrationLibrary,
    LabelRequirement,
    build_profile,
    render_demonstration,
    select_demonstration,
)
from bfad.scanner import FunctionOccurrence, ScanOptions, SourceFile, count_by_category, scan

log = logging.getLogger(__name__)


class PromptMode(str, enum.Enum):
    BFAD = "bfad"
    # Whole file (prefix-truncated to the budget) in the source-code slot, no demonstration.
    VANILLA = "vanilla"


@dataclass(frozen=True)
class DetectorSettings:
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    scan: ScanOptions = field(default_factory=ScanOptions)
    k: int = 1
    require_label: LabelRequirement = LabelRequirement.ANY
    mode: PromptMode = PromptMode.BFAD


@dataclass
class Analysis:
    source: SourceFile
    occurrences: list[FunctionOccurrence]
    view: ExtractedView
    profile: BehavioralProfile | None
    demonstrations: list[tuple[BehavioralProfile, float]]
    bundle: PromptBundle


def file_id_for(source: SourceFile) -> str:
    """Stable id: the real path for on-disk files, so one file never gets two spellings."""
    return os.path.realpath(source.path) if os.path.isfile(source.path) else source.path


def _truncate_to_budget(text: str, budget: int, estimator) -> str:
    if estimator(text) <= budget:
        return text
    lo, hi = 0, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if estimator(text[:mid]) <= budget:
            lo = mid
        else:
            hi = mid - 1
    return text[:lo]


class Detector:
    def __init__(
        self,
        registry: CriticalFunctionRegistry,
        provider: EmbeddingProvider,
        classifier: ChatClassifier,
        library: DemonstrationLibrary | None = None,
        settings: DetectorSettings | None = None,
    ):
        self.registry = registry
        self.provider = provider
        self.classifier = classifier
        self.library = library
        self.settings = settings or DetectorSettings()

    def analyze(self, source: SourceFile) -> Analysis:
        s = self.settings
        occurrences = scan(source, self.registry, s.scan)
        view = extract(source, occurrences, s.extraction)
        if s.mode is PromptMode.VANILLA:
            full = _truncate_to_budget(source.text(), s.extraction.budget_tokens, s.extraction.estimator)
            bundle = build_prompt(None, None, global_snippets=full, estimator=s.extraction.estimator)
            return Analysis(source, occurrences, view, None, [], bundle)

        profile = build_profile(view, occurrences, self.provider, file_id=file_id_for(source))
        demos: list[tuple[BehavioralProfile, float]] = []
        if self.library is not None:
            demos = select_demonstration(profile, self.library, s.k, s.require_label)
        demo_text = "\n\n".join(render_demonstration(p) for p, _ in demos) or None
        bundle = build_prompt(view, demo_text, estimator=s.extraction.estimator)
        return Analysis(source, occurrences, view, profile, demos, bundle)

    def classify(self, analysis: Analysis) -> Verdict:
        return self.classifier.classify(analysis.bundle)


def build_library(
    entries: Iterable[tuple[SourceFile, Label]],
    registry: CriticalFunctionRegistry,
    provider: EmbeddingProvider,
    extraction: ExtractionConfig,
    scan_options: ScanOptions | None = None,
    weights: WeightVector | None = None,
    params: ScoreParams | None = None,
    transform: RatioTransform | str = RatioTransform.SQUASH,
    uniform_fallback: bool = False,
) -> tuple[DemonstrationLibrary, CorpusStats]:
    """Profile every labeled file and compute weights from the same files.

    Weights passed in explicitly are used as given; the corpus statistics are
    still returned for reporting.
    """
    entries = list(entries)
    rows = []
    profiles = []
    for source, label in entries:
        occurrences = scan(source, registry, scan_options)
        rows.append((count_by_category(occurrences), Label(label)))
        view = extract(source, occurrences, extraction)
        profiles.append(build_profile(view, occurrences, provider, file_id=file_id_for(source), label=label))
    stats = stats_from_counts(rows, corpus_fingerprint(entries))
    if weights is None:
        try:
            weights = compute_weights(stats, params, transform)
        except UninformativeCorpusError:
            if not uniform_fallback:
                raise
            log.warning("uninformative corpus; falling back to uniform weights")
            weights = WeightVector.uniform()
    return DemonstrationLibrary(profiles, weights, provider.identifier, provider.dimension), stats

