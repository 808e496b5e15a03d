"""Context-aware code extraction around critical calls, under a token budget."""

from __future__ import annotations

import enum
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field

from bfad.scanner import FunctionOccurrence, SourceFile

log = logging.getLogger(__name__)

OMISSION_MARKER = "\n/* …omitted… */\n"
DEFAULT_PROMPT_RESERVE = 1024


class RegionOrigin(str, enum.Enum):
    CRITICAL_WINDOW = "CriticalWindow"
    GLOBAL_BACKFILL = "GlobalBackfill"


class Strategy(str, enum.Enum):
    CRITICAL_ONLY = "critical"
    HYBRID = "hybrid"


@dataclass(frozen=True, order=True)
class CodeRegion:
    start: int
    end: int
    origin: RegionOrigin = field(default=RegionOrigin.CRITICAL_WINDOW, compare=False)

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid region [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start

    def contains(self, offset: int) -> bool:
        return self.start <= offset < self.end


def estimate_tokens(text: str) -> int:
    """Default estimator: one token per four UTF-8 bytes, rounded up."""
    return math.ceil(len(text.encode("utf-8")) / 4)


TokenEstimator = Callable[[str], int]

ESTIMATORS: dict[str, TokenEstimator] = {"bytes4": estimate_tokens}


def register_estimator(name: str, estimator: TokenEstimator) -> None:
    ESTIMATORS[name] = estimator


def get_estimator(name: str) -> TokenEstimator:
    try:
        return ESTIMATORS[name]
    except KeyError:
        raise ValueError(f"unknown token estimator {name!r}; known: {sorted(ESTIMATORS)}") from None


@dataclass(frozen=True)
class ExtractionConfig:
    tau: int = 300
    budget_tokens: int = 3072
    strategy: Strategy = Strategy.HYBRID
    token_estimator: str = "bytes4"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be a positive number of bytes")
        if self.budget_tokens <= 0:
            raise ValueError("budget_tokens must be positive")
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        get_estimator(self.token_estimator)

    @classmethod
    def for_context_limit(cls, context_limit: int, reserve: int = DEFAULT_PROMPT_RESERVE, **kwargs) -> ExtractionConfig:
        """Budget = model context limit minus the reserve for system text, demonstration and instructions."""
        return cls(budget_tokens=context_limit - reserve, **kwargs)

    @property
    def estimator(self) -> TokenEstimator:
        return get_estimator(self.token_estimator)


@dataclass(frozen=True)
class ExtractedView:
    regions: tuple[CodeRegion, ...]
    texts: tuple[str, ...]
    rendered_text: str
    estimated_tokens: int
    truncated: bool = False

    @property
    def critical_text(self) -> str:
        return _render_texts(self.regions, self.texts, RegionOrigin.CRITICAL_WINDOW)

    @property
    def backfill_text(self) -> str:
        return _render_texts(self.regions, self.texts, RegionOrigin.GLOBAL_BACKFILL)

    def critical_regions(self) -> list[tuple[CodeRegion, str]]:
        return [
            (r, t) for r, t in zip(self.regions, self.texts) if r.origin is RegionOrigin.CRITICAL_WINDOW
        ]

    def __bool__(self) -> bool:
        return bool(self.regions)


def _is_continuation(byte: int) -> bool:
    return 0x80 <= byte < 0xC0


def _snap_left(content: bytes, i: int) -> int:
    steps = 0
    while 0 < i < len(content) and _is_continuation(content[i]) and steps < 3:
        i -= 1
        steps += 1
    return i


def _snap_right(content: bytes, i: int) -> int:
    steps = 0
    while i < len(content) and _is_continuation(content[i]) and steps < 3:
        i += 1
        steps += 1
    return i


def _decode(content: bytes, region: CodeRegion) -> str:
    return content[region.start : region.end].decode("utf-8", errors="replace")


def _render_texts(
    regions: Sequence[CodeRegion], texts: Sequence[str], origin: RegionOrigin | None = None
) -> str:
    parts: list[str] = []
    last_end: int | None = None
    for region, text in zip(regions, texts):
        if origin is not None and region.origin is not origin:
            continue
        if last_end is not None and region.start != last_end:
            parts.append(OMISSION_MARKER)
        parts.append(text)
        last_end = region.end
    return "".join(parts)


def extract_windows(file: SourceFile, occurrences: Iterable[FunctionOccurrence], tau: int) -> list[CodeRegion]:
    """One ``[p - tau, p + tau)`` window per occurrence, clamped to the file and UTF-8 boundaries."""
    n = file.byte_length
    regions = []
    for occ in occurrences:
        if not 0 <= occ.byte_offset < n:
            raise ValueError(f"occurrence offset {occ.byte_offset} outside file of {n} bytes")
        start = _snap_left(file.content, max(0, occ.byte_offset - tau))
        end = _snap_right(file.content, min(n, occ.byte_offset + tau))
        regions.append(CodeRegion(start, end, RegionOrigin.CRITICAL_WINDOW))
    return regions


def merge_regions(regions: Iterable[CodeRegion]) -> list[CodeRegion]:
    """Union of intervals; overlapping or touching regions coalesce."""
    merged: list[CodeRegion] = []
    for region in sorted(regions, key=lambda r: (r.start, r.end)):
        if merged and region.start <= merged[-1].end:
            last = merged[-1]
            critical = RegionOrigin.CRITICAL_WINDOW in (last.origin, region.origin)
            merged[-1] = CodeRegion(
                last.start,
                max(last.end, region.end),
                RegionOrigin.CRITICAL_WINDOW if critical else last.origin,
            )
        else:
            merged.append(region)
    return merged


def uncovered_ranges(length: int, regions: Sequence[CodeRegion]) -> list[tuple[int, int]]:
    gaps = []
    cursor = 0
    for region in regions:
        if region.start > cursor:
            gaps.append((cursor, region.start))
        cursor = max(cursor, region.end)
    if cursor < length:
        gaps.append((cursor, length))
    return gaps


def _backfill_chunks(content: bytes, gaps: Iterable[tuple[int, int]], chunk_bytes: int):
    for start, end in gaps:
        pos = start
        while pos < end:
            stop = end if end - pos <= chunk_bytes else _snap_left(content, pos + chunk_bytes)
            if stop <= pos:
                stop = min(end, pos + chunk_bytes)
            yield CodeRegion(pos, stop, RegionOrigin.GLOBAL_BACKFILL)
            pos = stop


class _ViewBuilder:
    def __init__(self, content: bytes, estimator: TokenEstimator):
        self.content = content
        self.estimator = estimator
        self.regions: list[CodeRegion] = []
        self.texts: list[str] = []

    def cost_with(self, region: CodeRegion | None = None) -> int:
        regions, texts = self.regions, self.texts
        if region is not None:
            regions = regions + [region]
            texts = texts + [_decode(self.content, region)]
            order = sorted(range(len(regions)), key=lambda k: regions[k].start)
            regions = [regions[k] for k in order]
            texts = [texts[k] for k in order]
        return self.estimator(_render_texts(regions, texts))

    def add(self, region: CodeRegion) -> None:
        self.regions.append(region)
        self.texts.append(_decode(self.content, region))
        order = sorted(range(len(self.regions)), key=lambda k: self.regions[k].start)
        self.regions = [self.regions[k] for k in order]
        self.texts = [self.texts[k] for k in order]

    def build(self, truncated: bool) -> ExtractedView:
        rendered = _render_texts(self.regions, self.texts)
        return ExtractedView(
            tuple(self.regions), tuple(self.texts), rendered, self.estimator(rendered), truncated
        )


def _longest_fitting_prefix(builder: _ViewBuilder, region: CodeRegion, budget: int) -> CodeRegion | None:
    lo, hi = region.start, region.end  # invariant: [start, lo) fits, [start, hi+1) does not
    best = None
    while lo < hi:
        mid = (lo + hi + 1) // 2
        end = _snap_left(builder.content, mid)
        if end <= region.start:
            hi = mid - 1
            continue
        candidate = CodeRegion(region.start, end, region.origin)
        if builder.cost_with(candidate) <= budget:
            best = candidate
            lo = mid
        else:
            hi = mid - 1
    return best


def fill_budget(file: SourceFile, merged: Sequence[CodeRegion], config: ExtractionConfig) -> ExtractedView:
    """Select critical regions, then backfill uncovered code, without exceeding the budget.

    Critical regions are kept in document order until one no longer fits; the
    remainder is dropped with a warning. Under the hybrid strategy, uncovered
    byte ranges are then appended in document order in chunks of at most
    ``2 * tau`` bytes, stopping at the first chunk that would overflow.
    """
    builder = _ViewBuilder(file.content, config.estimator)
    budget = config.budget_tokens
    truncated = False
    for index, region in enumerate(merged):
        if builder.cost_with(region) <= budget:
            builder.add(region)
            continue
        truncated = True
        if index == 0:
            prefix = _longest_fitting_prefix(builder, region, budget)
            if prefix is not None:
                builder.add(prefix)
            log.warning(
                "%s: budget of %d tokens is smaller than the first critical window [%d, %d); keeping %d bytes",
                file.path, budget, region.start, region.end, len(prefix) if prefix else 0,
            )
        else:
            log.warning(
                "%s: budget of %d tokens exhausted; dropped %d of %d critical regions",
                file.path, budget, len(merged) - index, len(merged),
            )
        break

    if config.strategy is Strategy.HYBRID and not truncated and builder.cost_with() < budget:
        for chunk in _backfill_chunks(file.content, uncovered_ranges(file.byte_length, merged), 2 * config.tau):
            if builder.cost_with(chunk) > budget:
                break
            builder.add(chunk)
    return builder.build(truncated)


def extract(file: SourceFile, occurrences: Sequence[FunctionOccurrence], config: ExtractionConfig) -> ExtractedView:
    """Windows around occurrences, merged, then fitted to the budget."""
    merged = merge_regions(extract_windows(file, occurrences, config.tau))
    return fill_budget(file, merged, config)
