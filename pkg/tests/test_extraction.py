import logging
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bfad.extraction import (
    OMISSION_MARKER,
    CodeRegion,
    ExtractionConfig,
    RegionOrigin,
    Strategy,
    estimate_tokens,
    extract,
    extract_windows,
    fill_budget,
    merge_regions,
)
from bfad.registry import BehaviorCategory
from bfad.scanner import FunctionOccurrence, SourceFile

from oracles import coverage_oracle

CW, GB = RegionOrigin.CRITICAL_WINDOW, RegionOrigin.GLOBAL_BACKFILL


def occ(p):
    return FunctionOccurrence(p, "eval", BehaviorCategory.CODE_EXECUTION, 1)


def ascii_file(n, seed=0):
    rng = random.Random(seed)
    return SourceFile("f.php", bytes(rng.choice(b"abcdefgh ;\n") for _ in range(n)))


def spans(regions):
    return [(r.start, r.end) for r in regions]


# --- estimate_tokens -----------------------------------------------------------

@pytest.mark.parametrize("text,tokens", [("", 0), ("abcdefgh", 2), ("abcdefghij", 3), ("é", 1)])
def test_estimate_tokens(text, tokens):
    assert estimate_tokens(text) == tokens


# --- extract_windows -----------------------------------------------------------

def test_window_clamped_both_ends():
    assert spans(extract_windows(ascii_file(24), [occ(6)], 100)) == [(0, 24)]


def test_window_formula():
    assert spans(extract_windows(ascii_file(2000), [occ(500)], 100)) == [(400, 600)]


def test_windows_independent_before_merge():
    assert spans(extract_windows(ascii_file(2000), [occ(100), occ(150)], 100)) == [(0, 200), (50, 250)]


def test_window_snaps_to_utf8_boundaries():
    content = ("ab" + "☕" * 10).encode()  # each cup is 3 bytes
    f = SourceFile("u.php", content)
    (r,) = extract_windows(f, [occ(5)], 2)
    assert r.start <= 3 and r.end >= 7
    content[r.start : r.end].decode("utf-8")


def test_window_rejects_foreign_offset():
    with pytest.raises(ValueError):
        extract_windows(ascii_file(10), [occ(10)], 3)


# --- merge_regions -------------------------------------------------------------

def test_merge_example():
    got = merge_regions([CodeRegion(0, 50), CodeRegion(40, 90), CodeRegion(100, 120)])
    assert spans(got) == [(0, 90), (100, 120)]


def test_merge_empty_and_touching():
    assert merge_regions([]) == []
    assert spans(merge_regions([CodeRegion(5, 10), CodeRegion(10, 12)])) == [(5, 12)]


def test_merge_origin_prefers_critical():
    (r,) = merge_regions([CodeRegion(0, 10, GB), CodeRegion(5, 20, CW)])
    assert r.origin is CW
    (r,) = merge_regions([CodeRegion(0, 10, GB), CodeRegion(5, 20, GB)])
    assert r.origin is GB


intervals = st.lists(
    st.tuples(st.integers(0, 300), st.integers(1, 60)).map(lambda t: CodeRegion(t[0], t[0] + t[1])), max_size=40
)


@settings(max_examples=200, deadline=None)
@given(intervals)
def test_merge_matches_bitmap_oracle(regions):
    assert spans(merge_regions(regions)) == coverage_oracle(regions)


# --- fill_budget ---------------------------------------------------------------

def test_no_occurrences_hybrid_prefix_backfill():
    f = ascii_file(4000)
    view = fill_budget(f, [], ExtractionConfig(tau=100, budget_tokens=100, strategy=Strategy.HYBRID))
    assert view.estimated_tokens <= 100
    assert all(r.origin is GB for r in view.regions)
    assert spans(view.regions) == [(0, 200), (200, 400)]
    assert view.rendered_text == f.content[:400].decode()


def test_full_coverage_means_no_backfill():
    f = ascii_file(300)
    merged = [CodeRegion(0, 300, CW)]
    view = fill_budget(f, merged, ExtractionConfig(tau=100, budget_tokens=1000))
    assert spans(view.regions) == [(0, 300)]
    assert view.rendered_text == f.content.decode()


def reference_fill(content: bytes, window, tau, budget):
    """Step-through re-implementation of the hybrid fill for one ASCII window.

    Candidates are 2*tau chunks of the gaps before and after the window in
    document order; each is kept while ceil(rendered bytes / 4) stays in budget.
    """
    chosen = [window]
    gaps = [(0, window[0]), (window[1], len(content))]
    candidates = []
    for a, b in gaps:
        pos = a
        while pos < b:
            candidates.append((pos, min(b, pos + 2 * tau)))
            pos = min(b, pos + 2 * tau)

    def render(parts):
        parts = sorted(parts)
        out, last = [], None
        for s, e in parts:
            if last is not None and s != last:
                out.append(OMISSION_MARKER.encode())
            out.append(content[s:e])
            last = e
        return b"".join(out)

    for cand in candidates:
        trial = chosen + [cand]
        if -(-len(render(trial)) // 4) > budget:
            break
        chosen = trial
    return sorted(chosen), render(chosen).decode()


def test_hybrid_fill_matches_reference():
    f = ascii_file(2000, seed=3)
    cfg = ExtractionConfig(tau=100, budget_tokens=200, strategy=Strategy.HYBRID)
    view = fill_budget(f, [CodeRegion(400, 600, CW)], cfg)
    want_spans, want_text = reference_fill(f.content, (400, 600), 100, 200)
    assert spans(view.regions) == want_spans
    assert view.rendered_text == want_text
    assert view.estimated_tokens <= 200
    # backfill draws from [0, 400) before [600, 2000)
    backfill = [r for r in view.regions if r.origin is GB]
    assert backfill[0].start == 0 and all(r.end <= 400 or r.start >= 600 for r in backfill)


@pytest.mark.parametrize("budget", [60, 90, 130, 260, 400, 800])
def test_hybrid_fill_reference_budgets(budget):
    f = ascii_file(2000, seed=budget)
    view = fill_budget(f, [CodeRegion(400, 600, CW)], ExtractionConfig(tau=100, budget_tokens=budget))
    want_spans, want_text = reference_fill(f.content, (400, 600), 100, budget)
    assert spans(view.regions) == want_spans
    assert view.rendered_text == want_text


def test_critical_only_never_backfills():
    f = ascii_file(2000)
    view = fill_budget(f, [CodeRegion(400, 600, CW)], ExtractionConfig(tau=100, budget_tokens=5000, strategy=Strategy.CRITICAL_ONLY))
    assert spans(view.regions) == [(400, 600)]


def test_budget_smaller_than_first_window(caplog):
    f = ascii_file(2000)
    cfg = ExtractionConfig(tau=100, budget_tokens=10, strategy=Strategy.HYBRID)
    with caplog.at_level(logging.WARNING, logger="bfad.extraction"):
        view = fill_budget(f, [CodeRegion(400, 600, CW), CodeRegion(900, 1100, CW)], cfg)
    assert spans(view.regions) == [(400, 440)]
    assert view.truncated and view.estimated_tokens == 10
    assert "smaller than the first critical window" in caplog.text


def test_trailing_regions_dropped_with_warning(caplog):
    f = ascii_file(2000)
    cfg = ExtractionConfig(tau=100, budget_tokens=60, strategy=Strategy.CRITICAL_ONLY)
    with caplog.at_level(logging.WARNING, logger="bfad.extraction"):
        view = fill_budget(f, [CodeRegion(0, 200, CW), CodeRegion(500, 700, CW)], cfg)
    assert spans(view.regions) == [(0, 200)]
    assert view.truncated
    assert "dropped 1 of 2" in caplog.text


def test_view_text_slots():
    f = SourceFile("x.php", b"A" * 100 + b"B" * 100 + b"C" * 100)
    view = fill_budget(f, [CodeRegion(100, 200, CW)], ExtractionConfig(tau=25, budget_tokens=1000))
    assert view.critical_text == "B" * 100
    assert view.backfill_text == "A" * 100 + OMISSION_MARKER + "C" * 100
    assert view.rendered_text == f.content.decode()


def test_marker_between_gaps():
    f = SourceFile("x.php", b"A" * 100 + b"B" * 100 + b"C" * 100)
    view = fill_budget(f, [CodeRegion(0, 50, CW), CodeRegion(250, 300, CW)], ExtractionConfig(tau=25, budget_tokens=1000, strategy="critical"))
    assert view.rendered_text == "A" * 50 + OMISSION_MARKER + "C" * 50


def test_config_validation():
    with pytest.raises(ValueError):
        ExtractionConfig(tau=0)
    with pytest.raises(ValueError):
        ExtractionConfig(budget_tokens=0)
    with pytest.raises(ValueError):
        ExtractionConfig(token_estimator="nope")
    assert ExtractionConfig.for_context_limit(8192).budget_tokens == 8192 - 1024


# --- properties over generated files -------------------------------------------

def random_case(seed):
    rng = random.Random(seed)
    n = rng.randint(1, 3000)
    f = ascii_file(n, seed)
    offsets = sorted(rng.sample(range(n), rng.randint(0, min(8, n))))
    return f, [occ(p) for p in offsets], rng


@pytest.mark.parametrize("seed", range(40))
def test_view_is_subsequence_with_markers(seed):
    f, occs, rng = random_case(seed)
    cfg = ExtractionConfig(tau=rng.choice([20, 100, 300]), budget_tokens=rng.randint(50, 2000))
    view = extract(f, occs, cfg)
    pieces = view.rendered_text.split(OMISSION_MARKER)
    pos = 0
    for piece in pieces:
        idx = f.content.find(piece.encode(), pos)
        assert idx >= 0
        pos = idx + len(piece.encode())
    starts = [r.start for r in view.regions]
    assert starts == sorted(starts)
    assert all(a.end <= b.start for a, b in zip(view.regions, view.regions[1:]))


@pytest.mark.parametrize("seed", range(40))
def test_tau_monotone_and_strategy_independent(seed):
    f, occs, _ = random_case(seed)
    covered = []
    for tau in (50, 100, 200, 300):
        merged = merge_regions(extract_windows(f, occs, tau))
        covered.append(sum(len(r) for r in merged))
        big = 10**6
        crit = fill_budget(f, merged, ExtractionConfig(tau=tau, budget_tokens=big, strategy="critical"))
        hyb = fill_budget(f, merged, ExtractionConfig(tau=tau, budget_tokens=big, strategy="hybrid"))
        assert [r for r in crit.regions] == [r for r in hyb.regions if r.origin is CW]
    assert covered == sorted(covered)
