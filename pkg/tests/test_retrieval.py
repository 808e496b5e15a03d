import logging
import random

import numpy as np
import pytest

from bfad.embeddings import HashedTokenProvider
from bfad.extraction import ExtractionConfig, extract
from bfad.profiling import Label, WeightVector, normalize_weights
from bfad.registry import CATEGORIES, BehaviorCategory
from bfad.retrieval import (
    BehavioralProfile,
    DemonstrationLibrary,
    ProfileError,
    build_profile,
    category_similarity,
    cosine,
    render_demonstration,
    select_demonstration,
    weighted_similarity,
)
from bfad.scanner import SourceFile, scan

CE = BehaviorCategory.CODE_EXECUTION
PE = BehaviorCategory.PROGRAM_EXECUTION
OE = BehaviorCategory.OBFUSCATION_AND_ENCRYPTION
PROVIDER = HashedTokenProvider()


class TableProvider:
    """Stub provider returning preset vectors keyed by text."""

    identifier = "table"

    def __init__(self, table, dimension=3):
        self.table = table
        self.dimension = dimension

    def embed(self, text):
        return np.asarray(self.table[text], dtype=float)


class FailingProvider:
    identifier = "broken"
    dimension = 4

    def embed(self, text):
        raise OSError("down")


def profile_of(text, registry, file_id="t.php", label=None, tau=300, provider=PROVIDER):
    f = SourceFile.from_text(text, file_id)
    occs = scan(f, registry)
    view = extract(f, occs, ExtractionConfig(tau=tau, budget_tokens=100_000))
    return build_profile(view, occs, provider, file_id=file_id, label=label)


def random_profile(rng, file_id, label=Label.WEBSHELL, dim=8):
    cats = [c for c in CATEGORIES if rng.random() < 0.6]
    return BehavioralProfile(
        file_id,
        {c: "x" for c in cats},
        {c: np.array([rng.gauss(0, 1) for _ in range(dim)]) for c in cats},
        label,
    )


def random_weights(rng):
    return normalize_weights({c: rng.random() for c in CATEGORIES})


def test_single_category_profile(registry):
    p = profile_of("<?php\n$x = 1;\neval($_POST['a']);\n", registry)
    assert p.categories == [CE]
    assert list(p.per_category_text) == [CE]
    assert p.per_category_embedding[CE].shape == (256,)


def test_empty_profile(registry):
    p = profile_of("<?php\necho 'hello';\n", registry)
    assert p.per_category_text == {} and p.per_category_embedding == {}


def test_merged_window_shared_by_both_categories(registry):
    head = "<?php\n" + " " * 94  # 100 bytes
    text = head + "eval(" + " " * 5 + "base64_encode($x));\n" + "$y = 1;\n" * 40
    occs = scan(SourceFile.from_text(text), registry)
    assert [(o.byte_offset, o.category) for o in occs] == [(100, CE), (110, OE)]
    p = profile_of(text, registry, tau=100)
    assert p.per_category_text[CE] == p.per_category_text[OE] == text[0:210]


def test_region_text_grouped_per_category(registry):
    pad = "\n$pad = 1;" * 80
    text = "<?php\nexec($a);" + pad + "eval($b);" + pad + "system($c);" + pad
    p = profile_of(text, registry, tau=20)
    f = SourceFile.from_text(text)
    view = extract(f, scan(f, registry), ExtractionConfig(tau=20, budget_tokens=100_000))
    region_texts = [t for _, t in view.critical_regions()]
    assert len(region_texts) == 3
    assert p.per_category_text[PE] == region_texts[0] + "\n" + region_texts[2]
    assert p.per_category_text[CE] == region_texts[1]
    assert "exec(" in p.per_category_text[PE] and "system(" in p.per_category_text[PE]
    assert "eval(" not in p.per_category_text[PE]


def test_provider_failure_names_file_and_category(registry):
    with pytest.raises(ProfileError) as info:
        profile_of("<?php eval($x);", registry, file_id="bad.php", provider=FailingProvider())
    assert info.value.file_id == "bad.php" and info.value.category is CE


def test_hashed_provider_properties():
    a = PROVIDER.embed("eval($x)")
    assert np.array_equal(a, PROVIDER.embed("eval($x)"))
    assert np.linalg.norm(a) == pytest.approx(1.0)
    assert np.array_equal(PROVIDER.embed("EVAL X"), PROVIDER.embed("eval($x)"))
    assert np.linalg.norm(PROVIDER.embed("$$(){}")) > 0


def test_category_similarity_cases():
    table = {"a": [1, 0, 0], "b": [0, 1, 0], "c": [1, 0, 0]}
    provider = TableProvider(table)
    x = BehavioralProfile("x", {CE: "a"}, {CE: provider.embed("a")})
    y = BehavioralProfile("y", {CE: "b", PE: "c"}, {CE: provider.embed("b"), PE: provider.embed("c")})
    x2 = BehavioralProfile("x2", {CE: "c"}, {CE: provider.embed("c")})
    assert category_similarity(x, y, CE) == 0.0
    assert category_similarity(x, y, PE) == 0.0
    assert category_similarity(x, x2, CE) == pytest.approx(1.0, abs=1e-9)
    assert cosine(np.zeros(3), np.ones(3)) == 0.0


def test_self_similarity_full_and_partial(registry):
    rng = random.Random(1)
    w = random_weights(rng)
    full = BehavioralProfile("a", {c: "x" for c in CATEGORIES}, {c: np.arange(1.0, 5.0) + i for i, c in enumerate(CATEGORIES)})
    assert weighted_similarity(full, full, w) == pytest.approx(1.0, abs=1e-9)
    p = profile_of("<?php\nexec($a);\neval($b);\n", registry)
    assert set(p.categories) == {CE, PE}
    assert weighted_similarity(p, p, w) == pytest.approx(w[CE] + w[PE], abs=1e-9)


def test_pairwise_oracle():
    rng = random.Random(42)
    profiles = [random_profile(rng, f"p{i}") for i in range(10)]
    w = random_weights(rng)
    for x in profiles:
        for y in profiles:
            want = 0.0
            for c in CATEGORIES:
                if c in x.per_category_embedding and c in y.per_category_embedding:
                    a, b = x.per_category_embedding[c], y.per_category_embedding[c]
                    want += w[c] * float(a @ b) / float(np.sqrt(a @ a) * np.sqrt(b @ b))
            got = weighted_similarity(x, y, w)
            assert got == pytest.approx(want, abs=1e-12)
            assert got == pytest.approx(weighted_similarity(y, x, w), abs=1e-15)
            assert abs(got) <= 1 + 1e-12


def test_zero_weight_categories_do_not_matter():
    rng = random.Random(3)
    w = normalize_weights({CE: 1.0, PE: 2.0})
    target = random_profile(rng, "t")
    a = random_profile(rng, "a")
    b = BehavioralProfile("b", {}, {c: v for c, v in a.per_category_embedding.items() if c in (CE, PE)})
    b.per_category_embedding[OE] = np.ones(8)
    assert weighted_similarity(target, a, w) == weighted_similarity(target, b, w)


def test_duplicate_ranks_first(registry):
    text = "<?php\nexec($a);\neval($b);\narray_map('f', $c);\nfsockopen($h);\nphpinfo();\nbase64_encode($d);\n"
    target = profile_of(text, registry, "target.php")
    assert len(target.categories) == 6
    others = [
        profile_of("<?php\neval($q);\n", registry, "a.php", Label.BENIGN),
        profile_of(text, registry, "dup.php", Label.WEBSHELL),
        profile_of("<?php\nsystem($z);\n", registry, "b.php", Label.WEBSHELL),
    ]
    lib = DemonstrationLibrary(others, WeightVector.uniform(), PROVIDER.identifier)
    (best, score), = select_demonstration(target, lib)
    assert best.file_id == "dup.php" and score == pytest.approx(1.0, abs=1e-9)


def test_no_signal_falls_back_to_file_id(registry, caplog):
    target = profile_of("<?php echo 1;", registry, "t.php")
    lib = DemonstrationLibrary(
        [profile_of("<?php eval($x);", registry, n, Label.WEBSHELL) for n in ("c.php", "a.php", "b.php")],
        WeightVector.uniform(),
        PROVIDER.identifier,
    )
    with caplog.at_level(logging.WARNING):
        ranked = select_demonstration(target, lib, k=3)
    assert [p.file_id for p, _ in ranked] == ["a.php", "b.php", "c.php"]
    assert all(s == 0.0 for _, s in ranked)
    assert "no behavioral signal" in caplog.text


def test_target_excluded_and_permutation_invariant():
    rng = random.Random(9)
    profiles = [random_profile(rng, f"p{i:02d}", rng.choice(list(Label))) for i in range(25)]
    w = random_weights(rng)
    target = profiles[4]
    picks = []
    for seed in range(5):
        shuffled = profiles[:]
        random.Random(seed).shuffle(shuffled)
        ranked = select_demonstration(target, DemonstrationLibrary(shuffled, w, "x"), k=5)
        picks.append([(p.file_id, s) for p, s in ranked])
    assert all(p == picks[0] for p in picks)
    assert "p04" not in [fid for fid, _ in picks[0]]


def test_label_requirements():
    rng = random.Random(10)
    profiles = [random_profile(rng, f"p{i:02d}", Label.WEBSHELL if i % 3 else Label.BENIGN) for i in range(30)]
    lib = DemonstrationLibrary(profiles, random_weights(rng), "x")
    target = random_profile(rng, "t")
    assert all(p.label is Label.BENIGN for p, _ in select_demonstration(target, lib, 4, "benign"))
    assert all(p.label is Label.WEBSHELL for p, _ in select_demonstration(target, lib, 4, "webshell"))
    mixed = select_demonstration(target, lib, 4, "mix")
    best = select_demonstration(target, lib, 1)[0]
    assert mixed[0] == best
    labels = [p.label for p, _ in mixed]
    assert all(a is not b for a, b in zip(labels, labels[1:]))
    with pytest.raises(ValueError):
        select_demonstration(target, lib, 0)


def test_library_round_trip(tmp_path, registry):
    profiles = [
        profile_of("<?php\nexec($a);\nbase64_decode($b);\n", registry, "a.php", Label.WEBSHELL),
        profile_of("<?php\ngetenv('X');\n", registry, "b.php", Label.BENIGN),
    ]
    lib = DemonstrationLibrary(profiles, normalize_weights({CE: 1.0, PE: 1.0}), PROVIDER.identifier, 256)
    lib.save(tmp_path / "lib")
    loaded = DemonstrationLibrary.load(tmp_path / "lib")
    assert loaded.weights == lib.weights and loaded.dimension == 256
    for a, b in zip(lib.profiles, loaded.profiles):
        assert (a.file_id, a.label, a.per_category_text, a.view_text) == (b.file_id, b.label, b.per_category_text, b.view_text)
        assert a.categories == b.categories
        assert all(np.array_equal(a.per_category_embedding[c], b.per_category_embedding[c]) for c in a.categories)


def test_library_requires_labels():
    with pytest.raises(ValueError):
        DemonstrationLibrary([BehavioralProfile("x")], WeightVector.uniform(), "x")
    with pytest.raises(ValueError):
        DemonstrationLibrary([], WeightVector.uniform(), "x")


def test_render_demonstration():
    p = BehavioralProfile("x", label=Label.WEBSHELL, view_text="<?php eval($x);")
    assert render_demonstration(p) == "<?php eval($x);\nVerdict: WebShell"
    p = BehavioralProfile("x", label=Label.BENIGN, view_text="<?php")
    assert render_demonstration(p).endswith("\nVerdict: benign")
