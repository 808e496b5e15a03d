"""Behavioral profiles, weighted similarity, and demonstration selection."""

from __future__ import annotations

import enum
import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from bfad.embeddings import EmbeddingProvider
from bfad.extraction import ExtractedView
from bfad.profiling import Label, WeightVector
from bfad.registry import CATEGORIES, BehaviorCategory
from bfad.scanner import FunctionOccurrence

log = logging.getLogger(__name__)

LIBRARY_FORMAT_VERSION = 1


class ProfileError(RuntimeError):
    def __init__(self, file_id: str, category: BehaviorCategory, cause: Exception):
        self.file_id = file_id
        self.category = category
        super().__init__(f"{file_id}: embedding failed for {category.value}: {cause}")


class LabelRequirement(str, enum.Enum):
    ANY = "any"
    WEBSHELL = "webshell"
    BENIGN = "benign"
    MIX = "mix"


@dataclass
class BehavioralProfile:
    file_id: str
    per_category_text: dict[BehaviorCategory, str] = field(default_factory=dict)
    per_category_embedding: dict[BehaviorCategory, np.ndarray] = field(default_factory=dict)
    label: Label | None = None
    view_text: str = ""

    @property
    def categories(self) -> list[BehaviorCategory]:
        return [c for c in CATEGORIES if c in self.per_category_embedding]


def build_profile(
    view: ExtractedView,
    occurrences: Sequence[FunctionOccurrence],
    provider: EmbeddingProvider,
    file_id: str = "",
    label: Label | str | None = None,
) -> BehavioralProfile:
    """Group critical regions by the categories of the calls they anchor, then embed each group.

    A merged region that anchors calls of several categories contributes its
    text to every one of them.
    """
    grouped: dict[BehaviorCategory, list[str]] = {}
    for region, text in view.critical_regions():
        anchored = {occ.category for occ in occurrences if region.contains(occ.byte_offset)}
        for category in anchored:
            grouped.setdefault(category, []).append(text)

    texts = {c: "\n".join(grouped[c]) for c in CATEGORIES if c in grouped and any(grouped[c])}
    embeddings = {}
    for category, text in texts.items():
        try:
            vec = np.asarray(provider.embed(text), dtype=np.float64)
        except Exception as exc:
            raise ProfileError(file_id, category, exc) from exc
        if vec.shape != (provider.dimension,) or not np.all(np.isfinite(vec)):
            raise ProfileError(file_id, category, ValueError("bad embedding shape or values"))
        embeddings[category] = vec
    return BehavioralProfile(
        file_id=file_id,
        per_category_text=texts,
        per_category_embedding=embeddings,
        label=Label(label) if label is not None else None,
        view_text=view.rendered_text,
    )


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def category_similarity(x: BehavioralProfile, y: BehavioralProfile, category: BehaviorCategory) -> float:
    ex = x.per_category_embedding.get(category)
    ey = y.per_category_embedding.get(category)
    if ex is None or ey is None:
        return 0.0
    return cosine(ex, ey)


def weighted_similarity(x: BehavioralProfile, y: BehavioralProfile, weights: WeightVector) -> float:
    return sum(weights[c] * category_similarity(x, y, c) for c in CATEGORIES)


@dataclass
class DemonstrationLibrary:
    profiles: list[BehavioralProfile]
    weights: WeightVector
    embedding_provider_id: str
    dimension: int = 0

    def __post_init__(self):
        if not self.profiles:
            raise ValueError("demonstration library is empty")
        for p in self.profiles:
            if p.label is None:
                raise ValueError(f"library profile {p.file_id!r} has no label")
        if not self.dimension:
            self.dimension = next(
                (len(v) for p in self.profiles for v in p.per_category_embedding.values()), 0
            )

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "format_version": LIBRARY_FORMAT_VERSION,
            "embedding_provider_id": self.embedding_provider_id,
            "dimension": self.dimension,
            "weights": self.weights.to_dict(),
            "profiles": [
                {"file_id": p.file_id, "label": p.label.value, "categories": [c.value for c in p.categories]}
                for p in self.profiles
            ],
        }
        arrays = {
            f"{i}/{c.value}": vec
            for i, p in enumerate(self.profiles)
            for c, vec in p.per_category_embedding.items()
        }
        np.savez(directory / "vectors.npz", **arrays)
        with open(directory / "texts.jsonl", "w", encoding="utf-8") as fh:
            for p in self.profiles:
                row = {"view_text": p.view_text, "per_category_text": {c.value: t for c, t in p.per_category_text.items()}}
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> DemonstrationLibrary:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        if manifest.get("format_version") != LIBRARY_FORMAT_VERSION:
            raise ValueError(f"unsupported library format version {manifest.get('format_version')}")
        with open(directory / "texts.jsonl", encoding="utf-8") as fh:
            texts = [json.loads(line) for line in fh]
        profiles = []
        with np.load(directory / "vectors.npz") as vectors:
            for i, (entry, text_row) in enumerate(zip(manifest["profiles"], texts, strict=True)):
                categories = [BehaviorCategory(c) for c in entry["categories"]]
                profiles.append(
                    BehavioralProfile(
                        file_id=entry["file_id"],
                        per_category_text={BehaviorCategory(k): v for k, v in text_row["per_category_text"].items()},
                        per_category_embedding={c: vectors[f"{i}/{c.value}"] for c in categories},
                        label=Label(entry["label"]),
                        view_text=text_row["view_text"],
                    )
                )
        return cls(
            profiles,
            WeightVector.from_dict(manifest["weights"]),
            manifest["embedding_provider_id"],
            manifest["dimension"],
        )


def _ranked(target: BehavioralProfile, candidates: Iterable[BehavioralProfile], weights: WeightVector):
    scored = [(p, weighted_similarity(target, p, weights)) for p in candidates]
    scored.sort(key=lambda item: (-item[1], item[0].file_id))
    return scored


def select_demonstration(
    target: BehavioralProfile,
    library: DemonstrationLibrary,
    k: int = 1,
    require_label: LabelRequirement | str = LabelRequirement.ANY,
) -> list[tuple[BehavioralProfile, float]]:
    """Top-``k`` library profiles by weighted similarity, ties broken by file id.

    ``require_label`` restricts candidates to one label, or with ``mix``
    alternates labels in rank order starting from the overall best.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    require_label = LabelRequirement(require_label)
    if not target.per_category_embedding:
        log.warning("%s: no behavioral signal; demonstrations fall back to file id order", target.file_id)
    candidates = [p for p in library.profiles if p.file_id != target.file_id]
    if require_label in (LabelRequirement.WEBSHELL, LabelRequirement.BENIGN):
        wanted = Label(require_label.value)
        candidates = [p for p in candidates if p.label is wanted]
    ranked = _ranked(target, candidates, library.weights)
    if require_label is not LabelRequirement.MIX or not ranked:
        return ranked[:k]

    queues = {
        label: [item for item in ranked if item[0].label is label] for label in (Label.WEBSHELL, Label.BENIGN)
    }
    order = [ranked[0][0].label, Label.BENIGN if ranked[0][0].label is Label.WEBSHELL else Label.WEBSHELL]
    picked: list[tuple[BehavioralProfile, float]] = []
    turn = 0
    while len(picked) < k and any(queues.values()):
        queue = queues[order[turn % 2]] or queues[order[(turn + 1) % 2]]
        picked.append(queue.pop(0))
        turn += 1
    return picked


def render_demonstration(profile: BehavioralProfile) -> str:
    """Demonstration text for the prompt's examples slot: the code view plus its verdict line."""
    verdict = "WebShell" if profile.label is Label.WEBSHELL else "benign"
    return f"{profile.view_text}\nVerdict: {verdict}"

