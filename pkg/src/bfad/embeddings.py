"""Embedding providers used to vectorize per-category code text."""

from __future__ import annotations

import hashlib
import re
import threading
from collections.abc import Sequence
from typing import Protocol, runtime_checkable

import httpx
import numpy as np

DEFAULT_MODEL_ID = "st-codesearch-distilroberta-base"


class EmbeddingError(RuntimeError):
    pass


@runtime_checkable
class EmbeddingProvider(Protocol):
    identifier: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


_TOKEN = re.compile(r"[^\W_]+")


class HashedTokenProvider:
    """Deterministic offline provider: L2-normalized hashed bag of alphanumeric tokens.

    Text without any alphanumeric run falls back to hashing its non-space
    characters (or the raw text) so non-empty input never maps to the zero
    vector.
    """

    def __init__(self, dimension: int = 256):
        if dimension <= 0:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.identifier = f"hashed-token-{dimension}"

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.dimension

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        tokens = [t.lower() for t in _TOKEN.findall(text)]
        if not tokens and text:
            tokens = [ch for ch in text if not ch.isspace()] or [text]
        for token in tokens:
            vec[self._bucket(token)] += 1.0
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


class HttpEmbeddingProvider:
    """Client for an embeddings endpoint speaking ``{"input": [...], "model": id}``."""

    def __init__(
        self,
        endpoint_url: str,
        model_id: str = DEFAULT_MODEL_ID,
        dimension: int | None = None,
        timeout_s: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint_url = endpoint_url
        self.model_id = model_id
        self.identifier = f"http:{model_id}"
        self._dimension = dimension
        self._client = httpx.Client(timeout=timeout_s, transport=transport)
        self._lock = threading.Lock()

    @property
    def dimension(self) -> int:
        if self._dimension is None:
            self._dimension = len(self.embed("<?php"))
        return self._dimension

    def embed_many(self, texts: Sequence[str]) -> list[np.ndarray]:
        try:
            resp = self._client.post(self.endpoint_url, json={"input": list(texts), "model": self.model_id})
            resp.raise_for_status()
            data = resp.json()["data"]
            vectors = [np.asarray(item["embedding"], dtype=np.float64) for item in data]
        except (httpx.HTTPError, KeyError, TypeError, ValueError) as exc:
            raise EmbeddingError(f"embedding request failed: {exc}") from exc
        if len(vectors) != len(texts):
            raise EmbeddingError(f"expected {len(texts)} embeddings, got {len(vectors)}")
        with self._lock:
            for v in vectors:
                if self._dimension is None:
                    self._dimension = len(v)
                if v.shape != (self._dimension,) or not np.all(np.isfinite(v)):
                    raise EmbeddingError("embedding has wrong dimension or non-finite entries")
        return vectors

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


class SentenceTransformerProvider:
    """Local sentence-transformers model; requires the optional dependency."""

    def __init__(self, model_name: str = "flax-sentence-embeddings/" + DEFAULT_MODEL_ID):
        from sentence_transformers import SentenceTransformer

        self._model = SentenceTransformer(model_name)
        self.identifier = f"st:{model_name}"
        self.dimension = int(self._model.get_sentence_embedding_dimension())
        self._lock = threading.Lock()

    def embed(self, text: str) -> np.ndarray:
        with self._lock:
            vec = self._model.encode(text, convert_to_numpy=True)
        return np.asarray(vec, dtype=np.float64)
