"""In-memory cosine vector index with a deterministic test embedder.

Exact search over a few hundred documents beats an approximate external
store at this scale and keeps retrieval fully reproducible. The bundled
embedder hashes word tokens into a fixed bucket space and projects the
bag-of-words through a seeded random matrix; any callable text -> vector
can replace it.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DuplicateId, EmbedderFailure, EmptyCorpus
from .ontology import Document

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Seeded random projection of a token-hash bag-of-words.

    Deterministic across processes and platforms: token hashing uses crc32
    and the projection matrix comes from a seeded generator.
    """

    def __init__(self, dim: int = 64, seed: int = 0, buckets: int = 4096):
        self.dim = dim
        self.buckets = buckets
        rng = np.random.default_rng(seed)
        self._projection = rng.standard_normal((buckets, dim))

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for token in _TOKEN_RE.findall(text.lower()):
            bucket = zlib.crc32(token.encode("utf-8")) % self.buckets
            vec += self._projection[bucket]
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


@dataclass
class VectorIndex:
    dim: int
    entries: list[tuple[str, dict, np.ndarray]] = field(default_factory=list)

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _, _ in self.entries]

    def save(self, path: str | Path) -> None:
        payload = {
            "dim": self.dim,
            "entries": [
                {"doc_id": doc_id, "metadata": meta, "vector": vec.tolist()}
                for doc_id, meta, vec in self.entries
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        index = cls(dim=int(payload["dim"]))
        for item in payload["entries"]:
            index.entries.append(
                (item["doc_id"], item["metadata"], np.array(item["vector"], dtype=np.float64))
            )
        return index


def index_documents(docs: Sequence[Document], embedder: Callable[[str], np.ndarray]) -> VectorIndex:
    """Embed every document into a fresh index; ids must be unique."""
    if not docs:
        raise EmptyCorpus("document list")
    seen: set[str] = set()
    entries: list[tuple[str, dict, np.ndarray]] = []
    dim: Optional[int] = None
    for doc in docs:
        if doc.doc_id in seen:
            raise DuplicateId(doc.doc_id)
        seen.add(doc.doc_id)
        try:
            vec = np.asarray(embedder(doc.text), dtype=np.float64)
        except Exception as exc:
            raise EmbedderFailure(doc.doc_id, exc) from exc
        if dim is None:
            dim = len(vec)
        entries.append((doc.doc_id, dict(doc.metadata), vec))
    index = VectorIndex(dim=dim or 0)
    index.entries = entries
    return index


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb))


def retrieve(
    index: VectorIndex,
    query: str | np.ndarray,
    embedder: Optional[Callable[[str], np.ndarray]] = None,
    allow_list: Optional[set[str]] = None,
    k: int = 5,
    metadata_filter: Optional[dict] = None,
) -> list[tuple[str, dict, float]]:
    """Cosine top-k restricted to the allow-list and metadata filter.

    ``query`` may be raw text (requires ``embedder``) or a precomputed
    vector. Ties on score break toward the smaller doc_id. Returns
    (doc_id, metadata, score) triples; an empty result is legitimate.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(query, str):
        if embedder is None:
            raise ValueError("retrieving by text requires an embedder")
        qvec = np.asarray(embedder(query), dtype=np.float64)
    else:
        qvec = np.asarray(query, dtype=np.float64)

    scored = []
    for doc_id, meta, vec in index.entries:
        if allow_list is not None and doc_id not in allow_list:
            continue
        if metadata_filter is not None:
            if any(meta.get(key) != val for key, val in metadata_filter.items()):
                continue
        scored.append((doc_id, meta, _cosine(qvec, vec)))
    scored.sort(key=lambda item: (-item[2], item[0]))
    return scored[:k]
