"""Exact cosine k-nearest-neighbor search over pooled slide embeddings.

Deliberately a brute-force scan: at corpus scale (<= ~10^4 records,
d <= 1024) a full matrix product is milliseconds and keeps results
bit-stable, which the golden tests rely on. Similarity ties break by
ascending id.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import read_features, write_features
from .errors import DimensionMismatch, DuplicateId, EmptyIndex, EmptyInput, ZeroVector


@dataclass
class Neighbor:
    id: str
    similarity: float
    category: str


@dataclass(eq=False)
class RetrievalIndex:
    ids: list[str]
    embeddings: np.ndarray  # N x d, unit rows
    categories: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def category_set(self) -> set[str]:
        return set(self.categories)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for zero vectors")
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def build_index(records: list[tuple[str, np.ndarray, str]]) -> RetrievalIndex:
    """Build an immutable index from (id, pooled embedding, category) triples.

    Embeddings are re-normalized to unit length; iteration order equals
    input order.
    """
    if not records:
        raise EmptyInput("cannot build an index from zero records")
    ids: list[str] = []
    categories: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    d: int | None = None
    for record_id, embedding, category in records:
        if record_id in seen:
            raise DuplicateId(record_id)
        seen.add(record_id)
        vec = np.asarray(embedding, dtype=np.float64).reshape(-1)
        if d is None:
            d = vec.shape[0]
        elif vec.shape[0] != d:
            raise DimensionMismatch(
                f"record {record_id!r}: expected d={d}, got {vec.shape[0]}"
            )
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ZeroVector(f"record {record_id!r} has a zero embedding")
        ids.append(record_id)
        categories.append(category)
        rows.append(vec / norm)
    return RetrievalIndex(ids=ids, embeddings=np.vstack(rows), categories=categories)


def knn(
    index: RetrievalIndex,
    query: np.ndarray,
    k: int,
    exclude: str | None = None,
) -> list[Neighbor]:
    """Top-k neighbors by cosine, descending; ties by ascending id.

    ``exclude`` drops one id from the results (leave-one-out when the query
    itself is an indexed record).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise EmptyIndex("index holds no records")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != index.embeddings.shape[1]:
        raise DimensionMismatch(
            f"query has d={q.shape[0]}, index expects d={index.embeddings.shape[1]}"
        )
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        raise ZeroVector("query is the zero vector")
    q = q / norm

    sims = np.clip(index.embeddings @ q, -1.0, 1.0)
    order = sorted(
        (i for i in range(len(index)) if index.ids[i] != exclude),
        key=lambda i: (-sims[i], index.ids[i]),
    )
    return [
        Neighbor(id=index.ids[i], similarity=float(sims[i]), category=index.categories[i])
        for i in order[:k]
    ]


def majority_category(neighbors: list[Neighbor]) -> str:
    """Most frequent category; count ties go to the highest-similarity neighbor.

    If tied categories also tie on best similarity, the smallest best-neighbor
    id wins, so the result never depends on list order.
    """
    if not neighbors:
        raise EmptyInput("majority vote over zero neighbors")
    counts = Counter(n.category for n in neighbors)
    top_count = max(counts.values())
    tied = {c for c, count in counts.items() if count == top_count}
    if len(tied) == 1:
        return tied.pop()
    best = {}
    for n in neighbors:
        if n.category not in tied:
            continue
        current = best.get(n.category)
        if current is None or (-n.similarity, n.id) < (-current.similarity, current.id):
            best[n.category] = n
    winner = min(best.values(), key=lambda n: (-n.similarity, n.id))
    return winner.category


def save_index(index: RetrievalIndex, embeddings_path: Path | str, table_path: Path | str) -> None:
    """Persist as a WSIF float32 matrix plus a JSON id/category table."""
    write_features(embeddings_path, index.embeddings.astype(np.float32))
    with open(table_path, "w", encoding="utf-8") as fh:
        json.dump({"ids": index.ids, "categories": index.categories}, fh, indent=2)
        fh.write("\n")


def load_index(embeddings_path: Path | str, table_path: Path | str) -> RetrievalIndex:
    features = read_features(embeddings_path)
    with open(table_path, encoding="utf-8") as fh:
        table = json.load(fh)
    ids = table["ids"]
    categories = table["categories"]
    if len(ids) != features.n or len(categories) != features.n:
        raise DimensionMismatch(
            f"table lists {len(ids)} ids / {len(categories)} categories "
            f"for {features.n} embedding rows"
        )
    if len(set(ids)) != len(ids):
        raise DuplicateId(next(i for i in ids if ids.count(i) > 1))
    return RetrievalIndex(
        ids=list(ids),
        embeddings=features.data.astype(np.float64),
        categories=list(categories),
    )
