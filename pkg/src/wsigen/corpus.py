"""Dataset ingestion: slide records, patch-feature files, and deterministic splits.

A corpus is described by a JSON-Lines manifest (one record per line with
``id``, ``category``, ``report``, ``features_path``). Patch features live in
sidecar binary files: magic ``WSIF``, u32 version (=1), u32 n, u32 d, then
n*d little-endian float32 values in row-major order. The format is lossless,
so write-then-read returns the same matrix bit for bit.
"""
from __future__ import annotations

import json
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    DuplicateId,
    EmptyCorpus,
    MalformedLine,
    MissingFile,
    NonFiniteValue,
    ShapeMismatch,
    TruncatedFile,
)

FEATURE_MAGIC = b"WSIF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, n, d

MANIFEST_FIELDS = ("id", "category", "report", "features_path")


@dataclass
class WsiRecord:
    id: str
    category: str
    report: str
    features_path: str


@dataclass(eq=False)
class PatchFeatures:
    """Variable-length n x d matrix of float32 patch embeddings."""

    n: int
    d: int
    data: np.ndarray

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PatchFeatures)
            and self.n == other.n
            and self.d == other.d
            and np.array_equal(self.data, other.data)
        )


@dataclass
class Corpus:
    records: list[WsiRecord]
    d: int
    root: Path
    categories: set[str] = field(init=False)

    def __post_init__(self):
        self.categories = {r.category for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def by_id(self, record_id: str) -> WsiRecord:
        for r in self.records:
            if r.id == record_id:
                return r
        raise KeyError(record_id)

    def features_file(self, record: WsiRecord) -> Path:
        return self.root / record.features_path

    def load_features(self, record: WsiRecord) -> PatchFeatures:
        return read_features(self.features_file(record))

    def subset(self, ids: list[str]) -> "Corpus":
        table = {r.id: r for r in self.records}
        return Corpus(records=[table[i] for i in ids], d=self.d, root=self.root)


@dataclass
class SplitSpec:
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if any(not 0.0 < r < 1.0 for r in ratios):
            raise ValueError(f"each split ratio must lie in (0, 1), got {ratios}")
        if abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(ratios)!r}")


def write_features(path: Path | str, data: np.ndarray) -> None:
    """Write a feature matrix in the WSIF binary format."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeMismatch(
            f"feature matrix must be 2-D and non-empty, got shape {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteValue(int(bad[0]), int(bad[1]))
    n, d = arr.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_header(path: Path) -> tuple[int, int]:
    """Validate magic/version/payload size and return (n, d) without reading data."""
    if not path.is_file():
        raise MissingFile(f"feature file not found: {path}")
    size = path.stat().st_size
    if size < _HEADER.size:
        raise TruncatedFile(f"{path}: {size} bytes is shorter than the header")
    with open(path, "rb") as fh:
        magic, version, n, d = _HEADER.unpack(fh.read(_HEADER.size))
    if magic != FEATURE_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    if n < 1 or d < 1:
        raise TruncatedFile(f"{path}: header declares empty matrix {n}x{d}")
    expected = _HEADER.size + 4 * n * d
    if size != expected:
        raise TruncatedFile(f"{path}: expected {expected} bytes for {n}x{d}, found {size}")
    return n, d


def read_features(path: Path | str) -> PatchFeatures:
    """Read and fully validate a WSIF feature file."""
    path = Path(path)
    n, d = _read_header(path)
    with open(path, "rb") as fh:
        fh.seek(_HEADER.size)
        data = np.frombuffer(fh.read(4 * n * d), dtype="<f4").reshape(n, d)
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise NonFiniteValue(int(bad[0]), int(bad[1]))
    return PatchFeatures(n=n, d=d, data=np.ascontiguousarray(data))


def load_manifest(path: Path | str) -> Corpus:
    """Load and validate a JSON-Lines manifest.

    Record order matches manifest line order. The feature dimension is read
    from the first record's feature file and every other file is checked
    against it (header-level: magic, version, and exact payload size).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    root = path.parent
    records: list[WsiRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                raise MalformedLine(line_no, "blank line")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, f"invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise MalformedLine(line_no, "line is not a JSON object")
            missing = [k for k in MANIFEST_FIELDS if k not in obj]
            if missing:
                raise MalformedLine(line_no, f"missing fields {missing}")
            rec = WsiRecord(
                id=obj["id"],
                category=obj["category"],
                report=obj["report"],
                features_path=obj["features_path"],
            )
            for name in MANIFEST_FIELDS:
                value = getattr(rec, name if name != "features_path" else "features_path")
                if not isinstance(value, str) or not value:
                    raise MalformedLine(line_no, f"field {name!r} must be a non-empty string")
            if rec.id in seen:
                raise DuplicateId(rec.id)
            seen.add(rec.id)
            records.append(rec)
    if not records:
        raise EmptyCorpus(f"manifest {path} has no records")

    expected_d: int | None = None
    for rec in records:
        _, d = _read_header(root / rec.features_path)
        if expected_d is None:
            expected_d = d
        elif d != expected_d:
            raise DimensionMismatch(
                f"record {rec.id!r}: expected d={expected_d}, found d={d}"
            )
    assert expected_d is not None
    return Corpus(records=records, d=expected_d, root=root)


def split(corpus: Corpus, spec: SplitSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Deterministic (ratios, seed) split into train/val/test sub-corpora.

    Ids are shuffled by a PRNG seeded with ``spec.seed`` and cut at
    floor(N*train) and floor(N*(train+val)); the parts partition the corpus
    and keep the shuffled order.
    """
    if not corpus.records:
        raise EmptyCorpus("cannot split an empty corpus")
    ids = corpus.ids()
    rng = random.Random(spec.seed)
    rng.shuffle(ids)
    n = len(ids)
    cut1 = int(n * spec.train_ratio)
    cut2 = int(n * (spec.train_ratio + spec.val_ratio))
    return (
        corpus.subset(ids[:cut1]),
        corpus.subset(ids[cut1:cut2]),
        corpus.subset(ids[cut2:]),
    )


def split_from_file(corpus: Corpus, path: Path | str) -> tuple[Corpus, Corpus, Corpus]:
    """Split along explicit id lists ({"train": [...], "val": [...], "test": [...]}).

    Accepts a pinned benchmark split when one is available; the lists must
    partition the corpus ids exactly.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"split file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    for key in ("train", "val", "test"):
        if key not in obj or not isinstance(obj[key], list):
            raise MalformedLine(0, f"split file missing list field {key!r}")
    listed = obj["train"] + obj["val"] + obj["test"]
    if len(set(listed)) != len(listed):
        raise DuplicateId(next(i for i in listed if listed.count(i) > 1))
    if set(listed) != set(corpus.ids()):
        raise MalformedLine(0, "split file ids do not partition the corpus")
    return (
        corpus.subset(obj["train"]),
        corpus.subset(obj["val"]),
        corpus.subset(obj["test"]),
    )


def save_split_ids(path: Path | str, train: Corpus, val: Corpus, test: Corpus) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"train": train.ids(), "val": val.ids(), "test": test.ids()}, fh, indent=2)
        fh.write("\n")
