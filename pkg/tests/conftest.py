"""Shared fixtures: synthetic corpora on disk and oracle imports.

The oracle scripts under tests/oracles/ are deliberately standalone (no
wsigen imports); they are put on sys.path here so tests can import them
by module name.
"""
import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent / "oracles"))

from wsigen.corpus import load_manifest, write_features

_WORDS = (
    "sections show tumor cells with clear margins and focal necrosis "
    "the specimen contains lymph node tissue without carcinoma involvement "
    "grade two lesion infiltrating stroma is noted near resection edge"
).split()


def synth_report(rng: np.random.Generator, length: int = 12) -> str:
    return " ".join(rng.choice(_WORDS, size=length))


def make_corpus_files(
    root: Path,
    n_records: int = 12,
    d: int = 8,
    categories: tuple[str, ...] = ("alpha", "beta", "gamma"),
    seed: int = 0,
    min_patches: int = 2,
    max_patches: int = 6,
) -> Path:
    """Write a manifest plus feature files under root; returns the manifest path."""
    rng = np.random.default_rng(seed)
    feats = root / "feats"
    feats.mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i in range(n_records):
            rid = f"r{i:03d}"
            n = int(rng.integers(min_patches, max_patches + 1))
            write_features(feats / f"{rid}.wsif", rng.normal(size=(n, d)).astype(np.float32))
            row = {
                "id": rid,
                "category": categories[i % len(categories)],
                "report": f"case {rid} {synth_report(rng)}",
                "features_path": f"feats/{rid}.wsif",
            }
            fh.write(json.dumps(row) + "\n")
    return manifest


@pytest.fixture
def corpus12(tmp_path):
    """A 12-record, 3-category, d=8 corpus loaded from disk."""
    return load_manifest(make_corpus_files(tmp_path))
