"""Offline builders for the two persistent knowledge stores.

The feedback store holds, per training record, a reviewer critique of a
base-configuration draft against the ground-truth report. The guideline
cache holds one LLM-written style guideline per category, distilled from
a seeded sample of at most 20 training reports.

Both stores persist as JSON-Lines with provenance (backend id, timestamp,
and for guidelines the sampled report ids) so builds are auditable and
resumable: rerunning skips entries already present unless forced, which
keeps repeat runs at zero backend calls. Store files are written to a
temp file and atomically renamed into place.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterator, Mapping

from .aggregator import TokenSet
from .context import (
    MAX_GUIDELINE_REPORTS,
    ContextFlags,
    Prompt,
    assemble_prompt,
    build_bundle,
    render_feedback_request,
    render_guideline_request,
)
from .corpus import Corpus
from .errors import (
    DuplicateId,
    EmptyInput,
    MalformedLine,
    MissingFeedback,
    MissingFile,
    MissingGuideline,
    TooManyReports,
)
from .genclient import GenerationRequest, generate
from .retrieval import RetrievalIndex


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class FeedbackEntry:
    id: str
    feedback: str
    backend_id: str
    timestamp: str


@dataclass
class GuidelineEntry:
    category: str
    guideline: str
    sample_ids: list[str]
    backend_id: str
    timestamp: str


class FeedbackStore:
    """record id -> reviewer feedback, with per-entry provenance.

    Supports the mapping protocol over feedback texts so it can feed
    context construction directly.
    """

    def __init__(self, entries: dict[str, FeedbackEntry] | None = None):
        self.entries: dict[str, FeedbackEntry] = dict(entries or {})

    def __contains__(self, record_id: str) -> bool:
        return record_id in self.entries

    def __getitem__(self, record_id: str) -> str:
        if record_id not in self.entries:
            raise MissingFeedback(record_id)
        return self.entries[record_id].feedback

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def add(self, entry: FeedbackEntry) -> None:
        if not entry.feedback:
            raise EmptyInput(f"record {entry.id!r}: feedback text is empty")
        self.entries[entry.id] = entry

    def save(self, path: Path | str) -> None:
        atomic_write_jsonl(
            path,
            (
                {
                    "id": e.id,
                    "feedback": e.feedback,
                    "backend_id": e.backend_id,
                    "timestamp": e.timestamp,
                }
                for e in self.entries.values()
            ),
        )

    @classmethod
    def load(cls, path: Path | str) -> "FeedbackStore":
        store = cls()
        for line_number, obj in read_jsonl(path, ("id", "feedback", "backend_id", "timestamp")):
            if obj["id"] in store.entries:
                raise DuplicateId(obj["id"])
            if not obj["feedback"]:
                raise MalformedLine(line_number, "empty feedback text")
            store.entries[obj["id"]] = FeedbackEntry(
                id=obj["id"],
                feedback=obj["feedback"],
                backend_id=obj["backend_id"],
                timestamp=obj["timestamp"],
            )
        return store


class GuidelineCache:
    """category -> writing guideline, with sampling provenance."""

    def __init__(self, entries: dict[str, GuidelineEntry] | None = None):
        self.entries: dict[str, GuidelineEntry] = dict(entries or {})

    def __contains__(self, category: str) -> bool:
        return category in self.entries

    def __getitem__(self, category: str) -> str:
        if category not in self.entries:
            raise MissingGuideline(category)
        return self.entries[category].guideline

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def add(self, entry: GuidelineEntry) -> None:
        if not entry.guideline:
            raise EmptyInput(f"category {entry.category!r}: guideline text is empty")
        self.entries[entry.category] = entry

    def save(self, path: Path | str) -> None:
        atomic_write_jsonl(
            path,
            (
                {
                    "category": e.category,
                    "guideline": e.guideline,
                    "sample_ids": e.sample_ids,
                    "backend_id": e.backend_id,
                    "timestamp": e.timestamp,
                }
                for e in self.entries.values()
            ),
        )

    @classmethod
    def load(cls, path: Path | str) -> "GuidelineCache":
        cache = cls()
        fields = ("category", "guideline", "sample_ids", "backend_id", "timestamp")
        for line_number, obj in read_jsonl(path, fields):
            if obj["category"] in cache.entries:
                raise DuplicateId(obj["category"])
            if not obj["guideline"]:
                raise MalformedLine(line_number, "empty guideline text")
            if not isinstance(obj["sample_ids"], list):
                raise MalformedLine(line_number, "sample_ids must be a list")
            cache.entries[obj["category"]] = GuidelineEntry(
                category=obj["category"],
                guideline=obj["guideline"],
                sample_ids=[str(s) for s in obj["sample_ids"]],
                backend_id=obj["backend_id"],
                timestamp=obj["timestamp"],
            )
        return cache


@dataclass
class BuildReport:
    """What one store build did: new entries, skips, and per-record failures."""

    built: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)


def atomic_write_jsonl(path: Path | str, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    tmp.replace(path)


def read_jsonl(path: Path | str, required: tuple[str, ...]):
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_number, str(exc)) from exc
            if not isinstance(obj, dict):
                raise MalformedLine(line_number, "expected a JSON object")
            missing = [f for f in required if f not in obj]
            if missing:
                raise MalformedLine(line_number, f"missing fields: {', '.join(missing)}")
            yield line_number, obj


def save_error_manifest(path: Path | str, errors: list[tuple[str, str]]) -> None:
    """Persist per-record build failures as JSONL {id, error} rows."""
    atomic_write_jsonl(path, ({"id": rid, "error": msg} for rid, msg in errors))


def build_feedback_store(
    train: Corpus,
    index: RetrievalIndex,
    tokens: Mapping[str, TokenSet],
    backend,
    reviewer_backend=None,
    store: FeedbackStore | None = None,
    force: bool = False,
    flags: ContextFlags | None = None,
    guidelines: Mapping[str, str] | None = None,
    k: int = 1,
    gen_kwargs: dict | None = None,
    clock: Callable[[], str] = _utc_now,
) -> tuple[FeedbackStore, BuildReport]:
    """Draft a report for every training record, then store a reviewer critique.

    Drafts use the base configuration (no in-context clues) by default;
    passing flags regenerates against an enriched configuration, always
    excluding the record itself from retrieval. ``reviewer_backend``
    defaults to the drafting backend. Entries already present are skipped
    unless ``force``; per-record failures are collected, never raised, so
    a partial store plus error manifest can be persisted.
    """
    reviewer = reviewer_backend if reviewer_backend is not None else backend
    store = store if store is not None else FeedbackStore()
    flags = flags if flags is not None else ContextFlags()
    gen_kwargs = gen_kwargs or {}
    reports = {r.id: r.report for r in train.records}
    report = BuildReport()

    for record in train.records:
        if record.id in store and not force:
            report.skipped.append(record.id)
            continue
        try:
            bundle = build_bundle(
                tokens[record.id],
                flags,
                index=index,
                reports=reports,
                tokens=tokens,
                guidelines=guidelines,
                feedback=store,
                k=k,
                exclude=record.id,
            )
            draft_prompt = assemble_prompt(tokens[record.id], bundle)
            draft = generate(GenerationRequest(prompt=draft_prompt, **gen_kwargs), backend)
            review_prompt = Prompt(
                system_text="",
                user_text=render_feedback_request(record.report, draft.text),
                image_payload=[],
            )
            critique = generate(GenerationRequest(prompt=review_prompt, **gen_kwargs), reviewer)
            store.add(FeedbackEntry(
                id=record.id,
                feedback=critique.text,
                backend_id=critique.backend_id,
                timestamp=clock(),
            ))
            report.built.append(record.id)
        except Exception as exc:
            report.errors.append((record.id, f"{type(exc).__name__}: {exc}"))
    return store, report


def sample_category_reports(
    train: Corpus, category: str, sample_size: int, seed: int
) -> list[str]:
    """Deterministic per-category sample: seeded shuffle of sorted ids.

    The stream is seeded per category so adding a category never changes
    another category's sample. Returned ids are sorted for stable output.
    """
    ids = sorted(r.id for r in train.records if r.category == category)
    if not ids:
        raise EmptyInput(f"category {category!r} has no training reports")
    rng = random.Random(f"{seed}:{category}")
    rng.shuffle(ids)
    return sorted(ids[: min(sample_size, len(ids))])


def build_guideline_cache(
    train: Corpus,
    backend,
    sample_size: int = MAX_GUIDELINE_REPORTS,
    seed: int = 0,
    cache: GuidelineCache | None = None,
    force: bool = False,
    gen_kwargs: dict | None = None,
    clock: Callable[[], str] = _utc_now,
) -> tuple[GuidelineCache, BuildReport]:
    """Summarize a seeded sample of each category's reports into a guideline.

    ``sample_size`` is capped at 20, the most the analyst prompt numbers.
    Categories are processed in sorted order; skip/force and error
    collection mirror the feedback build.
    """
    if sample_size < 1:
        raise EmptyInput(f"sample_size must be >= 1, got {sample_size}")
    if sample_size > MAX_GUIDELINE_REPORTS:
        raise TooManyReports(
            f"sample_size is capped at {MAX_GUIDELINE_REPORTS}, got {sample_size}"
        )
    cache = cache if cache is not None else GuidelineCache()
    gen_kwargs = gen_kwargs or {}
    by_id = {r.id: r for r in train.records}
    report = BuildReport()

    for category in sorted(train.categories):
        if category in cache and not force:
            report.skipped.append(category)
            continue
        try:
            sample_ids = sample_category_reports(train, category, sample_size, seed)
            request_text = render_guideline_request([by_id[i].report for i in sample_ids])
            prompt = Prompt(system_text="", user_text=request_text, image_payload=[])
            answer = generate(GenerationRequest(prompt=prompt, **gen_kwargs), backend)
            cache.add(GuidelineEntry(
                category=category,
                guideline=answer.text,
                sample_ids=sample_ids,
                backend_id=answer.backend_id,
                timestamp=clock(),
            ))
            report.built.append(category)
        except Exception as exc:
            report.errors.append((category, f"{type(exc).__name__}: {exc}"))
    return cache, report
