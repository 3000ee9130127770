"""In-context clue construction and prompt assembly.

Three mechanisms enrich the base instruction: the nearest neighbor's
reference report (and its tokens), a cached per-category writing guideline
selected by majority vote over the k nearest neighbors, and the stored
critique ("feedback") of the k nearest training cases. Section order is
fixed general-to-specific (guideline, feedback, reference report) and the
delimiter lines are frozen; golden prompt files under the test fixtures
guard every byte.

The token payload mirrors the text: the query token set always comes
first, then the neighbor's set when the reference mechanism is on, then
the k feedback neighbors' sets.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Mapping

from .aggregator import TokenSet
from .errors import (
    EmptyIndex,
    EmptyInput,
    InconsistentBundle,
    MissingFeedback,
    MissingGuideline,
    MissingStore,
    TooManyReports,
)
from .retrieval import RetrievalIndex, knn, majority_category

BASE_PROMPT = (
    "What are the diagnostic findings in the image? "
    "Provide a professional, accurate, and well-structured histopathology report for it."
)

GUIDELINE_HEADER = "### CATEGORY GUIDELINE"
FEEDBACK_HEADER = "### FEEDBACK {i}"
REFERENCE_HEADER = "### REFERENCE REPORT"

FEEDBACK_REQUEST_TEMPLATE = (
    "You are an expert reviewer specializing in medical report quality assurance.\n"
    "\n"
    "Ground Truth: {ground_truth}\n"
    "\n"
    "Generated Report: {generated}\n"
    "\n"
    "Comparing the ground truth and generated report, what is the thing that "
    "generated report lacks? what suggestion would you give to improve the "
    "content of the generated report? The suggestion should be deeply "
    "insightful. Be honest and harsh."
)

GUIDELINE_REQUEST_PREAMBLE = (
    "You are an advanced AI analyst specializing in deep linguistic and "
    "structural analysis of medical reports."
)
GUIDELINE_REQUEST_INSTRUCTION = (
    "Deeply analyze these reports and extract habits, preferences, and "
    "especially biases that exist in reports of this category different from "
    "general TCGA reports. Your observations must be brutally insightful. "
    "Using the insights from observing the habits, preferences, and "
    "especially biases in these reports compared with other general TCGA "
    "reports. Conclude the habits, preferences, and especially biases with "
    "5 short guidelines that are so insightful even harsh, ensuring anyone "
    "reading them knows the exact way to mimic these reports."
)
MAX_GUIDELINE_REPORTS = 20


@dataclass
class ContextFlags:
    nn: bool = False
    guideline: bool = False
    feedback: bool = False


@dataclass(eq=False)
class FeedbackItem:
    id: str
    text: str
    tokens: TokenSet


@dataclass(eq=False)
class ContextBundle:
    flags: ContextFlags = field(default_factory=ContextFlags)
    nn: tuple[str, str, TokenSet] | None = None  # (neighbor id, report, tokens)
    guideline: tuple[str, str] | None = None  # (category, guideline text)
    feedback: list[FeedbackItem] | None = None


@dataclass(eq=False)
class Prompt:
    system_text: str
    user_text: str
    image_payload: list[TokenSet]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Prompt)
            and self.system_text == other.system_text
            and self.user_text == other.user_text
            and len(self.image_payload) == len(other.image_payload)
            and all(a == b for a, b in zip(self.image_payload, other.image_payload))
        )


def base_prompt() -> str:
    """The generator's baseline instruction, byte-stable."""
    return BASE_PROMPT


def prompt_digest(prompt: Prompt) -> str:
    """SHA-256 over the prompt's text bytes; stable drift detector."""
    h = hashlib.sha256()
    h.update(prompt.system_text.encode("utf-8"))
    h.update(b"\x00")
    h.update(prompt.user_text.encode("utf-8"))
    return h.hexdigest()


def build_nn_context(
    query: TokenSet,
    index: RetrievalIndex,
    reports: Mapping[str, str],
    tokens: Mapping[str, TokenSet],
    exclude: str | None = None,
) -> tuple[str, str, TokenSet]:
    """Top-1 neighbor's (id, ground-truth report, token set)."""
    if len(index) == 0:
        raise EmptyIndex("nearest-neighbor context needs a non-empty index")
    top = knn(index, query.pooled, k=1, exclude=exclude)[0]
    return top.id, reports[top.id], tokens[top.id]


def build_guideline_context(
    query: TokenSet,
    index: RetrievalIndex,
    guideline_cache: Mapping[str, str],
    k: int,
    exclude: str | None = None,
) -> tuple[str, str]:
    """Majority-voted category over the k nearest neighbors, plus its guideline."""
    neighbors = knn(index, query.pooled, k=k, exclude=exclude)
    category = majority_category(neighbors)
    if category not in guideline_cache:
        raise MissingGuideline(category)
    return category, guideline_cache[category]


def build_feedback_context(
    query: TokenSet,
    index: RetrievalIndex,
    feedback_store: Mapping[str, str],
    tokens: Mapping[str, TokenSet],
    k: int,
    exclude: str | None = None,
) -> list[FeedbackItem]:
    """Stored feedback of the k nearest training records, in neighbor order."""
    neighbors = knn(index, query.pooled, k=k, exclude=exclude)
    items = []
    for n in neighbors:
        if n.id not in feedback_store:
            raise MissingFeedback(n.id)
        items.append(FeedbackItem(id=n.id, text=feedback_store[n.id], tokens=tokens[n.id]))
    return items


def _check_bundle(bundle: ContextBundle) -> None:
    flags = bundle.flags
    if flags.nn != (bundle.nn is not None):
        raise InconsistentBundle("nn flag does not match bundle contents")
    if flags.guideline != (bundle.guideline is not None):
        raise InconsistentBundle("guideline flag does not match bundle contents")
    if flags.feedback != (bundle.feedback is not None):
        raise InconsistentBundle("feedback flag does not match bundle contents")
    if flags.feedback and not bundle.feedback:
        raise InconsistentBundle("feedback enabled but the item list is empty")


def assemble_prompt(query: TokenSet, bundle: ContextBundle) -> Prompt:
    """Compose the final prompt text and token payload for one query.

    Layout: base instruction, then guideline, feedback blocks, and the
    reference report, each introduced by its frozen header line; sections
    are joined by blank lines. Payload: query tokens first, then the
    reference neighbor's, then one set per feedback item.
    """
    _check_bundle(bundle)
    sections = [BASE_PROMPT]
    payload = [query]
    if bundle.guideline is not None:
        _, text = bundle.guideline
        sections.append(f"{GUIDELINE_HEADER}\n{text}")
    if bundle.feedback is not None:
        for i, item in enumerate(bundle.feedback, start=1):
            sections.append(f"{FEEDBACK_HEADER.format(i=i)}\n{item.text}")
    if bundle.nn is not None:
        _, report, nn_tokens = bundle.nn
        sections.append(f"{REFERENCE_HEADER}\n{report}")
        payload.append(nn_tokens)
    if bundle.feedback is not None:
        payload.extend(item.tokens for item in bundle.feedback)
    return Prompt(system_text="", user_text="\n\n".join(sections), image_payload=payload)


def build_bundle(
    query: TokenSet,
    flags: ContextFlags,
    index: RetrievalIndex | None = None,
    reports: Mapping[str, str] | None = None,
    tokens: Mapping[str, TokenSet] | None = None,
    guidelines: Mapping[str, str] | None = None,
    feedback: Mapping[str, str] | None = None,
    k: int = 1,
    exclude: str | None = None,
) -> ContextBundle:
    """Gather every enabled clue for one query into a consistent bundle.

    The reference mechanism always uses the single nearest neighbor; ``k``
    controls the guideline majority vote and the number of feedback items.
    Missing prerequisites surface as MissingStore named after the flag.
    """
    bundle = ContextBundle(flags=ContextFlags(flags.nn, flags.guideline, flags.feedback))
    if (flags.nn or flags.guideline or flags.feedback) and index is None:
        raise MissingStore("index")
    if flags.nn:
        if reports is None or tokens is None:
            raise MissingStore("nn")
        bundle.nn = build_nn_context(query, index, reports, tokens, exclude=exclude)
    if flags.guideline:
        if guidelines is None:
            raise MissingStore("guideline")
        bundle.guideline = build_guideline_context(query, index, guidelines, k, exclude=exclude)
    if flags.feedback:
        if feedback is None or tokens is None:
            raise MissingStore("feedback")
        bundle.feedback = build_feedback_context(query, index, feedback, tokens, k, exclude=exclude)
    return bundle


def render_feedback_request(ground_truth: str, generated: str) -> str:
    """The reviewer prompt comparing a generated report against its ground truth."""
    if not ground_truth:
        raise EmptyInput("ground-truth text is empty")
    if not generated:
        raise EmptyInput("generated text is empty")
    return FEEDBACK_REQUEST_TEMPLATE.format(ground_truth=ground_truth, generated=generated)


def render_guideline_request(reports: list[str]) -> str:
    """The analyst prompt summarizing up to 20 same-category reports."""
    if not reports:
        raise EmptyInput("no reports to summarize")
    if len(reports) > MAX_GUIDELINE_REPORTS:
        raise TooManyReports(
            f"at most {MAX_GUIDELINE_REPORTS} reports per request, got {len(reports)}"
        )
    if any(not r for r in reports):
        raise EmptyInput("reports must be non-empty")
    blocks = [GUIDELINE_REQUEST_PREAMBLE]
    blocks.extend(f"Report {i}: {report}" for i, report in enumerate(reports, start=1))
    blocks.append(GUIDELINE_REQUEST_INSTRUCTION)
    return "\n\n".join(blocks)
