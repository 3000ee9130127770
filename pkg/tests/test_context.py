"""Prompt assembly tests: frozen golden files, payload law, bundle building."""
import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsigen.aggregator import TokenSet
from wsigen.context import (
    ContextBundle,
    ContextFlags,
    FeedbackItem,
    assemble_prompt,
    base_prompt,
    build_bundle,
    build_feedback_context,
    build_guideline_context,
    build_nn_context,
    prompt_digest,
    render_feedback_request,
    render_guideline_request,
)
from wsigen.errors import (
    EmptyInput,
    InconsistentBundle,
    MissingFeedback,
    MissingGuideline,
    MissingStore,
    TooManyReports,
)
from wsigen.retrieval import build_index

import prompt_golden

PROMPTS = Path(__file__).parent / "fixtures" / "prompts"


def _tokens(seed, d=4):
    rng = np.random.default_rng(seed)
    tokens = rng.normal(size=(2, d))
    pooled = tokens.mean(axis=0)
    pooled = pooled / np.linalg.norm(pooled)
    return TokenSet(m=2, d=d, tokens=tokens, pooled=pooled)


def _feedback_items(n=3):
    return [
        FeedbackItem(id=f"f{i}", text=prompt_golden.FEEDBACK_TEXTS[i], tokens=_tokens(10 + i))
        for i in range(n)
    ]


def _scenario_bundle(nn=False, guideline=False, feedback=False):
    bundle = ContextBundle(flags=ContextFlags(nn=nn, guideline=guideline, feedback=feedback))
    if nn:
        bundle.nn = ("nn01", prompt_golden.NN_REPORT, _tokens(99))
    if guideline:
        bundle.guideline = ("renal", prompt_golden.GUIDELINE_TEXT)
    if feedback:
        bundle.feedback = _feedback_items()
    return bundle


@pytest.mark.parametrize(
    "fixture, kwargs",
    [
        ("base.txt", {}),
        ("nn.txt", {"nn": True}),
        ("nn_guideline.txt", {"nn": True, "guideline": True}),
        ("nn_feedback.txt", {"nn": True, "feedback": True}),
        ("nn_guideline_feedback.txt", {"nn": True, "guideline": True, "feedback": True}),
    ],
)
def test_assembled_prompt_matches_golden_bytes(fixture, kwargs):
    prompt = assemble_prompt(_tokens(0), _scenario_bundle(**kwargs))
    expected = (PROMPTS / fixture).read_bytes()
    assert prompt.user_text.encode("utf-8") == expected
    assert prompt.system_text == ""


def test_base_prompt_is_golden():
    assert base_prompt().encode("utf-8") == (PROMPTS / "base.txt").read_bytes()


def test_prompt_digest_is_sha256_of_text():
    prompt = assemble_prompt(_tokens(0), _scenario_bundle(nn=True))
    expected = hashlib.sha256(
        b"\x00" + (PROMPTS / "nn.txt").read_bytes()
    ).hexdigest()
    assert prompt_digest(prompt) == expected
    # Payload contents never affect the digest.
    other = assemble_prompt(_tokens(123), _scenario_bundle(nn=True))
    assert prompt_digest(other) == expected


def test_feedback_request_matches_golden_bytes():
    text = render_feedback_request(
        prompt_golden.FEEDBACK_GROUND_TRUTH, prompt_golden.FEEDBACK_GENERATED
    )
    assert text.encode("utf-8") == (PROMPTS / "feedback_request.txt").read_bytes()


def test_guideline_request_matches_golden_bytes():
    text = render_guideline_request(prompt_golden.GUIDELINE_REPORTS)
    assert text.encode("utf-8") == (PROMPTS / "guideline_request.txt").read_bytes()


def test_feedback_request_validation():
    with pytest.raises(EmptyInput):
        render_feedback_request("", "generated")
    with pytest.raises(EmptyInput):
        render_feedback_request("truth", "")


def test_guideline_request_limits():
    reports = [f"Report body {i}." for i in range(20)]
    text = render_guideline_request(reports)
    assert "Report 20: " in text
    assert "Report 21: " not in text
    with pytest.raises(TooManyReports):
        render_guideline_request(reports + ["one more"])
    with pytest.raises(EmptyInput):
        render_guideline_request([])
    with pytest.raises(EmptyInput):
        render_guideline_request(["ok", ""])


def test_payload_order_query_nn_feedback():
    bundle = _scenario_bundle(nn=True, feedback=True)
    query = _tokens(0)
    prompt = assemble_prompt(query, bundle)
    assert prompt.image_payload[0] == query
    assert prompt.image_payload[1] == bundle.nn[2]
    for slot, item in zip(prompt.image_payload[2:], bundle.feedback):
        assert slot == item.tokens


def test_inconsistent_bundles_rejected():
    bundle = ContextBundle(flags=ContextFlags(nn=True))
    with pytest.raises(InconsistentBundle):
        assemble_prompt(_tokens(0), bundle)
    bundle = ContextBundle(flags=ContextFlags(), nn=("id", "report", _tokens(1)))
    with pytest.raises(InconsistentBundle):
        assemble_prompt(_tokens(0), bundle)
    bundle = ContextBundle(flags=ContextFlags(feedback=True), feedback=[])
    with pytest.raises(InconsistentBundle):
        assemble_prompt(_tokens(0), bundle)
    bundle = ContextBundle(flags=ContextFlags(), guideline=("cat", "text"))
    with pytest.raises(InconsistentBundle):
        assemble_prompt(_tokens(0), bundle)


@settings(max_examples=50, deadline=None)
@given(
    nn=st.booleans(),
    guideline=st.booleans(),
    n_feedback=st.integers(0, 4),
)
def test_payload_count_law(nn, guideline, n_feedback):
    # Always: 1 query set + 1 if the reference neighbor is attached + one per
    # feedback item. The guideline contributes text only.
    bundle = ContextBundle(
        flags=ContextFlags(nn=nn, guideline=guideline, feedback=n_feedback > 0)
    )
    if nn:
        bundle.nn = ("n", "report text", _tokens(50))
    if guideline:
        bundle.guideline = ("cat", "guideline text")
    if n_feedback > 0:
        bundle.feedback = [
            FeedbackItem(id=f"f{i}", text=f"note {i}", tokens=_tokens(60 + i))
            for i in range(n_feedback)
        ]
    prompt = assemble_prompt(_tokens(0), bundle)
    assert len(prompt.image_payload) == 1 + int(nn) + n_feedback


# -- bundle construction over a tiny index -----------------------------------

def _mini_world():
    # Four training records, axis-aligned so nearest neighbors are obvious.
    vecs = {
        "r1": np.array([1.0, 0.0, 0.0]),
        "r2": np.array([0.9, 0.1, 0.0]),
        "r3": np.array([0.0, 1.0, 0.0]),
        "r4": np.array([0.0, 0.0, 1.0]),
    }
    cats = {"r1": "alpha", "r2": "alpha", "r3": "beta", "r4": "gamma"}
    index = build_index([(rid, vecs[rid], cats[rid]) for rid in sorted(vecs)])
    reports = {rid: f"report body for {rid}" for rid in vecs}
    tokens = {rid: _tokens(hash(rid) % 1000, d=3) for rid in vecs}
    feedback = {rid: f"feedback for {rid}" for rid in vecs}
    guidelines = {"alpha": "alpha guideline", "beta": "beta guideline"}
    return index, reports, tokens, feedback, guidelines, vecs


def _query(vec):
    v = np.asarray(vec, dtype=np.float64)
    return TokenSet(m=1, d=v.shape[0], tokens=v[None, :], pooled=v / np.linalg.norm(v))


def test_build_nn_context_top1_and_exclude():
    index, reports, tokens, _, _, vecs = _mini_world()
    query = _query(vecs["r1"])
    nn_id, report, nn_tokens = build_nn_context(query, index, reports, tokens)
    assert nn_id == "r1"
    assert report == reports["r1"]
    assert nn_tokens == tokens["r1"]
    nn_id, _, _ = build_nn_context(query, index, reports, tokens, exclude="r1")
    assert nn_id == "r2"


def test_build_guideline_context_majority_vote():
    index, _, _, _, guidelines, vecs = _mini_world()
    query = _query(vecs["r1"])
    # k=3 neighbors of r1: r1, r2 (alpha), r3 or r4; alpha wins.
    category, text = build_guideline_context(query, index, guidelines, k=3)
    assert category == "alpha"
    assert text == "alpha guideline"
    # Nearest neighbor of r4 alone is gamma, which has no cached guideline.
    with pytest.raises(MissingGuideline):
        build_guideline_context(_query(vecs["r4"]), index, guidelines, k=1)


def test_build_feedback_context_neighbor_order():
    index, _, tokens, feedback, _, vecs = _mini_world()
    query = _query(vecs["r1"])
    items = build_feedback_context(query, index, feedback, tokens, k=2)
    assert [it.id for it in items] == ["r1", "r2"]
    assert items[0].text == "feedback for r1"
    assert items[0].tokens == tokens["r1"]
    items = build_feedback_context(query, index, feedback, tokens, k=2, exclude="r1")
    assert [it.id for it in items] == ["r2", "r3"]
    with pytest.raises(MissingFeedback):
        build_feedback_context(query, index, {"r9": "x"}, tokens, k=1)


def test_build_bundle_assembles_all_mechanisms():
    index, reports, tokens, feedback, guidelines, vecs = _mini_world()
    query = _query(vecs["r2"])
    bundle = build_bundle(
        query,
        ContextFlags(nn=True, guideline=True, feedback=True),
        index=index,
        reports=reports,
        tokens=tokens,
        guidelines=guidelines,
        feedback=feedback,
        k=2,
    )
    assert bundle.nn[0] == "r2"
    assert bundle.guideline == ("alpha", "alpha guideline")
    assert [it.id for it in bundle.feedback] == ["r2", "r1"]
    prompt = assemble_prompt(query, bundle)
    assert len(prompt.image_payload) == 1 + 1 + 2


def test_build_bundle_base_needs_nothing():
    bundle = build_bundle(_query([1.0, 0.0, 0.0]), ContextFlags())
    assert bundle.nn is None and bundle.guideline is None and bundle.feedback is None


def test_build_bundle_missing_store_errors():
    index, reports, tokens, feedback, guidelines, vecs = _mini_world()
    query = _query(vecs["r1"])
    with pytest.raises(MissingStore, match="index"):
        build_bundle(query, ContextFlags(nn=True))
    with pytest.raises(MissingStore, match="nn"):
        build_bundle(query, ContextFlags(nn=True), index=index, reports=reports)
    with pytest.raises(MissingStore, match="guideline"):
        build_bundle(query, ContextFlags(guideline=True), index=index)
    with pytest.raises(MissingStore, match="feedback"):
        build_bundle(query, ContextFlags(feedback=True), index=index, tokens=tokens)


def test_build_bundle_leave_one_out_excludes_query():
    index, reports, tokens, feedback, guidelines, vecs = _mini_world()
    query = _query(vecs["r1"])
    bundle = build_bundle(
        query,
        ContextFlags(nn=True, feedback=True),
        index=index,
        reports=reports,
        tokens=tokens,
        feedback=feedback,
        k=3,
        exclude="r1",
    )
    assert bundle.nn[0] == "r2"
    assert "r1" not in [it.id for it in bundle.feedback]
