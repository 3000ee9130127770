"""Acceptance gate: nine end-to-end checks, one test per guarantee.

Each test pins the tolerance it verifies. Runtime budgets are asserted
where the guarantee includes one.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import wsigen.context
from wsigen import cli
from wsigen.aggregator import (
    AggregatorWeights,
    TokenSet,
    aggregate,
    aggregate_with_attention,
    load_weights,
    seeded_weights,
)
from wsigen.context import (
    ContextBundle,
    ContextFlags,
    FeedbackItem,
    assemble_prompt,
    render_feedback_request,
    render_guideline_request,
)
from wsigen.corpus import PatchFeatures, load_manifest, split_from_file
from wsigen.genclient import mock_backend
from wsigen.metrics import EvalConfig, bleu, evaluate_corpus, meteor, rouge_l, tokenize, truncate
from wsigen.pipelines import build_feedback_store, build_guideline_cache, read_jsonl
from wsigen.retrieval import build_index, knn, load_index

from conftest import make_corpus_files
import prompt_golden
from attention_oracle import oracle_forward
from metrics_oracle import GAZETTEER, oracle_corpus_bleu, oracle_rouge_l
from wsigen.metrics import EntityExtractor, fact_ent

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def pipeline_ws(tmp_path_factory):
    """A 50-record corpus pushed through ingest/split/index/stores once."""
    root = tmp_path_factory.mktemp("accept")
    manifest = make_corpus_files(root, n_records=50, d=8, seed=5)
    wd = root / "work"
    assert cli.main(["ingest", str(manifest), "--workdir", str(wd)]) == 0
    assert cli.main(["split", "--workdir", str(wd), "--seed", "0"]) == 0
    assert cli.main(["index", "--workdir", str(wd),
                     "--query-tokens", "4", "--layers", "1", "--heads", "2"]) == 0
    assert cli.main(["build-guidelines", "--workdir", str(wd),
                     "--backend", "mock:fixed:state the margin status"]) == 0
    assert cli.main(["build-feedback", "--workdir", str(wd),
                     "--backend", "mock:fixed:name the grade explicitly"]) == 0
    return wd


def test_01_metric_golden_suite_within_1e9():
    start = time.perf_counter()
    with open(FIXTURES / "metrics_golden.json", encoding="utf-8") as fh:
        rows = json.load(fh)
    assert len(rows) == 10
    extractor = EntityExtractor(mode="gazetteer", gazetteer=frozenset(GAZETTEER))
    for row in rows:
        cand = tokenize(row["candidate"])
        ref = tokenize(row["reference"])
        for n in range(1, 5):
            assert bleu([cand], [ref], n) == pytest.approx(row[f"bleu{n}"], abs=1e-9), row["id"]
        assert meteor(cand, ref) == pytest.approx(row["meteor"], abs=1e-9), row["id"]
        assert rouge_l(cand, ref) == pytest.approx(row["rouge_l"], abs=1e-9), row["id"]
        assert fact_ent(row["candidate"], row["reference"], extractor) == pytest.approx(
            row["fact_ent"], abs=1e-9
        ), row["id"]
        if cand == ref:
            for n in range(1, 5):
                if len(cand) >= n:  # identity is exact wherever n-grams exist
                    assert bleu([cand], [ref], n) == 1.0
            assert rouge_l(cand, ref) == 1.0
    assert time.perf_counter() - start < 1.0


def test_02_metric_cross_implementation_within_1e6():
    rng = np.random.default_rng(2024)
    vocab = [f"w{i}" for i in range(15)]
    cands, refs = [], []
    for _ in range(50):
        cands.append(list(rng.choice(vocab, size=int(rng.integers(1, 30)))))
        refs.append(list(rng.choice(vocab, size=int(rng.integers(1, 30)))))
    for n in range(1, 5):
        assert bleu(cands, refs, n) == pytest.approx(
            oracle_corpus_bleu(cands, refs, n), abs=1e-6
        )
    for cand, ref in zip(cands, refs):
        assert rouge_l(cand, ref) == pytest.approx(oracle_rouge_l(cand, ref), abs=1e-6)


def test_03_retrieval_matches_bruteforce_200_trials():
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    for trial in range(200):
        n = int(rng.integers(2, 1001))
        d = int(rng.integers(2, 257))
        ids = [f"r{i:04d}" for i in range(n)]
        vectors = rng.normal(size=(n, d))
        cats = [f"c{i % 5}" for i in range(n)]
        index = build_index(list(zip(ids, vectors, cats)))
        query = rng.normal(size=d)
        k = int(rng.integers(1, min(n, 20) + 1))
        exclude = ids[int(rng.integers(n))] if trial % 4 == 0 else None

        got = knn(index, query, k, exclude=exclude)

        qn = query / np.linalg.norm(query)
        scored = []
        for rid, vec in zip(ids, vectors):
            if rid == exclude:
                continue
            v = vec / np.linalg.norm(vec)
            scored.append((rid, float(np.clip(v @ qn, -1.0, 1.0))))
        scored.sort(key=lambda t: (-t[1], t[0]))
        want = scored[:k]

        assert [g.id for g in got] == [w[0] for w in want]
        for g, w in zip(got, want):
            assert abs(g.similarity - w[1]) < 1e-9
    assert time.perf_counter() - start < 10.0


def _weights_to_dict(w: AggregatorWeights) -> dict:
    return {
        "m": w.m,
        "d": w.d,
        "heads": w.heads,
        "q": w.q.astype(np.float64).tolist(),
        "p_w": w.p_w.astype(np.float64).tolist(),
        "p_b": w.p_b.astype(np.float64).tolist(),
        "layers": [
            {
                "ln_q_scale": l.ln_q_scale.astype(np.float64).tolist(),
                "ln_q_bias": l.ln_q_bias.astype(np.float64).tolist(),
                "ln_kv_scale": l.ln_kv_scale.astype(np.float64).tolist(),
                "ln_kv_bias": l.ln_kv_bias.astype(np.float64).tolist(),
                "w_q": l.w_q.astype(np.float64).tolist(),
                "w_k": l.w_k.astype(np.float64).tolist(),
                "w_v": l.w_v.astype(np.float64).tolist(),
                "w_o": l.w_o.astype(np.float64).tolist(),
                "ln_ff_scale": l.ln_ff_scale.astype(np.float64).tolist(),
                "ln_ff_bias": l.ln_ff_bias.astype(np.float64).tolist(),
                "w_1": l.w_1.astype(np.float64).tolist(),
                "w_2": l.w_2.astype(np.float64).tolist(),
            }
            for l in w.layers
        ],
    }


def test_04_aggregator_oracle_rowsums_permutation_shapes():
    rng = np.random.default_rng(4)
    # Random small instances against the pure-loop dense oracle.
    for seed in range(5):
        d = int(rng.choice([2, 4, 8]))
        h = int(rng.choice([1, 2]))
        m = int(rng.integers(1, 5))
        n = int(rng.integers(1, 9))
        weights = seeded_weights(seed=seed, m=m, d=d, layer_count=int(rng.integers(1, 3)), heads=h)
        data = rng.normal(size=(n, d)).astype(np.float32)
        features = PatchFeatures(n=n, d=d, data=data)
        token_set, attentions = aggregate_with_attention(features, weights)
        _, o_proj, _ = oracle_forward(data.tolist(), _weights_to_dict(weights))
        np.testing.assert_allclose(token_set.tokens, np.array(o_proj), atol=1e-5)
        # Attention rows are a probability distribution over patches.
        for layer_attn in attentions:
            np.testing.assert_allclose(np.asarray(layer_attn).sum(axis=-1), 1.0, atol=1e-6)

    # Patch order never matters.
    weights = seeded_weights(seed=0, m=3, d=8, layer_count=2, heads=2)
    data = rng.normal(size=(20, 8)).astype(np.float32)
    base = aggregate(PatchFeatures(n=20, d=8, data=data), weights)
    for _ in range(5):
        perm = rng.permutation(20)
        shuffled = aggregate(PatchFeatures(n=20, d=8, data=data[perm]), weights)
        np.testing.assert_allclose(shuffled.tokens, base.tokens, atol=1e-5)

    # Output shape is m x d regardless of patch count.
    for n in (1, 5, 500):
        out = aggregate(PatchFeatures(n=n, d=8, data=rng.normal(size=(n, 8)).astype(np.float32)), weights)
        assert out.tokens.shape == (3, 8)
        assert out.pooled.shape == (8,)


def test_05_prompt_golden_bytes_exact():
    def tokens(seed):
        r = np.random.default_rng(seed)
        mat = r.normal(size=(2, 4))
        pooled = mat.mean(axis=0)
        return TokenSet(m=2, d=4, tokens=mat, pooled=pooled / np.linalg.norm(pooled))

    def bundle(nn=False, guideline=False, feedback=False):
        b = ContextBundle(flags=ContextFlags(nn=nn, guideline=guideline, feedback=feedback))
        if nn:
            b.nn = ("nn01", prompt_golden.NN_REPORT, tokens(1))
        if guideline:
            b.guideline = ("renal", prompt_golden.GUIDELINE_TEXT)
        if feedback:
            b.feedback = [
                FeedbackItem(id=f"f{i}", text=text, tokens=tokens(10 + i))
                for i, text in enumerate(prompt_golden.FEEDBACK_TEXTS)
            ]
        return b

    combos = [
        ("base.txt", {}),
        ("nn.txt", {"nn": True}),
        ("nn_guideline.txt", {"nn": True, "guideline": True}),
        ("nn_feedback.txt", {"nn": True, "feedback": True}),
        ("nn_guideline_feedback.txt", {"nn": True, "guideline": True, "feedback": True}),
    ]
    for fixture, kwargs in combos:
        prompt = assemble_prompt(tokens(0), bundle(**kwargs))
        assert prompt.user_text.encode("utf-8") == (FIXTURES / "prompts" / fixture).read_bytes()

    base_bytes = (FIXTURES / "prompts" / "base.txt").read_bytes()
    assert base_bytes.startswith(b"What are the diagnostic findings in the image?")

    request = render_feedback_request(
        prompt_golden.FEEDBACK_GROUND_TRUTH, prompt_golden.FEEDBACK_GENERATED
    )
    assert request.encode("utf-8") == (FIXTURES / "prompts" / "feedback_request.txt").read_bytes()
    request = render_guideline_request(prompt_golden.GUIDELINE_REPORTS)
    assert request.encode("utf-8") == (FIXTURES / "prompts" / "guideline_request.txt").read_bytes()


def test_06_end_to_end_echo_nn_bleu_equality_1e12(pipeline_ws):
    wd = pipeline_ws
    assert cli.main(["generate", "--workdir", str(wd),
                     "--backend", "mock:echo-nn", "--nn", "--force"]) == 0
    corpus = load_manifest(wd / "manifest.jsonl")
    weights = load_weights(wd / "aggregator.wsiw")
    index = load_index(wd / "index.wsif", wd / "index.json")
    reports = {r.id: r.report for r in corpus.records}

    rows = [obj for _, obj in read_jsonl(wd / "generations.jsonl", ("id", "text"))]
    assert len(rows) == 5  # the test split of the 50-record corpus
    pairs = [(row["id"], row["text"], reports[row["id"]]) for row in rows]
    report = evaluate_corpus(pairs, EvalConfig(truncation_length=100))

    for row, sample in zip(rows, report.samples):
        record = corpus.by_id(row["id"])
        query = aggregate(corpus.load_features(record), weights)
        nearest = knn(index, query.pooled, k=1)[0]
        assert row["text"] == reports[nearest.id]
        cand = truncate(tokenize(reports[nearest.id]), 100)
        ref = truncate(tokenize(record.report), 100)
        for n in range(1, 5):
            direct = bleu([cand], [ref], n)
            assert abs(getattr(sample, f"bleu{n}") - direct) < 1e-12


def test_07_ablation_and_sweep_shapes(pipeline_ws):
    wd = pipeline_ws
    # K sweep: three rows, one per K value.
    args_k = ["ablate", "--workdir", str(wd), "--backend", "mock:echo-prompt-hash",
              "--sweep", "k", "--k-values", "1,3,5"]
    assert cli.main(args_k) == 0
    k_lines = (wd / "ablation_k.csv").read_text().strip().split("\n")
    assert k_lines[0] == "config,bleu1,bleu4,meteor,rouge_l"
    assert [line.split(",")[0] for line in k_lines[1:]] == ["K=1", "K=3", "K=5"]

    # Flag sweep: the five clue combinations, deterministic under mocks.
    args_f = ["ablate", "--workdir", str(wd), "--backend", "mock:echo-prompt-hash",
              "--sweep", "flags", "--k", "3"]
    assert cli.main(args_f) == 0
    first = (wd / "ablation_flags.csv").read_bytes()
    labels = [line.split(",")[0] for line in first.decode().strip().split("\n")[1:]]
    assert labels == ["Base Model", "+ NN", "+ NN + Guideline",
                      "+ NN + Feedback", "+ NN + Guideline + Feedback"]
    assert cli.main(args_f) == 0
    assert (wd / "ablation_flags.csv").read_bytes() == first

    # Truncation sweep: the default five-point 100..500 curve.
    assert cli.main(["generate", "--workdir", str(wd),
                     "--backend", "mock:echo-nn", "--nn", "--force"]) == 0
    assert cli.main(["sweep-length", "--workdir", str(wd)]) == 0
    sweep_lines = (wd / "sweep.csv").read_bytes().decode().strip().split("\r\n")
    assert [line.split(",")[0] for line in sweep_lines] == [
        "length", "100", "200", "300", "400", "500"
    ]


def test_08_leave_one_out_and_zero_call_reruns(pipeline_ws, monkeypatch):
    wd = pipeline_ws
    corpus = load_manifest(wd / "manifest.jsonl")
    train, _, _ = split_from_file(corpus, wd / "splits.json")
    weights = load_weights(wd / "aggregator.wsiw")
    index = load_index(wd / "index.wsif", wd / "index.json")
    tokens = {r.id: aggregate(corpus.load_features(r), weights) for r in train.records}

    real_knn = wsigen.context.knn
    excludes = []

    def spy_knn(idx, query, k, exclude=None):
        excludes.append(exclude)
        out = real_knn(idx, query, k, exclude=exclude)
        assert exclude not in [nb.id for nb in out]
        return out

    monkeypatch.setattr(wsigen.context, "knn", spy_knn)
    backend = mock_backend("fixed:draft or critique")
    store, report = build_feedback_store(
        train, index, tokens, backend, flags=ContextFlags(nn=True),
    )
    assert report.errors == []
    # Every record's retrieval excluded that record itself.
    assert sorted(excludes) == sorted(train.ids())

    # Rerunning either store build issues zero backend calls.
    calls = backend.calls
    _, rerun = build_feedback_store(
        train, index, tokens, backend, store=store, flags=ContextFlags(nn=True),
    )
    assert backend.calls == calls
    assert rerun.built == []

    g_backend = mock_backend("fixed:guideline")
    cache, _ = build_guideline_cache(train, g_backend)
    g_calls = g_backend.calls
    _, g_rerun = build_guideline_cache(train, g_backend, cache=cache)
    assert g_backend.calls == g_calls
    assert g_rerun.built == []


@settings(max_examples=80, deadline=None)
@given(nn=st.booleans(), guideline=st.booleans(), feedback=st.booleans(), k=st.integers(1, 6))
def test_09_payload_length_law(nn, guideline, feedback, k):
    def tokens(seed):
        r = np.random.default_rng(seed)
        mat = r.normal(size=(2, 3))
        pooled = mat.mean(axis=0)
        return TokenSet(m=2, d=3, tokens=mat, pooled=pooled / np.linalg.norm(pooled))

    bundle = ContextBundle(flags=ContextFlags(nn=nn, guideline=guideline, feedback=feedback))
    if nn:
        bundle.nn = ("n", "neighbor report", tokens(1))
    if guideline:
        bundle.guideline = ("cat", "guideline text")
    if feedback:
        bundle.feedback = [
            FeedbackItem(id=f"f{i}", text=f"critique {i}", tokens=tokens(10 + i))
            for i in range(k)
        ]
    prompt = assemble_prompt(tokens(0), bundle)
    assert len(prompt.image_payload) == 1 + (1 if nn else 0) + (k if feedback else 0)
