"""Command-line workflow driver.

Subcommands cover the full pipeline: ingest a manifest into a workspace,
split it, build the retrieval index (fixing the aggregator weights),
build the feedback and guideline stores, generate reports for a split
under any flag combination, and evaluate or sweep the results. Artifacts
are plain files inside one working directory; every run with mock
backends is bit-reproducible given the same configuration and seed.

Options may come from flags or from a TOML config file (``--config``);
flags win. Exit codes: 0 success, 2 validation error, 3 backend error
(partial output is persisted alongside an error manifest).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .aggregator import (
    DEFAULT_HEADS,
    DEFAULT_LAYERS,
    DEFAULT_QUERY_TOKENS,
    POOL_SOURCES,
    TokenSet,
    aggregate,
    load_weights,
    save_weights,
    seeded_weights,
)
from .context import ContextFlags, assemble_prompt, build_bundle, prompt_digest
from .corpus import (
    Corpus,
    SplitSpec,
    load_manifest,
    save_split_ids,
    split,
    split_from_file,
)
from .errors import (
    BackendError,
    MissingFile,
    MissingStore,
    ShapeMismatch,
    UnknownKind,
    ValidationError,
)
from .genclient import (
    DEFAULT_IN_FLIGHT,
    ENV_API_KEY,
    ENV_MODEL,
    GenerationRequest,
    HttpBackend,
    generate_many,
    http_backend_from_env,
    mock_backend,
)
from .metrics import (
    FACT_REWARDS,
    EntityExtractor,
    EvalConfig,
    bleu,
    evaluate_corpus,
    length_sweep,
    sweep_to_csv,
    tokenize,
    truncate,
)
from .pipelines import (
    FeedbackStore,
    GuidelineCache,
    atomic_write_jsonl,
    build_feedback_store,
    build_guideline_cache,
    read_jsonl,
    save_error_manifest,
)
from .retrieval import RetrievalIndex, build_index, load_index, save_index

logger = logging.getLogger(__name__)

WORK_MANIFEST = "manifest.jsonl"
WORK_SPLITS = "splits.json"
WORK_WEIGHTS = "aggregator.wsiw"
WORK_INDEX_VEC = "index.wsif"
WORK_INDEX_TAB = "index.json"
WORK_FEEDBACK = "feedback.jsonl"
WORK_FEEDBACK_ERRORS = "feedback.errors.jsonl"
WORK_GUIDELINES = "guidelines.jsonl"
WORK_GUIDELINE_ERRORS = "guidelines.errors.jsonl"
WORK_GENERATIONS = "generations.jsonl"
WORK_GENERATION_ERRORS = "generations.errors.jsonl"

TABLE_COLUMNS = ("bleu1", "bleu4", "meteor", "rouge_l")

FLAG_SWEEP = (
    ("Base Model", ContextFlags(False, False, False)),
    ("+ NN", ContextFlags(True, False, False)),
    ("+ NN + Guideline", ContextFlags(True, True, False)),
    ("+ NN + Feedback", ContextFlags(True, False, True)),
    ("+ NN + Guideline + Feedback", ContextFlags(True, True, True)),
)


# -- option resolution -------------------------------------------------------

def _load_config_file(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"config file not found: {path}")
    with open(path, "rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"bad config file {path}: {exc}") from exc


def _get(args, key: str, default):
    """Flag value if set, else config-file value, else the default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    return args.run_config.get(key, default)


def _require(args, key: str, flag: str):
    value = _get(args, key, None)
    if value is None:
        raise ValidationError(f"{flag} is required (set it as a flag or in the config file)")
    return value


def _int_list(value) -> list[int]:
    if isinstance(value, str):
        parts = [p.strip() for p in value.split(",") if p.strip()]
    else:
        parts = list(value)
    if not parts:
        raise ValidationError("expected a non-empty comma-separated integer list")
    try:
        return [int(p) for p in parts]
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad integer list {value!r}") from exc


def _workdir(args) -> Path:
    return Path(_get(args, "workdir", "work"))


def _gen_kwargs(args) -> dict:
    return {
        "model": _get(args, "model", ""),
        "max_tokens": _get(args, "max_tokens", 512),
        "temperature": _get(args, "temperature", 0.0),
        "timeout_s": _get(args, "timeout_s", 60.0),
        "retries": _get(args, "retries", 3),
    }


def backend_from_spec(spec: str):
    """Parse a backend spec: ``mock:<kind>``, ``http``, or a base URL."""
    if spec.startswith("mock:"):
        return mock_backend(spec[len("mock:"):])
    if spec == "http":
        return http_backend_from_env()
    if spec.startswith(("http://", "https://")):
        return HttpBackend(
            base_url=spec,
            api_key=os.environ.get(ENV_API_KEY, ""),
            model=os.environ.get(ENV_MODEL, ""),
        )
    raise UnknownKind(f"unknown backend spec {spec!r}")


# -- workspace loading -------------------------------------------------------

def _load_workspace_corpus(args) -> Corpus:
    path = _workdir(args) / WORK_MANIFEST
    if not path.is_file():
        raise MissingFile(f"{path} not found; run `wsigen ingest` first")
    return load_manifest(path)


def _load_splits(args, corpus: Corpus) -> tuple[Corpus, Corpus, Corpus]:
    path = _workdir(args) / WORK_SPLITS
    if not path.is_file():
        raise MissingFile(f"{path} not found; run `wsigen split` first")
    return split_from_file(corpus, path)


def _load_workspace_weights(args):
    path = _workdir(args) / WORK_WEIGHTS
    if not path.is_file():
        raise MissingFile(f"{path} not found; run `wsigen index` first")
    return load_weights(path)


def _load_workspace_index(args) -> RetrievalIndex:
    vec = _workdir(args) / WORK_INDEX_VEC
    tab = _workdir(args) / WORK_INDEX_TAB
    if not vec.is_file() or not tab.is_file():
        raise MissingFile(f"{vec} / {tab} not found; run `wsigen index` first")
    return load_index(vec, tab)


def _compute_tokens(sub: Corpus, weights, pool_source: str) -> dict[str, TokenSet]:
    return {
        r.id: aggregate(sub.load_features(r), weights, pool_source)
        for r in sub.records
    }


def _pool_source(args) -> str:
    value = _get(args, "pool_source", POOL_SOURCES[0])
    if value not in POOL_SOURCES:
        raise ValidationError(f"pool-source must be one of {POOL_SOURCES}, got {value!r}")
    return value


def _load_generations(path: Path) -> list[dict]:
    return [obj for _, obj in read_jsonl(path, ("id", "text"))]


def _reference_pairs(corpus: Corpus, rows: list[dict]) -> list[tuple[str, str, str]]:
    table = {r.id: r for r in corpus.records}
    pairs = []
    for row in rows:
        if row["id"] not in table:
            raise ValidationError(f"generated id {row['id']!r} is not in the corpus")
        pairs.append((row["id"], row["text"], table[row["id"]].report))
    return pairs


def _extractor(args) -> EntityExtractor | None:
    gazetteer = _get(args, "gazetteer", None)
    endpoint = _get(args, "ner_endpoint", None)
    if gazetteer and endpoint:
        raise ValidationError("--gazetteer and --ner-endpoint are mutually exclusive")
    if gazetteer:
        return EntityExtractor.from_gazetteer_file(gazetteer)
    if endpoint:
        return EntityExtractor.external(endpoint)
    return None


def _eval_config(args, extractor: EntityExtractor | None) -> EvalConfig:
    limit = _get(args, "truncate", 100)
    if limit < 1:
        raise ValidationError(f"--truncate must be >= 1, got {limit}")
    reward = _get(args, "fact_reward", "f1")
    if reward not in FACT_REWARDS:
        raise ValidationError(f"--fact-reward must be one of {FACT_REWARDS}, got {reward!r}")
    return EvalConfig(truncation_length=limit, extractor=extractor, fact_reward=reward)


# -- subcommands -------------------------------------------------------------

def cmd_ingest(args) -> int:
    corpus = load_manifest(args.manifest)
    workdir = _workdir(args)
    workdir.mkdir(parents=True, exist_ok=True)
    # The workspace copy pins features_path absolute so later stages do not
    # depend on where the original manifest lived.
    rows = (
        {
            "id": r.id,
            "category": r.category,
            "report": r.report,
            "features_path": str((corpus.root / r.features_path).resolve()),
        }
        for r in corpus.records
    )
    atomic_write_jsonl(workdir / WORK_MANIFEST, rows)
    print(
        f"ingested {len(corpus)} record(s), feature dim {corpus.d}, "
        f"{len(corpus.categories)} categorie(s) -> {workdir / WORK_MANIFEST}"
    )
    return 0


def cmd_split(args) -> int:
    corpus = _load_workspace_corpus(args)
    ids_file = _get(args, "ids_file", None)
    if ids_file:
        train, val, test = split_from_file(corpus, ids_file)
    else:
        spec = SplitSpec(
            train_ratio=_get(args, "train_ratio", 0.8),
            val_ratio=_get(args, "val_ratio", 0.1),
            test_ratio=_get(args, "test_ratio", 0.1),
            seed=_get(args, "seed", 0),
        )
        train, val, test = split(corpus, spec)
    out = _workdir(args) / WORK_SPLITS
    save_split_ids(out, train, val, test)
    print(f"split {len(corpus)} -> train {len(train)}, val {len(val)}, test {len(test)} ({out})")
    return 0


def cmd_index(args) -> int:
    corpus = _load_workspace_corpus(args)
    train, _, _ = _load_splits(args, corpus)
    weights_path = _get(args, "weights", None)
    if weights_path:
        weights = load_weights(weights_path)
    else:
        weights = seeded_weights(
            seed=_get(args, "seed", 0),
            m=_get(args, "query_tokens", DEFAULT_QUERY_TOKENS),
            d=corpus.d,
            layer_count=_get(args, "layers", DEFAULT_LAYERS),
            heads=_get(args, "heads", DEFAULT_HEADS),
        )
    if weights.d != corpus.d:
        raise ShapeMismatch(f"weights expect d={weights.d}, corpus has d={corpus.d}")
    pool_source = _pool_source(args)
    tokens = _compute_tokens(train, weights, pool_source)
    index = build_index([(r.id, tokens[r.id].pooled, r.category) for r in train.records])
    workdir = _workdir(args)
    save_index(index, workdir / WORK_INDEX_VEC, workdir / WORK_INDEX_TAB)
    save_weights(workdir / WORK_WEIGHTS, weights)
    print(
        f"indexed {len(index)} training record(s) "
        f"(m={weights.m}, layers={weights.layer_count}, heads={weights.heads}, "
        f"pool={pool_source})"
    )
    return 0


def cmd_build_feedback(args) -> int:
    corpus = _load_workspace_corpus(args)
    train, _, _ = _load_splits(args, corpus)
    weights = _load_workspace_weights(args)
    index = _load_workspace_index(args)
    tokens = _compute_tokens(train, weights, _pool_source(args))
    backend = backend_from_spec(_require(args, "backend", "--backend"))
    reviewer_spec = _get(args, "reviewer_backend", None)
    reviewer = backend_from_spec(reviewer_spec) if reviewer_spec else None
    flags = ContextFlags(
        nn=_get(args, "with_nn", False),
        guideline=_get(args, "with_guideline", False),
        feedback=_get(args, "with_feedback", False),
    )
    workdir = _workdir(args)
    guidelines = None
    if flags.guideline:
        path = workdir / WORK_GUIDELINES
        if not path.is_file():
            raise MissingStore("guideline")
        guidelines = GuidelineCache.load(path)
    store_path = workdir / WORK_FEEDBACK
    existing = FeedbackStore.load(store_path) if store_path.is_file() else None
    store, report = build_feedback_store(
        train,
        index,
        tokens,
        backend,
        reviewer_backend=reviewer,
        store=existing,
        force=bool(_get(args, "force", False)),
        flags=flags,
        guidelines=guidelines,
        k=_get(args, "k", 1),
        gen_kwargs=_gen_kwargs(args),
    )
    store.save(store_path)
    print(
        f"feedback store: {len(report.built)} built, {len(report.skipped)} skipped, "
        f"{len(report.errors)} failed ({store_path})"
    )
    if report.errors:
        manifest = workdir / WORK_FEEDBACK_ERRORS
        save_error_manifest(manifest, report.errors)
        print(f"error manifest: {manifest}", file=sys.stderr)
        return 3
    return 0


def cmd_build_guidelines(args) -> int:
    corpus = _load_workspace_corpus(args)
    train, _, _ = _load_splits(args, corpus)
    backend = backend_from_spec(_require(args, "backend", "--backend"))
    workdir = _workdir(args)
    cache_path = workdir / WORK_GUIDELINES
    existing = GuidelineCache.load(cache_path) if cache_path.is_file() else None
    cache, report = build_guideline_cache(
        train,
        backend,
        sample_size=_get(args, "sample_size", 20),
        seed=_get(args, "seed", 0),
        cache=existing,
        force=bool(_get(args, "force", False)),
        gen_kwargs=_gen_kwargs(args),
    )
    cache.save(cache_path)
    print(
        f"guideline cache: {len(report.built)} built, {len(report.skipped)} skipped, "
        f"{len(report.errors)} failed ({cache_path})"
    )
    if report.errors:
        manifest = workdir / WORK_GUIDELINE_ERRORS
        save_error_manifest(manifest, report.errors)
        print(f"error manifest: {manifest}", file=sys.stderr)
        return 3
    return 0


def _prepare_icl(args, corpus: Corpus, train: Corpus, flags: ContextFlags):
    """Load index/stores/tokens needed by the enabled flags."""
    workdir = _workdir(args)
    index = None
    reports = None
    train_tokens = None
    guidelines = None
    feedback = None
    if flags.nn or flags.guideline or flags.feedback:
        index = _load_workspace_index(args)
    if flags.nn or flags.feedback:
        weights = _load_workspace_weights(args)
        train_tokens = _compute_tokens(train, weights, _pool_source(args))
        reports = {r.id: r.report for r in train.records}
    if flags.guideline:
        path = workdir / WORK_GUIDELINES
        if not path.is_file():
            raise MissingStore("guideline")
        guidelines = GuidelineCache.load(path)
    if flags.feedback:
        path = workdir / WORK_FEEDBACK
        if not path.is_file():
            raise MissingStore("feedback")
        feedback = FeedbackStore.load(path)
    return index, reports, train_tokens, guidelines, feedback


def _generate_rows(
    args,
    corpus: Corpus,
    train: Corpus,
    target: Corpus,
    flags: ContextFlags,
    k: int,
    backend,
    skip_ids: set[str],
) -> tuple[list[dict], list[tuple[str, str]]]:
    """Generate reports for every target record not in skip_ids.

    Returns (rows, errors); rows carry full provenance and no timestamps,
    so mock-backed runs are bit-reproducible.
    """
    index, reports, train_tokens, guidelines, feedback = _prepare_icl(args, corpus, train, flags)
    weights = _load_workspace_weights(args)
    pool_source = _pool_source(args)
    gen_kwargs = _gen_kwargs(args)

    pending = [r for r in target.records if r.id not in skip_ids]
    staged = []
    for record in pending:
        query = aggregate(target.load_features(record), weights, pool_source)
        bundle = build_bundle(
            query,
            flags,
            index=index,
            reports=reports,
            tokens=train_tokens,
            guidelines=guidelines,
            feedback=feedback,
            k=k,
        )
        prompt = assemble_prompt(query, bundle)
        staged.append((record, bundle, prompt))

    requests = [GenerationRequest(prompt=p, **gen_kwargs) for _, _, p in staged]
    results = generate_many(requests, backend, _get(args, "max_in_flight", DEFAULT_IN_FLIGHT))

    rows = []
    errors = []
    for (record, bundle, prompt), result in zip(staged, results):
        if isinstance(result, Exception):
            errors.append((record.id, f"{type(result).__name__}: {result}"))
            continue
        rows.append({
            "id": record.id,
            "text": result.text,
            "backend_id": result.backend_id,
            "flags": {"nn": flags.nn, "guideline": flags.guideline, "feedback": flags.feedback},
            "k": k,
            "neighbor_id": bundle.nn[0] if bundle.nn else None,
            "vote_category": bundle.guideline[0] if bundle.guideline else None,
            "feedback_ids": [item.id for item in bundle.feedback] if bundle.feedback else [],
            "prompt_sha256": prompt_digest(prompt),
            "payload_len": len(prompt.image_payload),
        })
    return rows, errors


def _target_split(args, splits: tuple[Corpus, Corpus, Corpus]) -> Corpus:
    name = _get(args, "split_name", "test")
    table = dict(zip(("train", "val", "test"), splits))
    if name not in table:
        raise ValidationError(f"--split must be one of train/val/test, got {name!r}")
    return table[name]


def cmd_generate(args) -> int:
    corpus = _load_workspace_corpus(args)
    splits = _load_splits(args, corpus)
    target = _target_split(args, splits)
    flags = ContextFlags(
        nn=bool(_get(args, "nn", False)),
        guideline=bool(_get(args, "guideline", False)),
        feedback=bool(_get(args, "feedback", False)),
    )
    k = _get(args, "k", 1)
    if k < 1:
        raise ValidationError(f"--k must be >= 1, got {k}")
    backend = backend_from_spec(_require(args, "backend", "--backend"))
    out_path = _workdir(args) / WORK_GENERATIONS

    existing: dict[str, dict] = {}
    if out_path.is_file() and not _get(args, "force", False):
        existing = {row["id"]: row for row in _load_generations(out_path)}
    rows, errors = _generate_rows(
        args, corpus, splits[0], target, flags, k, backend, set(existing)
    )
    for row in rows:
        existing[row["id"]] = row
    ordered = [existing[r.id] for r in target.records if r.id in existing]
    atomic_write_jsonl(out_path, ordered)
    print(
        f"generated {len(rows)} report(s), {len(existing) - len(rows)} already present, "
        f"{len(errors)} failed ({out_path})"
    )
    if errors:
        manifest = _workdir(args) / WORK_GENERATION_ERRORS
        save_error_manifest(manifest, errors)
        print(f"error manifest: {manifest}", file=sys.stderr)
        return 3
    return 0


def cmd_evaluate(args) -> int:
    corpus = _load_workspace_corpus(args)
    gen_path = Path(_get(args, "generations", _workdir(args) / WORK_GENERATIONS))
    pairs = _reference_pairs(corpus, _load_generations(gen_path))
    config = _eval_config(args, _extractor(args))
    report = evaluate_corpus(pairs, config)
    prefix = Path(_get(args, "out_prefix", _workdir(args) / "eval"))
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_name(prefix.name + ".csv")
    json_path = prefix.with_name(prefix.name + ".json")
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    json_path.write_text(report.to_json() + "\n", encoding="utf-8")
    c = report.corpus
    fact = "n/a" if c.fact_ent is None else f"{c.fact_ent:.4f}"
    print(
        f"n={len(report.samples)} L={report.truncation_length} "
        f"BLEU-1 {c.bleu1:.4f} BLEU-2 {c.bleu2:.4f} BLEU-3 {c.bleu3:.4f} "
        f"BLEU-4 {c.bleu4:.4f} METEOR {c.meteor:.4f} ROUGE-L {c.rouge_l:.4f} "
        f"fact {fact} -> {csv_path}"
    )
    return 0


def cmd_sweep_length(args) -> int:
    corpus = _load_workspace_corpus(args)
    gen_path = Path(_get(args, "generations", _workdir(args) / WORK_GENERATIONS))
    pairs = _reference_pairs(corpus, _load_generations(gen_path))
    lengths = _int_list(_get(args, "lengths", "100,200,300,400,500"))
    if sorted(lengths) != lengths:
        raise ValidationError(f"--lengths must be ascending, got {lengths}")
    config = _eval_config(args, _extractor(args))
    rows = length_sweep(pairs, lengths, config)
    out = Path(_get(args, "out", _workdir(args) / "sweep.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(sweep_to_csv(rows), encoding="utf-8")
    print(f"swept {len(lengths)} truncation length(s) over {len(pairs)} pair(s) -> {out}")
    return 0


def _markdown_table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |"]
    lines.append("|" + "|".join(" --- " for _ in header) + "|")
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    sweep = _get(args, "sweep", "flags")
    if sweep not in ("flags", "k"):
        raise ValidationError(f"--sweep must be 'flags' or 'k', got {sweep!r}")
    corpus = _load_workspace_corpus(args)
    splits = _load_splits(args, corpus)
    target = _target_split(args, splits)
    backend_spec = _require(args, "backend", "--backend")
    config = _eval_config(args, _extractor(args))

    if sweep == "k":
        ks = _int_list(_get(args, "k_values", "1,3,5"))
        runs = [(f"K={k}", ContextFlags(True, True, True), k) for k in ks]
    else:
        k = _get(args, "k", 3)
        runs = [(label, flags, k) for label, flags in FLAG_SWEEP]

    table_rows = []
    refs = {r.id: r.report for r in target.records}
    for label, flags, k in runs:
        backend = backend_from_spec(backend_spec)
        rows, errors = _generate_rows(
            args, corpus, splits[0], target, flags, k, backend, set()
        )
        if errors:
            first = errors[0]
            raise BackendError(
                f"{len(errors)} generation(s) failed in row {label!r}; first: {first[1]}"
            )
        pairs = [(row["id"], row["text"], refs[row["id"]]) for row in rows]
        report = evaluate_corpus(pairs, config)
        c = report.corpus
        table_rows.append([label] + [repr(getattr(c, col)) for col in TABLE_COLUMNS])

    prefix = Path(_get(args, "out_prefix", _workdir(args) / f"ablation_{sweep}"))
    prefix.parent.mkdir(parents=True, exist_ok=True)
    header = ["config", "bleu1", "bleu4", "meteor", "rouge_l"]
    csv_lines = [",".join(header)] + [",".join(row) for row in table_rows]
    csv_path = prefix.with_name(prefix.name + ".csv")
    md_path = prefix.with_name(prefix.name + ".md")
    csv_path.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    markdown = _markdown_table(header, table_rows)
    md_path.write_text(markdown, encoding="utf-8")
    print(markdown, end="")
    print(f"-> {csv_path}, {md_path}")
    return 0


def cmd_breakdown(args) -> int:
    corpus = _load_workspace_corpus(args)
    gen_path = Path(_get(args, "generations", _workdir(args) / WORK_GENERATIONS))
    rows = _load_generations(gen_path)
    pairs = _reference_pairs(corpus, rows)
    limit = _get(args, "truncate", 100)
    table = {r.id: r for r in corpus.records}

    grouped: dict[str, list[tuple[list[str], list[str]]]] = {}
    for record_id, generated, reference in pairs:
        category = table[record_id].category
        cand = truncate(tokenize(generated), limit)
        ref = truncate(tokenize(reference), limit)
        grouped.setdefault(category, []).append((cand, ref))

    out_lines = ["category,count,bleu1,bleu4"]
    for category in sorted(grouped):
        cands = [c for c, _ in grouped[category]]
        refs = [r for _, r in grouped[category]]
        out_lines.append(
            f"{category},{len(cands)},{bleu(cands, refs, 1)!r},{bleu(cands, refs, 4)!r}"
        )
    out = Path(_get(args, "out", _workdir(args) / "breakdown.csv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(out_lines) + "\n", encoding="utf-8")
    print(f"{len(grouped)} categorie(s) over {len(pairs)} pair(s) -> {out}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", help="workspace directory (default: work)")
    common.add_argument("--config", help="TOML config file; flags win over it")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for info, -vv for debug logging")

    genopts = argparse.ArgumentParser(add_help=False)
    genopts.add_argument("--backend",
                         help="mock:<kind>, http (env-configured), or a base URL")
    genopts.add_argument("--model", help="model name sent to HTTP backends")
    genopts.add_argument("--max-tokens", type=int, dest="max_tokens")
    genopts.add_argument("--temperature", type=float)
    genopts.add_argument("--timeout-s", type=float, dest="timeout_s")
    genopts.add_argument("--retries", type=int)

    evalopts = argparse.ArgumentParser(add_help=False)
    evalopts.add_argument("--truncate", type=int, help="token truncation length (default 100)")
    evalopts.add_argument("--gazetteer", help="entity list file, one entity per line")
    evalopts.add_argument("--ner-endpoint", dest="ner_endpoint",
                          help="external NER endpoint URL")
    evalopts.add_argument("--fact-reward", dest="fact_reward",
                          choices=("f1", "precision", "recall"))

    parser = argparse.ArgumentParser(
        prog="wsigen",
        description="Retrieval-augmented report generation workflow for slide-level features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate a manifest into the workspace")
    p.add_argument("manifest", help="JSONL manifest: id, category, report, features_path")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", parents=[common], help="write train/val/test id lists")
    p.add_argument("--train-ratio", type=float, dest="train_ratio")
    p.add_argument("--val-ratio", type=float, dest="val_ratio")
    p.add_argument("--test-ratio", type=float, dest="test_ratio")
    p.add_argument("--seed", type=int)
    p.add_argument("--ids-file", dest="ids_file",
                   help="adopt an explicit {train,val,test} id-list JSON file")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("index", parents=[common],
                       help="aggregate training features and build the retrieval index")
    p.add_argument("--seed", type=int, help="weight init seed (default 0)")
    p.add_argument("--query-tokens", type=int, dest="query_tokens")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--weights", help="load aggregator weights from this file instead")
    p.add_argument("--pool-source", dest="pool_source", choices=POOL_SOURCES)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("build-feedback", parents=[common, genopts],
                       help="build the per-record feedback store over the training split")
    p.add_argument("--reviewer-backend", dest="reviewer_backend",
                   help="separate backend for the critique step (default: --backend)")
    p.add_argument("--force", action="store_true", default=None,
                   help="regenerate entries that already exist")
    p.add_argument("--with-nn", dest="with_nn", action="store_true", default=None,
                   help="draft with the nearest-neighbor clue instead of the base setup")
    p.add_argument("--with-guideline", dest="with_guideline", action="store_true", default=None)
    p.add_argument("--with-feedback", dest="with_feedback", action="store_true", default=None)
    p.add_argument("--k", type=int)
    p.add_argument("--pool-source", dest="pool_source", choices=POOL_SOURCES)
    p.set_defaults(func=cmd_build_feedback)

    p = sub.add_parser("build-guidelines", parents=[common, genopts],
                       help="build the per-category guideline cache")
    p.add_argument("--sample-size", type=int, dest="sample_size",
                   help="reports sampled per category, at most 20")
    p.add_argument("--seed", type=int, help="sampling seed (default 0)")
    p.add_argument("--force", action="store_true", default=None)
    p.set_defaults(func=cmd_build_guidelines)

    p = sub.add_parser("generate", parents=[common, genopts],
                       help="generate reports for a split under the enabled flags")
    p.add_argument("--nn", action="store_true", default=None,
                   help="include the nearest neighbor's reference report")
    p.add_argument("--guideline", action="store_true", default=None,
                   help="include the majority-vote category guideline")
    p.add_argument("--feedback", action="store_true", default=None,
                   help="include stored feedback of the k nearest neighbors")
    p.add_argument("--k", type=int, help="neighbors for vote and feedback (default 1)")
    p.add_argument("--split", dest="split_name", choices=("train", "val", "test"))
    p.add_argument("--force", action="store_true", default=None,
                   help="regenerate records already present in the output")
    p.add_argument("--max-in-flight", type=int, dest="max_in_flight")
    p.add_argument("--pool-source", dest="pool_source", choices=POOL_SOURCES)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common, evalopts],
                       help="score generations against ground-truth reports")
    p.add_argument("--generations", help="generations JSONL (default: workspace file)")
    p.add_argument("--out-prefix", dest="out_prefix",
                   help="output path prefix for .csv/.json (default: <workdir>/eval)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-length", parents=[common, evalopts],
                       help="evaluate at several truncation lengths")
    p.add_argument("--generations")
    p.add_argument("--lengths", help="comma-separated ascending lengths (default 100..500)")
    p.add_argument("--out", help="output CSV (default: <workdir>/sweep.csv)")
    p.set_defaults(func=cmd_sweep_length)

    p = sub.add_parser("ablate", parents=[common, genopts, evalopts],
                       help="run a flag-combination or K sweep end to end")
    p.add_argument("--sweep", choices=("flags", "k"),
                   help="'flags': the 5 clue combinations; 'k': vary K (default flags)")
    p.add_argument("--k", type=int, help="K for the flag sweep (default 3)")
    p.add_argument("--k-values", dest="k_values",
                   help="comma-separated K list for --sweep k (default 1,3,5)")
    p.add_argument("--split", dest="split_name", choices=("train", "val", "test"))
    p.add_argument("--max-in-flight", type=int, dest="max_in_flight")
    p.add_argument("--pool-source", dest="pool_source", choices=POOL_SOURCES)
    p.add_argument("--out-prefix", dest="out_prefix")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("breakdown", parents=[common, evalopts],
                       help="per-category BLEU-1/BLEU-4 table from generations")
    p.add_argument("--generations")
    p.add_argument("--out", help="output CSV (default: <workdir>/breakdown.csv)")
    p.set_defaults(func=cmd_breakdown)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING
    if getattr(args, "verbose", 0) == 1:
        level = logging.INFO
    elif getattr(args, "verbose", 0) >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.run_config = _load_config_file(args)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
