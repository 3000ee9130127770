"""Retrieval-augmented report generation for slide-level feature sets.

The pipeline ingests (patch features, report, category) records,
aggregates each variable-length feature matrix into a fixed token set
with a learnable-query cross-attention block, retrieves similar cases by
exact cosine search, assembles nearest-neighbor / guideline / feedback
clues into prompts for a pluggable text generator, and evaluates the
output with BLEU-1..4, METEOR, ROUGE-L, and an entity-coverage score.
"""
from .aggregator import (
    AggregatorWeights,
    TokenSet,
    aggregate,
    aggregate_with_attention,
    load_weights,
    pool,
    save_weights,
    seeded_weights,
)
from .context import (
    BASE_PROMPT,
    ContextBundle,
    ContextFlags,
    FeedbackItem,
    Prompt,
    assemble_prompt,
    build_bundle,
    prompt_digest,
    render_feedback_request,
    render_guideline_request,
)
from .corpus import (
    Corpus,
    PatchFeatures,
    SplitSpec,
    WsiRecord,
    load_manifest,
    read_features,
    split,
    split_from_file,
    write_features,
)
from .errors import BackendError, ValidationError, WsigenError
from .genclient import (
    GeneratedReport,
    GenerationRequest,
    HttpBackend,
    MockBackend,
    generate,
    generate_many,
    mock_backend,
)
from .metrics import (
    EntityExtractor,
    EvalConfig,
    MetricReport,
    bleu,
    evaluate_corpus,
    fact_ent,
    length_sweep,
    meteor,
    rouge_l,
    sentence_bleu,
    tokenize,
    truncate,
)
from .pipelines import (
    FeedbackStore,
    GuidelineCache,
    build_feedback_store,
    build_guideline_cache,
)
from .retrieval import (
    Neighbor,
    RetrievalIndex,
    build_index,
    cosine,
    knn,
    load_index,
    majority_category,
    save_index,
)

__version__ = "0.1.0"

__all__ = [
    "AggregatorWeights",
    "BASE_PROMPT",
    "BackendError",
    "ContextBundle",
    "ContextFlags",
    "Corpus",
    "EntityExtractor",
    "EvalConfig",
    "FeedbackItem",
    "FeedbackStore",
    "GeneratedReport",
    "GenerationRequest",
    "GuidelineCache",
    "HttpBackend",
    "MetricReport",
    "MockBackend",
    "Neighbor",
    "PatchFeatures",
    "Prompt",
    "RetrievalIndex",
    "SplitSpec",
    "TokenSet",
    "ValidationError",
    "WsiRecord",
    "WsigenError",
    "aggregate",
    "aggregate_with_attention",
    "assemble_prompt",
    "bleu",
    "build_bundle",
    "build_feedback_store",
    "build_guideline_cache",
    "build_index",
    "cosine",
    "evaluate_corpus",
    "fact_ent",
    "generate",
    "generate_many",
    "knn",
    "length_sweep",
    "load_index",
    "load_manifest",
    "load_weights",
    "majority_category",
    "meteor",
    "mock_backend",
    "pool",
    "prompt_digest",
    "read_features",
    "render_feedback_request",
    "render_guideline_request",
    "rouge_l",
    "save_index",
    "save_weights",
    "seeded_weights",
    "sentence_bleu",
    "split",
    "split_from_file",
    "tokenize",
    "truncate",
    "write_features",
]
