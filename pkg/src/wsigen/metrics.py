"""Report-quality metrics: BLEU-1..4, METEOR, ROUGE-L, and entity-match F1.

All metrics share one tokenizer (lowercase, whitespace split, edge ASCII
punctuation stripped) and one truncation rule (first L tokens of both
sides). BLEU is corpus-level: clipped n-gram counts are summed over the
corpus before the geometric mean and brevity penalty; a smoothed
per-sample variant exists for diagnostics only. METEOR runs the
exact-match stage only, with the canonical (0.9, 3, 0.5) parameters, so
absolute values sit slightly below toolkit METEOR with stemming and
synonyms enabled.

Entity coverage ("fact" score) compares entity sets extracted from the
candidate and reference; the default extractor is an offline gazetteer
scanned longest-match-first, with an external NER endpoint mode for
parity with model-based extraction.
"""
from __future__ import annotations

import csv
import io
import json
import math
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

from .errors import EmptyInput, EmptyReference, ExtractorUnavailable, LengthMismatch

DEFAULT_TRUNCATION = 100
DEFAULT_ROUGE_BETA = 1.0
DEFAULT_METEOR_ALPHA = 0.9
DEFAULT_METEOR_BETA = 3.0
DEFAULT_METEOR_GAMMA = 0.5

FACT_REWARDS = ("f1", "precision", "recall")

_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge ASCII punctuation, drop empties."""
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            out.append(tok)
    return out


def truncate(tokens: list[str], limit: int) -> list[str]:
    """First min(limit, len) tokens."""
    if limit < 1:
        raise ValueError(f"truncation length must be >= 1, got {limit}")
    return tokens[:limit]


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(cands: list[list[str]], refs: list[list[str]], n: int) -> float:
    """Corpus-level BLEU-n with uniform 1/n weights and standard brevity penalty.

    Counts are summed over all pairs before the precision ratios are taken.
    Zero clipped matches at any order (or a candidate side too short to
    produce any n-gram) give 0.
    """
    if not 1 <= n <= 4:
        raise ValueError(f"n must be in 1..4, got {n}")
    if len(cands) != len(refs):
        raise LengthMismatch(f"{len(cands)} candidates vs {len(refs)} references")
    if not cands:
        raise EmptyInput("no pairs to score")
    for ref in refs:
        if not ref:
            raise EmptyReference("reference token list is empty")

    matched = [0] * n
    total = [0] * n
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(cands, refs):
        cand_len += len(cand)
        ref_len += len(ref)
        for i in range(1, n + 1):
            ref_counts = _ngrams(ref, i)
            for gram, count in _ngrams(cand, i).items():
                matched[i - 1] += min(count, ref_counts[gram])
                total[i - 1] += count
    if cand_len == 0:
        return 0.0
    log_sum = 0.0
    for i in range(n):
        if matched[i] == 0:
            return 0.0
        log_sum += math.log(matched[i] / total[i]) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum)


def sentence_bleu(cand: list[str], ref: list[str], n: int, smooth: bool = True) -> float:
    """Per-sample BLEU-n diagnostic; add-1 smoothing on zero counts for i >= 2."""
    if not 1 <= n <= 4:
        raise ValueError(f"n must be in 1..4, got {n}")
    if not ref:
        raise EmptyReference("reference token list is empty")
    if not cand:
        return 0.0
    log_sum = 0.0
    for i in range(1, n + 1):
        ref_counts = _ngrams(ref, i)
        cand_counts = _ngrams(cand, i)
        m = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        t = sum(cand_counts.values())
        if m == 0 and smooth and i >= 2:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t) / n
    bp = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_sum)


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    if a == b:
        return len(a)
    # One-row DP; b on the inner loop.
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        append = cur.append
        row_prev = prev
        best = 0
        for j, y in enumerate(b, start=1):
            if x == y:
                val = row_prev[j - 1] + 1
            else:
                val = row_prev[j] if row_prev[j] >= best else best
            if val > best:
                best = val
            append(val)
        prev = cur
    return prev[-1]


def rouge_l(cand: list[str], ref: list[str], beta: float = DEFAULT_ROUGE_BETA) -> float:
    """LCS-based F-measure; beta weights recall (beta=1 is symmetric F1)."""
    if not ref:
        raise EmptyReference("reference token list is empty")
    if not cand:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return (1.0 + beta * beta) * p * r / (r + beta * beta * p)


def _align_matches(cand: list[str], ref: list[str]) -> tuple[int, int]:
    """Exact-match alignment: (matches, chunks).

    Matches are maximal by construction (every remaining common word can
    still pair up as a length-1 block). Chunks are minimized greedily by
    repeatedly taking the longest common contiguous block over still-free
    positions, ties to the smallest (candidate, reference) start.
    """
    vocab: dict[str, int] = {}
    c_codes = np.array([vocab.setdefault(t, len(vocab)) for t in cand], dtype=np.int64)
    r_codes = np.array([vocab.setdefault(t, len(vocab)) for t in ref], dtype=np.int64)
    n_c, n_r = len(cand), len(ref)
    c_free = np.ones(n_c, dtype=bool)
    r_free = np.ones(n_r, dtype=bool)
    pairs: list[tuple[int, int]] = []

    while True:
        eq = (c_codes[:, None] == r_codes[None, :]) & c_free[:, None] & r_free[None, :]
        if not eq.any():
            break
        best_len = 0
        best_start = (0, 0)
        prev = np.zeros(n_r, dtype=np.int64)
        for i in range(n_c):
            run = np.zeros(n_r, dtype=np.int64)
            row = eq[i]
            run[row] = 1
            run[1:][row[1:]] += prev[:-1][row[1:]]
            row_best = int(run.max()) if n_r else 0
            if row_best > best_len:
                j_end = int(np.argmax(run))
                best_len = row_best
                best_start = (i - best_len + 1, j_end - best_len + 1)
            prev = run
        i0, j0 = best_start
        c_free[i0 : i0 + best_len] = False
        r_free[j0 : j0 + best_len] = False
        pairs.extend((i0 + t, j0 + t) for t in range(best_len))

    pairs.sort()
    chunks = 0
    prev_pair: tuple[int, int] | None = None
    for i, j in pairs:
        if prev_pair is None or (i, j) != (prev_pair[0] + 1, prev_pair[1] + 1):
            chunks += 1
        prev_pair = (i, j)
    return len(pairs), chunks


def meteor(
    cand: list[str],
    ref: list[str],
    alpha: float = DEFAULT_METEOR_ALPHA,
    beta: float = DEFAULT_METEOR_BETA,
    gamma: float = DEFAULT_METEOR_GAMMA,
) -> float:
    """Exact-match METEOR: harmonic precision/recall mean times a chunk penalty."""
    if not ref:
        raise EmptyReference("reference token list is empty")
    if not cand:
        return 0.0
    m, chunks = _align_matches(cand, ref)
    if m == 0:
        return 0.0
    p = m / len(cand)
    r = m / len(ref)
    fmean = p * r / (alpha * p + (1.0 - alpha) * r)
    penalty = gamma * (chunks / m) ** beta
    return fmean * (1.0 - penalty)


@dataclass
class EntityExtractor:
    """Entity-set extractor: offline gazetteer or external NER endpoint.

    Gazetteer entries are normalized through the shared tokenizer and
    matched longest-first over the token stream. The external mode POSTs
    ``{"text": ...}`` and expects ``{"entities": [...]}`` back.
    """

    mode: str
    gazetteer: frozenset[tuple[str, ...]] = frozenset()
    endpoint: str = ""
    timeout_s: float = 30.0

    def __post_init__(self):
        if self.mode not in ("gazetteer", "external"):
            raise ValueError(f"unknown extractor mode {self.mode!r}")
        if self.mode == "gazetteer" and not self.gazetteer:
            raise EmptyInput("gazetteer mode requires a non-empty entity list")
        if self.mode == "external" and not self.endpoint:
            raise ValueError("external mode requires an endpoint URL")

    @classmethod
    def from_entities(cls, entities) -> "EntityExtractor":
        normalized = {tuple(tokenize(e)) for e in entities}
        normalized.discard(())
        return cls(mode="gazetteer", gazetteer=frozenset(normalized))

    @classmethod
    def from_gazetteer_file(cls, path: Path | str) -> "EntityExtractor":
        with open(path, encoding="utf-8") as fh:
            return cls.from_entities(line.strip() for line in fh if line.strip())

    @classmethod
    def external(cls, endpoint: str, timeout_s: float = 30.0) -> "EntityExtractor":
        return cls(mode="external", endpoint=endpoint, timeout_s=timeout_s)

    def extract(self, text: str) -> set[tuple[str, ...]]:
        if self.mode == "external":
            return self._extract_external(text)
        tokens = tokenize(text)
        max_len = max((len(e) for e in self.gazetteer), default=0)
        found: set[tuple[str, ...]] = set()
        i = 0
        while i < len(tokens):
            step = 1
            for width in range(min(max_len, len(tokens) - i), 0, -1):
                window = tuple(tokens[i : i + width])
                if window in self.gazetteer:
                    found.add(window)
                    step = width
                    break
            i += step
        return found

    def _extract_external(self, text: str) -> set[tuple[str, ...]]:
        try:
            resp = requests.post(self.endpoint, json={"text": text}, timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise ExtractorUnavailable(f"NER endpoint {self.endpoint}: {exc}") from exc
        if resp.status_code != 200:
            raise ExtractorUnavailable(
                f"NER endpoint {self.endpoint}: HTTP {resp.status_code}"
            )
        try:
            entities = resp.json()["entities"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ExtractorUnavailable(f"NER endpoint returned bad payload: {exc}") from exc
        normalized = {tuple(tokenize(e)) for e in entities}
        normalized.discard(())
        return normalized


def fact_ent(
    cand_text: str,
    ref_text: str,
    extractor: EntityExtractor,
    reward: str = "f1",
) -> float:
    """Entity coverage of the candidate against the reference.

    Default is F1 over the two entity sets; precision/recall variants are
    selectable. Two empty sets score 1.0.
    """
    if reward not in FACT_REWARDS:
        raise ValueError(f"reward must be one of {FACT_REWARDS}, got {reward!r}")
    e_c = extractor.extract(cand_text)
    e_r = extractor.extract(ref_text)
    if not e_c and not e_r:
        return 1.0
    overlap = len(e_c & e_r)
    if reward == "precision":
        return overlap / len(e_c) if e_c else 0.0
    if reward == "recall":
        return overlap / len(e_r) if e_r else 0.0
    return 2.0 * overlap / (len(e_c) + len(e_r))


# -- corpus evaluation -------------------------------------------------------

@dataclass
class EvalConfig:
    truncation_length: int = DEFAULT_TRUNCATION
    rouge_beta: float = DEFAULT_ROUGE_BETA
    meteor_alpha: float = DEFAULT_METEOR_ALPHA
    meteor_beta: float = DEFAULT_METEOR_BETA
    meteor_gamma: float = DEFAULT_METEOR_GAMMA
    extractor: EntityExtractor | None = None
    fact_reward: str = "f1"


@dataclass
class SampleScores:
    id: str
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    fact_ent: float | None


@dataclass
class CorpusScores:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    fact_ent: float | None


@dataclass
class MetricReport:
    truncation_length: int
    samples: list[SampleScores]
    corpus: CorpusScores

    _COLUMNS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "fact_ent")

    def to_json_obj(self) -> dict:
        return {
            "truncation_length": self.truncation_length,
            "corpus": {c: getattr(self.corpus, c) for c in self._COLUMNS},
            "samples": [
                {"id": s.id, **{c: getattr(s, c) for c in self._COLUMNS}}
                for s in self.samples
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(("id",) + self._COLUMNS)
        for s in self.samples:
            writer.writerow([s.id] + [_fmt(getattr(s, c)) for c in self._COLUMNS])
        writer.writerow(["CORPUS"] + [_fmt(getattr(self.corpus, c)) for c in self._COLUMNS])
        return buf.getvalue()


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(value)


def evaluate_corpus(
    pairs: list[tuple[str, str, str]],
    config: EvalConfig | None = None,
) -> MetricReport:
    """Score (id, generated, reference) pairs at one truncation length.

    Both sides are tokenized and truncated to the configured length before
    every metric. Per-sample BLEU rows use the corpus formula on the single
    pair; the corpus row sums counts over all pairs.
    """
    if not pairs:
        raise EmptyInput("no pairs to evaluate")
    config = config or EvalConfig()
    limit = config.truncation_length

    samples = []
    cands = []
    refs = []
    fact_values = []
    for record_id, generated, reference in pairs:
        cand = truncate(tokenize(generated), limit)
        ref = truncate(tokenize(reference), limit)
        if not ref:
            raise EmptyReference(f"record {record_id!r}: reference has no tokens")
        cands.append(cand)
        refs.append(ref)
        fact = None
        if config.extractor is not None:
            fact = fact_ent(
                " ".join(cand), " ".join(ref), config.extractor, config.fact_reward
            )
            fact_values.append(fact)
        samples.append(SampleScores(
            id=record_id,
            bleu1=bleu([cand], [ref], 1),
            bleu2=bleu([cand], [ref], 2),
            bleu3=bleu([cand], [ref], 3),
            bleu4=bleu([cand], [ref], 4),
            meteor=meteor(cand, ref, config.meteor_alpha, config.meteor_beta, config.meteor_gamma),
            rouge_l=rouge_l(cand, ref, config.rouge_beta),
            fact_ent=fact,
        ))
    corpus = CorpusScores(
        bleu1=bleu(cands, refs, 1),
        bleu2=bleu(cands, refs, 2),
        bleu3=bleu(cands, refs, 3),
        bleu4=bleu(cands, refs, 4),
        meteor=float(np.mean([s.meteor for s in samples])),
        rouge_l=float(np.mean([s.rouge_l for s in samples])),
        fact_ent=float(np.mean(fact_values)) if fact_values else None,
    )
    return MetricReport(truncation_length=limit, samples=samples, corpus=corpus)


def length_sweep(
    pairs: list[tuple[str, str, str]],
    lengths: list[int],
    config: EvalConfig | None = None,
) -> list[tuple[int, MetricReport]]:
    """Evaluate the same pairs at each truncation length (ascending)."""
    if not lengths:
        raise EmptyInput("no lengths to sweep")
    if sorted(lengths) != list(lengths):
        raise ValueError("sweep lengths must be sorted ascending")
    config = config or EvalConfig()
    rows = []
    for limit in lengths:
        cfg = EvalConfig(
            truncation_length=limit,
            rouge_beta=config.rouge_beta,
            meteor_alpha=config.meteor_alpha,
            meteor_beta=config.meteor_beta,
            meteor_gamma=config.meteor_gamma,
            extractor=config.extractor,
            fact_reward=config.fact_reward,
        )
        rows.append((limit, evaluate_corpus(pairs, cfg)))
    return rows


def sweep_to_csv(rows: list[tuple[int, MetricReport]]) -> str:
    """Corpus-level scores per truncation length, one CSV row per length."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(("length",) + MetricReport._COLUMNS)
    for limit, report in rows:
        writer.writerow(
            [limit] + [_fmt(getattr(report.corpus, c)) for c in MetricReport._COLUMNS]
        )
    return buf.getvalue()
