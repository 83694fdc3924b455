"""Evaluation protocol: STS (Pearson), BCR (Spearman), NEL (exact top-k over
a synonym index) and entailment-triplet accuracy.

All evaluations are read-only over the model and graph, row order is
canonical (file order), and every metric has an independently implemented
oracle in the test suite that it must match to 1e-12.

Dataset files (UTF-8 TSV):
  STS / BCR  text_a <TAB> text_b <TAB> gold
  NEL        mention <TAB> concept_id
  NLI        anchor <TAB> entailed <TAB> contradicted
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import ontology as onto


class EvalError(Exception):
    pass


class ZeroVarianceError(EvalError):
    pass


class DegenerateModelError(EvalError):
    """The model produced constant predictions; a correlation would be NaN."""


class DatasetError(EvalError):
    pass


# ---------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class StsDataset:
    """Sentence pairs with gold similarity in [0, 5]."""

    rows: tuple[tuple[str, str, float], ...]

    def __post_init__(self):
        _check_pair_rows(self.rows)
        for a, b, g in self.rows:
            if not (0.0 <= g <= 5.0):
                raise DatasetError(f"STS gold {g} outside [0, 5]")


@dataclass(frozen=True)
class BcrDataset:
    """Concept-mention pairs with gold relatedness on any real scale."""

    rows: tuple[tuple[str, str, float], ...]

    def __post_init__(self):
        _check_pair_rows(self.rows)


@dataclass(frozen=True)
class NelDataset:
    rows: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not self.rows:
            raise DatasetError("empty NEL dataset")
        for mention, cid in self.rows:
            if not mention or not cid:
                raise DatasetError("NEL rows need a mention and a concept id")


@dataclass(frozen=True)
class NliTripleDataset:
    rows: tuple[tuple[str, str, str], ...]

    def __post_init__(self):
        if not self.rows:
            raise DatasetError("empty NLI dataset")
        for row in self.rows:
            if any(not t for t in row):
                raise DatasetError("NLI rows need three non-empty texts")


def _check_pair_rows(rows) -> None:
    if len(rows) < 2:
        raise DatasetError("need at least 2 rows for a correlation")
    golds = [g for _, _, g in rows]
    if max(golds) == min(golds):
        raise DatasetError("gold scores have zero variance")


def _read_tsv(path, n_cols: int) -> list[list[str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != n_cols:
                raise DatasetError(
                    f"{path}:{line_no}: expected {n_cols} columns, got {len(parts)}"
                )
            rows.append(parts)
    return rows


def load_sts_dataset(path) -> StsDataset:
    rows = [(a, b, _parse_gold(path, i, g)) for i, (a, b, g) in enumerate(_read_tsv(path, 3), 1)]
    return StsDataset(rows=tuple(rows))


def load_bcr_dataset(path) -> BcrDataset:
    rows = [(a, b, _parse_gold(path, i, g)) for i, (a, b, g) in enumerate(_read_tsv(path, 3), 1)]
    return BcrDataset(rows=tuple(rows))


def load_nel_dataset(path) -> NelDataset:
    return NelDataset(rows=tuple((m, c) for m, c in _read_tsv(path, 2)))


def load_nli_dataset(path) -> NliTripleDataset:
    return NliTripleDataset(rows=tuple((a, e, c) for a, e, c in _read_tsv(path, 3)))


def _parse_gold(path, line_no: int, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise DatasetError(f"{path}:{line_no}: gold score {raw!r} is not a number") from None


# ---------------------------------------------------------------------------
# Correlations


def pearson(xs, ys) -> float:
    """Sample Pearson correlation; rejects zero variance on either side."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-d arrays of equal length")
    if xs.size < 2:
        raise ValueError("need at least 2 observations")
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sx = float(dx @ dx)
    sy = float(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        raise ZeroVarianceError("zero variance input")
    return float((dx @ dy) / np.sqrt(sx * sy))


def _average_ranks(xs: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; ties receive the mean of their rank positions."""
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(len(xs))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    """Pearson correlation of average ranks."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("xs and ys must be 1-d arrays of equal length")
    return pearson(_average_ranks(xs), _average_ranks(ys))


# ---------------------------------------------------------------------------
# Reports and digests


@dataclass(frozen=True)
class EvalReport:
    benchmark: str
    metric: str
    value: float
    n: int
    model_digest: str
    data_digest: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "benchmark": self.benchmark,
                "metric": self.metric,
                "value": self.value,
                "n": self.n,
                "model_digest": self.model_digest,
                "data_digest": self.data_digest,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


def model_digest(ckpt: enc.Checkpoint) -> str:
    return hashlib.sha256(enc.checkpoint_to_bytes(ckpt)).hexdigest()


def data_digest(rows) -> str:
    payload = json.dumps([list(r) for r in rows], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def kg_digest(kg: onto.KnowledgeGraph) -> str:
    parts = []
    for cid in sorted(kg.concept_ids):
        c = kg.get(cid)
        parts.append(
            [c.id, list(c.names), c.semantic_type, list(c.parents),
             [list(r) for r in c.relations],
             [[d.text, d.source, d.language] for d in c.definitions]]
        )
    payload = json.dumps(parts, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Evaluations


def _cosine_rows(model: enc.Checkpoint, pairs) -> np.ndarray:
    """Cosine per pair. Identical texts score exactly 1.0: the float dot
    product of a unit vector with itself carries rounding noise, while the
    true cosine of identical embeddings is 1 by definition."""
    left = enc.encode_batch(model.params, model.config, [a for a, _ in pairs])
    right = enc.encode_batch(model.params, model.config, [b for _, b in pairs])
    cos = np.sum(left * right, axis=1)
    for i, (a, b) in enumerate(pairs):
        if a == b:
            cos[i] = 1.0
    return cos


def eval_sts(model: enc.Checkpoint, dataset: StsDataset) -> EvalReport:
    """Pearson correlation between embedding cosines and gold similarity."""
    preds = _cosine_rows(model, [(a, b) for a, b, _ in dataset.rows])
    gold = np.array([g for _, _, g in dataset.rows])
    if preds.max() == preds.min():
        raise DegenerateModelError("constant predictions on the STS dataset")
    return EvalReport(
        benchmark="sts",
        metric="pearson",
        value=pearson(preds, gold),
        n=len(dataset.rows),
        model_digest=model_digest(model),
        data_digest=data_digest(dataset.rows),
    )


def eval_bcr(model: enc.Checkpoint, dataset: BcrDataset) -> EvalReport:
    """Spearman correlation between embedding cosines and gold relatedness."""
    preds = _cosine_rows(model, [(a, b) for a, b, _ in dataset.rows])
    gold = np.array([g for _, _, g in dataset.rows])
    if preds.max() == preds.min():
        raise DegenerateModelError("constant predictions on the BCR dataset")
    return EvalReport(
        benchmark="bcr",
        metric="spearman",
        value=spearman(preds, gold),
        n=len(dataset.rows),
        model_digest=model_digest(model),
        data_digest=data_digest(dataset.rows),
    )


@dataclass
class NelIndex:
    """Exact-search synonym index: one embedding per (concept, name)."""

    embeddings: np.ndarray
    concept_ids: list[str]
    names: list[str]


def build_nel_index(model: enc.Checkpoint, kg: onto.KnowledgeGraph) -> NelIndex:
    """Embed every name of every concept. Duplicate surface strings shared
    by several concepts all stay in the index."""
    if len(kg) == 0:
        raise EvalError("empty knowledge graph")
    concept_ids: list[str] = []
    names: list[str] = []
    for cid in kg.concept_ids:
        for name in kg.get(cid).names:
            concept_ids.append(cid)
            names.append(name)
    embeddings = enc.encode_batch(model.params, model.config, names)
    return NelIndex(embeddings=embeddings, concept_ids=concept_ids, names=names)


def _rank_concepts(index: NelIndex, mention_emb: np.ndarray, pooling: str) -> list[str]:
    scores = index.embeddings @ mention_emb
    per_concept: dict[str, list[float]] = {}
    for cid, score in zip(index.concept_ids, scores):
        per_concept.setdefault(cid, []).append(float(score))
    if pooling == "max":
        pooled = {cid: max(v) for cid, v in per_concept.items()}
    elif pooling == "mean":
        pooled = {cid: sum(v) / len(v) for cid, v in per_concept.items()}
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    return sorted(pooled, key=lambda cid: (-pooled[cid], cid))


def eval_nel(
    model: enc.Checkpoint,
    kg: onto.KnowledgeGraph,
    dataset: NelDataset,
    k_list: list[int] = (1,),
    pooling: str = "max",
) -> list[EvalReport]:
    """Top-k linking accuracy, one report per k.

    Concepts are ranked by max (or mean) cosine over their synonyms; ties
    break toward the smaller concept id, so results are deterministic.
    """
    for _, gold in dataset.rows:
        if gold not in kg:
            raise EvalError(f"gold concept id {gold!r} does not resolve in the graph")
    k_list = sorted(set(int(k) for k in k_list))
    if not k_list or k_list[0] < 1:
        raise ValueError("k values must be >= 1")
    index = build_nel_index(model, kg)
    mentions = enc.encode_batch(model.params, model.config, [m for m, _ in dataset.rows])
    hits = {k: 0 for k in k_list}
    max_k = k_list[-1]
    for i, (_, gold) in enumerate(dataset.rows):
        ranking = _rank_concepts(index, mentions[i], pooling)[:max_k]
        for k in k_list:
            if gold in ranking[:k]:
                hits[k] += 1
    n = len(dataset.rows)
    digest_model = model_digest(model)
    digest_data = data_digest(dataset.rows)
    return [
        EvalReport(
            benchmark="nel",
            metric=f"top{k}_accuracy",
            value=hits[k] / n,
            n=n,
            model_digest=digest_model,
            data_digest=digest_data,
        )
        for k in k_list
    ]


def eval_nli_triplets(model: enc.Checkpoint, dataset: NliTripleDataset) -> EvalReport:
    """Fraction of rows where the anchor is strictly closer to the entailed
    statement than to the contradicted one; exact ties count as failures."""
    anchors = enc.encode_batch(model.params, model.config, [a for a, _, _ in dataset.rows])
    entailed = enc.encode_batch(model.params, model.config, [e for _, e, _ in dataset.rows])
    contradicted = enc.encode_batch(model.params, model.config, [c for _, _, c in dataset.rows])
    pos = np.sum(anchors * entailed, axis=1)
    neg = np.sum(anchors * contradicted, axis=1)
    wins = int(np.sum(pos > neg))
    return EvalReport(
        benchmark="nli",
        metric="triplet_accuracy",
        value=wins / len(dataset.rows),
        n=len(dataset.rows),
        model_digest=model_digest(model),
        data_digest=data_digest(dataset.rows),
    )
