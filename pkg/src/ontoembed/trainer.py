"""Optimization machinery and the training regimes.

Four regimes share one loop skeleton: seeded shuffling, batching, analytic
gradients through the encoder, AdamW with a warmup-linear schedule. Every
regime is a deterministic function of (inputs, seed): re-running produces
bit-identical checkpoints. Gradient accumulation is strictly sequential in
batch order, which is what makes that guarantee hold.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import losses
from . import ontology as onto

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8

# Bias vectors are exempt from decoupled weight decay.
_NO_DECAY = {"b1", "b2", "head_b"}


class TrainError(Exception):
    pass


class PhaseError(TrainError):
    """Raised when a checkpoint's phase or lineage violates a regime's
    preconditions."""


@dataclass(frozen=True)
class TrainConfig:
    """Shared hyperparameters for all regimes.

    The recorded defaults follow the reference setup (lr 2e-5, weight decay
    0.01, 5% warmup, batch 128); desk-scale runs usually override the
    learning rate upwards since the toy encoder is trained from scratch.
    """

    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    warmup_fraction: float = 0.05
    epochs: int = 1
    batch_size: int = 128
    seed: int = 0
    hard_negatives_per_batch: int = 0
    info_nce: losses.InfoNCEConfig = field(default_factory=losses.InfoNCEConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0.0 <= self.warmup_fraction <= 1.0):
            raise ValueError("warmup_fraction must be in [0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.hard_negatives_per_batch < 0:
            raise ValueError("hard_negatives_per_batch must be >= 0")


def parse_kv_file(path) -> dict[str, str]:
    """Parse a plain-text ``key = value`` config file. '#' starts a comment;
    blank lines are skipped."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{line_no}: expected key = value")
            key, value = stripped.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def train_config_from_mapping(mapping: dict[str, str], prefix: str = "") -> TrainConfig:
    """Build a TrainConfig from string key-value pairs; keys match the field
    names (nested InfoNCE fields are flattened as info_nce_scale and
    info_nce_symmetric). Keys may carry a phase prefix such as
    ``contrastive_``."""
    def pick(key, cast, default):
        value = mapping.get(prefix + key, mapping.get(key))
        return default if value is None else cast(value)

    nce = losses.InfoNCEConfig(
        scale=pick("info_nce_scale", float, 20.0),
        symmetric=pick("info_nce_symmetric", _parse_bool, False),
    )
    return TrainConfig(
        learning_rate=pick("learning_rate", float, 2e-5),
        weight_decay=pick("weight_decay", float, 0.01),
        warmup_fraction=pick("warmup_fraction", float, 0.05),
        epochs=pick("epochs", int, 1),
        batch_size=pick("batch_size", int, 128),
        seed=pick("seed", int, 0),
        hard_negatives_per_batch=pick("hard_negatives_per_batch", int, 0),
        info_nce=nce,
    )


@dataclass
class AdamWState:
    """Optimizer state; ``m`` and ``v`` mirror the Params layout."""

    step: int
    m: enc.Params
    v: enc.Params


def init_adamw(params: enc.Params) -> AdamWState:
    return AdamWState(step=0, m=enc.zeros_like_params(params), v=enc.zeros_like_params(params))


def warmup_linear(step: int, total_steps: int, base_lr: float, warmup_fraction: float) -> float:
    """Linear ramp over the first round(warmup_fraction * total_steps) steps
    (at least one), then linear decay to base_lr / (total - warmup)."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not (0 <= step < total_steps):
        raise ValueError("step must satisfy 0 <= step < total_steps")
    w = max(1, round(warmup_fraction * total_steps))
    if step < w:
        return base_lr * (step + 1) / w
    return base_lr * (total_steps - step) / (total_steps - w)


def adamw_step(
    params: enc.Params,
    grads: enc.Params,
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
) -> tuple[enc.Params, AdamWState]:
    """One decoupled-weight-decay Adam update; returns fresh params/state.

    theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + weight_decay * theta),
    with the decay term skipped for bias vectors.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    t = state.step + 1
    new_p: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    param_items = params.tensor_items()
    grad_items = grads.tensor_items()
    if [n for n, _ in param_items] != [n for n, _ in grad_items]:
        raise ValueError("gradient structure does not match params")
    for (name, theta), (_, g), (_, m), (_, v) in zip(
        param_items, grad_items, state.m.tensor_items(), state.v.tensor_items()
    ):
        if theta.shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for {name}")
        m2 = BETA1 * m + (1.0 - BETA1) * g
        v2 = BETA2 * v + (1.0 - BETA2) * (g * g)
        mhat = m2 / (1.0 - BETA1**t)
        vhat = v2 / (1.0 - BETA2**t)
        update = mhat / (np.sqrt(vhat) + EPSILON)
        if weight_decay != 0.0 and name not in _NO_DECAY:
            update = update + weight_decay * theta
        new_p[name] = theta - lr * update
        new_m[name] = m2
        new_v[name] = v2
    has_head = "head_w" in new_p
    def build(d):
        return enc.Params(
            token_table=d["token_table"], w1=d["w1"], b1=d["b1"], w2=d["w2"], b2=d["b2"],
            head_w=d.get("head_w") if has_head else None,
            head_b=d.get("head_b") if has_head else None,
        )
    return build(new_p), AdamWState(step=t, m=build(new_m), v=build(new_v))


@dataclass
class TrainStats:
    """What a regime reports back: total optimizer steps and one loss value
    per epoch. Self-distillation records full-training-set losses at epoch
    boundaries (index 0 is the pre-training loss); the other regimes record
    the mean minibatch loss of each epoch."""

    steps: int
    epoch_losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PCAModel:
    """Mean vector plus orthonormal principal directions (rows), descending
    explained variance."""

    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]


def pca_fit(x: np.ndarray, k: int) -> PCAModel:
    """Top-k PCA via SVD of the centered data matrix.

    Sign convention: each component's largest-magnitude entry is made
    positive, so the decomposition is deterministic. Requires
    1 <= k <= min(N-1, D) and non-degenerate data (not all rows equal).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected an N x D matrix")
    n, d = x.shape
    if n < 2:
        raise ValueError("need at least 2 rows")
    if not (1 <= k <= min(n - 1, d)):
        raise ValueError(f"k must be in [1, {min(n - 1, d)}], got {k}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[0] == 0.0:
        raise ValueError("degenerate data: all rows identical (zero variance)")
    components = vt[:k].copy()
    for row in components:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return PCAModel(
        mean=mean,
        components=components,
        explained_variance=(s[:k] ** 2) / (n - 1),
    )


def pca_project(model: PCAModel, x: np.ndarray) -> np.ndarray:
    """components @ (x - mean); accepts a single D-vector or an N x D batch."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.mean.shape[0]:
        raise ValueError(
            f"dimension mismatch: vector has {x.shape[-1]}, model expects {model.mean.shape[0]}"
        )
    return (x - model.mean) @ model.components.T


@dataclass(frozen=True)
class DistillTarget:
    concept_id: str
    target: np.ndarray


def build_targets(
    teacher: enc.Checkpoint, kg: onto.KnowledgeGraph, k: int = 64
) -> tuple[PCAModel, list[DistillTarget]]:
    """Distillation targets: for each concept, the teacher embeddings of its
    canonical name and canonical definition are averaged (without
    re-normalizing) and projected onto the top-k PCA directions fitted over
    all concepts' averages."""
    if teacher.phase not in ("contrastive", "sts_adapted"):
        raise PhaseError(
            f"teacher phase must be contrastive or sts_adapted, got {teacher.phase!r}"
        )
    ids = kg.concept_ids
    if not ids:
        raise ValueError("empty knowledge graph")
    raws = np.zeros((len(ids), teacher.config.output_dim))
    for i, cid in enumerate(ids):
        concept = kg.get(cid)
        name_emb = enc.encode(teacher.params, teacher.config, concept.canonical_name)
        def_emb = enc.encode(teacher.params, teacher.config,
                             onto.canonical_definition(kg, cid))
        raws[i] = 0.5 * (name_emb + def_emb)
    model = pca_fit(raws, k)
    projected = pca_project(model, raws)
    targets = [DistillTarget(cid, projected[i].copy()) for i, cid in enumerate(ids)]
    return model, targets


# ---------------------------------------------------------------------------
# Training regimes


def _chunk_batches(n: int, batch_size: int, order: np.ndarray) -> list[list[int]]:
    return [list(map(int, order[i:i + batch_size])) for i in range(0, n, batch_size)]


def _dedup_batches(
    pairs: list[onto.TrainingPair], order: np.ndarray, batch_size: int
) -> list[list[int]]:
    """Greedy batching with at most one pair per concept per batch.

    Conflicting pairs are deferred (swap-ahead): they go back to the front
    of the queue and open the next batch. This can produce more batches
    than ceil(n / batch_size) when one concept dominates the remainder.
    """
    remaining = deque(int(i) for i in order)
    batches: list[list[int]] = []
    while remaining:
        batch: list[int] = []
        seen: set[str] = set()
        skipped: list[int] = []
        while remaining and len(batch) < batch_size:
            i = remaining.popleft()
            cid = pairs[i].concept_id
            if cid in seen:
                skipped.append(i)
            else:
                batch.append(i)
                seen.add(cid)
        remaining.extendleft(reversed(skipped))
        batches.append(batch)
    return batches


def _require_no_head(params: enc.Params, regime: str) -> None:
    if params.has_head:
        raise TrainError(f"{regime} expects a head-free base; strip the head first")


def train_contrastive(
    base: enc.Checkpoint,
    corpus: list[onto.TrainingPair],
    kg: onto.KnowledgeGraph,
    cfg: TrainConfig,
) -> tuple[enc.Checkpoint, TrainStats]:
    """Contrastive phase: attract each name to its paired description and
    repel the rest of the batch, optionally with ontological hard negatives
    appended as shared extra candidates."""
    if base.phase not in ("base", "sts_adapted"):
        raise PhaseError(
            f"contrastive base must be phase base or sts_adapted, got {base.phase!r}"
        )
    _require_no_head(base.params, "train_contrastive")
    if len(corpus) < 2:
        raise TrainError("corpus must contain at least 2 pairs (in-batch negatives)")
    if cfg.batch_size < 2:
        raise TrainError("batch_size must be >= 2 for the in-batch objective")

    config = base.config
    rng = np.random.default_rng(cfg.seed)
    plans: list[list[list[int]]] = []
    hn_seeds: list[list[int]] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        plan = _dedup_batches(corpus, order, cfg.batch_size)
        plans.append(plan)
        if cfg.hard_negatives_per_batch > 0:
            hn_seeds.append([int(rng.integers(0, 2**63)) for _ in plan])
        else:
            hn_seeds.append([0] * len(plan))
    total_steps = sum(len(p) for p in plans)
    if total_steps == 0:
        return enc.derive(base, base.params.copy(), "contrastive"), TrainStats(0, [])

    params = base.params.copy()
    state = init_adamw(params)
    step = 0
    epoch_losses: list[float] = []
    for epoch, plan in enumerate(plans):
        batch_losses = []
        for batch_idx, batch in enumerate(plan):
            anchors_text = [corpus[i].anchor.text for i in batch]
            positives_text = [corpus[i].positive.text for i in batch]
            extra_texts = _draw_hard_negative_names(
                kg, [corpus[i].concept_id for i in batch],
                cfg.hard_negatives_per_batch, hn_seeds[epoch][batch_idx],
            )
            a = enc.encode_batch(params, config, anchors_text)
            p = enc.encode_batch(params, config, positives_text)
            x = enc.encode_batch(params, config, extra_texts) if extra_texts else None
            loss, ga, gp, gx = losses.info_nce(a, p, x, cfg.info_nce, check_inputs=False)
            texts = anchors_text + positives_text + extra_texts
            grads_out = np.vstack([ga, gp] + ([gx] if gx is not None else []))
            grad = enc.backward_batch(params, config, texts, grads_out)
            lr = warmup_linear(step, total_steps, cfg.learning_rate, cfg.warmup_fraction)
            params, state = adamw_step(params, grad, state, lr, cfg.weight_decay)
            step += 1
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
    return enc.derive(base, params, "contrastive"), TrainStats(step, epoch_losses)


def _draw_hard_negative_names(
    kg: onto.KnowledgeGraph, batch_concepts: list[str], count: int, seed: int
) -> list[str]:
    """Collect up to ``count`` canonical names of hard negatives for a batch,
    one query per batch concept in order, skipping ids already present."""
    if count <= 0:
        return []
    in_batch = set(batch_concepts)
    chosen: list[str] = []
    chosen_ids: set[str] = set()
    for offset, cid in enumerate(batch_concepts):
        ids = onto.sample_hard_negatives(kg, cid, 1, seed + offset)
        for hn in ids:
            if hn in in_batch or hn in chosen_ids:
                continue
            chosen_ids.add(hn)
            chosen.append(kg.get(hn).canonical_name)
            break
        if len(chosen) >= count:
            break
    return chosen


def adapt_sts(model, sts_train, cfg: TrainConfig) -> tuple[enc.Checkpoint, TrainStats]:
    """Similarity-regression adaptation: fit cosine(u, v) to gold/5 over the
    dataset. Used both before the contrastive phase and as a second pass
    after it."""
    rows = sts_train.rows
    if not rows:
        raise TrainError("empty STS dataset")
    for _, _, g in rows:
        if not (0.0 <= g <= 5.0):
            raise TrainError(f"gold score {g} outside [0, 5]")
    _require_no_head(model.params, "adapt_sts")

    config = model.config
    rng = np.random.default_rng(cfg.seed)
    orders = [rng.permutation(len(rows)) for _ in range(cfg.epochs)]
    plans = [_chunk_batches(len(rows), cfg.batch_size, order) for order in orders]
    total_steps = sum(len(p) for p in plans)
    if total_steps == 0:
        return enc.derive(model, model.params.copy(), "sts_adapted"), TrainStats(0, [])

    params = model.params.copy()
    state = init_adamw(params)
    step = 0
    epoch_losses: list[float] = []
    for plan in plans:
        batch_losses = []
        for batch in plan:
            texts_a = [rows[i][0] for i in batch]
            texts_b = [rows[i][1] for i in batch]
            gold = np.array([rows[i][2] for i in batch]) / 5.0
            u = enc.encode_batch(params, config, texts_a)
            v = enc.encode_batch(params, config, texts_b)
            loss, gu, gv = losses.cosine_regression(u, v, gold, check_inputs=False)
            grad = enc.backward_batch(params, config, texts_a + texts_b, np.vstack([gu, gv]))
            lr = warmup_linear(step, total_steps, cfg.learning_rate, cfg.warmup_fraction)
            params, state = adamw_step(params, grad, state, lr, cfg.weight_decay)
            step += 1
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
    return enc.derive(model, params, "sts_adapted"), TrainStats(step, epoch_losses)


def _distill_examples(
    kg: onto.KnowledgeGraph, targets: list[DistillTarget]
) -> tuple[list[str], np.ndarray]:
    texts: list[str] = []
    rows: list[np.ndarray] = []
    for t in targets:
        for desc in onto.all_descriptions(kg, t.concept_id):
            texts.append(desc.text)
            rows.append(t.target)
    return texts, np.array(rows)


def _distill_full_loss(params, config, texts, targets_matrix) -> float:
    e = enc.encode_batch(params, config, texts)
    y = e @ params.head_w + params.head_b
    loss, _ = losses.mse(y, targets_matrix)
    return loss


def train_self_distill(
    base: enc.Checkpoint,
    targets: list[DistillTarget],
    kg: onto.KnowledgeGraph,
    cfg: TrainConfig,
) -> tuple[enc.Checkpoint, TrainStats]:
    """Self-distillation: attach a fresh linear head and regress every
    textual variant of each concept onto that concept's PCA target.

    The base must not have gone through the contrastive phase (that is the
    whole point of distilling into a past version of the lineage). The head
    is kept in the returned checkpoint; evaluation uses the encoder output
    only, and soups strip the head.
    """
    if "contrastive" in base.history:
        raise PhaseError(
            "self-distillation base must not have undergone the contrastive phase"
        )
    if not targets:
        raise TrainError("no distillation targets")
    _require_no_head(base.params, "train_self_distill")
    k = targets[0].target.shape[0]
    if any(t.target.shape != (k,) for t in targets):
        raise TrainError("inconsistent target dimensions")

    config = base.config
    rng = np.random.default_rng(cfg.seed)
    head_seed = int(rng.integers(0, 2**63))
    params = enc.attach_head(base.params, config, k, head_seed)

    texts, target_matrix = _distill_examples(kg, targets)
    n = len(texts)
    plans = [
        _chunk_batches(n, cfg.batch_size, rng.permutation(n)) for _ in range(cfg.epochs)
    ]
    total_steps = sum(len(p) for p in plans)
    epoch_losses = [_distill_full_loss(params, config, texts, target_matrix)]
    if total_steps == 0:
        out = enc.derive(base, params, "self_distilled")
        return out, TrainStats(0, epoch_losses)

    state = init_adamw(params)
    step = 0
    for plan in plans:
        for batch in plan:
            batch_texts = [texts[i] for i in batch]
            batch_targets = target_matrix[batch]
            e = enc.encode_batch(params, config, batch_texts)
            y = e @ params.head_w + params.head_b
            _, gy = losses.mse(y, batch_targets)
            grad = enc.backward_batch(params, config, batch_texts, gy @ params.head_w.T)
            grad.head_w = e.T @ gy
            grad.head_b = gy.sum(axis=0)
            lr = warmup_linear(step, total_steps, cfg.learning_rate, cfg.warmup_fraction)
            params, state = adamw_step(params, grad, state, lr, cfg.weight_decay)
            step += 1
        epoch_losses.append(_distill_full_loss(params, config, texts, target_matrix))
    return enc.derive(base, params, "self_distilled"), TrainStats(step, epoch_losses)


def train_xlingual(
    teacher: enc.Checkpoint,
    student_cfg: enc.EncoderConfig,
    pairs: list[onto.ParallelPair],
    cfg: TrainConfig,
) -> tuple[enc.Checkpoint, TrainStats]:
    """Cross-lingual distillation into a fresh student.

    Per pair (e, f): loss = 0.5 * (||S(e) - T(e)||^2 + ||S(f) - T(e)||^2),
    averaged over the batch, with the teacher frozen throughout. Both terms
    are kept so the student reproduces the teacher on the pivot language as
    well as on translations.
    """
    if not pairs:
        raise TrainError("empty parallel corpus")
    if student_cfg.output_dim != teacher.config.output_dim:
        raise TrainError("student output_dim must match the teacher's")

    teacher_emb: dict[str, np.ndarray] = {}
    for p in pairs:
        if p.source_text not in teacher_emb:
            teacher_emb[p.source_text] = enc.encode(
                teacher.params, teacher.config, p.source_text
            )

    params = enc.init_params(student_cfg)
    rng = np.random.default_rng(cfg.seed)
    n = len(pairs)
    plans = [
        _chunk_batches(n, cfg.batch_size, rng.permutation(n)) for _ in range(cfg.epochs)
    ]
    total_steps = sum(len(p) for p in plans)
    if total_steps == 0:
        return (
            enc.Checkpoint(config=student_cfg, phase="xlingual_student", params=params),
            TrainStats(0, []),
        )

    state = init_adamw(params)
    step = 0
    epoch_losses: list[float] = []
    for plan in plans:
        batch_losses = []
        for batch in plan:
            texts_e = [pairs[i].source_text for i in batch]
            texts_f = [pairs[i].target_text for i in batch]
            t = np.array([teacher_emb[x] for x in texts_e])
            se = enc.encode_batch(params, student_cfg, texts_e)
            sf = enc.encode_batch(params, student_cfg, texts_f)
            b = len(batch)
            de, df = se - t, sf - t
            loss = 0.5 * float((de * de).sum() + (df * df).sum()) / b
            grad = enc.backward_batch(
                params, student_cfg, texts_e + texts_f, np.vstack([de, df]) / b
            )
            lr = warmup_linear(step, total_steps, cfg.learning_rate, cfg.warmup_fraction)
            params, state = adamw_step(params, grad, state, lr, cfg.weight_decay)
            step += 1
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
    ckpt = enc.Checkpoint(config=student_cfg, phase="xlingual_student", params=params)
    return ckpt, TrainStats(step, epoch_losses)


def translation_gap(
    student: enc.Checkpoint, teacher: enc.Checkpoint, pairs: list[onto.ParallelPair]
) -> float:
    """Mean squared distance between student embeddings of translations and
    teacher embeddings of the pivot texts."""
    if not pairs:
        raise ValueError("no pairs")
    total = 0.0
    for p in pairs:
        t = enc.encode(teacher.params, teacher.config, p.source_text)
        s = enc.encode(student.params, student.config, p.target_text)
        d = s - t
        total += float(d @ d)
    return total / len(pairs)
