"""A small text encoder built from scratch on numpy.

Architecture: seeded-hash token table -> mean pooling -> tanh hidden layer ->
linear output layer -> unit normalization. Everything is float64 and fully
deterministic, and the backward pass is written out analytically so gradients
can be checked against finite differences.

An optional linear head (used only while regressing onto distillation
targets) rides along inside ``Params``; ``encode`` ignores it.
"""

from __future__ import annotations

import io
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

CHECKPOINT_MAGIC = b"OEMBCKPT"
CHECKPOINT_VERSION = 1

PHASES = (
    "base",
    "sts_adapted",
    "contrastive",
    "self_distilled",
    "souped",
    "xlingual_student",
)

# Guard against the zero-vector singularity of unit normalization.
NORM_GUARD = 1e-8

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Shape and seeding of one encoder instance.

    Two configs are soup-compatible iff they agree on everything except
    ``init_seed``.
    """

    vocab_buckets: int = 32768
    embed_dim: int = 64
    hidden_dim: int = 128
    output_dim: int = 128
    hash_seed: int = 0
    init_seed: int = 0
    init_scale: float = 0.05

    def __post_init__(self):
        for name in ("vocab_buckets", "embed_dim", "hidden_dim", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.init_scale < 0:
            raise ValueError("init_scale must be >= 0")

    def soup_compatible(self, other: "EncoderConfig") -> bool:
        return (
            self.vocab_buckets == other.vocab_buckets
            and self.embed_dim == other.embed_dim
            and self.hidden_dim == other.hidden_dim
            and self.output_dim == other.output_dim
            and self.hash_seed == other.hash_seed
            and self.init_scale == other.init_scale
        )

    def base_param_count(self) -> int:
        v, e, h, o = self.vocab_buckets, self.embed_dim, self.hidden_dim, self.output_dim
        return v * e + e * h + h + h * o + o

    def to_dict(self) -> dict:
        return {
            "vocab_buckets": self.vocab_buckets,
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "output_dim": self.output_dim,
            "hash_seed": self.hash_seed,
            "init_seed": self.init_seed,
            "init_scale": self.init_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


ENCODER_CONFIG_KEYS = (
    "vocab_buckets", "embed_dim", "hidden_dim", "output_dim",
    "hash_seed", "init_seed", "init_scale",
)


def config_from_mapping(mapping: dict[str, str],
                        defaults: "EncoderConfig | None" = None) -> "EncoderConfig":
    """Build an EncoderConfig from string key-value pairs (config files);
    keys match the field names, missing keys fall back to ``defaults``."""
    base = defaults or EncoderConfig()
    kwargs = {}
    for key in ENCODER_CONFIG_KEYS:
        if key in mapping:
            cast = float if key == "init_scale" else int
            kwargs[key] = cast(mapping[key])
        else:
            kwargs[key] = getattr(base, key)
    return EncoderConfig(**kwargs)


@dataclass
class Params:
    """The complete parameter set of one encoder instance.

    Tensors appear in canonical flatten order: token_table (row-major), w1,
    b1, w2, b2, then head_w and head_b when a distillation head is attached.
    """

    token_table: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    head_w: np.ndarray | None = None
    head_b: np.ndarray | None = None

    @property
    def has_head(self) -> bool:
        return self.head_w is not None

    @property
    def head_dim(self) -> int | None:
        return None if self.head_w is None else self.head_w.shape[1]

    def tensor_items(self) -> list[tuple[str, np.ndarray]]:
        items = [
            ("token_table", self.token_table),
            ("w1", self.w1),
            ("b1", self.b1),
            ("w2", self.w2),
            ("b2", self.b2),
        ]
        if self.head_w is not None:
            items.append(("head_w", self.head_w))
            items.append(("head_b", self.head_b))
        return items

    def copy(self) -> "Params":
        return Params(
            token_table=self.token_table.copy(),
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            head_w=None if self.head_w is None else self.head_w.copy(),
            head_b=None if self.head_b is None else self.head_b.copy(),
        )

    def without_head(self) -> "Params":
        return Params(
            token_table=self.token_table,
            w1=self.w1,
            b1=self.b1,
            w2=self.w2,
            b2=self.b2,
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(arr).all() for _, arr in self.tensor_items())


def zeros_like_params(params: Params) -> Params:
    return Params(
        token_table=np.zeros_like(params.token_table),
        w1=np.zeros_like(params.w1),
        b1=np.zeros_like(params.b1),
        w2=np.zeros_like(params.w2),
        b2=np.zeros_like(params.b2),
        head_w=None if params.head_w is None else np.zeros_like(params.head_w),
        head_b=None if params.head_b is None else np.zeros_like(params.head_b),
    )


def params_equal(a: Params, b: Params) -> bool:
    """Bit-exact equality of two parameter sets."""
    items_a, items_b = a.tensor_items(), b.tensor_items()
    if len(items_a) != len(items_b):
        return False
    return all(
        na == nb and ta.shape == tb.shape and np.array_equal(ta, tb)
        for (na, ta), (nb, tb) in zip(items_a, items_b)
    )


def _fnv1a64(data: bytes, seed: int) -> int:
    """Seeded 64-bit FNV-1a. Pure integer arithmetic, stable everywhere."""
    h = (_FNV_OFFSET ^ (seed & _MASK64)) & _MASK64
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=1 << 16)
def _token_ids(vocab_buckets: int, hash_seed: int, text: str) -> tuple[int, ...]:
    tokens = _TOKEN_RE.findall(text.lower())
    return tuple(
        _fnv1a64(tok.encode("utf-8"), hash_seed) % vocab_buckets for tok in tokens
    )


def tokenize(config: EncoderConfig, text: str) -> list[int]:
    """Lowercase, split on runs of non-alphanumerics, hash into buckets.

    The hash is seeded FNV-1a over each token's UTF-8 bytes, modulo
    ``vocab_buckets``, so the mapping is identical on every platform.
    """
    return list(_token_ids(config.vocab_buckets, config.hash_seed, text))


def init_params(config: EncoderConfig) -> Params:
    """Draw fresh parameters: weights uniform in [-init_scale, +init_scale],
    biases zero. Determined entirely by ``config.init_seed``."""
    rng = np.random.default_rng(config.init_seed)
    s = config.init_scale
    v, e, h, o = config.vocab_buckets, config.embed_dim, config.hidden_dim, config.output_dim
    return Params(
        token_table=rng.uniform(-s, s, size=(v, e)),
        w1=rng.uniform(-s, s, size=(e, h)),
        b1=np.zeros(h),
        w2=rng.uniform(-s, s, size=(h, o)),
        b2=np.zeros(o),
    )


def attach_head(params: Params, config: EncoderConfig, target_dim: int, seed: int) -> Params:
    """Return a copy of ``params`` with a freshly seeded linear head
    (output_dim x target_dim weights, zero bias) attached."""
    rng = np.random.default_rng(seed)
    out = params.copy()
    out.head_w = rng.uniform(-config.init_scale, config.init_scale,
                             size=(config.output_dim, target_dim))
    out.head_b = np.zeros(target_dim)
    return out


def _pool(params: Params, config: EncoderConfig, text: str) -> tuple[np.ndarray, tuple[int, ...]]:
    ids = _token_ids(config.vocab_buckets, config.hash_seed, text)
    if not ids:
        return np.zeros(config.embed_dim), ids
    return params.token_table[list(ids)].mean(axis=0), ids


def encode(params: Params, config: EncoderConfig, text: str) -> np.ndarray:
    """Embed one text as a unit vector of length output_dim.

    Empty text (no tokens, zero biases) is the one permitted non-unit
    output: the zero vector, produced by the 1e-8 norm guard.
    """
    pooled, _ = _pool(params, config, text)
    h = np.tanh(pooled @ params.w1 + params.b1)
    z = h @ params.w2 + params.b2
    return z / max(float(np.linalg.norm(z)), NORM_GUARD)


def encode_batch(params: Params, config: EncoderConfig, texts: list[str]) -> np.ndarray:
    """Embed a list of texts as rows of a (len(texts), output_dim) matrix."""
    b = len(texts)
    pooled = np.zeros((b, config.embed_dim))
    for i, text in enumerate(texts):
        pooled[i], _ = _pool(params, config, text)
    h = np.tanh(pooled @ params.w1 + params.b1)
    z = h @ params.w2 + params.b2
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), NORM_GUARD)
    return z / norms


def encode_backward(
    params: Params, config: EncoderConfig, text: str, output_grad: np.ndarray
) -> Params:
    """Exact gradient of ``encode(...) . output_grad`` w.r.t. every parameter.

    Rows of the token table for absent tokens stay exactly zero. When the
    params carry a head, its gradient slots are returned as zeros (the head
    does not participate in ``encode``).
    """
    grads = backward_batch(params, config, [text], np.asarray(output_grad)[None, :])
    return grads


def backward_batch(
    params: Params, config: EncoderConfig, texts: list[str], output_grads: np.ndarray
) -> Params:
    """Sum of per-text encode gradients, accumulated in row order."""
    output_grads = np.asarray(output_grads, dtype=float)
    if output_grads.shape != (len(texts), config.output_dim):
        raise ValueError("output_grads shape must be (len(texts), output_dim)")
    if not np.isfinite(output_grads).all():
        raise ValueError("output_grads must be finite")

    b = len(texts)
    pooled = np.zeros((b, config.embed_dim))
    id_lists: list[tuple[int, ...]] = []
    for i, text in enumerate(texts):
        pooled[i], ids = _pool(params, config, text)
        id_lists.append(ids)

    a = pooled @ params.w1 + params.b1
    h = np.tanh(a)
    z = h @ params.w2 + params.b2
    raw_norms = np.linalg.norm(z, axis=1)
    norms = np.maximum(raw_norms, NORM_GUARD)
    out = z / norms[:, None]

    # d(out . g)/dz: through z/||z|| when above the guard, else z/1e-8 is
    # linear in z so the gradient is g / guard.
    dot = np.sum(out * output_grads, axis=1)
    grad_z = np.where(
        (raw_norms > NORM_GUARD)[:, None],
        (output_grads - out * dot[:, None]) / norms[:, None],
        output_grads / NORM_GUARD,
    )

    grad_w2 = h.T @ grad_z
    grad_b2 = grad_z.sum(axis=0)
    grad_h = grad_z @ params.w2.T
    grad_a = (1.0 - h * h) * grad_h
    grad_w1 = pooled.T @ grad_a
    grad_b1 = grad_a.sum(axis=0)
    grad_pooled = grad_a @ params.w1.T

    grad_table = np.zeros_like(params.token_table)
    for i, ids in enumerate(id_lists):
        if ids:
            np.add.at(grad_table, list(ids), grad_pooled[i] / len(ids))

    return Params(
        token_table=grad_table,
        w1=grad_w1,
        b1=grad_b1,
        w2=grad_w2,
        b2=grad_b2,
        head_w=None if params.head_w is None else np.zeros_like(params.head_w),
        head_b=None if params.head_b is None else np.zeros_like(params.head_b),
    )


def flatten(params: Params) -> np.ndarray:
    """Concatenate all tensors in canonical order into one float64 vector."""
    return np.concatenate([arr.ravel() for _, arr in params.tensor_items()])


def unflatten(config: EncoderConfig, vector: np.ndarray) -> Params:
    """Inverse of ``flatten``. The head's presence and width are inferred
    from the vector length; any other length is rejected."""
    vector = np.asarray(vector, dtype=float)
    if vector.ndim != 1:
        raise ValueError("expected a 1-d vector")
    base = config.base_param_count()
    o = config.output_dim
    head_dim = None
    if vector.size != base:
        extra = vector.size - base
        if extra <= 0 or extra % (o + 1) != 0:
            raise ValueError(
                f"vector length {vector.size} does not match config "
                f"(base {base}, output_dim {o})"
            )
        head_dim = extra // (o + 1)

    v, e, h = config.vocab_buckets, config.embed_dim, config.hidden_dim
    shapes = [("token_table", (v, e)), ("w1", (e, h)), ("b1", (h,)),
              ("w2", (h, o)), ("b2", (o,))]
    if head_dim is not None:
        shapes += [("head_w", (o, head_dim)), ("head_b", (head_dim,))]

    fields: dict[str, np.ndarray] = {}
    pos = 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        fields[name] = vector[pos:pos + n].reshape(shape).copy()
        pos += n
    return Params(**fields)


@dataclass
class Checkpoint:
    """One encoder state on disk: config, phase tag, parameters.

    ``history`` records every phase the lineage has passed through, oldest
    first; the last entry equals ``phase``. It is what lets the
    self-distillation trainer reject bases that already went through the
    contrastive phase.
    """

    config: EncoderConfig
    phase: str
    params: Params
    history: tuple[str, ...] = field(default_factory=tuple)
    format_version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if not self.history:
            self.history = (self.phase,)


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    flat = flatten(ckpt.params)
    if not np.isfinite(flat).all():
        raise CheckpointFormatError("refusing to serialize non-finite parameters")
    header = {
        "version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "phase": ckpt.phase,
        "history": list(ckpt.history),
        "param_count": int(flat.size),
        "head_dim": ckpt.params.head_dim,
    }
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
    buf.write(b"\n")
    buf.write(flat.astype("<f8").tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(CHECKPOINT_MAGIC) or data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("bad magic: not an encoder checkpoint")
    nl = data.find(b"\n", len(CHECKPOINT_MAGIC))
    if nl < 0:
        raise CheckpointTruncatedError("truncated checkpoint: header not terminated")
    try:
        header = json.loads(data[len(CHECKPOINT_MAGIC):nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint header: {exc}") from exc
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    config = EncoderConfig.from_dict(header["config"])
    count = int(header["param_count"])
    block = data[nl + 1:]
    if len(block) < 8 * count:
        raise CheckpointTruncatedError(
            f"truncated parameter block: expected {8 * count} bytes, got {len(block)}"
        )
    if len(block) > 8 * count:
        raise CheckpointFormatError("trailing bytes after parameter block")
    flat = np.frombuffer(block, dtype="<f8").astype(float)
    params = unflatten(config, flat)
    expected_head = header.get("head_dim")
    if params.head_dim != expected_head:
        raise CheckpointFormatError(
            f"head_dim mismatch: header says {expected_head}, block implies {params.head_dim}"
        )
    return Checkpoint(
        config=config,
        phase=header["phase"],
        params=params,
        history=tuple(header.get("history", [header["phase"]])),
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = checkpoint_to_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data)


def derive(ckpt: Checkpoint, params: Params, phase: str) -> Checkpoint:
    """New checkpoint continuing ``ckpt``'s lineage with an appended phase."""
    return Checkpoint(
        config=ckpt.config,
        phase=phase,
        params=params,
        history=ckpt.history + (phase,),
    )
