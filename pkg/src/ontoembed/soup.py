"""Uniform and greedy model soups over soup-compatible checkpoints.

Averaging runs over encoder parameters only; distillation heads are
stripped first. The element-wise mean is computed as a running (Welford)
mean in ascending-label order, which keeps it bit-deterministic and makes
the average of k identical models bit-equal to that model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import encoder as enc


class SoupError(Exception):
    pass


class IncompatibleCandidatesError(SoupError):
    pass


@dataclass
class SoupCandidate:
    checkpoint: enc.Checkpoint
    validation_score: float
    label: str


def _check_compatible(candidates: list[SoupCandidate]) -> None:
    if not candidates:
        raise IncompatibleCandidatesError("need at least one candidate")
    first = candidates[0]
    for cand in candidates[1:]:
        if not first.checkpoint.config.soup_compatible(cand.checkpoint.config):
            raise IncompatibleCandidatesError(
                f"candidate {cand.label!r} has a soup-incompatible config"
            )
        if cand.checkpoint.phase != first.checkpoint.phase:
            raise IncompatibleCandidatesError(
                f"candidate {cand.label!r} has phase {cand.checkpoint.phase!r}, "
                f"expected {first.checkpoint.phase!r}"
            )


def _average(candidates: list[SoupCandidate]) -> enc.Checkpoint:
    ordered = sorted(candidates, key=lambda c: c.label)
    mean = None
    for i, cand in enumerate(ordered, 1):
        flat = enc.flatten(cand.checkpoint.params.without_head())
        if mean is None:
            mean = flat.copy()
        else:
            if flat.shape != mean.shape:
                raise IncompatibleCandidatesError(
                    f"candidate {cand.label!r} has a different parameter count"
                )
            mean += (flat - mean) / i
    config = ordered[0].checkpoint.config
    return enc.Checkpoint(
        config=config,
        phase="souped",
        params=enc.unflatten(config, mean),
        history=ordered[0].checkpoint.history + ("souped",),
    )


def uniform_soup(candidates: list[SoupCandidate]) -> enc.Checkpoint:
    """Element-wise arithmetic mean of all candidates' encoder parameters."""
    _check_compatible(candidates)
    return _average(candidates)


def greedy_soup(
    candidates: list[SoupCandidate],
    evaluate: Callable[[enc.Checkpoint], float],
) -> tuple[enc.Checkpoint, list[str]]:
    """Greedy soup: start from the best candidate by validation score and
    admit each further candidate iff the averaged pool does not evaluate
    worse (non-strict >=, so constant metrics keep everything).

    ``evaluate`` must be deterministic. Candidates are visited in descending
    validation_score order, ties broken by ascending label. When the
    validation scores are produced by the same ``evaluate`` (as the CLI and
    pipeline do), the result never evaluates below the best single
    candidate: the pool starts at that candidate and every accepted merge is
    non-decreasing.
    """
    _check_compatible(candidates)
    ordered = sorted(candidates, key=lambda c: (-c.validation_score, c.label))
    pool = [ordered[0]]
    current = _average(pool)
    current_score = evaluate(current)
    for cand in ordered[1:]:
        tentative = _average(pool + [cand])
        tentative_score = evaluate(tentative)
        if tentative_score >= current_score:
            pool.append(cand)
            current = tentative
            current_score = tentative_score
    return current, [c.label for c in pool]


def candidate_from_checkpoint(
    ckpt: enc.Checkpoint, validation_score: float, label: str
) -> SoupCandidate:
    if not np.isfinite(validation_score):
        raise SoupError(f"validation score for {label!r} must be finite")
    return SoupCandidate(checkpoint=ckpt, validation_score=validation_score, label=label)
