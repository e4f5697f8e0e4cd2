"""Answer heads: count regression, open-ended classification, multiple choice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .layers import init_linear, uniform_fan_in


@dataclass
class TaskOutput:
    task: str
    raw: ad.Tensor            # (B,) count, (B, C) logits or (B, M) candidate scores
    prediction: np.ndarray    # (B,) ints
    loss: ad.Tensor | None    # scalar batch mean; None when no target was given


def init_heads(store, prefix, rng, d: int, task: str, n_classes: int = 0) -> None:
    if task == "count":
        init_linear(store, f"{prefix}/count", rng, d, 1)
    elif task == "open_ended":
        init_linear(store, f"{prefix}/open", rng, d, n_classes)
    elif task == "multiple_choice":
        # no bias: the hinge loss only sees score differences
        store.add(f"{prefix}/mc/w", uniform_fan_in(rng, d, (d, 1)))
    else:
        raise ValueError(f"unknown task {task!r}")


def _batched(f, target):
    f = ad.as_tensor(f)
    if target is not None:
        target = np.asarray(target, dtype=np.int64)
    if f.ndim == 1:
        f = ad.reshape(f, (1, f.shape[0]))
        if target is not None:
            target = target.reshape(1)
    return f, target


def round_count(raw, lo: int, hi: int) -> np.ndarray:
    """Round half away from zero, then clamp into ``[lo, hi]``."""
    raw = np.asarray(raw, dtype=np.float64)
    rounded = np.sign(raw) * np.floor(np.abs(raw) + 0.5)
    return np.clip(rounded, lo, hi).astype(np.int64)


def count_head(f, target, p, count_range=(1, 10)) -> TaskOutput:
    f, target = _batched(f, target)
    lo, hi = count_range
    out = f @ p["w"] + p["b"]
    raw = ad.reshape(out, out.shape[:-1])
    loss = None
    if target is not None:
        if np.any(target < lo) or np.any(target > hi):
            raise ValueError(f"count target outside [{lo}, {hi}]")
        loss = ad.mean(ad.square(raw - target.astype(np.float64)))
    return TaskOutput("count", raw, round_count(raw.data, lo, hi), loss)


def open_ended_head(f, target, p) -> TaskOutput:
    f, target = _batched(f, target)
    logits = f @ p["w"] + p["b"]
    n_classes = logits.shape[-1]
    loss = None
    if target is not None:
        if np.any(target < 0) or np.any(target >= n_classes):
            raise ValueError(f"class target outside [0, {n_classes})")
        logp = ad.log_softmax(logits, axis=-1)
        loss = -ad.mean(logp[np.arange(len(target)), target])
    return TaskOutput("open_ended", logits, np.argmax(logits.data, axis=-1), loss)


def hinge_terms(scores, correct):
    """Per-pair terms ``max(0, 1 + s_n - s_p)`` with the correct column zeroed."""
    scores = ad.as_tensor(scores)
    rows = np.arange(scores.shape[0])
    s_p = scores[rows, correct]
    margins = ad.relu(1.0 + scores - ad.reshape(s_p, (len(rows), 1)))
    mask = np.ones(scores.shape)
    mask[rows, correct] = 0.0
    return margins * mask


def multichoice_head(f_candidates, correct, p) -> TaskOutput:
    """``f_candidates`` is (B, M, d) or (M, d); ``correct`` indexes the true candidate."""
    f = ad.as_tensor(f_candidates)
    if f.ndim == 2:
        f = ad.reshape(f, (1,) + f.shape)
        if correct is not None:
            correct = np.asarray(correct, dtype=np.int64).reshape(1)
    n_cand = f.shape[1]
    if n_cand < 2:
        raise ValueError("multiple choice needs at least two candidates")
    out = f @ p["w"]
    scores = ad.reshape(out, out.shape[:-1])
    loss = None
    if correct is not None:
        correct = np.asarray(correct, dtype=np.int64)
        if np.any(correct < 0) or np.any(correct >= n_cand):
            raise ValueError(f"correct index outside [0, {n_cand})")
        loss = ad.sum(hinge_terms(scores, correct)) * (1.0 / f.shape[0])
    return TaskOutput("multiple_choice", scores, np.argmax(scores.data, axis=-1), loss)
