"""Training objective: frequency-weighted cross-entropy plus attention-map
regularization, combined into one scalar with a configurable weight."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor, custom_op


@dataclass
class ClassWeights:
    w: np.ndarray
    frequencies: np.ndarray
    epsilon: float


@dataclass
class LossBreakdown:
    l_ce: float
    l_attn: float
    lambda_attn: float
    total: float


def class_weights(frequencies, epsilon: float) -> ClassWeights:
    """w_j = 1 / sqrt(f_j + epsilon)."""
    f = np.asarray(frequencies, dtype=np.float64)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if np.any(f < 0):
        raise ValueError(f"negative class frequency in {f.tolist()}")
    if abs(f.sum() - 1.0) > 1e-9:
        raise ValueError(f"frequencies must sum to 1, got {f.sum()!r}")
    return ClassWeights(w=1.0 / np.sqrt(f + epsilon), frequencies=f, epsilon=epsilon)


_LOG_CLAMP = 1e-12


def weighted_cross_entropy(probs: Tensor, labels, weights: ClassWeights) -> Tensor:
    """-(1/B) sum_i w_{y_i} log p_{i, y_i}, log clamped at 1e-12."""
    p = probs.data
    if p.ndim != 2:
        raise DimensionError(f"probs must be B x K, got {p.shape}")
    b, k = p.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range [0, {k}): {labels.tolist()}")
    rowsum = p.sum(axis=1)
    if np.any(np.abs(rowsum - 1.0) > 1e-5):
        raise ValueError("probability rows must sum to 1 within 1e-5")
    wv = np.asarray(weights.w, dtype=p.dtype)
    picked = p[np.arange(b), labels]
    clamped = np.maximum(picked, _LOG_CLAMP)
    loss = -(wv[labels] * np.log(clamped)).sum() / b

    def backward(g):
        gp = np.zeros_like(p)
        live = picked > _LOG_CLAMP
        gp[np.arange(b), labels] = np.where(live, -wv[labels] / clamped / b, 0.0)
        return (gp * g.reshape(-1)[0],)

    return custom_op(np.full((1, 1), loss, dtype=p.dtype), (probs,), backward,
                     "weighted_cross_entropy")


def attention_regularization(maps, masks, mode: str = "focusing") -> Tensor:
    """Batch-mean Frobenius norm of the focus map gated by the lesion mask.

    ``literal`` penalizes mass inside the mask (||A .* M||_F); ``focusing``
    penalizes mass outside it (||A .* (1-M)||_F). Samples whose mask is
    None contribute nothing and are excluded from the denominator.
    """
    if mode not in ("literal", "focusing"):
        raise ValueError(f"unknown attention regularization mode {mode!r}")
    terms = []
    for a, m in zip(maps, masks):
        if m is None:
            continue
        m = np.asarray(m, dtype=a.dtype)
        if m.shape != a.shape:
            raise DimensionError(f"focus map {a.shape} vs mask {m.shape}")
        if mode == "focusing":
            m = 1.0 - m
        gated = ad.mul(a, Tensor(m))
        terms.append(ad.sqrt(ad.sum_all(ad.mul(gated, gated))))
    if not terms:
        return Tensor(np.zeros((1, 1)))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / len(terms))


def total_loss(l_ce: Tensor, l_attn: Tensor | None, lambda_attn: float):
    """Combine the two components; returns (scalar tensor, LossBreakdown)."""
    if lambda_attn < 0:
        raise ValueError("lambda_attn must be nonnegative")
    if l_attn is None:
        l_attn = Tensor(np.zeros((1, 1), dtype=l_ce.dtype))
    total = ad.add(l_ce, ad.scale(l_attn, lambda_attn))
    return total, LossBreakdown(l_ce=l_ce.item(), l_attn=l_attn.item(),
                                lambda_attn=lambda_attn, total=total.item())
