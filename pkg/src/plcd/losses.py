"""Training objectives as pure value-and-gradient functions.

Each function returns the scalar loss together with analytic gradients with
respect to its direct inputs (embeddings or logits); trainers chain those
into parameter gradients. Softmax-style terms are computed through
log-sum-exp so large squared distances or sharp temperatures cannot
overflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


def _logsumexp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(x - m))))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    e = np.exp(z)
    return e / e.sum()


# ---------------------------------------------------------------------------
# ground-drone consistency + classification
# ---------------------------------------------------------------------------

def consistency_loss(anchor: np.ndarray, positive: np.ndarray,
                     negatives: Sequence[np.ndarray]):
    """Negative log-probability of the positive under exp(-squared distance).

    value = -log[ exp(-|a-p|^2) / (exp(-|a-p|^2) + sum_j exp(-|a-n_j|^2)) ]

    Returns (value, grads) with grads keys ``anchor``, ``positive`` and
    ``negatives`` (list aligned with the input order).
    """
    if len(negatives) < 1:
        raise ValueError("consistency_loss needs at least one negative")
    diffs_pos = anchor - positive
    diffs_neg = [anchor - n for n in negatives]
    scores = np.array([-float(diffs_pos @ diffs_pos)]
                      + [-float(d @ d) for d in diffs_neg])
    lse = _logsumexp(scores)
    value = lse - scores[0]
    sigma = np.exp(scores - lse)

    g_anchor = -2.0 * (sigma[0] - 1.0) * diffs_pos
    g_positive = 2.0 * (sigma[0] - 1.0) * diffs_pos
    g_negatives = []
    for j, d in enumerate(diffs_neg):
        g_anchor += -2.0 * sigma[j + 1] * d
        g_negatives.append(2.0 * sigma[j + 1] * d)
    return value, {"anchor": g_anchor, "positive": g_positive,
                   "negatives": g_negatives}


def cross_entropy(logits: np.ndarray, target: np.ndarray):
    """Softmax cross-entropy; gradient wrt logits is softmax(logits) - target."""
    if not np.all(np.isfinite(logits)):
        raise ValueError("cross_entropy got non-finite logits")
    value = _logsumexp(logits) - float(logits @ target)
    return value, _softmax(logits) - target


def hard_loss(anchor: np.ndarray, positive: np.ndarray,
              negatives: Sequence[np.ndarray],
              logits: np.ndarray, target: np.ndarray):
    """Consistency plus cross-entropy, unit weights."""
    cons_value, cons_grads = consistency_loss(anchor, positive, negatives)
    ce_value, g_logits = cross_entropy(logits, target)
    grads = dict(cons_grads)
    grads["logits"] = g_logits
    return cons_value + ce_value, grads


# ---------------------------------------------------------------------------
# doublet similarity distributions and distillation
# ---------------------------------------------------------------------------

@dataclass
class DoubletEntry:
    """Descriptors of one positive gallery image: whole map plus its regions."""

    whole: np.ndarray
    patches: list[np.ndarray]


@dataclass
class SimilarityVector:
    """Temperature softmax over anchor-descriptor dot products.

    Entry order: for each positive image, its whole descriptor then its
    region descriptors. ``dots`` are the raw inner products (before the
    temperature), kept so gradients can be chained back to the inputs.
    """

    probs: np.ndarray
    log_probs: np.ndarray
    dots: np.ndarray
    tau: float
    anchor: np.ndarray
    entries: np.ndarray  # (K, dim), same order as probs

    def __len__(self) -> int:
        return len(self.probs)


def similarity_softmax(anchor: np.ndarray, positives: Sequence[DoubletEntry],
                       tau: float) -> SimilarityVector:
    if tau <= 0:
        raise ValueError(f"temperature must be positive (got {tau})")
    if not positives:
        raise ValueError("similarity_softmax needs at least one positive entry")
    rows = []
    for entry in positives:
        rows.append(entry.whole)
        rows.extend(entry.patches)
    entries = np.stack(rows)
    dots = entries @ anchor
    scaled = dots / tau
    lse = _logsumexp(scaled)
    log_probs = scaled - lse
    return SimilarityVector(probs=np.exp(log_probs), log_probs=log_probs,
                            dots=dots, tau=tau, anchor=anchor, entries=entries)


def soft_loss(senior: SimilarityVector, junior: SimilarityVector):
    """Cross-entropy from the (frozen) senior distribution to the junior one.

    Returns (value, grad wrt the junior's raw dot products); with the junior
    at temperature 1 the gradient is exactly junior.probs - senior.probs.
    """
    if len(senior) != len(junior):
        raise ValueError(
            f"similarity vectors disagree in length ({len(senior)} vs {len(junior)})"
        )
    value = -float(senior.probs @ junior.log_probs)
    grad_dots = (junior.probs - senior.probs) / junior.tau
    return value, grad_dots


def similarity_input_grads(vec: SimilarityVector, grad_dots: np.ndarray):
    """Chain a dot-product gradient to the anchor and entry embeddings."""
    g_anchor = vec.entries.T @ grad_dots
    g_entries = np.outer(grad_dots, vec.anchor)
    return g_anchor, g_entries


def joint_gd_loss(hard_value: float, soft_value: float, lambda1: float) -> float:
    if lambda1 < 0:
        raise ValueError(f"lambda1 must be >= 0 (got {lambda1})")
    return hard_value + lambda1 * soft_value


# ---------------------------------------------------------------------------
# satellite-drone objectives
# ---------------------------------------------------------------------------

def patch_mse_loss(teacher: Sequence[np.ndarray], student: Sequence[np.ndarray],
                   mean_over_images: bool = False):
    """Region-descriptor alignment between a frozen teacher and a student.

    ``teacher`` and ``student`` are (m, dim) arrays per image. Per image the
    per-region mean squared errors are summed, the total is divided by m
    (and optionally by the image count). Gradients flow to the student only.
    """
    if len(teacher) != len(student):
        raise ValueError("teacher/student image counts differ")
    m = teacher[0].shape[0]
    total = 0.0
    grads = []
    for t, s in zip(teacher, student):
        if t.shape != s.shape:
            raise ValueError(f"patch shape mismatch: {t.shape} vs {s.shape}")
        diff = s - t
        total += float(np.sum(diff * diff)) / diff.shape[1]
        grads.append(2.0 * diff / diff.shape[1])
    scale = 1.0 / m
    if mean_over_images:
        scale /= len(teacher)
    return total * scale, [g * scale for g in grads]


def semi_hard_triplet_loss(anchors: Sequence[np.ndarray],
                           positives: Sequence[np.ndarray],
                           negatives_pool: Sequence[np.ndarray],
                           margin: float):
    """Hinge over squared distances with per-anchor semi-hard negatives.

    The negative for an anchor is the closest pool entry farther than its
    positive; if none exists, the hardest (closest) entry is used. Ties break
    on the lowest pool index. Loss is the mean hinge over anchors.

    Returns (value, grads) with grads keys ``anchors``, ``positives`` and
    ``pool`` (aligned with the inputs; pool gradients accumulate).
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive (got {margin})")
    if len(negatives_pool) == 0:
        raise ValueError("semi_hard_triplet_loss needs a non-empty negative pool")
    if len(anchors) != len(positives):
        raise ValueError("anchors and positives must align")
    g_anchors = [np.zeros_like(a) for a in anchors]
    g_positives = [np.zeros_like(p) for p in positives]
    g_pool = [np.zeros_like(n) for n in negatives_pool]
    count = len(anchors)
    total = 0.0
    for i, (a, p) in enumerate(zip(anchors, positives)):
        d_pos = float((a - p) @ (a - p))
        d_negs = [float((a - n) @ (a - n)) for n in negatives_pool]
        semi = [j for j, d in enumerate(d_negs) if d > d_pos]
        pick = min(semi, key=lambda j: (d_negs[j], j)) if semi \
            else min(range(len(d_negs)), key=lambda j: (d_negs[j], j))
        hinge = d_pos - d_negs[pick] + margin
        if hinge > 0:
            total += hinge
            n = negatives_pool[pick]
            g_anchors[i] += 2.0 * (n - p) / count
            g_positives[i] += -2.0 * (a - p) / count
            g_pool[pick] += 2.0 * (a - n) / count
    return total / count, {"anchors": g_anchors, "positives": g_positives,
                           "pool": g_pool}


def joint_sd_loss(triplet_value: float, patch_value: float, lambda2: float) -> float:
    if lambda2 < 0:
        raise ValueError(f"lambda2 must be >= 0 (got {lambda2})")
    return triplet_value + lambda2 * patch_value
