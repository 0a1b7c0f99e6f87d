"""Segmentation losses with analytic gradients.

Total training loss is the 1:1 sum of cross entropy and the Lovász-Softmax
IoU surrogate, both averaged so that the ignore sentinel drops points from
the computation entirely. Every function returns (loss, gradient) so the
hand-written backward pass can consume them directly.
"""

from __future__ import annotations

import numpy as np

from .cloud import IGNORE_LABEL


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _validate(logits, targets, ignore):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError("expected (n, C) scores and (n,) targets")
    valid = targets != ignore
    if not valid.any():
        raise ValueError("all points carry the ignore sentinel")
    tv = targets[valid]
    if tv.min() < 0 or tv.max() >= logits.shape[1]:
        raise ValueError("target index outside the class range")
    return logits, targets, valid


def cross_entropy(logits, targets, ignore=IGNORE_LABEL):
    """Mean negative log softmax probability of the target class.

    Returns (loss, dloss/dlogits); ignored rows contribute nothing and get
    zero gradient.
    """
    logits, targets, valid = _validate(logits, targets, ignore)
    n_valid = int(valid.sum())
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.flatnonzero(valid)
    loss = -logp[rows, targets[rows]].sum() / n_valid

    grad = np.zeros_like(logits)
    grad[rows] = np.exp(logp[rows])
    grad[rows, targets[rows]] -= 1.0
    grad[rows] /= n_valid
    return loss, grad


def lovasz_softmax(probs, targets, ignore=IGNORE_LABEL):
    """Lovász extension of the Jaccard loss over softmax probabilities.

    Per class c present among the non-ignored targets: with per-point errors
    m_i = 1 - p_i(c) for points of class c and p_i(c) otherwise, sorted
    descending, the class loss is the inner product of sorted errors with
    the discrete gradient of 1 - intersection/union along that order. The
    result is averaged over present classes. For hard 0/1 probabilities
    this equals the mean of (1 - Jaccard) over present classes.

    Returns (loss, dloss/dprobs); the sort is held fixed for the gradient.
    """
    probs, targets, valid = _validate(probs, targets, ignore)
    rows = np.flatnonzero(valid)
    p = probs[rows]
    t = targets[rows]
    sums = p.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-9:
        raise ValueError("probability rows must sum to 1")

    present = np.unique(t)
    grad = np.zeros_like(probs)
    total = 0.0
    for c in present:
        fg = (t == c).astype(np.float64)
        m = np.where(fg == 1.0, 1.0 - p[:, c], p[:, c])
        order = np.argsort(-m, kind="stable")
        delta = fg[order]
        G = delta.sum()
        inter = G - np.cumsum(delta)
        union = G + np.cumsum(1.0 - delta)
        j = 1.0 - inter / union
        g_sorted = np.concatenate(([j[0]], np.diff(j)))
        total += float(m[order] @ g_sorted)
        gm = np.empty_like(m)
        gm[order] = g_sorted
        grad[rows, c] += np.where(fg == 1.0, -gm, gm)
    k = len(present)
    grad /= k
    return total / k, grad


def total_loss(logits, targets, ignore=IGNORE_LABEL):
    """Cross entropy plus Lovász-Softmax of the softmax, with chained gradient."""
    ce, dce = cross_entropy(logits, targets, ignore)
    p = softmax(np.asarray(logits, dtype=np.float64))
    lv, dlv_p = lovasz_softmax(p, targets, ignore)
    # softmax backward: dz = p * (dp - sum(dp * p))
    inner = (dlv_p * p).sum(axis=1, keepdims=True)
    dlv_z = p * (dlv_p - inner)
    return ce + lv, dce + dlv_z
