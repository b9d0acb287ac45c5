"""Cross-entropy, KL divergence and the divergence-regularized QAT objective.

Graph versions take logits as a :class:`Tensor` and promote to float64
before the log-softmax, so batch reductions accumulate in double precision.
``*_probs`` versions evaluate the same quantities on probability arrays.
"""
import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError

EPSILON_FLOOR = 1e-7


def _check_labels(labels, n, k):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise UsageError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if np.any(labels != np.round(labels)):
            raise UsageError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"labels must lie in [0, {k})")
    return labels


def cross_entropy(logits, labels):
    """Mean of -log softmax(logits)[label] over the batch."""
    logits = T.as_tensor(logits)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    logp = T.log_softmax(T.astype(logits, np.float64))
    return -T.mean(T.pick(logp, labels))


def soft_cross_entropy(logits, targets):
    """Mean of -sum_i targets_i log softmax(logits)_i (soft-label cross-entropy)."""
    logits = T.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise UsageError(f"target shape {targets.shape} != logits shape {logits.shape}")
    logp = T.log_softmax(T.astype(logits, np.float64))
    return -T.mean(T.tsum(logp * targets, axis=1))


def kl_divergence(logits_quant, probs_large, epsilon_floor=EPSILON_FLOOR):
    """Batch mean of KL(softmax(logits_quant) || probs_large), natural log.

    Gradients flow only into ``logits_quant``; ``probs_large`` is a constant.
    Both distributions are floored at ``epsilon_floor`` inside the log ratio.
    """
    logits_quant = T.as_tensor(logits_quant)
    p_large = np.asarray(probs_large, dtype=np.float64)
    if p_large.shape != logits_quant.shape:
        raise UsageError(f"shape mismatch: {logits_quant.shape} vs {p_large.shape}")
    logq = T.log_softmax(T.astype(logits_quant, np.float64))
    q = T.exp(logq)
    logq_floored = T.floor_at(logq, np.log(epsilon_floor))
    log_large = np.log(np.maximum(p_large, epsilon_floor))
    return T.mean(T.tsum(q * (logq_floored - log_large), axis=1))


def divqat_loss(labels, logits_quant, probs_large, alpha, epsilon_floor=EPSILON_FLOOR):
    """Cross-entropy minus ``alpha`` times KL(quantized || large).

    Returns ``(loss, ce, kl)``. With ``alpha == 0`` the KL term is computed
    outside the graph, so the loss graph is exactly that of plain cross-entropy.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    ce = cross_entropy(logits_quant, labels)
    if alpha == 0:
        with T.no_grad():
            kl = kl_divergence(logits_quant, probs_large, epsilon_floor)
        return ce, ce, kl
    kl = kl_divergence(logits_quant, probs_large, epsilon_floor)
    return ce - alpha * kl, ce, kl


def cross_entropy_probs(probs, labels, epsilon_floor=EPSILON_FLOOR):
    probs = np.asarray(probs, dtype=np.float64)
    labels = _check_labels(labels, probs.shape[0], probs.shape[1])
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, epsilon_floor))))


def kl_divergence_probs(p_quant, p_large, epsilon_floor=EPSILON_FLOOR):
    p = np.asarray(p_quant, dtype=np.float64)
    q = np.asarray(p_large, dtype=np.float64)
    if p.shape != q.shape:
        raise UsageError(f"shape mismatch: {p.shape} vs {q.shape}")
    ratio = np.log(np.maximum(p, epsilon_floor)) - np.log(np.maximum(q, epsilon_floor))
    return float(np.mean(np.sum(p * ratio, axis=-1)))


def divqat_loss_probs(labels, p_quant, p_large, alpha, epsilon_floor=EPSILON_FLOOR):
    if alpha < 0:
        raise ConfigError(f"alpha must be nonnegative, got {alpha}")
    return (cross_entropy_probs(p_quant, labels, epsilon_floor)
            - alpha * kl_divergence_probs(p_quant, p_large, epsilon_floor))
