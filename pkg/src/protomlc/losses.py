"""Prototype contrastive loss, SupCon, and the classifier baselines (BCE, focal, asymmetric)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

PROB_EPS = 1e-7
DENOMINATORS = ("negatives_only", "all_classes")


class LossContractError(ValueError):
    """The inputs fall outside the loss's domain (e.g. a sample without negatives)."""


@dataclass
class MlcLossConfig:
    """Settings for the multi-label prototype loss.

    ``denominator='negatives_only'`` sums only negative classes under the log,
    so the loss can go below zero; ``'all_classes'`` gives the usual softmax form.
    """

    tau: float = 0.1
    neg_sample_cap: int | None = None
    seed: int = 0
    denominator: str = "negatives_only"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.neg_sample_cap is not None and self.neg_sample_cap < 1:
            raise ValueError("neg_sample_cap must be >= 1")
        if self.denominator not in DENOMINATORS:
            raise ValueError(f"denominator must be one of {DENOMINATORS}")


@dataclass
class FocalConfig:
    gamma: float = 2.0
    alpha: float = 0.2

    def __post_init__(self):
        if self.gamma < 0 or not 0 < self.alpha <= 1:
            raise ValueError("focal loss needs gamma >= 0 and alpha in (0, 1]")


@dataclass
class AsymConfig:
    gamma_pos: float = 1.0
    gamma_neg: float = 2.0
    margin: float = 0.1

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0 or not 0 <= self.margin < 1:
            raise ValueError("asymmetric loss needs gamma_pos, gamma_neg >= 0 and margin in [0, 1)")


def negative_weights(labels: np.ndarray, cap: int | None, rng: np.random.Generator | None) -> np.ndarray:
    """Denominator weights over negatives, optionally subsampled.

    Without a cap every negative has weight 1. With a cap smaller than the
    number of negatives, ``cap`` of them are drawn uniformly without
    replacement and weighted ``n_neg / cap`` so the expected sum is unchanged.
    """
    neg = 1.0 - labels
    if cap is None:
        return neg
    w = neg.copy()
    if rng is None:
        rng = np.random.default_rng(0)
    for i, row in enumerate(neg):
        idx = np.flatnonzero(row)
        if idx.size <= cap:
            continue
        keep = rng.choice(idx, size=cap, replace=False)
        w[i] = 0.0
        w[i, keep] = idx.size / cap
    return w


def mlc_loss_batch(Z, labels, prototypes, cfg: MlcLossConfig | None = None,
                   rng: np.random.Generator | None = None, skip_invalid: bool = False,
                   reduction: str = "mean") -> Tensor:
    """Multi-label prototype contrastive loss over a batch.

    For each sample with positive classes P and negative classes N::

        loss = -1/|P| * sum_{k in P} log( exp(s_k / tau) / sum_{j in N} exp(s_j / tau) )

    where ``s`` are cosine similarities to the prototypes. Samples without a
    positive or without a negative are rejected, or dropped from the mean
    when ``skip_invalid`` is set.
    """
    cfg = cfg or MlcLossConfig()
    Z = dc.as_tensor(Z)
    if Z.ndim == 1:
        Z = dc.reshape(Z, (1, -1))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    cp = dc.as_tensor(prototypes.matrix if hasattr(prototypes, "matrix") else prototypes)
    if y.shape != (Z.shape[0], cp.shape[0]):
        raise dc.ShapeError(f"labels {y.shape} do not match batch {Z.shape[0]} x classes {cp.shape[0]}")
    n_pos = y.sum(axis=1)
    valid = (n_pos > 0) & (n_pos < y.shape[1])
    if not valid.all():
        if not skip_invalid:
            bad = int(np.flatnonzero(~valid)[0])
            raise LossContractError(
                f"sample {bad} has {int(n_pos[bad])} positives of {y.shape[1]} classes; the loss needs "
                "at least one positive and one negative class (skip the sample or reconfigure)")
        if not valid.any():
            return Tensor(0.0)
        Z = Z[np.flatnonzero(valid)]
        y = y[valid]
        n_pos = n_pos[valid]

    sims = dc.cosine_matrix(Z, cp) * (1.0 / cfg.tau)
    if rng is None and cfg.neg_sample_cap is not None:
        rng = np.random.default_rng(cfg.seed)
    weights = negative_weights(y, cfg.neg_sample_cap, rng)
    if cfg.denominator == "all_classes":
        weights = weights + y
    log_denom = dc.logsumexp(sims, axis=1, weights=weights)
    pos_mean = dc.tsum(sims * (y / n_pos[:, None]), axis=1)
    per_sample = log_denom - pos_mean
    if reduction == "none":
        return per_sample
    return dc.mean(per_sample)


def mlc_loss(z, labels, prototypes, cfg: MlcLossConfig | None = None,
             rng: np.random.Generator | None = None) -> Tensor:
    """Single-sample form of :func:`mlc_loss_batch`; ``z`` has shape (d,)."""
    z = dc.as_tensor(z)
    if np.linalg.norm(z.data) == 0:
        raise dc.DegenerateInputError("mlc_loss: zero-norm representation")
    return mlc_loss_batch(dc.reshape(z, (1, -1)), np.atleast_2d(labels), prototypes, cfg, rng)


def _single_labels(labels, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 2:
        if np.any(y.sum(axis=1) != 1):
            raise LossContractError("supcon_loss needs single-label data (one positive per row)")
        y = y.argmax(axis=1)
    if y.shape != (n,):
        raise dc.ShapeError(f"labels shape {y.shape} does not match batch size {n}")
    return y


def supcon_loss(Z, labels, tau: float = 0.1, reduction: str = "mean") -> Tensor:
    """Supervised contrastive loss over one batch of single-label samples.

    The denominator for anchor ``i`` runs over every other sample, positives
    included. Anchors with no positive peer contribute nothing and are left
    out of the mean (their entry is 0 with ``reduction='none'``).
    """
    Z = dc.as_tensor(Z)
    n = Z.shape[0]
    if n < 2:
        raise LossContractError("supcon_loss needs at least two samples")
    y = _single_labels(labels, n)
    same = (y[:, None] == y[None, :]).astype(np.float64)
    np.fill_diagonal(same, 0.0)
    n_pos = same.sum(axis=1)
    others = 1.0 - np.eye(n)
    sims = dc.cosine_matrix(Z, Z) * (1.0 / tau)
    log_denom = dc.logsumexp(sims, axis=1, weights=others)
    has_pos = n_pos > 0
    pos_mean = dc.tsum(sims * (same / np.maximum(n_pos, 1)[:, None]), axis=1)
    per_anchor = (log_denom - pos_mean) * has_pos.astype(np.float64)
    if reduction == "none":
        return per_anchor
    if not has_pos.any():
        return Tensor(0.0)
    return dc.tsum(per_anchor) * (1.0 / has_pos.sum())


def bce_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free softplus form."""
    s = dc.as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    return dc.mean(dc.softplus(s) - s * y)


def _clamped(probs) -> Tensor:
    return dc.clip(dc.as_tensor(probs), PROB_EPS, 1.0 - PROB_EPS)


def focal_loss(probs, labels, cfg: FocalConfig | None = None) -> Tensor:
    """Per-class focal terms, averaged.

    Positives: ``-alpha (1-p)^gamma log p``; negatives: ``-(1-alpha) p^gamma log(1-p)``.
    """
    cfg = cfg or FocalConfig()
    p = _clamped(probs)
    y = np.asarray(labels, dtype=np.float64)
    q = 1.0 - p
    pos = (q ** cfg.gamma) * dc.log(p) * (-cfg.alpha)
    neg = (p ** cfg.gamma) * dc.log(q) * (-(1.0 - cfg.alpha))
    return dc.mean(pos * y + neg * (1.0 - y))


def asym_loss(probs, labels, cfg: AsymConfig | None = None) -> Tensor:
    """Asymmetric loss: separate focusing for positives and a shifted, clipped negative term."""
    cfg = cfg or AsymConfig()
    p = _clamped(probs)
    y = np.asarray(labels, dtype=np.float64)
    l_pos = ((1.0 - p) ** cfg.gamma_pos) * dc.log(p)
    p_m = dc.relu(p - cfg.margin) if cfg.margin > 0 else p
    l_neg = (p_m ** cfg.gamma_neg) * dc.log(1.0 - p_m)
    return dc.mean(-(l_pos * y) - l_neg * (1.0 - y))


def classifier_loss(name: str, logits, labels, focal: FocalConfig | None = None,
                    asym: AsymConfig | None = None) -> Tensor:
    if name == "bce":
        return bce_loss(logits, labels)
    probs = dc.sigmoid(logits)
    if name == "focal":
        return focal_loss(probs, labels, focal)
    if name == "asym":
        return asym_loss(probs, labels, asym)
    raise ValueError(f"unknown classifier loss {name!r}")
