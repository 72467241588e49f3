# app/losses.py
"""
Module: losses.py

The four training losses and their weighted combination:

- main_loss: cross-entropy of the main head on labeled source images
- pretext_loss: cross-entropy of the rotation head on rotated target images
- consistency_loss: KL(p_hat(y|x) || p(y|x_rot)) with p_hat detached
- entropy_loss: mean prediction entropy on original target images
- total_loss: main + lambda_p*pretext + lambda_c*consistency + lambda_e*entropy

Every loss reduces over the batch with the arithmetic mean. Probabilities are
clamped to [1e-12, 1] before a log is taken.

``mi_decomposition_oracle`` computes, by brute-force marginalization over
small discrete tables, both sides of the identity that splits the negative
mutual information between an augmented input and the label into the
consistency term minus a prior-divergence term.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from app import autodiff as ad
from app.autodiff import Tensor
from app.errors import ShapeError

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12
N_ROTATIONS = 4


class LossWeights(BaseModel):
    lambda_p: float = Field(0.6, ge=0.0, description="Weight of the rotation pretext loss")
    lambda_c: float = Field(0.2, ge=0.0, description="Weight of the consistency loss")
    lambda_e: float = Field(0.1, ge=0.0, description="Weight of the entropy-minimization loss")

    @field_validator("lambda_p", "lambda_c", "lambda_e")
    def validate_finite(cls, value):
        if not math.isfinite(value):
            raise ValueError("loss weights must be finite")
        return value

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.lambda_p, self.lambda_c, self.lambda_e


@dataclass(frozen=True)
class LossParts:
    l_main: Tensor
    l_pretext: Tensor
    l_consistency: Tensor
    l_entropy: Tensor


@dataclass(frozen=True)
class LossBreakdown:
    l_main: Tensor
    l_pretext: Tensor
    l_consistency: Tensor
    l_entropy: Tensor
    l_total: Tensor

    def values(self) -> Dict[str, float]:
        return {
            "loss_main": self.l_main.item(),
            "loss_pretext": self.l_pretext.item(),
            "loss_consistency": self.l_consistency.item(),
            "loss_entropy": self.l_entropy.item(),
            "loss_total": self.l_total.item(),
        }


def _check_batch(op: str, logits: Tensor, labels: np.ndarray, n_classes: int = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] == 0:
        logger.error(f"{op}: empty or malformed batch {logits.shape}")
        raise ValueError(f"{op}: batch must be a non-empty n×K matrix, got shape {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(op, logits.shape, labels.shape)
    k = logits.shape[1] if n_classes is None else n_classes
    if n_classes is not None and logits.shape[1] != n_classes:
        raise ShapeError(op, logits.shape, (logits.shape[0], n_classes))
    if labels.min() < 0 or labels.max() >= k:
        logger.error(f"{op}: label out of range [0, {k - 1}]")
        raise ValueError(f"{op}: labels must lie in [0, {k - 1}]")
    return labels


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    one_hot = np.zeros(logits.shape)
    one_hot[np.arange(labels.size), labels] = 1.0
    picked = ad.tensor_sum(ad.mul(Tensor(one_hot), ad.log_softmax(logits)), axis=1)
    return ad.neg(ad.tensor_mean(picked))


def main_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """
    Mean negative log-probability of the true class.

    Example:
    >>> round(main_loss(Tensor([[1.0, 2.0, 3.0]]), [2]).item(), 6)
    0.407606
    """
    labels = _check_batch("main_loss", logits, labels)
    return _cross_entropy(logits, labels)


def pretext_loss(pretext_logits: Tensor, rot_labels: Sequence[int]) -> Tensor:
    """Cross-entropy of the 4-way rotation head on rotated images."""
    rot_labels = _check_batch("pretext_loss", pretext_logits, rot_labels, N_ROTATIONS)
    return _cross_entropy(pretext_logits, rot_labels)


def consistency_loss(logits_orig: Tensor, logits_rot: Tensor) -> Tensor:
    """
    Mean ``KL(p_hat(y|x) || p(y|x_rot))`` over the batch.

    ``p_hat`` is the softmax of ``logits_orig`` passed through ``stop_gradient``,
    so gradients reach the parameters only through ``logits_rot``.
    """
    if logits_orig.shape != logits_rot.shape or logits_orig.ndim != 2:
        logger.error(f"consistency_loss shape mismatch: {logits_orig.shape} vs {logits_rot.shape}")
        raise ShapeError("consistency_loss", logits_orig.shape, logits_rot.shape)
    p_hat = ad.stop_gradient(ad.softmax(logits_orig))
    log_p_hat = Tensor(np.log(np.clip(p_hat.data, PROB_EPS, 1.0)))
    kl_rows = ad.tensor_sum(ad.mul(p_hat, ad.sub(log_p_hat, ad.log_softmax(logits_rot))), axis=1)
    return ad.tensor_mean(kl_rows)


def entropy_loss(logits: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of the softmax rows; lies in [0, ln K]."""
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError("entropy_loss", logits.shape)
    probs = ad.softmax(logits)
    plogp = ad.mul(probs, ad.log(ad.clip(probs, PROB_EPS, 1.0)))
    return ad.neg(ad.tensor_mean(ad.tensor_sum(plogp, axis=1)))


def total_loss(parts: LossParts, weights: LossWeights) -> LossBreakdown:
    """
    Weighted sum ``l_main + lambda_p*l_pretext + lambda_c*l_consistency + lambda_e*l_entropy``.

    With all three weights at zero ``l_total`` equals ``l_main`` bit for bit.
    """
    for name, value in zip(("lambda_p", "lambda_c", "lambda_e"), weights.as_tuple()):
        if not value >= 0.0:
            logger.error(f"Negative loss weight {name}={value}")
            raise ValueError(f"{name} must be non-negative, got {value}")
    for tensor in (parts.l_main, parts.l_pretext, parts.l_consistency, parts.l_entropy):
        if tensor.size != 1:
            raise ShapeError("total_loss", tensor.shape)
    total = ad.add(parts.l_main, ad.scale(parts.l_pretext, weights.lambda_p))
    total = ad.add(total, ad.scale(parts.l_consistency, weights.lambda_c))
    total = ad.add(total, ad.scale(parts.l_entropy, weights.lambda_e))
    return LossBreakdown(parts.l_main, parts.l_pretext, parts.l_consistency, parts.l_entropy, total)


# ----------------------------------------------------------------------
# mutual-information decomposition oracle
# ----------------------------------------------------------------------
def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Elementwise ``p * log(p / q)`` with the 0*log(0) = 0 convention."""
    p_b, q_b = np.broadcast_arrays(p, q)
    out = np.zeros(p_b.shape)
    mask = p_b > 0
    with np.errstate(divide="ignore"):
        out[mask] = p_b[mask] * np.log(p_b[mask] / q_b[mask])
    return out


def _weighted_sum(weights: np.ndarray, values: np.ndarray) -> float:
    """``sum(weights * values)`` skipping zero-weight cells, whose values may be infinite."""
    return float(np.sum(np.where(weights > 0, weights * np.where(weights > 0, values, 0.0), 0.0)))


def mi_decomposition_oracle(joint: np.ndarray, cond: np.ndarray) -> Tuple[float, float]:
    """
    Brute-force both sides of the negative-mutual-information identity.

    Parameters:
    - joint (|X|×|X~| array): p(x, x~), summing to 1.
    - cond (|X|×|Y| array): p(y|x), each row summing to 1.

    Assuming y is conditionally independent of x~ given x, returns
    ``(lhs, rhs)`` with ``lhs = -I(x~; y)`` and
    ``rhs = E_{x,x~}[KL(p(y|x) || p(y|x~))] - E_x[KL(p(y|x) || p(y))]``.
    """
    joint = np.asarray(joint, dtype=np.float64)
    cond = np.asarray(cond, dtype=np.float64)
    if joint.ndim != 2 or cond.ndim != 2 or joint.shape[0] != cond.shape[0]:
        raise ShapeError("mi_decomposition_oracle", joint.shape, cond.shape)
    if max(joint.shape + cond.shape) > 8:
        raise ValueError("alphabets are limited to 8 symbols")
    if np.any(joint < 0) or np.any(cond < 0):
        raise ValueError("probability tables must be non-negative")
    if abs(joint.sum() - 1.0) > 1e-12 or np.any(np.abs(cond.sum(axis=1) - 1.0) > 1e-12):
        logger.error("mi_decomposition_oracle() received unnormalized tables")
        raise ValueError("joint must sum to 1 and every row of cond must sum to 1")

    p_x = joint.sum(axis=1)
    p_xt = joint.sum(axis=0)
    p_y = p_x @ cond
    safe_xt = np.where(p_xt > 0, p_xt, 1.0)
    p_x_given_xt = joint / safe_xt[None, :]
    p_y_given_xt = p_x_given_xt.T @ cond

    # -I(x~; y) = -sum_{x~} p(x~) KL(p(y|x~) || p(y))
    lhs = -_weighted_sum(p_xt, _xlogy_ratio(p_y_given_xt, p_y[None, :]).sum(axis=1))

    kl_pairs = _xlogy_ratio(cond[:, None, :], p_y_given_xt[None, :, :]).sum(axis=2)
    consistency_term = _weighted_sum(joint, kl_pairs)
    prior_term = _weighted_sum(p_x, _xlogy_ratio(cond, p_y[None, :]).sum(axis=1))
    return lhs, consistency_term - prior_term
