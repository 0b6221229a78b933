"""Multi-similarity losses with fixed, split and KGE-driven margins.

All losses take a :class:`ContrastiveBatch` of unit-normalized embeddings and
return ``(loss, grad)`` where ``grad`` is the derivative with respect to the
embedding rows, with the similarity matrix taken as ``X @ X.T``.  Mining is
treated as fixed (it is piecewise constant in the similarities).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch


@dataclass
class MsParams:
    alpha: float = 2.0
    beta: float = 50.0
    epsilon: float = 0.1
    margin: float = 0.5
    pos_margin: float = 1.0
    neg_margin: float = 0.5

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        for name in ("margin", "pos_margin", "neg_margin"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class ContrastiveBatch:
    embeddings: np.ndarray
    labels: list
    S: np.ndarray
    S_kge: np.ndarray | None = None
    positives: np.ndarray | None = None
    negatives: np.ndarray | None = None

    @classmethod
    def from_embeddings(cls, embeddings, labels, S_kge=None, normalize=True) -> "ContrastiveBatch":
        X = np.asarray(embeddings, dtype=np.float64)
        if normalize:
            X = X / np.linalg.norm(X, axis=1, keepdims=True)
        S = X @ X.T
        S = (S + S.T) / 2.0
        return cls(X, list(labels), S, None if S_kge is None else np.asarray(S_kge, dtype=np.float64))

    def mine(self, epsilon: float) -> "ContrastiveBatch":
        self.positives, self.negatives = mine_pairs(self.S, self.labels, epsilon)
        return self


def mine_pairs(S: np.ndarray, labels: Sequence, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Hard pair mining of the multi-similarity loss.

    Returns boolean ``(m, m)`` masks: row ``i`` of the first marks the kept
    positives of anchor ``i``, row ``i`` of the second its kept negatives.  A
    negative survives if it is more similar than the hardest positive minus
    ``epsilon``; a positive survives if it is less similar than the hardest
    negative plus ``epsilon``.
    """
    S = np.asarray(S, dtype=np.float64)
    lab = np.asarray(labels, dtype=object)
    same = lab[:, None] == lab[None, :]
    pos = same.copy()
    np.fill_diagonal(pos, False)
    neg = ~same
    min_pos = np.where(pos, S, np.inf).min(axis=1, initial=np.inf)
    max_neg = np.where(neg, S, -np.inf).max(axis=1, initial=-np.inf)
    keep_neg = neg & (S > (min_pos - epsilon)[:, None])
    keep_pos = pos & (S < (max_neg + epsilon)[:, None])
    return keep_pos, keep_neg


def _log1p_sumexp(x: np.ndarray, mask: np.ndarray):
    """Row-wise ``log(1 + sum_{mask} exp(x))`` and its derivative in ``x``."""
    z = np.where(mask, x, -np.inf)
    top = np.maximum(z.max(axis=1, initial=-np.inf), 0.0)
    with np.errstate(invalid="ignore"):
        e = np.where(mask, np.exp(z - top[:, None]), 0.0)
    total = np.exp(-top) + e.sum(axis=1)
    value = top + np.log(total)
    weight = e / total[:, None]
    return value, weight


def _ms_loss(batch: ContrastiveBatch, alpha, beta, pos_shift, pos_slope, neg_shift, neg_slope):
    """Shared body of all variants.

    Positive exponent ``-alpha * (S - pos_shift(S))``, negative exponent
    ``beta * (S - neg_shift(S))``; ``*_slope`` are the derivatives of the
    shifts in ``S``.
    """
    if batch.positives is None or batch.negatives is None:
        raise ValueError("batch has no mined pairs; call batch.mine(epsilon) first")
    S = batch.S
    X = batch.embeddings
    m = S.shape[0]
    P, N = batch.positives, batch.negatives

    pos_val, pos_w = _log1p_sumexp(-alpha * (S - pos_shift), P)
    neg_val, neg_w = _log1p_sumexp(beta * (S - neg_shift), N)
    loss = float((pos_val / alpha + neg_val / beta).sum() / m)

    # d loss / d S, then through S = X X^T
    G = (-pos_w * (1.0 - pos_slope) + neg_w * (1.0 - neg_slope)) / m
    grad = (G + G.T) @ X
    return loss, grad


def ms_loss_v2(batch: ContrastiveBatch, params: MsParams) -> tuple[float, np.ndarray]:
    """Separate positive and negative margins."""
    return _ms_loss(batch, params.alpha, params.beta, params.pos_margin, 0.0, params.neg_margin, 0.0)


def ms_loss_v1(batch: ContrastiveBatch, params: MsParams) -> tuple[float, np.ndarray]:
    """Original multi-similarity loss with one fixed margin."""
    return _ms_loss(batch, params.alpha, params.beta, params.margin, 0.0, params.margin, 0.0)


def ms_loss_v3(batch: ContrastiveBatch, params: MsParams) -> tuple[float, np.ndarray]:
    """Per-pair margin ``|S - S_kge|`` from the graph similarity of the two concepts.

    ``S_kge`` is a constant; the kink of ``|.|`` gets subgradient 0.
    """
    if batch.S_kge is None:
        raise ValueError("ms_loss_v3 needs S_kge; use ms_loss_v1 or ms_loss_v2 without a KGE model")
    diff = batch.S - batch.S_kge
    gap = np.abs(diff)
    sign = np.sign(diff)
    return _ms_loss(batch, params.alpha, params.beta, gap, sign, 1.0 - gap, -sign)


LOSSES = {"v1": ms_loss_v1, "v2": ms_loss_v2, "v3": ms_loss_v3}


def positive_exponents(batch: ContrastiveBatch, params: MsParams, variant: str) -> np.ndarray:
    """Exponent matrix of the positive term (for inspection and tests)."""
    S = batch.S
    if variant == "v1":
        return -params.alpha * (S - params.margin)
    if variant == "v2":
        return -params.alpha * (S - params.pos_margin)
    return -params.alpha * (S - np.abs(S - batch.S_kge))


class MsLossFunction(torch.autograd.Function):
    """Autograd bridge: forward and backward come from the numpy implementation."""

    @staticmethod
    def forward(ctx, embeddings, labels, S_kge, params, variant):
        X = embeddings.detach().cpu().numpy().astype(np.float64)
        batch = ContrastiveBatch.from_embeddings(X, labels, S_kge, normalize=False).mine(params.epsilon)
        loss, grad = LOSSES[variant](batch, params)
        ctx.save_for_backward(torch.as_tensor(grad, dtype=embeddings.dtype))
        return embeddings.new_tensor(loss)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None, None, None


def ms_loss_torch(embeddings, labels, S_kge, params: MsParams, variant: str):
    """Loss on raw embeddings; normalization is differentiated by autograd."""
    unit = torch.nn.functional.normalize(embeddings, dim=1)
    return MsLossFunction.apply(unit, list(labels), S_kge, params, variant)
