"""Joint focal + dice objective on softmax probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Function, ShapeError, Tensor

PROB_SLACK = 1e-6
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    joint_alpha: float = 0.6
    joint_beta: float = 0.4
    focal_gamma: float = 0.25  # weight of foreground categories; background gets 1 - gamma
    focal_delta: float = 0.2  # focusing exponent
    dice_eps: float = 1e-5

    def __post_init__(self):
        if abs(self.joint_alpha + self.joint_beta - 1) > 1e-12:
            raise ValueError("joint_alpha + joint_beta must equal 1")
        if self.dice_eps <= 0:
            raise ValueError("dice_eps must be positive")


class FocalTerm(Function):
    """(1 - p)**delta * log(p), elementwise, with the p -> 1 limit handled.

    The derivative (1-p)**delta / p - delta (1-p)**(delta-1) log p tends to 1
    as p -> 1 even for delta < 1, where naive autodiff would produce inf * 0.
    """

    def forward(self, p, delta):
        self.p = np.maximum(p, LOG_FLOOR)
        self.delta = delta
        self.q = 1 - self.p
        return (self.q**delta * np.log(self.p)).astype(p.dtype)

    def backward(self, g):
        p, q, d = self.p, self.q, self.delta
        with np.errstate(divide="ignore", invalid="ignore"):
            second = np.where(q > 0, d * q ** (d - 1) * np.log(p), 0.0)
        deriv = q**d / p - second
        deriv = np.where(q > 0, deriv, 1.0)
        return ((g * deriv).astype(p.dtype),)


def one_hot(labels: np.ndarray, k: int = 4, dtype=np.float32) -> np.ndarray:
    """B x H x W ids -> B x k x H x W."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}")
    return np.moveaxis(np.eye(k, dtype=dtype)[labels], -1, 1)


def _check_probs(probs: Tensor, labels: np.ndarray) -> None:
    if probs.ndim != 4:
        raise ShapeError(f"probabilities must be B x K x H x W, got {probs.shape}")
    b, _, h, w = probs.shape
    if labels.shape != (b, h, w):
        raise ShapeError(f"label shape {labels.shape} does not match probabilities {probs.shape}")
    lo, hi = float(probs.data.min()), float(probs.data.max())
    if lo < -PROB_SLACK or hi > 1 + PROB_SLACK:
        raise ValueError(f"probabilities outside [0, 1]: range [{lo}, {hi}]")


def focal_loss(probs: Tensor, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Class-balanced focal loss averaged over pixels."""
    labels = np.asarray(labels)
    _check_probs(probs, labels)
    b, k, h, w = probs.shape
    mask = one_hot(labels, k, probs.dtype)
    p_true = (probs * mask).sum(axis=1)
    weight = np.where(labels == 0, 1 - cfg.focal_gamma, cfg.focal_gamma).astype(probs.dtype)
    term = FocalTerm.apply(p_true, delta=cfg.focal_delta)
    return -(term * weight).sum() / (b * h * w)


def dice_loss(probs: Tensor, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Per-category squared-denominator dice, averaged over categories."""
    labels = np.asarray(labels)
    _check_probs(probs, labels)
    k = probs.shape[1]
    g = one_hot(labels, k, probs.dtype)
    inter = (probs * g).sum(axis=(0, 2, 3))
    denom = (probs * probs).sum(axis=(0, 2, 3)) + g.sum(axis=(0, 2, 3))
    per_class = 1 - (2 * inter + cfg.dice_eps) / (denom + cfg.dice_eps)
    return per_class.mean()


def joint_loss(probs: Tensor, labels: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    return cfg.joint_alpha * focal_loss(probs, labels, cfg) + cfg.joint_beta * dice_loss(probs, labels, cfg)
