"""Weighted BCE, Tversky index, focal Tversky loss and their hybrid.

All functions take a :class:`PixelProbs` holding lesion probabilities and a
binary lesion ground truth, work in float64, and (where useful) return the
analytic gradient with respect to the lesion probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _emit

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.7
    beta: float = 0.3
    gamma: float = 4.0 / 3.0
    kappa: float = 1.0
    lesion_weight_mode: str = "batch-balanced"
    lesion_weight: float = 1.0
    smooth: float = 1.0

    def validate(self) -> list[str]:
        problems = []
        if not 1.0 <= self.gamma <= 3.0:
            problems.append(f"gamma: must lie in [1, 3], got {self.gamma}")
        if self.kappa < 0:
            problems.append(f"kappa: must be >= 0, got {self.kappa}")
        if self.smooth <= 0:
            problems.append(f"smooth: must be > 0, got {self.smooth}")
        if self.alpha < 0 or self.beta < 0:
            problems.append("alpha/beta: must be non-negative")
        if self.lesion_weight_mode not in ("fixed", "batch-balanced"):
            problems.append(f"lesion_weight_mode: expected fixed|batch-balanced, got {self.lesion_weight_mode!r}")
        if self.lesion_weight < 1:
            problems.append(f"lesion_weight: must be >= 1, got {self.lesion_weight}")
        return problems


@dataclass
class PixelProbs:
    lesion: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        self.lesion = np.asarray(self.lesion, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.float64)
        if self.lesion.shape != self.truth.shape:
            raise ShapeError(f"probability map {self.lesion.shape} vs ground truth {self.truth.shape}")

    @property
    def background(self) -> np.ndarray:
        return 1.0 - self.lesion

    @property
    def truth_background(self) -> np.ndarray:
        return 1.0 - self.truth


def _tversky_terms(probs: PixelProbs):
    p, g = probs.lesion, probs.truth
    tp = np.sum(p * g)
    fp = np.sum(p * (1.0 - g))
    fn = np.sum((1.0 - p) * g)
    return tp, fp, fn


def tversky_index(probs: PixelProbs, alpha: float = 0.7, beta: float = 0.3, smooth: float = 1.0) -> float:
    """Tversky index pooled over every pixel of the batch."""
    tp, fp, fn = _tversky_terms(probs)
    den = tp + alpha * fp + beta * fn + smooth
    if den == 0:
        return 1.0
    return float((tp + smooth) / den)


def _tversky_grad(probs: PixelProbs, alpha: float, beta: float, smooth: float) -> tuple[float, np.ndarray]:
    tp, fp, fn = _tversky_terms(probs)
    g = probs.truth
    num = tp + smooth
    den = tp + alpha * fp + beta * fn + smooth
    if den == 0:
        return 1.0, np.zeros_like(g)
    dden = g + alpha * (1.0 - g) - beta * g
    grad = (g * den - num * dden) / den**2
    return float(num / den), grad


def focal_tversky_loss(probs: PixelProbs, cfg: LossConfig) -> float:
    ti = tversky_index(probs, cfg.alpha, cfg.beta, cfg.smooth)
    return float(max(1.0 - ti, 0.0) ** (1.0 / cfg.gamma))


def focal_tversky_from_index(ti: float, gamma: float) -> float:
    return float(max(1.0 - ti, 0.0) ** (1.0 / gamma))


def _ftl_with_grad(probs: PixelProbs, cfg: LossConfig) -> tuple[float, np.ndarray]:
    ti, dti = _tversky_grad(probs, cfg.alpha, cfg.beta, cfg.smooth)
    rest = 1.0 - ti
    if rest <= 0:
        return 0.0, np.zeros_like(dti)
    value = rest ** (1.0 / cfg.gamma)
    return float(value), -(1.0 / cfg.gamma) * rest ** (1.0 / cfg.gamma - 1.0) * dti


def resolve_lesion_weight(truth: np.ndarray, cfg: LossConfig) -> float:
    if cfg.lesion_weight_mode == "fixed":
        return cfg.lesion_weight
    lesion = float(np.sum(truth))
    background = truth.size - lesion
    return max(1.0, background / max(1.0, lesion))


def weighted_bce(probs: PixelProbs, lesion_weight: float) -> float:
    return _wbce_with_grad(probs, lesion_weight)[0]


def _wbce_with_grad(probs: PixelProbs, w: float) -> tuple[float, np.ndarray]:
    p = probs.lesion
    g = probs.truth
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.size
    value = -np.sum(w * g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc)) / n
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    grad = np.where(inside, -(w * g / pc - (1.0 - g) / (1.0 - pc)) / n, 0.0)
    return float(value), grad


def hybrid_loss(probs: PixelProbs, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """``wBCE + kappa * FTL`` and its gradient w.r.t. the lesion probabilities."""
    w = resolve_lesion_weight(probs.truth, cfg)
    bce, gbce = _wbce_with_grad(probs, w)
    if cfg.kappa == 0:
        return bce, gbce
    ftl, gftl = _ftl_with_grad(probs, cfg)
    return bce + cfg.kappa * ftl, gbce + cfg.kappa * gftl


def hybrid_loss_components(probs: PixelProbs, cfg: LossConfig) -> dict[str, float]:
    w = resolve_lesion_weight(probs.truth, cfg)
    return {
        "wbce": weighted_bce(probs, w),
        "ftl": focal_tversky_loss(probs, cfg),
        "tversky": tversky_index(probs, cfg.alpha, cfg.beta, cfg.smooth),
        "lesion_weight": w,
    }


# tape-aware wrappers ------------------------------------------------------


def _loss_node(op: str, probs: Tensor, truth: np.ndarray, fn) -> Tensor:
    value, grad = fn(PixelProbs(probs.data, truth))
    return _emit(op, (probs,), np.asarray(value, dtype=probs.dtype),
                 lambda g: ((g * grad).astype(probs.dtype),))


def hybrid_loss_tensor(probs: Tensor, truth: np.ndarray, cfg: LossConfig) -> Tensor:
    return _loss_node("hybrid_loss", probs, truth, lambda pp: hybrid_loss(pp, cfg))


def weighted_bce_tensor(probs: Tensor, truth: np.ndarray, lesion_weight: float) -> Tensor:
    return _loss_node("weighted_bce", probs, truth, lambda pp: _wbce_with_grad(pp, lesion_weight))


def focal_tversky_tensor(probs: Tensor, truth: np.ndarray, cfg: LossConfig) -> Tensor:
    return _loss_node("focal_tversky", probs, truth, lambda pp: _ftl_with_grad(pp, cfg))
