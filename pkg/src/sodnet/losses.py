"""Pixel-wise BCE, region-wise IoU, and their multilevel sum."""

from __future__ import annotations

from . import tensor as T
from .tensor import DimensionError, Tensor, as_tensor

LOG_EPS = 1e-7


def _check(P: Tensor, G: Tensor) -> None:
    if P.shape != G.shape:
        raise DimensionError(f"prediction shape {P.shape} != target shape {G.shape}")


def bce_loss(P, G, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on probabilities; logs are clamped at LOG_EPS."""
    P, G = as_tensor(P), as_tensor(G)
    _check(P, G)
    pos = T.log(T.clamp_min(P, LOG_EPS))
    neg = T.log(T.clamp_min(1.0 - P, LOG_EPS))
    ll = G * pos + (1.0 - G) * neg
    if reduction == "sum":
        return -T.sum(ll)
    if reduction == "mean":
        return -T.mean(ll)
    raise ValueError(f"unknown reduction {reduction!r}")


def iou_loss(P, G, smooth: float = 1.0) -> Tensor:
    """1 - soft IoU per image over the last two axes, averaged over the rest."""
    P, G = as_tensor(P), as_tensor(G)
    _check(P, G)
    if P.ndim < 2:
        raise DimensionError(f"iou_loss expects (..., H, W), got {P.shape}")
    pg = P * G
    inter = T.sum(pg, axis=(-2, -1))
    union = T.sum(P + G - pg, axis=(-2, -1))
    per_image = 1.0 - (inter + smooth) / (union + smooth)
    return T.mean(per_image)


def joint_loss(P, G) -> Tensor:
    return bce_loss(P, G) + iou_loss(P, G)


def multilevel_loss(logits_maps: list[Tensor], G) -> Tensor:
    """Unweighted sum of joint losses of every supervised level."""
    if not logits_maps:
        raise ValueError("multilevel_loss needs at least one level")
    G = as_tensor(G)
    total = None
    for m in logits_maps:
        term = joint_loss(T.sigmoid(m), G)
        total = term if total is None else total + term
    return total
