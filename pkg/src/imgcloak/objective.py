"""Anchor construction and the combined repulsion/attraction loss.

For each image the clean embedding is computed once and frozen, together
with its antithetical target: the negated embedding, l2-normalized over
the full vectorized feature. The optimized loss is

    total(x') = exp(alpha * cos(vec z', vec z_clean))
              + beta * (-log((cos(vec z', vec z_target) + 1) / 2 + xi))

so descending it pushes z' away from the clean feature and pulls it toward
the target. Cosines are taken on vectorized token features; scale-invariance
of the cosine makes the target's normalization a convention, not a choice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as ts
from .encoder import EncoderParams, embed
from .imageio import Image
from .tensor import Tensor


@dataclass(frozen=True)
class ObjectiveConfig:
    alpha: float = 10.0   # repulsion strength
    beta: float = 1.0     # attraction weight
    xi: float = 1e-8      # log stabilizer

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 < self.xi < 1e-3:
            raise ValueError("xi must be in (0, 1e-3)")


def cos_sim(a, b) -> float:
    """Cosine similarity of two vectors (any shapes, flattened), in [-1, 1]."""
    va = np.asarray(a, dtype=np.float64).ravel()
    vb = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cos_sim: zero vector")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def cos_sim_t(a: Tensor, b: Tensor) -> Tensor:
    """Tape-recorded cosine similarity on vectorized inputs."""
    if not np.any(a.data) or not np.any(b.data):
        raise ValueError("cos_sim: zero vector")
    va = ts.reshape(a, (a.size,))
    vb = ts.reshape(b, (b.size,))
    dot = ts.tsum(ts.mul(va, vb))
    return ts.div(dot, ts.mul(ts.l2norm(va), ts.l2norm(vb)))


@dataclass
class AnchorPair:
    """Frozen per-image anchors: the clean embedding and its antithesis."""

    z_base: np.ndarray
    z_target: np.ndarray

    def __post_init__(self):
        self.z_base = np.ascontiguousarray(self.z_base, dtype=np.float64)
        self.z_target = np.ascontiguousarray(self.z_target, dtype=np.float64)
        if self.z_base.shape != self.z_target.shape:
            raise ValueError("anchor embeddings must share a shape")
        norm = np.linalg.norm(self.z_target)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"target must be unit-norm, got {norm!r}")
        if abs(cos_sim(self.z_base, self.z_target) + 1.0) > 1e-9:
            raise ValueError("target must be antipodal to the base embedding")


def make_anchor(params: EncoderParams, x: Image) -> AnchorPair:
    """Clean embedding plus the unit-normalized negation; constants thereafter."""
    z = embed(params, x).data
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        raise ValueError("make_anchor: clean embedding is all-zero")
    return AnchorPair(z_base=z, z_target=-z / norm)


def _check_adv(z_adv: Tensor, anchor: AnchorPair):
    if z_adv.shape != anchor.z_base.shape:
        raise ValueError(
            f"embedding shape {z_adv.shape} does not match anchor {anchor.z_base.shape}")


def loss_push(z_adv: Tensor, anchor: AnchorPair, cfg: ObjectiveConfig) -> Tensor:
    """exp(alpha * cos(z_adv, z_base)): exponential repulsion from the clean feature."""
    _check_adv(z_adv, anchor)
    return ts.exp(ts.scalar_mul(cos_sim_t(z_adv, ts.constant(anchor.z_base)), cfg.alpha))


def loss_pull(z_adv: Tensor, anchor: AnchorPair, cfg: ObjectiveConfig) -> Tensor:
    """-log((cos(z_adv, z_target) + 1)/2 + xi): attraction toward the antithesis."""
    _check_adv(z_adv, anchor)
    c = cos_sim_t(z_adv, ts.constant(anchor.z_target))
    return ts.scalar_mul(ts.log(ts.scalar_add(ts.scalar_mul(ts.scalar_add(c, 1.0), 0.5),
                                              cfg.xi)), -1.0)


def loss_total(z_adv: Tensor, anchor: AnchorPair, cfg: ObjectiveConfig) -> Tensor:
    """Combined objective: push + beta * pull."""
    total = loss_push(z_adv, anchor, cfg)
    if cfg.beta != 0.0:
        total = ts.add(total, ts.scalar_mul(loss_pull(z_adv, anchor, cfg), cfg.beta))
    return total
