"""Sign-gradient PGD under an l-infinity ball, with randomized init and
per-iteration transform sampling.

The feasible set is precomputed per image as exact per-pixel bounds
(budget ball intersected with [0,1]); every iterate is clipped into it, so
feasibility holds exactly, including at float64 rounding granularity.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .encoder import EncoderParams, embed
from .imageio import Image
from .objective import AnchorPair, ObjectiveConfig, cos_sim, loss_total, make_anchor
from .tensor import Tensor, backward
from .transforms import EotPolicy, apply_transform_tensor, sample_transforms

log = logging.getLogger(__name__)


class PgdError(RuntimeError):
    """Optimization aborted (non-finite gradient or infeasible iterate)."""


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 8.0 / 255.0
    step_size: float = 1.0 / 255.0
    iterations: int = 1000
    init_sigma: float = 1.0 / 255.0
    eot: EotPolicy | None = None      # None: identity transform every iteration
    seed: int = 0
    trace_every: int = 100

    def __post_init__(self):
        if not 0.0 < self.step_size <= self.epsilon:
            raise ValueError(f"step_size must be in (0, epsilon], got {self.step_size}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.init_sigma < 0:
            raise ValueError("init_sigma must be >= 0")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")

    def with_seed(self, seed: int) -> "PgdConfig":
        return replace(self, seed=int(seed))


@dataclass
class ProtectionResult:
    image: Image
    initial_loss: float
    final_loss: float
    loss_trace: list[tuple[int, float]]
    initial_cos_base: float
    final_cos_base: float
    final_cos_target: float
    linf: float
    max_linf_seen: float
    iterations: int
    wall_time: float


def feasible_bounds(x: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel [lo, hi] such that clipping guarantees both the budget and
    the pixel range, as measured in float64 (bounds are nudged down a ulp
    where x +/- epsilon rounded outward)."""
    hi = np.minimum(x + epsilon, 1.0)
    over = (hi - x) > epsilon
    while np.any(over):
        hi[over] = np.nextafter(hi[over], -np.inf)
        over = (hi - x) > epsilon
    lo = np.maximum(x - epsilon, 0.0)
    over = (x - lo) > epsilon
    while np.any(over):
        lo[over] = np.nextafter(lo[over], np.inf)
        over = (x - lo) > epsilon
    return lo, hi


def project_linf(x_prime: Image, x: Image, epsilon: float) -> Image:
    """Clamp into the epsilon ball around x, then into the pixel range."""
    if x_prime.pixels.shape != x.pixels.shape:
        raise ValueError(
            f"project_linf: shapes {x_prime.pixels.shape} vs {x.pixels.shape}")
    lo, hi = feasible_bounds(x.pixels, epsilon)
    return Image(np.clip(x_prime.pixels, lo, hi))


def init_perturbed(x: Image, cfg: PgdConfig) -> Image:
    """Randomized start: gaussian noise, clipped and projected into the ball."""
    if cfg.init_sigma == 0.0:
        return Image(x.pixels.copy())
    rng = np.random.default_rng([abs(int(cfg.seed)), 0])
    noisy = x.pixels + rng.normal(0.0, cfg.init_sigma, size=x.pixels.shape)
    lo, hi = feasible_bounds(x.pixels, cfg.epsilon)
    return Image(np.clip(np.clip(noisy, 0.0, 1.0), lo, hi))


def _loss_and_grad(pixels: np.ndarray, anchor: AnchorPair, params: EncoderParams,
                   obj: ObjectiveConfig, specs) -> tuple[float, np.ndarray]:
    x = Tensor(pixels, requires_grad=True)
    t = x
    for spec in specs:
        t = apply_transform_tensor(spec, t)
    loss = loss_total(embed(params, t), anchor, obj)
    backward(loss)
    grad = x.grad if x.grad is not None else np.zeros_like(pixels)
    return loss.item(), grad


def pgd_step(x_k: Image, x: Image, anchor: AnchorPair, params: EncoderParams,
             obj: ObjectiveConfig, cfg: PgdConfig, iteration: int) -> Image:
    """One sign-gradient descent step followed by projection.

    sign(0) is 0, so a zero gradient leaves the iterate fixed.
    """
    specs = sample_transforms(cfg.eot, iteration) if cfg.eot is not None else ()
    _, grad = _loss_and_grad(x_k.pixels, anchor, params, obj, specs)
    if not np.all(np.isfinite(grad)):
        raise PgdError(f"non-finite gradient at iteration {iteration}")
    stepped = x_k.pixels - cfg.step_size * np.sign(grad)
    lo, hi = feasible_bounds(x.pixels, cfg.epsilon)
    return Image(np.clip(stepped, lo, hi))


def protect_image(x: Image, params: EncoderParams, obj: ObjectiveConfig,
                  cfg: PgdConfig) -> ProtectionResult:
    """Run the full optimization for one image.

    The loss trace is always evaluated on the untransformed iterate so
    traces are comparable across sampling policies.
    """
    started = time.perf_counter()
    anchor = make_anchor(params, x)
    lo, hi = feasible_bounds(x.pixels, cfg.epsilon)
    current = init_perturbed(x, cfg)

    def identity_loss(img: Image) -> float:
        return loss_total(embed(params, img), anchor, obj).item()

    trace: list[tuple[int, float]] = [(0, identity_loss(current))]
    initial_cos = cos_sim(embed(params, current).data, anchor.z_base)
    max_linf = float(np.max(np.abs(current.pixels - x.pixels)))
    for k in range(cfg.iterations):
        _, grad = _loss_and_grad(current.pixels, anchor, params, obj,
                                 sample_transforms(cfg.eot, k) if cfg.eot else ())
        if not np.all(np.isfinite(grad)):
            raise PgdError(f"non-finite gradient at iteration {k}")
        current = Image(np.clip(current.pixels - cfg.step_size * np.sign(grad), lo, hi))
        dist = float(np.max(np.abs(current.pixels - x.pixels)))
        max_linf = max(max_linf, dist)
        if dist > cfg.epsilon:
            raise PgdError(f"iterate left the budget ball at iteration {k}: {dist}")
        step = k + 1
        if step % cfg.trace_every == 0 or step == cfg.iterations:
            trace.append((step, identity_loss(current)))

    z_final = embed(params, current).data
    result = ProtectionResult(
        image=current,
        initial_loss=trace[0][1],
        final_loss=trace[-1][1],
        loss_trace=trace,
        initial_cos_base=initial_cos,
        final_cos_base=cos_sim(z_final, anchor.z_base),
        final_cos_target=cos_sim(z_final, anchor.z_target),
        linf=float(np.max(np.abs(current.pixels - x.pixels))),
        max_linf_seen=max_linf,
        iterations=cfg.iterations,
        wall_time=time.perf_counter() - started,
    )
    log.debug("protected image in %.2fs: loss %.4g -> %.4g, cos_base %.3f",
              result.wall_time, result.initial_loss, result.final_loss,
              result.final_cos_base)
    return result
