"""Randomized, differentiable image transformations.

The same set serves two roles: sampled per iteration during optimization
to make perturbations survive post-processing, and applied once at
evaluation time as the post-processing attacks themselves. Randomness
(noise draws, crop/occlusion geometry) is a deterministic function of the
spec's seed and is treated as constant by the gradient.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as ts
from .imageio import Image
from .tensor import Tensor

KINDS = ("identity", "gaussian_blur", "gaussian_noise",
         "resize_restore", "crop_restore", "occlusion")


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    kernel_size: int = 3          # gaussian_blur: odd, >= 3
    sigma: float | None = None    # gaussian_blur std; None -> kernel_size / 3
    noise_sigma: float = 5.0      # gaussian_noise std in /255 units
    scale: float = 0.8            # resize_restore factor, (0.5, 1.5]
    crop_fraction: float = 0.9    # crop_restore kept side fraction, (0.5, 1]
    occlusion_fraction: float = 0.1  # occlusion area fraction, (0, 0.25]
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "gaussian_blur":
            if self.kernel_size < 3 or self.kernel_size % 2 == 0:
                raise ValueError(f"blur kernel must be odd and >= 3, got {self.kernel_size}")
            if self.effective_sigma <= 0:
                raise ValueError("blur sigma must be positive")
        elif self.kind == "gaussian_noise":
            if self.noise_sigma < 0:
                raise ValueError("noise sigma must be >= 0")
        elif self.kind == "resize_restore":
            if not 0.5 < self.scale <= 1.5:
                raise ValueError(f"resize scale must be in (0.5, 1.5], got {self.scale}")
        elif self.kind == "crop_restore":
            if not 0.5 < self.crop_fraction <= 1.0:
                raise ValueError(f"crop fraction must be in (0.5, 1], got {self.crop_fraction}")
        elif self.kind == "occlusion":
            if not 0.0 < self.occlusion_fraction <= 0.25:
                raise ValueError(
                    f"occlusion fraction must be in (0, 0.25], got {self.occlusion_fraction}")

    @property
    def effective_sigma(self) -> float:
        return self.sigma if self.sigma is not None else self.kernel_size / 3.0

    def with_seed(self, seed: int) -> "TransformSpec":
        return dataclasses.replace(self, seed=int(seed))

    def label(self) -> str:
        if self.kind == "gaussian_blur":
            return f"blur{self.kernel_size}x{self.kernel_size}"
        if self.kind == "gaussian_noise":
            return f"noise{self.noise_sigma:g}"
        return self.kind


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    t = np.arange(size) - size // 2
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def _rng(spec: TransformSpec) -> np.random.Generator:
    return np.random.default_rng(abs(int(spec.seed)))


def apply_transform_tensor(spec: TransformSpec, x: Tensor) -> Tensor:
    """Tape-recorded application; output shape equals input shape."""
    if spec.kind == "identity":
        return x
    h, w = x.shape[0], x.shape[1]
    if spec.kind == "gaussian_blur":
        out = ts.conv2d(x, gaussian_kernel(spec.kernel_size, spec.effective_sigma))
    elif spec.kind == "gaussian_noise":
        noise = _rng(spec).normal(0.0, spec.noise_sigma / 255.0, size=x.shape)
        out = ts.add(x, ts.constant(noise))
    elif spec.kind == "resize_restore":
        h2 = max(1, round(h * spec.scale))
        w2 = max(1, round(w * spec.scale))
        out = ts.bilinear_resample(ts.bilinear_resample(x, h2, w2), h, w)
    elif spec.kind == "crop_restore":
        ch = max(1, round(h * spec.crop_fraction))
        cw = max(1, round(w * spec.crop_fraction))
        rng = _rng(spec)
        r0 = int(rng.integers(0, h - ch + 1))
        c0 = int(rng.integers(0, w - cw + 1))
        # content keeps its position; discarded border becomes zeros
        out = ts.pad2d(ts.slice2d(x, r0, r0 + ch, c0, c0 + cw),
                       r0, h - ch - r0, c0, w - cw - c0)
    elif spec.kind == "occlusion":
        side = math.sqrt(spec.occlusion_fraction)
        oh = max(1, round(h * side))
        ow = max(1, round(w * side))
        rng = _rng(spec)
        r0 = int(rng.integers(0, h - oh + 1))
        c0 = int(rng.integers(0, w - ow + 1))
        mask = np.ones(x.shape)
        mask[r0:r0 + oh, c0:c0 + ow] = 0.0
        out = ts.mask_mul(x, mask)
    else:  # pragma: no cover - guarded by the spec constructor
        raise ValueError(f"unknown transform kind {spec.kind!r}")
    return ts.clamp(out, 0.0, 1.0)


def apply_transform(spec: TransformSpec, img: Image) -> Image:
    return Image(apply_transform_tensor(spec, Tensor(img.pixels)).data)


@dataclass(frozen=True)
class EotPolicy:
    """Candidate transforms with sampling weights; m specs drawn per iteration."""

    candidates: tuple[TransformSpec, ...]
    weights: tuple[float, ...] | None = None
    per_iteration: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("policy needs at least one candidate transform")
        if self.weights is not None:
            if len(self.weights) != len(self.candidates):
                raise ValueError("weights and candidates length mismatch")
            if min(self.weights) < 0 or sum(self.weights) <= 0:
                raise ValueError("weights must be non-negative with positive sum")
        if self.per_iteration < 1:
            raise ValueError("per_iteration must be >= 1")

    def probabilities(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self.candidates), 1.0 / len(self.candidates))
        w = np.asarray(self.weights, dtype=np.float64)
        return w / w.sum()


def sample_transforms(policy: EotPolicy, iteration: int) -> list[TransformSpec]:
    """Deterministic draw for one iteration: m specs, composed left to right."""
    rng = np.random.default_rng([abs(int(policy.seed)), int(iteration)])
    probs = policy.probabilities()
    picks = rng.choice(len(policy.candidates), size=policy.per_iteration, p=probs)
    return [policy.candidates[int(i)].with_seed(rng.integers(0, 2**63 - 1))
            for i in picks]


def default_eot_policy(seed: int = 0, per_iteration: int = 1) -> EotPolicy:
    """The five-kind robust-optimization set at mild severities."""
    return EotPolicy(
        candidates=(
            TransformSpec("gaussian_blur", kernel_size=3),
            TransformSpec("gaussian_noise", noise_sigma=5.0),
            TransformSpec("resize_restore", scale=0.8),
            TransformSpec("crop_restore", crop_fraction=0.9),
            TransformSpec("occlusion", occlusion_fraction=0.1),
        ),
        per_iteration=per_iteration,
        seed=seed,
    )


def evaluation_operations() -> list[TransformSpec]:
    """Post-processing severities used by the robustness sweep."""
    return [
        TransformSpec("gaussian_blur", kernel_size=3),
        TransformSpec("gaussian_blur", kernel_size=5),
        TransformSpec("gaussian_noise", noise_sigma=5.0),
        TransformSpec("gaussian_noise", noise_sigma=10.0),
        TransformSpec("occlusion", occlusion_fraction=0.1),
        TransformSpec("resize_restore", scale=0.8),
        TransformSpec("crop_restore", crop_fraction=0.9),
    ]
