"""Fixed, seeded patch encoder and projector.

A two-layer map from pixels to an L x D token embedding: non-overlapping
P x P patches are flattened and mean-centered, linearly encoded, squashed
with tanh, then linearly projected. Weights are frozen after init; the
whole path is differentiable with respect to the input pixels.

Patch mean-centering (photometric-offset invariance) matters at this
scale: without it every pre-activation carries a large image-independent
offset that a budget-bounded perturbation cannot move, and the embedding
becomes insensitive to any in-budget attack.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import tensor as ts
from .imageio import Image
from .tensor import Tensor

PARAMS_FORMAT = "imgcloak-encoder-v1"


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    encoder_width: int = 32
    embed_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if min(self.encoder_width, self.embed_dim) < 2 or self.patch_size < 1:
            raise ValueError("encoder widths must be >= 2 and patch_size >= 1")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size ** 2


@dataclass
class EncoderParams:
    """Frozen weights; a deterministic function of (config, seed)."""

    config: EncoderConfig
    w_patch: np.ndarray   # (3*P*P, encoder_width)
    b_patch: np.ndarray   # (encoder_width,)
    w_proj: np.ndarray    # (encoder_width, embed_dim)
    b_proj: np.ndarray    # (embed_dim,)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.w_patch, self.b_patch, self.w_proj, self.b_proj):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(cfg: EncoderConfig) -> EncoderParams:
    """Draw weights from the seeded uniform fan scheme, in a fixed order.

    Biases start at zero (the usual companion of fan-bounded init); a
    nonzero bias would plant a token-independent component in every
    embedding that no budget-bounded perturbation could move.
    """
    rng = np.random.default_rng(cfg.seed)
    d_in, d_e, d_out = cfg.patch_dim, cfg.encoder_width, cfg.embed_dim
    return EncoderParams(
        config=cfg,
        w_patch=_glorot(rng, d_in, d_e, (d_in, d_e)),
        b_patch=np.zeros(d_e),
        w_proj=_glorot(rng, d_e, d_out, (d_e, d_out)),
        b_proj=np.zeros(d_out),
    )


@lru_cache(maxsize=16)
def patch_gather_indices(image_size: int, patch_size: int) -> np.ndarray:
    """Flat pixel indices mapping an HxWx3 image to (tokens, 3*P*P) rows."""
    n = image_size // patch_size
    p = patch_size
    idx = np.empty((n * n, 3 * p * p), dtype=np.intp)
    for pi in range(n):
        for pj in range(n):
            rows = np.arange(pi * p, (pi + 1) * p)
            cols = np.arange(pj * p, (pj + 1) * p)
            flat = ((rows[:, None] * image_size + cols[None, :]) * 3)[:, :, None] + np.arange(3)
            idx[pi * n + pj] = flat.ravel()
    idx.setflags(write=False)
    return idx


def extract_patches(x: Tensor, cfg: EncoderConfig) -> Tensor:
    """Flattened patch rows with each row's mean subtracted."""
    idx = patch_gather_indices(cfg.image_size, cfg.patch_size)
    rows = ts.gather(x, idx, (cfg.tokens, cfg.patch_dim))
    means = ts.reshape(ts.tmean(rows, axis=1), (cfg.tokens, 1))
    return ts.sub(rows, ts.matmul(means, ts.constant(np.ones((1, cfg.patch_dim)))))


def embed(params: EncoderParams, img: Image | Tensor) -> Tensor:
    """Projected token embedding z of shape (tokens, embed_dim).

    Accepts an Image (treated as a constant) or a Tensor already on the
    tape, so gradients flow back to the pixels.
    """
    cfg = params.config
    x = img if isinstance(img, Tensor) else Tensor(img.pixels)
    if x.shape != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(
            f"embed: image shape {x.shape} does not match config "
            f"({cfg.image_size}, {cfg.image_size}, 3)")
    l = cfg.tokens
    patches = extract_patches(x, cfg)
    h1 = ts.tanh(ts.add(ts.matmul(patches, ts.constant(params.w_patch)),
                        ts.constant(np.tile(params.b_patch, (l, 1)))))
    return ts.add(ts.matmul(h1, ts.constant(params.w_proj)),
                  ts.constant(np.tile(params.b_proj, (l, 1))))


def pooled_unit_embedding(z: Tensor | np.ndarray) -> np.ndarray:
    """Token-mean of z, l2-normalized. Analysis-side only (no gradient)."""
    values = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"pooled_unit_embedding: expected LxD, got shape {values.shape}")
    pooled = values.mean(axis=0)
    norm = float(np.linalg.norm(pooled))
    if norm == 0.0:
        raise ValueError("pooled_unit_embedding: degenerate zero pooled vector")
    return pooled / norm


def save_encoder_params(params: EncoderParams, path) -> None:
    """Textual export with a config header; floats round-trip exactly."""
    cfg = params.config
    doc = {
        "format": PARAMS_FORMAT,
        "config": {
            "image_size": cfg.image_size,
            "patch_size": cfg.patch_size,
            "encoder_width": cfg.encoder_width,
            "embed_dim": cfg.embed_dim,
            "seed": cfg.seed,
        },
        "arrays": {
            "w_patch": params.w_patch.ravel().tolist(),
            "b_patch": params.b_patch.ravel().tolist(),
            "w_proj": params.w_proj.ravel().tolist(),
            "b_proj": params.b_proj.ravel().tolist(),
        },
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_encoder_params(path) -> EncoderParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != PARAMS_FORMAT:
        raise ValueError(f"{path}: unknown params format {doc.get('format')!r}")
    cfg = EncoderConfig(**doc["config"])
    arrays = doc["arrays"]
    def arr(name, shape):
        return np.array(arrays[name], dtype=np.float64).reshape(shape)
    return EncoderParams(
        config=cfg,
        w_patch=arr("w_patch", (cfg.patch_dim, cfg.encoder_width)),
        b_patch=arr("b_patch", (cfg.encoder_width,)),
        w_proj=arr("w_proj", (cfg.encoder_width, cfg.embed_dim)),
        b_proj=arr("b_proj", (cfg.embed_dim,)),
    )
