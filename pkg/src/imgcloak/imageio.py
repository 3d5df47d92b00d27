"""Image loading, saving and perceptual-budget metrics.

Pixels live in [0, 1] as float64 with the exact byte mapping v/255. PNG
(8-bit RGB, no alpha) is the release format; binary PPM (P6, maxval 255)
is kept for dependency-free fixtures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PilImage


class ImageFormatError(ValueError):
    """File is not a decodable 8-bit RGB image."""


@dataclass
class Image:
    """An H x W x 3 pixel grid in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ImageFormatError(f"expected HxWx3 pixels, got shape {px.shape}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ImageFormatError("pixels outside [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class Perturbation:
    """A bounded additive change to one image: max|delta| <= epsilon."""

    delta: np.ndarray
    epsilon: float

    def __post_init__(self):
        self.delta = np.ascontiguousarray(self.delta, dtype=np.float64)
        peak = float(np.max(np.abs(self.delta))) if self.delta.size else 0.0
        if peak > self.epsilon:
            raise ValueError(f"perturbation linf {peak:.6g} exceeds budget {self.epsilon:.6g}")

    @classmethod
    def between(cls, original: Image, modified: Image, epsilon: float) -> "Perturbation":
        return cls(modified.pixels - original.pixels, epsilon)


def load_image(path) -> Image:
    """Decode an 8-bit RGB PNG or binary PPM; pixel = byte / 255 exactly."""
    path = Path(path)
    if not path.exists():
        raise ImageFormatError(f"no such image: {path}")
    if path.suffix.lower() == ".ppm":
        arr = _read_ppm(path)
    else:
        try:
            with PilImage.open(path) as im:
                if im.mode != "RGB":
                    raise ImageFormatError(f"{path}: expected RGB, got mode {im.mode}")
                arr = np.asarray(im, dtype=np.uint8)
        except ImageFormatError:
            raise
        except Exception as exc:
            raise ImageFormatError(f"{path}: cannot decode ({exc})") from exc
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageFormatError(f"{path}: expected 3 channels, got shape {arr.shape}")
    return Image(arr.astype(np.float64) / 255.0)


def save_image(img: Image, path) -> None:
    """Write 8-bit bytes with round-half-up quantization."""
    path = Path(path)
    data = np.floor(img.pixels * 255.0 + 0.5).astype(np.uint8)
    if path.suffix.lower() == ".ppm":
        _write_ppm(path, data)
        return
    PilImage.fromarray(data, mode="RGB").save(path, format="PNG")


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    # header: magic, width, height, maxval as whitespace/comment-separated tokens
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4 and i < len(raw):
        if raw[i:i + 1].isspace():
            i += 1
        elif raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
        else:
            j = i
            while j < len(raw) and not raw[j:j + 1].isspace():
                j += 1
            tokens.append(raw[i:j])
            i = j
    if len(tokens) < 4 or tokens[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ImageFormatError(f"{path}: PPM maxval must be 255, got {maxval}")
    i += 1  # single whitespace byte after maxval
    body = raw[i:i + w * h * 3]
    if len(body) != w * h * 3:
        raise ImageFormatError(f"{path}: truncated PPM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def _write_ppm(path: Path, data: np.ndarray) -> None:
    h, w = data.shape[0], data.shape[1]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def linf_distance(a: Image, b: Image) -> float:
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"linf_distance: shapes {a.pixels.shape} vs {b.pixels.shape}")
    return float(np.max(np.abs(a.pixels - b.pixels)))


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"psnr: shapes {a.pixels.shape} vs {b.pixels.shape}")
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
