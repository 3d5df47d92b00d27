"""Desk-scale attacker simulation.

The attacker fine-tunes a rank-r additive update on the frozen encoder's
projector plus a linear softmax head over pooled unit embeddings, on the
released (possibly protected) train split, then is scored by identity
classification accuracy on clean test images - the analog of an identity
attack success rate.

Also home to the synthetic identity dataset: seeded smooth color/texture
signatures per identity with mild per-image variation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as ts
from .encoder import EncoderConfig, EncoderParams, extract_patches
from .imageio import Image, load_image, save_image
from .manifest import DatasetManifest, ManifestEntry, write_manifest
from .objective import ObjectiveConfig
from .pgd import PgdConfig
from .pipeline import protect_dataset, protected_name, selection_order
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticIdentityConfig:
    n_identities: int = 10
    images_per_identity: int = 25
    train_per_identity: int = 20
    image_size: int = 32
    grid_cells: int = 6              # coarse signature grid per channel
    common_amplitude: float = 0.2    # dataset-wide structure shared by all
                                     # identities (photos of one domain look
                                     # alike); gives clean embeddings a
                                     # dominant shared direction
    amplitude: float = 0.11          # identity-specific contrast on top
    brightness_jitter: float = 0.1
    shift_jitter: int = 3            # max pattern translation, pixels
    noise_sigma: float = 0.01        # per-pixel additive noise, [0,1] units

    def __post_init__(self):
        if not 0 < self.train_per_identity < self.images_per_identity:
            raise ValueError("need at least one train and one test image per identity")
        if self.n_identities < 2:
            raise ValueError("need at least two identities")


def _upsample_bilinear(coarse: np.ndarray, size: int) -> np.ndarray:
    """Separable linear interpolation of a (g, g, 3) grid to (size, size, 3)."""
    g = coarse.shape[0]
    src = np.linspace(0.0, g - 1.0, size)
    rows = np.empty((size, g, 3))
    for c in range(3):
        for j in range(g):
            rows[:, j, c] = np.interp(src, np.arange(g), coarse[:, j, c])
    out = np.empty((size, size, 3))
    for c in range(3):
        for i in range(size):
            out[i, :, c] = np.interp(src, np.arange(g), rows[i, :, c])
    return out


def _identity_pattern(cfg: SyntheticIdentityConfig, seed: int, ident: int) -> np.ndarray:
    """Per-identity signature: a smooth, position-anchored random field.

    One dataset-wide field is shared by every identity, with a smaller
    identity-specific deviation on top. Rendered larger than the target so
    per-image crops can translate. The layout is anchored (not periodic),
    so token-pooled features keep an identity-specific mean instead of
    averaging out.
    """
    g = cfg.grid_cells
    common_rng = np.random.default_rng([abs(int(seed)), 2])
    coarse = 0.5 + common_rng.uniform(-cfg.common_amplitude, cfg.common_amplitude,
                                      size=(g, g, 3))
    rng = np.random.default_rng([abs(int(seed)), 3, ident])
    coarse = coarse + rng.uniform(-cfg.amplitude, cfg.amplitude, size=(g, g, 3))
    margin = 2 * cfg.shift_jitter
    return _upsample_bilinear(coarse, cfg.image_size + margin)


def _render_identity_image(cfg: SyntheticIdentityConfig, seed: int,
                           ident: int, index: int) -> Image:
    field = _identity_pattern(cfg, seed, ident)
    s = cfg.image_size
    rng = np.random.default_rng([abs(int(seed)), 4, ident, index])
    dx, dy = rng.integers(0, 2 * cfg.shift_jitter + 1, size=2)
    brightness = rng.uniform(1.0 - cfg.brightness_jitter, 1.0 + cfg.brightness_jitter)
    px = field[dy:dy + s, dx:dx + s, :] * brightness
    px = px + rng.normal(0.0, cfg.noise_sigma, size=px.shape)
    return Image(np.clip(px, 0.0, 1.0))


def generate_synthetic_dataset(cfg: SyntheticIdentityConfig, seed: int,
                               out_dir) -> DatasetManifest:
    """Write the toy identity dataset and its manifest; fully seeded."""
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ident in range(cfg.n_identities):
        label = f"id{ident:02d}"
        for j in range(cfg.images_per_identity):
            name = f"{label}_im{j:02d}.png"
            save_image(_render_identity_image(cfg, seed, ident, j), images_dir / name)
            entries.append(ManifestEntry(
                path=f"images/{name}",
                caption=f"snapshot {j:02d} of subject {label}",
                identity=label,
                split="train" if j < cfg.train_per_identity else "test"))
    manifest = DatasetManifest(root=out_dir, entries=entries)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


# ---------------------------------------------------------------------------
# attacker


@dataclass(frozen=True)
class ThreatSimConfig:
    rank: int = 4
    learning_rate: float = 3.0
    epochs: int = 3000
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.rank < 1 or self.learning_rate <= 0 or self.epochs < 1:
            raise ValueError("rank, learning_rate and epochs must be positive")


@dataclass
class AttackerModel:
    classes: list[str]
    adapter_a: np.ndarray   # (encoder_width, rank)
    adapter_b: np.ndarray   # (rank, embed_dim)
    head_w: np.ndarray      # (embed_dim, n_classes)
    head_b: np.ndarray      # (1, n_classes)
    train_accuracy: float
    final_loss: float


@dataclass
class AttackReport:
    train_accuracy: float      # percent
    test_accuracy: float       # percent; the identity-attack success analog
    confusion: dict[str, dict[str, int]]
    protection_ratio: float | None = None


def _frozen_tokens(params: EncoderParams, img: Image) -> np.ndarray:
    """First-layer token features; constant because the base is frozen.

    Uses the same centered-patch path as ``embed``.
    """
    patches = extract_patches(Tensor(img.pixels), params.config).data
    return np.tanh(patches @ params.w_patch + params.b_patch)


def _pooled_logits(params: EncoderParams, model_w2: np.ndarray, h1: np.ndarray,
                   head_w: np.ndarray, head_b: np.ndarray) -> np.ndarray:
    z = h1 @ model_w2 + params.b_proj
    pooled = z.mean(axis=0)
    pooled = pooled / np.linalg.norm(pooled)
    return pooled @ head_w + head_b[0]


def train_attacker(manifest: DatasetManifest, params: EncoderParams,
                   cfg: ThreatSimConfig) -> AttackerModel:
    """Full-batch gradient descent on softmax cross-entropy."""
    d_e, d_out = params.config.encoder_width, params.config.embed_dim
    if cfg.rank > min(d_e, d_out):
        raise ValueError(f"rank {cfg.rank} exceeds projector width {min(d_e, d_out)}")
    train = manifest.train_entries()
    if not train:
        raise ValueError("train split is empty")
    test_paths = {e.path for e in manifest.test_entries()}
    assert not test_paths & {e.path for e in train}, "test leaked into training"

    classes = manifest.identities()
    index = {c: i for i, c in enumerate(classes)}
    n, l, c = len(train), params.config.tokens, len(classes)

    h1 = np.concatenate([_frozen_tokens(params, load_image(manifest.image_path(e)))
                         for e in train], axis=0)          # (n*l, d_e)
    onehot = np.zeros((n, c))
    for i, e in enumerate(train):
        onehot[i, index[e.identity]] = 1.0

    rng = np.random.default_rng([abs(int(cfg.seed)), 5])
    a = ts.leaf(rng.uniform(-1, 1, size=(d_e, cfg.rank)) / math.sqrt(cfg.rank),
                requires_grad=True)
    b = ts.leaf(np.zeros((cfg.rank, d_out)), requires_grad=True)
    head_w = ts.leaf(rng.uniform(-cfg.init_scale, cfg.init_scale, size=(d_out, c)),
                     requires_grad=True)
    head_b = ts.leaf(np.zeros((1, c)), requires_grad=True)

    h1_t = ts.constant(h1)
    w2_t = ts.constant(params.w_proj)
    b2_tile = ts.constant(np.tile(params.b_proj, (n * l, 1)))
    onehot_t = onehot
    ones_n1 = ts.constant(np.ones((n, 1)))
    ones_1d = ts.constant(np.ones((1, d_out)))
    inv_ones = ts.constant(np.ones(n))

    loss_value = math.nan
    for epoch in range(cfg.epochs):
        w_eff = ts.add(w2_t, ts.matmul(a, b))
        zflat = ts.add(ts.matmul(h1_t, w_eff), b2_tile)
        pooled = ts.tmean(ts.reshape(zflat, (n, l, d_out)), axis=1)
        inv = ts.div(inv_ones, ts.l2norm(pooled, axis=1))
        unit = ts.mul(pooled, ts.matmul(ts.reshape(inv, (n, 1)), ones_1d))
        logits = ts.add(ts.matmul(unit, head_w), ts.matmul(ones_n1, head_b))
        # log-sum-exp with a detached per-row max for stability
        row_max = logits.data.max(axis=1)
        shifted = ts.sub(logits, ts.constant(np.repeat(row_max[:, None], c, axis=1)))
        lse = ts.add(ts.log(ts.tsum(ts.exp(shifted), axis=1)), ts.constant(row_max))
        true_logit = ts.tsum(ts.mask_mul(logits, onehot_t), axis=1)
        loss = ts.scalar_mul(ts.tsum(ts.sub(lse, true_logit)), 1.0 / n)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise RuntimeError(f"attacker training diverged at epoch {epoch}")
        backward(loss)
        for p in (a, b, head_w, head_b):
            p.data = p.data - cfg.learning_rate * p.grad

    model = AttackerModel(classes=classes, adapter_a=a.data, adapter_b=b.data,
                          head_w=head_w.data, head_b=head_b.data,
                          train_accuracy=0.0, final_loss=loss_value)
    model.train_accuracy = _accuracy(model, manifest, params, train)
    log.debug("attacker trained: loss %.4f, train acc %.1f%%",
              loss_value, model.train_accuracy)
    return model


def _accuracy(model: AttackerModel, manifest: DatasetManifest,
              params: EncoderParams, entries: list[ManifestEntry],
              confusion: dict | None = None) -> float:
    w2 = params.w_proj + model.adapter_a @ model.adapter_b
    correct = 0
    for e in entries:
        h1 = _frozen_tokens(params, load_image(manifest.image_path(e)))
        logits = _pooled_logits(params, w2, h1, model.head_w, model.head_b)
        predicted = model.classes[int(np.argmax(logits))]
        if predicted == e.identity:
            correct += 1
        if confusion is not None:
            row = confusion.setdefault(e.identity, {})
            row[predicted] = row.get(predicted, 0) + 1
    return 100.0 * correct / len(entries) if entries else 0.0


def evaluate_attack(model: AttackerModel, manifest: DatasetManifest,
                    params: EncoderParams,
                    protection_ratio: float | None = None) -> AttackReport:
    """Score on the clean test split only (the backdoor-trigger analog)."""
    confusion: dict[str, dict[str, int]] = {}
    test_acc = _accuracy(model, manifest, params, manifest.test_entries(), confusion)
    train_acc = _accuracy(model, manifest, params, manifest.train_entries())
    return AttackReport(train_accuracy=train_acc, test_accuracy=test_acc,
                        confusion=confusion, protection_ratio=protection_ratio)


def clean_probe_accuracy(manifest: DatasetManifest, params: EncoderParams,
                         cfg: ThreatSimConfig) -> float:
    """Test accuracy of the attacker trained on the clean dataset."""
    model = train_attacker(manifest, params, cfg)
    return evaluate_attack(model, manifest, params).test_accuracy


def generate_distinguishable_dataset(cfg: SyntheticIdentityConfig, seed: int,
                                     out_dir, params: EncoderParams,
                                     attack_cfg: ThreatSimConfig,
                                     min_accuracy: float = 90.0,
                                     max_attempts: int = 5):
    """Generate, then verify identities are separable by a clean-data probe;
    re-seed and regenerate until the probe clears ``min_accuracy``."""
    for attempt in range(max_attempts):
        used_seed = seed + attempt
        manifest = generate_synthetic_dataset(cfg, used_seed, out_dir)
        accuracy = clean_probe_accuracy(manifest, params, attack_cfg)
        if accuracy >= min_accuracy:
            return manifest, used_seed, accuracy
        log.warning("probe accuracy %.1f%% below %.1f%% at seed %d; regenerating",
                    accuracy, min_accuracy, used_seed)
    raise RuntimeError(
        f"no seed in [{seed}, {seed + max_attempts}) yields a {min_accuracy}% probe")


def run_ratio_sweep(manifest: DatasetManifest, ratios: list[float],
                    params: EncoderParams, obj: ObjectiveConfig, pgd_cfg: PgdConfig,
                    attack_cfg: ThreatSimConfig, seed: int, out_dir,
                    workers: int = 1) -> tuple[list[dict], list[str]]:
    """Attack accuracy across protection ratios.

    Selections nest across ratios (same seeded shuffle), so the train split
    is protected once at ratio 1.0 and each ratio reuses its prefix.
    """
    out_dir = Path(out_dir)
    full = protect_dataset(manifest, 1.0, params, obj, pgd_cfg, seed,
                           out_dir / "protected", workers=workers)
    order = selection_order(manifest, seed)
    rows = []
    for ratio in ratios:
        k = int(math.floor(ratio * len(order) + 0.5))
        chosen = set(order[:k])
        entries = []
        for i, e in enumerate(manifest.entries):
            name = Path(e.path).name
            if i in chosen:
                entries.append(ManifestEntry(
                    path=f"images/{protected_name(name)}", caption=e.caption,
                    identity=e.identity, split=e.split, protected=True))
            else:
                entries.append(ManifestEntry(
                    path=f"images/{name}", caption=e.caption,
                    identity=e.identity, split=e.split, protected=False))
        mixed = DatasetManifest(root=full.manifest.root, entries=entries)
        model = train_attacker(mixed, params, attack_cfg)
        report = evaluate_attack(model, mixed, params, protection_ratio=ratio)
        rows.append({
            "ratio": ratio,
            "train_accuracy": report.train_accuracy,
            "test_accuracy": report.test_accuracy,
        })
        log.info("ratio %.1f: train %.1f%%, clean-test %.1f%%",
                 ratio, report.train_accuracy, report.test_accuracy)
    return rows, full.failures
