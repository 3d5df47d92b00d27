"""Dataset-level driver: batch protection, feature-shift statistics and
post-processing robustness sweeps.

Protection writes protected files alongside copies of the originals
(``<stem>_protected<ext>`` next to ``<stem><ext>``), so evaluation can
always recover the clean counterpart of a protected image.
"""

from __future__ import annotations

import json
import logging
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderParams, embed, pooled_unit_embedding
from .imageio import Image, load_image, psnr, save_image
from .manifest import DatasetManifest, ManifestEntry, mark_protected, write_manifest
from .objective import ObjectiveConfig, cos_sim
from .pgd import PgdConfig, protect_image
from .transforms import TransformSpec, apply_transform

log = logging.getLogger(__name__)

PROTECTED_SUFFIX = "_protected"


def _derived_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence(tuple(abs(int(e)) for e in entropy))
               .generate_state(1)[0])


def selection_order(manifest: DatasetManifest, seed: int) -> list[int]:
    """Seeded shuffle of train-entry indices; ratio r protects the first
    round(r * n) of this order, so selections nest across ratios."""
    train_idx = [i for i, e in enumerate(manifest.entries) if e.split == "train"]
    rng = np.random.default_rng([abs(int(seed)), 1])
    return [train_idx[int(j)] for j in rng.permutation(len(train_idx))]


def protected_name(name: str) -> str:
    p = Path(name)
    return f"{p.stem}{PROTECTED_SUFFIX}{p.suffix}"


def original_image_path(manifest: DatasetManifest, entry: ManifestEntry) -> Path:
    """The clean counterpart of an entry (identity for unprotected ones)."""
    p = manifest.image_path(entry)
    if entry.protected and p.stem.endswith(PROTECTED_SUFFIX):
        return p.with_name(p.stem[: -len(PROTECTED_SUFFIX)] + p.suffix)
    return p


def _protect_entry(args):
    index, src, dst, params, obj, cfg = args
    try:
        original = load_image(src)
        result = protect_image(original, params, obj, cfg)
        save_image(result.image, dst)
        diag = {
            "path": Path(dst).name,
            "source": Path(src).name,
            "iterations": result.iterations,
            "initial_loss": result.initial_loss,
            "final_loss": result.final_loss,
            "initial_cos_base": result.initial_cos_base,
            "final_cos_base": result.final_cos_base,
            "final_cos_target": result.final_cos_target,
            "linf": result.linf,
            "max_linf_seen": result.max_linf_seen,
            "psnr": psnr(original, result.image),
        }
        return index, diag, None
    except Exception as exc:  # collected, the batch keeps going
        return index, None, f"{src}: {exc}"


@dataclass
class ProtectOutcome:
    manifest: DatasetManifest
    diagnostics: list[dict]
    failures: list[str]


def protect_dataset(manifest: DatasetManifest, ratio: float, params: EncoderParams,
                    obj: ObjectiveConfig, cfg: PgdConfig, seed: int,
                    out_dir, workers: int = 1) -> ProtectOutcome:
    """Protect a seeded fraction of the train split into ``out_dir``.

    Per-image optimization seeds derive from (seed, entry index), so the
    protected file for an entry is the same at every ratio that selects it.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    manifest.validate()
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    names = [Path(e.path).name for e in manifest.entries]
    if len(set(names)) != len(names):
        raise ValueError("entry basenames must be unique within a dataset")

    order = selection_order(manifest, seed)
    k = int(math.floor(ratio * len(order) + 0.5))
    selected = set(order[:k])

    results: dict[int, dict] = {}
    failures: list[str] = []

    # clean copies for every entry; protected files are written alongside
    broken: set[int] = set()
    for i, e in enumerate(manifest.entries):
        try:
            shutil.copyfile(manifest.image_path(e), images_dir / Path(e.path).name)
        except OSError as exc:
            broken.add(i)
            failures.append(f"{manifest.image_path(e)}: {exc}")
            log.error("copy failed: %s", failures[-1])
    selected -= broken

    jobs = []
    for i in sorted(selected):
        e = manifest.entries[i]
        jobs.append((i,
                     str(manifest.image_path(e)),
                     str(images_dir / protected_name(Path(e.path).name)),
                     params, obj, cfg.with_seed(_derived_seed(seed, i))))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_protect_entry, jobs))
    else:
        outcomes = [_protect_entry(j) for j in jobs]
    for index, diag, error in outcomes:
        if error is not None:
            failures.append(error)
            log.error("protection failed: %s", error)
        else:
            results[index] = diag

    entries = []
    for i, e in enumerate(manifest.entries):
        if i in broken:
            continue
        if i in selected and i in results:
            entries.append(mark_protected(
                e, f"images/{protected_name(Path(e.path).name)}"))
        else:
            entries.append(ManifestEntry(
                path=f"images/{Path(e.path).name}", caption=e.caption,
                identity=e.identity, split=e.split, protected=False))
    out_manifest = DatasetManifest(root=out_dir, entries=entries)
    write_manifest(out_manifest, out_dir / "manifest.csv", validate=not failures)

    diagnostics = [results[i] for i in sorted(results)]
    with open(out_dir / "diagnostics.jsonl", "w", encoding="utf-8") as fh:
        for diag in diagnostics:
            fh.write(json.dumps(diag, sort_keys=True) + "\n")
    return ProtectOutcome(out_manifest, diagnostics, failures)


# ---------------------------------------------------------------------------
# feature-shift statistics


@dataclass
class GfdsStats:
    n_clean: int
    n_protected: int
    centroid_cos: float
    centroid_l2: float
    mean_cross_cos: float
    intra_clean_std: float
    separation_ratio: float


@dataclass
class PcaPoint:
    path: str
    identity: str
    protected: bool
    pc1: float
    pc2: float


@dataclass
class GfdsReport:
    overall: GfdsStats
    per_identity: dict[str, GfdsStats]
    mixed_train_centroid_l2: float
    clean_reference: str       # which split supplied the clean group
    points: list[PcaPoint]


def _group_stats(clean: np.ndarray, prot: np.ndarray) -> GfdsStats:
    if len(clean) < 2 or len(prot) < 2:
        raise ValueError("need at least 2 samples per group for statistics")
    c_clean = clean.mean(axis=0)
    c_prot = prot.mean(axis=0)
    displacement = float(np.linalg.norm(c_prot - c_clean))
    intra = float(np.sqrt(np.mean(np.sum((clean - c_clean) ** 2, axis=1))))
    return GfdsStats(
        n_clean=len(clean),
        n_protected=len(prot),
        centroid_cos=cos_sim(c_clean, c_prot),
        centroid_l2=displacement,
        mean_cross_cos=float(np.mean(clean @ prot.T)),
        intra_clean_std=intra,
        separation_ratio=displacement / intra if intra > 0 else math.inf,
    )


def _power_iteration_pca(x: np.ndarray, components: int = 2,
                         iters: int = 100, seed: int = 0) -> np.ndarray:
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(len(x) - 1, 1)
    rng = np.random.default_rng([abs(int(seed)), 2])
    basis: list[np.ndarray] = []
    for c in range(components):
        v = rng.normal(size=cov.shape[0])
        for prev in basis:
            v -= (v @ prev) * prev
        v /= np.linalg.norm(v)
        for _ in range(iters):
            v = cov @ v
            for prev in basis:
                v -= (v @ prev) * prev
            norm = np.linalg.norm(v)
            if norm < 1e-300:
                v = np.zeros(cov.shape[0])
                v[c] = 1.0
                break
            v /= norm
        j = int(np.argmax(np.abs(v)))
        if v[j] < 0.0:
            v = -v
        basis.append(v)
    return centered @ np.stack(basis, axis=1)


def _unit_embedding(params: EncoderParams, path: Path) -> np.ndarray:
    return pooled_unit_embedding(embed(params, load_image(path)))


def compute_gfds(manifest: DatasetManifest, params: EncoderParams) -> GfdsReport:
    """Pooled-unit-embedding statistics of protected vs clean images.

    The clean group comes from unprotected train entries when present,
    falling back to the (always clean) test split at full protection.
    """
    protected = [e for e in manifest.entries if e.protected]
    clean_train = [e for e in manifest.entries
                   if e.split == "train" and not e.protected]
    if len(clean_train) >= 2:
        clean, clean_reference = clean_train, "train"
    else:
        clean, clean_reference = manifest.test_entries(), "test"
    if len(protected) < 2 or len(clean) < 2:
        raise ValueError("need >= 2 protected and >= 2 clean images")

    emb = {e.path: _unit_embedding(params, manifest.image_path(e))
           for e in manifest.entries}
    prot_v = np.stack([emb[e.path] for e in protected])
    clean_v = np.stack([emb[e.path] for e in clean])

    overall = _group_stats(clean_v, prot_v)
    per_identity: dict[str, GfdsStats] = {}
    for ident in manifest.identities():
        pv = [emb[e.path] for e in protected if e.identity == ident]
        cv = [emb[e.path] for e in clean if e.identity == ident]
        if len(pv) >= 2 and len(cv) >= 2:
            per_identity[ident] = _group_stats(np.stack(cv), np.stack(pv))

    train_v = np.stack([emb[e.path] for e in manifest.train_entries()])
    mixed_l2 = float(np.linalg.norm(train_v.mean(axis=0) - clean_v.mean(axis=0)))

    coords = _power_iteration_pca(np.vstack([clean_v, prot_v]))
    points = []
    for i, e in enumerate(clean + protected):
        points.append(PcaPoint(path=e.path, identity=e.identity,
                               protected=e.protected,
                               pc1=float(coords[i, 0]), pc2=float(coords[i, 1])))
    return GfdsReport(overall=overall, per_identity=per_identity,
                      mixed_train_centroid_l2=mixed_l2,
                      clean_reference=clean_reference, points=points)


def _spec_params(spec: TransformSpec) -> str:
    if spec.kind == "gaussian_blur":
        return f"kernel={spec.kernel_size},sigma={spec.effective_sigma:g}"
    if spec.kind == "gaussian_noise":
        return f"sigma={spec.noise_sigma:g}/255"
    if spec.kind == "resize_restore":
        return f"scale={spec.scale:g}"
    if spec.kind == "crop_restore":
        return f"fraction={spec.crop_fraction:g}"
    if spec.kind == "occlusion":
        return f"fraction={spec.occlusion_fraction:g}"
    return ""


def robustness_sweep(manifest: DatasetManifest, params: EncoderParams,
                     ops: list[TransformSpec], seed: int = 0) -> list[dict]:
    """Apply each post-processing op to the protected images (no
    re-optimization) and recompute the shift statistics."""
    protected = [e for e in manifest.entries if e.protected]
    if not protected:
        raise ValueError("robustness sweep needs protected entries")
    clean_train = [e for e in manifest.entries
                   if e.split == "train" and not e.protected]
    clean = clean_train if len(clean_train) >= 2 else manifest.test_entries()

    clean_units = np.stack([_unit_embedding(params, manifest.image_path(e))
                            for e in clean])
    base_z = [embed(params, load_image(original_image_path(manifest, e))).data
              for e in protected]
    prot_imgs = [load_image(manifest.image_path(e)) for e in protected]

    rows = []
    for op_index, spec in enumerate(ops):
        post_units = []
        cosines = []
        for i, img in enumerate(prot_imgs):
            post = apply_transform(spec.with_seed(_derived_seed(seed, op_index, i)), img)
            z_post = embed(params, post)
            cosines.append(cos_sim(z_post.data, base_z[i]))
            post_units.append(pooled_unit_embedding(z_post))
        stats = _group_stats(clean_units, np.stack(post_units))
        rows.append({
            "operation": spec.label(),
            "params": _spec_params(spec),
            "mean_cos_to_clean": float(np.mean(cosines)),
            "separation_ratio": stats.separation_ratio,
        })
    return rows


# ---------------------------------------------------------------------------
# report files


def _finite(v: float):
    return v if math.isfinite(v) else repr(v)


def gfds_to_dict(report: GfdsReport) -> dict:
    def stats_dict(s: GfdsStats) -> dict:
        return {k: _finite(v) if isinstance(v, float) else v
                for k, v in vars(s).items()}
    return {
        "overall": stats_dict(report.overall),
        "per_identity": {k: stats_dict(v) for k, v in sorted(report.per_identity.items())},
        "mixed_train_centroid_l2": report.mixed_train_centroid_l2,
        "clean_reference": report.clean_reference,
    }


def write_gfds_report(report: GfdsReport, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "gfds.json").write_text(
        json.dumps(gfds_to_dict(report), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    with open(out_dir / "gfds.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("group,n_clean,n_protected,centroid_cos,centroid_l2,"
                 "mean_cross_cos,intra_clean_std,separation_ratio\n")
        def row(label: str, s: GfdsStats) -> str:
            return (f"{label},{s.n_clean},{s.n_protected},{s.centroid_cos!r},"
                    f"{s.centroid_l2!r},{s.mean_cross_cos!r},"
                    f"{s.intra_clean_std!r},{s.separation_ratio!r}\n")
        fh.write(row("overall", report.overall))
        for ident, s in sorted(report.per_identity.items()):
            fh.write(row(ident, s))
    with open(out_dir / "pca_coords.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("path,identity,protected,pc1,pc2\n")
        for p in report.points:
            flag = "true" if p.protected else "false"
            fh.write(f"{p.path},{p.identity},{flag},{p.pc1!r},{p.pc2!r}\n")


def write_robustness_rows(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("operation,params,mean_cos_to_clean,separation_ratio\n")
        for r in rows:
            fh.write(f"{r['operation']},\"{r['params']}\","
                     f"{r['mean_cos_to_clean']!r},{r['separation_ratio']!r}\n")
