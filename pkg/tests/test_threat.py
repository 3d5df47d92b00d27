from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from imgcloak.encoder import EncoderConfig, init_encoder
from imgcloak.manifest import DatasetManifest, ManifestEntry
from imgcloak.objective import ObjectiveConfig
from imgcloak.pgd import PgdConfig
from imgcloak.threat import (SyntheticIdentityConfig, ThreatSimConfig,
                             clean_probe_accuracy, evaluate_attack,
                             generate_distinguishable_dataset,
                             generate_synthetic_dataset, run_ratio_sweep,
                             train_attacker)

PARAMS = init_encoder(EncoderConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticIdentityConfig(train_per_identity=25)
    with pytest.raises(ValueError):
        SyntheticIdentityConfig(n_identities=1)
    with pytest.raises(ValueError):
        ThreatSimConfig(rank=0)


def test_generation_is_deterministic(tmp_path):
    cfg = SyntheticIdentityConfig(n_identities=3, images_per_identity=4,
                                  train_per_identity=3)
    m1 = generate_synthetic_dataset(cfg, 5, tmp_path / "a")
    m2 = generate_synthetic_dataset(cfg, 5, tmp_path / "b")
    for e1, e2 in zip(m1.entries, m2.entries):
        assert e1.path == e2.path
        assert m1.image_path(e1).read_bytes() == m2.image_path(e2).read_bytes()
    m3 = generate_synthetic_dataset(cfg, 6, tmp_path / "c")
    assert any(m1.image_path(a).read_bytes() != m3.image_path(b).read_bytes()
               for a, b in zip(m1.entries, m3.entries))


def test_default_dataset_matches_benchmark_scale(tmp_path):
    manifest = generate_synthetic_dataset(SyntheticIdentityConfig(), 0, tmp_path)
    assert len(manifest.entries) == 250
    assert len(manifest.identities()) == 10
    assert len(manifest.train_entries()) == 200
    assert len(manifest.test_entries()) == 50
    manifest.validate()


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    cfg = SyntheticIdentityConfig(n_identities=4, images_per_identity=6,
                                  train_per_identity=4)
    return generate_synthetic_dataset(cfg, 0, tmp_path_factory.mktemp("threat"))


def test_rank_limited_by_projector(toy):
    with pytest.raises(ValueError, match="rank"):
        train_attacker(toy, PARAMS, ThreatSimConfig(rank=64))


def test_single_identity_is_trivially_learned(tmp_path):
    cfg = SyntheticIdentityConfig(n_identities=2, images_per_identity=4,
                                  train_per_identity=3)
    manifest = generate_synthetic_dataset(cfg, 1, tmp_path)
    solo = DatasetManifest(root=manifest.root, entries=[
        dataclasses.replace(e, identity="only")
        for e in manifest.entries if e.identity == "id00"])
    model = train_attacker(solo, PARAMS, ThreatSimConfig(epochs=5))
    report = evaluate_attack(model, solo, PARAMS)
    assert report.train_accuracy == 100.0
    assert report.test_accuracy == 100.0


def test_clean_probe_beats_ninety_percent(tmp_path):
    manifest = generate_synthetic_dataset(SyntheticIdentityConfig(), 0, tmp_path)
    assert clean_probe_accuracy(manifest, PARAMS, ThreatSimConfig()) >= 90.0


def test_permuted_labels_fall_to_chance(tmp_path):
    manifest = generate_synthetic_dataset(SyntheticIdentityConfig(), 0, tmp_path)
    rng = np.random.default_rng(0)
    idents = [e.identity for e in manifest.entries]
    shuffled = DatasetManifest(root=manifest.root, entries=[
        dataclasses.replace(e, identity=idents[int(j)])
        for e, j in zip(manifest.entries, rng.permutation(len(idents)))])
    model = train_attacker(shuffled, PARAMS, ThreatSimConfig())
    report = evaluate_attack(model, shuffled, PARAMS)
    assert report.test_accuracy <= 20.0  # 10% chance + 10-point allowance


def test_training_is_deterministic_and_base_stays_frozen(toy):
    before = PARAMS.fingerprint()
    cfg = ThreatSimConfig(epochs=50)
    m1 = train_attacker(toy, PARAMS, cfg)
    m2 = train_attacker(toy, PARAMS, cfg)
    assert PARAMS.fingerprint() == before
    assert m1.adapter_a.tobytes() == m2.adapter_a.tobytes()
    assert m1.head_w.tobytes() == m2.head_w.tobytes()
    assert m1.final_loss == m2.final_loss


def test_confusion_counts_cover_test_split(toy):
    model = train_attacker(toy, PARAMS, ThreatSimConfig(epochs=200))
    report = evaluate_attack(model, toy, PARAMS, protection_ratio=0.0)
    total = sum(sum(row.values()) for row in report.confusion.values())
    assert total == len(toy.test_entries())
    assert report.protection_ratio == 0.0
    assert 0.0 <= report.test_accuracy <= 100.0


def test_probe_regenerates_until_accuracy(tmp_path):
    cfg = SyntheticIdentityConfig(n_identities=4, images_per_identity=6,
                                  train_per_identity=4)
    manifest, used_seed, acc = generate_distinguishable_dataset(
        cfg, 0, tmp_path, PARAMS, ThreatSimConfig(), min_accuracy=50.0)
    assert used_seed >= 0
    assert acc >= 50.0
    manifest.validate()


def test_ratio_sweep_trend_on_small_set(toy, tmp_path):
    rows, failures = run_ratio_sweep(
        toy, [0.0, 1.0], PARAMS, ObjectiveConfig(),
        PgdConfig(iterations=100, trace_every=100), ThreatSimConfig(),
        seed=1, out_dir=tmp_path)
    assert not failures
    assert [r["ratio"] for r in rows] == [0.0, 1.0]
    assert rows[1]["test_accuracy"] < rows[0]["test_accuracy"]
