"""Command-line entry point.

Commands: gen-data, protect, evaluate, simulate-attack, inspect.
Exit codes: 0 success, 1 partial/runtime failure, 2 usage or config error.
Log level comes from the IMGCLOAK_LOG environment variable only.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ROLE_DATA, ROLE_EVAL, ROLE_SELECTION, RunConfig
from .encoder import embed, init_encoder, save_encoder_params
from .imageio import linf_distance, load_image, psnr
from .manifest import read_manifest
from .objective import cos_sim
from .pipeline import compute_gfds, protect_dataset, robustness_sweep, write_gfds_report, write_robustness_rows
from .threat import (generate_distinguishable_dataset,
                     generate_synthetic_dataset, run_ratio_sweep)

log = logging.getLogger(__name__)

_OVERRIDES = [
    ("seed", "seed"),
    ("ratio", "protect.ratio"),
    ("workers", "workers"),
    ("out", "output.dir"),
    ("epsilon", "pgd.epsilon"),
    ("alpha", "objective.alpha"),
    ("beta", "objective.beta"),
    ("iters", "pgd.iterations"),
]


def _configure_logging():
    level = os.environ.get("IMGCLOAK_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for flag, key in _OVERRIDES:
        value = getattr(args, flag, None)
        if value is not None:
            cfg.override(key, str(value))
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


def _cmd_gen_data(args, cfg: RunConfig) -> int:
    out_dir = Path(cfg["dataset.root"])
    data_cfg = cfg.data_config()
    seed = cfg.seed_for(ROLE_DATA, "data.seed")
    if cfg["data.probe"]:
        params = init_encoder(cfg.encoder_config())
        manifest, used_seed, accuracy = generate_distinguishable_dataset(
            data_cfg, seed, out_dir, params, cfg.attack_config(),
            min_accuracy=cfg["data.min_probe_accuracy"])
        cfg.override("data.seed", str(used_seed))
        print(f"generated {len(manifest.entries)} images under {out_dir} "
              f"(seed {used_seed}, clean probe {accuracy:.1f}%)")
    else:
        manifest = generate_synthetic_dataset(data_cfg, seed, out_dir)
        cfg.override("data.seed", str(seed))
        print(f"generated {len(manifest.entries)} images under {out_dir} "
              f"(seed {seed}, probe skipped)")
    _echo_config(cfg, out_dir)
    return 0


def _cmd_protect(args, cfg: RunConfig) -> int:
    manifest = read_manifest(cfg.manifest_path())
    out_dir = Path(cfg["output.dir"]) / "protect"
    out_dir.mkdir(parents=True, exist_ok=True)
    params = init_encoder(cfg.encoder_config())
    save_encoder_params(params, out_dir / "encoder_params.json")
    outcome = protect_dataset(
        manifest, cfg["protect.ratio"], params, cfg.objective_config(),
        cfg.pgd_config(), seed=cfg.seed_for(ROLE_SELECTION),
        out_dir=out_dir, workers=cfg["workers"])
    _echo_config(cfg, out_dir)
    n_protected = sum(e.protected for e in outcome.manifest.entries)
    budget = max((d["linf"] for d in outcome.diagnostics), default=0.0)
    print(f"protected {n_protected}/{len(manifest.train_entries())} train images "
          f"-> {out_dir} (max in-optimizer linf {budget:.6f})")
    for failure in outcome.failures:
        print(f"FAILED: {failure}", file=sys.stderr)
    return 1 if outcome.failures else 0


def _cmd_evaluate(args, cfg: RunConfig) -> int:
    manifest = read_manifest(cfg.protected_manifest_path())
    out_dir = Path(cfg["output.dir"]) / "evaluate"
    out_dir.mkdir(parents=True, exist_ok=True)
    params = init_encoder(cfg.encoder_config())
    report = compute_gfds(manifest, params)
    write_gfds_report(report, out_dir)
    rows = robustness_sweep(manifest, params, cfg.evaluation_specs(),
                            seed=cfg.seed_for(ROLE_EVAL, "evaluate.seed"))
    write_robustness_rows(rows, out_dir / "robustness.csv")
    from . import figures
    figures.gfds_scatter(report, out_dir / "gfds_scatter")
    figures.robustness_chart(rows, report.overall.separation_ratio,
                             out_dir / "robustness")
    _echo_config(cfg, out_dir)
    o = report.overall
    print(f"separation ratio {o.separation_ratio:.3f} "
          f"(centroid cos {o.centroid_cos:+.3f}, clean ref: {report.clean_reference}); "
          f"{len(rows)} robustness rows -> {out_dir}")
    return 0


def _cmd_simulate_attack(args, cfg: RunConfig) -> int:
    manifest_path = cfg.manifest_path()
    if not manifest_path.exists():
        log.info("dataset missing, generating on demand at %s", cfg["dataset.root"])
        generate_synthetic_dataset(cfg.data_config(),
                                   cfg.seed_for(ROLE_DATA, "data.seed"),
                                   Path(cfg["dataset.root"]))
    manifest = read_manifest(manifest_path)
    out_dir = Path(cfg["output.dir"]) / "attack"
    out_dir.mkdir(parents=True, exist_ok=True)
    params = init_encoder(cfg.encoder_config())
    rows, failures = run_ratio_sweep(
        manifest, cfg.attack_ratios(), params, cfg.objective_config(),
        cfg.pgd_config(), cfg.attack_config(),
        seed=cfg.seed_for(ROLE_SELECTION), out_dir=out_dir,
        workers=cfg["workers"])
    with open(out_dir / "attack_sweep.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("ratio,train_accuracy,test_accuracy\n")
        for r in rows:
            fh.write(f"{r['ratio']!r},{r['train_accuracy']!r},{r['test_accuracy']!r}\n")
    (out_dir / "attack_sweep.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    from . import figures
    figures.ratio_curve(rows, out_dir / "attack_sweep")
    _echo_config(cfg, out_dir)
    for r in rows:
        print(f"ratio {r['ratio']:.2f}: clean-test accuracy {r['test_accuracy']:.1f}%")
    for failure in failures:
        print(f"FAILED: {failure}", file=sys.stderr)
    return 1 if failures else 0


def _cmd_inspect(args, cfg: RunConfig) -> int:
    a = load_image(args.image_a)
    b = load_image(args.image_b)
    if a.pixels.shape != b.pixels.shape:
        print(f"size mismatch: {a.pixels.shape} vs {b.pixels.shape}",
              file=sys.stderr)
        return 2
    params = init_encoder(cfg.encoder_config())
    try:
        cos = repr(cos_sim(embed(params, a).data, embed(params, b).data))
    except ValueError:
        cos = "nan (degenerate embedding)"
    print(f"linf      {linf_distance(a, b)!r}")
    print(f"psnr_db   {psnr(a, b)!r}")
    print(f"embed_cos {cos}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imgcloak",
        description="Cloak image datasets with imperceptible embedding-space "
                    "perturbations and verify the protection at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ratio=False):
        p.add_argument("--config", help="path to a key = value config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--workers", type=int, help="worker processes")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--epsilon", help="budget override (accepts 8/255)")
        p.add_argument("--alpha", type=float, help="repulsion strength")
        p.add_argument("--beta", type=float, help="attraction weight")
        p.add_argument("--iters", type=int, help="optimizer iterations")
        if ratio:
            p.add_argument("--ratio", type=float, help="protection ratio")

    p = sub.add_parser("gen-data", help="generate the synthetic identity dataset")
    common(p)
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("protect", help="protect a dataset at the configured ratio")
    common(p, ratio=True)
    p.set_defaults(handler=_cmd_protect)

    p = sub.add_parser("evaluate", help="feature-shift report and robustness sweep")
    common(p)
    p.set_defaults(handler=_cmd_evaluate)

    p = sub.add_parser("simulate-attack", help="attacker accuracy across ratios")
    common(p, ratio=True)
    p.set_defaults(handler=_cmd_simulate_attack)

    p = sub.add_parser("inspect", help="compare two images (budget, psnr, embedding)")
    p.add_argument("image_a")
    p.add_argument("image_b")
    common(p)
    p.set_defaults(handler=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        return args.handler(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
