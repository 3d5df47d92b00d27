"""Run configuration: a flat ``key = value`` file with a typed schema.

Lines are ``dotted.key = value`` with ``#`` comments. Budget-like values
accept fractions ("8/255"). CLI flags override file values; unset
per-module seeds derive from the master ``seed`` so one integer pins an
entire run. ``to_text`` emits the fully-resolved form that every command
echoes into its output directory.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .objective import ObjectiveConfig
from .pgd import PgdConfig
from .threat import SyntheticIdentityConfig, ThreatSimConfig
from .transforms import (EotPolicy, TransformSpec, default_eot_policy,
                         evaluation_operations)


class ConfigError(ValueError):
    pass


# role indices for deriving per-module seeds from the master seed
ROLE_ENCODER = 1
ROLE_PGD = 2
ROLE_SELECTION = 3
ROLE_ATTACK = 4
ROLE_DATA = 5
ROLE_EOT = 6
ROLE_EVAL = 7

SCHEMA: dict[str, tuple[str, object]] = {
    "seed": ("int", 0),
    "workers": ("int", 1),
    "output.dir": ("str", "out"),
    "dataset.root": ("str", "data/toy"),
    "dataset.manifest": ("str", ""),
    "dataset.protected_manifest": ("str", ""),
    "encoder.image_size": ("int", 32),
    "encoder.patch_size": ("int", 8),
    "encoder.width": ("int", 32),
    "encoder.embed_dim": ("int", 16),
    "encoder.seed": ("int", -1),
    "objective.alpha": ("float", 10.0),
    "objective.beta": ("float", 1.0),
    "objective.xi": ("float", 1e-8),
    "pgd.epsilon": ("fraction", 8.0 / 255.0),
    "pgd.step_size": ("fraction", 1.0 / 255.0),
    "pgd.iterations": ("int", 1000),
    "pgd.init_sigma": ("fraction", 1.0 / 255.0),
    "pgd.seed": ("int", -1),
    "pgd.trace_every": ("int", 100),
    "eot.enabled": ("bool", False),
    "eot.per_iteration": ("int", 1),
    "eot.seed": ("int", -1),
    "eot.candidates": ("str", ""),
    "protect.ratio": ("float", 1.0),
    "evaluate.operations": ("str", "table2"),
    "evaluate.seed": ("int", -1),
    "attack.rank": ("int", 4),
    "attack.learning_rate": ("float", 3.0),
    "attack.epochs": ("int", 3000),
    "attack.seed": ("int", -1),
    "attack.ratios": ("str", "0,0.2,0.4,0.6,0.8,1.0"),
    "data.identities": ("int", 10),
    "data.images_per_identity": ("int", 25),
    "data.train_per_identity": ("int", 20),
    "data.seed": ("int", -1),
    "data.probe": ("bool", True),
    "data.min_probe_accuracy": ("float", 90.0),
}


def _parse_value(key: str, kind: str, raw: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "fraction":
            if "/" in raw:
                num, den = raw.split("/", 1)
                return float(num) / float(den)
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        return raw
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


_SPEC_RE = re.compile(r"^\s*(\w+)\s*(?:\(([^)]*)\))?\s*(?:@\s*([0-9.eE+-]+))?\s*$")

_FLOAT_FIELDS = {"sigma", "noise_sigma", "scale", "crop_fraction",
                 "occlusion_fraction"}


def parse_transform_list(text: str) -> list[tuple[TransformSpec, float]]:
    """Parse ``kind(field=value,...)@weight; ...`` into specs with weights."""
    out = []
    for chunk in text.split(";"):
        if not chunk.strip():
            continue
        m = _SPEC_RE.match(chunk)
        if not m:
            raise ConfigError(f"cannot parse transform {chunk.strip()!r}")
        kind, params_text, weight = m.groups()
        kwargs = {}
        for pair in (params_text or "").split(","):
            if not pair.strip():
                continue
            if "=" not in pair:
                raise ConfigError(f"transform parameter {pair.strip()!r} "
                                  "must be field=value")
            name, value = (s.strip() for s in pair.split("=", 1))
            if name in _FLOAT_FIELDS:
                kwargs[name] = float(value)
            elif name in ("kernel_size", "seed"):
                kwargs[name] = int(value)
            else:
                raise ConfigError(f"unknown transform field {name!r}")
        try:
            spec = TransformSpec(kind, **kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        out.append((spec, float(weight) if weight else 1.0))
    if not out:
        raise ConfigError("empty transform list")
    return out


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in self.values.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
        self.values = merged

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, SCHEMA[key][0], raw)
        return cls(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"), source=str(path))

    def override(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        kind = SCHEMA[key][0]
        self.values[key] = (_parse_value(key, kind, str(value))
                            if isinstance(value, str) else value)

    def to_text(self) -> str:
        lines = [f"{k} = {_format_value(self.values[k])}" for k in sorted(SCHEMA)]
        return "\n".join(lines) + "\n"

    # --- seeds --------------------------------------------------------

    def seed_for(self, role: int, explicit_key: str | None = None) -> int:
        if explicit_key is not None:
            explicit = int(self.values[explicit_key])
            if explicit >= 0:
                return explicit
        master = abs(int(self.values["seed"]))
        return int(np.random.SeedSequence([master, role]).generate_state(1)[0])

    # --- module config builders ---------------------------------------

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self["encoder.image_size"],
            patch_size=self["encoder.patch_size"],
            encoder_width=self["encoder.width"],
            embed_dim=self["encoder.embed_dim"],
            seed=self.seed_for(ROLE_ENCODER, "encoder.seed"))

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(alpha=self["objective.alpha"],
                               beta=self["objective.beta"],
                               xi=self["objective.xi"])

    def eot_policy(self) -> EotPolicy | None:
        if not self["eot.enabled"]:
            return None
        seed = self.seed_for(ROLE_EOT, "eot.seed")
        if not self["eot.candidates"].strip():
            policy = default_eot_policy(seed=seed,
                                        per_iteration=self["eot.per_iteration"])
            return policy
        pairs = parse_transform_list(self["eot.candidates"])
        return EotPolicy(candidates=tuple(s for s, _ in pairs),
                         weights=tuple(w for _, w in pairs),
                         per_iteration=self["eot.per_iteration"],
                         seed=seed)

    def pgd_config(self) -> PgdConfig:
        return PgdConfig(
            epsilon=self["pgd.epsilon"],
            step_size=self["pgd.step_size"],
            iterations=self["pgd.iterations"],
            init_sigma=self["pgd.init_sigma"],
            eot=self.eot_policy(),
            seed=self.seed_for(ROLE_PGD, "pgd.seed"),
            trace_every=self["pgd.trace_every"])

    def attack_config(self) -> ThreatSimConfig:
        return ThreatSimConfig(
            rank=self["attack.rank"],
            learning_rate=self["attack.learning_rate"],
            epochs=self["attack.epochs"],
            seed=self.seed_for(ROLE_ATTACK, "attack.seed"))

    def data_config(self) -> SyntheticIdentityConfig:
        return SyntheticIdentityConfig(
            n_identities=self["data.identities"],
            images_per_identity=self["data.images_per_identity"],
            train_per_identity=self["data.train_per_identity"],
            image_size=self["encoder.image_size"])

    def attack_ratios(self) -> list[float]:
        try:
            ratios = [float(s) for s in self["attack.ratios"].split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"attack.ratios: {exc}") from exc
        if not ratios or any(not 0.0 <= r <= 1.0 for r in ratios):
            raise ConfigError("attack.ratios must be a comma list within [0, 1]")
        return ratios

    def evaluation_specs(self) -> list[TransformSpec]:
        text = self["evaluate.operations"].strip()
        if text == "table2":
            return evaluation_operations()
        if text == "identity":
            return [TransformSpec("identity")]
        return [s for s, _ in parse_transform_list(text)]

    def manifest_path(self) -> Path:
        if self["dataset.manifest"]:
            return Path(self["dataset.manifest"])
        return Path(self["dataset.root"]) / "manifest.csv"

    def protected_manifest_path(self) -> Path:
        if self["dataset.protected_manifest"]:
            return Path(self["dataset.protected_manifest"])
        return Path(self["output.dir"]) / "protect" / "manifest.csv"
