"""Dataset manifests: the released list of (image, caption, identity) rows.

CSV schema: ``path,caption,identity,split,protected`` with paths relative
to the dataset root. Test images are never protected; they stand in for
the clean queries an attacker's model would be probed with.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

CSV_HEADER = ["path", "caption", "identity", "split", "protected"]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    caption: str
    identity: str
    split: str            # "train" | "test"
    protected: bool = False

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ManifestError(f"bad split {self.split!r} for {self.path}")
        if self.protected and self.split != "train":
            raise ManifestError(f"test entry {self.path} cannot be protected")


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]

    def __post_init__(self):
        self.root = Path(self.root)

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def train_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == "train"]

    def test_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == "test"]

    def identities(self) -> list[str]:
        return sorted({e.identity for e in self.entries})

    def validate(self) -> None:
        """Every identity needs at least one train and one test entry."""
        seen: dict[str, set[str]] = {}
        for e in self.entries:
            seen.setdefault(e.identity, set()).add(e.split)
        missing = [ident for ident, splits in sorted(seen.items())
                   if splits != {"train", "test"}]
        if missing:
            raise ManifestError(f"identities missing a train or test split: {missing}")
        if not self.entries:
            raise ManifestError("empty manifest")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ManifestError(f"{path}: bad header {header!r}")
        entries = []
        for row in reader:
            if len(row) != 5:
                raise ManifestError(f"{path}: bad row {row!r}")
            entries.append(ManifestEntry(
                path=row[0], caption=row[1], identity=row[2], split=row[3],
                protected={"true": True, "false": False}[row[4]]))
    manifest = DatasetManifest(root=path.parent, entries=entries)
    manifest.validate()
    return manifest


def write_manifest(manifest: DatasetManifest, path, validate: bool = True) -> None:
    if validate:
        manifest.validate()
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for e in manifest.entries:
            writer.writerow([e.path, e.caption, e.identity, e.split,
                             "true" if e.protected else "false"])


def mark_protected(entry: ManifestEntry, new_path: str) -> ManifestEntry:
    return replace(entry, path=new_path, protected=True)
