"""Dataset manifest, reproducible train/test splitting and lesion statistics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .metrics import DEFAULT_CONNECTIVITY, connected_components_3d, lesion_diameter, size_category
from .nifti import NiftiError, read_nifti
from .volume import LESION_CLASSES

SPLITS = ("train", "test", "unassigned")
DIAMETER_BINS_MM = (0, 5, 10, 15, 20, 25, 30, 35, 40)


@dataclass(frozen=True)
class ManifestEntry:
    volume_id: str
    image: str
    label: str
    split: str = "unassigned"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class DatasetManifest:
    """Volume records plus the class names behind label ids ``1..K``.

    Paths are stored as given; relative ones resolve against ``root``.
    """

    entries: list[ManifestEntry]
    classes: list[str] = field(default_factory=lambda: list(LESION_CLASSES))
    seed: int | None = None
    root: Path = field(default_factory=Path)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.volume_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate volume ids in manifest")
        self.root = Path(self.root)

    @property
    def num_classes(self) -> int:
        return len(self.classes) + 1

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    def subset(self, tag: str) -> "DatasetManifest":
        return replace(self, entries=self.split(tag))

    def image_path(self, e: ManifestEntry) -> Path:
        return self.root / e.image

    def label_path(self, e: ManifestEntry) -> Path:
        return self.root / e.label

    def to_dict(self) -> dict:
        return {
            "classes": list(self.classes),
            "seed": self.seed,
            "extra": self.extra,
            "entries": [
                {"id": e.volume_id, "image": e.image, "label": e.label, "split": e.split} for e in self.entries
            ],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict, root=".") -> "DatasetManifest":
        try:
            entries = [ManifestEntry(r["id"], r["image"], r["label"], r.get("split", "unassigned")) for r in d["entries"]]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed manifest record: {exc}") from None
        return cls(entries, list(d.get("classes", LESION_CLASSES)), d.get("seed"), Path(root), dict(d.get("extra", {})))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")), root=path.parent)


def round_half_up_int(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(
    manifest: DatasetManifest, ratio: float = 0.7, seed: int = 0, n_train: int | None = None
) -> DatasetManifest:
    """Tag entries train/test from a seeded random permutation.

    The train side gets ``round(ratio * N)`` volumes unless ``n_train`` overrides it.
    Entry order is preserved; only split tags change.
    """
    n = len(manifest.entries)
    if n == 0:
        raise ValueError("cannot split an empty manifest")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    k = round_half_up_int(ratio * n) if n_train is None else int(n_train)
    if not 0 < k < n:
        raise ValueError(f"split would leave an empty side: {k} train of {n}")
    perm = np.random.default_rng(seed).permutation(n)
    train = set(perm[:k].tolist())
    entries = [replace(e, split="train" if i in train else "test") for i, e in enumerate(manifest.entries)]
    return replace(manifest, entries=entries, seed=seed)


@dataclass
class ClassStatistics:
    name: str
    instances: int = 0
    large: int = 0
    small: int = 0
    diameters_mm: list[float] = field(default_factory=list)

    def histogram(self, bins=DIAMETER_BINS_MM) -> list[int]:
        """Counts per ``[b_i, b_i+1)`` bin plus a final open-ended bin."""
        edges = list(bins) + [math.inf]
        counts, _ = np.histogram(self.diameters_mm, bins=edges)
        return counts.tolist()


@dataclass
class DatasetStatistics:
    classes: list[ClassStatistics]
    volumes: int
    failures: list[tuple[str, str]] = field(default_factory=list)  # (volume id, reason)

    @property
    def failure_count(self) -> int:
        return len(self.failures)

    def by_name(self, name: str) -> ClassStatistics:
        for c in self.classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_csv(self, bins=DIAMETER_BINS_MM) -> str:
        labels = [f"d_{lo}_{hi}mm" for lo, hi in zip(bins[:-1], bins[1:])] + [f"d_ge_{bins[-1]}mm"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "instances", "large", "small"] + labels)
        for c in self.classes:
            w.writerow([c.name, c.instances, c.large, c.small] + c.histogram(bins))
        return buf.getvalue()


def dataset_statistics(
    manifest: DatasetManifest, connectivity: int = DEFAULT_CONNECTIVITY, split: str | None = None
) -> DatasetStatistics:
    """Instance counts, size categories and diameter histogram per lesion class.

    Unreadable label files are skipped and listed in ``failures``.
    """
    stats = [ClassStatistics(name) for name in manifest.classes]
    entries = manifest.entries if split is None else manifest.split(split)
    failures, seen = [], 0
    for e in entries:
        try:
            lab = read_nifti(manifest.label_path(e), kind="label")
        except (OSError, NiftiError) as exc:
            failures.append((e.volume_id, f"{type(exc).__name__}: {exc}"))
            continue
        seen += 1
        for cid, st in enumerate(stats, start=1):
            for inst in connected_components_3d(lab.data, cid, connectivity):
                d = lesion_diameter(inst, lab.meta.spacing_mm)
                st.instances += 1
                st.diameters_mm.append(d)
                if size_category(d) == "large":
                    st.large += 1
                else:
                    st.small += 1
    return DatasetStatistics(stats, seen, failures)
