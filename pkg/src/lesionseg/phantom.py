"""Synthetic abdominal CT phantoms with seven lesion classes.

Organs and lesions are ellipsoids elongated along z inside a fat-filled body
cylinder surrounded by air. Lesions sit strictly inside their host organ and
keep a one-voxel gap from every other lesion, so each placed lesion is one
26-connected instance of its class.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import DatasetManifest, ManifestEntry
from .nifti import write_nifti
from .volume import LESION_CLASSES, CtVolume, LabelVolume, VolumeMeta

AIR_HU = -1000.0
FAT_HU = -100.0

# organ: (center, semi-axes) as fractions of the field of view, (z, y, x) order
ORGAN_LAYOUT = {
    "liver": ((0.50, 0.30, 0.30), (0.46, 0.24, 0.27)),
    "gallbladder": ((0.50, 0.26, 0.70), (0.30, 0.12, 0.12)),
    "pancreas": ((0.50, 0.52, 0.62), (0.30, 0.09, 0.20)),
    "kidney_left": ((0.50, 0.74, 0.27), (0.40, 0.15, 0.14)),
    "kidney_right": ((0.50, 0.74, 0.73), (0.40, 0.15, 0.14)),
}
ORGAN_HU = {"liver": 120.0, "gallbladder": 45.0, "pancreas": 100.0, "kidney_left": 120.0, "kidney_right": 120.0}
BODY_SEMI_YX = (0.47, 0.47)

HOST_ORGANS = {
    "gallstone": ("gallbladder",),
    "kidney_stone": ("kidney_left", "kidney_right"),
    "liver_tumor": ("liver",),
    "kidney_tumor": ("kidney_left", "kidney_right"),
    "pancreatic_cancer": ("pancreas",),
    "liver_cyst": ("liver",),
    "kidney_cyst": ("kidney_left", "kidney_right"),
}

# instances per volume in the reference cohort (class totals over 694 volumes)
MSWAL_COUNTS = {
    "gallstone": 215,
    "kidney_stone": 415,
    "liver_tumor": 767,
    "kidney_tumor": 240,
    "pancreatic_cancer": 117,
    "liver_cyst": 2287,
    "kidney_cyst": 1171,
}
MSWAL_VOLUMES = 694


class PlacementError(RuntimeError):
    """A lesion could not be placed within the retry budget."""


@dataclass(frozen=True)
class LesionClassSpec:
    """Sampling recipe for one lesion class.

    ``count`` is an inclusive ``[lo, hi]`` range drawn per volume; when
    ``mean_count`` is set instead, volumes receive a deterministic
    low-discrepancy share so that ``n`` volumes hold ``round(n * mean_count)``.
    """

    diameter_mm: tuple[float, float]
    hu: tuple[float, float]
    count: tuple[int, int] = (1, 1)
    mean_count: float | None = None

    def __post_init__(self):
        lo, hi = self.diameter_mm
        if not 0 < lo <= hi:
            raise ValueError(f"diameter range must satisfy 0 < lo <= hi, got {self.diameter_mm}")
        if self.hu[0] > self.hu[1]:
            raise ValueError(f"HU band is reversed: {self.hu}")
        if self.mean_count is None:
            if not 0 <= self.count[0] <= self.count[1]:
                raise ValueError(f"count range must satisfy 0 <= lo <= hi, got {self.count}")
        elif self.mean_count < 0:
            raise ValueError(f"mean_count must be >= 0, got {self.mean_count}")

    def count_for(self, index: int, rng: np.random.Generator) -> int:
        if self.mean_count is not None:
            m = self.mean_count
            return math.floor((index + 1) * m + 0.5) - math.floor(index * m + 0.5)
        return int(rng.integers(self.count[0], self.count[1] + 1))


DEFAULT_CLASS_SPECS = {
    "gallstone": LesionClassSpec((4.0, 22.0), (400.0, 800.0)),
    "kidney_stone": LesionClassSpec((3.0, 22.0), (400.0, 800.0)),
    "liver_tumor": LesionClassSpec((6.0, 30.0), (40.0, 70.0)),
    "kidney_tumor": LesionClassSpec((6.0, 24.0), (50.0, 80.0)),
    "pancreatic_cancer": LesionClassSpec((6.0, 22.0), (30.0, 60.0)),
    "liver_cyst": LesionClassSpec((4.0, 26.0), (0.0, 20.0)),
    "kidney_cyst": LesionClassSpec((4.0, 22.0), (0.0, 20.0)),
}


@dataclass(frozen=True)
class PhantomSpec:
    """Everything that determines a phantom set; ``classes`` fixes label ids ``1..K``."""

    dims: tuple[int, int, int] = (48, 48, 48)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    classes: tuple[str, ...] = LESION_CLASSES
    class_specs: dict = field(default_factory=lambda: dict(DEFAULT_CLASS_SPECS))
    noise_sigma: float = 10.0
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        VolumeMeta(self.dims, self.spacing_mm)
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("duplicate class names")
        for c in self.classes:
            if c not in HOST_ORGANS:
                raise ValueError(f"unknown lesion class {c!r}; known: {list(HOST_ORGANS)}")
            if c not in self.class_specs:
                raise ValueError(f"no sampling spec for class {c!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for c in self.classes:
            lo, hi = self.class_specs[c].hu
            for organ in HOST_ORGANS[c]:
                bg = ORGAN_HU[organ]
                gap = max(lo - bg, bg - hi)
                if gap < 2 * self.noise_sigma:
                    raise ValueError(
                        f"{c} band {self.class_specs[c].hu} lies within 2 sigma of {organ} ({bg} HU)"
                    )

    @property
    def num_classes(self) -> int:
        return len(self.classes) + 1

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "classes": list(self.classes),
            "class_specs": {
                c: {
                    "diameter_mm": list(s.diameter_mm),
                    "hu": list(s.hu),
                    "count": list(s.count),
                    "mean_count": s.mean_count,
                }
                for c, s in self.class_specs.items()
                if c in self.classes
            },
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
            "max_retries": self.max_retries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        """Build from a config mapping; omitted fields keep their defaults.

        ``preset: "mswal"`` starts from the cohort imbalance preset.
        """
        d = dict(d)
        known = {"dims", "spacing_mm", "classes", "class_specs", "noise_sigma", "seed", "max_retries", "preset"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom spec keys: {sorted(unknown)}")
        preset = d.pop("preset", None)
        base = mswal_preset() if preset == "mswal" else cls()
        if preset not in (None, "mswal"):
            raise ValueError(f"unknown preset {preset!r}")
        specs = dict(base.class_specs)
        for name, over in (d.pop("class_specs", None) or {}).items():
            if name not in specs:
                raise ValueError(f"unknown lesion class {name!r}")
            cur = specs[name]
            extra = set(over) - {"diameter_mm", "hu", "count", "mean_count"}
            if extra:
                raise ValueError(f"unknown keys for class {name!r}: {sorted(extra)}")
            specs[name] = LesionClassSpec(
                tuple(over.get("diameter_mm", cur.diameter_mm)),
                tuple(over.get("hu", cur.hu)),
                tuple(over.get("count", cur.count)),
                over.get("mean_count", cur.mean_count if "count" not in over else None),
            )
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return replace(base, class_specs=specs, **kw)

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def mswal_preset(scale: float = 1.0, **kw) -> PhantomSpec:
    """Per-volume mean counts proportional to the reference cohort's class totals."""
    specs = {
        c: replace(DEFAULT_CLASS_SPECS[c], mean_count=scale * MSWAL_COUNTS[c] / MSWAL_VOLUMES) for c in LESION_CLASSES
    }
    return PhantomSpec(class_specs=specs, **kw)


@dataclass(frozen=True)
class LedgerRecord:
    volume_id: str
    instance: int
    class_name: str
    class_id: int
    diameter_mm: float
    center: tuple[int, int, int]
    volume_voxels: int


LEDGER_FIELDS = ("volume_id", "instance", "class", "class_id", "diameter_mm", "center_z", "center_y", "center_x", "volume_voxels")


def _grid(spec: PhantomSpec):
    """Physical voxel-centre coordinates (mm) and the field-of-view extent."""
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(spec.dims, spec.spacing_mm)]
    fov = np.array([n * s for n, s in zip(spec.dims, spec.spacing_mm)])
    return axes, fov


def _ellipsoid(axes, center, semi, strict: bool = False) -> np.ndarray:
    z, y, x = axes
    r2 = (
        ((z - center[0]) / semi[0])[:, None, None] ** 2
        + ((y - center[1]) / semi[1])[None, :, None] ** 2
        + ((x - center[2]) / semi[2])[None, None, :] ** 2
    )
    return r2 < 1.0 if strict else r2 <= 1.0


def organ_masks(spec: PhantomSpec) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Body mask and final (non-overlapping) organ masks; later organs win."""
    axes, fov = _grid(spec)
    _, y, x = axes
    body2d = ((y[:, None] - fov[1] / 2) / (BODY_SEMI_YX[0] * fov[1])) ** 2 + (
        (x[None, :] - fov[2] / 2) / (BODY_SEMI_YX[1] * fov[2])
    ) ** 2 <= 1.0
    body = np.broadcast_to(body2d, spec.dims).copy()
    owner = np.full(spec.dims, -1, dtype=np.int8)
    names = list(ORGAN_LAYOUT)
    for k, name in enumerate(names):
        c, s = ORGAN_LAYOUT[name]
        owner[_ellipsoid(axes, np.array(c) * fov, np.array(s) * fov) & body] = k
    return body, {name: owner == k for k, name in enumerate(names)}


def _place_lesion(rng, spec, axes, host: np.ndarray, blocked: np.ndarray, d_range):
    """Sample an ellipsoid inside ``host`` avoiding ``blocked``; ``None`` on failure.

    Centres are drawn among free voxels whose distance to the nearest
    non-free voxel is at least the shortest semi-axis (a necessary condition
    for containment). After every 20 failed attempts the diameter shrinks by
    10%, never below the class minimum.
    """
    spacing = np.asarray(spec.spacing_mm)
    free = host & ~blocked
    if not free.any():
        return None
    depth = ndimage.distance_transform_edt(free, sampling=spacing)
    d = float(rng.uniform(*d_range))
    for attempt in range(spec.max_retries):
        if attempt and attempt % 20 == 0:
            d = max(0.9 * d, d_range[0])
        semi = np.array([d / 2, d / 2 * rng.uniform(0.35, 0.8), d / 2 * rng.uniform(0.35, 0.8)])
        # keep at least one voxel per axis
        semi = np.maximum(semi, spacing / 2)
        cand = np.flatnonzero(depth >= semi.min())
        if cand.size == 0:
            continue
        cz, cy, cx = np.unravel_index(cand[rng.integers(cand.size)], spec.dims)
        center_vox = (int(cz), int(cy), int(cx))
        center = np.array([axes[i][center_vox[i]] for i in range(3)])
        # an even voxel count along the long axis centres the lesion on a voxel face,
        # so with the strict boundary test the z extent is exactly round(d / spacing)
        if round(2 * semi[0] / spacing[0]) % 2 == 0:
            center[0] += spacing[0] / 2
        lo = [max(0, int(np.floor((center[i] - semi[i]) / spacing[i]))) for i in range(3)]
        hi = [min(spec.dims[i], int(np.ceil((center[i] + semi[i]) / spacing[i])) + 1) for i in range(3)]
        sub_axes = [axes[i][lo[i] : hi[i]] for i in range(3)]
        local = _ellipsoid(sub_axes, center, semi, strict=True)
        win = tuple(slice(lo[i], hi[i]) for i in range(3))
        if np.any(local & ~free[win]):
            continue
        mask = np.zeros(spec.dims, dtype=bool)
        mask[win] = local
        return mask, center_vox, d
    return None


def generate_phantom(spec: PhantomSpec, index: int) -> tuple[CtVolume, LabelVolume, list[LedgerRecord]]:
    """One phantom, fully determined by ``(spec.seed, index)``."""
    rng = np.random.default_rng([spec.seed, index])
    axes, _ = _grid(spec)
    body, organs = organ_masks(spec)
    hu = np.where(body, FAT_HU, AIR_HU)
    for name, m in organs.items():
        hu[m] = ORGAN_HU[name]
    labels = np.zeros(spec.dims, dtype=np.uint8)
    occupied = np.zeros(spec.dims, dtype=bool)
    struct = ndimage.generate_binary_structure(3, 3)
    vid = volume_id(index)
    ledger = []
    for cid, cname in enumerate(spec.classes, start=1):
        cs = spec.class_specs[cname]
        n = cs.count_for(index, rng)
        for _ in range(n):
            hosts = HOST_ORGANS[cname]
            host = organs[hosts[int(rng.integers(len(hosts)))]]
            blocked = ndimage.binary_dilation(occupied, structure=struct)
            placed = _place_lesion(rng, spec, axes, host, blocked, cs.diameter_mm)
            if placed is None:
                raise PlacementError(
                    f"{vid}: could not place {cname} after {spec.max_retries} attempts; spec too dense"
                )
            mask, center, d = placed
            labels[mask] = cid
            occupied |= mask
            hu[mask] = rng.uniform(*cs.hu)
            ledger.append(LedgerRecord(vid, len(ledger), cname, cid, round(d, 4), center, int(mask.sum())))
    if spec.noise_sigma > 0:
        hu = hu + rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    meta = VolumeMeta(spec.dims, spec.spacing_mm)
    image = CtVolume(meta, np.clip(np.rint(hu), -32768, 32767).astype(np.int16))
    return image, LabelVolume(meta, labels, num_classes=spec.num_classes), ledger


def volume_id(index: int) -> str:
    return f"phantom_{index:04d}"


def write_ledger(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_FIELDS)
        for r in records:
            w.writerow([r.volume_id, r.instance, r.class_name, r.class_id, f"{r.diameter_mm:.4f}", *r.center, r.volume_voxels])


def read_ledger(path) -> list[LedgerRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            LedgerRecord(
                row["volume_id"],
                int(row["instance"]),
                row["class"],
                int(row["class_id"]),
                float(row["diameter_mm"]),
                (int(row["center_z"]), int(row["center_y"]), int(row["center_x"])),
                int(row["volume_voxels"]),
            )
            for row in csv.DictReader(fh)
        ]


def generate_dataset(spec: PhantomSpec, n: int, out_dir, compress: bool = True) -> DatasetManifest:
    """Write ``n`` image/label pairs, ``manifest.json``, ``ledger.csv`` and ``phantom_spec.json``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    ext = ".nii.gz" if compress else ".nii"
    entries, ledger = [], []
    for i in range(n):
        img, lab, recs = generate_phantom(spec, i)
        vid = volume_id(i)
        img_rel, lab_rel = f"images/{vid}{ext}", f"labels/{vid}{ext}"
        for vol, rel in ((img, img_rel), (lab, lab_rel)):
            try:
                write_nifti(vol, out / rel)
            except OSError as exc:
                raise OSError(f"failed to write {out / rel}: {exc}") from exc
        entries.append(ManifestEntry(vid, img_rel, lab_rel))
        ledger.extend(recs)
    manifest = DatasetManifest(entries, list(spec.classes), spec.seed, out, {"ledger": "ledger.csv"})
    manifest.save(out / "manifest.json")
    write_ledger(ledger, out / "ledger.csv")
    (out / "phantom_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
