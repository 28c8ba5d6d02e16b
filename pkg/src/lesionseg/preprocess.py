"""Intensity normalization, resampling and patch sampling for CT volumes."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import DatasetManifest
from .nifti import read_nifti
from .volume import CtVolume, LabelVolume, VolumeMeta

CLIP_PERCENTILES = (0.5, 99.5)
OVERSAMPLE_FG = 0.33


@dataclass(frozen=True)
class PreprocessPlan:
    """Normalization and geometry fitted on the training split.

    ``fallback`` records a degenerate fit: ``"whole_volume"`` when no
    foreground voxel existed, ``"unit_std"`` when the clipped intensities were
    constant, or both joined by ``+``.
    """

    clip_low: float
    clip_high: float
    mean: float
    std: float
    target_spacing: tuple[float, float, float]
    patch_size: tuple[int, int, int] = (48, 48, 48)
    percentiles: tuple[float, float] = CLIP_PERCENTILES
    fallback: str = ""

    def __post_init__(self):
        if not self.clip_low <= self.clip_high:
            raise ValueError(f"clip_low must not exceed clip_high ({self.clip_low} > {self.clip_high})")
        if not self.std > 0:
            raise ValueError(f"std must be > 0, got {self.std}")
        if any(not s > 0 for s in self.target_spacing):
            raise ValueError(f"target spacing must be positive, got {self.target_spacing}")
        object.__setattr__(self, "target_spacing", tuple(float(s) for s in self.target_spacing))
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        object.__setattr__(self, "percentiles", tuple(float(p) for p in self.percentiles))

    def check_patch(self, divisor: int) -> None:
        if any(p % divisor for p in self.patch_size):
            raise ValueError(f"patch size {self.patch_size} must be divisible by {divisor}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("target_spacing", "patch_size", "percentiles"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessPlan":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PreprocessPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_plan(
    manifest: DatasetManifest,
    patch_size=(48, 48, 48),
    split: str | None = "train",
    percentiles=CLIP_PERCENTILES,
) -> PreprocessPlan:
    """Fit clipping, normalization and target spacing on one split.

    With ``split=None`` every entry is used; if the manifest carries no split
    tags at all, the whole manifest is used as well.
    """
    entries = manifest.entries if split is None else manifest.split(split)
    if split is not None and not entries and all(e.split == "unassigned" for e in manifest.entries):
        entries = manifest.entries
    if not entries:
        raise ValueError("fit_plan needs at least one training volume")
    fg_vals, all_vals, spacings = [], [], []
    for e in entries:
        img = read_nifti(manifest.image_path(e), kind="image")
        lab = read_nifti(manifest.label_path(e), kind="label")
        if img.meta.dims != lab.meta.dims:
            raise ValueError(f"{e.volume_id}: image {img.meta.dims} and label {lab.meta.dims} differ")
        data = img.data.astype(np.float64)
        fg_vals.append(data[lab.data > 0])
        all_vals.append(data.reshape(-1))
        spacings.append(img.meta.spacing_mm)
    return fit_plan_arrays(fg_vals, all_vals, spacings, patch_size, percentiles)


def fit_plan_arrays(fg_vals, all_vals, spacings, patch_size=(48, 48, 48), percentiles=CLIP_PERCENTILES) -> PreprocessPlan:
    """Core of :func:`fit_plan` on in-memory intensity samples."""
    fg = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in fg_vals])
    flags = []
    if fg.size == 0:
        fg = np.concatenate([np.asarray(v, dtype=np.float64).reshape(-1) for v in all_vals])
        flags.append("whole_volume")
    lo, hi = np.percentile(fg, percentiles)
    clipped = np.clip(fg, lo, hi)
    mean, std = float(clipped.mean()), float(clipped.std())
    if not std > 0:
        std = 1.0
        flags.append("unit_std")
    target = tuple(float(s) for s in np.median(np.asarray(spacings, dtype=np.float64), axis=0))
    return PreprocessPlan(float(lo), float(hi), mean, std, target, tuple(patch_size), tuple(percentiles), "+".join(flags))


def normalize(data: np.ndarray, plan: PreprocessPlan) -> np.ndarray:
    """Clip to the plan's band, then standardize; returns float32."""
    x = np.clip(np.asarray(data, dtype=np.float64), plan.clip_low, plan.clip_high)
    return ((x - plan.mean) / plan.std).astype(np.float32)


def denormalize(data: np.ndarray, plan: PreprocessPlan) -> np.ndarray:
    """Inverse of the standardization step (clipping is not undone)."""
    return np.asarray(data, dtype=np.float64) * plan.std + plan.mean


def resample(vol, target_spacing, kind: str = "trilinear"):
    """Resample to ``target_spacing``; new extents are ``round(dims * spacing / target)``.

    Corner voxels stay aligned, so a grid with unchanged dims maps onto
    itself exactly. ``kind`` is ``"trilinear"`` (images) or ``"nearest"``
    (labels).
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(not s > 0 for s in target):
        raise ValueError(f"target spacing must be three positive values, got {target_spacing}")
    order = {"trilinear": 1, "nearest": 0}.get(kind)
    if order is None:
        raise ValueError(f"kind must be 'trilinear' or 'nearest', got {kind!r}")
    data = vol.data
    dims = data.shape
    new_dims = tuple(max(1, int(np.floor(n * s / t + 0.5))) for n, s, t in zip(dims, vol.meta.spacing_mm, target))
    meta = VolumeMeta(new_dims, target, vol.meta.intensity_units, vol.meta.orientation)
    if new_dims == dims:
        out = data.copy()
    else:
        out = resample_array(data, new_dims, order)
    if isinstance(vol, LabelVolume):
        return LabelVolume(meta, out.astype(np.uint8), vol.num_classes)
    return CtVolume(meta, out.astype(data.dtype) if data.dtype == np.float32 else out.astype(np.float32))


def resample_array(data: np.ndarray, new_dims, order: int) -> np.ndarray:
    """Corner-aligned resampling of a 3-D array to ``new_dims``."""
    scale = [(n - 1) / (m - 1) if m > 1 else 0.0 for n, m in zip(data.shape, new_dims)]
    src = data if order == 0 else data.astype(np.float64)
    out = ndimage.affine_transform(src, np.diag(scale), output_shape=tuple(new_dims), order=order, mode="nearest")
    return out


@dataclass
class PatchBatch:
    images: np.ndarray  # [n, 1, pz, py, px] float32
    labels: np.ndarray  # [n, pz, py, px] uint8
    starts: np.ndarray  # [n, 3] patch origin in the padded volume
    forced_fg: np.ndarray  # [n] bool, centre drawn from a foreground voxel


def pad_to(image: np.ndarray, labels: np.ndarray, patch_size):
    """Pad both arrays at the far end so every axis holds a patch.

    Images are padded with their minimum, labels with background.
    """
    pads = [(0, max(0, p - n)) for n, p in zip(image.shape, patch_size)]
    if not any(hi for _, hi in pads):
        return image, labels
    fill = image.min() if image.size else 0
    return np.pad(image, pads, constant_values=fill), np.pad(labels, pads, constant_values=0)


def extract_patches(
    image: np.ndarray,
    labels: np.ndarray,
    patch_size,
    n: int = 1,
    oversample_fg: float = OVERSAMPLE_FG,
    seed=None,
    rng: np.random.Generator | None = None,
) -> PatchBatch:
    """Draw ``n`` patches; each one is centred on a random foreground voxel with
    probability ``oversample_fg`` (when any exists), otherwise placed uniformly.

    Either ``seed`` or ``rng`` supplies the randomness.
    """
    if not 0.0 <= oversample_fg <= 1.0:
        raise ValueError(f"oversample_fg must lie in [0, 1], got {oversample_fg}")
    if rng is None:
        rng = np.random.default_rng(seed)
    patch = tuple(int(p) for p in patch_size)
    img, lab = pad_to(np.asarray(image), np.asarray(labels), patch)
    dims = np.array(img.shape)
    p = np.array(patch)
    fg = np.flatnonzero(lab)
    images = np.empty((n, 1) + patch, dtype=np.float32)
    labs = np.empty((n,) + patch, dtype=np.uint8)
    starts = np.empty((n, 3), dtype=np.int64)
    forced = np.zeros(n, dtype=bool)
    for k in range(n):
        if rng.random() < oversample_fg and fg.size:
            c = np.array(np.unravel_index(fg[rng.integers(fg.size)], img.shape))
            s = np.clip(c - p // 2, 0, dims - p)
            forced[k] = True
        else:
            s = np.array([rng.integers(0, m + 1) for m in dims - p])
        sl = tuple(slice(a, a + b) for a, b in zip(s, p))
        images[k, 0] = img[sl]
        labs[k] = lab[sl]
        starts[k] = s
    return PatchBatch(images, labs, starts, forced)


def apply_plan(vol: CtVolume, plan: PreprocessPlan) -> CtVolume:
    """Resample to the plan's spacing (trilinear), then clip and standardize."""
    if tuple(vol.meta.spacing_mm) != plan.target_spacing:
        vol = resample(vol, plan.target_spacing, "trilinear")
    meta = VolumeMeta(vol.meta.dims, vol.meta.spacing_mm, "normalized", vol.meta.orientation)
    return CtVolume(meta, normalize(vol.data, plan))


def prepare_labels(lab: LabelVolume, plan: PreprocessPlan) -> LabelVolume:
    if tuple(lab.meta.spacing_mm) != plan.target_spacing:
        return resample(lab, plan.target_spacing, "nearest")
    return lab
