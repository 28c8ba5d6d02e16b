"""Volume containers shared by I/O, phantoms, preprocessing and metrics.

Arrays are indexed ``[z, y, x]`` (depth, height, width); spacing is given in
the same order, in millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# id 0 is background; ids follow this order
LESION_CLASSES = (
    "gallstone",
    "kidney_stone",
    "liver_tumor",
    "kidney_tumor",
    "pancreatic_cancer",
    "liver_cyst",
    "kidney_cyst",
)
NUM_CLASSES = len(LESION_CLASSES) + 1


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    intensity_units: str = "HU"
    orientation: str = "ZYX"

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise ValueError(f"dims must be three positive extents, got {self.dims}")
        if len(self.spacing_mm) != 3 or any(not (s > 0) for s in self.spacing_mm):
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))


@dataclass
class CtVolume:
    meta: VolumeMeta
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != self.meta.dims:
            raise ValueError(f"data shape {self.data.shape} != dims {self.meta.dims}")
        if self.data.dtype not in (np.int16, np.float32):
            self.data = self.data.astype(np.float32)


@dataclass
class LabelVolume:
    meta: VolumeMeta
    data: np.ndarray
    num_classes: int = field(default=NUM_CLASSES)

    def __post_init__(self):
        if self.data.shape != self.meta.dims:
            raise ValueError(f"data shape {self.data.shape} != dims {self.meta.dims}")
        if self.data.dtype != np.uint8:
            if self.data.size and (self.data.min() < 0 or self.data.max() > 255):
                raise ValueError("label ids must fit in uint8")
            self.data = self.data.astype(np.uint8)
        if self.data.size and int(self.data.max()) >= self.num_classes:
            raise ValueError(f"label id {int(self.data.max())} >= num_classes {self.num_classes}")


def meta_like(data: np.ndarray, spacing_mm, intensity_units: str = "HU") -> VolumeMeta:
    return VolumeMeta(tuple(data.shape), tuple(spacing_mm), intensity_units)
