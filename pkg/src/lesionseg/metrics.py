"""Voxel Dice, lesion instances, IoU matching and region-level F1."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

LARGE_LESION_MM = 20.0
IOU_THRESHOLD = 0.5
DEFAULT_CONNECTIVITY = 26
_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice coefficient of two binary masks; two empty masks score 1.0."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


@dataclass
class LesionInstance:
    """One connected component of one class.

    ``indices`` are sorted flat (raster) indices into a volume of ``shape``.
    """

    class_id: int
    indices: np.ndarray
    shape: tuple[int, int, int]
    diameter_mm: float = float("nan")

    def __post_init__(self):
        if self.indices.size == 0:
            raise ValueError("a lesion instance needs at least one voxel")

    @property
    def volume_voxels(self) -> int:
        return int(self.indices.size)

    @property
    def coords(self) -> np.ndarray:
        """``(N, 3)`` array of ``(z, y, x)``."""
        return np.stack(np.unravel_index(self.indices, self.shape), axis=1)

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.coords
        return c.min(axis=0), c.max(axis=0)


def lesion_diameter(inst: LesionInstance, spacing_mm: Sequence[float]) -> float:
    """Largest physical bounding-box extent, ``(max - min + 1) * spacing`` per axis."""
    if inst.indices.size == 0:
        raise ValueError("empty instance")
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    if spacing.shape != (3,) or np.any(spacing <= 0):
        raise ValueError(f"spacing must be three positive values, got {spacing_mm}")
    lo, hi = inst.bbox
    return float(np.max((hi - lo + 1) * spacing))


def size_category(diameter_mm: float) -> str:
    """``"large"`` only when strictly above 20 mm."""
    return "large" if diameter_mm > LARGE_LESION_MM else "small"


def connected_components_3d(
    labels: np.ndarray,
    class_id: int,
    connectivity: int = DEFAULT_CONNECTIVITY,
    spacing_mm: Sequence[float] | None = None,
) -> list[LesionInstance]:
    """Split the voxels of ``class_id`` into maximal connected sets.

    Instances are ordered by bounding-box corner ``(min z, min y, min x)``,
    ties broken by the first voxel in raster order.
    """
    if connectivity not in _CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    labels = np.asarray(getattr(labels, "data", labels))
    if labels.ndim != 3:
        raise ValueError(f"expected a 3-D label volume, got shape {labels.shape}")
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])
    comp, n = ndimage.label(labels == class_id, structure=structure)
    if n == 0:
        return []
    flat = comp.reshape(-1)
    fg = np.flatnonzero(flat)
    order = np.argsort(flat[fg], kind="stable")
    fg = fg[order]
    bounds = np.searchsorted(flat[fg], np.arange(1, n + 2))
    shape = tuple(labels.shape)
    out = []
    for k in range(n):
        inst = LesionInstance(int(class_id), fg[bounds[k] : bounds[k + 1]], shape)
        if spacing_mm is not None:
            inst.diameter_mm = lesion_diameter(inst, spacing_mm)
        out.append(inst)

    def key(inst: LesionInstance):
        lo, _ = inst.bbox
        return (int(lo[0]), int(lo[1]), int(lo[2]), int(inst.indices[0]))

    return sorted(out, key=key)


def iou(a: LesionInstance, b: LesionInstance) -> float:
    if a.class_id != b.class_id:
        raise ValueError(f"class mismatch: {a.class_id} vs {b.class_id}")
    inter = np.intersect1d(a.indices, b.indices, assume_unique=True).size
    return inter / (a.indices.size + b.indices.size - inter)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)  # (pred idx, gt idx, IoU)
    tp: int = 0
    fp: int = 0
    fn: int = 0


def _overlaps(preds: Sequence[LesionInstance], gts: Sequence[LesionInstance]) -> list[tuple[int, int, int]]:
    """All ``(pred, gt, intersection)`` with nonzero overlap."""
    if not preds or not gts:
        return []
    owner = {}
    for gi, g in enumerate(gts):
        for idx in g.indices.tolist():
            owner[idx] = gi
    out = []
    for pi, p in enumerate(preds):
        hits: dict[int, int] = {}
        for idx in p.indices.tolist():
            gi = owner.get(idx)
            if gi is not None:
                hits[gi] = hits.get(gi, 0) + 1
        out.extend((pi, gi, n) for gi, n in hits.items())
    return out


def match_instances(
    preds: Sequence[LesionInstance],
    gts: Sequence[LesionInstance],
    threshold: float = IOU_THRESHOLD,
) -> MatchResult:
    """Greedy one-to-one matching by descending IoU over pairs with IoU >= threshold.

    Ties go to the smaller gt index, then the smaller pred index.
    """
    classes = {i.class_id for i in preds} | {i.class_id for i in gts}
    if len(classes) > 1:
        raise ValueError(f"instances of several classes given: {sorted(classes)}")
    cands = []
    for pi, gi, inter in _overlaps(preds, gts):
        union = preds[pi].indices.size + gts[gi].indices.size - inter
        v = inter / union
        if v >= threshold:
            cands.append((-v, gi, pi))
    cands.sort()
    used_p, used_g = set(), set()
    pairs = []
    for neg_v, gi, pi in cands:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        pairs.append((pi, gi, -neg_v))
    tp = len(pairs)
    return MatchResult(pairs, tp, len(preds) - tp, len(gts) - tp)


def region_f1(m: MatchResult) -> float:
    """``2tp / (2tp + fp + fn)``; no instances on either side scores 1.0."""
    denom = 2 * m.tp + m.fp + m.fn
    if denom == 0:
        return 1.0
    return 2 * m.tp / denom


@dataclass
class VolumeClassScore:
    dsc: float
    f1: float
    tp: int
    fp: int
    fn: int
    present: bool  # class occurs in gt or prediction


def evaluate_volume(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    connectivity: int = DEFAULT_CONNECTIVITY,
    threshold: float = IOU_THRESHOLD,
) -> dict[int, VolumeClassScore]:
    """Per-class DSC and region-level F1 for one volume (classes ``1..num_classes-1``)."""
    pred = np.asarray(getattr(pred, "data", pred))
    gt = np.asarray(getattr(gt, "data", gt))
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    out = {}
    for c in range(1, num_classes):
        p, g = pred == c, gt == c
        present = bool(p.any() or g.any())
        m = match_instances(
            connected_components_3d(pred, c, connectivity), connected_components_3d(gt, c, connectivity), threshold
        )
        out[c] = VolumeClassScore(dsc(p, g), region_f1(m), m.tp, m.fp, m.fn, present)
    return out


def round_half_up(x: float, places: int = 2) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def average_score(per_method_scores: Mapping[str, Sequence[float]]) -> list[float]:
    """Column-wise mean across methods, rounded half-up to 2 decimals.

    ``per_method_scores`` maps a method name to its row of per-class values.
    """
    rows = list(per_method_scores.values())
    if not rows:
        raise ValueError("need at least one method")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError("ragged table: methods report different numbers of classes")
    arr = np.asarray(rows, dtype=np.float64)
    return [round_half_up(float(v)) for v in arr.mean(axis=0)]


@dataclass
class MetricsReport:
    """Per-class scores as fractions in [0, 1]; ``None`` marks a class never seen."""

    class_names: list[str]
    dsc: list[float | None]
    f1: list[float | None]
    n_volumes: list[int]
    method: str = "model"

    @property
    def mean_dsc(self) -> float | None:
        vals = [v for v in self.dsc if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_f1(self) -> float | None:
        vals = [v for v in self.f1 if v is not None]
        return float(np.mean(vals)) if vals else None

    @classmethod
    def from_volumes(
        cls, scores: Sequence[Mapping[int, VolumeClassScore]], class_names: Sequence[str], method: str = "model"
    ) -> "MetricsReport":
        """Average each class over the volumes where it occurs in gt or prediction."""
        dsc_v, f1_v, counts = [], [], []
        for c in range(1, len(class_names) + 1):
            rows = [s[c] for s in scores if c in s and s[c].present]
            counts.append(len(rows))
            dsc_v.append(float(np.mean([r.dsc for r in rows])) if rows else None)
            f1_v.append(float(np.mean([r.f1 for r in rows])) if rows else None)
        return cls(list(class_names), dsc_v, f1_v, counts, method)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "classes": [
                {"name": n, "dsc": d, "f1": f, "n_volumes": k}
                for n, d, f, k in zip(self.class_names, self.dsc, self.f1, self.n_volumes)
            ],
            "mean": {"dsc": self.mean_dsc, "f1": self.mean_f1},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        rows = d["classes"]
        return cls(
            [r["name"] for r in rows],
            [r["dsc"] for r in rows],
            [r["f1"] for r in rows],
            [int(r.get("n_volumes", 1)) for r in rows],
            d.get("method", "model"),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lesion", "DSC", "F1"])
        for n, d, f in zip(self.class_names, self.dsc, self.f1):
            w.writerow([n, _pct(d), _pct(f)])
        w.writerow(["Avg.", _pct(self.mean_dsc), _pct(self.mean_f1)])
        return buf.getvalue()

    def render(self) -> str:
        width = max(len(n) for n in self.class_names + ["Avg."])
        lines = [f"{'lesion':<{width}}  {'DSC(%)':>7}  {'F1(%)':>7}"]
        for n, d, f in zip(self.class_names, self.dsc, self.f1):
            lines.append(f"{n:<{width}}  {_pct(d):>7}  {_pct(f):>7}")
        lines.append(f"{'Avg.':<{width}}  {_pct(self.mean_dsc):>7}  {_pct(self.mean_f1):>7}")
        return "\n".join(lines) + "\n"


def _pct(v: float | None) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    return f"{round_half_up(100.0 * v):.2f}"


@dataclass
class ComparisonTable:
    """Several methods side by side plus the cross-method average column."""

    class_names: list[str]
    methods: list[str]
    dsc: dict[str, list[float]]  # percent, rows = class_names + ["Avg."]
    f1: dict[str, list[float]]
    avg_dsc: list[float]
    avg_f1: list[float]

    @classmethod
    def from_reports(cls, reports: Sequence[MetricsReport]) -> "ComparisonTable":
        if not reports:
            raise ValueError("need at least one report")
        names = reports[0].class_names
        for r in reports:
            if r.class_names != names:
                raise ValueError(f"class mismatch between reports: {r.class_names} vs {names}")

        def col(r: MetricsReport, vals, mean):
            out = []
            for v in list(vals) + [mean]:
                if v is None:
                    raise ValueError(f"report {r.method!r} has missing scores")
                out.append(100.0 * v)
            return out

        dsc = {r.method: col(r, r.dsc, r.mean_dsc) for r in reports}
        f1 = {r.method: col(r, r.f1, r.mean_f1) for r in reports}
        return cls(list(names), [r.method for r in reports], dsc, f1, average_score(dsc), average_score(f1))

    def rows(self) -> list[list[str]]:
        header = ["lesion"]
        for m in self.methods + ["Average score"]:
            header += [f"{m} DSC", f"{m} F1"]
        out = [header]
        for i, name in enumerate(self.class_names + ["Avg."]):
            row = [name]
            for m in self.methods:
                row += [f"{round_half_up(self.dsc[m][i]):.2f}", f"{round_half_up(self.f1[m][i]):.2f}"]
            row += [f"{self.avg_dsc[i]:.2f}", f"{self.avg_f1[i]:.2f}"]
            out.append(row)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.rows())
        return buf.getvalue()

    def render(self) -> str:
        rows = self.rows()
        widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
        return "\n".join("  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths))) for r in rows) + "\n"
