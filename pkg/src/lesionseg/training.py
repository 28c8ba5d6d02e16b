"""Training loop, learning-rate schedule, transfer fine-tuning and sliding-window inference."""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import ops
from .checkpoint import Checkpoint, CheckpointError
from .dataset import DatasetManifest
from .metrics import dsc
from .network import VARIANT_ROWS, Network, NetworkConfig
from .nifti import read_nifti
from .optim import SGD
from .preprocess import PreprocessPlan, apply_plan, extract_patches, fit_plan, normalize, pad_to, prepare_labels, resample_array
from .tensor import NonFiniteError, Tensor, no_grad
from .volume import CtVolume, LabelVolume, VolumeMeta


class TrainingDivergedError(FloatingPointError):
    """Loss or activations became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-3
    epochs: int = 300
    batches_per_epoch: int = 4
    batch_size: int = 2
    patch_size: tuple[int, int, int] = (48, 48, 48)
    seed: int = 0
    loss_weights: tuple[float, float] = (1.0, 1.0)
    momentum: float = 0.99
    oversample_fg: float = 0.33
    num_stages: int = 4
    # half the network default width keeps a 300-epoch desk run under an hour on one core
    base_channels: int = 8
    variant: str = "V"
    deep_supervision: bool = False

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ValueError(f"lr0 must be >= 0, got {self.lr0}")
        if self.epochs < 1 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, batches_per_epoch and batch_size must be >= 1")
        if self.variant not in VARIANT_ROWS:
            raise ValueError(f"variant must be one of {list(VARIANT_ROWS)}, got {self.variant!r}")
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if len(self.patch_size) != 3:
            raise ValueError(f"patch_size needs three extents, got {self.patch_size}")
        div = 2 ** (self.num_stages - 1)
        if any(p % div for p in self.patch_size):
            raise ValueError(f"patch size {self.patch_size} must be divisible by {div}")

    def network_config(self, num_classes: int) -> NetworkConfig:
        return NetworkConfig(
            num_stages=self.num_stages,
            base_channels=self.base_channels,
            num_classes=num_classes,
            variant=VARIANT_ROWS[self.variant],
            deep_supervision=self.deep_supervision,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def linear_lr(epoch: int, cfg: TrainConfig) -> float:
    """``lr0 * (1 - epoch / epochs)`` for ``0 <= epoch < epochs``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr0 * (1.0 - epoch / cfg.epochs)


@dataclass
class TrainingData:
    images: list[np.ndarray]  # normalized float32 [D, H, W]
    labels: list[np.ndarray]  # uint8 [D, H, W]
    ids: list[str]


def load_training_data(manifest: DatasetManifest, plan: PreprocessPlan, split: str | None = "train") -> TrainingData:
    """Read, resample and normalize the volumes of one split.

    A manifest written by the preprocess command (``extra.preprocessed``)
    already holds normalized volumes. Untagged manifests use every entry.
    """
    entries = manifest.entries if split is None else manifest.split(split)
    if split is not None and not entries and all(e.split == "unassigned" for e in manifest.entries):
        entries = manifest.entries
    if not entries:
        raise ValueError("no training volumes in manifest")
    done = bool(manifest.extra.get("preprocessed"))
    images, labels, ids = [], [], []
    for e in entries:
        img = read_nifti(manifest.image_path(e), kind="image")
        lab = read_nifti(manifest.label_path(e), kind="label")
        if done:
            images.append(img.data.astype(np.float32))
            labels.append(lab.data)
        else:
            images.append(apply_plan(img, plan).data)
            labels.append(prepare_labels(lab, plan).data)
        ids.append(e.volume_id)
    return TrainingData(images, labels, ids)


def foreground_dsc(pred: np.ndarray, target: np.ndarray, num_classes: int) -> float:
    """Mean DSC over foreground classes present in prediction or target (1.0 if none)."""
    vals = []
    for c in range(1, num_classes):
        p, t = pred == c, target == c
        if p.any() or t.any():
            vals.append(dsc(p, t))
    return float(np.mean(vals)) if vals else 1.0


def _aux_weights(n_aux: int) -> list[float]:
    # full resolution 1, each coarser level half the previous; normalized
    w = [1.0] + [0.5 ** (n_aux - k) for k in range(n_aux)]
    s = sum(w)
    return [x / s for x in w]


def training_loss(net: Network, x: np.ndarray, y: np.ndarray, weights) -> tuple[Tensor, np.ndarray]:
    """Loss tensor and the detached main logits."""
    if net.config.deep_supervision and net.aux_heads:
        outs = net.forward(Tensor(x), return_aux=True)
        ws = _aux_weights(len(outs) - 1)
        loss = ops.scale(ops.dice_ce_loss(outs[0], y, weights), ws[0])
        for k, o in enumerate(outs[1:]):
            f = x.shape[2] // o.shape[2]
            yk = np.ascontiguousarray(y[:, ::f, ::f, ::f])
            loss = ops.add(loss, ops.scale(ops.dice_ce_loss(o, yk, weights), ws[k + 1]))
        return loss, outs[0].data
    logits = net.forward(Tensor(x))
    return ops.dice_ce_loss(logits, y, weights), logits.data


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    net: Network | None = None


def train(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    plan: PreprocessPlan | None = None,
    resume: Checkpoint | None = None,
    net: Network | None = None,
    stop_after: int | None = None,
    log_fn: Callable[[dict], None] | None = None,
    data: TrainingData | None = None,
    extra: dict | None = None,
) -> TrainResult:
    """Run epochs ``[start, min(stop_after, epochs))``.

    Batch ``j`` of epoch ``e`` draws from ``default_rng([seed, e, j])``, so a
    run resumed from a checkpoint replays exactly the uninterrupted one.

    Args:
        plan: preprocessing plan; fitted on the train split when omitted
            (a resumed run reuses the checkpoint's plan).
        resume: checkpoint to continue from, including optimizer momentum.
        net: pre-built network (used by fine-tuning); ignored with ``resume``.
        stop_after: stop once this many epochs are complete.
        log_fn: receives each per-epoch record.
        data: already loaded training volumes.
    """
    if resume is not None and plan is None and resume.plan is not None:
        plan = PreprocessPlan.from_dict(resume.plan)
    if plan is None:
        if manifest.extra.get("plan_data"):
            plan = PreprocessPlan.from_dict(manifest.extra["plan_data"])
        else:
            plan = fit_plan(manifest, cfg.patch_size)
    if data is None:
        data = load_training_data(manifest, plan)
    num_classes = manifest.num_classes
    if resume is not None:
        if resume.network_config.num_classes != num_classes:
            raise CheckpointError(
                f"checkpoint has {resume.network_config.num_classes} classes, data has {num_classes}"
            )
        net = resume.build_network()
        start = resume.epoch
    else:
        if net is None:
            net = Network(cfg.network_config(num_classes), seed=cfg.seed)
        elif net.config.num_classes != num_classes:
            raise ValueError(f"network has {net.config.num_classes} classes, data has {num_classes}")
        start = 0
    opt = SGD(net.parameters, momentum=cfg.momentum)
    if resume is not None:
        resume.restore_optimizer(opt)
    net.train()
    end = cfg.epochs if stop_after is None else min(stop_after, cfg.epochs)
    log = []
    for epoch in range(start, end):
        lr = linear_lr(epoch, cfg)
        losses, scores = [], []
        for j in range(cfg.batches_per_epoch):
            rng = np.random.default_rng([cfg.seed, epoch, j])
            picks = rng.integers(len(data.images), size=cfg.batch_size)
            xs, ys = [], []
            for i in picks:
                b = extract_patches(data.images[i], data.labels[i], cfg.patch_size, 1, cfg.oversample_fg, rng=rng)
                xs.append(b.images[0])
                ys.append(b.labels[0])
            x, y = np.stack(xs), np.stack(ys)
            try:
                loss, logits = training_loss(net, x, y, cfg.loss_weights)
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite activation at epoch {epoch}, batch {j} in {exc.op}; "
                    f"max |activation| {exc.max_abs:.4g}"
                ) from exc
            value = float(loss.item())
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {j}; max |activation| {np.abs(logits).max():.4g}"
                )
            opt.zero_grad()
            try:
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingDivergedError(
                    f"non-finite gradient at epoch {epoch}, batch {j} in {exc.op}; "
                    f"max |activation| {np.abs(logits).max():.4g}"
                ) from exc
            opt.step(lr)
            losses.append(value)
            scores.append(foreground_dsc(logits.argmax(axis=1), y, num_classes))
        rec = {"epoch": epoch, "lr": lr, "loss": float(np.mean(losses)), "train_dsc": float(np.mean(scores))}
        log.append(rec)
        if log_fn is not None:
            log_fn(rec)
    ckpt = Checkpoint.capture(
        net,
        opt,
        epoch=end,
        train_config=cfg.to_dict(),
        plan=plan.to_dict(),
        classes=list(manifest.classes),
        extra=dict(extra or (resume.extra if resume is not None else {})),
    )
    return TrainResult(ckpt, log, net)


def transfer_finetune(
    pretrained: Checkpoint,
    new_manifest: DatasetManifest,
    new_num_classes: int,
    cfg: TrainConfig,
    stop_after: int | None = None,
    log_fn=None,
    data: TrainingData | None = None,
) -> TrainResult:
    """Copy the pretrained trunk, re-initialize heads if the class count changed,
    and train on ``new_manifest`` with a fresh schedule and fresh momentum.

    The pretrained preprocessing plan is reused so the trunk sees the same
    intensity scale.
    """
    if new_manifest.num_classes != new_num_classes:
        raise ValueError(f"manifest lists {new_manifest.num_classes} classes, requested {new_num_classes}")
    net, reinit = init_finetune_network(pretrained, new_num_classes, cfg.seed)
    plan = PreprocessPlan.from_dict(pretrained.plan) if pretrained.plan is not None else None
    result = train(
        new_manifest,
        cfg,
        plan=plan,
        net=net,
        stop_after=stop_after,
        log_fn=log_fn,
        data=data,
        extra={"pretrained_epoch": pretrained.epoch, "reinitialized": reinit},
    )
    return result


def init_finetune_network(pretrained: Checkpoint, new_num_classes: int, seed: int = 0) -> tuple[Network, list[str]]:
    """Network for fine-tuning plus the names of re-initialized parameters."""
    cfg = NetworkConfig(**{**pretrained.network_config.__dict__, "num_classes": new_num_classes})
    net = Network(cfg, seed=seed)
    params = net.parameters
    head = set(net.head_parameter_names()) if new_num_classes != pretrained.network_config.num_classes else set()
    bad = []
    for name, t in params.items():
        if name in head:
            continue
        src = pretrained.params.get(name)
        if src is None or src.shape != t.data.shape:
            bad.append(name)
    extra = sorted(set(pretrained.params) - set(params))
    if bad or extra:
        raise CheckpointError(f"incompatible trunk; mismatched parameters: {', '.join(sorted(bad) + extra)}")
    trunk = {n: pretrained.params[n] for n in params if n not in head}
    for n, arr in trunk.items():
        params[n].data[...] = arr
    bufs = net.buffers()
    for n, b in bufs.items():
        if n not in pretrained.buffers or pretrained.buffers[n].shape != b.shape:
            raise CheckpointError(f"incompatible trunk; mismatched buffer: {n}")
        b[...] = pretrained.buffers[n]
    return net, sorted(head)


def _window_starts(n: int, p: int, overlap: float) -> list[int]:
    if n <= p:
        return [0]
    step = max(1, int(p * (1.0 - overlap)))
    k = math.ceil((n - p) / step) + 1
    return sorted({int(round(i * (n - p) / (k - 1))) for i in range(k)})


def predict_logits(net: Network, image: np.ndarray, patch_size, overlap: float = 0.5) -> np.ndarray:
    """Sliding-window logits ``[C, D, H, W]`` for a normalized volume, uniform averaging."""
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    dims = image.shape
    padded, _ = pad_to(image.astype(np.float32), np.zeros(dims, np.uint8), patch_size)
    acc = np.zeros((net.config.num_classes,) + padded.shape, dtype=np.float64)
    hits = np.zeros(padded.shape, dtype=np.float64)
    starts = [_window_starts(n, p, overlap) for n, p in zip(padded.shape, patch_size)]
    net.eval()
    with no_grad():
        for z in starts[0]:
            for y in starts[1]:
                for x in starts[2]:
                    sl = (slice(z, z + patch_size[0]), slice(y, y + patch_size[1]), slice(x, x + patch_size[2]))
                    out = net.forward(Tensor(padded[sl][None, None]))
                    acc[(slice(None),) + sl] += out.data[0]
                    hits[sl] += 1.0
    logits = acc / hits
    return logits[:, : dims[0], : dims[1], : dims[2]]


def infer(net: Network, volume: CtVolume, plan: PreprocessPlan, patch_size=None, overlap: float = 0.5) -> LabelVolume:
    """Segment ``volume`` on the plan's grid; labels are returned on the native grid.

    A volume whose ``intensity_units`` is ``"normalized"`` skips normalization.
    """
    patch = tuple(plan.patch_size if patch_size is None else patch_size)
    native = volume.meta
    if tuple(native.spacing_mm) != plan.target_spacing:
        img = apply_plan(volume, plan).data
    elif native.intensity_units == "normalized":
        img = volume.data.astype(np.float32)
    else:
        img = normalize(volume.data, plan)
    pred = predict_logits(net, img, patch, overlap).argmax(axis=0).astype(np.uint8)
    if pred.shape != native.dims:
        pred = resample_array(pred, native.dims, 0).astype(np.uint8)
    meta = VolumeMeta(native.dims, native.spacing_mm, "label", native.orientation)
    return LabelVolume(meta, pred, num_classes=net.config.num_classes)


def log_to_stream(stream=None):
    """Log callback writing one JSON record per line."""
    stream = stream or sys.stdout

    def write(rec: dict) -> None:
        stream.write(json.dumps(rec, sort_keys=True) + "\n")
        stream.flush()

    return write


def evaluate_training_fit(net: Network, data: TrainingData, plan: PreprocessPlan, patch_size=None) -> list[float]:
    """Foreground DSC of sliding-window predictions against each training label."""
    patch = tuple(plan.patch_size if patch_size is None else patch_size)
    out = []
    for img, lab in zip(data.images, data.labels):
        pred = predict_logits(net, img, patch).argmax(axis=0)
        out.append(foreground_dsc(pred, lab, net.config.num_classes))
    return out
