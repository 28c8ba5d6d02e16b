"""Binary checkpoint container.

Layout (little-endian)::

    magic   8 bytes  b"LSEGCKPT"
    version u32
    meta    u64 length + UTF-8 JSON (sorted keys)
    count   u64
    blobs   count x (u32 name length, name, u8 kind, u32 ndim, ndim x u64 shape, float32 data)

``kind`` is 0 for parameters, 1 for batch-norm buffers and 2 for optimizer
momentum. Identical states serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import Network, NetworkConfig
from .optim import SGD

MAGIC = b"LSEGCKPT"
VERSION = 1
KIND_PARAM, KIND_BUFFER, KIND_MOMENTUM = 0, 1, 2


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Network weights, BN statistics, optimizer momentum and run metadata.

    ``epoch`` is the number of completed epochs.
    """

    network_config: NetworkConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    train_config: dict = field(default_factory=dict)
    plan: dict | None = None
    classes: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def capture(cls, net: Network, opt: SGD | None = None, **kw) -> "Checkpoint":
        return cls(
            net.config,
            {n: t.data.copy() for n, t in net.parameters.items()},
            {n: b.copy() for n, b in net.buffers().items()},
            {n: v.copy() for n, v in opt.velocity.items()} if opt is not None else {},
            **kw,
        )

    def build_network(self, seed: int = 0) -> Network:
        net = Network(self.network_config, seed=seed)
        load_into(net, self.params, self.buffers)
        return net

    def restore_optimizer(self, opt: SGD) -> None:
        if not self.momentum:
            return
        if set(self.momentum) != set(opt.velocity):
            raise CheckpointError("momentum buffers do not match the network parameters")
        for n, v in self.momentum.items():
            opt.velocity[n][...] = v

    def meta(self) -> dict:
        return {
            "network_config": self.network_config.to_dict(),
            "epoch": self.epoch,
            "train_config": self.train_config,
            "plan": self.plan,
            "classes": list(self.classes),
            "extra": self.extra,
        }


def load_into(net: Network, params: dict, buffers: dict) -> None:
    """Copy arrays into ``net`` in place, checking names and shapes."""
    mine, bufs = net.parameters, net.buffers()
    missing = sorted(set(mine) - set(params)) + sorted(set(bufs) - set(buffers))
    extra = sorted(set(params) - set(mine)) + sorted(set(buffers) - set(bufs))
    if missing or extra:
        raise CheckpointError(f"state mismatch; missing {missing}, unexpected {extra}")
    for n, t in mine.items():
        if t.data.shape != params[n].shape:
            raise CheckpointError(f"shape mismatch for {n}: {t.data.shape} vs {params[n].shape}")
        t.data[...] = params[n]
    for n, b in bufs.items():
        b[...] = buffers[n]


def _blob(name: str, kind: int, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", kind, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = []
    for kind, group in ((KIND_PARAM, ckpt.params), (KIND_BUFFER, ckpt.buffers), (KIND_MOMENTUM, ckpt.momentum)):
        for name in group:
            blobs.append(_blob(name, kind, group[name]))
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta)), meta, struct.pack("<Q", len(blobs))]
    return b"".join(out + blobs)


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", raw, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack_from("<Q", raw, 12)
        pos = 20
        meta = json.loads(raw[pos : pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        groups = ({}, {}, {})
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            kind, ndim = struct.unpack_from("<BI", raw, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(raw):
                raise CheckpointError(f"truncated blob {name!r}")
            groups[kind][name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(shape)
            pos += 4 * n
    except (struct.error, IndexError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    return Checkpoint(
        NetworkConfig.from_dict(meta["network_config"]),
        groups[KIND_PARAM],
        groups[KIND_BUFFER],
        groups[KIND_MOMENTUM],
        int(meta["epoch"]),
        meta.get("train_config", {}),
        meta.get("plan"),
        list(meta.get("classes", [])),
        meta.get("extra", {}),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
