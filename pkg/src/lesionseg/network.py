"""Inception nnU-Net: Mini Inception blocks, Inception Downsampling, U-shaped assembly.

Layout (``S = num_stages``)::

    encoder  stage i < S-1 : MiniInception(c_in -> c_i) -> skip_i -> InceptionDownsampling(c_i -> c_{i+1})
    bottleneck             : MiniInception(c_{S-1} -> c_{S-1})
    decoder  stage i = S-2..0 : TransposedConv(c_{i+1} -> c_i), concat skip_i, MiniInception(2 c_i -> c_i)
    head                   : 1x1x1 conv c_0 -> num_classes

Branch outputs are merged by elementwise sum. A convolution that feeds a
batch norm carries no bias (the BN shift absorbs it).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class VariantFlags:
    """Ablation toggles. The always-on paths (Mini Inception left branch,
    Inception Downsampling right branch and projection) keep every block non-empty."""

    downsampling_branch_left: bool = True
    mini_inception_branch_right: bool = True
    mini_inception_residual: bool = True

    def as_tuple(self) -> tuple[bool, bool, bool]:
        return (self.downsampling_branch_left, self.mini_inception_branch_right, self.mini_inception_residual)

    def issubset(self, other: "VariantFlags") -> bool:
        return all(b <= o for b, o in zip(self.as_tuple(), other.as_tuple()))


VARIANT_ROWS: dict[str, VariantFlags] = {
    "I": VariantFlags(False, False, False),
    "II": VariantFlags(False, True, True),
    "III": VariantFlags(True, False, True),
    "IV": VariantFlags(True, True, False),
    "V": VariantFlags(True, True, True),
}


@dataclass(frozen=True)
class NetworkConfig:
    num_stages: int = 4
    base_channels: int = 16
    num_classes: int = 8
    input_channels: int = 1
    variant: VariantFlags = field(default_factory=VariantFlags)
    deep_supervision: bool = False
    max_channels: int = 320

    def __post_init__(self):
        if self.num_stages < 2:
            raise ValueError(f"num_stages must be >= 2, got {self.num_stages}")
        if self.base_channels < 1 or self.input_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must include background and >= 1 foreground, got {self.num_classes}")
        if self.max_channels < self.base_channels:
            raise ValueError("max_channels must be >= base_channels")

    def channels(self, stage: int) -> int:
        return min(self.base_channels * 2**stage, self.max_channels)

    @property
    def divisor(self) -> int:
        """Patch extents must be divisible by this."""
        return 2 ** (self.num_stages - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["variant"] = VariantFlags(**d.get("variant", {}))
        return cls(**d)

    def trunk_signature(self) -> dict:
        """Everything except the class count; equal signatures mean transferable trunks."""
        d = self.to_dict()
        d.pop("num_classes")
        return d


def make_variant(config: NetworkConfig, row: str) -> NetworkConfig:
    """Return ``config`` with the flags of ablation row ``I``..``V``."""
    try:
        flags = VARIANT_ROWS[row]
    except KeyError:
        raise ValueError(f"unknown variant row {row!r}; expected one of {list(VARIANT_ROWS)}") from None
    return NetworkConfig(**{**config.__dict__, "variant": flags})


class Module:
    """Minimal container: parameters are Tensors, children are Modules, in attribute order."""

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


def _he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, bias: bool = False, dtype=np.float32):
        self.weight = _he_normal(rng, (cout, cin, k, k, k), cin * k**3, dtype)
        if bias:
            self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        else:
            self.bias = None
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, stride=self.stride)


class TransposedConv(Module):
    def __init__(self, rng, cin: int, cout: int, dtype=np.float32):
        # each output voxel receives exactly cin contributions
        self.weight = _he_normal(rng, (cin, cout, 2, 2, 2), cin, dtype)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.transposed_conv3d(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, c: int, dtype=np.float32, shift: bool = True):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True) if shift else None
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)

    def named_buffers(self, prefix: str = ""):
        yield f"{prefix}running_mean", self.running_mean
        yield f"{prefix}running_var", self.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batchnorm3d(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class ConvBN(Module):
    def __init__(self, rng, cin, cout, k, stride=1, dtype=np.float32, shift=True):
        self.conv = Conv(rng, cin, cout, k, stride, dtype=dtype)
        self.bn = BatchNorm(cout, dtype, shift)

    def __call__(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class MiniInception(Module):
    """Two-branch residual block at constant resolution.

    left:  conv3-BN-ReLU-conv3-BN; right: conv1-BN-conv1-BN; residual: identity,
    or conv1-BN projection when the channel count changes. The first BN of the
    right branch has no shift: with no nonlinearity before the second BN, a
    shift there would be cancelled and could never learn.
    """

    def __init__(self, rng, cin: int, cout: int, flags: VariantFlags, dtype=np.float32):
        self.cin, self.cout = cin, cout
        self.left1 = ConvBN(rng, cin, cout, 3, dtype=dtype)
        self.left2 = ConvBN(rng, cout, cout, 3, dtype=dtype)
        self.right1 = self.right2 = None
        if flags.mini_inception_branch_right:
            self.right1 = ConvBN(rng, cin, cout, 1, dtype=dtype, shift=False)
            self.right2 = ConvBN(rng, cout, cout, 1, dtype=dtype)
        self.residual = flags.mini_inception_residual
        self.proj = ConvBN(rng, cin, cout, 1, dtype=dtype) if self.residual and cin != cout else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ValueError(f"MiniInception expects {self.cin} channels, got {x.shape[1]}")
        out = self.left2(ops.relu(self.left1(x)))
        if self.right1 is not None:
            out = ops.add(out, self.right2(self.right1(x)))
        if self.residual:
            out = ops.add(out, self.proj(x) if self.proj is not None else x)
        return ops.relu(out)


class InceptionDownsampling(Module):
    """Two-branch block halving resolution.

    left: stride-2 conv3-BN-ReLU-conv3-BN; right: avgpool-conv1-BN;
    residual: stride-2 conv1-BN projection (always present).
    """

    def __init__(self, rng, cin: int, cout: int, flags: VariantFlags, dtype=np.float32):
        self.cin, self.cout = cin, cout
        self.left1 = self.left2 = None
        if flags.downsampling_branch_left:
            self.left1 = ConvBN(rng, cin, cout, 3, stride=2, dtype=dtype)
            self.left2 = ConvBN(rng, cout, cout, 3, dtype=dtype)
        self.right = ConvBN(rng, cin, cout, 1, dtype=dtype)
        self.proj = ConvBN(rng, cin, cout, 1, stride=2, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ValueError(f"InceptionDownsampling expects {self.cin} channels, got {x.shape[1]}")
        if any(n % 2 for n in x.shape[2:]):
            raise ValueError(f"InceptionDownsampling needs even spatial extents, got {x.shape[2:]}")
        out = ops.add(self.right(ops.avgpool3d(x)), self.proj(x))
        if self.left1 is not None:
            out = ops.add(self.left2(ops.relu(self.left1(x))), out)
        return ops.relu(out)


class Network(Module):
    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        flags = config.variant
        s = config.num_stages
        self.encoder: list[MiniInception] = []
        self.down: list[InceptionDownsampling] = []
        cin = config.input_channels
        for i in range(s - 1):
            self.encoder.append(MiniInception(rng, cin, config.channels(i), flags, dtype))
            self.down.append(InceptionDownsampling(rng, config.channels(i), config.channels(i + 1), flags, dtype))
            cin = config.channels(i + 1)
        self.bottleneck = MiniInception(rng, cin, cin, flags, dtype)
        # decoder lists run from the deepest stage to the shallowest
        self.up: list[TransposedConv] = []
        self.decoder: list[MiniInception] = []
        for i in reversed(range(s - 1)):
            c = config.channels(i)
            self.up.append(TransposedConv(rng, config.channels(i + 1), c, dtype))
            self.decoder.append(MiniInception(rng, 2 * c, c, flags, dtype))
        self.head = Conv(rng, config.channels(0), config.num_classes, 1, bias=True, dtype=dtype)
        self.aux_heads: list[Conv] = []
        if config.deep_supervision:
            # one head per decoder stage below full resolution, deepest first
            for i in reversed(range(1, s - 1)):
                self.aux_heads.append(Conv(rng, config.channels(i), config.num_classes, 1, bias=True, dtype=dtype))
        self._params = dict(self.named_parameters())
        for name, t in self._params.items():
            t.name = name

    @property
    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.named_buffers())

    def head_parameter_names(self) -> list[str]:
        return [n for n in self._params if n.startswith("head.") or n.startswith("aux_heads.")]

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def forward(self, x: Tensor | np.ndarray, return_aux: bool = False):
        """Logits ``[B, num_classes, D, H, W]``; with ``return_aux`` a list
        ``[main, aux_deepest, ..., aux_shallowest]`` (aux at reduced resolution)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 5 or x.shape[1] != self.config.input_channels:
            raise ValueError(f"expected input [B, {self.config.input_channels}, D, H, W], got {x.shape}")
        div = self.config.divisor
        if any(n % div for n in x.shape[2:]):
            raise ValueError(f"spatial extents {x.shape[2:]} must be divisible by {div}")
        skips = []
        h = x
        for enc, down in zip(self.encoder, self.down):
            h = enc(h)
            skips.append(h)
            h = down(h)
        h = self.bottleneck(h)
        aux = []
        for j, (up, dec) in enumerate(zip(self.up, self.decoder)):
            h = dec(ops.concat_channels(up(h), skips.pop()))
            if return_aux and j < len(self.aux_heads):
                aux.append(self.aux_heads[j](h))
        logits = self.head(h)
        if return_aux:
            return [logits] + aux
        return logits

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {n: t.data for n, t in self._params.items()}
        out.update(self.buffers())
        return out


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> Network:
    return Network(config, seed=seed, dtype=dtype)


def parameter_count(net: Network) -> int:
    return net.parameter_count()


def forward(net: Network, x) -> Tensor:
    return net.forward(x)


def analytic_parameter_count(config: NetworkConfig) -> int:
    """Closed-form parameter count, independent of the module tree.

    conv feeding BN: ``Cout*Cin*k^3``; BN: ``2C`` (``C`` for the shift-free
    BN inside the Mini Inception right branch); head conv: ``Cout*Cin + Cout``;
    transposed conv: ``Cin*Cout*8 + Cout``.
    """
    f = config.variant

    def convbn(cin, cout, k, shift=True):
        return cout * cin * k**3 + (2 if shift else 1) * cout

    def mini(cin, cout):
        n = convbn(cin, cout, 3) + convbn(cout, cout, 3)
        if f.mini_inception_branch_right:
            n += convbn(cin, cout, 1, shift=False) + convbn(cout, cout, 1)
        if f.mini_inception_residual and cin != cout:
            n += convbn(cin, cout, 1)
        return n

    def down(cin, cout):
        n = convbn(cin, cout, 1) * 2
        if f.downsampling_branch_left:
            n += convbn(cin, cout, 3) + convbn(cout, cout, 3)
        return n

    s, ch = config.num_stages, config.channels
    total = 0
    cin = config.input_channels
    for i in range(s - 1):
        total += mini(cin, ch(i)) + down(ch(i), ch(i + 1))
        cin = ch(i + 1)
    total += mini(cin, cin)
    for i in range(s - 1):
        total += ch(i + 1) * ch(i) * 8 + ch(i) + mini(2 * ch(i), ch(i))
    k = config.num_classes
    total += ch(0) * k + k
    if config.deep_supervision:
        total += sum(ch(i) * k + k for i in range(1, s - 1))
    return total
