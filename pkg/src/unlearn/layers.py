"""Network blocks and the three subnetworks: feature extractor f, digit head g, bias head h.

f's output feeds both g and h.  h predicts, for every colour channel and
every cell of the subsampled grid, which of ``levels`` intensity bins the
cell falls in.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int

    @property
    def pad(self) -> int:
        return self.kernel // 2


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int = 3
    image_size: int = 28
    f_convs: tuple[ConvSpec, ...] = (ConvSpec(16, 3, 1), ConvSpec(32, 3, 2))
    g_convs: tuple[ConvSpec, ...] = (ConvSpec(64, 3, 2), ConvSpec(64, 3, 1))
    h_convs: tuple[ConvSpec, ...] = (ConvSpec(32, 3, 2),)
    n_classes: int = 10
    bias_channels: int = 3
    levels: int = 8

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        size = self.image_size
        for c in self.f_convs:
            size = _conv_out(size, c)
        return (self.f_convs[-1].out_channels, size, size)

    @property
    def grid(self) -> int:
        size = self.feature_shape[1]
        for c in self.h_convs:
            size = _conv_out(size, c)
        return size

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        raw = json.loads(text)
        for key in ("f_convs", "g_convs", "h_convs"):
            raw[key] = tuple(ConvSpec(**c) for c in raw[key])
        return cls(**raw)


def tiny_arch(image_size: int = 8) -> ArchSpec:
    """A few-channel variant used by gradient checks."""
    return ArchSpec(
        image_size=image_size,
        f_convs=(ConvSpec(2, 3, 1), ConvSpec(3, 3, 2)),
        g_convs=(ConvSpec(4, 3, 2), ConvSpec(4, 3, 1)),
        h_convs=(ConvSpec(3, 3, 1),),
        n_classes=3,
        levels=4,
    )


def _conv_out(size: int, c: ConvSpec) -> int:
    return (size + 2 * c.pad - c.kernel) // c.stride + 1


@dataclass
class ParamSet:
    arch: ArchSpec
    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.params if k.startswith(prefix)]

    def count(self, prefix: str = "") -> int:
        return sum(self.params[k].data.size for k in self.names(prefix))

    def astype(self, dtype) -> "ParamSet":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return ParamSet(self.arch, params, buffers)

    def copy(self) -> "ParamSet":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        for name in sorted(self.buffers):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.buffers[name]).tobytes())
        return h.hexdigest()


def _stack(arch: ArchSpec):
    """(name, in_channels, ConvSpec, has_bn) for every conv in f, g, h order."""
    layers = []
    c = arch.in_channels
    for i, spec in enumerate(arch.f_convs, 1):
        layers.append((f"f.conv{i}", c, spec, True))
        c = spec.out_channels
    feat = c
    for i, spec in enumerate(arch.g_convs, 1):
        layers.append((f"g.conv{i}", c, spec, True))
        c = spec.out_channels
    g_width = c
    c = feat
    for i, spec in enumerate(arch.h_convs, 1):
        layers.append((f"h.conv{i}", c, spec, True))
        c = spec.out_channels
    head = ConvSpec(arch.bias_channels * arch.levels, 1, 1)
    layers.append((f"h.conv{len(arch.h_convs) + 1}", c, head, False))
    return layers, g_width


def expected_param_count(arch: ArchSpec) -> dict[str, int]:
    counts = {"f": 0, "g": 0, "h": 0}
    layers, g_width = _stack(arch)
    for name, cin, spec, bn in layers:
        n = spec.out_channels * cin * spec.kernel ** 2
        n += 2 * spec.out_channels if bn else spec.out_channels
        counts[name[0]] += n
    counts["g"] += g_width * arch.n_classes + arch.n_classes
    return counts


def init_params(arch: ArchSpec = ArchSpec(), seed: int = 0, dtype=np.float64) -> ParamSet:
    """He-normal conv/FC weights, zero conv/FC biases, BN gamma 1 and beta 0.

    Conv layers followed by batchnorm carry no bias of their own.
    """
    rng = np.random.default_rng(seed)
    ps = ParamSet(arch)
    layers, g_width = _stack(arch)

    def normal(shape, fan_in):
        return Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype),
                      requires_grad=True)

    for name, cin, spec, bn in layers:
        shape = (spec.out_channels, cin, spec.kernel, spec.kernel)
        ps.params[f"{name}.weight"] = normal(shape, cin * spec.kernel ** 2)
        if bn:
            bn_name = name.replace("conv", "bn")
            ps.params[f"{bn_name}.gamma"] = Tensor(np.ones(spec.out_channels, dtype), requires_grad=True)
            ps.params[f"{bn_name}.beta"] = Tensor(np.zeros(spec.out_channels, dtype), requires_grad=True)
            ps.buffers[f"{bn_name}.running_mean"] = np.zeros(spec.out_channels, dtype)
            ps.buffers[f"{bn_name}.running_var"] = np.ones(spec.out_channels, dtype)
        else:
            ps.params[f"{name}.bias"] = Tensor(np.zeros(spec.out_channels, dtype), requires_grad=True)
    ps.params["g.fc.weight"] = normal((g_width, arch.n_classes), g_width)
    ps.params["g.fc.bias"] = Tensor(np.zeros(arch.n_classes, dtype), requires_grad=True)
    return ps


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: tuple[np.ndarray, np.ndarray],
                mode: str = "train", momentum_bn: float = BN_MOMENTUM, eps_bn: float = BN_EPS,
                update_stats: bool = True) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, not {mode!r}")
    return ad.batchnorm2d(x, gamma, beta, running[0], running[1], mode == "train",
                          momentum_bn, eps_bn, update_stats)


def gradient_reversal(x: Tensor, scale: float) -> Tensor:
    return ad.gradient_reversal(x, scale)


def _conv_bn_relu(x, ps: ParamSet, name: str, spec: ConvSpec, mode: str,
                  frozen: bool) -> Tensor:
    get = (lambda k: ad.stop_gradient(ps.params[k])) if frozen else ps.params.__getitem__
    y = ad.conv2d(x, get(f"{name}.weight"), None, spec.stride, spec.pad)
    bn = name.replace("conv", "bn")
    y = batchnorm2d(y, get(f"{bn}.gamma"), get(f"{bn}.beta"),
                    (ps.buffers[f"{bn}.running_mean"], ps.buffers[f"{bn}.running_var"]),
                    mode, update_stats=not frozen)
    return ad.relu(y)


def forward_f(x: Tensor, ps: ParamSet, mode: str = "train") -> Tensor:
    arch = ps.arch
    expect = (arch.in_channels, arch.image_size, arch.image_size)
    if x.data.ndim != 4 or x.shape[1:] != expect:
        raise ValueError(f"f expects [N,{expect[0]},{expect[1]},{expect[2]}], got {x.shape}")
    for i, spec in enumerate(arch.f_convs, 1):
        x = _conv_bn_relu(x, ps, f"f.conv{i}", spec, mode, False)
    return x


def forward_g(feat: Tensor, ps: ParamSet, mode: str = "train") -> Tensor:
    _check_feature(feat, ps.arch)
    x = feat
    for i, spec in enumerate(ps.arch.g_convs, 1):
        x = _conv_bn_relu(x, ps, f"g.conv{i}", spec, mode, False)
    pooled = ad.mean(x, axis=(2, 3))
    return ad.matmul(pooled, ps["g.fc.weight"]) + ps["g.fc.bias"]


def forward_h(feat: Tensor, ps: ParamSet, mode: str = "train", frozen: bool = False) -> Tensor:
    """Bias logits shaped [N, bias_channels, levels, grid, grid].

    With ``frozen`` h's parameters are treated as constants (no gradient
    reaches them) and batchnorm running statistics are left untouched.
    """
    arch = ps.arch
    _check_feature(feat, arch)
    x = feat
    for i, spec in enumerate(arch.h_convs, 1):
        x = _conv_bn_relu(x, ps, f"h.conv{i}", spec, mode, frozen)
    last = f"h.conv{len(arch.h_convs) + 1}"
    w, b = ps[f"{last}.weight"], ps[f"{last}.bias"]
    if frozen:
        w, b = ad.stop_gradient(w), ad.stop_gradient(b)
    x = ad.conv2d(x, w, b, 1, 0)
    n, _, gh, gw = x.shape
    return x.reshape(n, arch.bias_channels, arch.levels, gh, gw)


def _check_feature(feat: Tensor, arch: ArchSpec) -> None:
    if feat.data.ndim != 4 or feat.shape[1:] != arch.feature_shape:
        raise ValueError(f"expected features [N,{','.join(map(str, arch.feature_shape))}], got {feat.shape}")


# ---------------------------------------------------------------------------
# serialization: <path> holds raw little-endian float64, <path>.manifest lists entries

MANIFEST_SUFFIX = ".manifest"


def save_params(ps: ParamSet, path) -> None:
    path = Path(path)
    lines = [f"arch {ps.arch.to_json()}"]
    offset = 0
    with open(path, "wb") as fh:
        entries = [("param", k, v.data) for k, v in ps.params.items()]
        entries += [("buffer", k, v) for k, v in ps.buffers.items()]
        for kind, name, arr in entries:
            blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(blob)
            shape = "x".join(map(str, arr.shape)) or "scalar"
            lines.append(f"{kind} {name} {shape} {offset}")
            offset += len(blob)
    Path(str(path) + MANIFEST_SUFFIX).write_text("\n".join(lines) + "\n")


def load_params(path, dtype=np.float64) -> ParamSet:
    path = Path(path)
    lines = Path(str(path) + MANIFEST_SUFFIX).read_text().splitlines()
    if not lines or not lines[0].startswith("arch "):
        raise ValueError(f"{path}: malformed parameter manifest")
    ps = ParamSet(ArchSpec.from_json(lines[0][5:]))
    raw = path.read_bytes()
    for line in lines[1:]:
        kind, name, shape_s, offset_s = line.split()
        shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
        count = int(np.prod(shape)) if shape else 1
        offset = int(offset_s)
        if offset + 8 * count > len(raw):
            raise ValueError(f"{path}: truncated at {name}")
        arr = np.frombuffer(raw, "<f8", count, offset).reshape(shape).astype(dtype)
        if kind == "param":
            ps.params[name] = Tensor(arr, requires_grad=True)
        elif kind == "buffer":
            ps.buffers[name] = arr
        else:
            raise ValueError(f"{path}: unknown entry kind {kind!r}")
    return ps
