"""Encoder-decoder segmentation networks of the U-Net family at configurable scale.

Four styles:

* ``unet``          -- double 3x3 conv stages, concatenation skips.
* ``vgg_concat_11`` -- VGG11-like encoder (convs per stage 1-1-2-2-2), concat skips.
* ``vgg_concat_16`` -- VGG16-like encoder (2-2-3-3-3), concat skips.
* ``residual_add``  -- ResNet-like encoder (7x7/2 stem, max-pool, residual stages)
  with LinkNet-style decoder blocks merged by addition.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import ShapeError, Tensor

STYLES = ("unet", "vgg_concat_11", "vgg_concat_16", "residual_add")
VGG_STAGE_CONVS = {"vgg_concat_11": (1, 1, 2, 2, 2), "vgg_concat_16": (2, 2, 3, 3, 3)}


@dataclass
class NetworkSpec:
    style: str = "unet"
    input_channels: int = 3
    base_width: int = 8
    depth: int = 3
    output_classes: int = 1
    # convs per encoder stage for the vgg styles; None means the style default
    stage_convs: tuple[int, ...] | None = None
    blocks_per_stage: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.stage_convs is not None:
            self.stage_convs = tuple(int(v) for v in self.stage_convs)

    def validate(self):
        errors = []
        if self.style not in STYLES:
            errors.append(f"style must be one of {STYLES}, got {self.style!r}")
        if self.depth < 1:
            errors.append("depth must be >= 1")
        if self.base_width < 1:
            errors.append("base_width must be >= 1")
        if self.input_channels < 1:
            errors.append("input_channels must be >= 1")
        if self.output_classes < 1:
            errors.append("output_classes must be >= 1")
        if self.blocks_per_stage < 1:
            errors.append("blocks_per_stage must be >= 1")
        if self.stage_convs is not None and any(v < 1 for v in self.stage_convs):
            errors.append("stage_convs entries must be >= 1")
        if errors:
            raise ConfigError("; ".join(errors))

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["stage_convs"] is not None:
            d["stage_convs"] = list(d["stage_convs"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


# ---------------------------------------------------------------- modules

class Module:
    training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args):
        return self.forward(*args)


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=None, bias=True):
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad
        self.weight = Tensor(_he_uniform(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, rng, k=4, stride=2, pad=1, bias=True):
        self.stride, self.pad = stride, pad
        # each output pixel receives cin * (k / stride)^2 contributions
        fan_in = cin * max(k // stride, 1) ** 2
        self.weight = Tensor(_he_uniform(rng, (cin, cout, k, k), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None

    def forward(self, x):
        return T.transposed_conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)

    def forward(self, x):
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             self.training, self.momentum, self.eps)


class ConvRelu(Module):
    def __init__(self, cin, cout, rng):
        self.conv = Conv2d(cin, cout, 3, rng)

    def forward(self, x):
        return T.relu(self.conv(x))


class ConvStack(Module):
    def __init__(self, cin, cout, n, rng):
        self.layers = [ConvRelu(cin if i == 0 else cout, cout, rng) for i in range(n)]

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class UpConcatBlock(Module):
    """Transposed-conv upsampling to ``mid`` channels then ReLU (TernausNet decoder)."""

    def __init__(self, cin, mid, cout, rng):
        self.conv = ConvRelu(cin, mid, rng)
        self.up = ConvTranspose2d(mid, cout, rng)

    def forward(self, x):
        return T.relu(self.up(self.conv(x)))


class LinkDecoderBlock(Module):
    """1x1 conv (filters / 4) -> BN -> ReLU -> transposed conv x2 -> BN -> ReLU -> 1x1 conv -> BN -> ReLU."""

    def __init__(self, cin, cout, rng):
        mid = max(cin // 4, 1)
        self.mid = mid
        self.reduce = Conv2d(cin, mid, 1, rng, bias=False)
        self.bn1 = BatchNorm2d(mid)
        self.up = ConvTranspose2d(mid, mid, rng, bias=False)
        self.bn2 = BatchNorm2d(mid)
        self.expand = Conv2d(mid, cout, 1, rng, bias=False)
        self.bn3 = BatchNorm2d(cout)

    def forward(self, x):
        x = T.relu(self.bn1(self.reduce(x)))
        x = T.relu(self.bn2(self.up(x)))
        return T.relu(self.bn3(self.expand(x)))


class ResidualBlock(Module):
    def __init__(self, cin, cout, stride, rng):
        self.conv1 = Conv2d(cin, cout, 3, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, rng, stride=stride, pad=0, bias=False)
            self.proj_bn = BatchNorm2d(cout)
        else:
            self.proj = None

    def forward(self, x):
        y = T.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        shortcut = self.proj_bn(self.proj(x)) if self.proj is not None else x
        return T.relu(T.merge(y, shortcut, "add"))


# ---------------------------------------------------------------- networks

class Network(Module):
    def __init__(self, spec: NetworkSpec):
        self.spec = spec

    @property
    def multiple(self) -> int:
        return 2 ** self.spec.depth

    def head(self, x):
        if self.spec.output_classes == 1:
            return T.sigmoid(x)
        return softmax_channels(x)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ConfigError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ConfigError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=state[name].dtype)
        for name, b in buffers.items():
            b[...] = state[name]

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name, value in list(vars(m).items()):
                if isinstance(value, np.ndarray):
                    setattr(m, name, value.astype(dtype))
        return self

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def clone(self) -> "Network":
        return copy.deepcopy(self)


class UNet(Network):
    def __init__(self, spec, rng):
        super().__init__(spec)
        w, d = spec.base_width, spec.depth
        widths = [w * 2 ** i for i in range(d + 1)]
        self.widths = widths
        self.enc = [ConvStack(spec.input_channels if i == 0 else widths[i - 1], widths[i], 2, rng)
                    for i in range(d + 1)]
        self.up = [ConvTranspose2d(widths[i + 1], widths[i], rng) for i in range(d)]
        self.dec = [ConvStack(2 * widths[i], widths[i], 2, rng) for i in range(d)]
        self.final = Conv2d(widths[0], spec.output_classes, 1, rng)

    def forward(self, x):
        skips = []
        for i, stage in enumerate(self.enc):
            x = stage(x)
            if i < self.spec.depth:
                skips.append(x)
                x = T.maxpool2d(x, 2, 2)
        for i in reversed(range(self.spec.depth)):
            x = T.relu(self.up[i](x))
            x = self.dec[i](T.merge(x, skips[i], "concat_channels"))
        return self.head(self.final(x))


class VGGConcatNet(Network):
    def __init__(self, spec, rng):
        super().__init__(spec)
        w, d = spec.base_width, spec.depth
        pattern = spec.stage_convs or VGG_STAGE_CONVS[spec.style]
        enc_w = [w * 2 ** min(i, 3) for i in range(d)]
        half = [max(c // 2, 1) for c in enc_w]
        self.enc_widths = enc_w
        self.enc = [ConvStack(spec.input_channels if i == 0 else enc_w[i - 1], enc_w[i],
                              pattern[min(i, len(pattern) - 1)], rng) for i in range(d)]
        self.center = UpConcatBlock(enc_w[-1], enc_w[-1], half[-1], rng)
        # dec[i] consumes concat(previous decoder output, encoder stage i)
        self.dec = [None] + [UpConcatBlock(enc_w[i] + half[i], enc_w[i], half[i - 1], rng) for i in range(1, d)]
        self.dec0 = ConvRelu(enc_w[0] + half[0], half[0], rng)
        self.final = Conv2d(half[0], spec.output_classes, 1, rng)

    def forward(self, x):
        skips = []
        for stage in self.enc:
            x = stage(x)
            skips.append(x)
            x = T.maxpool2d(x, 2, 2)
        x = self.center(x)
        for i in reversed(range(1, self.spec.depth)):
            x = self.dec[i](T.merge(x, skips[i], "concat_channels"))
        x = self.dec0(T.merge(x, skips[0], "concat_channels"))
        return self.head(self.final(x))


class ResidualAddNet(Network):
    def __init__(self, spec, rng):
        super().__init__(spec)
        w, d = spec.base_width, spec.depth
        chans = [w] + [w * 2 ** max(i - 1, 0) for i in range(1, d)]
        self.chans = chans
        self.stem = Conv2d(spec.input_channels, w, 7, rng, stride=2, pad=3, bias=False)
        self.stem_bn = BatchNorm2d(w)
        self.stages = []
        for i in range(1, d):
            stride = 1 if i == 1 else 2
            blocks = [ResidualBlock(chans[i - 1], chans[i], stride, rng)]
            blocks += [ResidualBlock(chans[i], chans[i], 1, rng) for _ in range(spec.blocks_per_stage - 1)]
            self.stages.append(_Sequence(blocks))
        self.dec = [LinkDecoderBlock(chans[i], chans[i - 1], rng) for i in range(1, d)]
        self.final_up = LinkDecoderBlock(chans[0], chans[0], rng)
        self.final = Conv2d(chans[0], spec.output_classes, 1, rng)

    def encode(self, x):
        x = T.relu(self.stem_bn(self.stem(x)))
        feats = [x]
        for i, stage in enumerate(self.stages, start=1):
            if i == 1:
                x = T.maxpool2d(x, 2, 2)
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x):
        feats = self.encode(x)
        x = feats[-1]
        for i in reversed(range(1, self.spec.depth)):
            x = T.merge(self.dec[i - 1](x), feats[i - 1], "add")
        return self.head(self.final(self.final_up(x)))


class _Sequence(Module):
    def __init__(self, layers):
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def softmax_channels(x: Tensor) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return T._record("softmax", (x,), out, backward)


def build(spec: NetworkSpec) -> Network:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.style == "unet":
        net = UNet(spec, rng)
    elif spec.style.startswith("vgg_concat"):
        net = VGGConcatNet(spec, rng)
    else:
        net = ResidualAddNet(spec, rng)
    for name, p in net.named_parameters():
        p.name = name
    return net


def check_input(net: Network, shape) -> None:
    if len(shape) != 4:
        raise ShapeError(f"expected N x C x H x W input, got {shape}")
    if shape[1] != net.spec.input_channels:
        raise ShapeError(f"expected {net.spec.input_channels} input channels, got {shape[1]}")
    m = net.multiple
    if shape[2] % m or shape[3] % m:
        raise ShapeError(f"spatial extent {shape[2]}x{shape[3]} not divisible by 2^depth = {m}")


def forward_segment(net: Network, batch) -> Tensor:
    """Per-pixel probabilities, N x classes x H x W, same spatial size as the input."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=net.dtype))
    check_input(net, x.shape)
    if x.dtype != net.dtype:
        x = Tensor(x.data.astype(net.dtype))
    return net(x)


def parameter_count(net: Module) -> int:
    return int(sum(p.size for p in net.parameters()))


def import_flat_weights(net: Network, source, dtype="<f4") -> None:
    """Fill parameters, in ``named_parameters`` order, from a flat little-endian array.

    ``source`` is a path or a bytes object. The element count must match exactly.
    """
    raw = Path(source).read_bytes() if isinstance(source, (str, Path)) else bytes(source)
    flat = np.frombuffer(raw, dtype=dtype)
    total = parameter_count(net)
    if flat.size != total:
        raise ConfigError(f"weight file holds {flat.size} values, network has {total} parameters")
    offset = 0
    for _, p in net.named_parameters():
        p.data = flat[offset: offset + p.size].reshape(p.shape).astype(p.dtype)
        offset += p.size
