"""SwinSEER generator: shifted-window transformer encoder, SE convolutional decoder.

Encoder features are kept channels-last, ``(N, X, Y, Z, C)``, so token-wise
linear maps act on the trailing axis. The decoder works channels-first,
``(N, C, X, Y, Z)``, like the convolution primitives.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import (
    DiffArray,
    Module,
    concat,
    conv3,
    deconv3,
    gelu,
    getitem,
    glorot,
    global_avg_pool,
    leaky_relu,
    linear,
    matmul,
    moveaxis,
    normalize,
    relu,
    reshape,
    resample_nearest,
    roll,
    sigmoid,
    softmax_last,
    tanh,
    transpose,
)


@dataclass
class GeneratorConfig:
    patch_size: int = 16
    base_features: int = 16
    window_size: int = 2
    stage_depths: tuple[int, ...] = (2, 2)
    heads_per_stage: tuple[int, ...] | None = None
    se_reduction: int = 2
    in_channels: int = 1
    mlp_ratio: int = 4
    seed: int = 0
    arch: str = "swinseer"
    head_bias: float = -1.0  # normalized air; outputs start near the data range

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        if self.heads_per_stage is None:
            self.heads_per_stage = default_heads(self.stage_widths())
        self.heads_per_stage = tuple(int(h) for h in self.heads_per_stage)

    @property
    def num_stages(self) -> int:
        return len(self.stage_depths)

    def stage_widths(self) -> list[int]:
        return [self.base_features * 2**i for i in range(self.num_stages)]

    def stage_extents(self) -> list[int]:
        return [self.patch_size // 2 ** (i + 1) for i in range(self.num_stages)]

    @property
    def bottleneck_extent(self) -> int:
        return self.patch_size // 2 ** (self.num_stages + 1)

    @property
    def bottleneck_width(self) -> int:
        return self.base_features * 2 ** (self.num_stages + 1)

    def decoder_width(self, divisor_log2: int) -> int:
        """Decoder width at extent ``p / 2**divisor_log2``; mirrors the encoder."""
        return self.base_features * 2 ** max(divisor_log2 - 1, 0)

    def validate(self) -> None:
        p, s, w = self.patch_size, self.num_stages, self.window_size
        if s < 2:
            raise ValueError("at least two encoder stages are needed for three output resolutions")
        if p % (2 * 2**s):
            raise ValueError(f"patch size {p} must be divisible by 2*2^{s} = {2 * 2**s}")
        if any(d % 2 or d <= 0 for d in self.stage_depths):
            raise ValueError(f"stage depths {self.stage_depths} must be positive and even (W-MSA/SW-MSA pairs)")
        for i, e in enumerate(self.stage_extents()):
            if w < 1 or e % w:
                raise ValueError(f"window size {w} does not divide stage {i + 1} extent {e}")
        if len(self.heads_per_stage) != s:
            raise ValueError("heads_per_stage must list one entry per stage")
        for width, h in zip(self.stage_widths(), self.heads_per_stage):
            if h < 1 or width % h:
                raise ValueError(f"{h} heads do not divide stage width {width}")
        for m in range(1, s + 1):
            c = self.decoder_width(m)
            if c % self.se_reduction:
                raise ValueError(f"SE reduction {self.se_reduction} does not divide decoder width {c}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_depths"] = list(self.stage_depths)
        d["heads_per_stage"] = list(self.heads_per_stage)
        return d


def default_heads(widths: list[int], base=(1, 2, 4, 8, 16, 32)) -> tuple[int, ...]:
    heads = []
    for i, width in enumerate(widths):
        h = min(base[min(i, len(base) - 1)], width)
        while width % h:
            h -= 1
        heads.append(h)
    return tuple(heads)


# ---------------------------------------------------------------------------
# token-field rearrangements


def space_to_depth(x: DiffArray) -> DiffArray:
    """Group each 2x2x2 block of a channels-last field into 8C channels.

    Output channel ``((dx*2 + dy)*2 + dz)*C + c`` holds channel ``c`` of the
    voxel at offset ``(dx, dy, dz)`` inside the block.
    """
    n, X, Y, Z, c = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ValueError(f"spatial extents {(X, Y, Z)} must be even")
    t = reshape(x, (n, X // 2, 2, Y // 2, 2, Z // 2, 2, c))
    t = transpose(t, (0, 1, 3, 5, 2, 4, 6, 7))
    return reshape(t, (n, X // 2, Y // 2, Z // 2, 8 * c))


def window_partition(x: DiffArray, window: int, shift: int = 0) -> DiffArray:
    """(N, X, Y, Z, C) -> (N * nW, W^3, C), after a cyclic shift by -shift."""
    n, X, Y, Z, c = x.shape
    if not 0 <= shift < window:
        raise ValueError(f"shift {shift} outside [0, {window})")
    for ax, e in zip("XYZ", (X, Y, Z)):
        if e % window:
            raise ValueError(f"axis {ax}: extent {e} not divisible by window {window}")
    if shift:
        x = roll(x, (-shift, -shift, -shift), (1, 2, 3))
    w = window
    t = reshape(x, (n, X // w, w, Y // w, w, Z // w, w, c))
    t = transpose(t, (0, 1, 3, 5, 2, 4, 6, 7))
    return reshape(t, (n * (X // w) * (Y // w) * (Z // w), w**3, c))


def window_reverse(windows: DiffArray, window: int, shift: int, field_shape: tuple[int, ...]) -> DiffArray:
    n, X, Y, Z, c = field_shape
    w = window
    t = reshape(windows, (n, X // w, Y // w, Z // w, w, w, w, c))
    t = transpose(t, (0, 1, 4, 2, 5, 3, 6, 7))
    x = reshape(t, (n, X, Y, Z, c))
    if shift:
        x = roll(x, (shift, shift, shift), (1, 2, 3))
    return x


def relative_position_index(window: int) -> np.ndarray:
    """Gather index (W^3, W^3) into a (2W-1)^3 relative-offset table."""
    coords = np.stack(np.meshgrid(*(np.arange(window),) * 3, indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    span = 2 * window - 1
    return (rel[0] * span + rel[1]) * span + rel[2]


# ---------------------------------------------------------------------------
# encoder modules


class LayerNorm(Module):
    def __init__(self, width: int):
        super().__init__()
        self.gain = self.param("gain", np.ones(width))
        self.shift = self.param("shift", np.zeros(width))

    def __call__(self, x):
        return normalize(x, "layer", self.gain, self.shift)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, bias: bool = True):
        super().__init__()
        self.weight = self.param("weight", glorot(rng, (cout, cin), cin, cout))
        self.bias = self.param("bias", np.zeros(cout)) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


class WindowAttention(Module):
    """Multi-head self-attention inside W^3 windows with relative positional bias."""

    def __init__(self, rng: np.random.Generator, width: int, heads: int, window: int):
        super().__init__()
        if width % heads:
            raise ValueError(f"width {width} not divisible by {heads} heads")
        self.width, self.heads, self.window = width, heads, window
        self.qkv = self.child("qkv", Linear(rng, width, 3 * width))
        self.proj = self.child("proj", Linear(rng, width, width))
        self.bias_table = self.param("bias_table", 0.02 * rng.standard_normal((heads, (2 * window - 1) ** 3)))
        self.index = relative_position_index(window)

    def relative_bias(self) -> DiffArray:
        return getitem(self.bias_table, (slice(None), self.index))

    def __call__(self, windows: DiffArray) -> DiffArray:
        b, t, c = windows.shape
        h = self.heads
        d = c // h
        qkv = reshape(self.qkv(windows), (b, t, 3, h, d))
        qkv = transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
        if t != self.index.shape[0]:
            raise ValueError(f"windows hold {t} tokens, expected {self.index.shape[0]}")
        attn = softmax_last(scores + self.relative_bias())
        out = transpose(matmul(attn, v), (0, 2, 1, 3))
        return self.proj(reshape(out, (b, t, c)))


class Mlp(Module):
    def __init__(self, rng, width: int, ratio: int):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(rng, width, ratio * width))
        self.fc2 = self.child("fc2", Linear(rng, ratio * width, width))

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class SwinBlock(Module):
    def __init__(self, rng, width: int, heads: int, window: int, shift: int, mlp_ratio: int):
        super().__init__()
        self.window, self.shift = window, shift
        self.norm1 = self.child("norm1", LayerNorm(width))
        self.attn = self.child("attn", WindowAttention(rng, width, heads, window))
        self.norm2 = self.child("norm2", LayerNorm(width))
        self.mlp = self.child("mlp", Mlp(rng, width, mlp_ratio))

    def __call__(self, x: DiffArray) -> DiffArray:
        shift = self.shift if min(x.shape[1:4]) > self.window else 0
        windows = window_partition(self.norm1(x), self.window, shift)
        x = x + window_reverse(self.attn(windows), self.window, shift, x.shape)
        return x + self.mlp(self.norm2(x))


class SwinBlockPair(Module):
    """W-MSA block followed by an SW-MSA block (shift floor(W/2))."""

    def __init__(self, rng, width: int, heads: int, window: int, mlp_ratio: int):
        super().__init__()
        self.regular = self.child("wmsa", SwinBlock(rng, width, heads, window, 0, mlp_ratio))
        self.shifted = self.child("swmsa", SwinBlock(rng, width, heads, window, window // 2, mlp_ratio))

    def __call__(self, x):
        return self.shifted(self.regular(x))


class PatchMerge(Module):
    def __init__(self, rng, width: int, out_width: int | None = None):
        super().__init__()
        self.reduce = self.child("reduce", Linear(rng, 8 * width, out_width or 2 * width, bias=False))

    def __call__(self, x):
        return self.reduce(space_to_depth(x))


class InputEmbedding(Module):
    """Pointwise conv to f channels, then 2^3 patch grouping projected back to f."""

    def __init__(self, rng, in_channels: int, features: int):
        super().__init__()
        self.kernel = self.param("m1.kernel", glorot(rng, (features, in_channels, 1, 1, 1), in_channels, features))
        self.bias = self.param("m1.bias", np.zeros(features))
        self.proj = self.child("proj", Linear(rng, 8 * features, features))

    def __call__(self, x: DiffArray) -> DiffArray:
        if any(e % 2 for e in x.shape[2:]):
            raise ValueError(f"input extents {x.shape[2:]} must be even")
        h = conv3(x, self.kernel, self.bias)
        return self.proj(space_to_depth(moveaxis(h, 1, -1)))


# ---------------------------------------------------------------------------
# decoder modules


def se_recalibrate(features: DiffArray, w1: DiffArray, w2: DiffArray) -> DiffArray:
    """Squeeze (global average pool), excite (FC-ReLU-FC-sigmoid), rescale channels."""
    n, c = features.shape[:2]
    if w1.shape[1] != c or w2.shape[0] != c or w1.shape[0] != w2.shape[1]:
        raise ValueError(f"SE weights {w1.shape}, {w2.shape} do not fit {c} channels")
    z = global_avg_pool(features)
    a = sigmoid(linear(relu(linear(z, w1)), w2))
    return features * reshape(a, (n, c) + (1,) * (features.ndim - 2))


class SEBlock(Module):
    def __init__(self, rng, channels: int, reduction: int):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        hidden = channels // reduction
        self.w1 = self.param("w1", glorot(rng, (hidden, channels), channels, hidden))
        self.w2 = self.param("w2", glorot(rng, (channels, hidden), hidden, channels))

    def __call__(self, x):
        return se_recalibrate(x, self.w1, self.w2)


class DecoderLevel(Module):
    """x2 transposed conv, optional skip concat, 3^3 conv, instance norm, LeakyReLU, optional SE."""

    def __init__(self, rng, cin: int, cout: int, skip_width: int, use_se: bool, se_reduction: int):
        super().__init__()
        self.up_kernel = self.param("up.kernel", glorot(rng, (cin, cout, 2, 2, 2), cin, cout * 8))
        self.up_bias = self.param("up.bias", np.zeros(cout))
        cc = cout + skip_width
        self.kernel = self.param("conv.kernel", glorot(rng, (cout, cc, 3, 3, 3), cc * 27, cout * 27))
        self.bias = self.param("conv.bias", np.zeros(cout))
        self.gain = self.param("norm.gain", np.ones(cout))
        self.shift = self.param("norm.shift", np.zeros(cout))
        self.skip_width = skip_width
        self.se = self.child("se", SEBlock(rng, cout, se_reduction)) if use_se else None

    def __call__(self, x: DiffArray, skip: DiffArray | None) -> DiffArray:
        h = deconv3(x, self.up_kernel, self.up_bias, stride=2)
        if self.skip_width:
            if skip is None:
                raise ValueError("decoder level expects a skip connection")
            h = concat([h, skip], axis=1)
        h = conv3(h, self.kernel, self.bias, padding=1)
        h = leaky_relu(normalize(h, "instance", self.gain, self.shift), 0.2)
        return self.se(h) if self.se is not None else h


class Head(Module):
    def __init__(self, rng, cin: int, bias: float = 0.0):
        super().__init__()
        self.kernel = self.param("kernel", glorot(rng, (1, cin, 1, 1, 1), cin, 1))
        self.bias = self.param("bias", np.full(1, bias))

    def __call__(self, x):
        return conv3(x, self.kernel, self.bias)


@dataclass
class SkipSet:
    """Encoder feature maps (channels-first) keyed by extent divisor: p/2, p/4, ..."""

    maps: dict[int, DiffArray] = field(default_factory=dict)

    def __getitem__(self, divisor: int) -> DiffArray:
        return self.maps[divisor]

    def __contains__(self, divisor: int) -> bool:
        return divisor in self.maps

    def scales(self) -> list[int]:
        return sorted(self.maps)


class SwinSEER(Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        f, w = config.base_features, config.window_size
        self.embed = self.child("embed", InputEmbedding(rng, config.in_channels, f))
        self.stages: list[list[SwinBlockPair]] = []
        self.merges: list[PatchMerge] = []
        for i, (depth, width, heads) in enumerate(zip(config.stage_depths, config.stage_widths(), config.heads_per_stage)):
            pairs = [
                self.child(f"stage{i + 1}.pair{j}", SwinBlockPair(rng, width, heads, w, config.mlp_ratio))
                for j in range(depth // 2)
            ]
            self.stages.append(pairs)
            self.merges.append(self.child(f"stage{i + 1}.merge", PatchMerge(rng, width)))
        top = config.stage_widths()[-1] * 2
        self.bottleneck = self.child("bottleneck", Linear(rng, top, config.bottleneck_width))

        s = config.num_stages
        self.levels: list[DecoderLevel] = []
        cin = config.bottleneck_width
        for m in range(s, -1, -1):
            cout = config.decoder_width(m)
            skip_width = config.stage_widths()[m - 1] if m >= 1 else 0
            level = DecoderLevel(rng, cin, cout, skip_width, use_se=m >= 1, se_reduction=config.se_reduction)
            self.levels.append(self.child(f"dec.u{s + 1 - m}", level))
            cin = cout
        self.heads = [self.child(f"head.m{k}", Head(rng, config.decoder_width(m), config.head_bias)) for k, m in enumerate((2, 1, 0), start=2)]

    # -- encoder -----------------------------------------------------------
    def encode(self, x: DiffArray) -> tuple[DiffArray, SkipSet]:
        cfg = self.config
        if x.ndim != 5 or x.shape[1] != cfg.in_channels or any(e != cfg.patch_size for e in x.shape[2:]):
            raise ValueError(f"expected input (N, {cfg.in_channels}, {cfg.patch_size}^3), got {x.shape}")
        t = self.embed(x)
        skips = SkipSet()
        for i, (pairs, merge) in enumerate(zip(self.stages, self.merges)):
            for pair in pairs:
                t = pair(t)
            skips.maps[2 ** (i + 1)] = moveaxis(t, -1, 1)
            t = merge(t)
        t = self.bottleneck(t)
        return moveaxis(t, -1, 1), skips

    # -- decoder -----------------------------------------------------------
    def decode(self, bottleneck: DiffArray, skips: SkipSet) -> tuple[DiffArray, DiffArray, DiffArray]:
        s = self.config.num_stages
        h = bottleneck
        outputs = {}
        for level, m in zip(self.levels, range(s, -1, -1)):
            divisor = 2**m
            skip = None
            if m >= 1:
                if divisor not in skips:
                    raise ValueError(f"missing skip connection at scale p/{divisor}")
                skip = skips[divisor]
            h = level(h, skip)
            outputs[m] = h
        y4 = self.heads[0](outputs[2])
        y2 = self.heads[1](outputs[1])
        y1 = tanh(self.heads[2](outputs[0]))
        return y4, y2, y1

    def __call__(self, x: DiffArray) -> tuple[DiffArray, DiffArray, DiffArray]:
        b, skips = self.encode(x)
        return self.decode(b, skips)


class IdentityGenerator(Module):
    """Debug generator: returns its first input channel at the three scales."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config

    def __call__(self, x: DiffArray):
        y = x[:, :1]
        return resample_nearest(y, 4), resample_nearest(y, 2), y


def build_generator(config: GeneratorConfig) -> Module:
    if config.arch == "identity":
        return IdentityGenerator(config)
    if config.arch != "swinseer":
        raise ValueError(f"unknown generator architecture {config.arch!r}")
    return SwinSEER(config)


def generator_forward(generator: Module, x: DiffArray):
    return generator(x)
