"""Markovian patch discriminator and the supervised objectives."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import (
    DiffArray,
    Module,
    absolute,
    as_array,
    concat,
    conv3,
    glorot,
    leaky_relu,
    mean,
    normalize,
    resample_nearest,
    square,
    sum_,
)


@dataclass
class DiscriminatorConfig:
    in_channels: int = 2
    widths: tuple[int, ...] = (16, 32)
    patch_edge: int = 4
    norm: str = "instance"
    seed: int = 1

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    @property
    def num_down(self) -> int:
        return int(round(np.log2(self.patch_edge)))

    def validate(self) -> None:
        if self.patch_edge < 2 or 2**self.num_down != self.patch_edge:
            raise ValueError(f"patch edge {self.patch_edge} must be a power of two >= 2")
        if len(self.widths) != self.num_down:
            raise ValueError(f"{len(self.widths)} widths given for {self.num_down} stride-2 layers")
        if self.norm not in ("instance", "batch", "none"):
            raise ValueError(f"unknown discriminator normalization {self.norm!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class PatchDiscriminator(Module):
    """Stack of k=2, stride-2 convs; each score sees exactly one patch_edge^3 tile.

    Normalization follows every conv but the first. ``instance`` statistics
    span the whole input, so strict per-tile locality holds only with
    ``norm="none"``.
    """

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.layers: list[tuple[DiffArray, DiffArray, DiffArray | None, DiffArray | None]] = []
        cin = config.in_channels
        for i, cout in enumerate(config.widths):
            k = self.param(f"down{i}.kernel", glorot(rng, (cout, cin, 2, 2, 2), cin * 8, cout * 8))
            b = self.param(f"down{i}.bias", np.zeros(cout))
            if i > 0 and config.norm != "none":
                g = self.param(f"down{i}.norm.gain", np.ones(cout))
                s = self.param(f"down{i}.norm.shift", np.zeros(cout))
            else:
                g = s = None
            self.layers.append((k, b, g, s))
            cin = cout
        self.head_kernel = self.param("head.kernel", glorot(rng, (1, cin, 1, 1, 1), cin, 1))
        self.head_bias = self.param("head.bias", np.zeros(1))

    def _norm(self, h: DiffArray, gain, shift) -> DiffArray:
        if self.config.norm == "instance":
            return normalize(h, "instance", gain, shift)
        # batch statistics: per channel over samples and space
        n, c = h.shape[:2]
        axes = (0,) + tuple(range(2, h.ndim))
        mu = mean(h, axes, keepdims=True)
        hc = h - mu
        var = mean(hc * hc, axes, keepdims=True)
        y = hc / (var + 1e-5) ** 0.5
        shape = (1, c) + (1,) * (h.ndim - 2)
        return y * gain.reshape(shape) + shift.reshape(shape)

    def __call__(self, x_cond: DiffArray, y: DiffArray) -> DiffArray:
        x_cond, y = as_array(x_cond), as_array(y)
        if x_cond.shape[0] != y.shape[0] or x_cond.shape[2:] != y.shape[2:]:
            raise ValueError(f"condition {x_cond.shape} and candidate {y.shape} do not match")
        h = concat([x_cond, y], axis=1)
        if h.shape[1] != self.config.in_channels:
            raise ValueError(f"discriminator expects {self.config.in_channels} channels, got {h.shape[1]}")
        for e in h.shape[2:]:
            if e % self.config.patch_edge:
                raise ValueError(f"extent {e} not divisible by patch edge {self.config.patch_edge}")
        for k, b, g, s in self.layers:
            h = conv3(h, k, b, stride=2)
            if g is not None:
                h = self._norm(h, g, s)
            h = leaky_relu(h, 0.2)
        return conv3(h, self.head_kernel, self.head_bias)


def discriminator_forward(discriminator: PatchDiscriminator, x_cond, y) -> DiffArray:
    return discriminator(x_cond, y)


def d_loss(scores_real: DiffArray, scores_fake: DiffArray) -> DiffArray:
    """Least-squares discriminator loss: mean (s_real - 1)^2 + mean s_fake^2."""
    scores_real, scores_fake = as_array(scores_real), as_array(scores_fake)
    if scores_real.shape != scores_fake.shape:
        raise ValueError(f"score maps differ in shape: {scores_real.shape} vs {scores_fake.shape}")
    return mean(square(scores_real - 1.0)) + mean(square(scores_fake))


def g_adv_loss(scores_fake: DiffArray) -> DiffArray:
    return mean(square(as_array(scores_fake) - 1.0))


def multiresolution_targets(y: DiffArray) -> tuple[DiffArray, DiffArray, DiffArray]:
    y = as_array(y)
    return resample_nearest(y, 4), resample_nearest(y, 2), y


def mr_l1_loss(y: DiffArray, outputs, mask) -> DiffArray:
    """Mean absolute error at p/4, p/2, p plus the lung-masked full-scale term.

    The masked term averages over mask voxels only and is 0 for an empty mask.
    """
    y = as_array(y)
    targets = multiresolution_targets(y)
    if len(outputs) != 3:
        raise ValueError("expected outputs at three resolutions")
    total = None
    for t, o in zip(targets, outputs):
        o = as_array(o)
        if o.shape != t.shape:
            raise ValueError(f"output shape {o.shape} does not match target {t.shape} in the resolution chain")
        term = mean(absolute(o - t))
        total = term if total is None else total + term
    m = np.asarray(mask.data if isinstance(mask, DiffArray) else mask, dtype=y.dtype)
    if m.shape != y.shape:
        m = np.broadcast_to(m, y.shape)
    count = float(m.sum())
    if count > 0:
        diff = absolute(as_array(outputs[2]) - targets[2]) * DiffArray(m, dtype=y.dtype)
        total = total + sum_(diff) * (1.0 / count)
    return total
