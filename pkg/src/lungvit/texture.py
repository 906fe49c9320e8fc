"""Structure/texture similarity (DISTS) over a frozen, seeded conv embedder.

A 3D patch is compared along three orthogonal views. Slices along axis ``a``
keep the remaining axes in cyclic order ``(a+1, a+2) mod 3``, so a cyclic
permutation of both volumes maps each view onto another view unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import (
    DiffArray,
    as_array,
    avg_pool,
    concat,
    conv,
    mean,
    relu,
    reshape,
    transpose,
)

C1 = 1e-6
C2 = 1e-6


@dataclass
class DistsWeights:
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.alpha.shape != self.beta.shape:
            raise ValueError("alpha and beta must have one entry per stage")
        if (self.alpha < 0).any() or (self.beta < 0).any():
            raise ValueError("DISTS weights must be non-negative")
        total = self.alpha.sum() + self.beta.sum()
        if total <= 0:
            raise ValueError("DISTS weights must not all be zero")
        self.alpha = self.alpha / total
        self.beta = self.beta / total

    @classmethod
    def uniform(cls, levels: int) -> DistsWeights:
        w = np.full(levels + 1, 1.0 / (2 * (levels + 1)))
        return cls(w, w.copy())


class FeatureStack:
    """L frozen stages of conv -> ReLU -> 2x average pooling on (B, C, H, W) slices."""

    def __init__(self, widths=(8, 16, 32), kernel_size: int = 3, seed: int = 2):
        self.widths = tuple(int(w) for w in widths)
        self.kernel_size = kernel_size
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.kernels: list[DiffArray] = []
        self.biases: list[DiffArray] = []
        cin = 1
        for w in self.widths:
            fan_in = cin * kernel_size**2
            k = rng.standard_normal((w, cin, kernel_size, kernel_size)) * np.sqrt(2.0 / fan_in)
            self.kernels.append(DiffArray(k.astype(np.float32)))
            self.biases.append(DiffArray(np.zeros(w, dtype=np.float32)))
            cin = w

    @property
    def levels(self) -> int:
        return len(self.widths)

    def stage(self, i: int, h: DiffArray) -> DiffArray:
        pad = self.kernel_size // 2
        return avg_pool(relu(conv(h, self.kernels[i], self.biases[i], padding=pad)), 2)

    def describe(self) -> dict:
        return {"widths": list(self.widths), "kernel_size": self.kernel_size, "seed": self.seed}


def embed_slice(s: DiffArray, stack: FeatureStack) -> list[DiffArray]:
    """Feature pyramid [h_0 = s, h_1, ..., h_L] for a batch of slices (B, 1, H, W)."""
    s = as_array(s)
    if s.ndim == 2:
        s = reshape(s, (1, 1) + s.shape)
    if s.ndim != 4:
        raise ValueError(f"expected (B, 1, H, W) slices, got {s.shape}")
    h, w = s.shape[2:]
    div = 2**stack.levels
    if h != w:
        raise ValueError(f"slices must be square, got {h}x{w}")
    if h % div:
        raise ValueError(f"slice extent {h} not divisible by 2^{stack.levels}")
    pyramid = [s]
    for i in range(stack.levels):
        pyramid.append(stack.stage(i, pyramid[-1]))
    return pyramid


def _stage_terms(h: DiffArray, hh: DiffArray, c1: float, c2: float) -> tuple[DiffArray, DiffArray]:
    axes = (2, 3)
    mu = mean(h, axes, keepdims=True)
    mu_h = mean(hh, axes, keepdims=True)
    hc, hhc = h - mu, hh - mu_h
    var = mean(hc * hc, axes)
    var_h = mean(hhc * hhc, axes)
    cov = mean(hc * hhc, axes)
    mu, mu_h = reshape(mu, mu.shape[:2]), reshape(mu_h, mu_h.shape[:2])
    texture = (2.0 * mu * mu_h + c1) / (mu * mu + mu_h * mu_h + c1)
    structure = (2.0 * cov + c2) / (var + var_h + c2)
    return mean(texture, 1), mean(structure, 1)


def dists_terms(s, s_hat, stack: FeatureStack) -> list[tuple[DiffArray, DiffArray]]:
    """Per-stage channel-averaged (texture, structure) terms, each of shape (B,)."""
    s, s_hat = as_array(s), as_array(s_hat)
    if s.shape != s_hat.shape:
        raise ValueError(f"slice shapes differ: {s.shape} vs {s_hat.shape}")
    pa = embed_slice(s, stack)
    pb = embed_slice(s_hat, stack)
    return [_stage_terms(a, b, C1, C2) for a, b in zip(pa, pb)]


def dists_batch(s, s_hat, stack: FeatureStack, weights: DistsWeights | None = None) -> DiffArray:
    """DISTS per slice for batches (B, 1, H, W); returns shape (B,)."""
    weights = weights or DistsWeights.uniform(stack.levels)
    if len(weights.alpha) != stack.levels + 1:
        raise ValueError(f"{len(weights.alpha)} weight pairs for {stack.levels + 1} stages")
    terms = dists_terms(s, s_hat, stack)
    acc = None
    for (texture, structure), a, b in zip(terms, weights.alpha, weights.beta):
        t = texture * float(a) + structure * float(b)
        acc = t if acc is None else acc + t
    return 1.0 - acc


def dists(s, s_hat, stack: FeatureStack, weights: DistsWeights | None = None) -> DiffArray:
    """DISTS between two 2D slices (or batches of slices, averaged)."""
    return mean(dists_batch(s, s_hat, stack, weights))


def view_slices(volume: DiffArray) -> list[DiffArray]:
    """Three stacks of slices (N * E, 1, E, E), one per fixed axis."""
    v = as_array(volume)
    if v.ndim == 3:
        v = reshape(v, (1, 1) + v.shape)
    if v.ndim != 5 or v.shape[1] != 1:
        raise ValueError(f"expected (N, 1, X, Y, Z) volumes, got {v.shape}")
    n = v.shape[0]
    e = v.shape[2]
    if v.shape[2:] != (e, e, e):
        raise ValueError(f"multiview DISTS needs cubic patches, got {v.shape[2:]}")
    views = []
    # axis 0 -> (Y, Z), axis 1 -> (Z, X), axis 2 -> (X, Y)
    for order in ((0, 2, 1, 3, 4), (0, 3, 1, 4, 2), (0, 4, 1, 2, 3)):
        views.append(reshape(transpose(v, order), (n * e, 1, e, e)))
    return views


def dists_multiview_views(y, y_hat, stack: FeatureStack, weights: DistsWeights | None = None) -> list[DiffArray]:
    y, y_hat = as_array(y), as_array(y_hat)
    if y.shape != y_hat.shape:
        raise ValueError(f"volume shapes differ: {y.shape} vs {y_hat.shape}")
    va, vb = view_slices(y), view_slices(y_hat)
    b = va[0].shape[0]
    per_slice = dists_batch(concat(va, 0), concat(vb, 0), stack, weights)
    return [mean(per_slice[i * b : (i + 1) * b]) for i in range(3)]


def dists_multiview(y, y_hat, stack: FeatureStack, weights: DistsWeights | None = None) -> DiffArray:
    """Sum over the three views of the slice-averaged DISTS."""
    a, b, c = dists_multiview_views(y, y_hat, stack, weights)
    return a + b + c


@dataclass
class TextureLoss:
    stack: FeatureStack = field(default_factory=FeatureStack)
    weights: DistsWeights | None = None

    def __post_init__(self):
        if self.weights is None:
            self.weights = DistsWeights.uniform(self.stack.levels)

    def __call__(self, y, y_hat) -> DiffArray:
        return dists_multiview(y, y_hat, self.stack, self.weights)
