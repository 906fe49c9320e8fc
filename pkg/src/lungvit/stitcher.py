"""Sliding-window patch extraction, overlap-mean stitching and masking."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .diffcore import DiffArray, no_grad

AIR_FILL = -1.0  # -1024 HU on the normalized scale


def axis_origins(extent: int, p: int, o: int) -> list[int]:
    if p > extent:
        raise ValueError(f"patch edge {p} exceeds volume extent {extent}")
    if not 0 <= o < p:
        raise ValueError(f"overlap {o} must satisfy 0 <= o < {p}")
    stride = p - o
    origins = list(range(0, extent - p + 1, stride))
    if origins[-1] + p < extent:
        origins.append(extent - p)
    return origins


@dataclass(frozen=True)
class PatchGrid:
    patch: int
    overlap: int
    shape: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]

    @classmethod
    def build(cls, shape, p: int, o: int) -> PatchGrid:
        shape = tuple(int(e) for e in shape)
        if len(shape) != 3:
            raise ValueError(f"expected a 3D volume, got shape {shape}")
        per_axis = []
        for axis, e in enumerate(shape):
            try:
                per_axis.append(axis_origins(e, p, o))
            except ValueError as err:
                raise ValueError(f"axis {axis}: {err}") from None
        return cls(p, o, shape, tuple(product(*per_axis)))

    @property
    def stride(self) -> int:
        return self.patch - self.overlap

    def __len__(self) -> int:
        return len(self.origins)

    def slices(self, origin) -> tuple[slice, slice, slice]:
        return tuple(slice(c, c + self.patch) for c in origin)

    def coverage(self) -> np.ndarray:
        count = np.zeros(self.shape, dtype=np.int64)
        for origin in self.origins:
            count[self.slices(origin)] += 1
        return count


def extract_patches(volume: np.ndarray, p: int, o: int) -> tuple[PatchGrid, np.ndarray]:
    """Patches in grid order; leading channel axes (if any) are kept: (n, ..., p, p, p)."""
    volume = np.asarray(volume)
    grid = PatchGrid.build(volume.shape[-3:], p, o)
    lead = volume.shape[:-3]
    patches = np.empty((len(grid),) + lead + (p, p, p), dtype=volume.dtype)
    for i, origin in enumerate(grid.origins):
        patches[i] = volume[(Ellipsis,) + grid.slices(origin)]
    return grid, patches


def stitch_mean(grid: PatchGrid, patches: np.ndarray, origins=None) -> np.ndarray:
    """Voxelwise mean of all covering patches.

    ``origins`` pairs each patch with its grid origin when the patch order
    differs from the grid order. Accumulation always runs in grid order at
    a precision wider than the patches, so the result does not depend on the
    order patches arrive in and equal covering values average back exactly.
    """
    patches = np.asarray(patches)
    origins = grid.origins if origins is None else tuple(tuple(int(c) for c in o) for o in origins)
    if len(origins) != len(patches):
        raise ValueError(f"{len(patches)} patches for {len(origins)} origins")
    if patches.shape[-3:] != (grid.patch,) * 3:
        raise ValueError(f"patch shape {patches.shape[-3:]} does not match grid edge {grid.patch}")
    if sorted(origins) != sorted(grid.origins):
        raise ValueError("patch origins do not match the grid")
    by_origin = dict(zip(origins, patches))
    lead = patches.shape[1:-3]
    wide = np.longdouble if patches.dtype.itemsize >= 8 else np.float64
    acc = np.zeros(lead + grid.shape, dtype=wide)
    count = np.zeros(grid.shape, dtype=np.int64)
    for origin in grid.origins:
        sl = (Ellipsis,) + grid.slices(origin)
        acc[sl] += by_origin[origin]
        count[grid.slices(origin)] += 1
    out_dtype = patches.dtype if np.issubdtype(patches.dtype, np.floating) else np.float64
    return (acc / count).astype(out_dtype)


def apply_mask(volume: np.ndarray, mask: np.ndarray, fill: float = AIR_FILL) -> np.ndarray:
    volume = np.asarray(volume)
    mask = np.asarray(mask)
    if mask.ndim < 3 or volume.shape[volume.ndim - mask.ndim :] != mask.shape:
        raise ValueError(f"mask extents {mask.shape} do not match volume {volume.shape}")
    return np.where(mask.astype(bool), volume, np.asarray(fill, dtype=volume.dtype)).astype(volume.dtype)


def _finest(outputs):
    if isinstance(outputs, (tuple, list)):
        outputs = outputs[-1]
    return outputs.data if isinstance(outputs, DiffArray) else np.asarray(outputs)


def synthesize_volume(generator, x_volume: np.ndarray, mask: np.ndarray, p: int, o: int,
                      batch_size: int = 8, order=None) -> np.ndarray:
    """Masked input -> patches -> finest generator head -> overlap mean -> masked output.

    ``x_volume`` is (X, Y, Z) or (C, X, Y, Z); extra channels (cascade
    conditioning) are masked and patched together with the first.
    """
    x = np.asarray(x_volume, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (X, Y, Z) or (C, X, Y, Z), got {x.shape}")
    x = apply_mask(x, mask)
    grid, patches = extract_patches(x, p, o)
    idx = np.arange(len(grid)) if order is None else np.asarray(order)
    outs = np.empty((len(grid), p, p, p), dtype=np.float32)
    with no_grad():
        for start in range(0, len(idx), batch_size):
            sel = idx[start : start + batch_size]
            y = _finest(generator(DiffArray(patches[sel])))
            outs[sel] = y[:, 0]
    origins = [grid.origins[i] for i in idx]
    y = stitch_mean(grid, outs[idx], origins)
    return apply_mask(y, mask)
