"""Image-quality metrics, lung biomarkers, agreement and overlap statistics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure, uniform_filter

DYNAMIC_RANGE = 2.0
AIR_TRAP_HU = -856.0
FSAD_TLC = (-950.0, -810.0)
FSAD_RV = (-1000.0, -857.0)


def _mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask).astype(bool)
    if m.shape != tuple(shape):
        raise ValueError(f"mask shape {m.shape} does not match volume {tuple(shape)}")
    if not m.any():
        raise ValueError("mask is empty")
    return m


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"volume shapes differ: {y.shape} vs {y_hat.shape}")
    return y, y_hat


def psnr(y, y_hat, mask=None, ceiling: float = DYNAMIC_RANGE) -> float:
    """20 log10(ceiling / rms) over mask voxels; ``math.inf`` when the volumes agree."""
    y, y_hat = _pair(y, y_hat)
    m = _mask(mask, y.shape)
    rms = math.sqrt(float(np.mean((y[m] - y_hat[m]) ** 2)))
    if rms == 0.0:
        return math.inf
    return 20.0 * math.log10(ceiling / rms)


def nmse(y, y_hat, mask=None) -> float:
    """Percent error energy; sums are correctly rounded so the value is independent of voxel order."""
    y, y_hat = _pair(y, y_hat)
    m = _mask(mask, y.shape)
    energy = math.fsum((y[m] ** 2).tolist())
    if energy == 0.0:
        raise ValueError("reference has zero energy on the mask")
    return 100.0 * math.fsum(((y[m] - y_hat[m]) ** 2).tolist()) / energy


def ssim3d(y, y_hat, window: int = 7, dynamic_range: float = DYNAMIC_RANGE) -> float:
    """Mean SSIM over all fully contained cubic windows (uniform weights, population moments)."""
    y, y_hat = _pair(y, y_hat)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if any(e < window for e in y.shape):
        raise ValueError(f"window {window} exceeds volume extents {y.shape}")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2

    def local(a):
        return uniform_filter(a, size=window, mode="constant")

    mu_a, mu_b = local(y), local(y_hat)
    saa = local(y * y) - mu_a * mu_a
    sbb = local(y_hat * y_hat) - mu_b * mu_b
    sab = local(y * y_hat) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    h = window // 2
    inner = tuple(slice(h, e - h) for e in y.shape)
    return float(np.mean((num / den)[inner]))


def fsad_count(tlc_hu, rv_hu, mask) -> tuple[int, int]:
    tlc, rv = _pair(tlc_hu, rv_hu)
    m = _mask(mask, tlc.shape)
    hit = (tlc >= FSAD_TLC[0]) & (tlc <= FSAD_TLC[1]) & (rv >= FSAD_RV[0]) & (rv <= FSAD_RV[1])
    return int(np.count_nonzero(hit & m)), int(np.count_nonzero(m))


def fsad_percent(tlc_hu, rv_hu, mask) -> float:
    num, den = fsad_count(tlc_hu, rv_hu, mask)
    return 100.0 * num / den


def air_trapping_count(rv_hu, mask) -> tuple[int, int]:
    rv = np.asarray(rv_hu, dtype=np.float64)
    m = _mask(mask, rv.shape)
    return int(np.count_nonzero((rv < AIR_TRAP_HU) & m)), int(np.count_nonzero(m))


def air_trapping_percent(rv_hu, mask) -> float:
    num, den = air_trapping_count(rv_hu, mask)
    return 100.0 * num / den


def fsad_mae(pairs) -> float:
    """Mean absolute difference (percentage points) over (true, predicted) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("fsad_mae needs at least one pair")
    return float(np.mean([abs(float(a) - float(b)) for a, b in pairs]))


@dataclass
class AgreementResult:
    bias: float
    sd: float
    lower: float
    upper: float
    differences: list = field(default_factory=list)


def bland_altman(xs, ys) -> AgreementResult:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError("bland_altman needs two equal-length 1D sequences")
    if len(xs) < 2:
        raise ValueError("bland_altman needs at least two pairs")
    d = ys - xs
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return AgreementResult(bias, sd, bias - 1.96 * sd, bias + 1.96 * sd, d.tolist())


def dice_jaccard(a, b) -> tuple[float, float]:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        raise ValueError("both masks are empty")
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return 2.0 * inter / (sa + sb), inter / union


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-connected background neighbour (outside counts as background)."""
    m = np.asarray(mask).astype(bool)
    core = binary_erosion(m, structure=generate_binary_structure(m.ndim, 1), border_value=0)
    return m & ~core


def assd(a, b, spacing: float = 1.0) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise ValueError("assd needs two non-empty masks")
    sa, sb = surface(a), surface(b)
    to_b = distance_transform_edt(~sb)
    to_a = distance_transform_edt(~sa)
    return 0.5 * (float(to_b[sa].mean()) + float(to_a[sb].mean())) * spacing


@dataclass
class MetricsReport:
    volume_id: str
    psnr_db: float
    nmse_percent: float
    ssim: float
    ssim_window: int


@dataclass
class BiomarkerPanel:
    volume_id: str
    fsad_percent: float
    air_trapping_percent: float
    fsad_voxels: int
    air_trapping_voxels: int
    mask_voxels: int


def image_metrics(volume_id: str, y, y_hat, mask, window: int = 7) -> MetricsReport:
    return MetricsReport(volume_id, psnr(y, y_hat, mask), nmse(y, y_hat, mask), ssim3d(y, y_hat, window), window)


def biomarker_panel(volume_id: str, tlc_hu, rv_hu, mask) -> BiomarkerPanel:
    nf, den = fsad_count(tlc_hu, rv_hu, mask)
    na, _ = air_trapping_count(rv_hu, mask)
    return BiomarkerPanel(volume_id, 100.0 * nf / den, 100.0 * na / den, nf, na, den)


REPORT_COLUMNS = (
    "volume_id",
    "psnr_db",
    "nmse_percent",
    "ssim",
    "ssim_window",
    "fsad_true",
    "fsad_pred",
    "air_trapping_true",
    "air_trapping_pred",
    "fsad_voxels_true",
    "fsad_voxels_pred",
    "air_trapping_voxels_true",
    "air_trapping_voxels_pred",
    "mask_voxels",
)


def report_row(metrics: MetricsReport, truth: BiomarkerPanel, pred: BiomarkerPanel) -> dict:
    return {
        "volume_id": metrics.volume_id,
        "psnr_db": metrics.psnr_db,
        "nmse_percent": metrics.nmse_percent,
        "ssim": metrics.ssim,
        "ssim_window": metrics.ssim_window,
        "fsad_true": truth.fsad_percent,
        "fsad_pred": pred.fsad_percent,
        "air_trapping_true": truth.air_trapping_percent,
        "air_trapping_pred": pred.air_trapping_percent,
        "fsad_voxels_true": truth.fsad_voxels,
        "fsad_voxels_pred": pred.fsad_voxels,
        "air_trapping_voxels_true": truth.air_trapping_voxels,
        "air_trapping_voxels_pred": pred.air_trapping_voxels,
        "mask_voxels": truth.mask_voxels,
    }


def _json_value(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def to_jsonl(rows) -> str:
    return "".join(json.dumps({k: _json_value(v) for k, v in r.items()}, sort_keys=True) + "\n" for r in rows)


def to_csv(rows, columns=REPORT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def agreement_record(name: str, result: AgreementResult) -> dict:
    d = asdict(result)
    d["quantity"] = name
    return d
