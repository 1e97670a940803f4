"""Image quality metrics and evaluation reports.

PSNR uses the standard peak-squared definition 10*log10(peak^2 / MSE).
SSIM is single-scale with the universal constants (11x11 Gaussian window,
sigma 1.5, K1=0.01, K2=0.03) on the channel-mean grayscale image, averaged
over valid window positions.  Region-weighted PSNR restricts the MSE to the
weak- or strong-reflection side of a thresholded full-resolution difference
mask (threshold 0.40); reflection-detection PSNR compares the predicted
reflection against the observation-minus-transmission residual.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ragnet.synthesis import write_pgm, write_ppm

DEFAULT_TAU = 0.40


def _as_chw(a) -> np.ndarray:
    arr = a.data if hasattr(a, "data") and not isinstance(a, np.ndarray) else np.asarray(a)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"metrics expect single images, got batch of {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"metrics expect (C,H,W)-like images, got shape {arr.shape}")
    return arr.astype(np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); +inf for identical images."""
    x, y = _as_chw(a), _as_chw(b)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    mse = ((x - y) ** 2).mean()
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = sliding_window_view(img, len(k), axis=0).dot(k)
    return sliding_window_view(out, len(k), axis=1).dot(k)


def ssim(a, b, peak: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale structural similarity on channel-mean grayscale images."""
    x, y = _as_chw(a), _as_chw(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    gx, gy = x.mean(axis=0), y.mean(axis=0)
    h, w = gx.shape
    if h < 11 or w < 11:
        raise ValueError(f"ssim: image ({h},{w}) smaller than the 11x11 window")
    win = _gaussian_window()
    mu_x = _filter_valid(gx, win)
    mu_y = _filter_valid(gy, win)
    sig_x = _filter_valid(gx * gx, win) - mu_x * mu_x
    sig_y = _filter_valid(gy * gy, win) - mu_y * mu_y
    sig_xy = _filter_valid(gx * gy, win) - mu_x * mu_y
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sig_xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sig_x + sig_y + c2)
    return float((num / den).mean())


@dataclass
class RegionMask:
    """Binary split of the image into weak (m_w) and strong (1-m_w) reflection regions."""
    m_w: np.ndarray  # (H,W) bool
    tau: float

    @property
    def m_s(self) -> np.ndarray:
        return ~self.m_w


def weak_strong_split(m_diff, tau: float = DEFAULT_TAU) -> RegionMask:
    """Threshold the channel-mean of the full-resolution difference mask at tau."""
    m = _as_chw(m_diff).mean(axis=0)
    return RegionMask(m_w=m > tau, tau=tau)


def region_psnr(t_hat, t_gt, region: np.ndarray, peak: float = 1.0) -> float | None:
    """PSNR over the selected pixels only; None ("n/a") for an empty region."""
    x, y = _as_chw(t_hat), _as_chw(t_gt)
    if x.shape != y.shape:
        raise ValueError(f"region_psnr: shape mismatch {x.shape} vs {y.shape}")
    if region.shape != x.shape[1:]:
        raise ValueError(f"region_psnr: region shape {region.shape} != spatial {x.shape[1:]}")
    sel = np.broadcast_to(region[None], x.shape)
    count = sel.sum()
    if count == 0:
        return None
    mse = (((x - y) ** 2) * sel).sum() / count
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def reflection_detection_psnr(r_hat, i_obs, t_gt) -> float:
    """Similarity of the predicted reflection to the clamped residual I - T."""
    i_arr, t_arr = _as_chw(i_obs), _as_chw(t_gt)
    if i_arr.shape != t_arr.shape:
        raise ValueError(f"reflection_detection_psnr: shape mismatch {i_arr.shape} vs {t_arr.shape}")
    residual = np.clip(i_arr - t_arr, 0.0, 1.0)
    return psnr(r_hat, residual)


# ---------------------------------------------------------------------------
# report emission

@dataclass
class ImageResult:
    name: str
    psnr: float
    ssim: float
    psnr_weak: float | None
    psnr_strong: float | None
    refl_det_psnr: float
    mask: np.ndarray | None = None    # (H,W) in [0,1], channel-mean level-1 mask
    panel: np.ndarray | None = None   # (3,H,3W) side-by-side I | R_hat | T_hat


def make_panel(i_obs, r_hat, t_hat) -> np.ndarray:
    imgs = [_as_chw(a) for a in (i_obs, r_hat, t_hat)]
    return np.concatenate(imgs, axis=2)


def _fmt(v: float | None) -> str:
    if v is None:
        return "n/a"
    if np.isinf(v):
        return "inf"
    return f"{v:.6f}"


def emit_report(results: list[ImageResult], out_dir) -> list[str]:
    """CSV summary plus per-image mask heatmap (P5) and panel (P6) files."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        written = []
        csv_path = os.path.join(out_dir, "report.csv")
        with open(csv_path, "w") as f:
            f.write("image,psnr,ssim,psnr_weak,psnr_strong,refl_det_psnr\n")
            for r in results:
                f.write(f"{r.name},{_fmt(r.psnr)},{_fmt(r.ssim)},{_fmt(r.psnr_weak)},"
                        f"{_fmt(r.psnr_strong)},{_fmt(r.refl_det_psnr)}\n")
        written.append(csv_path)
        for r in results:
            if r.mask is not None:
                p = os.path.join(out_dir, f"{r.name}_mask.pgm")
                write_pgm(p, np.clip(r.mask, 0.0, 1.0))
                written.append(p)
            if r.panel is not None:
                p = os.path.join(out_dir, f"{r.name}_panel.ppm")
                write_ppm(p, np.clip(r.panel, 0.0, 1.0))
                written.append(p)
    except OSError as e:
        raise OSError(f"emit_report: I/O failure under {out_dir}: {e}") from e
    return written
