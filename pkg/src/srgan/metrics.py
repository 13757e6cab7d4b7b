"""Luma PSNR / SSIM after border cropping, and directory-level evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ImageTooSmall, InvalidArgument, ShapeMismatch
from .image_pipeline import ImageF, crop_border, load_image, rgb_to_y, to_float

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MODCROP_SLACK = 8


def _luma(img: ImageF, border: int) -> np.ndarray:
    if img.value_range != (0.0, 1.0):
        raise InvalidArgument("metrics expect images in [0, 1]")
    y = rgb_to_y(img) if img.channels == 3 else img
    return crop_border(y, border).data[:, :, 0].astype(np.float64)


def _pair(ref: ImageF, test: ImageF, border: int):
    if ref.data.shape != test.data.shape:
        raise ShapeMismatch(f"reference {ref.data.shape} vs test {test.data.shape}")
    return _luma(ref, border), _luma(test, border)


def psnr_y(ref: ImageF, test: ImageF, border: int = 4) -> float:
    """PSNR in dB with peak 1.0; ``math.inf`` for identical luma."""
    a, b = _pair(ref, test, border)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = len(taps)
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ taps
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ taps


def ssim_y(ref: ImageF, test: ImageF, border: int = 4) -> float:
    """Mean SSIM over the valid 11x11 Gaussian-window positions."""
    a, b = _pair(ref, test, border)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ImageTooSmall(f"cropped image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    taps = _gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a ** 2
    var_b = _filter_valid(b * b, taps) - mu_b ** 2
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    label: str = ""
    rows: list[tuple[str, float, float]] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else math.nan

    @property
    def infinite_psnr_count(self) -> int:
        return sum(1 for r in self.rows if math.isinf(r[1]))

    def summary(self) -> dict:
        mean_psnr = self.mean_psnr
        return {
            "label": self.label,
            "count": len(self.rows),
            "mean_psnr_db": None if math.isinf(mean_psnr) else mean_psnr,
            "psnr_infinite": self.infinite_psnr_count,
            "mean_ssim": self.mean_ssim,
            "missing": self.missing,
        }

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["filename", "psnr_db", "ssim"])
            for name, p, s in self.rows:
                w.writerow([name, "inf" if math.isinf(p) else f"{p:.6f}", f"{s:.6f}"])
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def list_pngs(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")


def evaluate(method_dir, reference_dir, border: int = 4, label: str = "",
             allow_missing: bool = False, modcrop: bool = True) -> MetricReport:
    """Compare same-named PNGs of two directories.

    With ``modcrop`` a reference larger than its test image by fewer than
    ``MODCROP_SLACK`` pixels per side is centre-cropped to the test size,
    which covers references whose sides are not multiples of the scale
    factor. Larger differences raise ShapeMismatch.
    """
    method = {p.name: p for p in list_pngs(method_dir)}
    refs = {p.name: p for p in list_pngs(reference_dir)}
    if not method or not refs:
        raise DataError(f"no PNG files to compare in {method_dir} / {reference_dir}")
    missing = sorted(set(method) ^ set(refs))
    if missing and not allow_missing:
        raise DataError(f"unmatched files between directories: {missing[:10]}")
    report = MetricReport(label=label, missing=missing)
    for name in sorted(set(method) & set(refs)):
        test = to_float(load_image(method[name]))
        ref = to_float(load_image(refs[name]))
        if modcrop and ref.data.shape != test.data.shape:
            ref = _crop_to(ref, test.height, test.width)
        report.rows.append((name, psnr_y(ref, test, border), ssim_y(ref, test, border)))
    return report


def _crop_to(img: ImageF, h: int, w: int) -> ImageF:
    dh, dw = img.height - h, img.width - w
    if not (0 <= dh < MODCROP_SLACK and 0 <= dw < MODCROP_SLACK):
        raise ShapeMismatch(f"reference {img.height}x{img.width} cannot be modcropped to {h}x{w}")
    top, left = (img.height - h) // 2, (img.width - w) // 2
    return ImageF(img.data[top:top + h, left:left + w], img.value_range)
