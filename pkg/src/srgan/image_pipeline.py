"""Image I/O, colour conversion and the HR -> LR degradation model.

Images are held as ``(H, W, C)`` numpy arrays, channel-interleaved, with
``C`` in ``{1, 3}``. Float images carry their declared value range so the
LR ([0, 1]) and HR ([-1, 1]) conventions cannot be mixed up silently.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, ImageTooSmall, InvalidArgument, IoError

VALID_RANGES = ((0.0, 1.0), (-1.0, 1.0))
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

# ITU-R BT.601 luma, full range
Y_COEFFS = np.array([0.299, 0.587, 0.114])


@dataclass
class ImageU8:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.dtype != np.uint8 or data.ndim != 3 or data.shape[2] not in (1, 3):
            raise InvalidArgument(f"ImageU8 needs uint8 (H, W, 1|3) data, got {data.dtype} {data.shape}")
        self.data = np.ascontiguousarray(data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class ImageF:
    data: np.ndarray
    value_range: tuple[float, float] = field(default=(0.0, 1.0))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise InvalidArgument(f"ImageF needs (H, W, 1|3) data, got {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        self.data = data
        self.value_range = tuple(float(v) for v in self.value_range)
        if self.value_range not in VALID_RANGES:
            raise InvalidArgument(f"unsupported value range {self.value_range}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def _replace(self, data: np.ndarray) -> "ImageF":
        return ImageF(data, self.value_range)


@dataclass(frozen=True)
class DegradeConfig:
    factor: int = 4
    gaussian_sigma: float | None = None

    def __post_init__(self):
        if int(self.factor) != self.factor or self.factor < 2:
            raise InvalidArgument(f"downsampling factor must be an integer >= 2, got {self.factor}")
        if self.gaussian_sigma is not None and not self.gaussian_sigma > 0:
            raise InvalidArgument(f"gaussian_sigma must be > 0, got {self.gaussian_sigma}")


# --------------------------------------------------------------------------
# I/O

def load_image(path) -> ImageU8:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:8] != PNG_SIGNATURE:
        raise FormatError(f"{path}: not a PNG file")
    # IHDR is mandatory first; bit depth sits at byte 24
    if len(raw) < 25 or raw[12:16] != b"IHDR":
        raise FormatError(f"{path}: truncated or malformed PNG header")
    if raw[24] > 8:
        raise FormatError(f"{path}: {raw[24]}-bit PNG is not supported")
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: not a decodable image ({exc})") from exc
    if img.format != "PNG":
        raise FormatError(f"{path}: only PNG is supported, got {img.format}")
    mode = img.mode
    if mode.startswith("I") or mode == "F":
        raise FormatError(f"{path}: unsupported PNG mode {mode}")
    if mode in ("1", "L", "LA"):
        img = img.convert("L")
    elif mode != "RGB":
        img = img.convert("RGB")
    return ImageU8(np.array(img, dtype=np.uint8))


def save_image(img: ImageU8, path) -> None:
    path = Path(path)
    data = img.data[:, :, 0] if img.channels == 1 else img.data
    try:
        Image.fromarray(data, mode="L" if img.channels == 1 else "RGB").save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_manifest(path) -> list[Path]:
    """Plain-text list of image paths; blank lines and ``#`` comments ignored.

    Relative entries resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    out = []
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else path.parent / p)
    return out


# --------------------------------------------------------------------------
# range scaling

def to_float(img: ImageU8, target_range=(0.0, 1.0), dtype=np.float64) -> ImageF:
    lo, hi = (float(v) for v in target_range)
    if (lo, hi) not in VALID_RANGES:
        raise InvalidArgument(f"unsupported target range {(lo, hi)}")
    data = lo + (hi - lo) * img.data.astype(np.float64) / 255.0
    return ImageF(data.astype(dtype), (lo, hi))


def from_float(img: ImageF) -> ImageU8:
    lo, hi = img.value_range
    scaled = (np.asarray(img.data, dtype=np.float64) - lo) * (255.0 / (hi - lo))
    return ImageU8(np.clip(np.rint(scaled), 0, 255).astype(np.uint8))


def rescale(img: ImageF, target_range) -> ImageF:
    lo, hi = img.value_range
    tlo, thi = (float(v) for v in target_range)
    data = tlo + (thi - tlo) * (img.data - lo) / (hi - lo)
    return ImageF(data.astype(img.data.dtype), (tlo, thi))


# --------------------------------------------------------------------------
# filtering and resampling

def cubic_kernel(x, a: float = -0.5):
    """Keys cubic convolution kernel; ``a = -0.5`` gives Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1.0,
        (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0,
        np.where(x < 2.0, a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a, 0.0),
    )


def _apply_rows(matrix: np.ndarray, data: np.ndarray) -> np.ndarray:
    return np.tensordot(matrix, data, axes=(1, 0))


def _apply_cols(matrix: np.ndarray, data: np.ndarray) -> np.ndarray:
    return np.tensordot(matrix, data, axes=(1, 1)).transpose(1, 0, 2)


def _separable(img: ImageF, row_matrix: np.ndarray, col_matrix: np.ndarray) -> ImageF:
    data = img.data.astype(np.float64)
    out = _apply_cols(col_matrix, _apply_rows(row_matrix, data))
    return img._replace(out.astype(img.data.dtype))


def _gaussian_taps(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (offsets / sigma) ** 2)
    return taps / taps.sum()


def _conv_matrix(n: int, taps: np.ndarray) -> np.ndarray:
    """Dense (n, n) matrix applying ``taps`` with clamp-to-edge borders."""
    radius = len(taps) // 2
    mat = np.zeros((n, n))
    for i in range(n):
        for t, w in enumerate(taps):
            j = min(max(i + t - radius, 0), n - 1)
            mat[i, j] += w
    return mat


def gaussian_blur(img: ImageF, sigma: float) -> ImageF:
    if not sigma > 0:
        raise InvalidArgument(f"sigma must be > 0, got {sigma}")
    taps = _gaussian_taps(sigma)
    return _separable(img, _conv_matrix(img.height, taps), _conv_matrix(img.width, taps))


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Catmull-Rom resampling weights from ``n_in`` to ``n_out`` samples.

    Pixel centres are aligned (``u = (i + 0.5) * n_in / n_out - 0.5``).  When
    shrinking, the kernel is stretched by the scale so it also acts as the
    anti-aliasing prefilter.  Out-of-range taps clamp to the edge sample and
    each row is normalised to sum to one.
    """
    scale = n_out / n_in
    stretch = 1.0 / scale if scale < 1.0 else 1.0
    support = 2.0 * stretch
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        u = (i + 0.5) / scale - 0.5
        left = math.floor(u - support) + 1
        taps = np.arange(left, math.ceil(u + support))
        w = cubic_kernel((u - taps) / stretch)
        w = w / w.sum()
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w)
    return mat


def downsample_bicubic(img: ImageF, cfg: DegradeConfig) -> ImageF:
    r = cfg.factor
    if img.height % r or img.width % r:
        raise InvalidArgument(f"image {img.height}x{img.width} not divisible by factor {r}")
    return _separable(
        img,
        _resample_matrix(img.height, img.height // r),
        _resample_matrix(img.width, img.width // r),
    )


def upsample_bicubic(img: ImageF, r: int) -> ImageF:
    if int(r) != r or r < 2:
        raise InvalidArgument(f"upscale factor must be an integer >= 2, got {r}")
    return _separable(
        img,
        _resample_matrix(img.height, img.height * r),
        _resample_matrix(img.width, img.width * r),
    )


def upsample_nearest(img: ImageF, r: int) -> ImageF:
    if int(r) != r or r < 1:
        raise InvalidArgument(f"upscale factor must be an integer >= 1, got {r}")
    return img._replace(np.repeat(np.repeat(img.data, r, axis=0), r, axis=1))


# --------------------------------------------------------------------------
# cropping and degradation

def center_crop_to_multiple(img, r: int):
    """Centre-crop an ImageU8/ImageF so both sides are multiples of ``r``."""
    h, w = img.height - img.height % r, img.width - img.width % r
    if h == 0 or w == 0:
        raise ImageTooSmall(f"image {img.height}x{img.width} smaller than factor {r}")
    top, left = (img.height - h) // 2, (img.width - w) // 2
    data = img.data[top:top + h, left:left + w]
    if isinstance(img, ImageF):
        return img._replace(data)
    return ImageU8(data)


def degrade(hr: ImageF, cfg: DegradeConfig) -> ImageF:
    """HR -> LR: optional Gaussian prefilter, bicubic downsampling, clamp to range."""
    if cfg.gaussian_sigma is not None:
        hr = gaussian_blur(hr, cfg.gaussian_sigma)
    lr = downsample_bicubic(hr, cfg)
    return lr._replace(np.clip(lr.data, *lr.value_range))


def random_crop_pair(hr: ImageF, crop: int, cfg: DegradeConfig, rng: np.random.Generator):
    """Sample an aligned (HR crop, LR crop) pair.

    The offset is uniform over all valid placements and drawn from ``rng``,
    so equal generator state gives an identical pair.
    """
    if crop % cfg.factor:
        raise InvalidArgument(f"crop {crop} not divisible by factor {cfg.factor}")
    if hr.height < crop or hr.width < crop:
        raise ImageTooSmall(f"image {hr.height}x{hr.width} smaller than crop {crop}")
    top = int(rng.integers(0, hr.height - crop + 1))
    left = int(rng.integers(0, hr.width - crop + 1))
    hr_crop = hr._replace(hr.data[top:top + crop, left:left + crop].copy())
    return hr_crop, degrade(hr_crop, cfg)


def rgb_to_y(img: ImageF) -> ImageF:
    if img.channels != 3:
        raise InvalidArgument(f"rgb_to_y needs 3 channels, got {img.channels}")
    y = img.data.astype(np.float64) @ Y_COEFFS
    return img._replace(y[:, :, None].astype(img.data.dtype))


def crop_border(img: ImageF, border: int = 4) -> ImageF:
    if border < 0:
        raise InvalidArgument(f"border must be >= 0, got {border}")
    if border == 0:
        return img
    if img.height <= 2 * border or img.width <= 2 * border:
        raise ImageTooSmall(f"image {img.height}x{img.width} too small for border {border}")
    return img._replace(img.data[border:-border, border:-border])


# --------------------------------------------------------------------------
# tensor bridge

def to_tensor(img: ImageF, dtype=np.float32) -> np.ndarray:
    """(H, W, C) image -> (1, C, H, W) network tensor."""
    return np.ascontiguousarray(img.data.transpose(2, 0, 1)[None].astype(dtype))


def from_tensor(x: np.ndarray, value_range=(-1.0, 1.0)) -> ImageF:
    """First item of an (N, C, H, W) tensor, clamped into ``value_range``."""
    lo, hi = value_range
    data = np.clip(np.asarray(x[0], dtype=np.float64), lo, hi).transpose(1, 2, 0)
    return ImageF(data, value_range)
