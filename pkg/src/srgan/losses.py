"""Content, adversarial and total-variation losses with analytic gradients.

Every loss returns ``(value, grad)``. Content and TV gradients are taken
w.r.t. the super-resolved image; adversarial gradients w.r.t. the
discriminator's logits when those are given, otherwise w.r.t. its
probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InvalidArgument, ShapeMismatch
from .models import FeatureExtractor, feature_backward, feature_forward
from .nn_ops import sigmoid

PROB_CLAMP = 1e-7
TV_EPS = 1e-8


@dataclass(frozen=True)
class LossSpec:
    content: str = "mse"           # "mse" or "feature"
    tap: tuple | None = None       # (i, j) for feature content
    adversarial_weight: float = 1e-3
    tv_weight: float = 0.0
    feature_rescale: float = 1.0 / 12.75
    adv_mean: bool = False

    def __post_init__(self):
        if self.content not in ("mse", "feature"):
            raise InvalidArgument(f"unknown content loss {self.content!r}")
        if self.content == "feature" and self.tap is None:
            raise InvalidArgument("feature content loss needs a tap (i, j)")
        if self.tap is not None:
            object.__setattr__(self, "tap", tuple(self.tap))
        if self.adversarial_weight < 0 or self.tv_weight < 0 or self.feature_rescale <= 0:
            raise InvalidArgument("loss weights must be non-negative")


@dataclass
class LossReport:
    content_value: float
    adversarial_value: float
    tv_value: float
    total: float
    adversarial_weight: float
    tv_weight: float
    grad_content: np.ndarray
    grad_tv: np.ndarray | None
    grad_adversarial: np.ndarray | None  # w.r.t. D logits (or probabilities)

    @property
    def grad_sr(self) -> np.ndarray:
        """Content + weighted TV gradient w.r.t. the SR image.

        The adversarial part still has to be pulled back through the
        discriminator by the caller (see :attr:`weighted_grad_adversarial`).
        """
        g = self.grad_content
        if self.grad_tv is not None and self.tv_weight:
            g = g + self.tv_weight * self.grad_tv
        return g

    @property
    def weighted_grad_adversarial(self):
        if self.grad_adversarial is None:
            return None
        return self.adversarial_weight * self.grad_adversarial


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch {a.shape} vs {b.shape}")


def mse_content_loss(sr: np.ndarray, hr: np.ndarray):
    """Squared error summed over channels, averaged over pixels and batch."""
    _same_shape(sr, hr)
    n, _, h, w = sr.shape
    diff = sr - hr
    norm = n * h * w
    return float(np.sum(diff.astype(np.float64) ** 2) / norm), (2.0 / norm) * diff


def feature_content_loss(sr, hr, extractor: FeatureExtractor, rescale: float = 1.0 / 12.75):
    _same_shape(sr, hr)
    f_sr, cache = feature_forward(extractor, sr, return_cache=True)
    f_hr = feature_forward(extractor, hr)
    n, _, h, w = f_sr.shape
    diff = rescale * (f_sr - f_hr)
    norm = n * h * w
    value = float(np.sum(diff.astype(np.float64) ** 2) / norm)
    grad_feat = (2.0 * rescale / norm) * diff
    return value, feature_backward(extractor, cache, grad_feat).astype(sr.dtype, copy=False)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _check_probs(p):
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise DomainError("probabilities must lie in [0, 1]")
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def adversarial_gen_loss(d_out=None, logits=None, mean: bool = False):
    """``sum_n -log D(G(x_n))`` (or the batch mean with ``mean=True``).

    Pass ``logits`` for the stable path; the gradient is then w.r.t. the
    logits. Otherwise it is w.r.t. ``d_out`` after clamping into
    ``[1e-7, 1 - 1e-7]``.
    """
    if logits is not None:
        z = np.asarray(logits)
        scale = 1.0 / z.shape[0] if mean else 1.0
        value = float(np.sum(_softplus(-z.astype(np.float64))) * scale)
        prob = sigmoid(z.astype(np.float64))
        return value, ((prob - 1.0) * scale).astype(z.dtype)
    if d_out is None:
        raise InvalidArgument("need d_out or logits")
    raw = np.asarray(d_out)
    p = _check_probs(raw)
    scale = 1.0 / p.shape[0] if mean else 1.0
    value = float(np.sum(-np.log(p)) * scale)
    return value, (-scale / p).astype(raw.dtype if np.issubdtype(raw.dtype, np.floating) else np.float64)


def discriminator_loss(d_real=None, d_fake=None, logits_real=None, logits_fake=None):
    """``-mean log D(real) - mean log(1 - D(fake))``.

    Returns ``(value, grad_real, grad_fake)`` with gradients w.r.t. the
    logits if those were given, otherwise w.r.t. the probabilities.
    """
    if logits_real is not None and logits_fake is not None:
        zr = np.asarray(logits_real, dtype=np.float64)
        zf = np.asarray(logits_fake, dtype=np.float64)
        nr, nf = zr.shape[0], zf.shape[0]
        value = float(np.mean(_softplus(-zr)) + np.mean(_softplus(zf)))
        sr, sf = sigmoid(zr), sigmoid(zf)
        dtype = np.asarray(logits_real).dtype
        return value, ((sr - 1.0) / nr).astype(dtype), (sf / nf).astype(dtype)
    if d_real is None or d_fake is None:
        raise InvalidArgument("need probabilities or logits for both real and fake")
    pr, pf = _check_probs(d_real), _check_probs(d_fake)
    nr, nf = pr.shape[0], pf.shape[0]
    value = float(-np.mean(np.log(pr)) - np.mean(np.log1p(-pf)))
    return value, -1.0 / (pr * nr), 1.0 / ((1.0 - pf) * nf)


def total_variation_loss(sr: np.ndarray, eps: float = TV_EPS):
    """Isotropic TV with forward differences (zero past the last row/col).

    ``sum sqrt(dx^2 + dy^2 + eps^2)`` over all pixels and channels,
    divided by the batch size.
    """
    if sr.ndim != 4 or sr.shape[2] < 2 or sr.shape[3] < 2:
        raise ShapeMismatch(f"total variation needs (N, C, H>=2, W>=2), got {sr.shape}")
    x = sr.astype(np.float64)
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[:, :, :, :-1] = x[:, :, :, 1:] - x[:, :, :, :-1]
    dy[:, :, :-1, :] = x[:, :, 1:, :] - x[:, :, :-1, :]
    mag = np.sqrt(dx * dx + dy * dy + eps * eps)
    n = sr.shape[0]
    value = float(mag.sum() / n)
    ux, uy = dx / mag / n, dy / mag / n
    grad = np.zeros_like(x)
    grad[:, :, :, 1:] += ux[:, :, :, :-1]
    grad[:, :, :, :-1] -= ux[:, :, :, :-1]
    grad[:, :, 1:, :] += uy[:, :, :-1, :]
    grad[:, :, :-1, :] -= uy[:, :, :-1, :]
    return value, grad.astype(sr.dtype)


def perceptual_loss(sr, hr, spec: LossSpec, d_fake=None, d_logits=None,
                    extractor: FeatureExtractor | None = None) -> LossReport:
    """Content loss plus weighted adversarial and TV terms."""
    if spec.content == "feature":
        if extractor is None:
            raise InvalidArgument("feature content loss needs an extractor")
        content, g_content = feature_content_loss(sr, hr, extractor, spec.feature_rescale)
    else:
        if extractor is not None:
            raise InvalidArgument("extractor given for an MSE content loss")
        content, g_content = mse_content_loss(sr, hr)

    adv, g_adv = 0.0, None
    if d_logits is not None or d_fake is not None:
        adv, g_adv = adversarial_gen_loss(d_fake, logits=d_logits, mean=spec.adv_mean)

    tv, g_tv = 0.0, None
    if spec.tv_weight:
        tv, g_tv = total_variation_loss(sr)

    total = content + spec.adversarial_weight * adv + spec.tv_weight * tv
    return LossReport(content, adv, tv, total, spec.adversarial_weight, spec.tv_weight,
                      g_content, g_tv, g_adv)
