"""Differentiable operators on NCHW numpy arrays.

Every forward op has a matching ``*_backward`` that takes the upstream
gradient and returns gradients for the op's inputs (and learnables). The
networks in :mod:`srgan.models` are fixed feed-forward graphs composed by
hand from these, so there is no general autodiff machinery here.

Ops keep the dtype of their inputs: training runs at float32, gradient
checks at float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateBatch, InvalidArgument, ShapeMismatch

# above this many bytes the im2col buffer is replaced by a per-tap loop
_IM2COL_LIMIT = 64 * 2**20


@dataclass
class Parameter:
    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self):
        self.grad[...] = 0


@dataclass(frozen=True)
class ConvSpec:
    k: int
    n_in: int
    n_out: int
    s: int = 1

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise InvalidArgument(f"kernel size must be odd, got {self.k}")
        if self.s not in (1, 2):
            raise InvalidArgument(f"stride must be 1 or 2, got {self.s}")
        if self.n_in < 1 or self.n_out < 1:
            raise InvalidArgument("channel counts must be positive")

    @property
    def padding(self) -> int:
        return self.k // 2

    @property
    def weight_shape(self):
        return (self.n_out, self.n_in, self.k, self.k)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        p = self.padding
        return (h + 2 * p - self.k) // self.s + 1, (w + 2 * p - self.k) // self.s + 1


@dataclass
class BatchNormState:
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(
            gamma=Parameter(np.ones(channels, dtype=dtype)),
            beta=Parameter(np.zeros(channels, dtype=dtype)),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            **kw,
        )


# --------------------------------------------------------------------------
# convolution

def _check_conv(x, w, spec):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and weights, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ShapeMismatch(f"square kernels only, got {w.shape[2:]}")
    if spec is None:
        spec = ConvSpec(w.shape[2], w.shape[1], w.shape[0])
    elif spec.weight_shape != w.shape:
        raise ShapeMismatch(f"weights {w.shape} do not match {spec}")
    return spec


def _taps(xp, k, s, ho, wo):
    """Yield ((i, j), view) for every kernel offset; view is (C, N, Ho, Wo)."""
    for i in range(k):
        for j in range(k):
            yield (i, j), xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]


def _im2col(xp, k, s, ho, wo):
    c, n = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    # (C, N, Ho, Wo, k, k) -> (C, k, k, N, Ho, Wo)
    return win.transpose(0, 4, 5, 1, 2, 3).reshape(c * k * k, n * ho * wo)


def _narrow(spec: ConvSpec) -> bool:
    # few output channels: shift outputs instead of inputs (one matmul, k*k cheap adds)
    return spec.s == 1 and spec.n_out < spec.n_in and spec.k > 1


def _canvas(xp):
    c, n, hp, wp = xp.shape
    return xp.reshape(c, n * hp * wp)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec | None = None,
           stride: int | None = None) -> np.ndarray:
    """Zero-padded (``k // 2``) cross-correlation."""
    if spec is None and stride is not None:
        spec = ConvSpec(w.shape[2], w.shape[1], w.shape[0], stride)
    spec = _check_conv(x, w, spec)
    n, c, h, wd = x.shape
    k, s, p = spec.k, spec.s, spec.padding
    ho, wo = spec.output_size(h, wd)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3)
    m = n * ho * wo
    if _narrow(spec):
        hp, wp = xp.shape[2:]
        z = (w.transpose(0, 2, 3, 1).reshape(-1, c) @ _canvas(xp)).reshape(spec.n_out, k, k, n, hp, wp)
        out = np.zeros((spec.n_out, n, ho, wo), dtype=z.dtype)
        for i in range(k):
            for j in range(k):
                out += z[:, i, j, :, i:i + ho, j:j + wo]
        out = out.reshape(spec.n_out, m)
    elif c * k * k * m * x.itemsize <= _IM2COL_LIMIT:
        out = w.reshape(spec.n_out, -1) @ _im2col(xp, k, s, ho, wo)
    else:
        out = np.zeros((spec.n_out, m), dtype=np.result_type(x, w))
        for (i, j), view in _taps(xp, k, s, ho, wo):
            out += w[:, :, i, j] @ view.reshape(c, m)
    out += b[:, None]
    return np.ascontiguousarray(out.reshape(spec.n_out, n, ho, wo).transpose(1, 0, 2, 3))


def conv2d_backward(x, w, spec, grad_out):
    """Returns ``(grad_x, grad_w, grad_b)``."""
    if spec is None:
        spec = ConvSpec(w.shape[2], w.shape[1], w.shape[0])
    spec = _check_conv(x, w, spec)
    n, c, h, wd = x.shape
    k, s, p = spec.k, spec.s, spec.padding
    ho, wo = spec.output_size(h, wd)
    if grad_out.shape != (n, spec.n_out, ho, wo):
        raise ShapeMismatch(f"grad_out {grad_out.shape} != expected {(n, spec.n_out, ho, wo)}")
    m = n * ho * wo
    g = grad_out.transpose(1, 0, 2, 3).reshape(spec.n_out, m)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))).transpose(1, 0, 2, 3)
    gxp = np.zeros(xp.shape, dtype=np.result_type(x, w, grad_out))
    if _narrow(spec):
        hp, wp = xp.shape[2:]
        shifted = np.zeros((spec.n_out, k, k, n, hp, wp), dtype=gxp.dtype)
        g4 = g.reshape(spec.n_out, n, ho, wo)
        for i in range(k):
            for j in range(k):
                shifted[:, i, j, :, i:i + ho, j:j + wo] = g4
        shifted = shifted.reshape(spec.n_out * k * k, -1)
        w2 = w.transpose(0, 2, 3, 1).reshape(-1, c)
        gxp = (w2.T @ shifted).reshape(xp.shape)
        grad_w = (shifted @ _canvas(xp).T).reshape(spec.n_out, k, k, c).transpose(0, 3, 1, 2)
    elif c * k * k * m * x.itemsize <= _IM2COL_LIMIT:
        grad_w = (g @ _im2col(xp, k, s, ho, wo).T).reshape(w.shape)
        dcols = (w.reshape(spec.n_out, -1).T @ g).reshape(c, k, k, n, ho, wo)
        for (i, j), view in _taps(gxp, k, s, ho, wo):
            view += dcols[:, i, j]
    else:
        grad_w = np.zeros_like(w, dtype=gxp.dtype)
        for (i, j), view in _taps(xp, k, s, ho, wo):
            grad_w[:, :, i, j] = g @ view.reshape(c, m).T
        for (i, j), view in _taps(gxp, k, s, ho, wo):
            view += (w[:, :, i, j].T @ g).reshape(c, n, ho, wo)
    grad_x = gxp[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(grad_x), grad_w.astype(w.dtype, copy=False), grad_b


# --------------------------------------------------------------------------
# activations

def _channel_view(a, x):
    a = np.asarray(a)
    if a.size == 1:
        return a.reshape(1, 1, 1, 1) if x.ndim == 4 else a.reshape(1, 1)
    if a.ndim != 1 or a.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"{a.shape[0]} slopes for {x.shape[1]} channels")
    return a.reshape((1, -1) + (1,) * (x.ndim - 2))


def prelu(x, a):
    """Parametric ReLU with per-channel slopes (or one shared slope)."""
    return np.where(x > 0, x, _channel_view(a, x) * x)


def prelu_backward(x, a, grad_out):
    """Returns ``(grad_x, grad_a)``; ``grad_a`` has the shape of ``a``."""
    av = _channel_view(a, x)
    neg = x <= 0
    grad_x = np.where(neg, av * grad_out, grad_out)
    contrib = np.where(neg, x * grad_out, 0)
    if np.asarray(a).size == 1:
        grad_a = np.asarray(contrib.sum()).reshape(np.shape(a))
    else:
        axes = (0,) + tuple(range(2, x.ndim))
        grad_a = contrib.sum(axis=axes)
    return grad_x, grad_a


def leaky_relu(x, alpha: float = 0.2):
    if not 0 < alpha < 1:
        raise InvalidArgument(f"alpha must be in (0, 1), got {alpha}")
    return np.maximum(x, alpha * x)


def leaky_relu_backward(x, alpha, grad_out):
    return np.where(x > 0, grad_out, alpha * grad_out)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(x):
    """Logistic function, stable for large ``|x|``."""
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_backward(y, grad_out):
    """Takes the forward *output* ``y``."""
    return grad_out * y * (1.0 - y)


# --------------------------------------------------------------------------
# normalisation

def batch_norm(x, st: BatchNormState, update_running: bool = True):
    """Returns ``(y, cache)``.

    In train mode the batch statistics over (N, H, W) normalise ``x`` and,
    unless ``update_running`` is False, are blended into the running
    statistics. Eval mode reads only the running statistics.
    """
    if x.ndim != 4 or x.shape[1] != st.gamma.shape[0]:
        raise ShapeMismatch(f"batch_norm over {st.gamma.shape[0]} channels got {x.shape}")
    shape = (1, -1, 1, 1)
    if st.mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise DegenerateBatch("train-mode batch norm needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if update_running:
            m = st.momentum
            st.running_mean[...] = (1 - m) * st.running_mean + m * mean
            st.running_var[...] = (1 - m) * st.running_var + m * var * (count / (count - 1))
    elif st.mode == "eval":
        mean, var = st.running_mean, st.running_var
    else:
        raise InvalidArgument(f"unknown batch norm mode {st.mode!r}")
    inv_std = 1.0 / np.sqrt(var + st.eps)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    y = x_hat * st.gamma.data.reshape(shape) + st.beta.data.reshape(shape)
    return y.astype(x.dtype, copy=False), (x_hat, inv_std.astype(x.dtype), st.mode)


def batch_norm_backward(cache, st: BatchNormState, grad_out):
    """Returns ``(grad_x, grad_gamma, grad_beta)``."""
    x_hat, inv_std, mode = cache
    shape = (1, -1, 1, 1)
    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    g_hat = grad_out * st.gamma.data.reshape(shape)
    if mode == "eval":
        grad_x = g_hat * inv_std.reshape(shape)
    else:
        count = x_hat.shape[0] * x_hat.shape[2] * x_hat.shape[3]
        mean_g = g_hat.sum(axis=(0, 2, 3)).reshape(shape) / count
        mean_gx = (g_hat * x_hat).sum(axis=(0, 2, 3)).reshape(shape) / count
        grad_x = inv_std.reshape(shape) * (g_hat - mean_g - x_hat * mean_gx)
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# reshaping ops

def pixel_shuffle(x, u: int):
    """(N, C*u*u, H, W) -> (N, C, u*H, u*W)."""
    n, cu, h, w = x.shape
    if cu % (u * u):
        raise ShapeMismatch(f"{cu} channels not divisible by {u * u}")
    c = cu // (u * u)
    return x.reshape(n, c, u, u, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * u, w * u)


def pixel_shuffle_backward(grad_out, u: int):
    """Inverse permutation of :func:`pixel_shuffle`."""
    n, c, hu, wu = grad_out.shape
    if hu % u or wu % u:
        raise ShapeMismatch(f"spatial dims {hu}x{wu} not divisible by {u}")
    h, w = hu // u, wu // u
    return grad_out.reshape(n, c, h, u, w, u).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * u * u, h, w)


def dense(x, w, b):
    """``y = x W + b`` on a batch of flattened inputs; ``w`` is (D_in, D_out)."""
    x2 = x.reshape(x.shape[0], -1)
    if x2.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"dense input length {x2.shape[1]} != weight rows {w.shape[0]}")
    return x2 @ w + b


def dense_backward(x, w, grad_out):
    """Returns ``(grad_x, grad_w, grad_b)``; ``grad_x`` has the shape of ``x``."""
    x2 = x.reshape(x.shape[0], -1)
    return (grad_out @ w.T).reshape(x.shape), x2.T @ grad_out, grad_out.sum(axis=0)


def elementwise_add(x, y):
    if x.shape != y.shape:
        raise ShapeMismatch(f"cannot add {x.shape} and {y.shape}")
    return x + y


def elementwise_add_backward(grad_out):
    return grad_out, grad_out


def max_pool2d(x):
    """2x2 max pooling with stride 2; odd trailing rows/cols are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeMismatch(f"max_pool2d needs at least 2x2 input, got {h}x{w}")
    win = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
    return win.max(axis=(3, 5))


def max_pool2d_backward(x, grad_out):
    """Routes each gradient to the first maximal element of its window."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, ho, wo, 4)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, flat.argmax(axis=-1)[..., None], 1, axis=-1)
    g = (mask * grad_out[..., None]).reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    grad_x = np.zeros_like(x, dtype=grad_out.dtype)
    grad_x[:, :, :2 * ho, :2 * wo] = g.reshape(n, c, 2 * ho, 2 * wo)
    return grad_x


# --------------------------------------------------------------------------
# gradient oracle

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    checked: dict[str, int] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_difference_check(func, inputs: dict, analytic: dict, h: float = 1e-5,
                            tolerance: float = 1e-4, max_checks: int | None = None,
                            rng: np.random.Generator | None = None,
                            floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``func`` is called with no arguments and must read the arrays in
    ``inputs`` (which are perturbed in place and restored). It returns a
    scalar. ``analytic`` maps the same names to gradient arrays. With
    ``max_checks`` only that many randomly chosen coordinates per input are
    probed. Relative error is ``|a - n| / max(|a|, |n|, floor)``, where the
    floor is raised to ``1e-6 * |f(x0)|``: round-off in the difference
    quotient grows with the function value, and coordinates whose true
    gradient is exactly zero would otherwise report pure noise.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(tolerance=tolerance)
    floor = max(floor, 1e-6 * abs(float(func())))
    for name, arr in inputs.items():
        if arr.dtype != np.float64:
            raise InvalidArgument(f"gradient check needs float64 inputs, {name} is {arr.dtype}")
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != arr.shape:
            raise ShapeMismatch(f"analytic gradient for {name} has shape {grad.shape}, expected {arr.shape}")
        if not arr.flags.c_contiguous:
            raise InvalidArgument(f"{name} must be C-contiguous to be perturbed in place")
        flat = arr.reshape(-1)
        idx = np.arange(arr.size)
        if max_checks is not None and arr.size > max_checks:
            idx = rng.choice(arr.size, size=max_checks, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(func())
            flat[i] = orig - h
            f_minus = float(func())
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = grad.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.checked[name] = len(idx)
    return report
