"""Generator, discriminator and the frozen feature extractor.

Each network is a fixed graph written out by hand over :mod:`srgan.nn_ops`.
``*_forward(..., return_cache=True)`` keeps what the matching
``*_backward`` needs; backward accumulates parameter gradients into
``Parameter.grad`` and returns the gradient w.r.t. the network input.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn_ops as F
from .errors import FormatError, InvalidArgument, ShapeMismatch
from .nn_ops import BatchNormState, ConvSpec, Parameter

PRELU_INIT = 0.25


@dataclass(frozen=True)
class GeneratorConfig:
    blocks: int = 16
    width: int = 64
    upscale: int = 4
    global_skip: bool = True
    shared_prelu: bool = False
    # False: block output = input + BN(conv2(.)); True: BN(input + conv2(.))
    bn_after_sum: bool = False

    def __post_init__(self):
        if self.blocks < 1:
            raise InvalidArgument(f"need at least one residual block, got {self.blocks}")
        if self.width < 1:
            raise InvalidArgument(f"width must be >= 1, got {self.width}")
        if self.upscale not in (2, 4):
            raise InvalidArgument(f"upscale must be 2 or 4, got {self.upscale}")

    @property
    def stages(self) -> int:
        return int(round(math.log2(self.upscale)))


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_size: int = 96
    widths: tuple = (64, 64, 128, 128, 256, 256, 512, 512)
    strides: tuple = (1, 2, 1, 2, 1, 2, 1, 2)
    dense_width: int = 1024
    leaky_alpha: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "strides", tuple(self.strides))
        if len(self.widths) != 8 or len(self.strides) != 8:
            raise InvalidArgument("discriminator needs exactly 8 widths and 8 strides")
        if any(s not in (1, 2) for s in self.strides) or any(w < 1 for w in self.widths):
            raise InvalidArgument("strides must be 1 or 2 and widths positive")
        if self.input_size % self.reduction:
            raise InvalidArgument(
                f"input_size {self.input_size} not divisible by total stride {self.reduction}")
        if not 0 < self.leaky_alpha < 1 or self.dense_width < 1:
            raise InvalidArgument("bad leaky_alpha or dense_width")

    @property
    def reduction(self) -> int:
        return int(np.prod(self.strides))

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        side = self.input_size // self.reduction
        return (self.widths[-1], side, side)


@dataclass
class ModelParams:
    """Named learnables plus batch-norm states of one network."""

    kind: str
    config: object
    params: dict[str, Parameter] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def add(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise InvalidArgument(f"duplicate parameter {name}")
        p = Parameter(data)
        self.params[name] = p
        return p

    def add_bn(self, name: str, channels: int, dtype) -> BatchNormState:
        st = BatchNormState.create(channels, dtype=dtype)
        self.params[f"{name}.gamma"] = st.gamma
        self.params[f"{name}.beta"] = st.beta
        self.bn[name] = st
        return st

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def set_mode(self, mode: str):
        if mode not in ("train", "eval"):
            raise InvalidArgument(f"unknown mode {mode!r}")
        for st in self.bn.values():
            st.mode = mode

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics as one flat name -> array map."""
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        expected = self.state_arrays()
        missing = sorted(set(expected) - set(arrays))
        if missing:
            raise FormatError(f"missing tensors: {missing[:5]}")
        for name, target in expected.items():
            src = np.asarray(arrays[name])
            if src.shape != target.shape:
                raise FormatError(f"tensor {name} has shape {src.shape}, expected {target.shape}")
            target[...] = src

    def astype(self, dtype) -> "ModelParams":
        new = copy.deepcopy(self)
        for p in new.params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for name, st in new.bn.items():
            st.gamma = new.params[f"{name}.gamma"]
            st.beta = new.params[f"{name}.beta"]
            st.running_mean = st.running_mean.astype(dtype)
            st.running_var = st.running_var.astype(dtype)
        return new

    def checksum(self) -> float:
        return float(sum(np.sum(p.data.astype(np.float64) ** 2) for p in self.params.values()))


def param_count(params: ModelParams) -> int:
    return sum(p.size for p in params.params.values())


def _he_normal(rng, shape, fan_in, negative_slope, dtype):
    gain = math.sqrt(2.0 / (1.0 + negative_slope ** 2))
    return (rng.standard_normal(shape) * gain / math.sqrt(fan_in)).astype(dtype)


def _add_conv(mp: ModelParams, rng, name, spec: ConvSpec, slope, dtype):
    fan_in = spec.n_in * spec.k * spec.k
    mp.add(f"{name}.w", _he_normal(rng, spec.weight_shape, fan_in, slope, dtype))
    mp.add(f"{name}.b", np.zeros(spec.n_out, dtype=dtype))


def _conv(mp, name, x, stride=1):
    return F.conv2d(x, mp[f"{name}.w"].data, mp[f"{name}.b"].data, stride=stride)


def _conv_back(mp, name, x, g, stride, accumulate):
    w = mp[f"{name}.w"]
    gx, gw, gb = F.conv2d_backward(x, w.data, ConvSpec(w.shape[2], w.shape[1], w.shape[0], stride), g)
    if accumulate:
        w.grad += gw
        mp[f"{name}.b"].grad += gb
    return gx


def _prelu_back(mp, name, x, g, accumulate):
    a = mp[f"{name}.a"]
    gx, ga = F.prelu_backward(x, a.data, g)
    if accumulate:
        a.grad += ga
    return gx


def _bn(mp, name, x, mode, update_running):
    st = mp.bn[name]
    if mode is not None and st.mode != mode:
        saved, st.mode = st.mode, mode
        try:
            return F.batch_norm(x, st, update_running)
        finally:
            st.mode = saved
    return F.batch_norm(x, st, update_running)


def _bn_back(mp, name, cache, g, accumulate):
    st = mp.bn[name]
    gx, gg, gb = F.batch_norm_backward(cache, st, g)
    if accumulate:
        st.gamma.grad += gg
        st.beta.grad += gb
    return gx


# --------------------------------------------------------------------------
# generator

def build_generator(cfg: GeneratorConfig = GeneratorConfig(), init_seed=0,
                    dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(init_seed)
    mp = ModelParams("generator", cfg)
    w = cfg.width
    n_slopes = 1 if cfg.shared_prelu else w

    def prelu(name, n=n_slopes):
        mp.add(f"{name}.a", np.full(n, PRELU_INIT, dtype=dtype))

    _add_conv(mp, rng, "head.conv", ConvSpec(9, 3, w), PRELU_INIT, dtype)
    prelu("head.prelu")
    for i in range(cfg.blocks):
        _add_conv(mp, rng, f"blocks.{i}.conv1", ConvSpec(3, w, w), PRELU_INIT, dtype)
        mp.add_bn(f"blocks.{i}.bn1", w, dtype)
        prelu(f"blocks.{i}.prelu")
        _add_conv(mp, rng, f"blocks.{i}.conv2", ConvSpec(3, w, w), 1.0, dtype)
        mp.add_bn(f"blocks.{i}.bn2", w, dtype)
    _add_conv(mp, rng, "post.conv", ConvSpec(3, w, w), 1.0, dtype)
    mp.add_bn("post.bn", w, dtype)
    for j in range(cfg.stages):
        _add_conv(mp, rng, f"up.{j}.conv", ConvSpec(3, w, 4 * w), PRELU_INIT, dtype)
        prelu(f"up.{j}.prelu")
    _add_conv(mp, rng, "tail.conv", ConvSpec(9, w, 3), 1.0, dtype)
    return mp


def generator_forward(mp: ModelParams, lr: np.ndarray, mode: str | None = None,
                      return_cache: bool = False, update_running: bool = True):
    """Super-resolve a batch ``(N, 3, H, W)`` in [0, 1] to ``(N, 3, rH, rW)``.

    ``mode`` overrides the batch-norm mode for this call only; ``None``
    uses whatever the states are set to. The output is the raw tail
    convolution, nominally in [-1, 1] but not clamped.
    """
    cfg: GeneratorConfig = mp.config
    if lr.ndim != 4 or lr.shape[1] != 3:
        raise ShapeMismatch(f"generator expects (N, 3, H, W) input, got {lr.shape}")
    c = {"lr": lr}
    h = _conv(mp, "head.conv", lr)
    c["head"] = h
    x = F.prelu(h, mp["head.prelu.a"].data)
    skip = x
    blocks = []
    for i in range(cfg.blocks):
        p = f"blocks.{i}"
        t1 = _conv(mp, f"{p}.conv1", x)
        t1n, bc1 = _bn(mp, f"{p}.bn1", t1, mode, update_running)
        t1a = F.prelu(t1n, mp[f"{p}.prelu.a"].data)
        t2 = _conv(mp, f"{p}.conv2", t1a)
        if cfg.bn_after_sum:
            out, bc2 = _bn(mp, f"{p}.bn2", x + t2, mode, update_running)
        else:
            t2n, bc2 = _bn(mp, f"{p}.bn2", t2, mode, update_running)
            out = F.elementwise_add(x, t2n)
        blocks.append((x, bc1, t1n, t1a, bc2))
        x = out
    c["blocks"] = blocks
    c["post_in"] = x
    pn, pc = _bn(mp, "post.bn", _conv(mp, "post.conv", x), mode, update_running)
    c["post_bn"] = pc
    y = F.elementwise_add(pn, skip) if cfg.global_skip else pn
    c["pre_upsample"] = y
    ups = []
    for j in range(cfg.stages):
        u = F.pixel_shuffle(_conv(mp, f"up.{j}.conv", y), 2)
        ups.append((y, u))
        y = F.prelu(u, mp[f"up.{j}.prelu.a"].data)
    c["ups"] = ups
    c["tail_in"] = y
    out = _conv(mp, "tail.conv", y)
    return (out, c) if return_cache else out


def generator_backward(mp: ModelParams, cache: dict, grad_out: np.ndarray,
                       accumulate: bool = True) -> np.ndarray:
    cfg: GeneratorConfig = mp.config
    g = _conv_back(mp, "tail.conv", cache["tail_in"], grad_out, 1, accumulate)
    for j in reversed(range(cfg.stages)):
        y_in, u = cache["ups"][j]
        g = _prelu_back(mp, f"up.{j}.prelu", u, g, accumulate)
        g = F.pixel_shuffle_backward(g, 2)
        g = _conv_back(mp, f"up.{j}.conv", y_in, g, 1, accumulate)
    g_skip = g if cfg.global_skip else 0
    g = _bn_back(mp, "post.bn", cache["post_bn"], g, accumulate)
    g = _conv_back(mp, "post.conv", cache["post_in"], g, 1, accumulate)
    for i in reversed(range(cfg.blocks)):
        p = f"blocks.{i}"
        x, bc1, t1n, t1a, bc2 = cache["blocks"][i]
        if cfg.bn_after_sum:
            g = _bn_back(mp, f"{p}.bn2", bc2, g, accumulate)
            g_res = g
        else:
            g_res = _bn_back(mp, f"{p}.bn2", bc2, g, accumulate)
        g_branch = _conv_back(mp, f"{p}.conv2", t1a, g_res, 1, accumulate)
        g_branch = _prelu_back(mp, f"{p}.prelu", t1n, g_branch, accumulate)
        g_branch = _bn_back(mp, f"{p}.bn1", bc1, g_branch, accumulate)
        g = g + _conv_back(mp, f"{p}.conv1", x, g_branch, 1, accumulate)
    g = g + g_skip
    g = _prelu_back(mp, "head.prelu", cache["head"], g, accumulate)
    return _conv_back(mp, "head.conv", cache["lr"], g, 1, accumulate)


# --------------------------------------------------------------------------
# discriminator

def build_discriminator(cfg: DiscriminatorConfig = DiscriminatorConfig(), init_seed=0,
                        dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(init_seed)
    mp = ModelParams("discriminator", cfg)
    a = cfg.leaky_alpha
    n_in = 3
    for i, (w, s) in enumerate(zip(cfg.widths, cfg.strides)):
        _add_conv(mp, rng, f"conv.{i}", ConvSpec(3, n_in, w, s), a, dtype)
        if i > 0:
            mp.add_bn(f"bn.{i}", w, dtype)
        n_in = w
    flat = int(np.prod(cfg.feature_shape))
    mp.add("dense.0.w", _he_normal(rng, (flat, cfg.dense_width), flat, a, dtype))
    mp.add("dense.0.b", np.zeros(cfg.dense_width, dtype=dtype))
    # linear output feeding the sigmoid: gain 1
    mp.add("dense.1.w", _he_normal(rng, (cfg.dense_width, 1), cfg.dense_width, 1.0, dtype))
    mp.add("dense.1.b", np.zeros(1, dtype=dtype))
    return mp


def discriminator_logits(mp: ModelParams, img: np.ndarray, mode: str | None = None,
                         return_cache: bool = False, update_running: bool = True):
    """Pre-sigmoid scores ``(N, 1)``."""
    cfg: DiscriminatorConfig = mp.config
    if img.ndim != 4 or img.shape[1] != 3 or img.shape[2:] != (cfg.input_size, cfg.input_size):
        raise ShapeMismatch(
            f"discriminator expects (N, 3, {cfg.input_size}, {cfg.input_size}), got {img.shape}")
    a = cfg.leaky_alpha
    layers = []
    x = img
    for i, s in enumerate(cfg.strides):
        z = _conv(mp, f"conv.{i}", x, stride=s)
        bc = None
        if i > 0:
            z, bc = _bn(mp, f"bn.{i}", z, mode, update_running)
        layers.append((x, bc, z))
        x = F.leaky_relu(z, a)
    c = {"layers": layers, "flat": x}
    d0 = F.dense(x, mp["dense.0.w"].data, mp["dense.0.b"].data)
    c["d0"] = d0
    h = F.leaky_relu(d0, a)
    c["h"] = h
    logits = F.dense(h, mp["dense.1.w"].data, mp["dense.1.b"].data)
    return (logits, c) if return_cache else logits


def discriminator_forward(mp: ModelParams, img: np.ndarray, mode: str | None = None,
                          return_cache: bool = False, update_running: bool = True):
    """Probability ``(N, 1)`` that each image is a real HR sample."""
    out = discriminator_logits(mp, img, mode, return_cache, update_running)
    if return_cache:
        logits, c = out
        c["logits"] = logits
        return F.sigmoid(logits), c
    return F.sigmoid(out)


def discriminator_backward(mp: ModelParams, cache: dict, grad_logits: np.ndarray,
                           accumulate: bool = True) -> np.ndarray:
    """Backpropagate a gradient w.r.t. the logits down to the input image."""
    cfg: DiscriminatorConfig = mp.config
    a = cfg.leaky_alpha

    def dense_back(name, x, g):
        gx, gw, gb = F.dense_backward(x, mp[f"{name}.w"].data, g)
        if accumulate:
            mp[f"{name}.w"].grad += gw
            mp[f"{name}.b"].grad += gb
        return gx

    g = dense_back("dense.1", cache["h"], grad_logits)
    g = F.leaky_relu_backward(cache["d0"], a, g)
    g = dense_back("dense.0", cache["flat"], g)
    for i in reversed(range(len(cfg.strides))):
        x, bc, z = cache["layers"][i]
        g = F.leaky_relu_backward(z, a, g)
        if i > 0:
            g = _bn_back(mp, f"bn.{i}", bc, g, accumulate)
        g = _conv_back(mp, f"conv.{i}", x, g, cfg.strides[i], accumulate)
    return g


# --------------------------------------------------------------------------
# feature extractor

@dataclass(frozen=True)
class FeatureExtractorConfig:
    block_convs: tuple = (2, 2, 4, 4, 4)
    widths: tuple = (64, 128, 256, 512, 512)
    tap: tuple = (5, 4)
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "block_convs", tuple(self.block_convs))
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "tap", tuple(self.tap))
        if len(self.block_convs) != len(self.widths):
            raise InvalidArgument("block_convs and widths must have equal length")
        i, j = self.tap
        if not 1 <= i <= len(self.block_convs) or not 1 <= j <= self.block_convs[i - 1]:
            raise InvalidArgument(f"invalid feature tap {self.tap} for layout {self.block_convs}")

    def layer_names(self) -> list[str]:
        """Layer sequence up to and including the tap, e.g. conv1_1, pool1, ..."""
        i_tap, j_tap = self.tap
        names = []
        for i in range(1, i_tap + 1):
            for j in range(1, (j_tap if i == i_tap else self.block_convs[i - 1]) + 1):
                names.append(f"conv{i}_{j}")
            if i < i_tap:
                names.append(f"pool{i}")
        return names


@dataclass
class FeatureExtractor:
    config: FeatureExtractorConfig
    weights: dict[str, np.ndarray]

    @property
    def n_convs(self) -> int:
        return sum(1 for n in self.config.layer_names() if n.startswith("conv"))

    @property
    def n_pools(self) -> int:
        return sum(1 for n in self.config.layer_names() if n.startswith("pool"))


def _orthogonal(rng, n_out, fan_in, gain):
    a = rng.standard_normal((max(n_out, fan_in), min(n_out, fan_in)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return gain * (q if n_out >= fan_in else q.T)


def _conv_shapes(cfg: FeatureExtractorConfig):
    n_in = cfg.in_channels
    shapes = {}
    for name in cfg.layer_names():
        if name.startswith("conv"):
            block = int(name[4:].split("_")[0])
            n_out = cfg.widths[block - 1]
            shapes[name] = (n_out, n_in, 3, 3)
            n_in = n_out
    return shapes


def build_feature_extractor(cfg: FeatureExtractorConfig = FeatureExtractorConfig(),
                            seed=0, weight_file=None, dtype=np.float32) -> FeatureExtractor:
    """Frozen VGG-layout network truncated right after the tap activation.

    Without ``weight_file`` the weights are seeded (orthogonal, ReLU gain).
    A weight file is a checkpoint container holding ``convI_J.w`` /
    ``convI_J.b`` tensors.
    """
    weights = {}
    if weight_file is not None:
        from .checkpoint import load_checkpoint

        tensors = load_checkpoint(weight_file).tensors
        for name, shape in _conv_shapes(cfg).items():
            for suffix, shp in ((".w", shape), (".b", shape[:1])):
                key = name + suffix
                if key not in tensors:
                    raise FormatError(f"weight file lacks {key}")
                if tensors[key].shape != shp:
                    raise FormatError(f"{key} has shape {tensors[key].shape}, expected {shp}")
                weights[key] = tensors[key].astype(dtype)
    else:
        rng = np.random.default_rng(seed)
        for name, (n_out, n_in, k, _) in _conv_shapes(cfg).items():
            w = _orthogonal(rng, n_out, n_in * k * k, math.sqrt(2.0))
            weights[name + ".w"] = w.reshape(n_out, n_in, k, k).astype(dtype)
            weights[name + ".b"] = np.zeros(n_out, dtype=dtype)
    for arr in weights.values():
        arr.flags.writeable = False
    return FeatureExtractor(cfg, weights)


def feature_forward(ext: FeatureExtractor, img: np.ndarray, return_cache: bool = False):
    if img.ndim != 4 or img.shape[1] != ext.config.in_channels:
        raise ShapeMismatch(f"feature extractor expects {ext.config.in_channels} channels, got {img.shape}")
    need = 2 ** ext.n_pools
    if img.shape[2] < need or img.shape[3] < need:
        raise ShapeMismatch(f"input {img.shape[2:]} too small for {ext.n_pools} poolings")
    x = img.astype(np.result_type(img, ext.weights[next(iter(ext.weights))]), copy=False)
    cache = []
    for name in ext.config.layer_names():
        cache.append(x)
        if name.startswith("conv"):
            x = F.relu(F.conv2d(x, ext.weights[name + ".w"], ext.weights[name + ".b"]))
        else:
            x = F.max_pool2d(x)
    return (x, (cache, x)) if return_cache else x


def feature_backward(ext: FeatureExtractor, cache, grad_out: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the input image; extractor weights never receive one."""
    inputs, out = cache
    names = ext.config.layer_names()
    g = grad_out
    outputs = inputs[1:] + [out]
    for name, x, y in zip(reversed(names), reversed(inputs), reversed(outputs)):
        if name.startswith("conv"):
            g = F.relu_backward(y, g)
            g, _, _ = F.conv2d_backward(x, ext.weights[name + ".w"], None, g)
        else:
            g = F.max_pool2d_backward(x, g)
    return g


def config_dict(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
