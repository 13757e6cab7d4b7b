"""Adam, SRResNet pretraining, alternating SRGAN training and checkpoints."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import AdamConfig, TrainConfig, TrainSchedule, to_dict
from .errors import DataError, FormatError, InvalidArgument, MissingGradient, ProvenanceError
from .image_pipeline import DegradeConfig, ImageF, load_image, random_crop_pair, read_manifest, to_float
from .losses import LossSpec, discriminator_loss, perceptual_loss
from .models import (
    DiscriminatorConfig,
    FeatureExtractor,
    GeneratorConfig,
    ModelParams,
    build_discriminator,
    build_generator,
    discriminator_backward,
    discriminator_logits,
    generator_backward,
    generator_forward,
)
from .nn_ops import sigmoid

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: AdamConfig, lr: float = 1e-4) -> "AdamState":
        return cls(lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)

    def scalars(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(params: ModelParams, st: AdamState) -> None:
    """Bias-corrected Adam update of every parameter; gradients are zeroed."""
    for name, p in params:
        if p.grad is None or p.grad.shape != p.data.shape:
            raise MissingGradient(f"parameter {name} has no usable gradient")
    st.t += 1
    b1, b2 = st.beta1, st.beta2
    bc1 = 1.0 - b1 ** st.t
    bc2 = 1.0 - b2 ** st.t
    for name, p in params:
        if name not in st.m:
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        m, v, g = st.m[name], st.v[name], p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps)).astype(p.data.dtype)
        p.zero_grad()


def set_eval_mode(params: ModelParams) -> None:
    params.set_mode("eval")


def set_train_mode(params: ModelParams) -> None:
    params.set_mode("train")


# --------------------------------------------------------------------------
# data

def load_training_images(data) -> list[ImageF]:
    """Decode a manifest path (or a list of paths / images) into [0, 1] RGB."""
    if isinstance(data, (str, Path)):
        data = read_manifest(data)
    images = []
    for item in data:
        img = item if isinstance(item, ImageF) else to_float(load_image(item))
        if img.channels == 1:
            img = ImageF(np.repeat(img.data, 3, axis=2), img.value_range)
        images.append(img)
    if not images:
        raise DataError("training set is empty")
    return images


class BatchSampler:
    """Draws (LR, HR) batches; image choice and crop offsets come from one RNG.

    Images are picked uniformly with replacement, so any batch size works
    with any dataset size.
    """

    def __init__(self, images: list[ImageF], sched: TrainSchedule):
        if not images:
            raise DataError("training set is empty")
        self.images = images
        self.crop = sched.crop
        self.degrade = DegradeConfig(sched.factor, sched.gaussian_sigma)
        self.batch_size = sched.batch_size
        self.rng = np.random.default_rng(sched.seed)

    def next(self, dtype=np.float32):
        lrs, hrs = [], []
        for _ in range(self.batch_size):
            img = self.images[int(self.rng.integers(len(self.images)))]
            hr, lr = random_crop_pair(img, self.crop, self.degrade, self.rng)
            lrs.append(lr.data.transpose(2, 0, 1))
            hrs.append(hr.data.transpose(2, 0, 1) * 2.0 - 1.0)
        return np.stack(lrs).astype(dtype), np.stack(hrs).astype(dtype)


# --------------------------------------------------------------------------
# checkpoints

def _prefixed(prefix: str, arrays: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in arrays.items()}


def make_checkpoint(step: int, phase: str, config: dict, gen: ModelParams,
                    disc: ModelParams | None = None, adam_g: AdamState | None = None,
                    adam_d: AdamState | None = None) -> Checkpoint:
    tensors = _prefixed("generator", gen.state_arrays())
    meta = {"phase": phase, "config": config, "adam": {}}
    if disc is not None:
        tensors.update(_prefixed("discriminator", disc.state_arrays()))
    for tag, st, model in (("generator", adam_g, gen), ("discriminator", adam_d, disc)):
        if st is None or model is None:
            continue
        meta["adam"][tag] = st.scalars()
        for name, _ in model:
            if name in st.m:
                tensors[f"adam.{tag}.m/{name}"] = st.m[name]
                tensors[f"adam.{tag}.v/{name}"] = st.v[name]
    return Checkpoint(tensors, step, meta)


def _section(ckpt: Checkpoint, prefix: str) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in ckpt.tensors.items() if k.startswith(prefix + "/")}


def restore_model(ckpt: Checkpoint, kind: str = "generator") -> ModelParams:
    """Rebuild a model from its config echo, in the dtype it was stored in."""
    cfg = ckpt.config.get("config", {})
    arrays = _section(ckpt, kind)
    if not arrays:
        raise FormatError(f"checkpoint holds no {kind} tensors")
    dtype = next(iter(arrays.values())).dtype
    try:
        if kind == "generator":
            mp = build_generator(GeneratorConfig(**_untuple(cfg["generator"])), dtype=dtype)
        else:
            mp = build_discriminator(DiscriminatorConfig(**_untuple(cfg["discriminator"])), dtype=dtype)
    except (KeyError, TypeError, InvalidArgument) as exc:
        raise FormatError(f"checkpoint lacks a usable {kind} config: {exc}") from exc
    mp.load_state_arrays(arrays)
    return mp


def restore_adam(ckpt: Checkpoint, tag: str = "generator") -> AdamState | None:
    scalars = ckpt.config.get("adam", {}).get(tag)
    if scalars is None:
        return None
    st = AdamState(**scalars)
    for name, arr in _section(ckpt, f"adam.{tag}.m").items():
        st.m[name] = arr.copy()
    for name, arr in _section(ckpt, f"adam.{tag}.v").items():
        st.v[name] = arr.copy()
    return st


def _untuple(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


# --------------------------------------------------------------------------
# training loops

PRETRAIN_FIELDS = ["iteration", "lr", "content", "tv", "total"]
GAN_FIELDS = ["iteration", "lr", "d_loss", "d_real", "d_fake", "content", "adversarial", "tv", "g_total"]


class LossLog:
    def __init__(self, fields, path=None):
        self.fields = fields
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(fields)

    def append(self, row: dict):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([repr(row[f]) for f in self.fields])

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])


def _check_finite(value: float, what: str, it: int):
    if not np.isfinite(value):
        raise FloatingPointError(f"{what} became non-finite at iteration {it}")


def pretrain_srresnet(gen: ModelParams, data, spec: LossSpec, sched: TrainSchedule,
                      adam: AdamState | None = None, out_dir=None, config: dict | None = None,
                      start_step: int = 0) -> LossLog:
    """Content-loss-only generator training (the SRResNet phase).

    Each logged loss is measured with the parameters *before* that
    iteration's update. With ``out_dir`` a loss CSV and checkpoints
    (every ``sched.checkpoint_every`` steps and at the end) are written.
    """
    if spec.adversarial_weight != 0:
        raise InvalidArgument("pretraining uses a content-only loss (adversarial_weight must be 0)")
    if spec.content == "feature":
        raise InvalidArgument("pretraining with a feature loss needs train_srresnet_feature")
    return _pretrain(gen, data, spec, sched, adam, out_dir, config, start_step, None)


def _pretrain(gen, data, spec, sched, adam, out_dir, config, start_step, extractor):
    images = load_training_images(data)
    sampler = BatchSampler(images, sched)
    adam = adam or AdamState(lr=sched.lr_at(1))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_ = LossLog(PRETRAIN_FIELDS, out_dir / "loss.csv" if out_dir else None)
    config = config if config is not None else {"generator": _cfg(gen.config)}
    gen.set_mode("train")
    for it in range(1, sched.iterations + 1):
        adam.lr = sched.lr_at(it)
        lr_b, hr_b = sampler.next()
        gen.zero_grad()
        sr, cache = generator_forward(gen, lr_b, mode="train", return_cache=True)
        rep = perceptual_loss(sr, hr_b, spec, extractor=extractor)
        _check_finite(rep.total, "content loss", it)
        generator_backward(gen, cache, rep.grad_sr.astype(sr.dtype))
        adam_step(gen, adam)
        log_.append({"iteration": start_step + it, "lr": adam.lr, "content": rep.content_value,
                     "tv": rep.tv_value, "total": rep.total})
        if out_dir is not None and sched.checkpoint_every and it % sched.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_{start_step + it:08d}.srck",
                            make_checkpoint(start_step + it, "pretrain", config, gen, adam_g=adam))
    if out_dir is not None:
        save_checkpoint(out_dir / "final.srck",
                        make_checkpoint(start_step + sched.iterations, "pretrain", config, gen, adam_g=adam))
    return log_


def train_srresnet_feature(gen, data, spec, sched, extractor, **kw) -> LossLog:
    """Generator-only training with a feature-space content loss (SRResNet-VGG)."""
    if spec.adversarial_weight != 0:
        raise InvalidArgument("content-only phase: adversarial_weight must be 0")
    return _pretrain(gen, data, spec, sched, kw.get("adam"), kw.get("out_dir"),
                     kw.get("config"), kw.get("start_step", 0), extractor)


def train_srgan(gen: ModelParams, disc: ModelParams, data, spec: LossSpec, sched: TrainSchedule,
                extractor: FeatureExtractor | None = None, provenance: str | None = None,
                allow_unpretrained: bool = False, adam_g: AdamState | None = None,
                adam_d: AdamState | None = None, adam_cfg: AdamConfig = AdamConfig(),
                out_dir=None, config: dict | None = None, start_step: int = 0,
                on_iteration=None) -> LossLog:
    """Alternating D / G updates (one each per iteration).

    ``provenance`` is the phase recorded in the generator's source
    checkpoint; anything but ``"pretrain"`` raises ProvenanceError unless
    ``allow_unpretrained`` is set. ``on_iteration(it, stage)`` is called
    after each D step (``"d"``) and G step (``"g"``).
    """
    if provenance != "pretrain":
        if not allow_unpretrained:
            raise ProvenanceError(
                "SRGAN training must start from a pretrained SRResNet generator "
                f"(got provenance {provenance!r}); pass the override to proceed anyway")
        log.warning("training SRGAN from a generator without SRResNet pretraining")
    images = load_training_images(data)
    sampler = BatchSampler(images, sched)
    adam_g = adam_g or AdamState.from_config(adam_cfg, sched.lr_at(1))
    adam_d = adam_d or AdamState.from_config(adam_cfg, sched.lr_at(1))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_ = LossLog(GAN_FIELDS, out_dir / "loss.csv" if out_dir else None)
    config = config if config is not None else {
        "generator": _cfg(gen.config), "discriminator": _cfg(disc.config)}
    gen.set_mode("train")
    disc.set_mode("train")

    def snapshot(tag):
        return make_checkpoint(start_step + it, tag, config, gen, disc, adam_g, adam_d)

    for it in range(1, sched.iterations + 1):
        lr_rate = sched.lr_at(it)
        adam_g.lr = adam_d.lr = lr_rate
        lr_b, hr_b = sampler.next()

        gen.zero_grad()
        sr, g_cache = generator_forward(gen, lr_b, mode="train", return_cache=True)

        # discriminator step: real and fake through separate forwards
        disc.zero_grad()
        z_real, c_real = discriminator_logits(disc, hr_b, mode="train", return_cache=True)
        z_fake, c_fake = discriminator_logits(disc, sr, mode="train", return_cache=True)
        d_loss, g_real, g_fake = discriminator_loss(logits_real=z_real, logits_fake=z_fake)
        _check_finite(d_loss, "discriminator loss", it)
        discriminator_backward(disc, c_real, g_real)
        discriminator_backward(disc, c_fake, g_fake)
        adam_step(disc, adam_d)
        if on_iteration:
            on_iteration(it, "d")

        # generator step against the updated discriminator
        z_g, c_g = discriminator_logits(disc, sr, mode="train", return_cache=True, update_running=False)
        rep = perceptual_loss(sr, hr_b, spec, d_logits=z_g, extractor=extractor)
        _check_finite(rep.total, "generator loss", it)
        grad_sr = rep.grad_sr + discriminator_backward(disc, c_g, rep.weighted_grad_adversarial,
                                                       accumulate=False)
        generator_backward(gen, g_cache, grad_sr.astype(sr.dtype))
        adam_step(gen, adam_g)
        if on_iteration:
            on_iteration(it, "g")

        log_.append({
            "iteration": start_step + it, "lr": lr_rate, "d_loss": d_loss,
            "d_real": float(np.mean(sigmoid(z_real))), "d_fake": float(np.mean(sigmoid(z_fake))),
            "content": rep.content_value, "adversarial": rep.adversarial_value,
            "tv": rep.tv_value, "g_total": rep.total,
        })
        if out_dir is not None and sched.checkpoint_every and it % sched.checkpoint_every == 0:
            save_checkpoint(out_dir / f"checkpoint_{start_step + it:08d}.srck", snapshot("gan"))
    it = sched.iterations
    if out_dir is not None:
        save_checkpoint(out_dir / "final.srck", snapshot("gan"))
    return log_


def _cfg(cfg) -> dict:
    from .models import config_dict

    return config_dict(cfg)


def models_from_config(cfg: TrainConfig):
    return (build_generator(cfg.generator, cfg.init_seed),
            build_discriminator(cfg.discriminator, cfg.init_seed + 1))


def load_generator_checkpoint(path):
    """Returns ``(generator, checkpoint)``."""
    ckpt = load_checkpoint(path)
    return restore_model(ckpt, "generator"), ckpt

