"""Patch encoders and their training against a frozen generator/critic pair."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
from torchvision.models.densenet import DenseNet
from torchvision.models.resnet import Bottleneck

from .datasets import BatchStream
from .errors import ConfigError, InvalidInputError, TrainingDivergedError
from .pgan import (load_module_tensors, load_optimizer_tensors, module_tensors,
                   optimizer_tensors)

LOSS_VARIANTS = ("izi", "ziz", "izi_f", "iziz_f")
ENCODER_VARIANTS = ("resnet50", "densenet169")


@dataclass
class LossConfig:
    variant: str = "iziz_f"
    gamma: float = 0.1

    def __post_init__(self):
        if self.variant not in LOSS_VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}; expected one of {LOSS_VARIANTS}")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")


@dataclass
class EncoderConfig:
    variant: str = "resnet50"
    latent_dim: int = 512
    width_mult: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ENCODER_VARIANTS:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.width_mult <= 0 or self.latent_dim < 1:
            raise ConfigError("width_mult and latent_dim must be positive")


@dataclass
class EncoderTrainConfig:
    lr: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 30

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("invalid encoder training config")


# ------------------------------------------------------------------- losses

def _sq_mean(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise InvalidInputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def loss_izi(x, x_rec):
    """Pixel MSE between a patch and its reconstruction."""
    return _sq_mean(x, x_rec)


def loss_ziz(z, z_rec):
    return _sq_mean(z, z_rec)


def loss_izi_f(x, x_rec, feats, feats_rec, gamma=0.1):
    """Pixel MSE plus ``gamma`` times the critic-feature MSE."""
    return _sq_mean(x, x_rec) + gamma * _sq_mean(feats, feats_rec)


def loss_iziz_f(x, x_rec, feats, feats_rec, z, z_rec, gamma=0.1):
    return loss_izi_f(x, x_rec, feats, feats_rec, gamma) + _sq_mean(z, z_rec)


# ----------------------------------------------------------------- networks

def _width(base: int, mult: float) -> int:
    return max(1, int(round(base * mult)))


class ResNetEncoder(nn.Module):
    """ResNet-50 topology (bottleneck stages 3-4-6-3) for 1-channel patches.

    Stride-1 stem without max-pool; the classifier is replaced by a linear
    projection to the latent size.
    """

    def __init__(self, latent_dim=512, width_mult=1.0, layers=(3, 4, 6, 3)):
        super().__init__()
        stem = _width(64, width_mult)
        self.stem = nn.Sequential(nn.Conv2d(1, stem, 3, 1, 1, bias=False),
                                  nn.BatchNorm2d(stem), nn.ReLU(inplace=True))
        stages, inplanes = [], stem
        for i, blocks in enumerate(layers):
            planes = _width(64 * 2 ** i, width_mult)
            stride = 1 if i == 0 else 2
            downsample = None
            if stride != 1 or inplanes != planes * Bottleneck.expansion:
                downsample = nn.Sequential(
                    nn.Conv2d(inplanes, planes * Bottleneck.expansion, 1, stride, bias=False),
                    nn.BatchNorm2d(planes * Bottleneck.expansion))
            stage = [Bottleneck(inplanes, planes, stride, downsample)]
            inplanes = planes * Bottleneck.expansion
            stage += [Bottleneck(inplanes, planes) for _ in range(1, blocks)]
            stages.append(nn.Sequential(*stage))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(inplanes, latent_dim)

    def forward(self, x):
        h = self.stages(self.stem(x))
        return self.head(torch.flatten(nn.functional.adaptive_avg_pool2d(h, 1), 1))


class DenseNetEncoder(nn.Module):
    """DenseNet-169 topology (dense blocks 6-12-32-32) for 1-channel patches."""

    def __init__(self, latent_dim=512, width_mult=1.0, blocks=(6, 12, 32, 32)):
        super().__init__()
        init = _width(64, width_mult)
        net = DenseNet(growth_rate=_width(32, width_mult), block_config=tuple(blocks),
                       num_init_features=init, num_classes=latent_dim)
        net.features.conv0 = nn.Conv2d(1, init, 3, 1, 1, bias=False)
        net.features.pool0 = nn.Identity()
        self.features = net.features
        self.head = net.classifier

    def forward(self, x):
        h = nn.functional.relu(self.features(x))
        return self.head(torch.flatten(nn.functional.adaptive_avg_pool2d(h, 1), 1))


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        if cfg.variant == "resnet50":
            e = ResNetEncoder(cfg.latent_dim, cfg.width_mult)
        else:
            e = DenseNetEncoder(cfg.latent_dim, cfg.width_mult)
    # NHWC roughly halves CPU convolution time here
    return e.to(memory_format=torch.channels_last)


def encode(e: nn.Module, x) -> torch.Tensor:
    """Latent vectors for a patch or batch of patches (inference mode)."""
    dtype = next(e.parameters()).dtype
    x = torch.as_tensor(np.asarray(x), dtype=dtype)
    single = x.ndim == 2
    x = x.reshape(-1, 1, *x.shape[-2:])
    was_training = e.training
    e.eval()
    with torch.no_grad():
        z = e(x)
    e.train(was_training)
    return z[0] if single else z


# ------------------------------------------------------------------ training

class FrozenGan:
    """Generator as decoder and critic as feature extractor, parameters frozen."""

    def __init__(self, g, d, scale=None, alpha=0.0):
        self.g, self.d = g, d
        self.scale = g.cfg.target_size if scale is None else scale
        self.alpha = alpha
        for net in (g, d):
            net.eval()
            net.requires_grad_(False)
            net.to(memory_format=torch.channels_last)

    @property
    def latent_dim(self) -> int:
        return self.g.cfg.latent_dim

    def decode(self, z):
        return self.g(z, self.scale, self.alpha)

    def features(self, x):
        return self.d(x, self.scale, self.alpha)[1]


def batch_loss(e, gan, x, loss: LossConfig, z_prior=None):
    """Loss for one batch. ``x`` is ignored for ``ziz``, which uses ``z_prior``."""
    if loss.variant == "ziz":
        z_rec = e(gan.decode(z_prior))
        return loss_ziz(z_prior, z_rec)
    z = e(x)
    x_rec = gan.decode(z)
    if loss.variant == "izi":
        return loss_izi(x, x_rec)
    f, f_rec = gan.features(x), gan.features(x_rec)
    if loss.variant == "izi_f":
        return loss_izi_f(x, x_rec, f, f_rec, loss.gamma)
    return loss_iziz_f(x, x_rec, f, f_rec, z, e(x_rec), loss.gamma)


def make_optimizer(e: nn.Module, cfg: EncoderTrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(e.parameters(), lr=float(cfg.lr), betas=(float(cfg.beta1), float(cfg.beta2)),
                            foreach=False)


def encoder_train_epoch(e, optimizer, gan, patches, loss: LossConfig, batch_size: int,
                        seed: int = 0, epoch: int = 0, log=None) -> float:
    """One pass over ``patches`` (shuffled by ``(seed, epoch)``); returns the mean batch loss."""
    dtype = next(e.parameters()).dtype
    data = torch.as_tensor(np.asarray(patches), dtype=dtype)
    if data.ndim == 3:
        data = data.unsqueeze(1)
    data = data.contiguous(memory_format=torch.channels_last)
    stream = BatchStream(len(data), batch_size, seed, epoch)
    latent_rng = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    e.train()
    losses = []
    for b in range(stream.batches_per_epoch()):
        idx = torch.from_numpy(stream.next_indices())
        x = data[idx]
        z_prior = None
        if loss.variant == "ziz":
            z_prior = torch.randn(len(idx), gan.latent_dim, generator=latent_rng, dtype=dtype)
        optimizer.zero_grad(set_to_none=True)
        value = batch_loss(e, gan, x, loss, z_prior)
        v = value.item()
        if not math.isfinite(v):
            raise TrainingDivergedError(f"non-finite encoder loss at epoch {epoch}, batch {b}",
                                        {"epoch": epoch, "batch": b, "loss": v})
        value.backward()
        optimizer.step()
        losses.append(v)
        if log is not None:
            log({"epoch": epoch, "batch": b, "loss": v})
    return float(np.mean(losses))


def encoder_checkpoint(e, cfg: EncoderConfig, loss: LossConfig, epoch: int,
                       optimizer=None, extra=None) -> tuple[dict, dict]:
    tensors = module_tensors("e", e)
    for name, t in tensors.items():
        if not torch.isfinite(t.float()).all():
            raise TrainingDivergedError(f"non-finite encoder parameter {name}", {"epoch": epoch})
    if optimizer is not None:
        tensors.update(optimizer_tensors("opt_e", optimizer))
    metadata = {"kind": "encoder", "encoder": asdict(cfg), "loss": asdict(loss),
                "epoch": epoch, **(extra or {})}
    return metadata, tensors


def load_encoder(metadata: dict, tensors: dict, optimizer_cfg: EncoderTrainConfig | None = None):
    """Rebuild an encoder (and optionally its optimizer) from checkpoint contents."""
    if metadata.get("kind") != "encoder":
        raise InvalidInputError("checkpoint is not an encoder checkpoint")
    cfg = EncoderConfig(**metadata["encoder"])
    e = build_encoder(cfg)
    load_module_tensors("e", e, tensors)
    if optimizer_cfg is None:
        return e
    opt = make_optimizer(e, optimizer_cfg)
    load_optimizer_tensors("opt_e", opt, tensors)
    return e, opt
