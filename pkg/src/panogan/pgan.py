"""Progressive GAN: generator/critic grown from 4x4 with linear fading, WGAN-GP training.

Fading follows the convention where ``alpha`` weights the *previous-scale*
path: it starts at 1 when a new block is added and decays to 0, after
which only the new block contributes.
"""
from __future__ import annotations

import base64
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datasets import BatchStream
from .errors import ConfigError, InvalidInputError, TrainingDivergedError

DEFAULT_BUDGETS = {4: 48000, 8: 96000, 16: 96000, 32: 96000, 64: 200000}


# ------------------------------------------------------------------ configs

@dataclass
class GanArchConfig:
    latent_dim: int = 512
    target_size: int = 64
    base_channels: int = 64
    max_channels: int = 512
    equalized_lr: bool = True
    minibatch_stddev: bool = True
    leaky_slope: float = 0.2
    feature_resolution: int = 4  # D_f = activations entering the critic block at this size

    def __post_init__(self):
        if self.target_size < 4 or self.target_size & (self.target_size - 1):
            raise ConfigError(f"target_size must be a power of two >= 4, got {self.target_size}")
        if self.feature_resolution not in self.scales:
            raise ConfigError(f"feature_resolution {self.feature_resolution} not in {self.scales}")
        if self.latent_dim < 1 or self.base_channels < 1:
            raise ConfigError("latent_dim and base_channels must be positive")

    @property
    def scales(self) -> list[int]:
        return [4 * 2 ** i for i in range(int(math.log2(self.target_size)) - 1)]

    def channels(self, scale: int) -> int:
        return min(self.max_channels, self.base_channels * self.target_size // scale)

    @property
    def feature_count(self) -> int:
        """n_d: length of the critic feature vector."""
        return self.channels(self.feature_resolution) * self.feature_resolution ** 2


@dataclass
class GanTrainConfig:
    lr: float = 0.001
    beta1: float = 0.0
    beta2: float = 0.99
    batch_size: int = 16
    gp_weight: float = 10.0
    drift_weight: float = 0.001

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.gp_weight < 0 or self.drift_weight < 0:
            raise ConfigError("invalid GAN training config")


@dataclass
class ProgressiveSchedule:
    budgets: dict = field(default_factory=lambda: dict(DEFAULT_BUDGETS))
    fade_decrement: float = 1 / 600
    fade_step: int = 32

    def __post_init__(self):
        self.budgets = {int(k): int(v) for k, v in self.budgets.items()}
        if any(v < 1 for v in self.budgets.values()):
            raise ConfigError("per-scale budgets must be >= 1")
        if not 0 < self.fade_decrement <= 1 or self.fade_step < 1:
            raise ConfigError("fade_decrement must be in (0, 1] and fade_step >= 1")

    def scaled(self, factor: float) -> "ProgressiveSchedule":
        """Shrink every budget by ``factor``, keeping the fade a fixed share of each scale."""
        if factor <= 0:
            raise ConfigError("scale_factor must be positive")
        budgets = {k: max(1, round(v / factor)) for k, v in self.budgets.items()}
        step = max(1, round(self.fade_step / factor))
        fade_length = self.fade_step / self.fade_decrement / factor
        decrement = min(1.0, step / fade_length)
        return ProgressiveSchedule(budgets, decrement, step)

    def for_scales(self, scales) -> "ProgressiveSchedule":
        missing = [s for s in scales if s not in self.budgets]
        if missing:
            raise ConfigError(f"no iteration budget for scales {missing}")
        return ProgressiveSchedule({s: self.budgets[s] for s in scales},
                                   self.fade_decrement, self.fade_step)

    def total_steps(self) -> int:
        return sum(self.budgets.values())


def fade_alpha(schedule: ProgressiveSchedule, iterations_into_scale: int) -> float:
    """Weight of the previous-scale path, ``max(0, 1 - decrement * floor(k / step))``."""
    if iterations_into_scale < 0:
        raise InvalidInputError("iteration count must be >= 0")
    # divide by the number of decrements rather than multiply, so 1/600 gives 1 - n/600 exactly
    return max(0.0, 1.0 - (iterations_into_scale // schedule.fade_step) / (1.0 / schedule.fade_decrement))


# ------------------------------------------------------------------- layers

def pixel_norm(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x / torch.sqrt(torch.mean(x * x, dim=1, keepdim=True) + eps)


class ScaledConv2d(nn.Module):
    """Conv with optional equalized learning rate (runtime He scaling of N(0,1) weights)."""

    def __init__(self, cin, cout, kernel, padding=0, equalized=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.padding = padding
        self.equalized = equalized
        self.gain = math.sqrt(2.0 / (cin * kernel * kernel)) if equalized else 1.0

    def reset(self, gen):
        with torch.no_grad():
            std = 1.0 if self.equalized else math.sqrt(2.0 / self.weight[0].numel())
            self.weight.normal_(0.0, std, generator=gen)
            self.bias.zero_()

    def forward(self, x):
        return F.conv2d(x, self.weight * self.gain, self.bias, padding=self.padding)


class ScaledLinear(nn.Module):
    def __init__(self, cin, cout, equalized=True, gain=math.sqrt(2.0)):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(cout, cin))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.equalized = equalized
        self.gain = gain / math.sqrt(cin) if equalized else 1.0
        self._init_std = gain / math.sqrt(cin)

    def reset(self, gen):
        with torch.no_grad():
            self.weight.normal_(0.0, 1.0 if self.equalized else self._init_std, generator=gen)
            self.bias.zero_()

    def forward(self, x):
        return F.linear(x, self.weight * self.gain, self.bias)


def minibatch_stddev(x: torch.Tensor, group_size: int = 4) -> torch.Tensor:
    n, c, h, w = x.shape
    group = group_size if n % group_size == 0 else n
    y = x.reshape(group, -1, c, h, w)
    y = torch.sqrt(y.var(dim=0, unbiased=False) + 1e-8)
    y = y.mean(dim=(1, 2, 3)).reshape(-1, 1, 1, 1)
    y = y.repeat(group, 1, h, w)
    return torch.cat([x, y], dim=1)


def upsample(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="nearest")


def downsample(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    return F.avg_pool2d(x, factor) if factor > 1 else x


def _reset_all(module: nn.Module, seed: int):
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (ScaledConv2d, ScaledLinear)):
            m.reset(gen)


# ---------------------------------------------------------------- networks

class Generator(nn.Module):
    def __init__(self, cfg: GanArchConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        eq, c4 = cfg.equalized_lr, cfg.channels(4)
        self.slope = cfg.leaky_slope
        self.initial = ScaledLinear(cfg.latent_dim, c4 * 16, eq, gain=math.sqrt(2.0) / 4)
        self.initial_conv = ScaledConv2d(c4, c4, 3, 1, eq)
        self.blocks = nn.ModuleDict()
        self.to_rgb = nn.ModuleDict({"4": ScaledConv2d(c4, 1, 1, 0, eq)})
        for s in cfg.scales[1:]:
            cin, cout = cfg.channels(s // 2), cfg.channels(s)
            self.blocks[str(s)] = nn.ModuleList(
                [ScaledConv2d(cin, cout, 3, 1, eq), ScaledConv2d(cout, cout, 3, 1, eq)])
            self.to_rgb[str(s)] = ScaledConv2d(cout, 1, 1, 0, eq)
        _reset_all(self, seed)

    def _act(self, x):
        return pixel_norm(F.leaky_relu(x, self.slope))

    def forward(self, z: torch.Tensor, scale: int | None = None, alpha: float = 0.0):
        scale = self.cfg.target_size if scale is None else scale
        if scale not in self.cfg.scales:
            raise InvalidInputError(f"scale {scale} not in {self.cfg.scales}")
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise InvalidInputError(f"latent batch must be (N, {self.cfg.latent_dim}), got {tuple(z.shape)}")
        h = self.initial(pixel_norm(z)).reshape(z.shape[0], -1, 4, 4)
        h = self._act(self.initial_conv(self._act(h)))
        previous = None
        for s in self.cfg.scales[1:]:
            if s > scale:
                break
            if s == scale and alpha > 0:
                previous = torch.tanh(self.to_rgb[str(s // 2)](h))
            conv1, conv2 = self.blocks[str(s)]
            h = self._act(conv2(self._act(conv1(upsample(h)))))
        out = torch.tanh(self.to_rgb[str(scale)](h))
        if previous is not None:
            out = alpha * upsample(previous) + (1.0 - alpha) * out
        return out


class Discriminator(nn.Module):
    def __init__(self, cfg: GanArchConfig, seed: int = 1):
        super().__init__()
        self.cfg = cfg
        eq, c4 = cfg.equalized_lr, cfg.channels(4)
        self.slope = cfg.leaky_slope
        self.from_rgb = nn.ModuleDict(
            {str(s): ScaledConv2d(1, cfg.channels(s), 1, 0, eq) for s in cfg.scales})
        self.blocks = nn.ModuleDict()
        for s in cfg.scales[1:]:
            cin, cout = cfg.channels(s), cfg.channels(s // 2)
            self.blocks[str(s)] = nn.ModuleList(
                [ScaledConv2d(cin, cin, 3, 1, eq), ScaledConv2d(cin, cout, 3, 1, eq)])
        extra = 1 if cfg.minibatch_stddev else 0
        self.final_conv = ScaledConv2d(c4 + extra, c4, 3, 1, eq)
        self.final_dense = ScaledConv2d(c4, c4, 4, 0, eq)
        self.final_linear = ScaledLinear(c4, 1, eq, gain=1.0)
        _reset_all(self, seed)

    def _lrelu(self, x):
        return F.leaky_relu(x, self.slope)

    def _block(self, s, h):
        conv1, conv2 = self.blocks[str(s)]
        return downsample(self._lrelu(conv2(self._lrelu(conv1(h)))))

    def forward(self, x: torch.Tensor, scale: int | None = None, alpha: float = 0.0):
        """Return ``(scores, features)``; features are flattened per sample."""
        scale = self.cfg.target_size if scale is None else scale
        if scale not in self.cfg.scales:
            raise InvalidInputError(f"scale {scale} not in {self.cfg.scales}")
        if x.ndim != 4 or x.shape[1:] != (1, scale, scale):
            raise InvalidInputError(f"critic input must be (N, 1, {scale}, {scale}), got {tuple(x.shape)}")
        h = self._lrelu(self.from_rgb[str(scale)](x))
        features = None
        for s in reversed(self.cfg.scales):
            if s > scale:
                continue
            if s == self.cfg.feature_resolution:
                features = h.flatten(1)
            if s == 4:
                break
            h = self._block(s, h)
            if s == scale and alpha > 0:
                skip = self._lrelu(self.from_rgb[str(s // 2)](downsample(x)))
                h = alpha * skip + (1.0 - alpha) * h
        if features is None:
            features = h.flatten(1)
        if self.cfg.minibatch_stddev:
            h = minibatch_stddev(h)
        h = self._lrelu(self.final_conv(h))
        h = self._lrelu(self.final_dense(h)).flatten(1)
        return self.final_linear(h).squeeze(1), features

    def features(self, x, scale=None, alpha=0.0):
        return self.forward(x, scale, alpha)[1]


def generate(g: Generator, z, scale=None, alpha=0.0) -> torch.Tensor:
    dtype = next(g.parameters()).dtype
    with torch.no_grad():
        return g(torch.as_tensor(z, dtype=dtype).reshape(-1, g.cfg.latent_dim), scale, alpha)


def discriminate(d: Discriminator, x, scale=None, alpha=0.0):
    with torch.no_grad():
        return d(x, scale, alpha)


# --------------------------------------------------------------- objectives

def gradient_penalty(critic, real, fake, eps) -> torch.Tensor:
    """Mean of ``(||grad critic(x_hat)|| - 1)^2`` on ``x_hat = eps*real + (1-eps)*fake``."""
    x_hat = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    out = critic(x_hat)
    (grad,) = torch.autograd.grad(out.sum(), x_hat, create_graph=True)
    norm = grad.flatten(1).norm(2, dim=1)
    return torch.mean((norm - 1.0) ** 2)


def critic_loss(critic, real, fake, eps, gp_weight=10.0, drift_weight=0.001):
    """WGAN-GP critic objective with epsilon drift. ``critic`` maps images to scores."""
    real_scores = critic(real)
    fake_scores = critic(fake)
    loss = fake_scores.mean() - real_scores.mean()
    gp = gradient_penalty(critic, real, fake, eps) if gp_weight else real.new_zeros(())
    drift = (real_scores ** 2).mean()
    total = loss + gp_weight * gp + drift_weight * drift
    return total, {"wasserstein": -loss.item(), "gp": gp.item(), "drift": drift.item()}


def generator_loss(critic, fake) -> torch.Tensor:
    return -critic(fake).mean()


def _check_finite(d_loss, g_loss, diagnostics):
    if not (math.isfinite(d_loss) and math.isfinite(g_loss)):
        raise TrainingDivergedError(
            f"non-finite loss (critic={d_loss}, generator={g_loss})",
            {**diagnostics, "d_loss": d_loss, "g_loss": g_loss})


def gan_train_step(g, d, real, z, eps, cfg: GanTrainConfig, scale, alpha, opt_g, opt_d,
                   diagnostics=None):
    """One critic update followed by one generator update; returns ``(d_loss, g_loss)``."""
    critic = lambda x: d(x, scale, alpha)[0]  # noqa: E731
    diagnostics = diagnostics or {}

    with torch.no_grad():
        fake = g(z, scale, alpha)
    opt_d.zero_grad(set_to_none=True)
    d_total, _ = critic_loss(critic, real, fake, eps, cfg.gp_weight, cfg.drift_weight)
    d_loss = d_total.item()
    _check_finite(d_loss, 0.0, diagnostics)
    d_total.backward()
    opt_d.step()

    d.requires_grad_(False)
    try:
        opt_g.zero_grad(set_to_none=True)
        g_total = generator_loss(critic, g(z, scale, alpha))
        g_loss = g_total.item()
        _check_finite(d_loss, g_loss, diagnostics)
        g_total.backward()
        opt_g.step()
    finally:
        d.requires_grad_(True)
    return d_loss, g_loss


# ------------------------------------------------------------------ trainer

def _adam(params, lr, beta1, beta2):
    return torch.optim.Adam(params, lr=float(lr), betas=(float(beta1), float(beta2)), foreach=False)


def optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> dict:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, value in st.items():
            out[f"{prefix}/{idx}/{key}"] = torch.as_tensor(value, dtype=torch.float32)
    return out


def load_optimizer_tensors(prefix: str, opt: torch.optim.Optimizer, tensors: dict):
    sd = opt.state_dict()
    state: dict = {}
    for name, value in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/")
        state.setdefault(int(idx), {})[key] = torch.as_tensor(value).clone()
    sd["state"] = state
    opt.load_state_dict(sd)


def module_tensors(prefix: str, module: nn.Module) -> dict:
    return {f"{prefix}/{k}": v.detach() for k, v in module.state_dict().items()}


def load_module_tensors(prefix: str, module: nn.Module, tensors: dict):
    sd = {k[len(prefix) + 1:]: torch.as_tensor(v).clone() for k, v in tensors.items()
          if k.startswith(prefix + "/")}
    module.load_state_dict(sd)


def rng_to_text(gen: torch.Generator) -> str:
    return base64.b64encode(gen.get_state().numpy().tobytes()).decode("ascii")


def rng_from_text(text: str) -> torch.Generator:
    gen = torch.Generator()
    state = np.frombuffer(base64.b64decode(text), dtype=np.uint8).copy()
    gen.set_state(torch.from_numpy(state))
    return gen


class ProgressiveTrainer:
    """Owns G, D, their optimizers and the schedule position."""

    def __init__(self, real: np.ndarray, arch: GanArchConfig, schedule: ProgressiveSchedule,
                 train: GanTrainConfig, seed: int = 0):
        real = np.asarray(real, dtype=np.float32)
        if real.ndim != 3 or real.shape[1:] != (arch.target_size, arch.target_size):
            raise InvalidInputError(
                f"training patches must be {arch.target_size}x{arch.target_size}")
        self.real = torch.from_numpy(real).unsqueeze(1)
        self.arch, self.train, self.seed = arch, train, seed
        self.schedule = schedule.for_scales(arch.scales)
        self.g = Generator(arch, seed=seed * 2 + 0).to(memory_format=torch.channels_last)
        self.d = Discriminator(arch, seed=seed * 2 + 1).to(memory_format=torch.channels_last)
        self.opt_g = _adam(self.g.parameters(), train.lr, train.beta1, train.beta2)
        self.opt_d = _adam(self.d.parameters(), train.lr, train.beta1, train.beta2)
        self.stream = BatchStream(len(real), train.batch_size, seed)
        self.rng = torch.Generator().manual_seed(seed)
        self.scale_index = 0
        self.into_scale = 0
        self.step_count = 0

    # schedule position
    @property
    def scale(self) -> int:
        return self.arch.scales[min(self.scale_index, len(self.arch.scales) - 1)]

    @property
    def alpha(self) -> float:
        if min(self.scale_index, len(self.arch.scales) - 1) == 0:
            return 0.0
        if self.done:
            return fade_alpha(self.schedule, self.schedule.budgets[self.scale] - 1)
        return fade_alpha(self.schedule, self.into_scale)

    @property
    def done(self) -> bool:
        return self.scale_index >= len(self.arch.scales)

    def step(self) -> dict:
        scale, alpha = self.scale, self.alpha
        idx = torch.from_numpy(self.stream.next_indices())
        real = downsample(self.real[idx], self.arch.target_size // scale)
        z = torch.randn(len(idx), self.arch.latent_dim, generator=self.rng)
        eps = torch.rand(len(idx), 1, 1, 1, generator=self.rng)
        info = {"step": self.step_count, "scale": scale, "alpha": alpha}
        d_loss, g_loss = gan_train_step(self.g, self.d, real, z, eps, self.train, scale, alpha,
                                        self.opt_g, self.opt_d, info)
        self.step_count += 1
        self.into_scale += 1
        if self.into_scale >= self.schedule.budgets[scale]:
            self.scale_index += 1
            self.into_scale = 0
        return {**info, "d_loss": d_loss, "g_loss": g_loss}

    def run(self, until: int | None = None, log=None, sink=None, every: int = 0):
        """Train to ``until`` total steps (default: end of schedule)."""
        total = self.schedule.total_steps() if until is None else min(until, self.schedule.total_steps())
        while self.step_count < total:
            record = self.step()
            if log is not None:
                log(record)
            if sink is not None and every and self.step_count % every == 0 and not self.done:
                sink(self)
        if sink is not None and self.done:
            sink(self)
        return self

    def check_finite(self):
        for name, t in {**module_tensors("g", self.g), **module_tensors("d", self.d)}.items():
            if not torch.isfinite(t).all():
                raise TrainingDivergedError(f"non-finite parameter {name}",
                                            {"step": self.step_count})

    # persistence
    def checkpoint(self) -> tuple[dict, dict]:
        self.check_finite()
        metadata = {
            "kind": "pgan",
            "arch": asdict(self.arch),
            "train": asdict(self.train),
            "schedule": {"budgets": {str(k): v for k, v in self.schedule.budgets.items()},
                         "fade_decrement": self.schedule.fade_decrement,
                         "fade_step": self.schedule.fade_step},
            "seed": self.seed,
            "position": {"scale_index": self.scale_index, "into_scale": self.into_scale,
                         "step": self.step_count, "scale": self.scale, "alpha": self.alpha,
                         "done": self.done},
            "stream": self.stream.state(),
            "rng": rng_to_text(self.rng),
        }
        tensors = {**module_tensors("g", self.g), **module_tensors("d", self.d),
                   **optimizer_tensors("opt_g", self.opt_g),
                   **optimizer_tensors("opt_d", self.opt_d)}
        return metadata, tensors

    @classmethod
    def restore(cls, real, metadata: dict, tensors: dict) -> "ProgressiveTrainer":
        arch = GanArchConfig(**metadata["arch"])
        train = GanTrainConfig(**metadata["train"])
        sched = ProgressiveSchedule(**metadata["schedule"])
        trainer = cls(real, arch, sched, train, metadata["seed"])
        load_module_tensors("g", trainer.g, tensors)
        load_module_tensors("d", trainer.d, tensors)
        load_optimizer_tensors("opt_g", trainer.opt_g, tensors)
        load_optimizer_tensors("opt_d", trainer.opt_d, tensors)
        pos = metadata["position"]
        trainer.scale_index, trainer.into_scale = pos["scale_index"], pos["into_scale"]
        trainer.step_count = pos["step"]
        st = metadata["stream"]
        trainer.stream = BatchStream(len(trainer.real), train.batch_size, st["seed"],
                                     st["epoch"], st["position"])
        trainer.rng = rng_from_text(metadata["rng"])
        return trainer


def train_pgan(patches, schedule: ProgressiveSchedule, arch: GanArchConfig,
               train: GanTrainConfig, seed: int = 0, sink=None, every: int = 0, log=None):
    """Run the full progressive schedule and return the trained trainer."""
    return ProgressiveTrainer(patches, arch, schedule, train, seed).run(log=log, sink=sink, every=every)


def load_gan(metadata: dict, tensors: dict):
    """Rebuild frozen ``(G, D, scale, alpha)`` from a PGAN checkpoint."""
    if metadata.get("kind") != "pgan":
        raise InvalidInputError("checkpoint is not a PGAN checkpoint")
    arch = GanArchConfig(**metadata["arch"])
    g, d = Generator(arch), Discriminator(arch)
    load_module_tensors("g", g, tensors)
    load_module_tensors("d", d, tensors)
    for net in (g, d):
        net.to(memory_format=torch.channels_last)
        net.eval()
        net.requires_grad_(False)
    pos = metadata["position"]
    return g, d, pos["scale"], pos["alpha"]
