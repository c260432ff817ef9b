"""Desk-scale generative models used as the pre-trained G of stage two.

Both families implement the same adapter interface: ``train_step`` applies the
family's own training loss (so stage-2 fine-tuning is ordinary training on a
signed dataset), ``sample`` draws quantized image batches. The GAN's
``train_step`` accepts an optional guidance closure that stage two uses to add
the frozen-detector term to the generator loss.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoints import read_manifest, write_manifest
from .config import GeneratorConfig, config_hash
from .core import CoreError, ImageTensor, RngState, quantize_tensor
from .models import _group_norm
from .tensorio import load_tensor_dict, save_tensor_dict, tensor_dict_hash


class TrainingDiverged(RuntimeError):
    pass


class GeneratorAdapter:
    """Behavioral interface shared by the GAN and DDPM families."""

    family: str = ""
    config: GeneratorConfig

    def sample(self, count: int, rng: RngState) -> ImageTensor:
        raise NotImplementedError

    def train_step(self, real_batch: torch.Tensor, guidance: Callable | None = None) -> dict:
        raise NotImplementedError

    def parameters(self):
        raise NotImplementedError

    def state_dicts(self) -> dict[str, dict]:
        raise NotImplementedError

    def load_state_dicts(self, states: dict[str, dict]) -> None:
        raise NotImplementedError

    def set_learning_rate(self, lr: float) -> None:
        raise NotImplementedError

    def param_hashes(self) -> dict[str, str]:
        return {name: tensor_dict_hash(dict(sd)) for name, sd in self.state_dicts().items()}


# ---------------------------------------------------------------------------
# Tiny GAN

class _GanGenerator(nn.Module):
    def __init__(self, latent_dim: int, width: int, channels: int):
        super().__init__()
        w = width
        self.fc = nn.Linear(latent_dim, 4 * w * 4 * 4)
        self.c1 = nn.Conv2d(4 * w, 2 * w, 3, padding=1)
        self.c2 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.c3 = nn.Conv2d(w, w, 3, padding=1)
        self.out = nn.Conv2d(w, channels, 3, padding=1)
        self.width = w

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.fc(z), 0.2).reshape(z.shape[0], -1, 4, 4)
        for conv in (self.c1, self.c2, self.c3):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.leaky_relu(conv(h), 0.2)
        return torch.sigmoid(self.out(h))


class _GanDiscriminator(nn.Module):
    def __init__(self, width: int, channels: int):
        super().__init__()
        w = width
        self.c0 = nn.Conv2d(channels, w, 3, padding=1)
        self.c1 = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(4 * w, 4 * w, 3, stride=2, padding=1)
        self.head = nn.Linear(4 * w, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x
        for conv in (self.c0, self.c1, self.c2, self.c3):
            h = F.leaky_relu(conv(h), 0.2)
        return self.head(h.mean(dim=(2, 3))).squeeze(1)


class TinyGan(GeneratorAdapter):
    family = "gan"

    def __init__(self, config: GeneratorConfig):
        if config.family != "gan":
            raise CoreError(f"TinyGan given config for family {config.family!r}")
        self.config = config
        torch.manual_seed(RngState(config.seed, "gan-init").derived_seed)
        self.generator = _GanGenerator(config.latent_dim, config.width, 3)
        self.discriminator = _GanDiscriminator(config.width, 3)
        self._lr = config.learning_rate
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=self._lr, betas=(0.5, 0.999))
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=self._lr, betas=(0.5, 0.999))
        self.z_gen = RngState(config.seed, "gan-z").torch
        self.step = 0

    def sample(self, count: int, rng: RngState, chunk: int = 256) -> ImageTensor:
        self.generator.eval()
        outs = []
        with torch.no_grad():
            for i in range(0, count, chunk):
                b = min(chunk, count - i)
                z = torch.randn(b, self.config.latent_dim, generator=rng.torch)
                outs.append(quantize_tensor(self.generator(z)))
        self.generator.train()
        data = torch.cat(outs, dim=0) if outs else torch.zeros(0, 3, 32, 32)
        return ImageTensor(data, quantized=True)

    def train_step(self, real_batch: torch.Tensor, guidance: Callable | None = None) -> dict:
        b = real_batch.shape[0]
        z = torch.randn(b, self.config.latent_dim, generator=self.z_gen)
        fake = self.generator(z)

        logit_real = self.discriminator(real_batch)
        logit_fake = self.discriminator(fake.detach())
        loss_d = F.softplus(-logit_real).mean() + F.softplus(logit_fake).mean()
        self.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        self.opt_d.step()

        logit_fake2 = self.discriminator(fake)
        loss_g = F.softplus(-logit_fake2).mean()
        if guidance is not None:
            loss_g = loss_g + guidance(fake)
        self.opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        self.opt_g.step()

        if not (torch.isfinite(loss_d) and torch.isfinite(loss_g)):
            raise TrainingDiverged(f"gan loss diverged at step {self.step}: d={loss_d.item()} g={loss_g.item()}")
        self.step += 1
        with torch.no_grad():
            acc = 0.5 * ((logit_real > 0).float().mean() + (logit_fake < 0).float().mean())
        return {"loss_d": float(loss_d.item()), "loss_g": float(loss_g.item()), "d_accuracy": float(acc.item())}

    def parameters(self):
        yield from self.generator.parameters()
        yield from self.discriminator.parameters()

    def state_dicts(self) -> dict[str, dict]:
        return {"generator": dict(self.generator.state_dict()), "discriminator": dict(self.discriminator.state_dict())}

    def load_state_dicts(self, states: dict[str, dict]) -> None:
        self.generator.load_state_dict(states["generator"])
        self.discriminator.load_state_dict(states["discriminator"])

    def set_learning_rate(self, lr: float) -> None:
        self._lr = lr
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def reinit_discriminator(self) -> None:
        torch.manual_seed(RngState(self.config.seed, "gan-d-reinit").derived_seed)
        self.discriminator = _GanDiscriminator(self.config.width, 3)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=self._lr, betas=(0.5, 0.999))


# ---------------------------------------------------------------------------
# Tiny DDPM

def _time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    ang = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class _FilmBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, temb_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = _group_norm(cout)
        self.film = nn.Linear(temb_dim, 2 * cout)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.conv(x))
        scale, shift = self.film(temb).chunk(2, dim=1)
        h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return F.silu(h)


class _EpsNet(nn.Module):
    """Noise predictor: 3-stage encoder-decoder with skips and FiLM time conditioning."""

    def __init__(self, width: int, channels: int, temb_dim: int = 128):
        super().__init__()
        w = width
        self.temb = nn.Sequential(nn.Linear(64, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.e0 = _FilmBlock(channels, w, 1, temb_dim)
        self.e1 = _FilmBlock(w, 2 * w, 2, temb_dim)
        self.e2 = _FilmBlock(2 * w, 2 * w, 2, temb_dim)
        self.d1 = _FilmBlock(4 * w, 2 * w, 1, temb_dim)
        self.d0 = _FilmBlock(3 * w, w, 1, temb_dim)
        self.out = nn.Conv2d(w, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.temb(_time_embedding(t, 64))
        h0 = self.e0(x, temb)
        h1 = self.e1(h0, temb)
        h2 = self.e2(h1, temb)
        u1 = F.interpolate(h2, size=h1.shape[-2:], mode="nearest")
        h = self.d1(torch.cat([u1, h1], dim=1), temb)
        u0 = F.interpolate(h, size=h0.shape[-2:], mode="nearest")
        h = self.d0(torch.cat([u0, h0], dim=1), temb)
        return self.out(h)


class TinyDdpm(GeneratorAdapter):
    family = "ddpm"

    def __init__(self, config: GeneratorConfig):
        if config.family != "ddpm":
            raise CoreError(f"TinyDdpm given config for family {config.family!r}")
        self.config = config
        torch.manual_seed(RngState(config.seed, "ddpm-init").derived_seed)
        self.eps_net = _EpsNet(config.width, 3)
        self._lr = config.learning_rate
        self.opt = torch.optim.Adam(self.eps_net.parameters(), lr=self._lr)
        self.t_gen = RngState(config.seed, "ddpm-t").torch
        self.step = 0

        t_steps = config.ddpm_steps
        betas = torch.linspace(1e-4, 0.02, t_steps)
        alphas = 1.0 - betas
        alpha_bar = torch.cumprod(alphas, dim=0)
        alpha_bar_prev = torch.cat([torch.ones(1), alpha_bar[:-1]])
        self.betas = betas
        self.alphas = alphas
        self.alpha_bar = alpha_bar
        self.alpha_bar_prev = alpha_bar_prev
        self.posterior_var = betas * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)

    @property
    def t_steps(self) -> int:
        return self.config.ddpm_steps

    def add_noise(self, x0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        ab = self.alpha_bar[t][:, None, None, None]
        return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise

    def train_step(self, real_batch: torch.Tensor, guidance: Callable | None = None) -> dict:
        if guidance is not None:
            raise CoreError("detector guidance through ancestral sampling is not supported; use xi=0 for ddpm")
        x0 = real_batch * 2.0 - 1.0
        b = x0.shape[0]
        t = torch.randint(0, self.t_steps, (b,), generator=self.t_gen)
        noise = torch.randn(x0.shape, generator=self.t_gen)
        pred = self.eps_net(self.add_noise(x0, t, noise), t)
        loss = F.mse_loss(pred, noise)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"ddpm loss diverged at step {self.step}: {loss.item()}")
        self.step += 1
        return {"loss": float(loss.item())}

    def sample(self, count: int, rng: RngState, chunk: int = 256) -> ImageTensor:
        self.eps_net.eval()
        gen = rng.torch
        outs = []
        with torch.no_grad():
            for i in range(0, count, chunk):
                b = min(chunk, count - i)
                x = torch.randn(b, 3, 32, 32, generator=gen)
                for step in reversed(range(self.t_steps)):
                    t = torch.full((b,), step, dtype=torch.long)
                    eps = self.eps_net(x, t)
                    ab = self.alpha_bar[step]
                    x0_hat = ((x - (1.0 - ab).sqrt() * eps) / ab.sqrt()).clamp(-1.0, 1.0)
                    mean = (
                        self.alpha_bar_prev[step].sqrt() * self.betas[step] / (1.0 - ab) * x0_hat
                        + self.alphas[step].sqrt() * (1.0 - self.alpha_bar_prev[step]) / (1.0 - ab) * x
                    )
                    if step > 0:
                        x = mean + self.posterior_var[step].sqrt() * torch.randn(x.shape, generator=gen)
                    else:
                        x = mean
                outs.append(quantize_tensor((x + 1.0) / 2.0))
        self.eps_net.train()
        data = torch.cat(outs, dim=0) if outs else torch.zeros(0, 3, 32, 32)
        return ImageTensor(data, quantized=True)

    def parameters(self):
        yield from self.eps_net.parameters()

    def state_dicts(self) -> dict[str, dict]:
        return {"eps_net": dict(self.eps_net.state_dict())}

    def load_state_dicts(self, states: dict[str, dict]) -> None:
        self.eps_net.load_state_dict(states["eps_net"])

    def set_learning_rate(self, lr: float) -> None:
        self._lr = lr
        for group in self.opt.param_groups:
            group["lr"] = lr


def make_adapter(config: GeneratorConfig) -> GeneratorAdapter:
    return TinyGan(config) if config.family == "gan" else TinyDdpm(config)


# ---------------------------------------------------------------------------
# Pretraining and persistence

def pretrain(
    adapter: GeneratorAdapter,
    dataset,
    iterations: int | None = None,
    run_dir: str | Path | None = None,
    progress: bool = False,
) -> list[dict]:
    """Train the adapter on clean (unsigned) data with its own loss."""
    cfg = adapter.config
    iterations = cfg.iterations if iterations is None else iterations
    train = dataset.train_images
    batch_rng = RngState(cfg.seed, f"{adapter.family}-batches")
    history = []
    for it in range(iterations):
        idx = torch.from_numpy(batch_rng.numpy.integers(0, train.shape[0], size=cfg.batch_size))
        record = adapter.train_step(train[idx])
        if progress and (it + 1) % 1000 == 0:
            msg = " ".join(f"{k}={v:.4f}" for k, v in record.items())
            print(f"  [{adapter.family}] it={it + 1} {msg}", flush=True)
        if (it + 1) % 200 == 0 or it + 1 == iterations:
            history.append({"iteration": it + 1, **record})
    if run_dir is not None:
        save_generator(adapter, run_dir)
    return history


def save_generator(
    adapter: GeneratorAdapter,
    directory: str | Path,
    parents: list[str] | None = None,
    metrics: dict | None = None,
    extra: dict | None = None,
    extra_files: list[str] | None = None,
) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hashes = {}
    files = list(extra_files or [])
    for name, sd in adapter.state_dicts().items():
        path = directory / f"{name}.atd"
        hashes[name] = save_tensor_dict(sd, path)
        files.append(path.name)
    payload = {
        "family": adapter.family,
        "generator_config": {
            "family": adapter.config.family,
            "latent_dim": adapter.config.latent_dim,
            "width": adapter.config.width,
            "iterations": adapter.config.iterations,
            "batch_size": adapter.config.batch_size,
            "learning_rate": adapter.config.learning_rate,
            "ddpm_steps": adapter.config.ddpm_steps,
            "seed": adapter.config.seed,
        },
        "step": adapter.step,
        "param_hashes": hashes,
    }
    if extra:
        payload.update(extra)
    return write_manifest(
        directory,
        kind="generator",
        cfg_hash=config_hash(adapter.config),
        seed=adapter.config.seed,
        parents=parents,
        metrics=metrics,
        extra=payload,
        files=files,
    )


def load_generator(directory: str | Path) -> GeneratorAdapter:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.get("kind") != "generator":
        raise CoreError(f"{directory} is not a generator checkpoint")
    cfg = GeneratorConfig(**manifest["generator_config"])
    adapter = make_adapter(cfg)
    states = {}
    for name in adapter.state_dicts():
        states[name] = load_tensor_dict(directory / f"{name}.atd")
    adapter.load_state_dicts(states)
    adapter.step = manifest.get("step", 0)
    return adapter
