"""Desk-scale latent diffusion generation: VAE pixel compressor, latent
forward diffusion with a noise-prediction denoiser, deterministic DDIM
sampling, and export of synthetic samples into the unlabeled pool.

Only emitted PNG samples cross into the segmentation stage; the two stages
share no parameters.
"""

import hashlib
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SYNTHETIC, Sample, export_dataset
from .errors import CheckpointError, NumericalError

LDM_CHECKPOINT_VERSION = 1


@dataclass
class VAEConfig:
    image_size: int = 64          # full-resolution preset: 512
    downsample_factor: int = 8
    latent_channels: int = 4
    base_channels: int = 32
    kl_weight: float = 1e-6
    lr: float = 1e-6
    epochs: int = 1000
    batch: int = 4

    def validate(self):
        errs = []
        if self.image_size % self.downsample_factor:
            errs.append(f"image_size {self.image_size} must be divisible by factor {self.downsample_factor}")
        if self.downsample_factor not in (2, 4, 8, 16):
            errs.append(f"downsample_factor must be a power of two in [2,16], got {self.downsample_factor}")
        for name in ("latent_channels", "base_channels", "epochs", "batch"):
            if getattr(self, name) < 1:
                errs.append(f"vae.{name} must be >= 1")
        return errs


@dataclass
class DenoiserConfig:
    base_channels: int = 32
    time_dim: int = 128
    lr: float = 1e-4
    epochs: int = 1000
    batch: int = 8

    def validate(self):
        errs = []
        for name in ("base_channels", "time_dim", "epochs", "batch"):
            if getattr(self, name) < 1:
                errs.append(f"denoiser.{name} must be >= 1")
        return errs


@dataclass
class DDIMConfig:
    steps: int = 100
    eta: float = 0.0
    seed: int = 0

    def validate(self, timesteps=None):
        errs = []
        if self.steps < 1:
            errs.append(f"ddim.steps must be >= 1, got {self.steps}")
        if timesteps is not None and self.steps > timesteps:
            errs.append(f"ddim.steps {self.steps} exceeds schedule length {timesteps}")
        if self.eta < 0:
            errs.append(f"ddim.eta must be >= 0, got {self.eta}")
        return errs


class DiffusionSchedule:
    """Per-step noise coefficients; alpha_bars has length T+1 with alpha_bar(0)=1."""

    def __init__(self, betas):
        betas = torch.as_tensor(betas, dtype=torch.float64)
        if betas.ndim != 1 or betas.numel() < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not ((betas > 0) & (betas < 1)).all():
            raise ValueError("betas must lie in (0,1)")
        self.timesteps = betas.numel()
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64),
                                     torch.cumprod(self.alphas, dim=0)])

    def alpha_bar(self, t):
        """alpha_bar at integer step(s) t in [0, T]."""
        if torch.is_tensor(t):
            if (t < 0).any() or (t > self.timesteps).any():
                raise ValueError(f"t out of range [0,{self.timesteps}]")
            return self.alpha_bars[t]
        if not 0 <= t <= self.timesteps:
            raise ValueError(f"t={t} out of range [0,{self.timesteps}]")
        return self.alpha_bars[int(t)]


def linear_beta_schedule(timesteps=1000, beta_start=1e-4, beta_end=2e-2):
    return DiffusionSchedule(torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64))


def forward_diffuse(z0, t, noise, schedule):
    """Closed-form corruption z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) noise.

    t may be an int (whole batch) or a per-sample integer tensor.
    """
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != z0 shape {tuple(z0.shape)}")
    ab = schedule.alpha_bar(t).to(z0.dtype)
    if torch.is_tensor(t) and t.ndim == 1:
        ab = ab.view(-1, *([1] * (z0.ndim - 1)))
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * noise


def denoiser_loss(eps_model, schedule, z0, t, generator=None):
    """Sample standard-normal noise, corrupt z0 to step t, and return the mean
    squared error between the true and the predicted noise."""
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype).to(z0.device)
    z_t = forward_diffuse(z0, t, eps, schedule)
    return F.mse_loss(eps_model(z_t, t), eps)


def ddim_timesteps(timesteps, steps):
    """Evenly strided descending subsequence T = t_0 > t_1 > ... > t_steps = 0."""
    return [round(timesteps * i / steps) for i in range(steps, -1, -1)]


def ddim_sample(eps_model, schedule, config, shape, generator=None):
    """Deterministic (eta=0) DDIM sampling from seeded Gaussian noise.

    eps_model: callable (z_t, t) -> predicted noise, with t an int or a
    per-sample tensor filled with the same step index.
    """
    errs = config.validate(schedule.timesteps)
    if errs:
        raise ValueError("; ".join(errs))
    if generator is None:
        generator = torch.Generator().manual_seed(int(config.seed))
    z = torch.randn(shape, generator=generator, dtype=torch.float64)
    ts = ddim_timesteps(schedule.timesteps, config.steps)
    for t_cur, t_next in zip(ts[:-1], ts[1:]):
        ab_cur = schedule.alpha_bar(t_cur).to(z.dtype)
        ab_next = schedule.alpha_bar(t_next).to(z.dtype)
        eps = eps_model(z, t_cur)
        z0_hat = (z - torch.sqrt(1.0 - ab_cur) * eps) / torch.sqrt(ab_cur)
        if config.eta > 0:
            sigma = (config.eta * torch.sqrt((1 - ab_next) / (1 - ab_cur))
                     * torch.sqrt(1 - ab_cur / ab_next))
            dir_coeff = torch.sqrt(torch.clamp(1.0 - ab_next - sigma ** 2, min=0.0))
            noise = torch.randn(shape, generator=generator, dtype=z.dtype)
            z = torch.sqrt(ab_next) * z0_hat + dir_coeff * eps + sigma * noise
        else:
            z = torch.sqrt(ab_next) * z0_hat + torch.sqrt(1.0 - ab_next) * eps
    return z


def _norm(channels):
    return nn.GroupNorm(min(8, channels), channels)


class VAE(nn.Module):
    """Small convolutional VAE compressing images by the configured factor."""

    def __init__(self, config=None):
        super().__init__()
        config = config or VAEConfig()
        errs = config.validate()
        if errs:
            raise ValueError("; ".join(errs))
        self.config = config
        c = config.base_channels
        n_down = int(math.log2(config.downsample_factor))
        enc = [nn.Conv2d(1, c, 3, padding=1)]
        ch = c
        for _ in range(n_down):
            enc += [_norm(ch), nn.SiLU(), nn.Conv2d(ch, min(ch * 2, 4 * c), 4, stride=2, padding=1)]
            ch = min(ch * 2, 4 * c)
        enc += [_norm(ch), nn.SiLU(), nn.Conv2d(ch, 2 * config.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(config.latent_channels, ch, 3, padding=1)]
        for _ in range(n_down):
            nxt = max(ch // 2, c)
            dec += [_norm(ch), nn.SiLU(), nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ch, nxt, 3, padding=1)]
            ch = nxt
        dec += [_norm(ch), nn.SiLU(), nn.Conv2d(ch, 1, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

    def _check_size(self, x):
        size = self.config.image_size
        if x.shape[-2:] != (size, size):
            raise ValueError(f"expected {size}x{size} input, got {tuple(x.shape[-2:])}")

    def posterior(self, x):
        self._check_size(x)
        mu, logvar = self.encoder(x).chunk(2, dim=1)
        return mu, logvar.clamp(-30.0, 20.0)

    def encode(self, x):
        """Deterministic latent (posterior mean)."""
        return self.posterior(x)[0]

    def decode(self, z):
        """Image-shaped output in [0,1] via a final sigmoid squashing."""
        return torch.sigmoid(self.decoder(z))

    def forward(self, x, generator=None):
        mu, logvar = self.posterior(x)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype).to(mu.device)
        z = mu + torch.exp(0.5 * logvar) * eps
        return self.decode(z), mu, logvar


def vae_loss(recon, x, mu, logvar, kl_weight):
    recon_term = F.mse_loss(recon, x)
    kl = -0.5 * (1 + logvar - mu.pow(2) - logvar.exp()).sum(dim=(1, 2, 3)).mean()
    return recon_term + kl_weight * kl, recon_term


def _batches(n, batch, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch):
        yield order[start:start + batch]


def _sample_tensor(samples):
    return torch.from_numpy(np.stack([s.image for s in samples])).float().unsqueeze(1)


def train_vae(samples, config, seed=0, log=None):
    """Train the compressor with Adam on MSE + kl_weight * KL; returns the
    model and the per-epoch loss history."""
    if not samples:
        raise ValueError("need at least one training sample")
    x_all = _sample_tensor(samples)
    model = VAE(config)
    _seed_module(model, seed * 31 + 5)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(seed * 31 + 7)
    history = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([seed, 211, epoch])
        total, count = 0.0, 0
        for idx in _batches(len(samples), config.batch, rng):
            x = x_all[idx]
            recon, mu, logvar = model(x, generator=gen)
            loss, recon_term = vae_loss(recon, x, mu, logvar, config.kl_weight)
            if not math.isfinite(float(loss)):
                raise NumericalError(f"VAE loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(recon_term)
            count += 1
        history.append(total / count)
        if log and (epoch + 1) % max(1, config.epochs // 10) == 0:
            log(f"vae epoch {epoch + 1}/{config.epochs}: recon {history[-1]:.6f}")
    return model, history


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, ch_in, ch_out, time_dim):
        super().__init__()
        self.norm1 = _norm(ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, ch_out)
        self.norm2 = _norm(ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.skip = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, t_emb):
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Small latent U-Net with sinusoidal timestep embedding; predicts noise."""

    def __init__(self, latent_channels=4, config=None):
        super().__init__()
        config = config or DenoiserConfig()
        errs = config.validate()
        if errs:
            raise ValueError("; ".join(errs))
        self.config = config
        self.latent_channels = latent_channels
        c, td = config.base_channels, config.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(32, td), nn.SiLU(), nn.Linear(td, td))
        self.in_conv = nn.Conv2d(latent_channels, c, 3, padding=1)
        self.enc1 = ResBlock(c, c, td)
        self.down = nn.Conv2d(c, c, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c, 2 * c, td)
        self.mid = ResBlock(2 * c, 2 * c, td)
        self.up_conv = nn.Conv2d(2 * c, c, 3, padding=1)
        self.dec1 = ResBlock(2 * c, c, td)
        self.out_norm = _norm(c)
        self.out_conv = nn.Conv2d(c, latent_channels, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, z, t):
        if not torch.is_tensor(t):
            t = torch.full((z.shape[0],), int(t), dtype=torch.long)
        dtype = z.dtype
        t_emb = self.time_mlp(timestep_embedding(t, 32).to(dtype))
        h1 = self.enc1(self.in_conv(z), t_emb)
        h2 = self.enc2(self.down(h1), t_emb)
        h2 = self.mid(h2, t_emb)
        up = self.up_conv(F.interpolate(h2, scale_factor=2, mode="nearest"))
        h = self.dec1(torch.cat([up, h1], dim=1), t_emb)
        return self.out_conv(self.act(self.out_norm(h)))


def _seed_module(module, seed):
    """Seeded fan-in init so a fixed seed reproduces the exact parameters."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen,
                                           dtype=m.weight.dtype) / math.sqrt(fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def encode_dataset(vae, samples, batch=16):
    """Deterministic latents for the whole dataset plus the unit-variance
    scale factor used for diffusion training."""
    vae.eval()
    outs = []
    with torch.no_grad():
        x_all = _sample_tensor(samples)
        for start in range(0, len(samples), batch):
            outs.append(vae.encode(x_all[start:start + batch]))
    latents = torch.cat(outs).double()
    std = float(latents.std())
    scale = 1.0 / std if std > 0 else 1.0
    return latents * scale, scale


def train_denoiser(latents, schedule, config, seed=0, log=None):
    """Train the noise predictor with AdamW on the latent dataset."""
    if latents.numel() == 0:
        raise ValueError("no latents to train on")
    latents = latents.float()
    model = Denoiser(latent_channels=latents.shape[1], config=config)
    _seed_module(model, seed * 37 + 11)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(seed * 37 + 13)
    history = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([seed, 307, epoch])
        total, count = 0.0, 0
        for idx in _batches(latents.shape[0], config.batch, rng):
            z0 = latents[idx]
            t = torch.randint(1, schedule.timesteps + 1, (z0.shape[0],), generator=gen)
            loss = denoiser_loss(model, schedule, z0, t, generator=gen)
            if not math.isfinite(float(loss)):
                raise NumericalError(f"denoiser loss diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss)
            count += 1
        history.append(total / count)
        if log and (epoch + 1) % max(1, config.epochs // 10) == 0:
            log(f"denoiser epoch {epoch + 1}/{config.epochs}: loss {history[-1]:.6f}")
    return model, history


def synthesize(vae, denoiser, schedule, ddim_config, n, seed=0, out_dir=None,
               scale_factor=1.0, checkpoint_hash="", quality_band=None):
    """Generate n unlabeled samples via DDIM and decode them to pixel space.

    Each sample uses an independent RNG stream derived from (seed, index), so
    generation is reproducible and parallelizable.  When out_dir is given the
    images are written as 8-bit PNGs with a sidecar generation manifest and
    the ids are appended to unlabeled_pool.txt.  quality_band, when set to
    ((mean_lo, mean_hi), (std_lo, std_hi)), drops out-of-band images (off by
    default; generation continues until n survivors or 10n attempts).
    """
    vae.eval()
    denoiser.eval()
    size = vae.config.image_size // vae.config.downsample_factor
    shape = (1, vae.config.latent_channels, size, size)
    samples = []
    attempts = 0
    max_attempts = n if quality_band is None else 10 * n
    with torch.no_grad():
        while len(samples) < n and attempts < max_attempts:
            i = attempts
            attempts += 1
            gen = torch.Generator().manual_seed((int(seed) * 1000003 + i) % (2 ** 63 - 1))
            def eps_fn(z, t):
                return denoiser(z.float(), t).double()
            z = ddim_sample(eps_fn, schedule, ddim_config, shape, generator=gen)
            img = vae.decode((z / scale_factor).float())[0, 0].clamp(0.0, 1.0).numpy()
            if quality_band is not None:
                (m_lo, m_hi), (s_lo, s_hi) = quality_band
                if not (m_lo <= img.mean() <= m_hi and s_lo <= img.std() <= s_hi):
                    continue
            samples.append(Sample(f"synth_{seed}_{i}", img.astype(np.float32), None, SYNTHETIC))
    if out_dir is not None:
        out_dir = Path(out_dir)
        export_dataset(samples, out_dir)
        manifest = {"seed": int(seed), "steps": ddim_config.steps, "count": len(samples),
                    "checkpoint_hash": checkpoint_hash, "ids": [s.id for s in samples]}
        (out_dir / "generation_manifest.json").write_text(json.dumps(manifest, indent=2))
        with open(out_dir / "unlabeled_pool.txt", "a") as fh:
            fh.writelines(s.id + "\n" for s in samples)
    return samples


def save_ldm_checkpoint(model, kind, config, path, extra=None):
    """Versioned checkpoint for VAE or denoiser, same layout as the trainer's."""
    payload = {"format_version": LDM_CHECKPOINT_VERSION, "kind": kind,
               "config": config, "model_state": model.state_dict()}
    if extra:
        payload.update(extra)
    path = str(path)
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_ldm_checkpoint(path, expected_kind):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = payload.get("format_version")
    if version != LDM_CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} != supported {LDM_CHECKPOINT_VERSION}")
    if payload.get("kind") != expected_kind:
        raise CheckpointError(f"expected a {expected_kind} checkpoint, found {payload.get('kind')!r}")
    if expected_kind == "vae":
        model = VAE(payload["config"])
    else:
        model = Denoiser(latent_channels=payload["latent_channels"], config=payload["config"])
    model.load_state_dict(payload["model_state"])
    return model, payload


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
