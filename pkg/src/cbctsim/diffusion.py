"""Conditional latent diffusion: cosine schedule, noise-prediction
training, and ancestral sampling conditioned on the degraded-image latent.

The denoiser is a U-shaped encoder-decoder with skip connections that
takes the channel-concatenation of the conditional latent x and the
noisy latent z_t, with the scalar noise level sqrt(gamma_t) injected at
each resolution through a sinusoidal embedding. Volumes are generated
slice by slice from one shared initial-noise tensor to keep inter-slice
continuity.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ckpt
from .codec import (CodecModel, LatentGrid, decode, denormalize_latent, encode,
                    image_to_unit, normalize_latent, quantize, unit_to_hu)
from .phantom import HU_MIN, Volume, fov_mask


@dataclass
class NoiseSchedule:
    T: int
    delta: float
    tau: float
    beta: np.ndarray       # beta_1..beta_T, index 0 == t=1
    gamma: np.ndarray      # gamma_1..gamma_T
    alpha_bar: np.ndarray  # alpha_bar_0..alpha_bar_T (index t)

    def gamma_at(self, t: int) -> float:
        """gamma_t with the convention gamma_0 = 1."""
        return 1.0 if t == 0 else float(self.gamma[t - 1])


def build_schedule(T: int = 1000, delta: float = 0.999,
                   tau: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: alpha_bar_t = f(t)/f(0) with
    f(t) = cos^2(((t/T + tau)/(1 + tau)) * pi/2), beta_t capped at delta."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < delta <= 1:
        raise ValueError("delta must be in (0, 1]")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + tau) / (1 + tau)) * (np.pi / 2.0)) ** 2
    alpha_bar = f / f[0]
    beta = np.minimum(1.0 - alpha_bar[1:] / alpha_bar[:-1], delta)
    gamma = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, delta=delta, tau=tau, beta=beta, gamma=gamma,
                         alpha_bar=alpha_bar)


def forward_noise(z0, gamma_t, eps):
    """z_t = sqrt(gamma_t) * z0 + sqrt(1 - gamma_t) * eps."""
    if np.shape(z0) != np.shape(eps):
        raise ValueError("z0/eps shape mismatch")
    if not 0 < gamma_t <= 1:
        raise ValueError("gamma_t must be in (0, 1]")
    return math.sqrt(gamma_t) * z0 + math.sqrt(1.0 - gamma_t) * eps


@dataclass
class DiffusionConfig:
    widths: tuple[int, ...] = (32, 64, 128)
    depth: int = 3
    emb_dim: int = 64
    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 200
    seed: int = 0


class _TimeEmbed(nn.Module):
    """Sinusoidal features of the scalar noise level, mapped by an MLP."""

    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(),
                                 nn.Linear(dim, dim))

    def forward(self, level):
        half = self.dim // 2
        freqs = torch.exp(
            torch.arange(half, dtype=level.dtype, device=level.device)
            * (-math.log(10000.0) / max(half - 1, 1)))
        ang = level[:, None] * freqs[None, :] * 1000.0
        emb = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
        return self.mlp(emb)


class _ResBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, c_in), c_in)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.emb = nn.Linear(emb_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserModel(nn.Module):
    """U-net noise predictor epsilon_theta(x, z_t, gamma_t)."""

    def __init__(self, config: DiffusionConfig | None = None):
        super().__init__()
        self.config = config or DiffusionConfig()
        cfg = self.config
        chans = [cfg.widths[min(i, len(cfg.widths) - 1)] for i in range(cfg.depth)]
        self.time_embed = _TimeEmbed(cfg.emb_dim)
        self.stem = nn.Conv2d(2, chans[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        c = chans[0]
        for i in range(cfg.depth):
            self.down_blocks.append(_ResBlock(c, chans[i], cfg.emb_dim))
            c = chans[i]
            if i < cfg.depth - 1:
                self.downsamples.append(nn.Conv2d(c, c, 4, stride=2, padding=1))

        self.middle = _ResBlock(c, c, cfg.emb_dim)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            self.up_blocks.append(_ResBlock(c + chans[i], chans[i], cfg.emb_dim))
            c = chans[i]
            if i > 0:
                self.upsamples.append(
                    nn.ConvTranspose2d(c, chans[i - 1], 4, stride=2, padding=1))
                c = chans[i - 1]

        self.out_norm = nn.GroupNorm(min(8, c), c)
        self.out_conv = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, x, z_t, gamma_t):
        """x, z_t: (B, 1, h, w); gamma_t: (B,) noise levels in (0, 1]."""
        emb = self.time_embed(torch.sqrt(gamma_t))
        h = self.stem(torch.cat([x, z_t], dim=1))
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.down_blocks) - 1:
                h = self.downsamples[i](h)
        h = self.middle(h, emb)
        for i, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips[-1 - i]], dim=1), emb)
            if i < len(self.upsamples):
                h = self.upsamples[i](h)
        return self.out_conv(F.silu(self.out_norm(h)))


def diffusion_loss(model, x, z0, schedule, generator):
    """Draw (t, eps), form z_t, and return the noise-prediction MSE."""
    if float(z0.abs().max()) > 10.0 or float(x.abs().max()) > 10.0:
        raise ValueError("latents look unnormalized (|value| > 10)")
    b = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    gamma_t = torch.as_tensor(schedule.gamma[t.numpy() - 1], dtype=z0.dtype)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = (torch.sqrt(gamma_t)[:, None, None, None] * z0
           + torch.sqrt(1.0 - gamma_t)[:, None, None, None] * eps)
    pred = model(x, z_t, gamma_t)
    return F.mse_loss(pred, eps)


def training_step(model, x, z0, schedule, generator, optimizer):
    """One optimizer update of the noise-prediction objective."""
    loss = diffusion_loss(model, x, z0, schedule, generator)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


Z0_CLIP = 1.0  # normalized-latent range; bounds the implied clean latent


def reverse_step(model, x, z_t, t: int, schedule, noise=None):
    """One ancestral step z_t -> z_{t-1}.

    Deterministic part: (z_t - beta_t/sqrt(1-gamma_t) * eps_hat) / sqrt(1-beta_t);
    stochastic part sigma_t * noise with
    sigma_t^2 = beta_t * (1 - gamma_{t-1}) / (1 - gamma_t), omitted at t=1.

    Evaluated through the algebraically equal posterior-mean form with the
    implied clean latent clipped to [-Z0_CLIP, Z0_CLIP]. Normalized latents
    live in that range by construction, so the clip is inactive for a
    consistent denoiser; it only prevents the capped-beta tail steps
    (1/sqrt(1-beta_t) up to ~31.6 at beta_t = 0.999) from amplifying
    prediction error into divergence.
    """
    beta_t = float(schedule.beta[t - 1])
    gamma_t = schedule.gamma_at(t)
    gamma_prev = schedule.gamma_at(t - 1)
    gamma = torch.full((z_t.shape[0],), gamma_t, dtype=z_t.dtype)
    with torch.no_grad():
        eps_hat = model(x, z_t, gamma)
    z0_hat = (z_t - math.sqrt(1.0 - gamma_t) * eps_hat) / math.sqrt(gamma_t)
    z0_hat = z0_hat.clamp(-Z0_CLIP, Z0_CLIP)
    mean = (math.sqrt(gamma_prev) * beta_t * z0_hat
            + math.sqrt(1.0 - beta_t) * (1.0 - gamma_prev) * z_t) \
        / (1.0 - gamma_t)
    if t > 1 and noise is not None:
        sigma = math.sqrt(beta_t * (1.0 - gamma_prev) / (1.0 - gamma_t))
        return mean + sigma * noise
    return mean


def sample(model, x, initial_noise, schedule, step_seed: int = 0):
    """Full reverse chain from t=T to t=1 under condition x.

    Deterministic given (initial_noise, step_seed).
    """
    if initial_noise.shape != x.shape:
        raise ValueError("initial noise shape must match the latent shape")
    gen = torch.Generator().manual_seed(step_seed)
    z = initial_noise.clone()
    for t in range(schedule.T, 0, -1):
        noise = torch.randn(z.shape, generator=gen, dtype=z.dtype) if t > 1 else None
        z = reverse_step(model, x, z, t, schedule, noise=noise)
    return z


def condition_latent(codec_model: CodecModel, image_hu: np.ndarray) -> np.ndarray:
    """HU image -> encode -> quantize -> normalize to ~[-1, 1]."""
    cb = codec_model.codebook_np
    z = encode(codec_model, image_to_unit(image_hu))
    return normalize_latent(quantize(z, cb), cb).values


def generate_volume(model, codec_model: CodecModel, cbct_volume: Volume,
                    noise_seed: int, schedule: NoiseSchedule | None = None,
                    shared_noise: bool = True) -> Volume:
    """Translate a degraded volume slice by slice.

    With `shared_noise` every slice starts from the same initial noise
    tensor and consumes the same per-step noise stream; otherwise each
    slice gets its own (seeded by (noise_seed, slice index)).
    """
    if schedule is None:
        schedule = build_schedule()
    h, w = cbct_volume.shape
    if h % codec_model.f or w % codec_model.f:
        raise ValueError("volume size not divisible by codec factor")
    lh, lw = h // codec_model.f, w // codec_model.f
    cb = codec_model.codebook_np

    base_gen = torch.Generator().manual_seed(noise_seed)
    shared_init = torch.randn((1, 1, lh, lw), generator=base_gen)

    out = np.empty_like(cbct_volume.slices, dtype=np.float32)
    fmask = cbct_volume.fov_mask()
    model.eval()
    for k in range(cbct_volume.n_slices):
        x = torch.from_numpy(condition_latent(codec_model, cbct_volume.slices[k]))
        x = x.view(1, 1, lh, lw)
        if shared_noise:
            init, step_seed = shared_init, noise_seed
        else:
            g = torch.Generator().manual_seed(hash((noise_seed, k)) & 0x7FFFFFFF)
            init = torch.randn((1, 1, lh, lw), generator=g)
            step_seed = (noise_seed * 1000003 + k + 1) & 0x7FFFFFFF
        z = sample(model, x, init, schedule, step_seed=step_seed)
        lat = LatentGrid(values=z.numpy()[0, 0], normalized=True)
        img = unit_to_hu(decode(codec_model, denormalize_latent(lat, cb)))
        img[~fmask] = HU_MIN
        out[k] = np.clip(img, -1000.0, 1000.0)
    return Volume(slices=out, spacing=cbct_volume.spacing,
                  fov_radius_px=cbct_volume.fov_radius_px)


def select_initial_noise(model, codec_model, validation_cbct: Volume,
                         reference_ct: Volume, n_candidates: int = 100,
                         schedule: NoiseSchedule | None = None,
                         metric: str = "mae", candidate_seeds=None) -> int:
    """Pick the initial-noise seed whose generated volume best matches
    the reference (lowest MAE, or highest SSIM with metric='ssim')."""
    from . import metrics as M

    if candidate_seeds is None:
        if n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        candidate_seeds = list(range(n_candidates))
    if not candidate_seeds:
        raise ValueError("empty candidate list")
    if validation_cbct.n_slices < 1:
        raise ValueError("empty validation volume")

    best_seed, best_score = None, None
    for seed in candidate_seeds:
        gen = generate_volume(model, codec_model, validation_cbct, seed,
                              schedule=schedule)
        if metric == "ssim":
            score = -M.ssim(gen, reference_ct)
        else:
            score = M.mae(gen, reference_ct)
        if best_score is None or score < best_score:
            best_seed, best_score = seed, score
    return best_seed


def train(model: DenoiserModel, codec_model: CodecModel,
          paired_images: list[tuple[np.ndarray, np.ndarray]],
          schedule: NoiseSchedule, config: DiffusionConfig,
          checkpoint_dir=None, max_steps: int | None = None):
    """Train the denoiser on (CT, pseudo-CBCT) HU slice pairs.

    The codec is frozen; slices are encoded once up front. Returns the
    trained model and the per-epoch mean losses.
    """
    if not paired_images:
        raise ValueError("empty paired dataset")
    codec_model.eval()
    for p in codec_model.parameters():
        p.requires_grad_(False)

    z0s, xs = [], []
    for ct, cbct in paired_images:
        z0s.append(condition_latent(codec_model, ct))
        xs.append(condition_latent(codec_model, cbct))
    z0_all = torch.from_numpy(np.stack(z0s)).unsqueeze(1)
    x_all = torch.from_numpy(np.stack(xs)).unsqueeze(1)

    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    n = z0_all.shape[0]
    epoch_losses = []
    steps = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        losses = []
        for i in range(0, n, config.batch_size):
            idx = perm[i:i + config.batch_size]
            loss = training_step(model, x_all[idx], z0_all[idx], schedule,
                                 gen, optimizer)
            losses.append(loss)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        epoch_losses.append(float(np.mean(losses)))
        if checkpoint_dir is not None:
            save_denoiser(model, f"{checkpoint_dir}/denoiser_epoch{epoch:04d}.ckpt")
        if max_steps is not None and steps >= max_steps:
            break
    model.eval()
    return model, epoch_losses


def save_denoiser(model: DenoiserModel, path) -> None:
    cfg = model.config
    meta = {"widths": list(cfg.widths), "depth": cfg.depth,
            "emb_dim": cfg.emb_dim}
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    ckpt.save_checkpoint(path, "denoiser", meta, tensors)


def load_denoiser(path) -> DenoiserModel:
    kind, meta, tensors = ckpt.load_checkpoint(path)
    if kind != "denoiser":
        raise ckpt.CheckpointError(f"{path}: expected a denoiser checkpoint, got {kind}")
    config = DiffusionConfig(widths=tuple(meta["widths"]), depth=meta["depth"],
                             emb_dim=meta["emb_dim"])
    model = DenoiserModel(config)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model
