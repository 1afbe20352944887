"""Vector-quantized convolutional autoencoder with a scalar codebook.

One checkpoint per compression factor f in {2, 4, 8}: the encoder stacks
log2(f) stride-2 stages so the latent is (H/f, W/f) with one channel,
each latent value snapped to the nearest of K scalar codebook entries.
Codebook entries are maintained by exponential moving averages with
dead-entry reinitialization; gradients pass through the quantizer with
the straight-through estimator.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import ckpt

DEFAULT_WIDTHS = (32, 64, 128)


@dataclass
class CodecConfig:
    codebook_size: int = 512
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    commitment: float = 0.25
    ema_decay: float = 0.99
    dead_code_steps: int = 100
    lr: float = 2e-4
    grad_clip: float = 1.0
    max_epochs: int = 200
    patience: int = 50
    batch_size: int = 8
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class LatentGrid:
    """An (h, w) latent plane plus its processing state."""

    values: np.ndarray
    quantized: bool = False
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)


def _stage_channels(n_down, widths):
    # channel count after the stem and after each downsampling stage
    return [widths[min(i, len(widths) - 1)] for i in range(n_down + 1)]


class _Block(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.conv1 = nn.Conv2d(c, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, c, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, c), c)
        self.norm2 = nn.GroupNorm(min(8, c), c)

    def forward(self, x):
        h = F.silu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class Encoder(nn.Module):
    def __init__(self, n_down, widths):
        super().__init__()
        chans = _stage_channels(n_down, widths)
        layers = [nn.Conv2d(1, chans[0], 3, padding=1)]
        for i in range(n_down):
            layers += [_Block(chans[i]),
                       nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1)]
        layers += [_Block(chans[n_down]), nn.Conv2d(chans[n_down], 1, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, n_down, widths):
        super().__init__()
        chans = _stage_channels(n_down, widths)
        layers = [nn.Conv2d(1, chans[n_down], 3, padding=1)]
        for i in reversed(range(n_down)):
            layers += [_Block(chans[i + 1]),
                       nn.ConvTranspose2d(chans[i + 1], chans[i], 4, stride=2, padding=1)]
        layers += [_Block(chans[0]), nn.Conv2d(chans[0], 1, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class CodecModel(nn.Module):
    """Encoder + decoder + scalar codebook for one compression factor."""

    def __init__(self, f: int, config: CodecConfig | None = None):
        super().__init__()
        if f < 2 or f & (f - 1):
            raise ValueError("compression factor must be a power of two >= 2")
        self.config = config or CodecConfig()
        self.f = f
        n_down = int(np.log2(f))
        self.encoder = Encoder(n_down, self.config.widths)
        self.decoder = Decoder(n_down, self.config.widths)
        k = self.config.codebook_size
        self.register_buffer("codebook", torch.linspace(-1.0, 1.0, k))
        self.register_buffer("ema_count", torch.ones(k))
        self.register_buffer("ema_sum", torch.linspace(-1.0, 1.0, k))
        self.register_buffer("unused_steps", torch.zeros(k))
        self.training_log: list[dict] = []

    @property
    def codebook_np(self) -> np.ndarray:
        return self.codebook.detach().cpu().numpy().astype(np.float32)

    def quantize_tensor(self, z: torch.Tensor):
        """Nearest codebook entry per value; ties resolve to the lowest index."""
        dist = (z.reshape(-1, 1) - self.codebook.view(1, -1)).abs()
        idx = dist.argmin(dim=-1)
        zq = self.codebook[idx].reshape(z.shape)
        return zq, idx

    def forward(self, x):
        """Full autoencode pass with straight-through quantization.

        Returns (reconstruction, pre-quantization latent, quantized latent).
        """
        z = self.encoder(x)
        zq, idx = self.quantize_tensor(z)
        if self.training:
            self._update_codebook(z.detach().reshape(-1), idx)
        zq_st = z + (zq - z).detach()
        rec = self.decoder(zq_st)
        return rec, z, zq_st

    def _update_codebook(self, flat, idx):
        k = self.codebook.shape[0]
        counts = torch.bincount(idx, minlength=k).float()
        sums = torch.zeros(k).index_add_(0, idx, flat)
        d = self.config.ema_decay
        self.ema_count.mul_(d).add_(counts, alpha=1 - d)
        self.ema_sum.mul_(d).add_(sums, alpha=1 - d)
        active = counts > 0
        self.unused_steps[active] = 0
        self.unused_steps[~active] += 1
        self.codebook.copy_(self.ema_sum / self.ema_count.clamp_min(1e-8))
        # revive entries unused too long with random encoder outputs
        dead = self.unused_steps >= self.config.dead_code_steps
        if dead.any() and flat.numel() > 0:
            pick = torch.randint(0, flat.numel(), (int(dead.sum()),))
            self.codebook[dead] = flat[pick]
            self.ema_sum[dead] = flat[pick]
            self.ema_count[dead] = 1.0
            self.unused_steps[dead] = 0


def encode(model: CodecModel, image: np.ndarray) -> LatentGrid:
    """Continuous (pre-quantization) latent of an image in [0, 1]."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape
    if h % model.f or w % model.f:
        raise ValueError(f"image size {img.shape} not divisible by f={model.f}")
    with torch.no_grad():
        z = model.encoder(torch.from_numpy(img).view(1, 1, h, w))
    return LatentGrid(values=z.numpy()[0, 0])


def quantize(latent: LatentGrid, codebook: np.ndarray) -> LatentGrid:
    """Snap every latent value to its nearest codebook entry."""
    codebook = np.asarray(codebook, dtype=np.float32)
    if codebook.size == 0:
        raise RuntimeError("empty codebook")
    flat = latent.values.reshape(-1, 1)
    idx = np.abs(flat - codebook[None, :]).argmin(axis=1)
    return LatentGrid(values=codebook[idx].reshape(latent.values.shape),
                      quantized=True, normalized=latent.normalized)


def normalize_latent(latent: LatentGrid, codebook: np.ndarray) -> LatentGrid:
    """Affine map sending codebook min -> -1 and codebook max -> +1."""
    lo, hi = float(np.min(codebook)), float(np.max(codebook))
    if not hi > lo:
        raise RuntimeError("degenerate codebook (max <= min)")
    vals = (latent.values - lo) / (hi - lo) * 2.0 - 1.0
    return LatentGrid(values=vals, quantized=latent.quantized, normalized=True)


def denormalize_latent(latent: LatentGrid, codebook: np.ndarray) -> LatentGrid:
    """Exact inverse of normalize_latent."""
    lo, hi = float(np.min(codebook)), float(np.max(codebook))
    if not hi > lo:
        raise RuntimeError("degenerate codebook (max <= min)")
    vals = (latent.values + 1.0) / 2.0 * (hi - lo) + lo
    return LatentGrid(values=vals, quantized=latent.quantized, normalized=False)


def decode(model: CodecModel, latent: LatentGrid) -> np.ndarray:
    """Decode a latent plane back to a [0, 1] image."""
    vals = np.asarray(latent.values, dtype=np.float32)
    h, w = vals.shape
    with torch.no_grad():
        rec = model.decoder(torch.from_numpy(vals).view(1, 1, h, w))
    return rec.numpy()[0, 0]


def image_to_unit(img_hu: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(img_hu, dtype=np.float32) + 1000.0) / 2000.0, 0.0, 1.0)


def unit_to_hu(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float32) * 2000.0 - 1000.0


def train_codec(dataset: np.ndarray, f: int,
                config: CodecConfig | None = None) -> CodecModel:
    """Train a codec on a stack of [0, 1] images (N, H, W).

    Early-stops when validation loss fails to improve for
    `config.patience` epochs; returns the best-validation weights.
    """
    config = config or CodecConfig()
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError("dataset must be a nonempty (N, H, W) stack")

    torch.manual_seed(config.seed)
    model = CodecModel(f, config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(data.shape[0])
    n_val = max(1, int(config.val_fraction * data.shape[0])) if data.shape[0] > 1 else 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    if train_idx.size == 0:
        train_idx = order
    x_train = torch.from_numpy(data[train_idx]).unsqueeze(1)
    x_val = torch.from_numpy(data[val_idx]).unsqueeze(1) if n_val else x_train

    best_loss = np.inf
    best_state = None
    best_epoch = 0
    for epoch in range(config.max_epochs):
        model.train()
        perm = torch.from_numpy(rng.permutation(x_train.shape[0]))
        total = 0.0
        for i in range(0, x_train.shape[0], config.batch_size):
            xb = x_train[perm[i:i + config.batch_size]]
            rec, z, zq = model(xb)
            rec_loss = F.mse_loss(rec, xb)
            commit = F.mse_loss(z, zq.detach())
            loss = rec_loss + config.commitment * commit
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            total += loss.item() * xb.shape[0]
        train_loss = total / x_train.shape[0]

        model.eval()
        with torch.no_grad():
            val_total = 0.0
            for i in range(0, x_val.shape[0], config.batch_size):
                xb = x_val[i:i + config.batch_size]
                rec, _, _ = model(xb)
                val_total += float(F.mse_loss(rec, xb)) * xb.shape[0]
            val_loss = val_total / x_val.shape[0]

        model.training_log.append(
            {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.patience:
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model


def reconstruct(model: CodecModel, image_hu: np.ndarray) -> np.ndarray:
    """HU image -> encode -> quantize -> decode -> HU image."""
    z = encode(model, image_to_unit(image_hu))
    zq = quantize(z, model.codebook_np)
    return unit_to_hu(decode(model, zq))


def save_codec(model: CodecModel, path) -> None:
    cb = model.codebook_np
    meta = {
        "f": model.f,
        "codebook_size": int(cb.shape[0]),
        "widths": list(model.config.widths),
        "codebook_min": float(cb.min()),
        "codebook_max": float(cb.max()),
    }
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    ckpt.save_checkpoint(path, "codec", meta, tensors)


def load_codec(path) -> CodecModel:
    kind, meta, tensors = ckpt.load_checkpoint(path)
    if kind != "codec":
        raise ckpt.CheckpointError(f"{path}: expected a codec checkpoint, got {kind}")
    config = CodecConfig(codebook_size=meta["codebook_size"],
                         widths=tuple(meta["widths"]))
    model = CodecModel(meta["f"], config)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    model.eval()
    return model
