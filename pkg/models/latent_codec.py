"""
Latent Codec Module
Per-frame convolutional autoencoder mapping pixel videos to the diffusion latent space
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from models.exceptions import DatasetError, ShapeError, TrainingDivergedError

logger = logging.getLogger(__name__)

PIXEL_TOLERANCE = 1e-6


def group_count(channels: int) -> int:
    """Largest GroupNorm group count <= 32 that divides channels"""
    return math.gcd(32, channels)


def _check_factor(spatial_factor: int) -> int:
    levels = int(round(math.log2(spatial_factor))) if spatial_factor > 0 else -1
    if levels < 1 or 2 ** levels != spatial_factor:
        raise ShapeError(f"spatial factor must be a power of two >= 2, got {spatial_factor}")
    return levels


class Encoder(nn.Module):
    """Strided conv encoder: 3 x H x W -> C x H/f x W/f"""

    def __init__(self, latent_channels: int = 4, width: int = 64, spatial_factor: int = 8):
        super().__init__()
        levels = _check_factor(spatial_factor)

        layers = [nn.Conv2d(3, width, kernel_size=3, padding=1), nn.SiLU()]
        channels = width
        for level in range(levels):
            out = width * min(2 ** (level + 1), 4)
            layers += [
                nn.Conv2d(channels, out, kernel_size=4, stride=2, padding=1),
                nn.GroupNorm(group_count(out), out),
                nn.SiLU(),
            ]
            channels = out
        layers.append(nn.Conv2d(channels, latent_channels, kernel_size=3, padding=1))
        self.encoder = nn.Sequential(*layers)

    def forward(self, x):
        return self.encoder(x)


class Decoder(nn.Module):
    """Transposed-conv decoder mirroring Encoder"""

    def __init__(self, latent_channels: int = 4, width: int = 64, spatial_factor: int = 8):
        super().__init__()
        levels = _check_factor(spatial_factor)

        channels = width * min(2 ** levels, 4)
        layers = [nn.Conv2d(latent_channels, channels, kernel_size=3, padding=1), nn.SiLU()]
        for level in reversed(range(levels)):
            out = width * min(2 ** level, 4)
            layers += [
                nn.ConvTranspose2d(channels, out, kernel_size=4, stride=2, padding=1),
                nn.GroupNorm(group_count(out), out),
                nn.SiLU(),
            ]
            channels = out
        layers.append(nn.Conv2d(channels, 3, kernel_size=3, padding=1))
        self.decoder = nn.Sequential(*layers)

    def forward(self, z):
        return self.decoder(z)


class LatentCodec(nn.Module):
    """
    Encoder/decoder pair plus the latent normalization constant

    latent_scale is the standard deviation of raw encoder outputs over the
    training set; encode divides by it so diffusion sees unit-variance latents.
    """

    def __init__(self, latent_channels: int = 4, width: int = 64, spatial_factor: int = 8):
        super().__init__()
        self.latent_channels = latent_channels
        self.spatial_factor = spatial_factor
        self.encoder = Encoder(latent_channels, width, spatial_factor)
        self.decoder = Decoder(latent_channels, width, spatial_factor)
        self.register_buffer("latent_scale", torch.ones(()))

    def forward(self, x):
        return self.decoder(self.encoder(x))


def validate_video(x: torch.Tensor, spatial_factor: int) -> None:
    """Check the VideoTensor contract on an (L,3,H,W) or (B,L,3,H,W) tensor"""
    if x.dim() not in (4, 5):
        raise ShapeError(f"video must be (L,3,H,W) or (B,L,3,H,W), got {tuple(x.shape)}")
    frames, channels, height, width = x.shape[-4:]
    if frames < 1 or channels != 3:
        raise ShapeError(f"video needs >= 1 frame and 3 channels, got {tuple(x.shape)}")
    if height % spatial_factor or width % spatial_factor:
        raise ShapeError(f"H={height}, W={width} not divisible by spatial factor {spatial_factor}")
    if x.numel() and float(x.detach().abs().max()) > 1.0 + PIXEL_TOLERANCE:
        raise ShapeError("video values must lie within [-1, 1]")


def encode_frames(frames: torch.Tensor, codec: LatentCodec) -> torch.Tensor:
    """Encode an (N,3,H,W) stack of independent frames to normalized latents"""
    return codec.encoder(frames) / codec.latent_scale


def decode_frames(latents: torch.Tensor, codec: LatentCodec) -> torch.Tensor:
    """Decode an (N,C,H',W') stack of normalized latents, unclamped"""
    return codec.decoder(latents * codec.latent_scale)


def encode_video(x: torch.Tensor, codec: LatentCodec) -> torch.Tensor:
    """
    Encode a pixel video frame-by-frame

    Args:
        x: VideoTensor (L,3,H,W) or batched (B,L,3,H,W), values in [-1, 1]
        codec: Latent codec

    Returns:
        Tensor: LatentVideo (L,C,H/f,W/f), batched if the input was
    """
    validate_video(x, codec.spatial_factor)
    batched = x.dim() == 5
    video = x if batched else x.unsqueeze(0)

    frames = rearrange(video, "b l c h w -> (b l) c h w")
    z = rearrange(encode_frames(frames, codec), "(b l) c h w -> b l c h w", b=video.shape[0])
    return z if batched else z[0]


def decode_video(z: torch.Tensor, codec: LatentCodec) -> torch.Tensor:
    """Decode a latent video frame-by-frame, clamped to [-1, 1]"""
    if z.dim() not in (4, 5):
        raise ShapeError(f"latent must be (L,C,H',W') or (B,L,C,H',W'), got {tuple(z.shape)}")
    if z.shape[-3] != codec.latent_channels:
        raise ShapeError(f"latent has {z.shape[-3]} channels, codec expects {codec.latent_channels}")
    batched = z.dim() == 5
    latents = z if batched else z.unsqueeze(0)

    frames = rearrange(latents, "b l c h w -> (b l) c h w")
    x = rearrange(decode_frames(frames, codec), "(b l) c h w -> b l c h w", b=latents.shape[0])
    x = x.clamp(-1.0, 1.0)
    return x if batched else x[0]


def reconstruction_psnr(x: torch.Tensor, x_hat: torch.Tensor, peak: float = 2.0) -> float:
    """PSNR in dB between two [-1, 1] tensors"""
    mse = float(F.mse_loss(x_hat, x))
    return float("inf") if mse == 0.0 else 10.0 * math.log10(peak ** 2 / mse)


@dataclass
class CodecTrainConfig:
    steps: int = 5000
    lr: float = 2e-4
    batch: int = 32
    seed: int = 0
    scale_samples: int = 512
    log_every: int = 100


@torch.no_grad()
def fit_latent_scale(codec: LatentCodec, dataset: Dataset, max_frames: int = 512, seed: int = 0) -> float:
    """Set codec.latent_scale to the std of raw encoder outputs over (a sample of) the dataset"""
    generator = torch.Generator().manual_seed(seed)
    count = min(max_frames, len(dataset))
    indices = torch.randperm(len(dataset), generator=generator)[:count].tolist()
    frames = torch.stack([dataset[i][0] for i in indices]).to(codec.latent_scale.device)

    raw = codec.encoder(frames)
    scale = float(raw.std())
    if not np.isfinite(scale) or scale <= 0.0:
        raise TrainingDivergedError(f"latent scale is degenerate ({scale})")
    codec.latent_scale.fill_(scale)
    return scale


def train_codec(dataset: Dataset,
                config: CodecTrainConfig,
                codec: Optional[LatentCodec] = None) -> LatentCodec:
    """
    Train the per-frame autoencoder on pixel reconstruction MSE

    Args:
        dataset: Frame dataset yielding (frame, caption) pairs, frame (3,H,W) in [-1, 1]
        config: Codec training parameters
        codec: Codec to train in place; a default one is built if omitted

    Returns:
        LatentCodec: Trained codec with fitted latent_scale
    """
    if len(dataset) == 0:
        raise DatasetError("codec training needs a nonempty dataset")
    codec = codec if codec is not None else LatentCodec()
    device = codec.latent_scale.device

    logger.info("=" * 60)
    logger.info("LATENT CODEC TRAINING")
    logger.info("=" * 60)
    logger.info("Frames: %d | steps: %d | batch: %d | lr: %g",
                len(dataset), config.steps, config.batch, config.lr)

    generator = torch.Generator().manual_seed(config.seed)
    loader = DataLoader(dataset, batch_size=config.batch, shuffle=True,
                        drop_last=len(dataset) > config.batch, generator=generator)
    optimizer = torch.optim.Adam(codec.parameters(), lr=config.lr, betas=(0.9, 0.999))

    codec.train()
    step = 0
    progress = tqdm(total=config.steps, desc="codec", leave=False)
    while step < config.steps:
        for frames, _ in loader:
            frames = frames.to(device)
            loss = F.mse_loss(codec(frames), frames)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"codec loss became {float(loss)} at step {step}")

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            step += 1
            progress.update(1)
            if step % config.log_every == 0 or step == config.steps:
                psnr = 10.0 * math.log10(4.0 / max(float(loss), 1e-12))
                progress.set_postfix(loss=f"{float(loss):.5f}", psnr=f"{psnr:.1f}")
                logger.info("codec step %d | loss %.6f | psnr %.2f dB", step, float(loss), psnr)
            if step >= config.steps:
                break
    progress.close()
    codec.eval()

    scale = fit_latent_scale(codec, dataset, config.scale_samples, config.seed)
    logger.info("Latent normalization constant: %.5f", scale)
    return codec
