"""
Denoiser Module
Spatio-temporal U-Net epsilon_theta with dual cross-attention (shared query over
text and image context) and channel-concatenated conditioning-image latents
"""

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange, repeat

from models.exceptions import ShapeError
from models.latent_codec import group_count


@dataclass
class AttentionWeights:
    """
    Dual cross-attention matrices in row-vector convention (x @ W)

    w_q, w_k, w_v belong to the text stream; w_k_img, w_v_img are the only
    matrices added for the image stream. w_out/b_out is the shared output
    projection applied to the summed attention (identity when None).
    """

    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor
    w_k_img: torch.Tensor
    w_v_img: torch.Tensor
    w_out: Optional[torch.Tensor] = None
    b_out: Optional[torch.Tensor] = None


class AttentionTerms(NamedTuple):
    text: torch.Tensor
    image: torch.Tensor
    text_probs: torch.Tensor
    image_probs: Optional[torch.Tensor]


def timestep_embedding(timesteps: torch.Tensor, dim: int, max_period: int = 10000) -> torch.Tensor:
    """
    Sinusoidal embeddings for a 1-D tensor of (integer or real) positions

    Returns:
        Tensor: [N x dim] embeddings
    """
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, device=timesteps.device, dtype=torch.float64) / half
    )
    args = timesteps.to(torch.float64)[:, None] * freqs[None, :]
    embedding = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        embedding = torch.cat([embedding, torch.zeros_like(embedding[:, :1])], dim=-1)
    return embedding


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int):
    """Multi-head softmax(q k^T / sqrt(d)) v with d the per-head width"""
    q, k, v = (rearrange(x, "... n (h d) -> ... h n d", h=heads) for x in (q, k, v))
    probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
    return rearrange(probs @ v, "... h n d -> ... n (h d)"), probs


def dual_cross_attention(f_in: torch.Tensor,
                         tex: torch.Tensor,
                         img_ctx: Optional[torch.Tensor],
                         weights: AttentionWeights,
                         heads: int = 1,
                         return_terms: bool = False):
    """
    F_out = softmax(Q K_tex^T / sqrt(d)) V_tex + softmax(Q K_img^T / sqrt(d)) V_img

    Both terms share Q = F_in W_q. When img_ctx is None the image term is zero.

    Args:
        f_in: (..., tokens, d_block) block features
        tex: (..., N_tex, d) text embedding
        img_ctx: (..., M, d) image context or None
        weights: Attention matrices
        heads: Number of attention heads; d is the per-head width
        return_terms: Also return the projected per-stream terms and softmax rows

    Returns:
        Tensor (and AttentionTerms when requested): (..., tokens, d_block)
    """
    inner = weights.w_q.shape[1]
    if f_in.shape[-1] != weights.w_q.shape[0]:
        raise ShapeError(f"feature width {f_in.shape[-1]} != W_q rows {weights.w_q.shape[0]}")
    if tex.shape[-1] != weights.w_k.shape[0] or weights.w_k.shape[1] != inner:
        raise ShapeError(f"text width {tex.shape[-1]} inconsistent with W_k {tuple(weights.w_k.shape)}")
    if inner % heads:
        raise ShapeError(f"inner width {inner} not divisible by {heads} heads")

    q = f_in @ weights.w_q
    text, text_probs = _attend(q, tex @ weights.w_k, tex @ weights.w_v, heads)

    image_probs = None
    if img_ctx is not None:
        if img_ctx.shape[-1] != weights.w_k_img.shape[0] or weights.w_k_img.shape[1] != inner:
            raise ShapeError(
                f"image context width {img_ctx.shape[-1]} inconsistent with W'_k {tuple(weights.w_k_img.shape)}"
            )
        image, image_probs = _attend(q, img_ctx @ weights.w_k_img, img_ctx @ weights.w_v_img, heads)
    else:
        image = torch.zeros_like(text)

    if weights.w_out is not None:
        text, image = text @ weights.w_out, image @ weights.w_out
    out = text + image
    if weights.b_out is not None:
        out = out + weights.b_out

    if return_terms:
        return out, AttentionTerms(text, image, text_probs, image_probs)
    return out


class DualCrossAttention(nn.Module):
    """Cross-attention layer with a text stream and a zero-initialized image stream"""

    def __init__(self, query_dim: int, context_dim: int, heads: int = 2):
        super().__init__()
        self.heads = heads
        self.w_q = nn.Parameter(torch.empty(query_dim, query_dim))
        self.w_k = nn.Parameter(torch.empty(context_dim, query_dim))
        self.w_v = nn.Parameter(torch.empty(context_dim, query_dim))
        self.w_k_img = nn.Parameter(torch.empty(context_dim, query_dim))
        self.w_v_img = nn.Parameter(torch.zeros(context_dim, query_dim))
        self.to_out = nn.Linear(query_dim, query_dim)
        for weight in (self.w_q, self.w_k, self.w_v, self.w_k_img):
            nn.init.xavier_uniform_(weight)

    def weights(self) -> AttentionWeights:
        return AttentionWeights(
            w_q=self.w_q, w_k=self.w_k, w_v=self.w_v,
            w_k_img=self.w_k_img, w_v_img=self.w_v_img,
            w_out=self.to_out.weight.t(), b_out=self.to_out.bias,
        )

    def forward(self, x, tex, img_ctx=None):
        return dual_cross_attention(x, tex, img_ctx, self.weights(), heads=self.heads)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 2, zero_out: bool = False):
        super().__init__()
        self.heads = heads
        self.to_qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.to_out = nn.Linear(dim, dim)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x):
        out, _ = _attend(*self.to_qkv(x).chunk(3, dim=-1), heads=self.heads)
        return self.to_out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x):
        return self.net(x)


class ResBlock(nn.Module):
    """Residual conv block with adaptive scale-shift timestep injection"""

    def __init__(self, in_channels: int, out_channels: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(group_count(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.emb_proj = nn.Sequential(nn.SiLU(), nn.Linear(emb_dim, 2 * out_channels))
        self.norm2 = nn.GroupNorm(group_count(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)
        self.skip = (nn.Identity() if in_channels == out_channels
                     else nn.Conv2d(in_channels, out_channels, kernel_size=1))

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb_proj(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class SpatialTransformer(nn.Module):
    """Per-frame spatial self-attention, dual cross-attention and feed-forward"""

    def __init__(self, channels: int, context_dim: int, heads: int = 2):
        super().__init__()
        self.norm = nn.GroupNorm(group_count(channels), channels)
        self.proj_in = nn.Conv2d(channels, channels, kernel_size=1)
        self.norm1 = nn.LayerNorm(channels)
        self.self_attn = SelfAttention(channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.cross_attn = DualCrossAttention(channels, context_dim, heads)
        self.norm3 = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)
        self.proj_out = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, x, tex, img_ctx=None):
        height, width = x.shape[-2:]
        h = self.proj_in(self.norm(x))
        h = rearrange(h, "n c h w -> n (h w) c")
        h = h + self.self_attn(self.norm1(h))
        h = h + self.cross_attn(self.norm2(h), tex, img_ctx)
        h = h + self.ff(self.norm3(h))
        h = rearrange(h, "n (h w) c -> n c h w", h=height, w=width)
        return x + self.proj_out(h)


class TemporalAttention(nn.Module):
    """
    Self-attention over the frame axis at every spatial location

    The output projection starts at zero, so a fresh model is a per-frame image model.
    """

    def __init__(self, channels: int, heads: int = 2):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = SelfAttention(channels, heads, zero_out=True)

    def forward(self, x, frames: int):
        height, width = x.shape[-2:]
        h = rearrange(x, "(b f) c h w -> (b h w) f c", f=frames)
        positions = timestep_embedding(torch.arange(frames, device=x.device), h.shape[-1]).to(h.dtype)
        h = h + self.attn(self.norm(h) + positions)
        return rearrange(h, "(b h w) f c -> (b f) c h w", h=height, w=width)


class VideoBlock(nn.Module):
    """ResBlock -> spatial transformer -> temporal attention"""

    def __init__(self, in_channels: int, out_channels: int, emb_dim: int, context_dim: int, heads: int):
        super().__init__()
        self.res = ResBlock(in_channels, out_channels, emb_dim)
        self.spatial = SpatialTransformer(out_channels, context_dim, heads)
        self.temporal = TemporalAttention(out_channels, heads)

    def forward(self, x, emb, tex, img_ctx, frames):
        x = self.res(x, emb)
        x = self.spatial(x, tex, img_ctx)
        return self.temporal(x, frames)


def assemble_input(z_t: torch.Tensor,
                   z_img: Optional[torch.Tensor],
                   drop_image: Union[bool, torch.Tensor] = False) -> torch.Tensor:
    """
    Channel-concatenate the conditioning-image latent to every noisy frame

    Channel order is [noisy latent (C), image latent (C)].

    Args:
        z_t: (L,C,H',W') or (B,L,C,H',W') noisy latents
        z_img: (C,H',W') or (B,C,H',W') image latent; None means zeros
        drop_image: True, or a (B,) bool mask, replaces the image latent with zeros

    Returns:
        Tensor: (..., L, 2C, H', W')
    """
    if z_t.dim() not in (4, 5):
        raise ShapeError(f"z_t must be (L,C,H,W) or (B,L,C,H,W), got {tuple(z_t.shape)}")
    if z_img is None:
        z_img = torch.zeros_like(z_t.select(-4, 0))
    if z_img.shape != z_t.select(-4, 0).shape:
        raise ShapeError(
            f"image latent {tuple(z_img.shape)} does not match frame latent {tuple(z_t.select(-4, 0).shape)}"
        )

    if isinstance(drop_image, torch.Tensor):
        if z_t.dim() != 5 or drop_image.shape != (z_t.shape[0],):
            raise ShapeError("per-sample drop mask needs a batched input and one flag per sample")
        keep = (~drop_image.bool()).to(z_img.dtype).reshape(-1, 1, 1, 1)
        z_img = z_img * keep
    elif drop_image:
        z_img = torch.zeros_like(z_img)

    frames = z_img.unsqueeze(-4).expand_as(z_t)
    return torch.cat([z_t, frames], dim=-3)


@dataclass
class DenoiserInput:
    z_t: torch.Tensor
    z_img: Optional[torch.Tensor]
    t: Union[int, torch.Tensor]
    tex: torch.Tensor
    img_ctx: Optional[torch.Tensor]
    drop_image: Union[bool, torch.Tensor] = False


class SpatioTemporalUNet(nn.Module):
    """
    Noise prediction network epsilon_theta(z_t, c, t)

    Input frames carry 2C channels (noisy latent + image latent); output has C.
    """

    def __init__(self, latent_channels: int = 4, base_width: int = 64,
                 channel_mult: Sequence[int] = (1, 2), num_heads: int = 2, context_dim: int = 64):
        super().__init__()
        self.latent_channels = latent_channels
        self.base_width = base_width
        emb_dim = 4 * base_width

        self.time_embed = nn.Sequential(
            nn.Linear(base_width, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.in_conv = nn.Conv2d(2 * latent_channels, base_width, kernel_size=3, padding=1)

        widths = [base_width * mult for mult in channel_mult]
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        channels = base_width
        for level, width in enumerate(widths):
            self.down_blocks.append(VideoBlock(channels, width, emb_dim, context_dim, num_heads))
            channels = width
            if level < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(width, width, kernel_size=3, stride=2, padding=1))

        self.mid_block = VideoBlock(channels, channels, emb_dim, context_dim, num_heads)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for level in reversed(range(len(widths))):
            width = widths[level]
            self.up_blocks.append(VideoBlock(channels + width, width, emb_dim, context_dim, num_heads))
            channels = width
            if level > 0:
                self.upsamples.append(nn.Conv2d(width, width, kernel_size=3, padding=1))

        self.out = nn.Sequential(
            nn.GroupNorm(group_count(channels), channels),
            nn.SiLU(),
            nn.Conv2d(channels, latent_channels, kernel_size=3, padding=1),
        )
        self.levels = len(widths)

    def image_cross_attention(self):
        """All dual cross-attention layers (for the image-stream trainable subset)"""
        return [m for m in self.modules() if isinstance(m, DualCrossAttention)]

    def forward(self, z_t, t, tex, img_ctx=None, z_img=None, drop_image=False):
        """
        Args:
            z_t: (B,L,C,H',W') noisy latents
            t: (B,) timesteps
            tex: (B,N_tex,d) text embedding
            img_ctx: (B,M,d) image context or None
            z_img: (B,C,H',W') conditioning-image latent or None
            drop_image: bool or (B,) mask zeroing the concatenated image latent

        Returns:
            Tensor: (B,L,C,H',W') predicted noise
        """
        if z_t.dim() != 5 or z_t.shape[2] != self.latent_channels:
            raise ShapeError(f"expected (B,L,{self.latent_channels},H,W) latents, got {tuple(z_t.shape)}")
        batch, frames = z_t.shape[:2]
        if z_t.shape[-1] % 2 ** (self.levels - 1) or z_t.shape[-2] % 2 ** (self.levels - 1):
            raise ShapeError(f"latent size {tuple(z_t.shape[-2:])} not divisible by 2^{self.levels - 1}")
        if tex.shape[0] != batch or (img_ctx is not None and img_ctx.shape[0] != batch):
            raise ShapeError("conditioning batch size does not match latents")
        t = torch.as_tensor(t, device=z_t.device).reshape(-1).expand(batch)

        x = rearrange(assemble_input(z_t, z_img, drop_image), "b f c h w -> (b f) c h w")
        emb = self.time_embed(timestep_embedding(t, self.base_width).to(z_t.dtype))
        emb = repeat(emb, "b e -> (b f) e", f=frames)
        tex = repeat(tex, "b n d -> (b f) n d", f=frames)
        if img_ctx is not None:
            img_ctx = repeat(img_ctx, "b n d -> (b f) n d", f=frames)

        h = self.in_conv(x)
        skips = []
        for level, block in enumerate(self.down_blocks):
            h = block(h, emb, tex, img_ctx, frames)
            skips.append(h)
            if level < self.levels - 1:
                h = self.downsamples[level](h)

        h = self.mid_block(h, emb, tex, img_ctx, frames)

        for index, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), emb, tex, img_ctx, frames)
            if index < self.levels - 1:
                h = F.interpolate(h, scale_factor=2.0, mode="nearest")
                h = self.upsamples[index](h)

        return rearrange(self.out(h), "(b f) c h w -> b f c h w", f=frames)


def predict_noise(inp: DenoiserInput, model: SpatioTemporalUNet) -> torch.Tensor:
    """
    Run epsilon_theta on one (unbatched, L x C x H' x W') or a batched input

    Returns:
        Tensor: Predicted noise with z_t's shape
    """
    if inp.z_t.dim() == 4:
        batched = DenoiserInput(
            z_t=inp.z_t.unsqueeze(0),
            z_img=None if inp.z_img is None else inp.z_img.unsqueeze(0),
            t=torch.as_tensor(inp.t).reshape(1),
            tex=inp.tex.unsqueeze(0),
            img_ctx=None if inp.img_ctx is None else inp.img_ctx.unsqueeze(0),
            drop_image=inp.drop_image,
        )
        return predict_noise(batched, model)[0]
    return model(inp.z_t, inp.t, inp.tex, inp.img_ctx, inp.z_img, inp.drop_image)
