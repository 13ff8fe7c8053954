"""
Conditioning Module
Toy text encoder, toy ViT image encoder and the learnable projection network P
that turns full patch tokens into a text-aligned image context
"""

import hashlib
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Union

import torch
import torch.nn as nn

from models.exceptions import ConfigError, ShapeError

PAD_TOKEN = 0


class ConditioningMode(str, Enum):
    """Which image tokens feed the projection network"""

    FULL_TOKENS = "full_tokens"
    CLS_ONLY = "cls_only"


def conditioning_mode(mode: Union[str, ConditioningMode]) -> ConditioningMode:
    """Parse a conditioning mode name"""
    try:
        return ConditioningMode(mode)
    except ValueError:
        choices = ", ".join(m.value for m in ConditioningMode)
        raise ConfigError(f"unknown conditioning mode '{mode}' (expected one of: {choices})") from None


@dataclass
class ImageTokens:
    """
    Image encoder output

    cls: (B, d_vis) global semantic token
    patches: (B, K+1, d_vis) all tokens, class token at position 0
    """

    cls: torch.Tensor
    patches: torch.Tensor


def token_id(word: str, vocab_size: int) -> int:
    """Stable hash of a word into [1, vocab_size); 0 is reserved for padding"""
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return 1 + int.from_bytes(digest, "little") % (vocab_size - 1)


class TextEncoder(nn.Module):
    """
    Hashed bag-of-positions text encoder

    Whitespace tokens are hashed into a learned vocabulary, positions are added,
    and the sequence is padded/truncated to max_tokens. The empty prompt maps to
    a learned set of null rows (the unconditional embedding).
    """

    def __init__(self, vocab_size: int = 4096, dim: int = 64, max_tokens: int = 16):
        super().__init__()
        if vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        self.vocab_size = vocab_size
        self.dim = dim
        self.max_tokens = max_tokens

        self.token_embedding = nn.Embedding(vocab_size, dim, padding_idx=PAD_TOKEN)
        self.position_embedding = nn.Parameter(torch.randn(max_tokens, dim) * 0.02)
        self.null_embedding = nn.Parameter(torch.randn(max_tokens, dim) * 0.02)

    def tokenize(self, prompt: str) -> List[int]:
        ids = [token_id(word, self.vocab_size) for word in prompt.lower().split()]
        ids = ids[: self.max_tokens]
        return ids + [PAD_TOKEN] * (self.max_tokens - len(ids))

    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        device = self.position_embedding.device
        ids = torch.tensor([self.tokenize(p) for p in prompts], dtype=torch.long, device=device)
        tokens = self.token_embedding(ids) + self.position_embedding

        empty = torch.tensor([not p.split() for p in prompts], device=device)
        null = self.null_embedding.expand_as(tokens)
        return torch.where(empty[:, None, None], null, tokens)


class ImageEncoder(nn.Module):
    """Small ViT: patchify, linear projection, class token, transformer stack"""

    def __init__(self, image_size: int = 64, patch_size: int = 8, width: int = 64,
                 layers: int = 2, heads: int = 2):
        super().__init__()
        if image_size % patch_size:
            raise ShapeError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        self.width = width
        self.num_patches = (image_size // patch_size) ** 2

        self.patch_embed = nn.Conv2d(3, width, kernel_size=patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.randn(1, 1, width) * 0.02)
        self.position_embedding = nn.Parameter(torch.randn(self.num_patches + 1, width) * 0.02)

        layer = nn.TransformerEncoderLayer(
            d_model=width, nhead=heads, dim_feedforward=4 * width, dropout=0.0,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.transformer = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(width)

    def _check(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"images must be (B,3,H,W), got {tuple(images.shape)}")
        height, width = images.shape[-2:]
        if height != width:
            raise ShapeError(f"image encoder needs square inputs, got {height}x{width}")
        if height % self.patch_size:
            raise ShapeError(f"image size {height} not divisible by patch size {self.patch_size}")
        if height != self.image_size:
            raise ShapeError(f"image encoder was built for {self.image_size}px, got {height}px")

    def embed_patches(self, images: torch.Tensor) -> torch.Tensor:
        """Layer-0 transformer input: (B, K+1, width)"""
        self._check(images)
        patches = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(images.shape[0], -1, -1)
        return torch.cat([cls, patches], dim=1) + self.position_embedding

    def forward(self, images: torch.Tensor) -> ImageTokens:
        tokens = self.norm(self.transformer(self.embed_patches(images)))
        return ImageTokens(cls=tokens[:, 0], patches=tokens)


class ProjectionNetwork(nn.Module):
    """
    Learned-query resampler P

    M query vectors cross-attend to the image tokens through a small transformer
    decoder stack; the output projection maps to the text-embedding width.
    """

    def __init__(self, vision_width: int = 64, context_dim: int = 64, num_queries: int = 16,
                 layers: int = 2, heads: int = 2):
        super().__init__()
        self.vision_width = vision_width
        self.context_dim = context_dim
        self.num_queries = num_queries

        self.queries = nn.Parameter(torch.randn(num_queries, context_dim) * 0.02)
        self.proj_in = nn.Linear(vision_width, context_dim)
        decoder_layer = nn.TransformerDecoderLayer(
            d_model=context_dim, nhead=heads, dim_feedforward=4 * context_dim, dropout=0.0,
            activation="gelu", batch_first=True, norm_first=True,
        )
        self.decoder = nn.TransformerDecoder(decoder_layer, num_layers=layers)
        self.norm = nn.LayerNorm(context_dim)
        self.proj_out = nn.Linear(context_dim, context_dim, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.dim() != 3 or tokens.shape[-1] != self.vision_width:
            raise ShapeError(
                f"projection expects (B, N, {self.vision_width}) tokens, got {tuple(tokens.shape)}"
            )
        queries = self.queries.unsqueeze(0).expand(tokens.shape[0], -1, -1)
        latents = self.decoder(tgt=queries, memory=self.proj_in(tokens))
        return self.proj_out(self.norm(latents))


def select_tokens(vis: ImageTokens, mode: Union[str, ConditioningMode]) -> torch.Tensor:
    """Tokens fed to P: all K+1 tokens, or the class token as a single-token sequence"""
    if conditioning_mode(mode) is ConditioningMode.CLS_ONLY:
        return vis.cls.unsqueeze(-2)
    return vis.patches


def encode_text(prompt: str, encoder: TextEncoder) -> torch.Tensor:
    """TextEmbedding (N_tex, d) for one prompt"""
    return encoder([prompt])[0]


def encode_image(img: torch.Tensor, encoder: ImageEncoder) -> ImageTokens:
    """ImageTokens for a single (3,H,W) image or a (B,3,H,W) batch"""
    if img.dim() == 3:
        tokens = encoder(img.unsqueeze(0))
        return ImageTokens(cls=tokens.cls[0], patches=tokens.patches[0])
    return encoder(img)


def project_image_tokens(vis: ImageTokens,
                         projector: ProjectionNetwork,
                         mode: Union[str, ConditioningMode] = ConditioningMode.FULL_TOKENS,
                         context_dim: Optional[int] = None) -> torch.Tensor:
    """
    ImageContext F_img = P(F_vis)

    Args:
        vis: Image tokens, single (unbatched) or batched
        projector: Projection network P
        mode: full_tokens or cls_only
        context_dim: Expected text-embedding width d; checked when given

    Returns:
        Tensor: (M, d) or (B, M, d) image context
    """
    if context_dim is not None and projector.context_dim != context_dim:
        raise ShapeError(f"P outputs width {projector.context_dim}, text embedding width is {context_dim}")

    single = vis.cls.dim() == 1
    if single:
        vis = ImageTokens(cls=vis.cls.unsqueeze(0), patches=vis.patches.unsqueeze(0))
    context = projector(select_tokens(vis, mode))
    return context[0] if single else context
