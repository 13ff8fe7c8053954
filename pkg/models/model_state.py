"""
Model State Module
Architecture configuration, the full video diffusion model container, training
stages with their trainable subsets, and conditioning bundles
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn

from models.conditioning import (ConditioningMode, ImageEncoder, ImageTokens, ProjectionNetwork,
                                 TextEncoder, conditioning_mode, select_tokens)
from models.denoiser import SpatioTemporalUNet
from models.diffusion_schedule import NoiseSchedule
from models.exceptions import ConfigError, ScheduleError, StageError
from models.latent_codec import LatentCodec, encode_frames

logger = logging.getLogger(__name__)


class Stage(str, Enum):
    """Training stages, in the only order they may run"""

    CODEC = "codec"
    IMAGE_ADAPTER = "image_adapter"
    VIDEO_FINETUNE = "video_finetune"

    @property
    def index(self) -> int:
        return list(Stage).index(self)


def parse_stage(stage: Union[str, Stage]) -> Stage:
    try:
        return Stage(stage)
    except ValueError:
        choices = ", ".join(s.value for s in Stage)
        raise ConfigError(f"unknown stage '{stage}' (expected one of: {choices})") from None


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by every component"""

    image_size: int = 64
    latent_channels: int = 4
    spatial_factor: int = 8
    codec_width: int = 64
    vocab_size: int = 4096
    text_tokens: int = 16
    context_dim: int = 64
    patch_size: int = 8
    vision_width: int = 64
    vision_layers: int = 2
    vision_heads: int = 2
    num_queries: int = 16
    projector_layers: int = 2
    base_width: int = 64
    channel_mult: Tuple[int, ...] = (1, 2)
    num_heads: int = 2
    conditioning_mode: str = ConditioningMode.FULL_TOKENS.value

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.conditioning_mode = conditioning_mode(self.conditioning_mode).value
        if self.image_size % self.spatial_factor:
            raise ConfigError(f"image_size {self.image_size} not divisible by spatial_factor {self.spatial_factor}")
        latent_size = self.image_size // self.spatial_factor
        if latent_size % 2 ** (len(self.channel_mult) - 1):
            raise ConfigError(f"latent size {latent_size} too small for {len(self.channel_mult)} U-Net levels")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        for width, heads in ((self.vision_width, self.vision_heads), (self.base_width, self.num_heads),
                             (self.context_dim, self.num_heads)):
            if width % heads:
                raise ConfigError(f"width {width} not divisible by {heads} attention heads")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.spatial_factor

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['channel_mult'] = list(self.channel_mult)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


class VideoDiffusionModel(nn.Module):
    """Codec, text encoder, image encoder, projection network P and denoiser"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.codec = LatentCodec(config.latent_channels, config.codec_width, config.spatial_factor)
        self.text_encoder = TextEncoder(config.vocab_size, config.context_dim, config.text_tokens)
        self.image_encoder = ImageEncoder(config.image_size, config.patch_size, config.vision_width,
                                          config.vision_layers, config.vision_heads)
        self.projector = ProjectionNetwork(config.vision_width, config.context_dim, config.num_queries,
                                           config.projector_layers, config.vision_heads)
        self.denoiser = SpatioTemporalUNet(config.latent_channels, config.base_width, config.channel_mult,
                                           config.num_heads, config.context_dim)

    @property
    def mode(self) -> ConditioningMode:
        return ConditioningMode(self.config.conditioning_mode)

    @property
    def device(self) -> torch.device:
        return self.codec.latent_scale.device


def build_model(config: ModelConfig, seed: int = 0) -> VideoDiffusionModel:
    """Initialize a model from a seed without disturbing the global RNG"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = VideoDiffusionModel(config)
    model.eval()
    return model


IMAGE_STREAM_SUFFIXES = (".w_k_img", ".w_v_img")


def is_trainable(name: str, stage: Stage) -> bool:
    """Whether parameter `name` of a VideoDiffusionModel trains in `stage`"""
    if stage is Stage.CODEC:
        return name.startswith("codec.")
    if stage is Stage.IMAGE_ADAPTER:
        if name.startswith(("text_encoder.", "image_encoder.", "projector.")):
            return True
        return name.startswith("denoiser.") and name.endswith(IMAGE_STREAM_SUFFIXES)
    return name.startswith(("denoiser.", "projector."))


def trainable_parameters(model: VideoDiffusionModel, stage: Stage) -> List[Tuple[str, nn.Parameter]]:
    return [(name, p) for name, p in model.named_parameters() if is_trainable(name, stage)]


def configure_trainable(model: VideoDiffusionModel, stage: Stage) -> List[nn.Parameter]:
    """Set requires_grad to the stage's trainable subset and clear stale gradients"""
    params = []
    for name, p in model.named_parameters():
        p.grad = None
        p.requires_grad_(is_trainable(name, stage))
        if p.requires_grad:
            params.append(p)
    return params


@dataclass
class ModelState:
    """
    Everything a checkpoint holds

    params are the model's named state tensors; optimizer is built lazily for
    the current stage's trainable subset. schedule is the noise schedule the denoiser
    was trained with; it is bound by the first training step.
    """

    model: VideoDiffusionModel
    stage: Stage = Stage.CODEC
    step: int = 0
    optimizer: Optional[torch.optim.Optimizer] = None
    trained_stages: List[str] = field(default_factory=list)
    schedule: Optional[NoiseSchedule] = None

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @property
    def params(self) -> Dict[str, torch.Tensor]:
        return self.model.state_dict()

    @property
    def normalization(self) -> float:
        return float(self.model.codec.latent_scale)

    def ensure_optimizer(self, lr: float) -> torch.optim.Optimizer:
        """Adam over the stage's trainable subset, betas (0.9, 0.999), no weight decay"""
        params = configure_trainable(self.model, self.stage)
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), weight_decay=0.0)
        for group in self.optimizer.param_groups:
            group['lr'] = lr
        return self.optimizer

    def use_schedule(self, sched: NoiseSchedule) -> NoiseSchedule:
        """Bind the training schedule, or check `sched` against the bound one"""
        if self.schedule is None:
            self.schedule = sched
        elif not self.schedule.matches(sched):
            raise ScheduleError(
                f"model was trained with a T={self.schedule.T} {self.schedule.kind} schedule; "
                f"got a different T={sched.T} {sched.kind} schedule"
            )
        return self.schedule


def new_state(config: ModelConfig, seed: int = 0) -> ModelState:
    return ModelState(model=build_model(config, seed))


def advance_stage(state: ModelState, stage: Union[str, Stage]) -> ModelState:
    """
    Move to a later training stage

    The step counter and optimizer reset for the new trainable subset.
    Moving backward or skipping a stage raises StageError.
    """
    stage = parse_stage(stage)
    if stage.index < state.stage.index:
        raise StageError(f"cannot move from stage {state.stage.value} back to {stage.value}")
    if stage.index > state.stage.index + 1:
        skipped = list(Stage)[state.stage.index + 1]
        raise StageError(f"cannot move from stage {state.stage.value} to {stage.value} without {skipped.value}")
    if stage is state.stage:
        return state
    if state.stage.value not in state.trained_stages:
        state.trained_stages.append(state.stage.value)
    logger.info("Advancing stage %s -> %s after %d steps", state.stage.value, stage.value, state.step)
    state.stage = stage
    state.step = 0
    state.optimizer = None
    return state


@dataclass
class ConditioningBundle:
    """
    All conditioning signals for a batch

    text: (B, N_tex, d); image_tokens: encoder output; image_context: (B, M, d);
    image_latent: (B, C, H', W')
    """

    text: torch.Tensor
    image_tokens: Optional[ImageTokens]
    image_context: torch.Tensor
    image_latent: torch.Tensor

    def drop(self, mask: torch.Tensor, null_text: torch.Tensor) -> 'ConditioningBundle':
        """Joint condition dropout: null text, zero image context and zero image latent where mask"""
        mask = mask.bool().to(self.text.device)
        keep = (~mask).to(self.image_context.dtype)
        return ConditioningBundle(
            text=torch.where(mask[:, None, None], null_text.expand_as(self.text), self.text),
            image_tokens=self.image_tokens,
            image_context=self.image_context * keep[:, None, None],
            image_latent=self.image_latent * keep[:, None, None, None],
        )


def build_bundle(model: VideoDiffusionModel, images: torch.Tensor, prompts: Sequence[str],
                 mode: Optional[Union[str, ConditioningMode]] = None) -> ConditioningBundle:
    """
    Encode prompts and conditioning images for the denoiser

    Args:
        model: Video diffusion model
        images: (B,3,H,W) conditioning images in [-1, 1]
        prompts: One prompt per image
        mode: Overrides the model's conditioning mode

    Returns:
        ConditioningBundle
    """
    if images.shape[0] != len(prompts):
        raise StageError(f"{images.shape[0]} images for {len(prompts)} prompts")
    mode = model.mode if mode is None else conditioning_mode(mode)
    text = model.text_encoder(list(prompts))
    tokens = model.image_encoder(images)
    context = model.projector(select_tokens(tokens, mode))
    with torch.no_grad():
        latent = encode_frames(images, model.codec)
    return ConditioningBundle(text=text, image_tokens=tokens, image_context=context, image_latent=latent)


def null_bundle(model: VideoDiffusionModel, like: ConditioningBundle) -> ConditioningBundle:
    """Unconditional branch matching `like`'s batch"""
    mask = torch.ones(like.text.shape[0], dtype=torch.bool, device=like.text.device)
    return like.drop(mask, model.text_encoder.null_embedding)
