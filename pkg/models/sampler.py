"""
Video Sampler Module
DDIM / ancestral DDPM sampling with classifier-free guidance, and the
ImageAnimator convenience wrapper that turns a still image into a clip
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import torch
from tqdm import tqdm

from models.checkpoint import load_checkpoint
from models.diffusion_schedule import NoiseSchedule
from models.exceptions import ConfigError, ModelStateError, ScheduleError, ShapeError
from models.latent_codec import decode_video
from models.model_state import ConditioningBundle, ModelState, Stage, build_bundle, null_bundle

logger = logging.getLogger(__name__)

SAMPLERS = ("ddim", "ddpm")

EpsFunction = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass
class SamplerConfig:
    steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 7.5
    seed: int = 0
    num_frames: int = 16
    sampler: str = "ddim"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.guidance_scale < 0.0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.guidance_scale}")
        if self.num_frames < 1:
            raise ConfigError(f"num_frames must be >= 1, got {self.num_frames}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler '{self.sampler}', expected one of {SAMPLERS}")


def timestep_subsequence(T: int, steps: int) -> List[int]:
    """
    Strictly decreasing timesteps with uniform stride c = T // steps

    Starts at the largest trained timestep T - 1.
    """
    if not 1 <= steps <= T:
        raise ScheduleError(f"sampling steps must lie in [1, {T}], got {steps}")
    stride = T // steps
    return [T - 1 - stride * i for i in range(steps)]


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Guided noise eps_uncond + w * (eps_cond - eps_uncond), as w*cond + (1-w)*uncond"""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeError(f"guidance shapes differ: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    return w * eps_cond + (1.0 - w) * eps_uncond


def _alpha_bar(sched: NoiseSchedule, t: int) -> float:
    return 1.0 if t < 0 else float(sched.alpha_bar[t])


def ddim_sigma(t: int, t_prev: int, eta: float, sched: NoiseSchedule) -> float:
    ab_t, ab_prev = _alpha_bar(sched, t), _alpha_bar(sched, t_prev)
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)


def ddim_step(z_t: torch.Tensor,
              eps_hat: torch.Tensor,
              t: int,
              t_prev: int,
              eta: float,
              sched: NoiseSchedule,
              noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    One DDIM update z_t -> z_{t_prev}

    Args:
        z_t: Current latent
        eps_hat: (Guided) noise prediction at t
        t: Current timestep
        t_prev: Next timestep, or -1 for the final step
        eta: Stochasticity in [0, 1]; 0 is deterministic
        sched: Noise schedule
        noise: Gaussian noise, only read when sigma > 0

    Returns:
        Tensor: z_{t_prev}; the predicted x0 on the final step
    """
    sched.check_timestep(t)
    if t_prev >= t or t_prev < -1:
        raise ScheduleError(f"t_prev must satisfy -1 <= t_prev < t, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must lie in [0, 1], got {eta}")
    if eps_hat.shape != z_t.shape:
        raise ShapeError(f"eps shape {tuple(eps_hat.shape)} does not match z_t {tuple(z_t.shape)}")

    ab_t = _alpha_bar(sched, t)
    x0_pred = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    if t_prev == -1:
        return x0_pred

    ab_prev = _alpha_bar(sched, t_prev)
    sigma = ddim_sigma(t, t_prev, eta, sched)
    direction = math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0))
    z_prev = math.sqrt(ab_prev) * x0_pred + direction * eps_hat
    if sigma > 0.0:
        if noise is None or noise.shape != z_t.shape:
            raise ShapeError("a stochastic DDIM step needs noise with z_t's shape")
        z_prev = z_prev + sigma * noise
    return z_prev


def ddpm_step(z_t: torch.Tensor,
              eps_hat: torch.Tensor,
              t: int,
              sched: NoiseSchedule,
              noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Ancestral step z_t -> z_{t-1} with the fixed posterior variance
    beta_tilde_t = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t); t = 0 returns the mean
    """
    sched.check_timestep(t)
    alpha, beta, ab_t = float(sched.alpha[t]), float(sched.beta[t]), _alpha_bar(sched, t)
    mean = (z_t - beta / math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(alpha)
    if t == 0:
        return mean
    variance = beta * (1.0 - _alpha_bar(sched, t - 1)) / (1.0 - ab_t)
    if noise is None or noise.shape != z_t.shape:
        raise ShapeError("an ancestral step needs noise with z_t's shape")
    return mean + math.sqrt(variance) * noise


def sample_loop(eps_fn: EpsFunction,
                z_T: torch.Tensor,
                sched: NoiseSchedule,
                timesteps: Sequence[int],
                eta: float = 0.0,
                generator: Optional[torch.Generator] = None,
                sampler: str = "ddim",
                progress: bool = False) -> torch.Tensor:
    """
    Run a sampler from z_T down to a clean estimate

    Args:
        eps_fn: Noise prediction eps_fn(z, t)
        z_T: Initial Gaussian latent
        sched: Noise schedule
        timesteps: Strictly decreasing timesteps; ddpm needs T-1, ..., 0
        eta: DDIM stochasticity
        generator: Source of step noise (drawn on CPU)
        sampler: 'ddim' or 'ddpm'

    Returns:
        Tensor: Final latent
    """
    timesteps = [int(t) for t in timesteps]
    if any(b >= a for a, b in zip(timesteps, timesteps[1:])):
        raise ScheduleError("timesteps must be strictly decreasing")
    if sampler == "ddpm" and timesteps != list(range(sched.T - 1, -1, -1)):
        raise ScheduleError("ancestral sampling visits every timestep; use steps = T")

    def draw() -> torch.Tensor:
        noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        return noise.to(z.device)

    z = z_T
    for i, t in enumerate(tqdm(timesteps, desc=sampler, leave=False, disable=not progress)):
        eps_hat = eps_fn(z, t)
        if sampler == "ddpm":
            z = ddpm_step(z, eps_hat, t, sched, draw() if t > 0 else None)
        else:
            t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
            stochastic = t_prev >= 0 and ddim_sigma(t, t_prev, eta, sched) > 0.0
            z = ddim_step(z, eps_hat, t, t_prev, eta, sched, draw() if stochastic else None)
    return z


def _image_dropped(bundle: ConditioningBundle) -> ConditioningBundle:
    """Keep the prompt, zero both image streams"""
    return ConditioningBundle(
        text=bundle.text,
        image_tokens=None,
        image_context=torch.zeros_like(bundle.image_context),
        image_latent=torch.zeros_like(bundle.image_latent),
    )


def check_ready(state: ModelState) -> None:
    if state.stage is Stage.CODEC:
        raise ModelStateError(
            "model state has no trained denoiser; run the image_adapter and video_finetune stages first"
        )


def resolve_schedule(state: ModelState, sched: Optional[NoiseSchedule] = None) -> NoiseSchedule:
    """The schedule to sample with: the one bound to the state, checked against `sched` when both exist"""
    if sched is None:
        if state.schedule is None:
            raise ModelStateError("model state carries no noise schedule; pass the schedule it was trained with")
        return state.schedule
    if state.schedule is not None and not state.schedule.matches(sched):
        raise ScheduleError(
            f"sampling schedule (T={sched.T}) differs from the training schedule (T={state.schedule.T})"
        )
    return sched


@torch.no_grad()
def generate(image: torch.Tensor,
             prompt: str,
             state: ModelState,
             cfg: SamplerConfig,
             sched: Optional[NoiseSchedule] = None,
             drop_image: bool = False,
             progress: bool = False) -> torch.Tensor:
    """
    Animate one image

    Args:
        image: (3,H,W) conditioning image in [-1, 1]
        prompt: Text prompt
        state: Trained model state
        cfg: Sampler settings (steps, eta, guidance, seed, frame count)
        sched: Noise schedule (default: the one stored with the state)
        drop_image: Zero both image streams while keeping the prompt (text-only baseline)

    Returns:
        Tensor: VideoTensor (L,3,H,W) in [-1, 1]
    """
    check_ready(state)
    config = state.config
    if image.shape != (3, config.image_size, config.image_size):
        raise ShapeError(f"image must be (3,{config.image_size},{config.image_size}), got {tuple(image.shape)}")
    sched = resolve_schedule(state, sched)
    model = state.model.eval()
    device = model.device

    cond = build_bundle(model, image.unsqueeze(0).to(device), [prompt])
    if drop_image:
        cond = _image_dropped(cond)
    uncond = null_bundle(model, cond)

    text = torch.cat([cond.text, uncond.text])
    context = torch.cat([cond.image_context, uncond.image_context])
    latent = torch.cat([cond.image_latent, uncond.image_latent])

    def eps_fn(z: torch.Tensor, t: int) -> torch.Tensor:
        t_batch = torch.full((2,), t, dtype=torch.long, device=device)
        eps_cond, eps_uncond = model.denoiser(torch.cat([z, z]), t_batch, text, context, latent).chunk(2)
        return cfg_combine(eps_cond, eps_uncond, cfg.guidance_scale)

    generator = torch.Generator().manual_seed(cfg.seed)
    shape = (1, cfg.num_frames, config.latent_channels, config.latent_size, config.latent_size)
    z_T = torch.randn(shape, generator=generator).to(device)

    steps = sched.T if cfg.sampler == "ddpm" else cfg.steps
    z0 = sample_loop(eps_fn, z_T, sched, timestep_subsequence(sched.T, steps), cfg.eta,
                     generator, cfg.sampler, progress)
    video = decode_video(z0, model.codec)[0]
    if video.shape[0] != cfg.num_frames:
        raise ShapeError(f"decoded {video.shape[0]} frames, expected {cfg.num_frames}")
    return video


class ImageAnimator:
    """
    Image animation class
    Loads a trained checkpoint once and turns still images into short clips
    """

    def __init__(self, checkpoint_path, sched: Optional[NoiseSchedule] = None, device: str = "cpu"):
        """Initialize animator with a trained checkpoint"""
        self.checkpoint_path = checkpoint_path
        self.state = load_checkpoint(checkpoint_path, device=device)
        check_ready(self.state)
        self.sched = resolve_schedule(self.state, sched)
        logger.info("Animator ready: stage %s, step %d, mode %s",
                    self.state.stage.value, self.state.step, self.state.config.conditioning_mode)

    def animate(self, image: torch.Tensor, prompt: str, cfg: Optional[SamplerConfig] = None,
                drop_image: bool = False, progress: bool = False) -> torch.Tensor:
        """
        Animate a single image

        Returns:
            Tensor: (L,3,H,W) video in [-1, 1]
        """
        return generate(image, prompt, self.state, cfg or SamplerConfig(), self.sched, drop_image, progress)

    def animate_batch(self, requests: Sequence[Tuple[torch.Tensor, str]],
                      cfg: Optional[SamplerConfig] = None) -> List[torch.Tensor]:
        """
        Animate several (image, prompt) pairs; request i uses seed cfg.seed + i

        Returns:
            list: One video per request
        """
        cfg = cfg or SamplerConfig()
        videos = []
        for i, (image, prompt) in enumerate(requests):
            videos.append(self.animate(image, prompt, replace(cfg, seed=cfg.seed + i)))
        return videos

