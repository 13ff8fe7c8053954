"""
Model Training Module
Two-stage denoiser optimization: image-adapter stage on single frames, then
full video fine-tuning on random-stride clips
"""

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from data.clip_sampler import DEFAULT_STRIDES, TrainBatch, VideoCorpus
from models.checkpoint import save_checkpoint
from models.diffusion_schedule import NoiseSchedule, q_sample, training_loss
from models.exceptions import ConfigError, StageError, TrainingDivergedError
from models.latent_codec import encode_video
from models.model_state import ModelState, Stage, advance_stage, build_bundle, parse_stage

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.tsv'

# batch kind consumed by each denoiser stage
STAGE_BATCH_KIND = {
    Stage.IMAGE_ADAPTER: 'frames',
    Stage.VIDEO_FINETUNE: 'clips',
}


@dataclass
class TrainConfig:
    stage: Union[str, Stage] = Stage.IMAGE_ADAPTER
    lr: float = 1e-4
    batch: int = 16
    steps: int = 20000
    cond_drop_prob: float = 0.1
    seed: int = 0
    grad_accum: int = 1
    clip_length: int = 16
    strides: Tuple[int, ...] = DEFAULT_STRIDES
    checkpoint_every: int = 1000
    log_every: int = 50

    def __post_init__(self):
        self.stage = parse_stage(self.stage)
        self.strides = tuple(int(s) for s in self.strides)
        if self.stage is Stage.CODEC:
            raise ConfigError("the codec stage is trained by train_codec, not the denoiser trainer")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ConfigError(f"cond_drop_prob must lie in [0, 1), got {self.cond_drop_prob}")
        if self.grad_accum < 1 or self.steps < 0 or self.clip_length < 1:
            raise ConfigError("grad_accum and clip_length must be >= 1, steps >= 0")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")


def _step_seed(seed: int, stage: Stage, step: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, stage.index, step, stream])


def step_generator(seed: int, stage: Stage, step: int) -> torch.Generator:
    """Torch generator for the noise, timestep and dropout draws of one step"""
    state = _step_seed(seed, stage, step, 0).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(state))


def step_rng(seed: int, stage: Stage, step: int) -> np.random.Generator:
    """NumPy generator for the batch draw of one step"""
    return np.random.default_rng(_step_seed(seed, stage, step, 1))


def batch_loss(state: ModelState, batch: TrainBatch, sched: NoiseSchedule, cond_drop_prob: float,
               generator: torch.Generator) -> torch.Tensor:
    """
    Epsilon-prediction loss on one micro-batch

    Args:
        state: Model state (its stage decides nothing here; masking is the caller's job)
        batch: Frames and captions
        sched: Noise schedule
        cond_drop_prob: Joint condition dropout probability
        generator: Source of t, eps and dropout draws

    Returns:
        Tensor: Scalar MSE loss
    """
    model = state.model
    device = model.device
    frames = batch.frames.to(device)
    size = frames.shape[0]

    with torch.no_grad():
        z0 = encode_video(frames, model.codec)
    bundle = build_bundle(model, batch.condition_images.to(device), batch.captions)

    t = torch.randint(0, sched.T, (size,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    drop = torch.rand(size, generator=generator) < cond_drop_prob
    t, eps, drop = t.to(device), eps.to(device), drop.to(device)

    bundle = bundle.drop(drop, model.text_encoder.null_embedding)
    z_t = q_sample(z0, t, eps, sched)
    eps_pred = model.denoiser(z_t, t, bundle.text, bundle.image_context, bundle.image_latent)
    return training_loss(eps, eps_pred)


def train_step(state: ModelState,
               batch: Union[TrainBatch, Sequence[TrainBatch]],
               sched: NoiseSchedule,
               cfg: TrainConfig) -> Tuple[ModelState, float]:
    """
    One optimizer step on the stage's trainable subset

    Micro-batches in a list are accumulated into a single update. Randomness
    comes from (cfg.seed, stage, state.step), so replaying a step from the same
    state reproduces it bitwise.

    Returns:
        tuple: (state, mean loss over micro-batches)
    """
    if state.stage is not cfg.stage:
        raise StageError(f"model is in stage {state.stage.value}, config trains {cfg.stage.value}")
    if state.stage not in STAGE_BATCH_KIND:
        raise StageError(f"stage {state.stage.value} has no denoiser training step")
    micro_batches = [batch] if isinstance(batch, TrainBatch) else list(batch)
    expected = STAGE_BATCH_KIND[state.stage]
    for micro in micro_batches:
        if micro.kind != expected:
            raise StageError(f"stage {state.stage.value} needs '{expected}' batches, got '{micro.kind}'")

    state.use_schedule(sched)
    optimizer = state.ensure_optimizer(cfg.lr)
    optimizer.zero_grad(set_to_none=True)
    state.model.train()
    generator = step_generator(cfg.seed, state.stage, state.step)

    total = 0.0
    for micro in micro_batches:
        loss = batch_loss(state, micro, sched, cfg.cond_drop_prob, generator)
        (loss / len(micro_batches)).backward()
        total += float(loss)
    loss_value = total / len(micro_batches)

    if not math.isfinite(loss_value):
        raise TrainingDivergedError(
            f"loss became {loss_value} in stage {state.stage.value} at step {state.step}"
        )
    optimizer.step()
    for group in optimizer.param_groups:
        for param in group['params']:
            if not torch.isfinite(param).all():
                raise TrainingDivergedError(
                    f"non-finite parameters after stage {state.stage.value} step {state.step}"
                )

    state.model.eval()
    state.step += 1
    return state, loss_value


def append_metrics(path: Path, rows: List[dict]) -> None:
    """Append (step, stage, loss) rows to a tab-separated metrics file"""
    if not rows:
        return
    pd.DataFrame(rows, columns=['step', 'stage', 'loss']).to_csv(
        path, sep='\t', mode='a', header=not path.exists(), index=False
    )


def read_metrics(path) -> pd.DataFrame:
    return pd.read_csv(path, sep='\t')


def run_stage(state: ModelState,
              dataset: VideoCorpus,
              cfg: TrainConfig,
              sched: NoiseSchedule,
              out_dir=None) -> ModelState:
    """
    Train one denoiser stage up to cfg.steps

    Args:
        state: Model state; advanced to cfg.stage if it is at an earlier stage
        dataset: Training corpus
        cfg: Stage configuration
        sched: Noise schedule
        out_dir: Directory for metrics.tsv and checkpoints (nothing written when None)

    Returns:
        ModelState: The trained state
    """
    if state.stage is not cfg.stage:
        advance_stage(state, cfg.stage)
    kind = STAGE_BATCH_KIND[cfg.stage]

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / METRICS_FILE

    logger.info("=" * 60)
    logger.info("TRAINING STAGE: %s", cfg.stage.value.upper())
    logger.info("=" * 60)
    logger.info("Clips: %d | steps: %d..%d | batch: %d x %d | lr: %g | cond drop: %.2f",
                len(dataset), state.step, cfg.steps, cfg.batch, cfg.grad_accum, cfg.lr, cfg.cond_drop_prob)

    rows, losses = [], []
    progress = tqdm(total=cfg.steps, initial=state.step, desc=cfg.stage.value, leave=False)
    while state.step < cfg.steps:
        rng = step_rng(cfg.seed, cfg.stage, state.step)
        micro = [dataset.sample_batch(kind, cfg.batch, rng, cfg.clip_length, cfg.strides)
                 for _ in range(cfg.grad_accum)]
        state, loss = train_step(state, micro, sched, cfg)
        rows.append({'step': state.step, 'stage': cfg.stage.value, 'loss': loss})
        losses.append(loss)
        progress.update(1)

        if state.step % cfg.log_every == 0 or state.step == cfg.steps:
            recent = float(np.mean(losses[-cfg.log_every:]))
            progress.set_postfix(loss=f"{recent:.5f}")
            logger.info("%s step %d | loss %.6f", cfg.stage.value, state.step, recent)
            if metrics_path is not None:
                append_metrics(metrics_path, rows)
            rows = []
        if out_dir is not None and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, out_dir / f"step_{state.step:06d}")
    progress.close()

    if metrics_path is not None:
        append_metrics(metrics_path, rows)
    if out_dir is not None:
        save_checkpoint(state, out_dir / 'latest')

    if losses:
        logger.info("=" * 60)
        logger.info("STAGE COMPLETE: %s", cfg.stage.value)
        logger.info("=" * 60)
        logger.info("Final loss (mean of last %d): %.6f", min(len(losses), cfg.log_every),
                    float(np.mean(losses[-cfg.log_every:])))
    return state


def plot_metrics(metrics_path, out_path) -> Path:
    """Loss curve per stage from a metrics file, saved as PNG"""
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    df = read_metrics(metrics_path)
    fig, ax = plt.subplots(figsize=(8, 4))
    for stage, rows in df.groupby('stage', sort=False):
        ax.plot(rows['step'], rows['loss'], label=stage, linewidth=1)
    ax.set_xlabel('step')
    ax.set_ylabel('epsilon MSE')
    ax.set_yscale('log')
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()

    out_path = Path(out_path)
    os.makedirs(out_path.parent, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
