"""
Configuration Module
Flat `key = value` project config with one typed key table and ANIMATOR_* environment overrides
"""

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, NamedTuple, Optional, Tuple

from dotenv import dotenv_values, load_dotenv

from models.diffusion_schedule import NoiseSchedule, make_schedule
from models.exceptions import ConfigError, ScheduleError
from models.latent_codec import CodecTrainConfig
from models.model_state import ModelConfig, Stage, parse_stage
from models.sampler import SamplerConfig
from models.train_model import TrainConfig

ENV_PREFIX = 'ANIMATOR_'


def _int_list(text: str) -> Tuple[int, ...]:
    values = tuple(int(v) for v in text.replace(' ', '').split(',') if v)
    if not values:
        raise ValueError('empty list')
    return values


class ConfigKey(NamedTuple):
    parse: Callable[[str], Any]
    default: str
    description: str


# Every recognised key, its parser, default and meaning
CONFIG_KEYS: Dict[str, ConfigKey] = {
    # corpus
    'corpus_dir': ConfigKey(str, 'data/corpus', 'Synthetic corpus root'),
    'n_clips': ConfigKey(int, '8', 'Clips rendered by make-data'),
    'corpus_seed': ConfigKey(int, '0', 'Corpus generation seed'),
    'image_size': ConfigKey(int, '64', 'Frame width and height in pixels'),
    'native_frames': ConfigKey(int, '96', 'Frames per rendered clip'),
    'fps_tag': ConfigKey(int, '8', 'Frame-rate tag stored per clip'),
    'workers': ConfigKey(int, '1', 'Corpus rendering processes'),
    'holdout_clips': ConfigKey(int, '2', 'Clips held out for ablation evaluation'),
    # architecture
    'latent_channels': ConfigKey(int, '4', 'Latent channels C'),
    'spatial_factor': ConfigKey(int, '8', 'Codec downsampling factor f'),
    'codec_width': ConfigKey(int, '64', 'Codec base width'),
    'vocab_size': ConfigKey(int, '4096', 'Toy text vocabulary size'),
    'text_tokens': ConfigKey(int, '16', 'Text tokens N_tex after pad/truncate'),
    'context_dim': ConfigKey(int, '64', 'Text embedding and image context width d'),
    'patch_size': ConfigKey(int, '8', 'Image encoder patch size p'),
    'vision_width': ConfigKey(int, '64', 'Image encoder width'),
    'vision_layers': ConfigKey(int, '2', 'Image encoder transformer layers'),
    'vision_heads': ConfigKey(int, '2', 'Image encoder / projection heads'),
    'num_queries': ConfigKey(int, '16', 'Projection network query count M'),
    'projector_layers': ConfigKey(int, '2', 'Projection network depth'),
    'base_width': ConfigKey(int, '64', 'U-Net base width'),
    'channel_mult': ConfigKey(_int_list, '1,2', 'U-Net width multipliers, one per level'),
    'num_heads': ConfigKey(int, '2', 'U-Net attention heads'),
    'conditioning_mode': ConfigKey(str, 'full_tokens', 'full_tokens or cls_only'),
    'model_seed': ConfigKey(int, '0', 'Parameter initialization seed'),
    # noise schedule
    'diffusion_steps': ConfigKey(int, '200', 'Diffusion timesteps T'),
    'beta_start': ConfigKey(float, '1e-4', 'First beta'),
    'beta_end': ConfigKey(float, '2e-2', 'Last beta'),
    'schedule_kind': ConfigKey(str, 'linear', 'Schedule family'),
    # codec training
    'codec_steps': ConfigKey(int, '5000', 'Codec optimizer steps'),
    'codec_lr': ConfigKey(float, '2e-4', 'Codec learning rate'),
    'codec_batch': ConfigKey(int, '32', 'Codec batch size'),
    'scale_samples': ConfigKey(int, '512', 'Frames used to fit the latent normalization'),
    # denoiser training
    'adapter_steps': ConfigKey(int, '20000', 'image_adapter stage steps'),
    'adapter_lr': ConfigKey(float, '1e-4', 'image_adapter learning rate'),
    'finetune_steps': ConfigKey(int, '2000', 'video_finetune stage steps'),
    'finetune_lr': ConfigKey(float, '5e-5', 'video_finetune learning rate'),
    'batch': ConfigKey(int, '16', 'Denoiser batch size'),
    'grad_accum': ConfigKey(int, '1', 'Micro-batches accumulated per step'),
    'cond_drop_prob': ConfigKey(float, '0.1', 'Joint condition dropout probability'),
    'clip_length': ConfigKey(int, '16', 'Frames per training clip L'),
    'strides': ConfigKey(_int_list, '1,2,3,4,5,6', 'Candidate frame strides'),
    'train_seed': ConfigKey(int, '0', 'Training RNG seed'),
    'checkpoint_every': ConfigKey(int, '1000', 'Steps between checkpoints'),
    'log_every': ConfigKey(int, '50', 'Steps between metric log lines'),
    # sampling
    'sample_steps': ConfigKey(int, '50', 'DDIM steps'),
    'eta': ConfigKey(float, '0.0', 'DDIM eta'),
    'guidance_scale': ConfigKey(float, '7.5', 'Classifier-free guidance scale w'),
    'sample_seed': ConfigKey(int, '0', 'Sampling seed'),
    'sampler': ConfigKey(str, 'ddim', 'ddim or ddpm'),
    'gif_fps': ConfigKey(int, '8', 'GIF export frame rate'),
    # runtime
    'run_dir': ConfigKey(str, 'runs', 'Checkpoints and metrics root'),
    'device': ConfigKey(str, 'cpu', 'Torch device'),
    'log_level': ConfigKey(str, 'INFO', 'Logging level'),
    'log_dir': ConfigKey(str, 'logs', 'Log file directory'),
}


def _parse(key: str, raw: str) -> Any:
    try:
        return CONFIG_KEYS[key].parse(raw.strip())
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r} ({e})") from None


@dataclass
class ProjectConfig:
    """Parsed project configuration; `values` holds every key of CONFIG_KEYS"""

    values: Dict[str, Any]
    source: Optional[str] = None
    overrides: Dict[str, str] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"unknown config key '{key}'")
        return self.values[key]

    def canonical(self) -> str:
        """One `key = value` line per key, sorted"""
        return '\n'.join(f"{k} = {_render(self.values[k])}" for k in sorted(self.values))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode('utf-8')).hexdigest()

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            image_size=v['image_size'], latent_channels=v['latent_channels'],
            spatial_factor=v['spatial_factor'], codec_width=v['codec_width'],
            vocab_size=v['vocab_size'], text_tokens=v['text_tokens'], context_dim=v['context_dim'],
            patch_size=v['patch_size'], vision_width=v['vision_width'], vision_layers=v['vision_layers'],
            vision_heads=v['vision_heads'], num_queries=v['num_queries'],
            projector_layers=v['projector_layers'], base_width=v['base_width'],
            channel_mult=v['channel_mult'], num_heads=v['num_heads'],
            conditioning_mode=v['conditioning_mode'],
        )

    def schedule(self) -> NoiseSchedule:
        v = self.values
        return make_schedule(v['diffusion_steps'], v['beta_start'], v['beta_end'], v['schedule_kind'])

    def codec_train_config(self) -> CodecTrainConfig:
        v = self.values
        return CodecTrainConfig(steps=v['codec_steps'], lr=v['codec_lr'], batch=v['codec_batch'],
                                seed=v['train_seed'], scale_samples=v['scale_samples'],
                                log_every=v['log_every'])

    def train_config(self, stage) -> TrainConfig:
        stage = parse_stage(stage)
        v = self.values
        if stage is Stage.IMAGE_ADAPTER:
            steps, lr = v['adapter_steps'], v['adapter_lr']
        elif stage is Stage.VIDEO_FINETUNE:
            steps, lr = v['finetune_steps'], v['finetune_lr']
        else:
            raise ConfigError("the codec stage is configured through codec_* keys")
        return TrainConfig(stage=stage, lr=lr, batch=v['batch'], steps=steps,
                           cond_drop_prob=v['cond_drop_prob'], seed=v['train_seed'],
                           grad_accum=v['grad_accum'], clip_length=v['clip_length'],
                           strides=v['strides'], checkpoint_every=v['checkpoint_every'],
                           log_every=v['log_every'])

    def sampler_config(self, **overrides) -> SamplerConfig:
        v = self.values
        settings = dict(steps=v['sample_steps'], eta=v['eta'], guidance_scale=v['guidance_scale'],
                        seed=v['sample_seed'], num_frames=v['clip_length'], sampler=v['sampler'])
        settings.update({k: val for k, val in overrides.items() if val is not None})
        return SamplerConfig(**settings)


def _render(value: Any) -> str:
    if isinstance(value, tuple):
        return ','.join(str(v) for v in value)
    return str(value)


def load_config(path=None, environ: Optional[Mapping[str, str]] = None) -> ProjectConfig:
    """
    Load the project configuration

    Args:
        path: Optional `key = value` file; unknown keys are errors
        environ: Environment to read ANIMATOR_<KEY> overrides from (default: os.environ after .env)

    Returns:
        ProjectConfig
    """
    raw = {key: entry.default for key, entry in CONFIG_KEYS.items()}

    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        file_values = dotenv_values(path)
        unknown = sorted(set(file_values) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
        for key, value in file_values.items():
            if value is None:
                raise ConfigError(f"config key '{key}' in {path} has no value")
            raw[key] = value

    if environ is None:
        load_dotenv()
        environ = os.environ
    overrides = {}
    for key in CONFIG_KEYS:
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            overrides[key] = raw[key] = environ[env_key]

    values = {key: _parse(key, value) for key, value in raw.items()}
    config = ProjectConfig(values=values, source=str(path) if path else None, overrides=overrides)
    # validate cross-key constraints early
    config.model_config()
    try:
        config.schedule()
    except ScheduleError as e:
        raise ConfigError(f"noise schedule: {e}") from e
    return config


def describe_keys() -> str:
    """Reference table of every config key"""
    width = max(len(k) for k in CONFIG_KEYS)
    return '\n'.join(f"{key:<{width}}  {entry.default:<12}  {entry.description}"
                     for key, entry in CONFIG_KEYS.items())
