"""Shared tiny-instance fixtures"""

import pytest
import torch

from data.clip_sampler import VideoCorpus
from data.data_generator import generate_corpus
from models.diffusion_schedule import make_schedule
from models.model_state import ModelConfig, Stage, advance_stage, new_state

TINY_IMAGE = 32
TINY_FRAMES = 12


def pytest_addoption(parser):
    parser.addoption('--run-slow', action='store_true', default=False, help='run end-to-end training tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return
    skip = pytest.mark.skip(reason='needs --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


def tiny_model_config(**overrides) -> ModelConfig:
    settings = dict(
        image_size=TINY_IMAGE, latent_channels=4, spatial_factor=4, codec_width=8,
        vocab_size=64, text_tokens=4, context_dim=8, patch_size=8, vision_width=8,
        vision_layers=1, vision_heads=2, num_queries=4, projector_layers=1,
        base_width=8, channel_mult=(1, 2), num_heads=2,
    )
    settings.update(overrides)
    return ModelConfig(**settings)


TINY_CONFIG_TEXT = """
image_size = 32
native_frames = 12
n_clips = 3
holdout_clips = 1
spatial_factor = 4
codec_width = 8
vocab_size = 64
text_tokens = 4
context_dim = 8
vision_width = 8
vision_layers = 1
num_queries = 4
projector_layers = 1
base_width = 8
diffusion_steps = 20
codec_steps = 2
codec_batch = 4
scale_samples = 8
adapter_steps = 2
finetune_steps = 2
batch = 2
clip_length = 4
strides = 1,2
checkpoint_every = 1
log_every = 1
sample_steps = 2
guidance_scale = 2.0
"""


@pytest.fixture(autouse=True)
def single_thread():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_state(tiny_config):
    return new_state(tiny_config, seed=0)


@pytest.fixture
def video_state(tiny_config):
    state = advance_stage(new_state(tiny_config, seed=0), Stage.IMAGE_ADAPTER)
    return advance_stage(state, Stage.VIDEO_FINETUNE)


@pytest.fixture
def tiny_sched():
    return make_schedule(T=20)


@pytest.fixture(scope='session')
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp('corpus')
    generate_corpus(n_clips=3, seed=3, out_dir=out, image_size=TINY_IMAGE, num_frames=TINY_FRAMES)
    return out


@pytest.fixture
def corpus(corpus_dir):
    return VideoCorpus(corpus_dir)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'animator.conf'
    path.write_text(TINY_CONFIG_TEXT + f"\ncorpus_dir = {tmp_path / 'corpus'}\n"
                    f"run_dir = {tmp_path / 'runs'}\nlog_dir = {tmp_path / 'logs'}\n")
    return path
