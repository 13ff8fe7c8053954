import json

import pytest

from app.cli import EXIT_ERROR, EXIT_OK, EXIT_USAGE, cli, run_ablation
from app.config import load_config
from app.evaluation import SAMPLE_MANIFEST, compare_modes
from data.clip_sampler import VideoCorpus, load_video_frames
from data.data_generator import generate_corpus
from models.checkpoint import read_manifest
from models.latent_codec import CodecTrainConfig, train_codec
from models.model_state import new_state


@pytest.fixture
def pipeline(config_file, tmp_path):
    """Corpus, codec and both denoiser stages trained through the CLI"""
    base = ['--config', str(config_file)]
    assert cli(base + ['make-data', '--verify']) == EXIT_OK
    assert cli(base + ['train-codec']) == EXIT_OK
    assert cli(base + ['train', '--stage', 'image_adapter']) == EXIT_OK
    assert cli(base + ['train', '--stage', 'video_finetune']) == EXIT_OK
    return base


def test_training_pipeline_outputs(pipeline, tmp_path):
    runs = tmp_path / 'runs'
    assert read_manifest(runs / 'codec')['stage'] == 'codec'
    manifest = read_manifest(runs / 'video_finetune' / 'latest')
    assert manifest['stage'] == 'video_finetune' and manifest['step'] == 2
    assert manifest['trained_stages'] == ['codec', 'image_adapter']
    assert (runs / 'image_adapter' / 'metrics.tsv').exists()
    assert (runs / 'video_finetune' / 'step_000001' / 'manifest.json').exists()

    assert cli(pipeline + ['plot-metrics', '--metrics', str(runs / 'video_finetune' / 'metrics.tsv'),
                           '--out', str(tmp_path / 'loss.png')]) == EXIT_OK
    assert (tmp_path / 'loss.png').exists()


def test_sample_and_eval(pipeline, tmp_path):
    image = tmp_path / 'corpus' / 'clip_00000' / 'frame_0000.png'
    out = tmp_path / 'samples' / 'demo'
    assert cli(pipeline + ['sample', '--image', str(image), '--prompt', 'a red circle moving right',
                           '--frames', '3', '--seed', '4', '--gif', '--out', str(out)]) == EXIT_OK

    assert load_video_frames(out).shape == (3, 3, 32, 32)
    assert (out / 'condition.png').exists() and (out / 'sample.gif').exists()
    manifest = json.loads((out / SAMPLE_MANIFEST).read_text())
    for key in ('image_path', 'prompt', 'seed', 'steps', 'eta', 'guidance', 'checkpoint', 'mode', 'config_hash'):
        assert key in manifest
    assert manifest['seed'] == 4 and manifest['steps'] == 2 and manifest['guidance'] == 2.0
    assert manifest['mode'] == 'full_tokens'

    report = tmp_path / 'report.json'
    checkpoint = tmp_path / 'runs' / 'video_finetune' / 'latest'
    assert cli(pipeline + ['eval', '--samples', str(tmp_path / 'samples'), '--report', str(report),
                           '--checkpoint', str(checkpoint)]) == EXIT_OK
    data = json.loads(report.read_text())
    assert len(data['rows']) == 1 and len(data['rows'][0]['embedding_cosine']) == 3

    fallback = tmp_path / 'fallback.json'
    assert cli(pipeline + ['eval', '--samples', str(tmp_path / 'samples'), '--report', str(fallback)]) == EXIT_OK
    assert json.loads(fallback.read_text())['rows'] == data['rows']

    manifest.pop('checkpoint')
    (out / SAMPLE_MANIFEST).write_text(json.dumps(manifest))
    assert cli(pipeline + ['eval', '--samples', str(out), '--report', str(fallback)]) == EXIT_ERROR


def test_sampling_is_reproducible(pipeline, tmp_path):
    image = str(tmp_path / 'corpus' / 'clip_00001' / 'frame_0000.png')
    for name in ('a', 'b'):
        assert cli(pipeline + ['sample', '--image', image, '--prompt', 'a shape', '--frames', '2',
                               '--out', str(tmp_path / name)]) == EXIT_OK
    for frame in sorted((tmp_path / 'a').glob('frame_*.png')):
        assert frame.read_bytes() == (tmp_path / 'b' / frame.name).read_bytes()


def test_resume_continues_the_stage(pipeline, tmp_path):
    latest = tmp_path / 'runs' / 'video_finetune' / 'latest'
    assert cli(pipeline + ['train', '--stage', 'video_finetune', '--resume', str(latest), '--steps', '3',
                           '--out', str(tmp_path / 'resumed')]) == EXIT_OK
    assert read_manifest(tmp_path / 'resumed' / 'latest')['step'] == 3
    assert cli(pipeline + ['train', '--stage', 'image_adapter', '--resume', str(latest)]) == EXIT_USAGE


def test_ablation_compares_modes(pipeline, tmp_path):
    assert cli(pipeline + ['ablate', '--mode', 'full_tokens']) == EXIT_OK
    out = tmp_path / 'runs' / 'ablation'
    assert (out / 'ablation_full_tokens.json').exists()
    assert not (out / 'ablation_comparison.json').exists()

    assert cli(pipeline + ['ablate', '--mode', 'cls_only']) == EXIT_OK
    comparison = json.loads((out / 'ablation_comparison.json').read_text())
    assert set(comparison) == {'full_tokens_psnr', 'cls_only_psnr', 'difference_db', 'full_tokens_higher'}
    report = json.loads((out / 'ablation_cls_only.json').read_text())
    assert report['meta']['mode'] == 'cls_only' and len(report['rows']) == 1


def test_usage_errors(config_file, tmp_path):
    base = ['--config', str(config_file)]
    assert cli([]) == EXIT_USAGE
    assert cli(base + ['make-data', '--bogus']) == EXIT_USAGE
    assert cli(['--config', str(tmp_path / 'missing.conf'), 'config']) == EXIT_USAGE
    assert cli(base + ['sample', '--image', str(tmp_path / 'missing.png'), '--prompt', 'x',
                       '--out', str(tmp_path / 'out')]) == EXIT_USAGE
    assert cli(base + ['train', '--stage', 'video_finetune', '--init', 'a', '--resume', 'b']) == EXIT_USAGE
    assert cli(base + ['train-codec']) == EXIT_USAGE


def test_structured_errors(config_file, tmp_path):
    bad = tmp_path / 'bad.conf'
    bad.write_text('unknown_key = 1\n')
    assert cli(['--config', str(bad), 'config']) == EXIT_ERROR

    base = ['--config', str(config_file)]
    assert cli(base + ['make-data']) == EXIT_OK
    assert cli(base + ['train-codec']) == EXIT_OK
    image = str(tmp_path / 'corpus' / 'clip_00000' / 'frame_0000.png')
    assert cli(base + ['sample', '--image', image, '--prompt', 'x', '--checkpoint', str(tmp_path / 'runs' / 'codec'),
                       '--out', str(tmp_path / 'out')]) == EXIT_ERROR


def test_config_command(config_file, capsys):
    assert cli(['--config', str(config_file), 'config']) == EXIT_OK
    output = capsys.readouterr().out
    assert 'guidance_scale' in output and 'config hash:' in output


ABLATION_OVERRIDES = {
    'codec_width': '32', 'base_width': '32', 'context_dim': '32', 'vision_width': '32',
    'diffusion_steps': '200', 'adapter_steps': '500', 'adapter_lr': '1e-3',
    'finetune_steps': '1000', 'finetune_lr': '5e-4', 'batch': '8', 'clip_length': '8',
    'holdout_clips': '2', 'checkpoint_every': '1000', 'log_every': '100',
    'sample_steps': '50', 'guidance_scale': '2.0',
}


@pytest.mark.slow
def test_full_tokens_beat_cls_only_on_held_out_clips(config_file, tmp_path):
    environ = {'ANIMATOR_' + key.upper(): value for key, value in ABLATION_OVERRIDES.items()}
    config = load_config(config_file, environ=environ)
    generate_corpus(n_clips=8, seed=0, out_dir=tmp_path / 'ablation_corpus', image_size=32, num_frames=24)
    corpus = VideoCorpus(tmp_path / 'ablation_corpus')

    codec_state = new_state(config.model_config(), config['model_seed'])
    train_codec(corpus.frame_dataset(), CodecTrainConfig(steps=2000, batch=32, lr=1e-3, scale_samples=128),
                codec_state.model.codec)

    full = run_ablation(config, 'full_tokens', corpus, codec_state, tmp_path / 'ablation')
    cls_only = run_ablation(config, 'cls_only', corpus, codec_state, tmp_path / 'ablation')
    assert full.meta['held_out'] == cls_only.meta['held_out'] and len(full.rows) == 2

    comparison = compare_modes(full, cls_only)
    assert comparison['full_tokens_higher'], comparison
