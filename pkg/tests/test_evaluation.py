import json
import math

import numpy as np
import pytest
import torch

from app.evaluation import (CONDITION_IMAGE, PSNR_CAP_DB, SAMPLE_MANIFEST, EvalReport, compare_modes,
                            embedding_cosine, evaluate_samples, fidelity_metrics,
                            mean_adjacent_frame_mad, psnr)
from data.clip_sampler import image_to_tensor, save_video_frames, tensor_to_image
from data.data_generator import BACKGROUNDS, COLORS, render_frame
from models.conditioning import ImageEncoder
from models.exceptions import ConfigError, DatasetError, ShapeError


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    return ImageEncoder(image_size=32, patch_size=8, width=8, layers=1, heads=2)


def structured_image():
    return image_to_tensor(render_frame('square', COLORS['yellow'], BACKGROUNDS[0], 16, 16, 6, 32))


def write_sample(directory, video, condition):
    save_video_frames(video, directory)
    tensor_to_image(condition).save(directory / CONDITION_IMAGE)
    (directory / SAMPLE_MANIFEST).write_text(json.dumps({'prompt': 'x', 'image_path': str(directory / CONDITION_IMAGE)}))
    return directory


def test_psnr_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-1, 1, size=(3, 4, 4)), rng.uniform(-1, 1, size=(3, 4, 4))
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - y) ** 2
    expected = 10 * math.log10(4.0 / (total / a.size))
    assert abs(psnr(a, b) - expected) < 1e-9


def test_psnr_of_identical_inputs_is_capped():
    x = torch.rand(3, 8, 8)
    assert psnr(x, x) == PSNR_CAP_DB
    assert psnr(x, x + 1e-9) == PSNR_CAP_DB


def test_psnr_shape_check():
    with pytest.raises(ShapeError):
        psnr(np.zeros(3), np.zeros(4))


def test_mad_matches_loop_oracle():
    rng = np.random.default_rng(1)
    video = rng.uniform(-1, 1, size=(4, 3, 2, 2))
    diffs = [abs(video[i + 1].ravel()[j] - video[i].ravel()[j]) for i in range(3) for j in range(12)]
    assert abs(mean_adjacent_frame_mad(video) - sum(diffs) / len(diffs)) < 1e-12
    assert mean_adjacent_frame_mad(video[:1]) == 0.0


def test_black_video_of_black_image(encoder):
    image = -torch.ones(3, 32, 32)
    video = image.expand(5, 3, 32, 32)
    assert psnr(image, video[0]) == PSNR_CAP_DB
    assert mean_adjacent_frame_mad(video) == 0.0
    np.testing.assert_allclose(embedding_cosine(video, image, encoder), np.ones(5), atol=1e-6)


def test_noise_video_scores_low_against_structured_image():
    image = structured_image()
    noise = torch.rand(4, 3, 32, 32, generator=torch.Generator().manual_seed(2)) * 2 - 1
    assert psnr(image, noise[0]) < 10.0
    assert mean_adjacent_frame_mad(noise) > 0.5


def test_fidelity_metrics_from_disk(tmp_path, encoder):
    image = structured_image()
    sample = write_sample(tmp_path / 'sample', image.expand(3, 3, 32, 32), image)
    row = fidelity_metrics(sample, encoder=encoder)
    assert row['clip_id'] == 'sample'
    assert row['first_frame_psnr'] == PSNR_CAP_DB
    assert row['mean_adjacent_frame_mad'] == 0.0
    assert len(row['embedding_cosine']) == 3


def test_fidelity_metrics_shape_mismatch(tmp_path):
    save_video_frames(torch.zeros(2, 3, 32, 32), tmp_path)
    with pytest.raises(ShapeError):
        fidelity_metrics(tmp_path, condition_image=torch.zeros(3, 16, 16))


def test_evaluate_samples_aggregates_rows(tmp_path):
    image = structured_image()
    write_sample(tmp_path / 'a', image.expand(2, 3, 32, 32), image)
    noisy = image.clone()
    noisy[:, :4] = -noisy[:, :4]
    write_sample(tmp_path / 'b', torch.stack([noisy, image]), image)

    report = evaluate_samples(tmp_path)
    assert report.rows['clip_id'].tolist() == ['a', 'b']
    summary = report.aggregate()
    assert abs(summary['first_frame_psnr_mean'] - report.rows['first_frame_psnr'].mean()) < 1e-9
    assert abs(summary['mean_adjacent_frame_mad_mean'] - report.rows['mean_adjacent_frame_mad'].mean()) < 1e-9
    assert math.isnan(summary['embedding_cosine_mean'])


def test_report_save_and_load(tmp_path):
    report = EvalReport.from_rows([{'clip_id': 'a', 'first_frame_psnr': 20.0, 'mean_adjacent_frame_mad': 0.1,
                                    'embedding_cosine': [0.9, 0.8]}], mode='full_tokens')
    path = report.save(tmp_path / 'report.json')
    data = json.loads(path.read_text())
    assert set(data) == {'note', 'meta', 'rows', 'aggregate'}
    assert 'stand-in' in data['note']
    loaded = EvalReport.load(path)
    assert loaded.meta == {'mode': 'full_tokens'}
    assert loaded.aggregate() == pytest.approx(report.aggregate())


def test_missing_samples(tmp_path):
    with pytest.raises(DatasetError):
        evaluate_samples(tmp_path / 'nowhere')
    with pytest.raises(DatasetError):
        evaluate_samples(tmp_path)
    with pytest.raises(DatasetError):
        EvalReport.load(tmp_path / 'report.json')


def test_encoder_comes_from_each_manifest_checkpoint(tmp_path, encoder):
    image = structured_image()
    for name, checkpoint in (('a', 'runs/one'), ('b', 'runs/one'), ('c', 'runs/two')):
        sample = write_sample(tmp_path / name, image.expand(2, 3, 32, 32), image)
        manifest = json.loads((sample / SAMPLE_MANIFEST).read_text())
        (sample / SAMPLE_MANIFEST).write_text(json.dumps({**manifest, 'checkpoint': checkpoint}))
    loaded = []

    def loader(path):
        loaded.append(path)
        return encoder

    report = evaluate_samples(tmp_path, encoder_loader=loader)
    assert loaded == ['runs/one', 'runs/two']
    assert report.rows['embedding_cosine'].map(len).tolist() == [2, 2, 2]
    assert evaluate_samples(tmp_path, encoder, encoder_loader=loader).rows.shape[0] == 3
    assert len(loaded) == 2


def test_manifest_without_checkpoint_needs_an_encoder(tmp_path, encoder):
    image = structured_image()
    write_sample(tmp_path / 'a', image.expand(2, 3, 32, 32), image)
    with pytest.raises(ConfigError):
        evaluate_samples(tmp_path, encoder_loader=lambda path: encoder)


def test_manifest_errors_are_dataset_errors(tmp_path):
    image = structured_image()
    sample = write_sample(tmp_path / 'a', image.expand(2, 3, 32, 32), image)
    (sample / CONDITION_IMAGE).unlink()
    (sample / SAMPLE_MANIFEST).write_text(json.dumps({'prompt': 'x'}))
    with pytest.raises(DatasetError, match='image_path'):
        evaluate_samples(tmp_path)

    (sample / SAMPLE_MANIFEST).write_text('{not json')
    with pytest.raises(DatasetError, match='unreadable'):
        evaluate_samples(tmp_path)


def test_compare_modes_direction():
    def report(value):
        return EvalReport.from_rows([{'clip_id': 'a', 'first_frame_psnr': value, 'mean_adjacent_frame_mad': 0.0,
                                      'embedding_cosine': []}])
    comparison = compare_modes(report(24.0), report(18.5))
    assert comparison['full_tokens_higher'] is True
    assert comparison['difference_db'] == pytest.approx(5.5)
    assert compare_modes(report(10.0), report(12.0))['full_tokens_higher'] is False
