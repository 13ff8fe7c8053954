"""
Evaluation Module
Stand-in fidelity metrics for generated clips: first-frame PSNR against the
conditioning image, adjacent-frame mean absolute difference, and per-frame
toy-embedding cosine similarity
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import pandas as pd
import torch
from sklearn.metrics.pairwise import cosine_similarity

from data.clip_sampler import load_image, load_video_frames
from models.conditioning import ImageEncoder
from models.exceptions import ConfigError, DatasetError, ShapeError

logger = logging.getLogger(__name__)

PSNR_PEAK = 2.0
PSNR_CAP_DB = 99.0
SAMPLE_MANIFEST = 'sample_manifest.json'
CONDITION_IMAGE = 'condition.png'
METRICS_NOTE = ('stand-in metrics: PSNR/MAD on [-1,1] pixels (peak 2.0, PSNR capped at 99 dB) and '
                'cosine of the toy image encoder class token; not FVD or CLIP score')

REPORT_COLUMNS = ['clip_id', 'first_frame_psnr', 'mean_adjacent_frame_mad', 'embedding_cosine']


def _as_array(x: Union[torch.Tensor, np.ndarray]) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(reference, estimate, peak: float = PSNR_PEAK, cap: float = PSNR_CAP_DB) -> float:
    """PSNR in dB on [-1, 1] pixels; identical inputs (infinite PSNR) return the cap"""
    a, b = _as_array(reference), _as_array(estimate)
    if a.shape != b.shape:
        raise ShapeError(f"PSNR shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * math.log10(peak ** 2 / mse), cap)


def mean_adjacent_frame_mad(video) -> float:
    """Mean absolute difference between consecutive frames; 0 for a single frame"""
    frames = _as_array(video)
    if frames.shape[0] < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(frames, axis=0))))


@torch.no_grad()
def embedding_cosine(video: torch.Tensor, image: torch.Tensor, encoder: ImageEncoder) -> np.ndarray:
    """Cosine similarity between each frame's class token and the conditioning image's"""
    encoder = encoder.eval()
    device = encoder.cls_token.device
    frames = encoder(video.to(device, encoder.cls_token.dtype)).cls
    reference = encoder(image.unsqueeze(0).to(device, encoder.cls_token.dtype)).cls
    return cosine_similarity(frames.cpu().double().numpy(), reference.cpu().double().numpy())[:, 0]


def fidelity_metrics(sample_dir,
                     condition_image: Optional[Union[torch.Tensor, str, Path]] = None,
                     encoder: Optional[ImageEncoder] = None,
                     clip_id: Optional[str] = None) -> Dict:
    """
    Metrics for one generated clip

    Args:
        sample_dir: Directory of frame_%04d.png files
        condition_image: (3,H,W) tensor or image path; defaults to <sample_dir>/condition.png
        encoder: Frozen toy image encoder for the cosine metric (omitted when None)
        clip_id: Row identifier; defaults to the directory name

    Returns:
        dict: One EvalReport row
    """
    sample_dir = Path(sample_dir)
    video = load_video_frames(sample_dir)
    if condition_image is None:
        condition_image = sample_dir / CONDITION_IMAGE
    if not isinstance(condition_image, torch.Tensor):
        condition_image = load_image(condition_image)
    if condition_image.shape != video.shape[1:]:
        raise ShapeError(f"condition image {tuple(condition_image.shape)} vs frames {tuple(video.shape[1:])}")

    cosine = embedding_cosine(video, condition_image, encoder) if encoder is not None else np.array([])
    return {
        'clip_id': clip_id or sample_dir.name,
        'first_frame_psnr': psnr(condition_image, video[0]),
        'mean_adjacent_frame_mad': mean_adjacent_frame_mad(video),
        'embedding_cosine': [float(c) for c in cosine],
    }


@dataclass
class EvalReport:
    """Per-sample metric rows plus mean/std aggregates"""

    rows: pd.DataFrame
    note: str = METRICS_NOTE
    meta: Dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: List[Dict], **meta) -> 'EvalReport':
        return cls(rows=pd.DataFrame(rows, columns=REPORT_COLUMNS), meta=meta)

    def aggregate(self) -> Dict[str, float]:
        summary = {}
        for column in ('first_frame_psnr', 'mean_adjacent_frame_mad'):
            values = self.rows[column].astype(float)
            summary[f"{column}_mean"] = float(values.mean()) if len(values) else float('nan')
            summary[f"{column}_std"] = float(values.std(ddof=0)) if len(values) else float('nan')
        cosines = [np.mean(c) for c in self.rows['embedding_cosine'] if len(c)]
        summary['embedding_cosine_mean'] = float(np.mean(cosines)) if cosines else float('nan')
        summary['embedding_cosine_std'] = float(np.std(cosines)) if cosines else float('nan')
        return summary

    def to_dict(self) -> Dict:
        return {
            'note': self.note,
            'meta': self.meta,
            'rows': self.rows.to_dict(orient='records'),
            'aggregate': self.aggregate(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True) + '\n', encoding='utf-8')
        return path

    @classmethod
    def load(cls, path) -> 'EvalReport':
        path = Path(path)
        if not path.exists():
            raise DatasetError(f"no report at {path}")
        data = json.loads(path.read_text(encoding='utf-8'))
        return cls(rows=pd.DataFrame(data['rows'], columns=REPORT_COLUMNS),
                   note=data.get('note', METRICS_NOTE), meta=data.get('meta', {}))


def sample_dirs(samples_root) -> List[Path]:
    """A sample directory itself, or every sample directory below a root"""
    root = Path(samples_root)
    if not root.is_dir():
        raise DatasetError(f"samples directory not found: {root}")
    if (root / SAMPLE_MANIFEST).exists() or any(root.glob('frame_*.png')):
        return [root]
    found = sorted(p.parent for p in root.glob(f"*/{SAMPLE_MANIFEST}"))
    if not found:
        raise DatasetError(f"no samples (directories with {SAMPLE_MANIFEST}) under {root}")
    return found


def _read_sample_manifest(directory: Path) -> Dict:
    path = directory / SAMPLE_MANIFEST
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"unreadable sample manifest {path}: {e}") from e


def evaluate_samples(samples_root,
                     encoder: Optional[ImageEncoder] = None,
                     encoder_loader: Optional[Callable[[str], ImageEncoder]] = None) -> EvalReport:
    """
    EvalReport over every sample directory under samples_root

    Args:
        samples_root: One sample directory or a root holding several
        encoder: Image encoder for the cosine metric, shared by every sample
        encoder_loader: Used when encoder is None; maps the checkpoint named in
            each sample manifest to its image encoder (loaded once per path)

    Returns:
        EvalReport
    """
    encoders: Dict[str, ImageEncoder] = {}
    rows = []
    for directory in sample_dirs(samples_root):
        condition = directory / CONDITION_IMAGE
        manifest = _read_sample_manifest(directory)
        clip_id = manifest.get('clip_id', directory.name)
        if not condition.exists():
            if 'image_path' not in manifest:
                raise DatasetError(f"{directory} has no {CONDITION_IMAGE} and its manifest names no image_path")
            condition = Path(manifest['image_path'])

        sample_encoder = encoder
        if sample_encoder is None and encoder_loader is not None:
            checkpoint = manifest.get('checkpoint')
            if not checkpoint:
                raise ConfigError(f"sample {directory} names no checkpoint; pass one explicitly")
            if checkpoint not in encoders:
                encoders[checkpoint] = encoder_loader(checkpoint)
            sample_encoder = encoders[checkpoint]
        rows.append(fidelity_metrics(directory, condition, sample_encoder, clip_id))

    report = EvalReport.from_rows(rows, samples=str(samples_root))
    agg = report.aggregate()
    logger.info("=" * 60)
    logger.info("EVALUATION (%d samples, %s)", len(rows), 'stand-in metrics')
    logger.info("=" * 60)
    logger.info("First-frame PSNR: %.2f +/- %.2f dB", agg['first_frame_psnr_mean'], agg['first_frame_psnr_std'])
    logger.info("Adjacent-frame MAD: %.4f +/- %.4f", agg['mean_adjacent_frame_mad_mean'],
                agg['mean_adjacent_frame_mad_std'])
    return report


def compare_modes(full_tokens: EvalReport, cls_only: EvalReport) -> Dict:
    """Direction of the conditioning-mode ablation on mean first-frame PSNR"""
    full = full_tokens.aggregate()['first_frame_psnr_mean']
    cls = cls_only.aggregate()['first_frame_psnr_mean']
    return {
        'full_tokens_psnr': full,
        'cls_only_psnr': cls,
        'difference_db': full - cls,
        'full_tokens_higher': bool(full > cls),
    }
