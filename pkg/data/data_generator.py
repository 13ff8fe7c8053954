"""
Synthetic Corpus Generator Module
Renders caption-video pairs of moving anti-aliased shapes for training and testing
"""

import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw
from scipy import ndimage
from tqdm import tqdm

from data.clip_sampler import MANIFEST_NAME, ClipRecord, load_manifest
from models.exceptions import DatasetError

logger = logging.getLogger(__name__)

COLORS = {
    'red': (220, 40, 40),
    'green': (40, 180, 60),
    'blue': (40, 80, 225),
    'yellow': (235, 215, 40),
    'purple': (150, 60, 190),
    'orange': (245, 140, 30),
}

SHAPES = ('circle', 'square', 'triangle')

# motion name -> caption direction phrase
MOTIONS = {
    'left': 'left',
    'right': 'right',
    'up': 'up',
    'down': 'down',
    'bounce': 'back and forth',
    'grow': 'closer',
    'shrink': 'away',
}

DRIFT_MOTIONS = ('left', 'right', 'up', 'down')

# plain gray-scale backgrounds, far from every shape color
BACKGROUNDS = ((16, 16, 16), (64, 64, 64), (200, 200, 200), (240, 240, 240))

SUPERSAMPLE = 4

CAPTION_PATTERN = re.compile(
    r'^a (?P<color>{}) (?P<shape>{}) moving (?P<direction>{})$'.format(
        '|'.join(COLORS), '|'.join(SHAPES), '|'.join(MOTIONS.values())
    )
)

FRAME_PATTERN = 'frame_{:04d}.png'


def make_caption(color: str, shape: str, motion: str) -> str:
    """Caption from the factor template 'a {color} {shape} moving {direction}'"""
    return f"a {color} {shape} moving {MOTIONS[motion]}"


def parse_caption(caption: str) -> Dict[str, str]:
    """Split a template caption back into factors; raises DatasetError on mismatch"""
    match = CAPTION_PATTERN.match(caption)
    if match is None:
        raise DatasetError(f"caption does not follow the template: {caption!r}")
    factors = match.groupdict()
    factors['motion'] = {v: k for k, v in MOTIONS.items()}[factors['direction']]
    return factors


def _trajectory(motion: str, num_frames: int, size: int, rng: np.random.Generator
                ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per-frame shape center (x, y) and radius in pixels

    Drift motions travel ~45% of the frame over the clip and never leave it.
    """
    progress = np.linspace(0.0, 1.0, num_frames)
    radius = rng.uniform(0.10, 0.15) * size

    if motion in ('grow', 'shrink'):
        small, large = 0.07 * size, 0.22 * size
        start, end = (small, large) if motion == 'grow' else (large, small)
        radius = start + (end - start) * progress
        cx = np.full(num_frames, size / 2 + rng.uniform(-0.05, 0.05) * size)
        cy = np.full(num_frames, size / 2 + rng.uniform(-0.05, 0.05) * size)
        return cx, cy, radius

    radii = np.full(num_frames, radius)
    margin = radius + 1.0
    travel = 0.45 * size
    fixed = rng.uniform(margin, size - margin)

    if motion == 'bounce':
        # triangle wave, two round trips per clip
        amplitude = travel / 2
        center = rng.uniform(margin + amplitude, size - margin - amplitude)
        phase = 2.0 * np.abs(((2.0 * progress) % 1.0) - 0.5)
        cx = center - amplitude + 2.0 * amplitude * (1.0 - phase)
        return cx, np.full(num_frames, fixed), radii

    origin = rng.uniform(margin, size - margin - travel)
    if motion == 'right':
        return origin + travel * progress, np.full(num_frames, fixed), radii
    if motion == 'left':
        return size - origin - travel * progress, np.full(num_frames, fixed), radii
    if motion == 'down':
        return np.full(num_frames, fixed), origin + travel * progress, radii
    if motion == 'up':
        return np.full(num_frames, fixed), size - origin - travel * progress, radii
    raise DatasetError(f"unknown motion '{motion}'")


def render_frame(shape: str, color: Sequence[int], background: Sequence[int],
                 cx: float, cy: float, radius: float, size: int) -> Image.Image:
    """Draw one anti-aliased frame by supersampling and box-filter downscaling"""
    scale = SUPERSAMPLE
    canvas = Image.new('RGB', (size * scale, size * scale), tuple(background))
    draw = ImageDraw.Draw(canvas)
    x, y, r = cx * scale, cy * scale, radius * scale

    if shape == 'circle':
        draw.ellipse([x - r, y - r, x + r, y + r], fill=tuple(color))
    elif shape == 'square':
        half = r * 0.886  # equal area with the circle
        draw.rectangle([x - half, y - half, x + half, y + half], fill=tuple(color))
    elif shape == 'triangle':
        points = [(x + r * np.cos(a), y - r * np.sin(a)) for a in np.pi / 2 + np.arange(3) * 2 * np.pi / 3]
        draw.polygon(points, fill=tuple(color))
    else:
        raise DatasetError(f"unknown shape '{shape}'")

    return canvas.resize((size, size), Image.Resampling.BOX)


def _render_clip(args) -> Dict:
    """Render and write one clip; the RNG stream depends only on (seed, index)"""
    index, seed, out_dir, image_size, num_frames, fps_tag = args
    rng = np.random.default_rng([seed, index])

    shape = SHAPES[rng.integers(len(SHAPES))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    motion = list(MOTIONS)[rng.integers(len(MOTIONS))]
    background = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
    cx, cy, radius = _trajectory(motion, num_frames, image_size, rng)

    clip_id = f"clip_{index:05d}"
    clip_dir = Path(out_dir) / clip_id
    clip_dir.mkdir(parents=True, exist_ok=True)
    for frame in range(num_frames):
        image = render_frame(shape, COLORS[color], background, cx[frame], cy[frame], radius[frame], image_size)
        image.save(clip_dir / FRAME_PATTERN.format(frame), format='PNG')

    caption = make_caption(color, shape, motion)
    (clip_dir / 'caption.txt').write_text(caption + '\n', encoding='utf-8')

    record = ClipRecord(clip_id=clip_id, frame_dir=Path(clip_id), caption=caption,
                        native_length=num_frames, fps_tag=fps_tag)
    return record.to_dict()


def generate_corpus(n_clips: int,
                    seed: int,
                    out_dir,
                    image_size: int = 64,
                    num_frames: int = 96,
                    fps_tag: int = 8,
                    workers: int = 1) -> List[ClipRecord]:
    """
    Generate a synthetic caption-video corpus

    Args:
        n_clips: Number of clips to render
        seed: Corpus seed; each clip draws from its own (seed, index) stream
        out_dir: Output directory (created if missing)
        image_size: Frame width/height in pixels
        num_frames: Native frames per clip
        fps_tag: Frame-rate tag stored with each record
        workers: Worker processes for rendering

    Returns:
        list: ClipRecords in manifest order
    """
    if n_clips < 1:
        raise DatasetError(f"n_clips must be >= 1, got {n_clips}")

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        marker = out_dir / '.write_check'
        marker.touch()
        marker.unlink()
    except OSError as e:
        raise DatasetError(f"output directory {out_dir} is not writable: {e}") from e

    logger.info("Generating %d synthetic clips (%dx%d, %d frames) into %s",
                n_clips, image_size, image_size, num_frames, out_dir)

    jobs = [(i, seed, str(out_dir), image_size, num_frames, fps_tag) for i in range(n_clips)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(tqdm(pool.map(_render_clip, jobs), total=n_clips, desc='clips', leave=False))
    else:
        rows = [_render_clip(job) for job in tqdm(jobs, desc='clips', leave=False)]

    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps(rows, indent=2) + '\n', encoding='utf-8')

    df = pd.DataFrame(rows)
    motions = df['caption'].map(lambda c: parse_caption(c)['motion'])
    logger.info("=" * 60)
    logger.info("CORPUS GENERATION COMPLETE")
    logger.info("=" * 60)
    logger.info("Total clips: %d", len(df))
    for motion, count in motions.value_counts().items():
        logger.info("  %s: %d (%.1f%%)", motion, count, count / len(df) * 100)
    logger.info("Manifest saved to: %s", manifest_path)

    return load_manifest(out_dir)


def estimate_background(frame: np.ndarray) -> np.ndarray:
    """Median color of the frame border"""
    border = np.concatenate([frame[0], frame[-1], frame[:, 0], frame[:, -1]])
    return np.median(border, axis=0)


def shape_centroids(frames: np.ndarray, threshold: float = 24.0) -> np.ndarray:
    """
    Centroid-tracking oracle

    Args:
        frames: (L, H, W, 3) uint8 frames
        threshold: Max per-channel distance still counted as background

    Returns:
        ndarray: (L, 2) centroids as (row, col); NaN where no shape pixels
    """
    background = estimate_background(frames[0].astype(np.float64))
    centroids = np.full((len(frames), 2), np.nan)
    for i, frame in enumerate(frames.astype(np.float64)):
        mask = np.abs(frame - background).max(axis=-1) > threshold
        if mask.any():
            centroids[i] = ndimage.center_of_mass(mask)
    return centroids


def mean_displacement(frames: np.ndarray) -> Tuple[float, float]:
    """Mean per-frame centroid displacement (dx, dy) in pixels"""
    steps = np.diff(shape_centroids(frames), axis=0)
    dy, dx = np.nanmean(steps, axis=0)
    return float(dx), float(dy)


def motion_consistent(caption: str, frames: np.ndarray) -> bool:
    """Check a drift caption against measured centroid motion; non-drift captions pass"""
    motion = parse_caption(caption)['motion']
    if motion not in DRIFT_MOTIONS:
        return True
    dx, dy = mean_displacement(frames)
    return {'right': dx > 0, 'left': dx < 0, 'down': dy > 0, 'up': dy < 0}[motion]


def verify_corpus(corpus_dir) -> List[str]:
    """
    Run the centroid oracle over every drift clip

    Returns:
        list: clip ids whose measured motion contradicts the caption
    """
    corpus_dir = Path(corpus_dir)
    failures = []
    for record in load_manifest(corpus_dir):
        frame_dir = corpus_dir / record.frame_dir
        frames = np.stack([
            np.asarray(Image.open(frame_dir / FRAME_PATTERN.format(i)).convert('RGB'))
            for i in range(record.native_length)
        ])
        if not motion_consistent(record.caption, frames):
            failures.append(record.clip_id)
    logger.info("Verified %s: %d inconsistent clip(s)", corpus_dir, len(failures))
    return failures


if __name__ == "__main__":
    records = generate_corpus(n_clips=8, seed=0, out_dir=os.path.join('data', 'corpus'))
    print(f"\nGenerated {len(records)} clips")
    for record in records[:5]:
        print(f"  {record.clip_id}: {record.caption}")
