"""
Clip Sampler Module
Reads the synthetic corpus and draws training frames and random-stride clips
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from models.exceptions import DatasetError, StageError

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
DEFAULT_STRIDES = (1, 2, 3, 4, 5, 6)
BATCH_KINDS = ('frames', 'clips')


@dataclass
class ClipRecord:
    """One caption-video pair of the corpus; frame_dir is relative to the corpus root"""

    clip_id: str
    frame_dir: Path
    caption: str
    native_length: int
    fps_tag: int = 8

    def __post_init__(self):
        self.frame_dir = Path(self.frame_dir)
        if not self.caption.strip():
            raise DatasetError(f"clip {self.clip_id} has an empty caption")
        if self.native_length < 1:
            raise DatasetError(f"clip {self.clip_id} has no frames")

    def to_dict(self) -> Dict:
        return {
            'clip_id': self.clip_id,
            'frame_dir': self.frame_dir.as_posix(),
            'caption': self.caption,
            'native_length': self.native_length,
            'fps_tag': self.fps_tag,
        }

    @classmethod
    def from_dict(cls, row: Dict) -> 'ClipRecord':
        try:
            return cls(clip_id=row['clip_id'], frame_dir=Path(row['frame_dir']), caption=row['caption'],
                       native_length=int(row['native_length']), fps_tag=int(row.get('fps_tag', 8)))
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"malformed manifest row {row!r}: {e}") from e


@dataclass
class StrideSample:
    """L frames taken every `stride` frames from `start`; frames is (L,3,H,W) in [-1, 1]"""

    frames: torch.Tensor
    stride: int
    start: int

    @property
    def indices(self) -> List[int]:
        return [self.start + i * self.stride for i in range(self.frames.shape[0])]


@dataclass
class TrainBatch:
    """
    Denoiser training batch

    frames: (B, L, 3, H, W) in [-1, 1]; L = 1 for kind 'frames' (stage-1 images)
    captions: one caption per sample
    kind: 'frames' or 'clips'
    """

    frames: torch.Tensor
    captions: List[str]
    kind: str

    def __post_init__(self):
        if self.kind not in BATCH_KINDS:
            raise StageError(f"unknown batch kind '{self.kind}'")
        if self.frames.dim() != 5 or self.frames.shape[0] != len(self.captions):
            raise StageError(
                f"batch frames {tuple(self.frames.shape)} do not match {len(self.captions)} captions"
            )

    @property
    def condition_images(self) -> torch.Tensor:
        """First frame of every sample, the conditioning image"""
        return self.frames[:, 0]


def load_manifest(corpus_dir) -> List[ClipRecord]:
    """Read <corpus_dir>/manifest.json into ClipRecords"""
    path = Path(corpus_dir) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no corpus manifest at {path}")
    try:
        rows = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise DatasetError(f"corpus manifest {path} is not valid JSON: {e}") from e
    records = [ClipRecord.from_dict(row) for row in rows]
    ids = [r.clip_id for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"corpus manifest {path} lists a clip more than once")
    return records


def image_to_tensor(image: Image.Image) -> torch.Tensor:
    """8-bit RGB image -> (3,H,W) float32 in [-1, 1]"""
    array = np.asarray(image.convert('RGB'), dtype=np.float32)
    return torch.from_numpy(array / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def tensor_to_image(frame: torch.Tensor) -> Image.Image:
    """(3,H,W) tensor in [-1, 1] -> 8-bit RGB image"""
    array = ((frame.detach().cpu().clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch.uint8)
    return Image.fromarray(array.permute(1, 2, 0).numpy())


def load_image(path) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"image not found: {path}")
    with Image.open(path) as image:
        return image_to_tensor(image)


def feasible_strides(native_length: int, L: int, stride_set: Sequence[int] = DEFAULT_STRIDES) -> List[int]:
    """Strides s in stride_set with (L - 1) * s + 1 <= native_length"""
    return [s for s in stride_set if s >= 1 and (L - 1) * s + 1 <= native_length]


def draw_stride(native_length: int, L: int, stride_set: Sequence[int], rng: np.random.Generator
                ) -> Tuple[int, int]:
    """
    Draw (stride, start) for an L-frame clip

    The stride is uniform over the feasible strides, then the start is uniform
    over the starts that keep every index inside the clip.
    """
    strides = feasible_strides(native_length, L, stride_set)
    if not strides:
        raise DatasetError(
            f"clip of {native_length} frames is shorter than the {L} frames needed at stride 1"
        )
    stride = int(strides[rng.integers(len(strides))])
    start = int(rng.integers(native_length - (L - 1) * stride))
    return stride, start


class VideoCorpus:
    """
    Read-only view of a generated corpus

    Decoded clips are cached in memory as uint8 arrays.
    """

    def __init__(self, corpus_dir, records: Optional[List[ClipRecord]] = None, cache: bool = True):
        self.root = Path(corpus_dir)
        self.records = records if records is not None else load_manifest(self.root)
        if not self.records:
            raise DatasetError(f"corpus at {self.root} is empty")
        self.cache = cache
        self._clips: Dict[str, np.ndarray] = {}

    def __len__(self):
        return len(self.records)

    def split(self, holdout: int) -> Tuple['VideoCorpus', 'VideoCorpus']:
        """Last `holdout` clips become the held-out set"""
        if not 0 < holdout < len(self.records):
            raise DatasetError(f"cannot hold out {holdout} of {len(self.records)} clips")
        return (VideoCorpus(self.root, self.records[:-holdout], self.cache),
                VideoCorpus(self.root, self.records[-holdout:], self.cache))

    def load_clip(self, record: ClipRecord) -> np.ndarray:
        """All native frames of a clip as (N,H,W,3) uint8"""
        if record.clip_id in self._clips:
            return self._clips[record.clip_id]
        frame_dir = self.root / record.frame_dir
        frames = []
        for i in range(record.native_length):
            path = frame_dir / f"frame_{i:04d}.png"
            try:
                with Image.open(path) as image:
                    frames.append(np.asarray(image.convert('RGB')))
            except OSError as e:
                raise DatasetError(f"cannot read frame {path}: {e}") from e
        clip = np.stack(frames)
        if self.cache:
            self._clips[record.clip_id] = clip
        return clip

    def frames(self, record: ClipRecord, indices: Sequence[int]) -> torch.Tensor:
        """Selected frames of a clip as (len(indices),3,H,W) in [-1, 1]"""
        clip = self.load_clip(record)[list(indices)].astype(np.float32)
        return torch.from_numpy(clip / 127.5 - 1.0).permute(0, 3, 1, 2).contiguous()

    def sample_batch(self, kind: str, batch: int, rng: np.random.Generator,
                     L: int = 16, stride_set: Sequence[int] = DEFAULT_STRIDES) -> TrainBatch:
        """
        Draw a training batch

        Args:
            kind: 'frames' (single frames, uniform over clip and frame) or 'clips'
            batch: Batch size
            rng: Stage-scoped random generator
            L: Clip length for kind 'clips'
            stride_set: Candidate frame strides

        Returns:
            TrainBatch
        """
        if kind not in BATCH_KINDS:
            raise StageError(f"unknown batch kind '{kind}'")
        videos, captions = [], []
        for _ in range(batch):
            record = self.records[rng.integers(len(self.records))]
            if kind == 'frames':
                videos.append(self.frames(record, [int(rng.integers(record.native_length))]))
            else:
                videos.append(sample_clip(record, L, stride_set, rng, corpus=self).frames)
            captions.append(record.caption)
        return TrainBatch(frames=torch.stack(videos), captions=captions, kind=kind)

    def frame_dataset(self) -> 'FrameDataset':
        return FrameDataset(self)


class FrameDataset(Dataset):
    """Every frame of every clip as (frame, caption) pairs, for codec training"""

    def __init__(self, corpus: VideoCorpus):
        self.corpus = corpus
        self.index = [(r, i) for r in corpus.records for i in range(r.native_length)]

    def __len__(self):
        return len(self.index)

    def __getitem__(self, item):
        record, frame = self.index[item]
        return self.corpus.frames(record, [frame])[0], record.caption


def sample_clip(record: ClipRecord,
                L: int,
                stride_set: Sequence[int],
                rng: np.random.Generator,
                corpus: Optional[VideoCorpus] = None,
                corpus_dir=None) -> StrideSample:
    """
    Draw an L-frame clip with a random feasible frame stride

    Args:
        record: Clip to sample from
        L: Number of frames to return
        stride_set: Candidate strides, e.g. {1..6}
        rng: Random generator
        corpus: Corpus (and cache) the record belongs to
        corpus_dir: Corpus root, used when no corpus is given

    Returns:
        StrideSample: frames[i] is source frame start + i * stride
    """
    if corpus is None:
        if corpus_dir is None:
            raise DatasetError("sample_clip needs a corpus or a corpus directory")
        corpus = VideoCorpus(corpus_dir, records=[record], cache=False)
    stride, start = draw_stride(record.native_length, L, stride_set, rng)
    indices = [start + i * stride for i in range(L)]
    return StrideSample(frames=corpus.frames(record, indices), stride=stride, start=start)


def save_video_frames(video: torch.Tensor, out_dir) -> List[Path]:
    """Write an (L,3,H,W) video as frame_%04d.png files"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(video):
        path = out_dir / f"frame_{i:04d}.png"
        tensor_to_image(frame).save(path, format='PNG')
        paths.append(path)
    return paths


def load_video_frames(frame_dir) -> torch.Tensor:
    """Read frame_%04d.png files of a directory back into an (L,3,H,W) video"""
    paths = sorted(Path(frame_dir).glob('frame_*.png'))
    if not paths:
        raise DatasetError(f"no frame_*.png files in {frame_dir}")
    return torch.stack([load_image(p) for p in paths])


def save_gif(video: torch.Tensor, path, fps: int = 8) -> Path:
    """Looping GIF preview of an (L,3,H,W) video"""
    frames = [tensor_to_image(frame) for frame in video]
    path = Path(path)
    frames[0].save(path, format='GIF', save_all=True, append_images=frames[1:],
                   duration=max(1, round(1000 / fps)), loop=0)
    return path
