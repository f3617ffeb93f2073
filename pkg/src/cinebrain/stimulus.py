"""Movie frame resampling, chunking into TR-aligned clips and decoder targets."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

FRAMES_PER_TR = 32
DEFAULT_TR = 1.3
DEFAULT_SIZE = 112
TARGET_INDEX = 16  # 0-based middle of a 32-frame chunk


@dataclass(frozen=True)
class VideoChunk:
    movie_id: str
    chunk_index: int
    frames: torch.Tensor  # [32, 3, H, W], values in [0, 1]
    target_frame_index: int = TARGET_INDEX

    def __post_init__(self):
        if self.frames.dim() != 4 or self.frames.shape[0] != FRAMES_PER_TR or self.frames.shape[1] != 3:
            raise ValueError(f"chunk frames must be [32, 3, H, W], got {tuple(self.frames.shape)}")
        if not 0 <= self.target_frame_index < FRAMES_PER_TR:
            raise ValueError("target_frame_index must lie in [0, 31]")


@dataclass(frozen=True)
class TargetFrame:
    pixels: torch.Tensor  # [3, H, W]


def _center_crop_square(frames):
    h, w = frames.shape[-2:]
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return frames[..., top:top + side, left:left + side]


def resize_frames(frames, height: int = DEFAULT_SIZE, width: int = DEFAULT_SIZE):
    """Center-crop to a square, then bilinearly scale to ``height x width``."""
    if tuple(frames.shape[-2:]) == (height, width):
        return frames
    sq = _center_crop_square(frames)
    if tuple(sq.shape[-2:]) == (height, width):
        return sq.contiguous()
    src = sq if sq.is_floating_point() else sq.float()
    out = F.interpolate(src, size=(height, width), mode="bilinear", align_corners=False,
                        antialias=sq.shape[-1] > width)
    return out.clamp(0.0, 1.0).to(frames.dtype)


def temporal_indices(n_raw: int, fps: float, tr_seconds: float) -> np.ndarray:
    """Source index for every output frame under nearest-neighbor resampling.

    Output frame k sits at time k * tr / 32; its source is the raw frame
    nearest to that instant. Only whole TRs are kept.
    """
    if n_raw < 1:
        raise ValueError("movie has no frames")
    if fps <= 0 or tr_seconds <= 0:
        raise ValueError("fps and tr_seconds must be positive")
    raw_per_tr = fps * tr_seconds
    n_tr = int(math.floor(n_raw / raw_per_tr + 1e-9))
    k = np.arange(n_tr * FRAMES_PER_TR, dtype=np.float64)
    src = np.floor(k * raw_per_tr / FRAMES_PER_TR + 0.5).astype(np.int64)
    return np.minimum(src, n_raw - 1)


def resample_movie(frames, fps: float, tr_seconds: float = DEFAULT_TR,
                   height: int = DEFAULT_SIZE, width: int = DEFAULT_SIZE):
    """[T_raw, 3, H_raw, W_raw] in [0, 1] -> [N * 32, 3, height, width].

    A trailing partial TR is dropped. Returns an empty leading axis if the
    movie is shorter than one TR.
    """
    if frames.dim() != 4 or frames.shape[1] != 3:
        raise ValueError(f"expected [T, 3, H, W] frames, got {tuple(frames.shape)}")
    idx = temporal_indices(frames.shape[0], fps, tr_seconds)
    picked = frames[torch.from_numpy(idx)]
    return resize_frames(picked, height, width)


def chunk_movie(frames, movie_id: str, target_frame_index: int = TARGET_INDEX) -> list:
    """Split [N * 32, 3, H, W] frames into N consecutive VideoChunks."""
    n = frames.shape[0]
    if n % FRAMES_PER_TR:
        raise ValueError(f"frame count {n} is not a multiple of {FRAMES_PER_TR}")
    return [VideoChunk(movie_id, i, frames[i * FRAMES_PER_TR:(i + 1) * FRAMES_PER_TR],
                       target_frame_index)
            for i in range(n // FRAMES_PER_TR)]


def extract_target(chunk: VideoChunk) -> TargetFrame:
    return TargetFrame(chunk.frames[chunk.target_frame_index])


def stack_chunks(chunks) -> torch.Tensor:
    """List of VideoChunks -> [N, 32, 3, H, W]."""
    return torch.stack([c.frames for c in chunks])


def uint8_to_unit(frames) -> torch.Tensor:
    """8-bit images [T, H, W, 3] (numpy or tensor) -> float32 [T, 3, H, W] in [0, 1]."""
    arr = torch.as_tensor(np.asarray(frames))
    if arr.dtype != torch.uint8:
        raise TypeError(f"expected uint8 frames, got {arr.dtype}")
    return arr.permute(0, 3, 1, 2).float() / 255.0
