"""Synthetic paired movie / BOLD data from a known Gabor-energy response model.

Voxels respond linearly to the magnitudes of a bank of Gabor filters applied
to each chunk's target frame; the response is convolved with an HRF, mixed
with Gaussian noise and z-scored. Because the generating model is known,
encoder, decoder and saliency behaviour can be checked in closed loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import gamma as gamma_dist

from .fmri import VoxelMask, movie_seed, zscore_voxels
from .stimulus import FRAMES_PER_TR, TARGET_INDEX, TargetFrame, chunk_movie

# cycles per image of both the feature bank and the rendered gratings
GRATING_CYCLES = (4.0, 7.0)
GRATING_PROB = 0.65
# segment length range in TRs; short segments keep the content mix of a
# 300-chunk movie close to the generator prior
SEG_TRS = (2, 6)
REGION_NAMES = (
    "Calcarine", "Occipital_Mid", "Fusiform", "Lingual",
    "Occipital_Sup", "Occipital_Inf", "Temporal", "Other",
)


@dataclass(frozen=True)
class Gabor:
    orientation: float  # radians
    frequency: float  # cycles per pixel
    phase: float  # radians
    center_x: float
    center_y: float
    sigma: float  # envelope, pixels


@dataclass
class SynthGroundTruth:
    gabor_bank: list
    weights: np.ndarray  # [V, F]
    hrf_kernel: np.ndarray
    noise_sigma: float
    region_of_voxel: list
    size: int
    feature_mean: np.ndarray = None  # [F]; standardizes features before weighting
    feature_std: np.ndarray = None
    informative: np.ndarray = None  # [V] bool
    tr_seconds: float = 1.3
    _kernels: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.hrf_kernel = np.asarray(self.hrf_kernel, dtype=np.float64)
        if abs(self.hrf_kernel.sum() - 1.0) > 1e-9:
            raise ValueError("hrf_kernel must sum to 1")
        if self.weights.shape[1] != len(self.gabor_bank):
            raise ValueError("weights must have one column per Gabor filter")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")
        n_feat = len(self.gabor_bank)
        if self.feature_mean is None:
            self.feature_mean = np.zeros(n_feat)
        if self.feature_std is None:
            self.feature_std = np.ones(n_feat)
        if self.informative is None:
            self.informative = np.any(self.weights != 0, axis=1)

    @property
    def kernels(self) -> np.ndarray:
        if self._kernels is None:
            self._kernels = gabor_kernels(self.gabor_bank, self.size, self.size)
        return self._kernels

    @property
    def n_voxels(self) -> int:
        return self.weights.shape[0]


# ---------------------------------------------------------------------------
# Gabor features


def default_gabor_bank(n_features: int, size: int) -> list:
    """Structured bank: 4 orientations x 2 frequencies x 2 phases per center.

    Banks larger than 16 add off-center copies; smaller banks truncate.
    """
    orientations = [k * math.pi / 4 for k in range(4)]
    freqs = [c / size for c in GRATING_CYCLES]
    phases = [0.0, math.pi / 2]
    c = (size - 1) / 2.0
    q = size / 4.0
    centers = [(c, c), (c - q, c - q), (c + q, c - q), (c - q, c + q), (c + q, c + q)]
    bank = []
    for cx, cy in centers:
        sigma = size / 5.0 if (cx, cy) == (c, c) else size / 8.0
        for ph in phases:
            for fr in freqs:
                for th in orientations:
                    bank.append(Gabor(th, fr, ph, cx, cy, sigma))
                    if len(bank) == n_features:
                        return bank
    while len(bank) < n_features:
        g = bank[len(bank) % 80]
        bank.append(Gabor(g.orientation + math.pi / 8, g.frequency, g.phase,
                          g.center_x, g.center_y, g.sigma))
    return bank


def gabor_kernel(g: Gabor, height: int, width: int) -> np.ndarray:
    """Zero-mean, unit-norm Gabor kernel [H, W]."""
    y, x = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = x - g.center_x, y - g.center_y
    along = dx * math.cos(g.orientation) + dy * math.sin(g.orientation)
    env = np.exp(-(dx**2 + dy**2) / (2 * g.sigma**2))
    k = env * np.cos(2 * math.pi * g.frequency * along + g.phase)
    k = k - k.mean()
    return k / np.linalg.norm(k)


def gabor_kernels(bank, height: int, width: int) -> np.ndarray:
    return np.stack([gabor_kernel(g, height, width) for g in bank])


def grayscale(pixels) -> np.ndarray:
    """Mean over RGB of a [3, H, W] (or [N, 3, H, W]) array."""
    arr = pixels.detach().cpu().numpy() if isinstance(pixels, torch.Tensor) else np.asarray(pixels)
    return arr.astype(np.float64).mean(axis=-3)


def gabor_features(frame, bank=None, kernels=None) -> np.ndarray:
    """|<grayscale(frame), gabor_f>| for every filter; frame is a TargetFrame or [3, H, W]."""
    pixels = frame.pixels if isinstance(frame, TargetFrame) else frame
    gray = grayscale(pixels)
    if kernels is None:
        kernels = gabor_kernels(bank, *gray.shape[-2:])
    return np.abs(np.tensordot(gray, kernels, axes=([-2, -1], [-2, -1])))


# ---------------------------------------------------------------------------
# hemodynamics


def double_gamma_hrf(tr_seconds: float = 1.3, duration: float = 20.0,
                     peak: float = 6.0, undershoot: float = 16.0, ratio: float = 1 / 6.0) -> np.ndarray:
    """Canonical double-gamma HRF sampled every TR up to ``duration`` seconds, unit sum.

    With the default shape parameters the response peaks near 5 s and the
    undershoot bottoms out near 15 s.
    """
    t = np.arange(0.0, duration + 1e-9, tr_seconds)
    h = gamma_dist.pdf(t, peak) - ratio * gamma_dist.pdf(t, undershoot)
    return h / h.sum()


def delay_hrf(delay_tr: int) -> np.ndarray:
    """Pure delay kernel: the response at t equals the drive at t - delay_tr."""
    h = np.zeros(delay_tr + 1)
    h[delay_tr] = 1.0
    return h


def causal_convolve(signal, kernel) -> np.ndarray:
    """out[t] = sum_k kernel[k] * signal[t - k] with zero history; [T, V] columns."""
    signal = np.asarray(signal, dtype=np.float64)
    out = np.zeros_like(signal)
    for k, w in enumerate(kernel):
        if w == 0.0 or k >= signal.shape[0]:
            continue
        out[k:] += w * signal[: signal.shape[0] - k]
    return out


# ---------------------------------------------------------------------------
# BOLD synthesis


def _frames_of(chunks):
    if isinstance(chunks, torch.Tensor):
        return chunks[:, TARGET_INDEX]
    return torch.stack([c.frames[c.target_frame_index] for c in chunks])


def chunk_features(chunks, gt: SynthGroundTruth) -> np.ndarray:
    """Raw Gabor magnitudes of every chunk's target frame, [T, F]."""
    return gabor_features(_frames_of(chunks), kernels=gt.kernels)


def clean_signal(chunks, gt: SynthGroundTruth) -> np.ndarray:
    """Noise-free hemodynamic response [T, V] (before z-scoring)."""
    feats = (chunk_features(chunks, gt) - gt.feature_mean) / gt.feature_std
    drive = feats @ gt.weights.T
    return causal_convolve(drive, gt.hrf_kernel)


def synth_bold(chunks, gt: SynthGroundTruth, seed: int) -> np.ndarray:
    """Features -> linear voxel map -> HRF -> Gaussian noise -> per-voxel z-score."""
    if len(chunks) < 1:
        raise ValueError("need at least one chunk")
    sig = clean_signal(chunks, gt)
    rng = np.random.default_rng(seed)
    noisy = sig + gt.noise_sigma * rng.standard_normal(sig.shape)
    if noisy.shape[0] == 1:
        # a single TR has no temporal variance: constant-column rule
        return np.zeros_like(noisy)
    return zscore_voxels(noisy)


def synth_subject_stack(chunks, gt: SynthGroundTruth, n_subjects: int, seed: int,
                        baseline: float = 100.0, baseline_spread: float = 1.0) -> np.ndarray:
    """Per-subject raw series [S, T, V].

    Each subject sees the shared clean response plus independent noise with
    std ``noise_sigma * sqrt(S)`` (so the group mean carries ``noise_sigma``)
    on top of a subject- and voxel-specific baseline.
    """
    sig = clean_signal(chunks, gt)
    rng = np.random.default_rng(seed)
    sd = gt.noise_sigma * math.sqrt(n_subjects)
    out = np.empty((n_subjects,) + sig.shape)
    for s in range(n_subjects):
        offset = baseline + baseline_spread * rng.standard_normal(sig.shape[1])
        out[s] = offset + sig + sd * rng.standard_normal(sig.shape)
    return out


# ---------------------------------------------------------------------------
# stimuli


def _grating_segment(rng, n_frames: int, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    # orientation near one of the bank's four, frequency one of the bank's two,
    # so the feature space pins down the grating
    theta0 = int(rng.integers(4)) * math.pi / 4 + rng.uniform(-math.pi / 16, math.pi / 16)
    spin = rng.uniform(-0.15, 0.15) / FRAMES_PER_TR  # rad per frame
    freq = float(rng.choice(GRATING_CYCLES)) / size
    drift = rng.uniform(-math.pi / 40, math.pi / 40)  # phase per frame
    phase0 = rng.uniform(0, 2 * math.pi)
    contrast = rng.uniform(0.4, 1.0)
    tint = rng.uniform(0.6, 1.0, size=3)
    frames = np.empty((n_frames, 3, size, size))
    for i in range(n_frames):
        th = theta0 + spin * i
        along = xx * math.cos(th) + yy * math.sin(th)
        g = np.cos(2 * math.pi * freq * along + phase0 + drift * i)
        frames[i] = 0.5 + 0.5 * contrast * tint[:, None, None] * g[None]
    return frames


def _blob_segment(rng, n_frames: int, size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_blobs = rng.integers(2, 6)
    centers = rng.uniform(0, size, size=(n_blobs, 2))
    velocity = rng.uniform(-0.15, 0.15, size=(n_blobs, 2))
    radii = rng.uniform(size / 10, size / 4, size=n_blobs)
    # bright objects on a darker ground: magnitude features cannot see polarity,
    # so an inversion-symmetric stimulus prior would leave nothing to decode
    colors = rng.uniform(0.15, 0.55, size=(n_blobs, 3))
    background = rng.uniform(0.1, 0.4, size=3)
    frames = np.empty((n_frames, 3, size, size))
    for i in range(n_frames):
        img = np.broadcast_to(background[:, None, None], (3, size, size)).copy()
        for b in range(n_blobs):
            cx, cy = centers[b] + velocity[b] * i
            env = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radii[b] ** 2))
            img += colors[b][:, None, None] * env[None]
        frames[i] = img
    return frames


def render_movie(n_chunks: int, size: int, seed: int) -> torch.Tensor:
    """Drifting/rotating gratings interleaved with moving colour blobs.

    Returns float32 [n_chunks * 32, 3, size, size] quantized to 8-bit levels
    so that a round trip through image files is lossless.
    """
    rng = np.random.default_rng(seed)
    total = n_chunks * FRAMES_PER_TR
    parts = []
    made = 0
    while made < total:
        seg_len = int(rng.integers(SEG_TRS[0], SEG_TRS[1] + 1)) * FRAMES_PER_TR
        seg_len = min(seg_len, total - made)
        if rng.random() < GRATING_PROB:
            parts.append(_grating_segment(rng, seg_len, size))
        else:
            parts.append(_blob_segment(rng, seg_len, size))
        made += seg_len
    frames = np.clip(np.concatenate(parts), 0.0, 1.0)
    q = np.rint(frames * 255.0).astype(np.uint8)
    return torch.from_numpy(q).float() / 255.0


def region_blocks(n_voxels: int, n_regions: int) -> list:
    """Contiguous block labels, one atlas-like region name per block."""
    names = [REGION_NAMES[i] if i < len(REGION_NAMES) else f"Region_{i}" for i in range(n_regions)]
    labels = []
    for i, block in enumerate(np.array_split(np.arange(n_voxels), n_regions)):
        labels += [names[i]] * len(block)
    return labels


@dataclass
class SynthDataset:
    movies: dict  # movie_id -> frames [N * 32, 3, H, W]
    bold: dict  # movie_id -> [N, V] z-scored BOLD
    truth: SynthGroundTruth
    mask: VoxelMask

    def chunks(self, movie_id: str) -> list:
        return chunk_movie(self.movies[movie_id], movie_id)

    def chunk_tensor(self, movie_id: str) -> torch.Tensor:
        f = self.movies[movie_id]
        return f.view(-1, FRAMES_PER_TR, *f.shape[1:])


def movie_ids(n_movies: int) -> list:
    return [f"movie{i:02d}" for i in range(n_movies)]


def make_synth_dataset(n_movies: int, chunks_per_movie: int, n_voxels: int, n_features: int,
                       size: int, seed: int, noise_sigma: float = 0.5, hrf="double_gamma",
                       tr_seconds: float = 1.3, n_regions: int = 4,
                       informative_fraction: float = 1.0) -> SynthDataset:
    """Generate movies, ground truth, group BOLD and an atlas-labelled voxel mask.

    ``hrf`` is ``"double_gamma"``, ``"delay<k>"`` (pure k-TR delay) or an
    explicit unit-sum kernel. Weights are scaled so every informative voxel's
    feature drive has unit variance over the whole dataset; ``noise_sigma``
    is therefore the noise std relative to the drive std. With
    ``informative_fraction < 1`` a random subset of voxels gets zero weights
    and carries noise only.
    """
    for name, val in (("n_movies", n_movies), ("chunks_per_movie", chunks_per_movie),
                      ("n_voxels", n_voxels), ("n_features", n_features), ("size", size)):
        if val < 1:
            raise ValueError(f"{name} must be positive")
    rng = np.random.default_rng(seed)
    ids = movie_ids(n_movies)
    movies = {m: render_movie(chunks_per_movie, size, movie_seed(seed, m)) for m in ids}

    if isinstance(hrf, str):
        if hrf == "double_gamma":
            kernel = double_gamma_hrf(tr_seconds)
        elif hrf.startswith("delay"):
            kernel = delay_hrf(int(hrf[5:]))
        else:
            raise ValueError(f"unknown hrf {hrf!r}")
    else:
        kernel = np.asarray(hrf, dtype=np.float64)

    bank = default_gabor_bank(n_features, size)
    kernels = gabor_kernels(bank, size, size)
    feats = np.concatenate([
        gabor_features(movies[m][TARGET_INDEX::FRAMES_PER_TR], kernels=kernels) for m in ids])
    f_mean = feats.mean(axis=0)
    f_std = feats.std(axis=0)
    f_std[f_std == 0] = 1.0
    z = (feats - f_mean) / f_std
    cov = np.cov(z, rowvar=False, ddof=0).reshape(n_features, n_features)

    weights = rng.standard_normal((n_voxels, n_features))
    n_inf = int(round(informative_fraction * n_voxels))
    informative = np.zeros(n_voxels, dtype=bool)
    informative[rng.permutation(n_voxels)[:n_inf]] = True
    for v in range(n_voxels):
        if not informative[v]:
            weights[v] = 0.0
            continue
        var = float(weights[v] @ cov @ weights[v])
        weights[v] /= math.sqrt(var) if var > 0 else 1.0

    gt = SynthGroundTruth(bank, weights, kernel, noise_sigma, region_blocks(n_voxels, n_regions),
                          size, f_mean, f_std, informative, tr_seconds, kernels)
    bold = {m: synth_bold(movies[m].view(-1, FRAMES_PER_TR, 3, size, size), gt,
                          movie_seed(seed + 1, m))
            for m in ids}
    snr = np.where(informative, 1.0 / max(noise_sigma, 1e-12) ** 2, 0.0)
    mask = VoxelMask(list(range(n_voxels)), list(gt.region_of_voxel), [True] * n_voxels, snr.tolist())
    return SynthDataset(movies, bold, gt, mask)
