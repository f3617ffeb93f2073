"""fMRI normalization, hemodynamic alignment, SNR voxel selection and data splits."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DELAY_TR = 4
DEFAULT_SNR_FRACTION = 0.30
DEFAULT_TRAIN_FRAC = 0.8
DEFAULT_RATIO = (4, 1)

# float slack when turning fraction * count into an integer count
_COUNT_SLACK = 1e-9


@dataclass
class SubjectStack:
    data: np.ndarray  # [S, T, V]
    tr_seconds: float = 1.3

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"subject stack must be [S, T, V], got {self.data.shape}")
        s, t, v = self.data.shape
        if s < 1 or t < 2 or v < 1:
            raise ValueError(f"need S >= 1, T >= 2, V >= 1; got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("subject stack contains non-finite values")


@dataclass
class VoxelSeries:
    data: np.ndarray  # [T, V]
    movie_id: str
    delay_applied_tr: int = 0


@dataclass
class VoxelMask:
    voxel_ids: list
    region_label: list
    selected: list
    snr: list

    def __post_init__(self):
        n = len(self.voxel_ids)
        if not (len(self.region_label) == len(self.selected) == len(self.snr) == n):
            raise ValueError("mask fields must all have one entry per voxel")

    @property
    def selected_ids(self) -> list:
        return [v for v, s in zip(self.voxel_ids, self.selected) if s]

    @property
    def selected_regions(self) -> list:
        return [r for r, s in zip(self.region_label, self.selected) if s]

    def to_dict(self) -> dict:
        return {
            "voxel_ids": [int(v) for v in self.voxel_ids],
            "region_labels": list(self.region_label),
            "snr": [_json_float(x) for x in self.snr],
            "selected": [bool(s) for s in self.selected],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelMask":
        snr = [math.inf if x == "inf" else float(x) for x in d["snr"]]
        return cls(list(d["voxel_ids"]), list(d["region_labels"]), list(d["selected"]), snr)


def _json_float(x):
    return "inf" if math.isinf(x) else float(x)


@dataclass
class SplitPlan:
    train: dict = field(default_factory=dict)  # movie -> list of chunk indices
    val: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    held_out_movie_id: str = ""

    def to_dict(self) -> dict:
        return {"held_out_movie_id": self.held_out_movie_id,
                "train": self.train, "val": self.val, "test": self.test}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        conv = lambda m: {k: [int(i) for i in v] for k, v in m.items()}  # noqa: E731
        return cls(conv(d["train"]), conv(d["val"]), conv(d["test"]), d["held_out_movie_id"])

    def movies(self) -> list:
        return list(self.test)


def zscore_voxels(data) -> np.ndarray:
    """Remove each column's temporal mean and divide by its sample (ddof=1) std.

    Constant columns become all-zero.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError(f"need [T, V] with T >= 2, got {data.shape}")
    mean = data.mean(axis=0)
    centered = data - mean
    std = centered.std(axis=0, ddof=1)
    out = np.zeros_like(centered)
    ok = std > 0
    out[:, ok] = centered[:, ok] / std[ok]
    return out


def align_delay(fmri, n_chunks: int, delay_tr: int = DEFAULT_DELAY_TR) -> np.ndarray:
    """Row i of the result is fMRI row i + delay_tr, paired with stimulus chunk i."""
    fmri = np.asarray(fmri)
    if delay_tr < 0:
        raise ValueError("delay_tr must be >= 0")
    if fmri.shape[0] < n_chunks + delay_tr:
        raise ValueError(f"need at least {n_chunks + delay_tr} TRs for {n_chunks} chunks "
                         f"with delay {delay_tr}, have {fmri.shape[0]}")
    return fmri[delay_tr:delay_tr + n_chunks]


def compute_snr(stack: SubjectStack) -> np.ndarray:
    """Per-voxel signal-to-noise ratio across subjects.

    signal variance: variance over time of the subject-mean time course;
    noise variance: variance over subjects of each subject's temporal mean.
    Both use ddof=1. Zero noise variance gives +inf.
    """
    data = stack.data
    s, t, _ = data.shape
    if s < 2 or t < 2:
        raise ValueError(f"SNR needs at least 2 subjects and 2 TRs, got S={s}, T={t}")
    signal_var = data.mean(axis=0).var(axis=0, ddof=1)
    noise_var = data.mean(axis=1).var(axis=0, ddof=1)
    snr = np.full(signal_var.shape, np.inf)
    ok = noise_var > 0
    snr[ok] = signal_var[ok] / noise_var[ok]
    return snr


def count_for_fraction(n: int, fraction: float, rounding: str = "floor") -> int:
    x = fraction * n
    if rounding == "floor":
        return int(math.floor(x + _COUNT_SLACK))
    return int(math.ceil(x - _COUNT_SLACK))


def select_top_fraction(snr, fraction: float = DEFAULT_SNR_FRACTION) -> np.ndarray:
    """Boolean mask of the floor(fraction * V) highest-SNR voxels (possibly none).

    Ties go to the lower voxel index; +inf ranks above every finite value.
    """
    snr = np.asarray(snr, dtype=np.float64)
    if snr.size == 0:
        raise ValueError("empty SNR vector")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = count_for_fraction(snr.size, fraction)
    order = np.lexsort((np.arange(snr.size), -snr))
    mask = np.zeros(snr.size, dtype=bool)
    mask[order[:k]] = True
    return mask


def build_mask(snr, region_labels, fraction: float = DEFAULT_SNR_FRACTION,
               voxel_ids=None) -> VoxelMask:
    snr = np.asarray(snr, dtype=np.float64)
    ids = list(range(snr.size)) if voxel_ids is None else list(voxel_ids)
    sel = select_top_fraction(snr, fraction)
    return VoxelMask(ids, list(region_labels), sel.tolist(), snr.tolist())


def average_subjects(stack: SubjectStack) -> np.ndarray:
    return stack.data.mean(axis=0)


def movie_seed(seed: int, movie_id: str) -> int:
    """Seed derived from (seed, movie_id) so per-movie work can run in any order."""
    h = hashlib.sha256(f"{seed}:{movie_id}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def make_split(movie_chunk_counts: dict, held_out: str, train_frac: float = DEFAULT_TRAIN_FRAC,
               train_val_ratio=DEFAULT_RATIO, seed: int = 0) -> SplitPlan:
    """Temporal train/val/test split.

    For every movie except ``held_out`` the first floor(train_frac * N)
    chunks are randomly assigned to train and validation at the given ratio
    (validation count rounded down); the remaining chunks are test. The held
    out movie is test in full.
    """
    if held_out not in movie_chunk_counts:
        raise KeyError(f"held-out movie {held_out!r} not among {sorted(movie_chunk_counts)}")
    r_train, r_val = train_val_ratio
    plan = SplitPlan(held_out_movie_id=held_out)
    for movie, n in movie_chunk_counts.items():
        n = int(n)
        if movie == held_out:
            plan.train[movie], plan.val[movie], plan.test[movie] = [], [], list(range(n))
            continue
        if n < 5:
            raise ValueError(f"movie {movie!r} has {n} chunks; need at least 5 to split")
        n_tv = count_for_fraction(n, train_frac)
        n_val = (n_tv * r_val) // (r_train + r_val)
        rng = np.random.default_rng(movie_seed(seed, movie))
        perm = rng.permutation(n_tv)
        plan.val[movie] = sorted(int(i) for i in perm[:n_val])
        plan.train[movie] = sorted(int(i) for i in perm[n_val:])
        plan.test[movie] = list(range(n_tv, n))
    return plan


def preprocess_group(stacks: dict, n_chunks: dict, region_labels, fraction: float = DEFAULT_SNR_FRACTION,
                     delay_tr: int = DEFAULT_DELAY_TR, voxel_ids=None):
    """Full fMRI path for a group of subjects watching several movies.

    ``stacks`` maps movie -> SubjectStack; ``n_chunks`` maps movie -> number of
    stimulus chunks. SNR is computed once on the time-concatenated raw data,
    the top fraction is kept, each subject is z-scored per movie, subjects are
    averaged, the average is delay-aligned and z-scored again.
    Returns ``(mask, {movie: VoxelSeries})``.
    """
    movies = list(stacks)
    if not movies:
        raise ValueError("no movies given")
    concat = SubjectStack(np.concatenate([stacks[m].data for m in movies], axis=1),
                          stacks[movies[0]].tr_seconds)
    mask = build_mask(compute_snr(concat), region_labels, fraction, voxel_ids)
    sel = np.asarray(mask.selected, dtype=bool)
    if not sel.any():
        raise ValueError(f"fraction {fraction} of {sel.size} voxels selects none")
    out = {}
    for m in movies:
        data = stacks[m].data[:, :, sel]
        per_subject = np.stack([zscore_voxels(d) for d in data])
        mean = per_subject.mean(axis=0)
        aligned = align_delay(mean, n_chunks[m], delay_tr)
        out[m] = VoxelSeries(zscore_voxels(aligned), m, delay_tr)
    return mask, out
