"""Voxel saliency for the decoder: |d SSIM / d voxel| summed over reconstructions."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .fmri import count_for_fraction
from .formats import dump_json
from .objectives import ssim_batch

DEFAULT_TOP_FRACTION = 0.20


@dataclass
class SaliencyResult:
    per_voxel_score: np.ndarray
    top_fraction: float
    top_mask: np.ndarray
    region_rows: list
    voxel_ids: list = field(default_factory=list)
    region_labels: list = field(default_factory=list)


def per_sample_gradients(decoder, voxels, targets, batch_size: int = 32) -> np.ndarray:
    """[N, V] gradients of SSIM(target_n, decoder(voxels_n)) w.r.t. voxels_n.

    The decoder runs in eval mode and float64, so samples do not interact
    and a batched backward of the summed SSIM yields per-sample gradients.
    """
    voxels = torch.as_tensor(voxels)
    targets = torch.as_tensor(targets)
    if voxels.dim() != 2 or targets.dim() != 4 or voxels.shape[0] != targets.shape[0]:
        raise ValueError(f"need voxels [N, V] and targets [N, 3, H, W] with equal N, "
                         f"got {tuple(voxels.shape)} and {tuple(targets.shape)}")
    if voxels.shape[1] != decoder.spec.n_voxels:
        raise ValueError(f"decoder expects {decoder.spec.n_voxels} voxels, got {voxels.shape[1]}")
    dec = copy.deepcopy(decoder).double().eval()
    for p in dec.parameters():
        p.requires_grad_(False)
    grads = []
    for i in range(0, voxels.shape[0], batch_size):
        v = voxels[i:i + batch_size].double().clone().requires_grad_(True)
        f = targets[i:i + batch_size].double()
        s = ssim_batch(f, dec(v)).sum()
        (g,) = torch.autograd.grad(s, v)
        grads.append(g)
    return torch.cat(grads).numpy()


def compute_saliency(decoder, voxels, targets, batch_size: int = 32) -> np.ndarray:
    """score_j = sum_n |d SSIM_n / d v_nj|, reduced with math.fsum (order-free, exact rounding)."""
    g = np.abs(per_sample_gradients(decoder, voxels, targets, batch_size))
    return np.array([math.fsum(col) for col in g.T])


def top_fraction_mask(scores, fraction: float = DEFAULT_TOP_FRACTION) -> np.ndarray:
    """True for the ceil(fraction * V) largest scores; ties go to the lower voxel id."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("empty score vector")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = count_for_fraction(scores.size, fraction, rounding="ceil")
    order = np.lexsort((np.arange(scores.size), -scores))
    mask = np.zeros(scores.size, dtype=bool)
    mask[order[:k]] = True
    return mask


def region_contributions(top_mask, region_labels) -> list:
    """Per region: voxel count A, selected count B, A and B shares and B/A, in percent.

    Regions are listed in order of first appearance.
    """
    top_mask = np.asarray(top_mask, dtype=bool)
    labels = list(region_labels)
    if len(labels) != top_mask.size:
        raise ValueError(f"{len(labels)} region labels for {top_mask.size} voxels")
    if any(lab is None or lab == "" for lab in labels):
        raise ValueError("missing region label")
    regions = list(dict.fromkeys(labels))
    total_a = len(labels)
    total_b = int(top_mask.sum())
    rows = []
    for r in regions:
        idx = [i for i, lab in enumerate(labels) if lab == r]
        a = len(idx)
        b = int(top_mask[idx].sum())
        rows.append({"region": r, "A": a, "B": b,
                     "A_ratio": 100.0 * a / total_a,
                     "B_ratio": 100.0 * b / total_b if total_b else 0.0,
                     "B_over_A": 100.0 * b / a})
    return rows


def run_saliency(decoder, voxels, targets, region_labels, voxel_ids=None,
                 fraction: float = DEFAULT_TOP_FRACTION) -> SaliencyResult:
    scores = compute_saliency(decoder, voxels, targets)
    mask = top_fraction_mask(scores, fraction)
    ids = list(range(scores.size)) if voxel_ids is None else [int(v) for v in voxel_ids]
    return SaliencyResult(scores, fraction, mask, region_contributions(mask, region_labels),
                          ids, list(region_labels))


def write_saliency(result: SaliencyResult, out_dir) -> None:
    """saliency.csv, regions.csv (region table) and saliency.json (voxel id -> score)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "saliency.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voxel_id", "region", "score", "selected"])
        for vid, reg, s, sel in zip(result.voxel_ids, result.region_labels,
                                    result.per_voxel_score, result.top_mask):
            w.writerow([vid, reg, repr(float(s)), int(sel)])
    with open(out_dir / "regions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "A", "B", "A_ratio_pct", "B_ratio_pct", "B_over_A_pct"])
        for r in result.region_rows:
            w.writerow([r["region"], r["A"], r["B"], f"{r['A_ratio']:.1f}",
                        f"{r['B_ratio']:.1f}", f"{r['B_over_A']:.1f}"])
    dump_json({"top_fraction": result.top_fraction,
               "scores": {str(v): float(s) for v, s in zip(result.voxel_ids, result.per_voxel_score)}},
              out_dir / "saliency.json")
