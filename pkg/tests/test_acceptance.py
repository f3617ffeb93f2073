"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import csv
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

import gradsuite
from acceptance_log import record
from cinebrain import formats
from cinebrain.cli import load_processed, run
from cinebrain.evaluate import load_eval
from cinebrain.fmri import build_mask, make_split, select_top_fraction
from cinebrain.objectives import (HyperConfig, loss_combined, loss_decoder, loss_encoder,
                                  random_pyramid, ssim_batch, tv_loss)
from cinebrain.saliency import compute_saliency, region_contributions, top_fraction_mask
from cinebrain.stats import cliffs_delta, mann_whitney_u, null_distribution
from cinebrain.synth import make_synth_dataset
from cinebrain.trainer import load_models, predict_voxels
from test_fmri import check_split, random_stack, snr_matches
from test_stats import brute_cliffs, brute_exact_p

DESK = {"schema_version": 1, "seed": 7, "mask": "full", "learning_rate": 0.002, "epochs": 30,
        "hrf": "delay4"}
SMALL = {"schema_version": 1, "seed": 3, "n_movies": 2, "chunks_per_movie": 30, "n_voxels": 20,
         "n_features": 8, "model": "tiny", "epochs": 2, "batch_size": 8, "learning_rate": 1e-3,
         "shuffles": 5, "extractor_width": 0.0625}


def pipeline(root, cfg, mode="end_to_end", saliency=False):
    """synth -> preprocess -> train -> eval (-> saliency) through the CLI; returns seconds."""
    root.mkdir(parents=True, exist_ok=True)
    path = root / "cfg.json"
    path.write_text(json.dumps(cfg))
    c = str(path)
    t0 = time.perf_counter()
    steps = [["synth", "--config", c, "--out", str(root / "raw")],
             ["preprocess", "--config", c, "--raw", str(root / "raw"), "--out", str(root / "proc")],
             ["train", "--config", c, "--data", str(root / "proc"), "--mode", mode,
              "--out", str(root / "run")],
             ["eval", "--config", c, "--run", str(root / "run"), "--data", str(root / "proc")]]
    if saliency:
        steps.append(["saliency", "--config", c, "--run", str(root / "run"),
                      "--data", str(root / "proc")])
    for argv in steps:
        assert run(argv) == 0, argv
    return time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    secs = pipeline(root, DESK)
    return root, secs, load_eval(root / "run" / "eval")


@pytest.fixture(scope="module")
def half_noise_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("halfnoise")
    pipeline(root, dict(DESK, informative_fraction=0.5), saliency=True)
    return root


# ---------------------------------------------------------------------------


def test_gradient_suite():
    t0 = time.perf_counter()
    errs = {name: gradsuite.run_case(name) for name in gradsuite.CASES}
    secs = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = all(e < gradsuite.TOL for e in errs.values()) and secs < 120
    record("gradient suite", ok,
           f"{len(errs)} cases, worst {worst} rel err {errs[worst]:.2e}, {secs:.0f} s")
    assert ok


def test_loss_identities():
    g = torch.Generator().manual_seed(0)
    v = torch.randn(4, 30, generator=g, dtype=torch.float64)
    f = torch.rand(3, 3, 32, 32, generator=g, dtype=torch.float64)
    ext = random_pyramid(0, 0.0625).double()
    const = torch.full((2, 3, 32, 32), 0.3, dtype=torch.float64)
    checks = {
        "L_E(v,v)=0": abs(loss_encoder(v, v)[0].item()) == 0.0,
        "SSIM(f,f)=1": bool(torch.all((ssim_batch(f, f) - 1).abs() <= 1e-9)),
        "TV(const)=0": tv_loss(const).item() == 0.0,
        "L_D(f,f)=delta*TV(f)": abs(loss_decoder(f, f, extractor=ext)[0].item()
                                    - 0.3 * tv_loss(f).item()) <= 1e-9,
    }
    vh = torch.randn(4, 30, generator=g, dtype=torch.float64)
    fh = torch.rand(3, 3, 32, 32, generator=g, dtype=torch.float64)
    le = loss_encoder(v, vh)[0].item()
    ld = loss_decoder(f, fh, extractor=ext)[0].item()
    checks["eps=1 gives L_E"] = loss_combined(v, vh, f, fh, HyperConfig(epsilon=1.0), ext)[0].item() == le
    checks["eps=0 gives L_D"] = loss_combined(v, vh, f, fh, HyperConfig(epsilon=0.0), ext)[0].item() == ld

    rng = np.random.default_rng(1)
    worst = 0.0
    for trial in range(1000):
        a, b, gm, d, e = rng.uniform(0, 1, 5)
        cfg = HyperConfig(alpha=a, beta=b, gamma=gm, delta=d, epsilon=e)
        gt = torch.Generator().manual_seed(trial)
        tv_ = torch.randn(2, 8, generator=gt, dtype=torch.float64)
        tvh = torch.randn(2, 8, generator=gt, dtype=torch.float64)
        tf = torch.rand(2, 3, 16, 16, generator=gt, dtype=torch.float64)
        tfh = torch.rand(2, 3, 16, 16, generator=gt, dtype=torch.float64)
        loss, bd = loss_combined(tv_, tvh, tf, tfh, cfg, ext)
        worst = max(worst, abs(bd.L_E - (bd.mse_v + a * bd.cos_dist)),
                    abs(bd.L_D - (b * bd.psim + gm * bd.ssim_loss + d * bd.tv)),
                    abs(bd.L_ED - (e * bd.L_E + (1 - e) * bd.L_D)),
                    abs(loss.item() - bd.L_ED))
    checks["recomposition"] = worst <= 1e-9
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    record("loss identities", ok, f"recomposition max err {worst:.1e} over 1000 trials"
           + (f"; failed {failed}" if failed else ""))
    assert ok


def test_closed_loop_encoding(desk_run):
    _, secs, rep = desk_run
    med = float(np.median(rep.pooled["encoder"].pearson))
    ok = med >= 0.5 and secs <= 600
    record("closed-loop encoding", ok, f"median held-out Pearson {med:.3f}, pipeline {secs:.0f} s")
    assert ok


def test_closed_loop_decoding(desk_run):
    rep = desk_run[2]
    mean = float(np.mean(rep.pooled["decoder"].ssim))
    null = rep.null["ssim"]
    margin = (mean - null["mean"]) / null["std"]
    ok = mean - null["mean"] >= 5 * null["std"]
    record("closed-loop decoding", ok,
           f"SSIM {mean:.3f} vs null {null['mean']:.3f} +- {null['std']:.4f} ({margin:.1f} sd)")
    assert ok


def test_mann_whitney_exact_enumeration():
    rng = np.random.default_rng(0)
    worst, n = 0.0, 0
    for n1 in range(1, 17):
        for n2 in range(1, 16 // n1 + 1):
            for _ in range(10):
                a = rng.integers(0, 5, n1).astype(float)
                b = rng.integers(0, 5, n2).astype(float)
                u_want, p_want = brute_exact_p(a, b)
                u, p = mann_whitney_u(a, b, method="exact")
                assert u == u_want
                worst = max(worst, abs(p - p_want))
                n += 1
    ok = worst <= 1e-12
    record("Mann-Whitney exact = enumeration (n1*n2 <= 16)", ok, f"{n} cases, max |dp| {worst:.1e}")
    assert ok


def test_mann_whitney_normal_approximation():
    rng = np.random.default_rng(1)
    worst, where, bad, n = 0.0, None, 0, 0
    for n1 in range(1, 65):
        for n2 in range(1, 65):
            if not 8 <= n1 * n2 <= 64:
                continue
            for _ in range(10):
                x = rng.permutation(n1 + n2).astype(float)
                a, b = x[:n1], x[n1:]
                gap = abs(mann_whitney_u(a, b, method="normal")[1]
                          - mann_whitney_u(a, b, method="exact")[1])
                bad += gap > 0.02
                n += 1
                if gap > worst:
                    worst, where = gap, (n1, n2)
    ok = worst <= 0.02
    record("Mann-Whitney normal approximation within 0.02 of exact (8 <= n1*n2 <= 64)", ok,
           f"{bad}/{n} draws exceed, worst {worst:.3f} at n={where}")
    assert ok


def test_cliffs_delta_brute_force():
    rng = np.random.default_rng(2)
    n = 0
    for trial in range(400):
        n1, n2 = rng.integers(1, 51, 2)
        hi = 3 if trial % 2 == 0 else 1000  # tie-heavy half
        a = rng.integers(0, hi, n1).astype(float)
        b = rng.integers(0, hi, n2).astype(float)
        assert cliffs_delta(a, b) == brute_cliffs(a, b)
        n += 1
    record("Cliff's delta = brute force (n <= 50, ties)", True, f"{n} cases")


def test_split_invariants_10000():
    rng = np.random.default_rng(3)
    for _ in range(10000):
        k = int(rng.integers(1, 7))
        counts = {f"m{i}": int(rng.integers(5, 401)) for i in range(k)}
        held = f"m{int(rng.integers(k))}"
        check_split(make_split(counts, held, seed=int(rng.integers(2**63))), counts, held)
    record("split invariants", True, "10000 randomized trials")


def test_snr_and_masking():
    rng = np.random.default_rng(4)
    snr_ok = all(snr_matches(random_stack(rng)) for _ in range(1000))
    counts_ok = all(
        select_top_fraction(rng.standard_normal(v), 0.3).sum() == math.floor(Fraction(3, 10) * v)
        for v in range(1, 2001))
    paper = sum(build_mask(np.arange(15364.0), ["r"] * 15364).selected)
    ok = snr_ok and counts_ok and paper == 4609
    record("SNR oracle and masking", ok,
           f"1000 stacks vs exact-rational oracle (rel 1e-12), floor counts V=1..2000, 15364 -> {paper}")
    assert ok


def test_null_calibration(desk_run):
    ds = make_synth_dataset(1, 500, 128, 16, 32, seed=11)
    truth = ds.bold["movie00"]
    pred = truth + np.random.default_rng(5).standard_normal(truth.shape)
    null = null_distribution("pearson", truth, pred, 100, seed=6)
    rep = desk_run[2]
    ssim_mean = float(np.mean(rep.pooled["decoder"].ssim))
    ok = abs(null.mean()) < 0.05 and rep.null["ssim"]["mean"] < ssim_mean
    record("null calibration", ok, f"T=500 null Pearson mean {null.mean():+.4f}; "
           f"null SSIM {rep.null['ssim']['mean']:.3f} < trained {ssim_mean:.3f}")
    assert ok


def _region_sums(scores, labels):
    rows = region_contributions(top_fraction_mask(scores, 0.2), labels)
    return sum(r["A_ratio"] for r in rows), sum(r["B_ratio"] for r in rows)


def test_saliency_dead_input_and_ratios(half_noise_run):
    root = half_noise_run
    data, split, mask, _ = load_processed(root / "proc")
    enc, dec, _ = load_models(root / "run" / "best.bin")
    x, _, f = data.gather(split.test)
    v = predict_voxels(enc, x)
    with torch.no_grad():
        dec.entry.weight[:, 5] = 0.0
    scores = compute_saliency(dec, v, f)
    dead_ok = scores[5] == 0.0 and np.all(scores[np.arange(scores.size) != 5] > 0)
    a_sum, b_sum = _region_sums(scores, mask.selected_regions)
    sums_ok = abs(a_sum - 100) <= 1e-6 and abs(b_sum - 100) <= 1e-6
    record("saliency dead input scores exactly 0", dead_ok, f"score {float(scores[5])!r}")
    record("saliency region ratios sum to 100", sums_ok,
           f"A {a_sum:.12f}, B {b_sum:.12f}")
    assert dead_ok and sums_ok


def test_saliency_informative_half(half_noise_run):
    root = half_noise_run
    informative = np.array(formats.load_json(root / "raw" / "truth" / "truth.json")["informative"])
    with open(root / "run" / "saliency" / "saliency.csv") as fh:
        rows = list(csv.DictReader(fh))
    ids = [int(r["voxel_id"]) for r in rows]
    scores = np.array([float(r["score"]) for r in rows])
    share = scores[informative[ids]].sum() / scores.sum()
    ok = share >= 0.9
    record("saliency informative half >= 90% of mass", ok,
           f"informative share {share:.3f} ({informative.sum()}/{informative.size} voxels informative)")
    assert ok


def test_determinism(tmp_path):
    for name in ("a", "b"):
        pipeline(tmp_path / name, SMALL)
    paths = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.name == "manifest.json" or p.suffix in (".bin", ".csv"))
    same = [(tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in paths]
    kinds = {p.suffix for p in paths}
    ok = all(same) and {".json", ".bin", ".csv"} <= kinds
    record("determinism", ok, f"{sum(same)}/{len(paths)} manifests, checkpoints and CSVs identical")
    assert ok
