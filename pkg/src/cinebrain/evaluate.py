"""Test-set metrics, shuffle nulls and the cross-run comparison report."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .formats import dump_json, load_json
from .objectives import ssim_batch
from .stats import cliffs_delta, columnwise_pearson, mann_whitney_u, null_distribution
from .trainer import PairedData, predict_frames, predict_voxels

# table rows: (key, label, distribution, statistic)
TABLE_ROWS = (
    ("E_corr", "E corr", "pearson", "median"),
    ("E_mse", "E MSE", "voxel_mse", "median"),
    ("D_ssim", "D SSIM", "ssim", "median"),
    ("D_mse", "D MSE", "frame_mse", "median"),
)
MISSING = "/"


@dataclass
class EncoderScores:
    pearson: np.ndarray  # [V]
    voxel_mse: np.ndarray  # [V]
    mean: float
    median: float
    mse: float
    n_rows: int


@dataclass
class DecoderScores:
    ssim: np.ndarray  # [N]
    frame_mse: np.ndarray  # [N]
    mean: float
    median: float
    mse: float
    n_rows: int


def evaluate_encoder(v_true, v_hat) -> EncoderScores:
    v_true = np.asarray(v_true, dtype=np.float64)
    v_hat = np.asarray(v_hat, dtype=np.float64)
    if v_true.shape != v_hat.shape:
        raise ValueError(f"shape mismatch: {v_true.shape} vs {v_hat.shape}")
    if v_true.ndim != 2 or v_true.shape[0] < 2:
        raise ValueError(f"need [T, V] with T >= 2, got {v_true.shape}")
    r = columnwise_pearson(v_true, v_hat)
    sq = (v_true - v_hat) ** 2
    return EncoderScores(r, sq.mean(axis=0), float(r.mean()), float(np.median(r)),
                         float(sq.mean()), v_true.shape[0])


def evaluate_decoder(f_true, f_hat) -> DecoderScores:
    f_true = torch.as_tensor(f_true, dtype=torch.float64)
    f_hat = torch.as_tensor(f_hat, dtype=torch.float64)
    if f_true.shape != f_hat.shape or f_true.dim() != 4:
        raise ValueError(f"need matching [N, 3, H, W] frames, got {tuple(f_true.shape)} "
                         f"and {tuple(f_hat.shape)}")
    s = ssim_batch(f_true, f_hat).numpy()
    mse = ((f_true - f_hat) ** 2).flatten(1).mean(dim=1).numpy()
    return DecoderScores(s, mse, float(s.mean()), float(np.median(s)), float(mse.mean()),
                         f_true.shape[0])


@dataclass
class EvalReport:
    run: str
    mode: str
    per_movie: dict = field(default_factory=dict)  # movie -> {"encoder": EncoderScores, "decoder": ...}
    pooled: dict = field(default_factory=dict)
    null: dict = field(default_factory=dict)  # metric -> {"values", "mean", "std", "n_shuffles", "seed"}

    @property
    def has_decoder(self) -> bool:
        return self.pooled.get("decoder") is not None

    def distribution(self, name: str):
        """Pooled per-voxel or per-frame values by name; None if absent."""
        enc, dec = self.pooled.get("encoder"), self.pooled.get("decoder")
        if name in ("pearson", "voxel_mse"):
            return getattr(enc, name) if enc is not None else None
        return getattr(dec, name) if dec is not None else None

    def summary(self) -> dict:
        """Flat scalar summary, JSON-safe."""
        out = {"run": self.run, "mode": self.mode, "movies": {}, "pooled": _scope(self.pooled),
               "null": {k: {kk: vv for kk, vv in v.items() if kk != "values"}
                        for k, v in self.null.items()}}
        for m, sc in self.per_movie.items():
            out["movies"][m] = _scope(sc)
        return out


def _scope(sc: dict) -> dict:
    out = {}
    enc, dec = sc.get("encoder"), sc.get("decoder")
    if enc is not None:
        out.update(pearson_mean=enc.mean, pearson_median=enc.median, encoder_mse=enc.mse,
                   encoder_mse_median=float(np.median(enc.voxel_mse)), n_trs=enc.n_rows)
    if dec is not None:
        out.update(ssim_mean=dec.mean, ssim_median=dec.median, decoder_mse=dec.mse,
                   decoder_mse_median=float(np.median(dec.frame_mse)), n_frames=dec.n_rows)
    return out


def evaluate_run(run: str, encoder, decoder, data: PairedData, test_part: dict,
                 n_shuffles: int = 100, seed: int = 0) -> EvalReport:
    """Per-movie and pooled test metrics plus shuffle nulls on the pooled set."""
    report = EvalReport(run, "end_to_end" if decoder is not None else "encoder_only")
    v_all, vh_all, f_all, fh_all = [], [], [], []
    for m in sorted(test_part):
        if not test_part[m]:
            continue
        x, v, f = data.gather({m: test_part[m]})
        vh = predict_voxels(encoder, x)
        entry = {"encoder": evaluate_encoder(v.numpy(), vh.numpy()) if len(v) >= 2 else None,
                 "decoder": None}
        v_all.append(v)
        vh_all.append(vh)
        if decoder is not None:
            fh = predict_frames(decoder, vh)
            entry["decoder"] = evaluate_decoder(f, fh)
            f_all.append(f)
            fh_all.append(fh)
        report.per_movie[m] = entry
    if not v_all:
        raise ValueError("empty test split")
    v_all = torch.cat(v_all).double().numpy()
    vh_all = torch.cat(vh_all).double().numpy()
    report.pooled["encoder"] = evaluate_encoder(v_all, vh_all)
    report.pooled["decoder"] = None
    vals = null_distribution("pearson", v_all, vh_all, n_shuffles, seed)
    report.null["pearson"] = _null_entry(vals, n_shuffles, seed)
    if decoder is not None:
        f_all = torch.cat(f_all)
        fh_all = torch.cat(fh_all)
        report.pooled["decoder"] = evaluate_decoder(f_all, fh_all)
        vals = null_distribution("ssim", f_all.double().numpy(), fh_all.double().numpy(),
                                 n_shuffles, seed)
        report.null["ssim"] = _null_entry(vals, n_shuffles, seed)
    return report


def _null_entry(values, n_shuffles, seed) -> dict:
    values = np.asarray(values, dtype=np.float64)
    return {"values": values, "mean": float(values.mean()),
            "std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
            "n_shuffles": int(n_shuffles), "seed": int(seed)}


# ---------------------------------------------------------------------------
# per-run files


def write_eval(report: EvalReport, out_dir, voxel_ids=None) -> None:
    """metrics.json, report.csv, voxel/frame/movie score tables and null.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_json(report.summary(), out_dir / "metrics.json")
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "scope", "metric", "mean", "median", "n"])
        for scope, sc in [(m, report.per_movie[m]) for m in sorted(report.per_movie)] + \
                [("pooled", report.pooled)]:
            for row in _metric_rows(sc):
                w.writerow([report.run, scope] + row)
    enc = report.pooled["encoder"]
    ids = list(range(enc.pearson.size)) if voxel_ids is None else list(voxel_ids)
    with open(out_dir / "voxel_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voxel_id", "pearson", "mse"])
        for i, r, e in zip(ids, enc.pearson, enc.voxel_mse):
            w.writerow([i, repr(float(r)), repr(float(e))])
    dec = report.pooled.get("decoder")
    if dec is not None:
        with open(out_dir / "frame_scores.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "ssim", "mse"])
            for i, (s, e) in enumerate(zip(dec.ssim, dec.frame_mse)):
                w.writerow([i, repr(float(s)), repr(float(e))])
    with open(out_dir / "movie_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["movie", "metric", "index", "value"])
        for m in sorted(report.per_movie):
            for metric in ("pearson", "ssim"):
                vals = _movie_values(report, m, metric)
                for i, val in enumerate(vals if vals is not None else []):
                    w.writerow([m, metric, i, repr(float(val))])
    with open(out_dir / "null.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "shuffle", "value"])
        for metric in sorted(report.null):
            for k, val in enumerate(report.null[metric]["values"]):
                w.writerow([metric, k, repr(float(val))])


def _metric_rows(sc: dict) -> list:
    rows = []
    enc, dec = sc.get("encoder"), sc.get("decoder")
    if enc is not None:
        rows.append(["pearson", repr(enc.mean), repr(enc.median), enc.pearson.size])
        rows.append(["encoder_mse", repr(enc.mse), repr(float(np.median(enc.voxel_mse))),
                     enc.voxel_mse.size])
    if dec is not None:
        rows.append(["ssim", repr(dec.mean), repr(dec.median), dec.n_rows])
        rows.append(["decoder_mse", repr(dec.mse), repr(float(np.median(dec.frame_mse))), dec.n_rows])
    return rows


def load_eval(eval_dir) -> EvalReport:
    """Rebuild the pooled distributions and nulls written by write_eval."""
    eval_dir = Path(eval_dir)
    summary = load_json(eval_dir / "metrics.json")
    rep = EvalReport(summary["run"], summary["mode"])
    cols = _read_columns(eval_dir / "voxel_scores.csv")
    r = np.array(cols["pearson"], dtype=np.float64)
    e = np.array(cols["mse"], dtype=np.float64)
    pooled = summary["pooled"]
    rep.pooled["encoder"] = EncoderScores(r, e, pooled["pearson_mean"], pooled["pearson_median"],
                                          pooled["encoder_mse"], pooled["n_trs"])
    rep.pooled["decoder"] = None
    if (eval_dir / "frame_scores.csv").exists():
        cols = _read_columns(eval_dir / "frame_scores.csv")
        s = np.array(cols["ssim"], dtype=np.float64)
        e = np.array(cols["mse"], dtype=np.float64)
        rep.pooled["decoder"] = DecoderScores(s, e, pooled["ssim_mean"], pooled["ssim_median"],
                                              pooled["decoder_mse"], pooled["n_frames"])
    null_cols = _read_columns(eval_dir / "null.csv")
    for metric, info in summary["null"].items():
        vals = [float(v) for m, v in zip(null_cols["metric"], null_cols["value"]) if m == metric]
        rep.null[metric] = dict(info, values=np.array(vals))
    cols = _read_columns(eval_dir / "movie_scores.csv")
    for m in summary["movies"]:
        entry = {"encoder": None, "decoder": None}
        for metric, kind in (("pearson", "encoder"), ("ssim", "decoder")):
            vals = np.array([float(v) for mm, k, v in zip(cols.get("movie", []), cols.get("metric", []),
                                                          cols.get("value", []))
                             if mm == m and k == metric])
            if vals.size:
                entry[kind] = _scores_from_values(kind, vals)
        rep.per_movie[m] = entry
    return rep


def _scores_from_values(kind, vals):
    nan = math.nan
    if kind == "encoder":
        return EncoderScores(vals, np.full(vals.size, nan), float(vals.mean()),
                             float(np.median(vals)), nan, 0)
    return DecoderScores(vals, np.full(vals.size, nan), float(vals.mean()),
                         float(np.median(vals)), nan, vals.size)


def _read_columns(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: [row[k] for row in rows] for k in (rows[0].keys() if rows else [])}


# ---------------------------------------------------------------------------
# cross-run report


def comparison_table(reports: list) -> list:
    """Rows (metric label, value per run) with medians; '/' where a run has no decoder."""
    table = []
    for key, label, dist, _ in TABLE_ROWS:
        row = {"metric": label}
        for rep in reports:
            vals = rep.distribution(dist)
            row[rep.run] = MISSING if vals is None else float(np.median(vals))
        table.append(row)
    return table


def compare_runs(reports: list, pairs=None) -> list:
    """Mann-Whitney U and Cliff's delta for every metric both runs of a pair have."""
    if pairs is None:
        pairs = list(itertools.combinations([r.run for r in reports], 2))
    by_name = {r.run: r for r in reports}
    out = []
    for a, b in pairs:
        ra, rb = by_name[a], by_name[b]
        for key, _, dist, _ in TABLE_ROWS:
            xa, xb = ra.distribution(dist), rb.distribution(dist)
            if xa is None or xb is None:
                continue
            u, p = mann_whitney_u(xa, xb)
            out.append({"pair": f"{a} vs {b}", "metric": key, "U": u, "p": p,
                        "cliffs_delta": cliffs_delta(xa, xb), "n1": len(xa), "n2": len(xb)})
    return out


def build_report(reports: list, out_dir, pairs=None, plots: bool = True) -> dict:
    """Write table.csv, report.csv, comparisons.csv and figures; return the pieces."""
    if not reports:
        raise ValueError("need at least one evaluated run")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = comparison_table(reports)
    comps = compare_runs(reports, pairs)
    names = [r.run for r in reports]
    with open(out_dir / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric"] + names)
        for row in table:
            w.writerow([row["metric"]] + [_fmt(row[n]) for n in names])
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "metric", "mean", "median", "n"])
        for rep in reports:
            for key, _, dist, _ in TABLE_ROWS:
                vals = rep.distribution(dist)
                if vals is None:
                    w.writerow([rep.run, key, MISSING, MISSING, 0])
                else:
                    w.writerow([rep.run, key, repr(float(np.mean(vals))),
                                repr(float(np.median(vals))), len(vals)])
    with open(out_dir / "comparisons.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "metric", "U", "p", "delta", "n1", "n2"])
        for c in comps:
            w.writerow([c["pair"], c["metric"], repr(float(c["U"])), repr(float(c["p"])),
                        repr(float(c["cliffs_delta"])), c["n1"], c["n2"]])
    figures = []
    if plots:
        for rep in reports:
            figures += plot_run(rep, out_dir / "figures")
    return {"table": table, "comparisons": comps, "figures": figures}


def _fmt(x):
    return x if isinstance(x, str) else f"{x:.3f}"


def plot_run(rep: EvalReport, fig_dir) -> list:
    """Per-movie points, pooled points and null points with the null mean line."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    panels = [("pearson", "pearson", "correlation")]
    if rep.has_decoder:
        panels.append(("ssim", "ssim", "SSIM"))
    for dist, null_key, ylabel in panels:
        movies = [m for m in sorted(rep.per_movie) if _movie_values(rep, m, dist) is not None]
        fig, ax = plt.subplots(figsize=(1.0 + 0.6 * (len(movies) + 2), 3.2))
        rng = np.random.default_rng(0)
        for i, m in enumerate(movies):
            vals = _movie_values(rep, m, dist)
            ax.scatter(i + rng.uniform(-0.2, 0.2, len(vals)), vals, s=3, c="black")
        pooled = rep.distribution(dist)
        k = len(movies)
        ax.scatter(k + rng.uniform(-0.2, 0.2, len(pooled)), pooled, s=3, c="tab:blue")
        null = rep.null.get(null_key)
        if null is not None:
            ax.scatter(k + 1 + rng.uniform(-0.2, 0.2, len(null["values"])), null["values"],
                       s=3, c="cyan")
            ax.axhline(null["mean"], color="cyan", lw=1)
        ax.set_xticks(range(k + 2))
        ax.set_xticklabels(movies + ["all", "null"], rotation=45, ha="right", fontsize=7)
        ax.set_ylabel(ylabel)
        ax.set_title(f"{rep.run}: mean {np.mean(pooled):.3f}", fontsize=8)
        fig.tight_layout()
        path = fig_dir / f"{rep.run}_{dist}.png"
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def _movie_values(rep, movie, dist):
    sc = rep.per_movie.get(movie)
    if not isinstance(sc, dict):
        return None
    enc, dec = sc.get("encoder"), sc.get("decoder")
    if dist == "pearson":
        return enc.pearson if isinstance(enc, EncoderScores) else None
    return dec.ssim if isinstance(dec, DecoderScores) else None
