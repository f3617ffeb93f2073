"""Command-line entry point: synth, preprocess, train, eval, saliency, report.

Every command resolves its configuration as defaults < config file <
CINEBRAIN_* environment variables < flags, writes the resolved values to
``config.json`` in its output directory and finishes with a ``manifest.json``
listing SHA-256 hashes of inputs and outputs (no timestamps, so re-runs
with the same inputs compare equal).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import torch

from . import formats
from .evaluate import build_report, evaluate_run, load_eval, plot_run, write_eval
from .fmri import SplitPlan, SubjectStack, VoxelMask, make_split, movie_seed, preprocess_group
from .models import (DecoderSpec, EncoderSpec, desk_decoder_spec, desk_encoder_spec,
                     tiny_decoder_spec, tiny_encoder_spec)
from .objectives import HyperConfig, make_extractor
from .saliency import run_saliency, write_saliency
from .stimulus import FRAMES_PER_TR, resample_movie
from .synth import make_synth_dataset, synth_subject_stack
from .trainer import MODES, NumericalAbort, PairedData, load_models, predict_voxels, train

log = logging.getLogger("cinebrain")

SCHEMA_VERSION = 1
ENV_PREFIX = "CINEBRAIN_"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    # synthetic data
    "n_movies": 2,
    "chunks_per_movie": 300,
    "n_voxels": 128,
    "n_features": 16,
    "frame_size": 32,
    "noise_sigma": 0.5,
    "hrf": "delay4",
    "n_subjects": 4,
    "n_regions": 4,
    "informative_fraction": 1.0,
    "tr_seconds": 1.3,
    # preprocessing
    "delay_tr": 4,
    "mask": "snr_top",
    "snr_fraction": 0.3,
    "held_out": "",
    "train_frac": 0.8,
    # training
    "mode": "end_to_end",
    "model": "desk",
    "alpha": 0.5,
    "beta": 0.35,
    "gamma": 0.35,
    "delta": 0.30,
    "epsilon": 0.5,
    "learning_rate": 1e-4,
    "epochs": 11,
    "batch_size": 16,
    "extractor": "random",
    "extractor_width": 0.125,
    # evaluation
    "shuffles": 100,
    "top_fraction": 0.2,
    "saliency_input": "predicted",
}
REQUIRED = ("schema_version",)
CHOICES = {
    "mode": MODES,
    "mask": ("full", "snr_top"),
    "model": ("desk", "paper", "tiny"),
    "extractor": ("random", "vgg16", "auto"),
    "saliency_input": ("predicted", "true"),
}
# config keys exposed as flags (flag name is the key with '-' for '_')
FLAG_KEYS = ("seed", "mode", "mask", "epsilon", "epochs", "delay_tr", "top_fraction", "shuffles")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _coerce(key, value):
    kind = type(DEFAULTS[key])
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot interpret {value!r} as {kind.__name__}")


def load_config_file(path) -> dict:
    try:
        raw = formats.load_json(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except formats.FormatError as exc:
        raise ConfigError(str(exc))
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(f"{path}: missing required key {key!r}")
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return raw


def resolve_config(config_path=None, flags: dict = None, environ=None) -> dict:
    """defaults < config file < CINEBRAIN_<KEY> environment < flags."""
    environ = os.environ if environ is None else environ
    cfg = dict(DEFAULTS)
    if config_path is not None:
        cfg.update(load_config_file(config_path))
    for key in DEFAULTS:
        env_key = ENV_PREFIX + key.upper()
        if env_key in environ:
            cfg[key] = environ[env_key]
    for key, val in (flags or {}).items():
        if val is not None:
            cfg[key] = val
    cfg = {k: _coerce(k, v) for k, v in cfg.items()}
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {cfg['schema_version']} not supported "
                          f"(expected {SCHEMA_VERSION})")
    for key, allowed in CHOICES.items():
        if cfg[key] not in allowed:
            raise ConfigError(f"config key {key!r} must be one of {list(allowed)}, got {cfg[key]!r}")
    try:
        hyper_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc))
    return cfg


def hyper_config(cfg) -> HyperConfig:
    return HyperConfig(alpha=cfg["alpha"], beta=cfg["beta"], gamma=cfg["gamma"],
                       delta=cfg["delta"], epsilon=cfg["epsilon"],
                       learning_rate=cfg["learning_rate"], epochs=cfg["epochs"],
                       seed=cfg["seed"], batch_size=cfg["batch_size"])


def model_specs(cfg, n_voxels: int, size: int):
    if cfg["model"] == "desk":
        return desk_encoder_spec(n_voxels, size), desk_decoder_spec(n_voxels, size)
    if cfg["model"] == "tiny":
        return tiny_encoder_spec(n_voxels, size), tiny_decoder_spec(n_voxels, size)
    return (EncoderSpec(n_voxels, height=size, width=size),
            DecoderSpec(n_voxels, height=size, width=size))


# ---------------------------------------------------------------------------
# run directory plumbing


class RunLock:
    """Exclusive lock file so two commands never write one directory at once."""

    def __init__(self, directory):
        self.path = Path(directory) / ".cinebrain.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(f"{self.path.parent} is locked by another command ({self.path})")
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _tree_hashes(root, skip=()) -> dict:
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip and not p.name.endswith(".tmp"):
            out[p.relative_to(root).as_posix()] = sha256_file(p)
    return out


def write_manifest(out_dir, command: str, cfg: dict, inputs: dict) -> dict:
    """Hashes of every input tree and every output file; written last."""
    out_dir = Path(out_dir)
    man = {
        "command": command,
        "config": cfg,
        "inputs": {name: _tree_hashes(path) if Path(path).is_dir() else sha256_file(path)
                   for name, path in sorted(inputs.items())},
        "outputs": _tree_hashes(out_dir, skip=("manifest.json", ".cinebrain.lock")),
    }
    formats.dump_json(man, out_dir / "manifest.json")
    return man


def _write_run_config(out_dir, command, cfg):
    # paths are left out so runs in different directories stay byte-identical
    formats.dump_json({"command": command, "config": cfg}, Path(out_dir) / "config.json")


# ---------------------------------------------------------------------------
# dataset IO


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path}")
    return path


def load_processed(data_dir):
    """PairedData, split, mask and dataset header of a preprocessed directory."""
    data_dir = Path(data_dir)
    header = formats.load_json(_need(data_dir / "dataset.json", "dataset header"))
    mask = VoxelMask.from_dict(formats.load_json(_need(data_dir / "mask.json", "voxel mask")))
    split = SplitPlan.from_dict(formats.load_json(_need(data_dir / "split.json", "split plan")))
    chunks, voxels = {}, {}
    for m in header["movies"]:
        _need(data_dir / "stimuli" / f"{m}.json", f"stimulus for {m}")
        _need(data_dir / "fmri" / f"{m}.json", f"fMRI for {m}")
        chunks[m], _ = formats.read_chunks(data_dir / "stimuli" / m)
        voxels[m], _ = formats.read_array(data_dir / "fmri" / m)
    try:
        data = PairedData(chunks, voxels)
    except ValueError as exc:
        raise DataError(str(exc))
    if data.n_voxels != len(mask.selected_ids):
        raise DataError(f"fMRI has {data.n_voxels} voxels but the mask selects "
                        f"{len(mask.selected_ids)}")
    return data, split, mask, header


def _read_raw_stimulus(raw_dir: Path, movie: str, cfg) -> torch.Tensor:
    packed = raw_dir / "stimuli" / movie
    if packed.with_suffix(".json").exists():
        chunks, header = formats.read_chunks(packed)
        return chunks
    movie_dir = raw_dir / "movies" / movie
    if (movie_dir / "meta.json").exists():
        frames, meta = formats.read_frame_dir(movie_dir)
        size = cfg["frame_size"]
        frames = resample_movie(frames, meta["fps"], cfg["tr_seconds"], size, size)
        return frames.view(-1, FRAMES_PER_TR, 3, size, size)
    raise DataError(f"no stimulus for {movie} under {raw_dir}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg, out_dir) -> Path:
    out_dir = Path(out_dir)
    ds = make_synth_dataset(cfg["n_movies"], cfg["chunks_per_movie"], cfg["n_voxels"],
                            cfg["n_features"], cfg["frame_size"], cfg["seed"],
                            noise_sigma=cfg["noise_sigma"], hrf=cfg["hrf"],
                            tr_seconds=cfg["tr_seconds"], n_regions=cfg["n_regions"],
                            informative_fraction=cfg["informative_fraction"])
    gt = ds.truth
    for m in ds.movies:
        chunks = ds.chunk_tensor(m)
        formats.write_chunks(out_dir / "stimuli" / m, m, chunks)
        stack = synth_subject_stack(chunks, gt, cfg["n_subjects"], movie_seed(cfg["seed"] + 2, m))
        formats.write_fmri(out_dir / "fmri" / m, m, stack, cfg["tr_seconds"])
    formats.dump_json({"movies": list(ds.movies), "n_subjects": cfg["n_subjects"],
                       "tr_seconds": cfg["tr_seconds"], "frame_size": cfg["frame_size"],
                       "voxel_ids": list(range(cfg["n_voxels"])),
                       "region_labels": list(gt.region_of_voxel), "synthetic": True},
                      out_dir / "dataset.json")
    formats.write_array(out_dir / "truth" / "weights", gt.weights, {"rows": "voxels",
                                                                     "cols": "features"})
    formats.dump_json({
        "gabor_bank": [vars(g) for g in gt.gabor_bank],
        "hrf_kernel": gt.hrf_kernel.tolist(),
        "noise_sigma": gt.noise_sigma,
        "informative": gt.informative.tolist(),
        "feature_mean": gt.feature_mean.tolist(),
        "feature_std": gt.feature_std.tolist(),
        "tr_seconds": gt.tr_seconds,
    }, out_dir / "truth" / "truth.json")
    return out_dir


def validate_raw(raw_dir) -> dict:
    """Check a raw directory's layout and headers; returns its dataset header."""
    raw_dir = Path(raw_dir)
    header = formats.load_json(_need(raw_dir / "dataset.json", "dataset header"))
    for key in ("movies", "voxel_ids", "region_labels", "tr_seconds"):
        if key not in header:
            raise formats.FormatError(f"{raw_dir}/dataset.json: missing {key!r}")
    n_vox = len(header["voxel_ids"])
    if len(header["region_labels"]) != n_vox:
        raise formats.FormatError("region_labels and voxel_ids differ in length")
    for m in header["movies"]:
        _need(raw_dir / "fmri" / f"{m}.json", f"fMRI for {m}")
        _, fh = formats.read_fmri(raw_dir / "fmri" / m)
        if fh["voxels"] != n_vox:
            raise formats.FormatError(f"{m}: {fh['voxels']} voxels, header lists {n_vox}")
    return header


def cmd_preprocess(cfg, raw_dir, out_dir) -> Path:
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    header = validate_raw(raw_dir)
    stacks, chunks, n_chunks = {}, {}, {}
    for m in header["movies"]:
        data, fh = formats.read_fmri(raw_dir / "fmri" / m)
        stacks[m] = SubjectStack(data, fh["tr_seconds"])
        chunks[m] = _read_raw_stimulus(raw_dir, m, cfg)
        n_chunks[m] = min(chunks[m].shape[0], data.shape[1] - cfg["delay_tr"])
        if n_chunks[m] < 1:
            raise DataError(f"{m}: too few TRs for delay {cfg['delay_tr']}")
    fraction = cfg["snr_fraction"] if cfg["mask"] == "snr_top" else 1.0
    try:
        mask, series = preprocess_group(stacks, n_chunks, header["region_labels"], fraction,
                                        cfg["delay_tr"], header["voxel_ids"])
    except ValueError as exc:
        raise DataError(str(exc))
    for m in header["movies"]:
        formats.write_chunks(out_dir / "stimuli" / m, m, chunks[m][:n_chunks[m]])
        formats.write_array(out_dir / "fmri" / m, series[m].data,
                            {"movie_id": m, "delay_tr": cfg["delay_tr"], "n_chunks": n_chunks[m],
                             "voxels": int(series[m].data.shape[1])})
    held_out = cfg["held_out"] or sorted(header["movies"])[-1]
    try:
        split = make_split(n_chunks, held_out, cfg["train_frac"], seed=cfg["seed"])
    except KeyError as exc:
        raise ConfigError(str(exc))
    except ValueError as exc:
        raise DataError(str(exc))
    formats.dump_json(mask.to_dict(), out_dir / "mask.json")
    formats.dump_json(split.to_dict(), out_dir / "split.json")
    formats.dump_json({"movies": list(header["movies"]), "n_chunks": n_chunks,
                       "voxel_ids": mask.selected_ids, "region_labels": mask.selected_regions,
                       "delay_tr": cfg["delay_tr"], "mask": cfg["mask"],
                       "snr_fraction": fraction, "tr_seconds": header["tr_seconds"]},
                      out_dir / "dataset.json")
    return out_dir


def cmd_train(cfg, data_dir, out_dir):
    data, split, mask, header = load_processed(data_dir)
    size = int(next(iter(data.chunks.values())).shape[-1])
    enc_spec, dec_spec = model_specs(cfg, data.n_voxels, size)
    extractor = None
    if cfg["mode"] == "end_to_end" and cfg["beta"] != 0:
        extractor = make_extractor(cfg["extractor"], cfg["extractor_width"], cfg["seed"])
    torch.manual_seed(cfg["seed"])
    return train(cfg["mode"], data, split, hyper_config(cfg), enc_spec,
                 dec_spec if cfg["mode"] == "end_to_end" else None, extractor, run_dir=out_dir)


def _load_run(run_dir):
    best = _need(Path(run_dir) / "best.bin", "trained checkpoint")
    return load_models(best)


def cmd_eval(cfg, run_dir, data_dir, out_dir):
    data, split, mask, header = load_processed(data_dir)
    enc, dec, man = _load_run(run_dir)
    if enc.spec.n_voxels != data.n_voxels:
        raise DataError(f"checkpoint predicts {enc.spec.n_voxels} voxels, data has {data.n_voxels}")
    report = evaluate_run(Path(run_dir).resolve().name, enc, dec, data, split.test,
                          cfg["shuffles"], cfg["seed"])
    write_eval(report, out_dir, voxel_ids=mask.selected_ids)
    plot_run(report, Path(out_dir) / "figures")
    return report


def cmd_saliency(cfg, run_dir, data_dir, out_dir):
    data, split, mask, header = load_processed(data_dir)
    enc, dec, man = _load_run(run_dir)
    if dec is None:
        raise DataError(f"{run_dir} is an encoder-only run; saliency needs a decoder")
    x, v, f = data.gather(split.test)
    inputs = predict_voxels(enc, x) if cfg["saliency_input"] == "predicted" else v
    res = run_saliency(dec, inputs, f, mask.selected_regions, mask.selected_ids,
                       cfg["top_fraction"])
    write_saliency(res, out_dir)
    return res


def cmd_report(cfg, run_dirs, out_dir):
    reports = []
    for r in run_dirs:
        ev = Path(r) / "eval"
        _need(ev / "metrics.json", "evaluation (run `cinebrain eval` first)")
        reports.append(load_eval(ev))
    return build_report(reports, out_dir)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cinebrain", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON config with schema_version")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=out_help)
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("synth", help="generate a synthetic raw dataset")
    common(sp, "raw dataset directory to create")

    sp = sub.add_parser("preprocess", help="mask, normalize, align and split a raw dataset")
    common(sp, "processed dataset directory")
    sp.add_argument("--raw", required=True)
    sp.add_argument("--mask", choices=CHOICES["mask"])
    sp.add_argument("--delay-tr", type=int)

    sp = sub.add_parser("train", help="train the encoder or the end-to-end model")
    common(sp, "run directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--epochs", type=int)

    sp = sub.add_parser("eval", help="test-set metrics and shuffle nulls for a run")
    common(sp, "evaluation directory (default RUN/eval)")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--shuffles", type=int)

    sp = sub.add_parser("saliency", help="decoder voxel saliency and region table")
    common(sp, "saliency directory (default RUN/saliency)")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--top-fraction", type=float)

    sp = sub.add_parser("report", help="compare evaluated runs")
    common(sp, "report directory")
    sp.add_argument("--runs", nargs="+", required=True)
    return p


def _flags(args) -> dict:
    return {k: getattr(args, k, None) for k in FLAG_KEYS}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, _flags(args))
        cmd = args.command
        if cmd in ("eval", "saliency"):
            out = Path(args.out or Path(args.run) / ("eval" if cmd == "eval" else "saliency"))
        else:
            if not args.out:
                raise ConfigError(f"{cmd}: --out is required")
            out = Path(args.out)
        inputs = {k: getattr(args, k) for k in ("raw", "data", "run") if getattr(args, k, None)}
        if cmd == "report":
            inputs = {f"run{i}": str(Path(r) / "eval") for i, r in enumerate(args.runs)}
        if args.config:
            inputs["config"] = args.config
        with RunLock(out):
            _write_run_config(out, cmd, cfg)
            if cmd == "synth":
                cmd_synth(cfg, out)
            elif cmd == "preprocess":
                cmd_preprocess(cfg, args.raw, out)
            elif cmd == "train":
                cmd_train(cfg, args.data, out)
            elif cmd == "eval":
                cmd_eval(cfg, args.run, args.data, out)
            elif cmd == "saliency":
                cmd_saliency(cfg, args.run, args.data, out)
            elif cmd == "report":
                cmd_report(cfg, args.runs, out)
            if cmd in ("eval", "saliency"):
                inputs.pop("run", None)
                inputs["checkpoint"] = str(Path(args.run) / "best.bin")
            write_manifest(out, cmd, cfg, inputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, formats.FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
