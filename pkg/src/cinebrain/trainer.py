"""Adam training of the encoder alone or the end-to-end encoder-decoder."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import formats
from .fmri import SplitPlan
from .models import (PARAMS_VERSION, Decoder, DecoderSpec, Encoder, EncoderSpec, build_decoder,
                     build_encoder)
from .objectives import (HyperConfig, LossBreakdown, average_breakdowns, loss_combined,
                         loss_encoder, ssim_batch)
from .stats import columnwise_pearson
from .stimulus import TARGET_INDEX

log = logging.getLogger(__name__)

MODES = ("encoder_only", "end_to_end")


class NumericalAbort(RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""


@dataclass
class PairedData:
    """Stimulus chunks and their delay-aligned voxel responses, per movie.

    chunks[m] is [N_m, 32, 3, H, W]; voxels[m] is [N_m, V]. Row i of both
    belongs to chunk index i of movie m.
    """
    chunks: dict
    voxels: dict
    target_index: int = TARGET_INDEX

    def __post_init__(self):
        for m in self.chunks:
            if self.chunks[m].shape[0] != self.voxels[m].shape[0]:
                raise ValueError(f"movie {m}: {self.chunks[m].shape[0]} chunks vs "
                                 f"{self.voxels[m].shape[0]} voxel rows")
        self.voxels = {m: torch.as_tensor(np.asarray(v), dtype=torch.float32)
                       for m, v in self.voxels.items()}

    @property
    def n_voxels(self) -> int:
        return next(iter(self.voxels.values())).shape[1]

    def counts(self) -> dict:
        return {m: int(c.shape[0]) for m, c in self.chunks.items()}

    def batch(self, items):
        """items: sequence of (movie, index) -> (chunks, voxels, target frames)."""
        x = torch.stack([self.chunks[m][i] for m, i in items])
        v = torch.stack([self.voxels[m][i] for m, i in items])
        return x, v, x[:, self.target_index]

    def gather(self, part: dict):
        """Concatenate the rows listed in a split part (movie -> indices)."""
        items = index_list(part)
        return self.batch(items) if items else None


def index_list(part: dict) -> list:
    return [(m, int(i)) for m in sorted(part) for i in part[m]]


def derived_seed(seed: int, *tags) -> int:
    h = hashlib.sha256(":".join(str(t) for t in (seed,) + tags).encode()).digest()
    return int.from_bytes(h[:8], "little") % (2**63)


@dataclass
class TrainResult:
    encoder: Encoder
    decoder: Decoder = None
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf


# ---------------------------------------------------------------------------
# inference helpers


@torch.no_grad()
def predict_voxels(encoder, chunks, batch_size: int = 32):
    encoder.eval()
    out = [encoder(chunks[i:i + batch_size]) for i in range(0, chunks.shape[0], batch_size)]
    return torch.cat(out)


@torch.no_grad()
def predict_frames(decoder, voxels, batch_size: int = 32):
    decoder.eval()
    out = [decoder(voxels[i:i + batch_size]) for i in range(0, voxels.shape[0], batch_size)]
    return torch.cat(out)


# ---------------------------------------------------------------------------
# checkpoint helpers


def _state_tensors(encoder, decoder, optimizer=None, best=None) -> "OrderedDict[str, torch.Tensor]":
    out = OrderedDict()
    for k, v in encoder.state_dict().items():
        out["encoder." + k] = v
    if decoder is not None:
        for k, v in decoder.state_dict().items():
            out["decoder." + k] = v
    if optimizer is not None:
        for idx, st in sorted(optimizer.state_dict()["state"].items()):
            for key in sorted(st):
                out[f"optim.{idx}.{key}"] = torch.as_tensor(st[key])
    if best is not None:
        for k, v in best.items():
            out["best." + k] = v
    return out


def _split_prefix(tensors, prefix):
    n = len(prefix)
    return OrderedDict((k[n:], v) for k, v in tensors.items() if k.startswith(prefix))


def _manifest(mode, enc_spec, dec_spec, config, epoch, **extra) -> dict:
    man = {
        "params_version": PARAMS_VERSION,
        "mode": mode,
        "encoder_spec": enc_spec.to_dict(),
        "decoder_spec": dec_spec.to_dict() if dec_spec is not None else None,
        "seed": config.seed,
        "epoch": epoch,
        "hyperconfig": config.to_dict(),
    }
    man.update(extra)
    return man


def load_models(path):
    """Rebuild encoder (and decoder, if present) from a checkpoint file."""
    tensors, man = formats.load_checkpoint(path)
    if man.get("params_version") != PARAMS_VERSION:
        raise formats.FormatError(f"{path}: params version {man.get('params_version')} "
                                  f"!= {PARAMS_VERSION}")
    enc = Encoder(EncoderSpec.from_dict(man["encoder_spec"]))
    enc.load_state_dict(_split_prefix(tensors, "encoder."))
    dec = None
    if man.get("decoder_spec"):
        dec = Decoder(DecoderSpec.from_dict(man["decoder_spec"]))
        dec.load_state_dict(_split_prefix(tensors, "decoder."))
    return enc, dec, man


HISTORY_FIELDS = (["epoch"] + [f"train_{k}" for k in LossBreakdown.FIELDS]
                  + [f"val_{k}" for k in LossBreakdown.FIELDS] + ["val_pearson", "val_ssim"])


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(row[k])) if k != "epoch" else row[k]) for k in HISTORY_FIELDS})


# ---------------------------------------------------------------------------
# training


def _step_loss(mode, encoder, decoder, x, v, f, config, extractor):
    v_hat = encoder(x)
    if mode == "encoder_only":
        return loss_encoder(v, v_hat, config.alpha)
    f_hat = decoder(v_hat)
    return loss_combined(v, v_hat, f, f_hat, config, extractor)


@torch.no_grad()
def evaluate_split(mode, encoder, decoder, data: PairedData, part: dict, config, extractor):
    """Eval-mode losses and metrics over one split part; ``None`` if it is empty."""
    items = index_list(part)
    if not items:
        return None
    encoder.eval()
    if decoder is not None:
        decoder.eval()
    bds, sizes, vs, vhs, ssims = [], [], [], [], []
    bs = config.batch_size
    for i in range(0, len(items), bs):
        x, v, f = data.batch(items[i:i + bs])
        v_hat = encoder(x)
        if mode == "encoder_only":
            _, bd = loss_encoder(v, v_hat, config.alpha)
        else:
            f_hat = decoder(v_hat)
            _, bd = loss_combined(v, v_hat, f, f_hat, config, extractor)
            ssims.append(ssim_batch(f.double(), f_hat.double()))
        bds.append(bd)
        sizes.append(len(x))
        vs.append(v)
        vhs.append(v_hat)
    bd = average_breakdowns(bds, sizes)
    v_all = torch.cat(vs).double().numpy()
    vh_all = torch.cat(vhs).double().numpy()
    pear = float(columnwise_pearson(v_all, vh_all).mean()) if len(v_all) >= 2 else math.nan
    ssim_mean = float(torch.cat(ssims).mean()) if ssims else math.nan
    return bd, pear, ssim_mean


def _selection_loss(mode, bd: LossBreakdown) -> float:
    return bd.L_E if mode == "encoder_only" else bd.L_ED


def _history_row(epoch, train_bd, val):
    row = {"epoch": epoch}
    for k in LossBreakdown.FIELDS:
        row[f"train_{k}"] = getattr(train_bd, k)
        row[f"val_{k}"] = getattr(val[0], k) if val else math.nan
    row["val_pearson"] = val[1] if val else math.nan
    row["val_ssim"] = val[2] if val else math.nan
    return row


def train(mode: str, data: PairedData, split: SplitPlan, config: HyperConfig,
          encoder_spec: EncoderSpec, decoder_spec: DecoderSpec = None, extractor=None,
          run_dir=None, resume_from=None, stop_after: int = None) -> TrainResult:
    """Train with Adam on the split's train part; keep the best-validation parameters.

    Each epoch visits the training chunks in a permutation seeded by
    ``(config.seed, epoch)``; dropout is reseeded the same way, so a run
    resumed from ``checkpoints/epoch_k.bin`` finishes bit-identical to an
    uninterrupted run. ``stop_after`` ends the run early after that many
    epochs (used to exercise resumption).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if encoder_spec.n_voxels != data.n_voxels:
        raise ValueError(f"encoder emits {encoder_spec.n_voxels} voxels, data has {data.n_voxels}")
    train_items = index_list(split.train)
    if not train_items:
        raise ValueError("empty training split")
    if mode == "end_to_end" and decoder_spec is None:
        raise ValueError("end_to_end mode needs a decoder spec")

    encoder = build_encoder(encoder_spec, config.seed)
    decoder = build_decoder(decoder_spec, config.seed + 1) if mode == "end_to_end" else None
    params = list(encoder.parameters()) + (list(decoder.parameters()) if decoder else [])
    opt = torch.optim.Adam(params, lr=config.learning_rate, betas=(0.9, 0.999), eps=1e-8)

    result = TrainResult(encoder, decoder)
    best_state = _state_tensors(encoder, decoder)
    best_state = OrderedDict((k, v.clone()) for k, v in best_state.items())
    start_epoch = 1

    if resume_from is not None:
        tensors, man = formats.load_checkpoint(resume_from)
        if man.get("params_version") != PARAMS_VERSION:
            raise formats.FormatError("checkpoint params version mismatch")
        if man["hyperconfig"] != config.to_dict() or man["mode"] != mode:
            raise ValueError("checkpoint was written by a different configuration")
        encoder.load_state_dict(_split_prefix(tensors, "encoder."))
        if decoder is not None:
            decoder.load_state_dict(_split_prefix(tensors, "decoder."))
        opt_state = opt.state_dict()
        for idx in range(len(params)):
            st = _split_prefix(tensors, f"optim.{idx}.")
            if st:
                opt_state["state"][idx] = dict(st)
        opt.load_state_dict(opt_state)
        best_state = _split_prefix(tensors, "best.")
        result.history = man["history"]
        result.best_epoch = man["best_epoch"]
        result.best_val = man["best_val"] if man["best_val"] is not None else math.inf
        start_epoch = man["epoch"] + 1

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    last_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(start_epoch, last_epoch + 1):
        torch.manual_seed(derived_seed(config.seed, "dropout", epoch))
        order = np.random.default_rng(derived_seed(config.seed, "shuffle", epoch)).permutation(
            len(train_items))
        encoder.train()
        if decoder is not None:
            decoder.train()
        bds, sizes = [], []
        for b in range(0, len(order), config.batch_size):
            items = [train_items[j] for j in order[b:b + config.batch_size]]
            x, v, f = data.batch(items)
            loss, bd = _step_loss(mode, encoder, decoder, x, v, f, config, extractor)
            if not torch.isfinite(loss):
                raise NumericalAbort(
                    f"non-finite loss at epoch {epoch}, batch {b // config.batch_size}: "
                    f"{bd.as_row()}")
            bd.check(config)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            bds.append(bd)
            sizes.append(len(items))
        train_bd = average_breakdowns(bds, sizes)

        val = evaluate_split(mode, encoder, decoder, data, split.val, config, extractor)
        sel = _selection_loss(mode, val[0] if val else train_bd)
        if sel < result.best_val:
            result.best_val = sel
            result.best_epoch = epoch
            best_state = OrderedDict((k, v.detach().clone())
                                     for k, v in _state_tensors(encoder, decoder).items())
        row = _history_row(epoch, train_bd, val)
        result.history.append(row)
        log.info("epoch %d train %.4f val %.4f pearson %.3f", epoch,
                 _selection_loss(mode, train_bd), sel, row["val_pearson"])

        if run_dir is not None:
            man = _manifest(mode, encoder_spec, decoder_spec, config, epoch,
                            history=result.history, best_epoch=result.best_epoch,
                            best_val=result.best_val if math.isfinite(result.best_val) else None)
            formats.save_checkpoint(run_dir / "checkpoints" / f"epoch_{epoch}.bin",
                                    _state_tensors(encoder, decoder, opt, best_state), man)
            write_history(run_dir / "history.csv", result.history)

    # restore best-validation parameters
    encoder.load_state_dict(_split_prefix(best_state, "encoder."))
    if decoder is not None:
        decoder.load_state_dict(_split_prefix(best_state, "decoder."))
    if run_dir is not None:
        man = _manifest(mode, encoder_spec, decoder_spec, config, result.best_epoch,
                        best_val=result.best_val if math.isfinite(result.best_val) else None)
        formats.save_checkpoint(run_dir / "best.bin", _state_tensors(encoder, decoder), man)
        write_history(run_dir / "history.csv", result.history)
    return result


def grid_search(epsilons, epoch_range, data: PairedData, split: SplitPlan,
                base_config: HyperConfig, encoder_spec: EncoderSpec,
                decoder_spec: DecoderSpec, extractor=None) -> list:
    """One cell per (epsilon, epochs), ranked by validation encoder correlation.

    Training is deterministic per epoch, so the run for the largest epoch
    count contains every shorter run as a prefix; each cell reads its
    best-validation checkpoint from that prefix instead of retraining.
    """
    epsilons = list(epsilons)
    epoch_range = sorted(int(e) for e in epoch_range)
    if not epsilons or not epoch_range:
        raise ValueError("grid_search needs nonempty epsilon and epoch grids")
    rows = []
    for eps in epsilons:
        cfg = dataclasses.replace(base_config, epsilon=eps, epochs=max(epoch_range))
        res = train("end_to_end", data, split, cfg, encoder_spec, decoder_spec, extractor)
        for n_ep in epoch_range:
            prefix = res.history[:n_ep]
            if not prefix:
                continue
            best = min(prefix, key=lambda r: (r["val_L_ED"] if not math.isnan(r["val_L_ED"])
                                              else r["train_L_ED"]))
            rows.append({"epsilon": eps, "epochs": n_ep, "best_epoch": best["epoch"],
                         "val_pearson": best["val_pearson"], "val_L_E": best["val_L_E"],
                         "val_L_D": best["val_L_D"], "val_L_ED": best["val_L_ED"],
                         "val_ssim": best["val_ssim"]})
    rows.sort(key=lambda r: (-_nan_low(r["val_pearson"]), r["epsilon"], r["epochs"]))
    for i, r in enumerate(rows):
        r["rank"] = i + 1
        r["best"] = i == 0
    return rows


def _nan_low(x):
    return -math.inf if math.isnan(x) else x
