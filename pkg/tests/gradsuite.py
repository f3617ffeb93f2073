"""Central finite-difference checks for every layer kind and loss term (float64)."""

import dataclasses

import numpy as np
import torch

from cinebrain.models import (build_decoder, build_encoder, tiny_decoder_spec,
                              tiny_encoder_spec)
from cinebrain.objectives import (HyperConfig, cosine_similarity_rows, loss_combined,
                                  loss_encoder, perceptual_loss, random_pyramid, ssim_batch,
                                  tv_loss)

FD_STEP = 1e-6
COORDS = 8
TOL = 1e-4
V = 12


def fd_errors(closure, tensors, n_coords=COORDS, h=FD_STEP, seed=0):
    """Norm-wise relative error between autograd and central differences, per tensor.

    closure() must return a float64 scalar and be a pure function of ``tensors``.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.requires_grad_(True)
    grads = torch.autograd.grad(closure(), tensors, allow_unused=True)
    errs = []
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        ad = g.reshape(-1)[idx].numpy()
        fd = np.empty(len(idx))
        with torch.no_grad():
            for n, i in enumerate(idx):
                old = flat[i].item()
                flat[i] = old + h
                fp = closure().item()
                flat[i] = old - h
                fm = closure().item()
                flat[i] = old
                fd[n] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(ad), np.linalg.norm(fd))
        diff = np.linalg.norm(ad - fd)
        errs.append(diff / denom if denom > 1e-9 else diff)
    return errs


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _generic_point(module, seed):
    """Random running statistics, plus nonzero biases so no ReLU input sits exactly on its kink."""
    g = _gen(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    for m in module.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            m.running_mean.copy_(0.3 * torch.randn(m.running_mean.shape, generator=g))
            m.running_var.copy_(0.5 + torch.rand(m.running_var.shape, generator=g))


def _encoder_case(train, dropout=0.0):
    spec = dataclasses.replace(tiny_encoder_spec(V), dropout_rate=dropout)
    enc = build_encoder(spec, seed=1).double()
    _generic_point(enc, 2)
    enc.train(train)
    x = torch.rand(3, 32, 3, 32, 32, generator=_gen(3), dtype=torch.float64)
    w = torch.randn(3, V, generator=_gen(4), dtype=torch.float64)

    def closure():
        if dropout:
            torch.manual_seed(123)  # same dropout mask on every evaluation
        return (enc(x) * w).sum()
    return closure, [x] + list(enc.parameters())


def _decoder_case(train):
    dec = build_decoder(tiny_decoder_spec(V), seed=1).double()
    _generic_point(dec, 2)
    dec.train(train)
    v = torch.randn(3, V, generator=_gen(3), dtype=torch.float64)
    w = torch.randn(3, 3, 32, 32, generator=_gen(4), dtype=torch.float64)
    return (lambda: (dec(v) * w).sum()), [v] + list(dec.parameters())


def _pair(seed, shape):
    a = torch.rand(shape, generator=_gen(seed), dtype=torch.float64)
    b = torch.rand(shape, generator=_gen(seed + 1), dtype=torch.float64)
    return a, b


def _mse_case():
    v, vh = torch.randn(2, 4, V, generator=_gen(5), dtype=torch.float64)
    return (lambda: loss_encoder(v, vh, alpha=0.0)[0]), [vh]


def _cos_case():
    v, vh = torch.randn(2, 4, V, generator=_gen(6), dtype=torch.float64)
    return (lambda: (1 - cosine_similarity_rows(v, vh)[0]).mean()), [vh]


def _ssim_case():
    f, fh = _pair(7, (2, 3, 16, 16))
    return (lambda: 1 - ssim_batch(f, fh).mean()), [fh]


def _tv_case():
    _, fh = _pair(8, (2, 3, 16, 16))
    return (lambda: tv_loss(fh)), [fh]


def _psim_case():
    ext = random_pyramid(seed=0, width=0.0625).double()
    f, fh = _pair(9, (2, 3, 32, 32))
    return (lambda: perceptual_loss(f, fh, ext)), [fh]


def _combined_case():
    enc = build_encoder(tiny_encoder_spec(V), seed=1).double().train()
    dec = build_decoder(tiny_decoder_spec(V), seed=2).double().train()
    ext = random_pyramid(seed=0, width=0.0625).double()
    x = torch.rand(2, 32, 3, 32, 32, generator=_gen(10), dtype=torch.float64)
    v = torch.randn(2, V, generator=_gen(11), dtype=torch.float64)
    f = torch.rand(2, 3, 32, 32, generator=_gen(12), dtype=torch.float64)
    _generic_point(enc, 13)
    _generic_point(dec, 14)
    cfg = HyperConfig()

    def closure():
        vh = enc(x)
        return loss_combined(v, vh, f, dec(vh), cfg, ext)[0]
    return closure, list(enc.parameters()) + list(dec.parameters())


CASES = {
    "encoder_train_bn": lambda: _encoder_case(True),
    "encoder_eval_bn": lambda: _encoder_case(False),
    "encoder_dropout_train": lambda: _encoder_case(True, dropout=0.25),
    "encoder_dropout_eval": lambda: _encoder_case(False, dropout=0.25),
    "decoder_train_bn": lambda: _decoder_case(True),
    "decoder_eval_bn": lambda: _decoder_case(False),
    "loss_mse": _mse_case,
    "loss_cosine": _cos_case,
    "loss_ssim": _ssim_case,
    "loss_tv": _tv_case,
    "loss_psim": _psim_case,
    "loss_combined": _combined_case,
}


def run_case(name):
    closure, tensors = CASES[name]()
    return max(fd_errors(closure, tensors))
