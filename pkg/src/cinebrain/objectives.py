"""Encoder, decoder and end-to-end training objectives.

All losses return ``(loss_tensor, LossBreakdown)``. The tensor carries the
autograd graph; the breakdown holds plain floats for logging.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class HyperConfig:
    alpha: float = 0.5
    beta: float = 0.35
    gamma: float = 0.35
    delta: float = 0.30
    epsilon: float = 0.5
    learning_rate: float = 1e-4
    epochs: int = 11
    seed: int = 0
    batch_size: int = 16

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown HyperConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class LossBreakdown:
    mse_v: float = math.nan
    cos_dist: float = math.nan
    L_E: float = math.nan
    psim: float = math.nan
    ssim_loss: float = math.nan
    tv: float = math.nan
    L_D: float = math.nan
    L_ED: float = math.nan
    zero_norm_count: int = 0

    FIELDS = ("mse_v", "cos_dist", "L_E", "psim", "ssim_loss", "tv", "L_D", "L_ED")

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}

    def merge(self, other: "LossBreakdown") -> "LossBreakdown":
        out = dataclasses.replace(self)
        for k in self.FIELDS:
            v = getattr(other, k)
            if not math.isnan(v):
                setattr(out, k, v)
        out.zero_norm_count = self.zero_norm_count + other.zero_norm_count
        return out

    def check(self, config: HyperConfig, tol: float = 1e-9) -> None:
        """Assert the recomposition identities for every populated total."""
        c = config
        if not math.isnan(self.L_E):
            assert abs(self.L_E - (self.mse_v + c.alpha * self.cos_dist)) <= tol
        if not math.isnan(self.L_D):
            want = c.beta * self.psim + c.gamma * self.ssim_loss + c.delta * self.tv
            assert abs(self.L_D - want) <= tol
        if not math.isnan(self.L_ED):
            want = c.epsilon * self.L_E + (1 - c.epsilon) * self.L_D
            assert abs(self.L_ED - want) <= tol


def average_breakdowns(items, weights) -> LossBreakdown:
    """Weighted average of breakdowns (weights are batch sizes)."""
    total = float(sum(weights))
    out = LossBreakdown()
    for k in LossBreakdown.FIELDS:
        vals = [getattr(b, k) for b in items]
        if all(math.isnan(v) for v in vals):
            continue
        setattr(out, k, math.fsum(v * w for v, w in zip(vals, weights)) / total)
    out.zero_norm_count = sum(b.zero_norm_count for b in items)
    return out


# ---------------------------------------------------------------------------
# encoder objective


def cosine_similarity_rows(v, v_hat):
    """Row-wise cosine similarity; rows with norm < 1e-12 get similarity 0."""
    # squared norms and the dot product use the same reduction, and
    # sqrt(fl(s * s)) == s, so cos(v, v) is exactly 1
    sv = (v * v).sum(dim=1)
    sh = (v_hat * v_hat).sum(dim=1)
    ok = (sv >= ZERO_NORM ** 2) & (sh >= ZERO_NORM ** 2)
    denom = torch.where(ok, torch.sqrt(sv * sh), torch.ones_like(sv))
    sim = (v * v_hat).sum(dim=1) / denom
    return torch.where(ok, sim, torch.zeros_like(sim)), int((~ok).sum())


def loss_encoder(v, v_hat, alpha: float = 0.5):
    """Voxel MSE plus ``alpha`` times cosine distance, averaged over the batch.

    Cosine distance is ``1 - cos(v, v_hat)``; minimizing it maximizes the
    similarity between predicted and measured activation patterns.
    """
    if v.shape != v_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(v.shape)} vs {tuple(v_hat.shape)}")
    if v.dim() == 1:
        v, v_hat = v.unsqueeze(0), v_hat.unsqueeze(0)
    mse = ((v - v_hat) ** 2).mean(dim=1).mean()
    sim, n_zero = cosine_similarity_rows(v, v_hat)
    cos_dist = (1.0 - sim).mean()
    loss = mse + alpha * cos_dist
    mse_f, cos_f = mse.item(), cos_dist.item()
    bd = LossBreakdown(mse_v=mse_f, cos_dist=cos_f, L_E=mse_f + alpha * cos_f,
                       zero_norm_count=n_zero)
    return loss, bd


# ---------------------------------------------------------------------------
# image terms


def gaussian_kernel_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
                    dtype=torch.float64) -> torch.Tensor:
    g = gaussian_kernel_1d(size, sigma)
    return torch.outer(g, g).to(dtype)


def _band_matrix(n: int, g: torch.Tensor) -> torch.Tensor:
    """[n, n - k + 1] matrix M with (z @ M)[j] = sum_i g[i] z[j + i] (valid filtering)."""
    k = g.numel()
    m = torch.zeros(n, n - k + 1, dtype=g.dtype)
    for j in range(n - k + 1):
        m[j:j + k, j] = g
    return m


def ssim_map(x, y, window_size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    """Local SSIM over valid Gaussian windows for [B, C, H, W] inputs in [0, 1]."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    _, c, h, w = x.shape
    if window_size > h or window_size > w:
        raise ValueError(f"SSIM window {window_size} larger than image {h}x{w}")
    # the window is separable; banded matmuls are much faster than a grouped
    # float64 conv on CPU
    g = gaussian_kernel_1d(window_size, sigma).to(x.dtype)
    mh = _band_matrix(h, g).to(x.device)
    mw = _band_matrix(w, g).to(x.device)

    def filt(z):
        return mh.transpose(0, 1) @ z @ mw

    mu_x = filt(x)
    mu_y = filt(y)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    s_xx = filt(x * x) - mu_xx
    s_yy = filt(y * y) - mu_yy
    s_xy = filt(x * y) - mu_xy
    num = (2 * mu_xy + SSIM_C1) * (2 * s_xy + SSIM_C2)
    den = (mu_xx + mu_yy + SSIM_C1) * (s_xx + s_yy + SSIM_C2)
    return num / den


def ssim_batch(x, y, window_size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    """Per-image SSIM for [B, 3, H, W] batches (channel-averaged)."""
    return ssim_map(x, y, window_size, sigma).flatten(1).mean(dim=1)


def ssim(f, g, window_size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    """SSIM of two [3, H, W] images with unit data range."""
    return ssim_batch(f.unsqueeze(0), g.unsqueeze(0), window_size, sigma)[0]


def tv_loss(img):
    """Anisotropic total variation: mean |dx| + mean |dy|.

    Accepts [3, H, W] or [B, 3, H, W]; batches are averaged per image.
    """
    if img.dim() == 3:
        img = img.unsqueeze(0)
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"tv_loss needs H, W >= 2, got {h}x{w}")
    dx = (img[..., :, 1:] - img[..., :, :-1]).abs().flatten(1).mean(dim=1)
    dy = (img[..., 1:, :] - img[..., :-1, :]).abs().flatten(1).mean(dim=1)
    return (dx + dy).mean()


# ---------------------------------------------------------------------------
# perceptual term

VGG16_STAGES = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ExtractorUnavailable(RuntimeError):
    pass


class FeaturePyramid(nn.Module):
    """Five-stage VGG16-topology feature extractor.

    Returns the post-ReLU activation at the end of each stage (relu1_2,
    relu2_2, relu3_3, relu4_3, relu5_3). ``width`` scales channel counts;
    width 1.0 is the real VGG16 layout and can hold pretrained weights.
    """

    def __init__(self, width: float = 1.0):
        super().__init__()
        self.width = width
        stages = []
        in_ch = 3
        for stage in VGG16_STAGES:
            layers = []
            for ch in stage:
                out_ch = max(1, int(round(ch * width)))
                layers += [nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.ReLU(inplace=False)]
                in_ch = out_ch
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x):
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = F.max_pool2d(x, 2, ceil_mode=True)
            x = stage(x)
            feats.append(x)
        return feats


def _freeze(m: nn.Module) -> nn.Module:
    m.eval()
    for p in m.parameters():
        p.requires_grad_(False)
    return m


def random_pyramid(seed: int = 0, width: float = 1.0) -> FeaturePyramid:
    """Fixed random-weight pyramid: the hermetic stand-in for pretrained VGG16."""
    gen = torch.Generator().manual_seed(seed)
    net = FeaturePyramid(width)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * 9
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                m.bias.zero_()
    return _freeze(net)


def pretrained_vgg16() -> FeaturePyramid:
    try:
        from torchvision.models import VGG16_Weights, vgg16
        src = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
    except Exception as exc:  # missing torchvision or weights download failed
        raise ExtractorUnavailable(f"pretrained VGG16 unavailable: {exc}") from exc
    net = FeaturePyramid(1.0)
    src_convs = [m for m in src if isinstance(m, nn.Conv2d)]
    dst_convs = [m for m in net.modules() if isinstance(m, nn.Conv2d)]
    with torch.no_grad():
        for s, d in zip(src_convs, dst_convs):
            d.weight.copy_(s.weight)
            d.bias.copy_(s.bias)
    return _freeze(net)


def make_extractor(kind: str = "auto", width: float = 1.0, seed: int = 0,
                   allow_fallback: bool = True) -> FeaturePyramid:
    """Build the perceptual feature extractor.

    kind: ``"vgg16"`` (pretrained, error if unavailable), ``"random"``
    (seeded fixed weights), or ``"auto"`` (pretrained, falling back to
    random when ``allow_fallback``).
    """
    if kind == "random":
        return random_pyramid(seed, width)
    if kind in ("vgg16", "auto"):
        try:
            return pretrained_vgg16()
        except ExtractorUnavailable:
            if kind == "auto" and allow_fallback:
                log.warning("pretrained VGG16 unavailable; using seeded random pyramid")
                return random_pyramid(seed, width)
            raise
    raise ValueError(f"unknown extractor kind {kind!r}")


def _unit_normalize(feat, eps: float = 1e-10):
    norm = torch.sqrt((feat * feat).sum(dim=1, keepdim=True) + eps)
    return feat / norm


def perceptual_loss(f, g, extractor):
    """Sum over the five stages of the MSE between channel-normalized features."""
    if extractor is None:
        raise ExtractorUnavailable("no perceptual extractor configured")
    if f.shape != g.shape:
        raise ValueError(f"shape mismatch: {tuple(f.shape)} vs {tuple(g.shape)}")
    if f.dim() == 3:
        f, g = f.unsqueeze(0), g.unsqueeze(0)
    feats_f = extractor(f)
    feats_g = extractor(g)
    if len(feats_f) != 5:
        raise ValueError(f"extractor must expose 5 stages, got {len(feats_f)}")
    total = 0.0
    for a, b in zip(feats_f, feats_g):
        total = total + ((_unit_normalize(a) - _unit_normalize(b)) ** 2).mean()
    return total


# ---------------------------------------------------------------------------
# decoder and combined objectives


def loss_decoder(f, f_hat, beta: float = 0.35, gamma: float = 0.35, delta: float = 0.30,
                 extractor=None):
    """beta * perceptual + gamma * (1 - SSIM) + delta * TV(f_hat)."""
    if f.shape != f_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(f.shape)} vs {tuple(f_hat.shape)}")
    if f.dim() == 3:
        f, f_hat = f.unsqueeze(0), f_hat.unsqueeze(0)
    if beta != 0.0:
        psim = perceptual_loss(f, f_hat, extractor)
    else:
        psim = torch.zeros((), dtype=f_hat.dtype)
    ssim_l = 1.0 - ssim_batch(f, f_hat).mean()
    tv = tv_loss(f_hat)
    loss = beta * psim + gamma * ssim_l + delta * tv
    p, s, t = psim.item(), ssim_l.item(), tv.item()
    bd = LossBreakdown(psim=p, ssim_loss=s, tv=t, L_D=beta * p + gamma * s + delta * t)
    return loss, bd


def loss_combined(v, v_hat, f, f_hat, config: HyperConfig, extractor=None):
    """epsilon * L_E + (1 - epsilon) * L_D."""
    le, bd_e = loss_encoder(v, v_hat, config.alpha)
    ld, bd_d = loss_decoder(f, f_hat, config.beta, config.gamma, config.delta, extractor)
    eps = config.epsilon
    loss = eps * le + (1.0 - eps) * ld
    bd = bd_e.merge(bd_d)
    bd.L_ED = eps * bd.L_E + (1.0 - eps) * bd.L_D
    return loss, bd
