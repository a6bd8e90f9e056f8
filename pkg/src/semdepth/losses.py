"""Photometric reprojection, edge-aware smoothness and semantic BCE losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

PROB_EPS = 1e-7


@dataclass(frozen=True)
class PhotometricConfig:
    alpha: float = 0.85
    ssim_window: int = 3
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def ssim(a: torch.Tensor, b: torch.Tensor, cfg: PhotometricConfig = PhotometricConfig()):
    """Per-pixel SSIM over ``cfg.ssim_window`` box windows with reflect padding."""
    _check_same_shape(a, b)
    k, pad = cfg.ssim_window, cfg.ssim_window // 2
    a = F.pad(a, (pad,) * 4, mode="reflect")
    b = F.pad(b, (pad,) * 4, mode="reflect")
    mu_a = F.avg_pool2d(a, k, 1)
    mu_b = F.avg_pool2d(b, k, 1)
    sigma_a = F.avg_pool2d(a * a, k, 1) - mu_a ** 2
    sigma_b = F.avg_pool2d(b * b, k, 1) - mu_b ** 2
    sigma_ab = F.avg_pool2d(a * b, k, 1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + cfg.c1) * (2 * sigma_ab + cfg.c2)
    den = (mu_a ** 2 + mu_b ** 2 + cfg.c1) * (sigma_a + sigma_b + cfg.c2)
    return num / den


def photometric_error(target, synth, cfg: PhotometricConfig = PhotometricConfig()):
    """``alpha/2 * (1 - SSIM) + (1 - alpha) * L1``, averaged over channels.

    Returns a ``B x 1 x H x W`` map.
    """
    _check_same_shape(target, synth)
    l1 = (target - synth).abs().mean(1, keepdim=True)
    if cfg.alpha == 0:
        return l1
    ssim_term = (1 - ssim(target, synth, cfg)).mean(1, keepdim=True) / 2
    return cfg.alpha * ssim_term + (1 - cfg.alpha) * l1


def min_reprojection_loss(target, synths, masks=None, cfg=PhotometricConfig(),
                          identity_sources=None, return_map=False):
    """Per-pixel minimum of the photometric error over source views, then mean.

    Pixels invalid in a source are excluded from that source's candidates and
    pixels invalid in every source are dropped from the mean. Passing the raw
    (unwarped) source frames as ``identity_sources`` enables auto-masking of
    stationary pixels.
    """
    if len(synths) == 0:
        raise ValueError("min_reprojection_loss needs at least one synthesized image")
    errors = []
    for i, synth in enumerate(synths):
        err = photometric_error(target, synth, cfg)
        if masks is not None and masks[i] is not None:
            err = torch.where(masks[i] > 0, err, torch.full_like(err, float("inf")))
        errors.append(err)
    errors = torch.cat(errors, 1)
    best, _ = errors.min(1, keepdim=True)
    valid = torch.isfinite(best)
    if identity_sources:
        ident = torch.cat([photometric_error(target, s, cfg) for s in identity_sources], 1)
        ident = ident + torch.randn_like(ident) * 1e-5
        valid = valid & (best < ident.min(1, keepdim=True)[0])
    per_pixel = torch.where(valid, best, torch.zeros_like(best))
    loss = per_pixel.sum() / valid.sum().clamp(min=1)
    if return_map:
        return loss, per_pixel, valid
    return loss


def smoothness_loss(disp: torch.Tensor, image: torch.Tensor):
    """Edge-aware first-order smoothness of mean-normalised disparity."""
    if disp.dim() == 2:
        disp = disp[None, None]
    if image.dim() == 3:
        image = image[None]
    if disp.shape[-2:] != image.shape[-2:]:
        raise ValueError(f"disp {tuple(disp.shape)} and image {tuple(image.shape)} differ in size")
    mean_disp = disp.mean((2, 3), keepdim=True)
    disp = disp / (mean_disp + 1e-7)

    grad_disp_x = (disp[:, :, :, :-1] - disp[:, :, :, 1:]).abs()
    grad_disp_y = (disp[:, :, :-1, :] - disp[:, :, 1:, :]).abs()
    grad_img_x = (image[:, :, :, :-1] - image[:, :, :, 1:]).abs().mean(1, keepdim=True)
    grad_img_y = (image[:, :, :-1, :] - image[:, :, 1:, :]).abs().mean(1, keepdim=True)

    grad_disp_x = grad_disp_x * torch.exp(-grad_img_x)
    grad_disp_y = grad_disp_y * torch.exp(-grad_img_y)
    return grad_disp_x.mean() + grad_disp_y.mean()


def bce_loss(pred_prob: torch.Tensor, label: torch.Tensor):
    label = label.to(pred_prob.dtype)
    if bool(((label != 0) & (label != 1)).any()):
        raise ValueError("bce_loss labels must be 0 or 1")
    p = pred_prob.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(label * torch.log(p) + (1 - label) * torch.log(1 - p)).mean()
