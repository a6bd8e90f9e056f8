"""Semantic-guided ranking loss with uncertainty-weighted border quadruplets."""
from __future__ import annotations

import math

import numpy as np
import torch

from .sampler import SampledPoints

PROB_FLOOR = 1e-6


def belonging_indicator(label0, label1):
    """1 where the two binary labels differ, else 0."""
    if isinstance(label0, torch.Tensor) or isinstance(label1, torch.Tensor):
        return (torch.as_tensor(label0) != torch.as_tensor(label1)).long()
    if np.ndim(label0) or np.ndim(label1):
        return (np.asarray(label0) != np.asarray(label1)).astype(np.int64)
    return int(label0 != label1)


def pair_loss(d0, d1, ell):
    """``log(1 + exp(-|d0 - d1|))`` across borders, ``(d0 - d1)^2`` within a region."""
    d0, d1 = torch.as_tensor(d0), torch.as_tensor(d1)
    diff = d0 - d1
    ell = torch.as_tensor(ell, device=diff.device)
    # softplus(-x) == log(1 + exp(-x)) without overflow
    cross = torch.nn.functional.softplus(-diff.abs())
    return torch.where(ell.bool(), cross, diff * diff)


def uncertainty_weight(s1, n1):
    """``exp(-1 / max(s1/n1, n1/s1))``; always within ``[1/e, 1]``."""
    if isinstance(s1, torch.Tensor) or isinstance(n1, torch.Tensor):
        s1 = torch.as_tensor(s1).clamp(PROB_FLOOR, 1.0)
        n1 = torch.as_tensor(n1).clamp(PROB_FLOOR, 1.0)
        return torch.exp(-1.0 / torch.maximum(s1 / n1, n1 / s1))
    s1 = min(max(float(s1), PROB_FLOOR), 1.0)
    n1 = min(max(float(n1), PROB_FLOOR), 1.0)
    return math.exp(-1.0 / max(s1 / n1, n1 / s1))


def _gather(img, pts):
    pts = torch.as_tensor(np.asarray(pts), dtype=torch.long, device=img.device)
    return img[pts[..., 0], pts[..., 1]]


def total_ranking_loss(depth, sem_prob, mask, samples: SampledPoints, use_disparity=False,
                       return_terms=False):
    """Aggregate ranking loss for a single image.

    ``depth``, ``sem_prob`` and ``mask`` are ``H x W``. Each quadruplet
    contributes the pairs (S1, S2), (S1, N1), (N1, N2), all weighted by the
    quadruplet's uncertainty weight from ``sem_prob`` at (S1, N1); the weight is
    detached. Random in-region pairs are unweighted.
    """
    depth = depth.reshape(depth.shape[-2:])
    values = 1.0 / depth if use_disparity else depth
    mask = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    mask = (mask.reshape(depth.shape) > 0).long().to(depth.device)
    zero = depth.sum() * 0

    quad_term = zero
    if samples.J:
        q = samples.quads
        d = _gather(values, q)
        lab = _gather(mask, q)
        a, b = [0, 0, 2], [1, 2, 3]
        ell = belonging_indicator(lab[:, a], lab[:, b])
        losses = pair_loss(d[:, a], d[:, b], ell)
        prob = _gather(sem_prob.reshape(depth.shape).detach(), q)
        gamma = uncertainty_weight(prob[:, 0], prob[:, 2])
        quad_term = (gamma[:, None] * losses).sum() / (3 * samples.J)

    pair_term = zero
    if samples.K:
        p = samples.pairs
        d = _gather(values, p)
        lab = _gather(mask, p)
        ell = belonging_indicator(lab[:, 0], lab[:, 1])
        pair_term = pair_loss(d[:, 0], d[:, 1], ell).mean()

    total = quad_term + pair_term
    if return_terms:
        return total, quad_term, pair_term
    return total
