"""Cross-border point-quadruplet sampling on binary semantic labels.

For every label edge point a line ``n`` orthogonal to the border is traced.
The strongest image gradient within ``[-r, r]`` along ``n`` marks where the
real object border probably is, and the cross-border pair is placed so that
it clamps both the label edge and that gradient peak. Two more points are
placed further out on each side, giving three ranked pairs per edge point.
In-region pairs for the smoothness side of the ranking loss are drawn at
random.

All coordinates are integer ``(row, col)`` pairs. Sampling is plain numpy and
non-differentiable; the loss only gathers depth values at these indices.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class SamplerConfig:
    r: int = 5
    omega1: int = 1
    omega2_min: float = 2.5
    omega2_max: float = 10.0
    k_prime: int = 6000
    epsilon: int = 3
    max_edge_points: int = 4096
    foreground_only: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.r < 0 or self.omega1 < 0:
            raise ValueError("r and omega1 must be non-negative")
        if not 0 < self.omega2_min <= self.omega2_max:
            raise ValueError("need 0 < omega2_min <= omega2_max")
        if self.k_prime <= 0 or self.epsilon < 1:
            raise ValueError("k_prime must be positive and epsilon >= 1")


@dataclass
class Quadruplet:
    pS1: tuple
    pS2: tuple
    pN1: tuple
    pN2: tuple
    edge_point: tuple
    gradient_point: tuple

    def points(self):
        return np.array([self.pS1, self.pS2, self.pN1, self.pN2])


@dataclass
class PointPair:
    p1: tuple
    p2: tuple


@dataclass
class SampledPoints:
    """Array form of one image's samples, as consumed by the ranking loss.

    ``quads`` is ``J x 4 x 2`` ordered (S1, S2, N1, N2); ``pairs`` is ``K x 2 x 2``.
    """
    quads: np.ndarray = field(default_factory=lambda: np.zeros((0, 4, 2), np.int64))
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2), np.int64))
    num_edge_points: int = 0

    @property
    def J(self):
        return len(self.quads)

    @property
    def K(self):
        return len(self.pairs)


def _binary(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D label map, got shape {mask.shape}")
    return (mask > 0).astype(np.int8)


def extract_edge_points(mask) -> np.ndarray:
    """Pixels with at least one 4-neighbour of a different label, row-major."""
    m = _binary(mask)
    edge = np.zeros(m.shape, dtype=bool)
    dv = m[1:, :] != m[:-1, :]
    dh = m[:, 1:] != m[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return np.argwhere(edge)


def sobel(image):
    """``(gx, gy)`` 3x3 Sobel responses with replicated borders."""
    image = np.asarray(image, dtype=np.float64)
    return (ndimage.sobel(image, axis=1, mode="nearest"),
            ndimage.sobel(image, axis=0, mode="nearest"))


def image_gradient(image) -> np.ndarray:
    """Sobel magnitude of the grayscale image (``H x W x 3`` or ``3 x H x W``)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 3 and image.shape[-1] != 3:
        image = np.moveaxis(image, 0, -1)
    gray = image @ np.array([0.299, 0.587, 0.114]) if image.ndim == 3 else image
    gx, gy = sobel(gray)
    return np.hypot(gx, gy)


def _canonical(nx, ny):
    # sign convention: +x first, then +y
    flip = (nx < 0) | ((nx == 0) & (ny < 0))
    return np.where(flip, -nx, nx), np.where(flip, -ny, ny)


def edge_normals(mask, points):
    """Unit normals (``dx``, ``dy``) at many points at once; zero where undefined."""
    gx, gy = sobel(_binary(mask))
    points = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    nx, ny = gx[points[:, 0], points[:, 1]], gy[points[:, 0], points[:, 1]]
    norm = np.hypot(nx, ny)
    ok = norm > 0
    nx = np.divide(nx, norm, out=np.zeros_like(nx), where=ok)
    ny = np.divide(ny, norm, out=np.zeros_like(ny), where=ok)
    nx, ny = _canonical(nx, ny)
    return np.stack([nx, ny], -1), ok


def edge_normal(mask, p) -> np.ndarray:
    """Unit ``(dx, dy)`` normal of the label border at ``p = (row, col)``."""
    n, ok = edge_normals(mask, [p])
    if not ok[0]:
        raise ValueError(f"zero Sobel response at {tuple(p)}; no border normal")
    return n[0]


def _round(x):
    # round half away from zero, identical for scalar and vector paths
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _offsets_to_pixels(p_e, n, t):
    p_e = np.asarray(p_e, dtype=np.float64)
    rows = _round(p_e[..., 0, None] + t * n[..., 1, None]).astype(np.int64)
    cols = _round(p_e[..., 1, None] + t * n[..., 0, None]).astype(np.int64)
    return rows, cols


def find_max_gradient_point(image_grad, p_e, n, r: int) -> int:
    """Signed integer offset along ``n`` with the largest image gradient.

    Ties prefer the smallest ``|t|`` and then the negative side.
    """
    if r < 0:
        raise ValueError("r must be non-negative")
    h, w = image_grad.shape
    best_t, best_val = None, -np.inf
    for t in sorted(range(-r, r + 1), key=lambda t: (abs(t), t)):
        row = int(_round(p_e[0] + t * n[1]))
        col = int(_round(p_e[1] + t * n[0]))
        if not (0 <= row < h and 0 <= col < w):
            continue
        if image_grad[row, col] > best_val:
            best_t, best_val = t, image_grad[row, col]
    if best_t is None:
        raise ValueError(f"no in-bounds search position around {tuple(p_e)}")
    return best_t


def _max_gradient_offsets(image_grad, p_e, n, r):
    """Vectorised :func:`find_max_gradient_point` over ``P`` edge points."""
    h, w = image_grad.shape
    order = np.array(sorted(range(-r, r + 1), key=lambda t: (abs(t), t)), dtype=np.float64)
    rows, cols = _offsets_to_pixels(p_e, n, order)
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    vals = np.where(inside, image_grad[rows.clip(0, h - 1), cols.clip(0, w - 1)], -np.inf)
    # argmax returns the first maximum, i.e. the preferred tie-break order
    idx = vals.argmax(1)
    ok = inside.any(1)
    return order[idx].astype(np.int64), ok


def _assemble(mask, p_e, n, t_g, u_s, u_n, omega1):
    """Place the four points for each edge point; returns ``P x 4 x 2`` and a keep flag."""
    h, w = mask.shape
    t_low = np.minimum(0, t_g).astype(np.float64)
    t_high = np.maximum(0, t_g).astype(np.float64)
    ts = np.stack([t_low - omega1, t_low - omega1 - u_s,
                   t_high + omega1, t_high + omega1 + u_n], -1)
    rows = _round(p_e[:, 0, None] + ts * n[:, 1, None]).astype(np.int64)
    cols = _round(p_e[:, 1, None] + ts * n[:, 0, None]).astype(np.int64)
    pts = np.stack([rows, cols], -1)
    inside = ((rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)).all(1)
    labels = mask[rows.clip(0, h - 1), cols.clip(0, w - 1)]
    # name the sides so that S carries label 1 whenever the pair crosses
    swap = (labels[:, 0] == 0) & (labels[:, 2] == 1)
    pts[swap] = pts[swap][:, [2, 3, 0, 1]]
    labels[swap] = labels[swap][:, [2, 3, 0, 1]]
    consistent = (labels[:, 0] == labels[:, 1]) & (labels[:, 2] == labels[:, 3])
    return pts, inside & consistent


def sample_quadruplet(mask, image_grad, p_e, cfg: SamplerConfig, rng):
    """One quadruplet around edge point ``p_e`` or ``None`` when it has to be skipped.

    Points that fall outside the image, or whose outer point lands on a
    different label than its inner partner, are skipped.
    """
    m = _binary(mask)
    n = edge_normal(m, p_e)
    t_g = find_max_gradient_point(image_grad, p_e, n, cfg.r)
    u = rng.uniform(cfg.omega2_min, cfg.omega2_max, size=2)
    p = np.asarray(p_e, dtype=np.float64)[None]
    pts, keep = _assemble(m, p, n[None], np.array([t_g]), u[:1], u[1:], cfg.omega1)
    if not keep[0]:
        return None
    g = (int(_round(p[0, 0] + t_g * n[1])), int(_round(p[0, 1] + t_g * n[0])))
    q = [tuple(int(v) for v in pt) for pt in pts[0]]
    return Quadruplet(q[0], q[1], q[2], q[3], tuple(int(v) for v in p_e), g)


def sample_quadruplets(mask, image_grad, cfg: SamplerConfig, rng, r=None) -> np.ndarray:
    """Quadruplets for all (capped) edge points of ``mask``; ``J x 4 x 2``.

    Produces the same points as calling :func:`sample_quadruplet` per edge
    point with the same RNG draws, but vectorised.
    """
    r = cfg.r if r is None else r
    m = _binary(mask)
    edges = extract_edge_points(m)
    if len(edges) > cfg.max_edge_points:
        keep = np.sort(rng.choice(len(edges), cfg.max_edge_points, replace=False))
        edges = edges[keep]
    if len(edges) == 0:
        return np.zeros((0, 4, 2), np.int64)
    n, ok = edge_normals(m, edges)
    edges, n = edges[ok], n[ok]
    u = rng.uniform(cfg.omega2_min, cfg.omega2_max, size=(len(edges), 2))
    if len(edges) == 0:
        return np.zeros((0, 4, 2), np.int64)
    t_g, found = _max_gradient_offsets(np.asarray(image_grad, np.float64),
                                       edges.astype(np.float64), n, r)
    pts, keep = _assemble(m, edges.astype(np.float64), n, t_g, u[:, 0], u[:, 1], cfg.omega1)
    return pts[keep & found]


def sample_random_pairs(mask, cfg: SamplerConfig, rng, offset=None) -> np.ndarray:
    """Same-label point pairs (the set ``O``) as a ``K x 2 x 2`` array.

    ``K'`` first points are uniform over the image; partners sit at integer
    per-axis offsets in ``[-epsilon, epsilon]``. Pairs leaving the image or
    straddling a label change are discarded, so ``K`` varies per image.
    ``offset`` forces a fixed ``(drow, dcol)`` offset.
    """
    m = _binary(mask)
    h, w = m.shape
    k = cfg.k_prime
    p1 = np.stack([rng.integers(0, h, k), rng.integers(0, w, k)], -1)
    if offset is None:
        d = rng.integers(-cfg.epsilon, cfg.epsilon + 1, size=(k, 2))
    else:
        d = np.broadcast_to(np.asarray(offset, dtype=np.int64), (k, 2))
    p2 = p1 + d
    inside = (p2[:, 0] >= 0) & (p2[:, 0] < h) & (p2[:, 1] >= 0) & (p2[:, 1] < w)
    p1, p2 = p1[inside], p2[inside]
    l1, l2 = m[p1[:, 0], p1[:, 1]], m[p2[:, 0], p2[:, 1]]
    same = l1 == l2
    if cfg.foreground_only:
        same &= l1 == 1
    return np.stack([p1[same], p2[same]], 1)


def sample_points(mask, image, cfg: SamplerConfig, rng=None) -> SampledPoints:
    """Quadruplets plus random in-region pairs for one image."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    grad = image_gradient(image)
    quads = sample_quadruplets(mask, grad, cfg, rng)
    pairs = sample_random_pairs(mask, cfg, rng)
    return SampledPoints(quads, pairs, num_edge_points=len(extract_edge_points(mask)))


def direct_pairs(mask, cfg: SamplerConfig, rng) -> np.ndarray:
    """Cross pairs placed right beside the label edge (no gradient search)."""
    return sample_quadruplets(mask, np.zeros(np.shape(mask)), cfg, rng, r=0)


def inlier_rate(pairs, gt_mask) -> float:
    """Fraction of ``(pS1, pN1)`` pairs whose endpoints differ in ``gt_mask``.

    ``pairs`` may be ``P x 2 x 2`` or full ``J x 4 x 2`` quadruplets.
    """
    pairs = np.asarray(pairs)
    if len(pairs) == 0:
        raise ValueError("inlier_rate needs at least one pair")
    if pairs.shape[1] == 4:
        pairs = pairs[:, [0, 2]]
    gt = _binary(gt_mask)
    a = gt[pairs[:, 0, 0], pairs[:, 0, 1]]
    b = gt[pairs[:, 1, 0], pairs[:, 1, 1]]
    return float(np.mean(a != b))
