"""Synthetic driving-like scenes, dataset folders and KITTI-format loading.

Synthetic scenes are ray cast: a textured ground plane, a textured backdrop
wall and a handful of fronto-parallel rectangles standing on the ground. All
three frames of a triplet are rendered from the same world, so warping a
source frame with the ground-truth depth and pose reproduces the target up to
interpolation and occlusion.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image
from scipy import ndimage

from .geometry import Intrinsics, Pose

# 19 Cityscapes training classes plus a catch-all, matching the 20-channel segmap
CATEGORIES = (
    "road", "sidewalk", "building", "wall", "fence", "pole", "traffic light",
    "traffic sign", "vegetation", "terrain", "sky", "person", "rider", "car",
    "truck", "bus", "train", "motorcycle", "bicycle", "others",
)
CATEGORY_ID = {name: i for i, name in enumerate(CATEGORIES)}


@dataclass(frozen=True)
class CategoryTable:
    foreground: frozenset = frozenset({
        "traffic sign", "person", "rider", "car", "truck", "bus", "train",
        "motorcycle", "bicycle", "traffic light"})
    background: frozenset = frozenset({
        "road", "sidewalk", "building", "wall", "fence", "pole", "vegetation",
        "terrain", "sky", "others"})
    names: tuple = CATEGORIES

    def __post_init__(self):
        overlap = set(self.foreground) & set(self.background)
        if overlap:
            raise ValueError(f"categories listed as both foreground and background: {sorted(overlap)}")

    def lookup(self) -> dict:
        """``category id -> 0/1`` for every id the table covers."""
        out = {}
        for i, name in enumerate(self.names):
            if name in self.foreground:
                out[i] = 1
            elif name in self.background:
                out[i] = 0
        return out


def binarize_semantics(full, table: CategoryTable = CategoryTable()) -> np.ndarray:
    full = np.asarray(full)
    lut_map = table.lookup()
    ids = np.unique(full)
    unmapped = [int(i) for i in ids if int(i) not in lut_map]
    if unmapped:
        raise ValueError(f"category id {unmapped[0]} is not in the foreground/background table"
                         + (f" (also unmapped: {unmapped[1:]})" if len(unmapped) > 1 else ""))
    lut = np.zeros(int(max(ids.max(initial=0), max(lut_map))) + 1, dtype=np.uint8)
    for i, v in lut_map.items():
        lut[i] = v
    return lut[full]


def one_hot_labels(label, num_classes: int) -> np.ndarray:
    """``H x W`` ids to ``C x H x W`` float32 one-hot."""
    label = np.asarray(label).astype(np.int64)
    if label.size and (label.min() < 0 or label.max() >= num_classes):
        raise ValueError(f"label id {int(label.max())} does not fit {num_classes} classes")
    return np.eye(num_classes, dtype=np.float32)[label].transpose(2, 0, 1).copy()


@dataclass
class SceneSample:
    triplet: list
    intrinsics: Intrinsics
    binary_label: np.ndarray
    gt_depth: np.ndarray | None = None
    full_labels: np.ndarray | None = None
    clean_binary_label: np.ndarray | None = None
    poses: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.triplet) != 3:
            raise ValueError("a scene needs exactly three frames (prev, curr, next)")
        shapes = {np.shape(f) for f in self.triplet}
        if len(shapes) != 1:
            raise ValueError(f"triplet frames differ in size: {shapes}")

    @property
    def target(self):
        return self.triplet[1]


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 192
    num_objects: tuple = (2, 6)
    object_depth: tuple = (2.0, 30.0)
    object_gap_px: float = 12.0
    min_object_px: float = 12.0
    placement_attempts: int = 50
    backdrop_depth: tuple = (85.0, 95.0)
    camera_height: float = 1.65
    speed: tuple = (0.3, 0.9)
    lateral_jitter: float = 0.05
    max_yaw_deg: float = 0.5
    noise_radius: int = 0
    supersample: int = 3
    texture_amplitude: float = 0.12
    motion: bool = True


# --- procedural texture -------------------------------------------------------

def _value_noise(u, v, lattice):
    """Smooth value noise on a periodic lattice, evaluated at continuous coords."""
    n = lattice.shape[0]
    iu, iv = np.floor(u), np.floor(v)
    fu, fv = u - iu, v - iv
    fu, fv = fu * fu * (3 - 2 * fu), fv * fv * (3 - 2 * fv)
    iu, iv = iu.astype(np.int64) % n, iv.astype(np.int64) % n
    iu1, iv1 = (iu + 1) % n, (iv + 1) % n
    a = lattice[iu, iv] * (1 - fu) + lattice[iu1, iv] * fu
    b = lattice[iu, iv1] * (1 - fu) + lattice[iu1, iv1] * fu
    return a * (1 - fv) + b * fv


@dataclass
class _Texture:
    base: np.ndarray
    tint: np.ndarray
    lattices: list
    scales: list
    amplitude: float

    @classmethod
    def random(cls, rng, base, scales, amplitude):
        lattices = [rng.uniform(-1, 1, size=(64, 64)) for _ in scales]
        tint = rng.uniform(0.6, 1.0, size=3)
        return cls(np.asarray(base, np.float64), tint, lattices, list(scales), amplitude)

    def __call__(self, u, v):
        val = np.zeros_like(u)
        for k, (lat, s) in enumerate(zip(self.lattices, self.scales)):
            val += _value_noise(u / s, v / s, lat) / (k + 1)
        val *= self.amplitude / sum(1.0 / (k + 1) for k in range(len(self.scales)))
        return np.clip(self.base[None] + val[:, None] * self.tint[None], 0, 1)


# --- scene description and rendering -----------------------------------------

@dataclass
class _Rect:
    z: float
    x0: float
    x1: float
    y_top: float
    category: int
    texture: _Texture


def _contrasting_colour(rng):
    """Random hue with luminance far from the grey background surfaces, so the
    object outline is the strongest local image edge."""
    rgb = rng.uniform(0.0, 1.0, 3)
    lum = float(rgb @ _LUMA)
    if rng.random() < 0.5:
        target = rng.uniform(0.02, 0.12)
        return rgb * target / max(lum, 1e-6)
    target = rng.uniform(0.85, 0.95)
    return 1 - (1 - rgb) * (1 - target) / max(1 - lum, 1e-6)


_LUMA = np.array([0.299, 0.587, 0.114])


def _yaw(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])


class SyntheticWorld:
    def __init__(self, seed: int, cfg: SceneConfig):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.K = Intrinsics.kitti_like(cfg.width, cfg.height)
        h = cfg.camera_height
        self.ground_y = h
        self.road_half_width = rng.uniform(3.0, 5.0)
        self.backdrop_z = rng.uniform(*cfg.backdrop_depth)
        # ground textures live in inverse-distance coordinates (see _ground_uv)
        self.road_tex = _Texture.random(rng, rng.uniform(0.3, 0.4, 3), [8.0, 2.0, 0.5], cfg.texture_amplitude)
        self.walk_tex = _Texture.random(rng, rng.uniform(0.45, 0.55, 3), [8.0, 2.0, 0.5], cfg.texture_amplitude)
        self.back_tex = _Texture.random(rng, rng.uniform(0.5, 0.65, 3), [8.0, 3.0, 1.0], cfg.texture_amplitude)
        fg = ["car", "person", "truck", "bus", "traffic sign", "rider", "bicycle", "motorcycle"]
        self.rects = []
        spans = []
        target = rng.integers(cfg.num_objects[0], cfg.num_objects[1] + 1)
        for _ in range(cfg.placement_attempts):
            if len(self.rects) == target:
                break
            z = rng.uniform(*cfg.object_depth)
            u_c = rng.uniform(0.1, 0.9) * cfg.width
            x_c = z * (u_c - self.K.cx) / self.K.fx
            w = rng.uniform(0.8, 3.5)
            height = rng.uniform(1.0, 3.5)
            base = _contrasting_colour(rng)
            tex = _Texture.random(rng, base, [max(0.25 * z, 0.6), max(0.1 * z, 0.25), max(0.03 * z, 0.1)],
                                  cfg.texture_amplitude)
            # keep objects apart in the image so every border is isolated
            half = self.K.fx * w / (2 * z)
            span = (u_c - half - cfg.object_gap_px, u_c + half + cfg.object_gap_px)
            tall = self.K.fy * height / z
            if min(2 * half, tall) < cfg.min_object_px or any(span[0] < b and a < span[1] for a, b in spans):
                continue
            spans.append(span)
            self.rects.append(_Rect(z, x_c - w / 2, x_c + w / 2, h - height,
                                    CATEGORY_ID[fg[rng.integers(len(fg))]], tex))
        # camera-to-world poses for (prev, curr, next)
        if cfg.motion:
            speed = rng.uniform(*cfg.speed)
            poses = []
            for sign in (-1, 1):
                t = np.array([rng.normal(0, cfg.lateral_jitter), rng.normal(0, cfg.lateral_jitter / 2),
                              sign * speed])
                poses.append(Pose(_yaw(rng.uniform(-cfg.max_yaw_deg, cfg.max_yaw_deg)), t))
            self.cam_poses = [poses[0], Pose.identity(), poses[1]]
        else:
            self.cam_poses = [Pose.identity()] * 3
        self.noise_ops = [(int(rng.integers(0, cfg.noise_radius + 1)), bool(rng.integers(2)))
                          for _ in self.rects]

    def render(self, cam: Pose, ss=None):
        """Returns ``(rgb, depth, labels, object_index)`` for a camera-to-world pose."""
        cfg = self.cfg
        ss = cfg.supersample if ss is None else ss
        if ss % 2 == 0:
            raise ValueError("supersample factor must be odd so one sample sits on the pixel centre")
        H, W = cfg.height, cfg.width
        offs = (np.arange(ss) + 0.5) / ss - 0.5
        ys = (np.arange(H)[:, None] + offs[None]).reshape(-1)
        xs = (np.arange(W)[:, None] + offs[None]).reshape(-1)
        v, u = np.meshgrid(ys, xs, indexing="ij")
        dirs_c = np.stack([(u - self.K.cx) / self.K.fx, (v - self.K.cy) / self.K.fy,
                           np.ones_like(u)], -1).reshape(-1, 3)
        dirs = dirs_c @ cam.rotation.T
        o = cam.translation
        n = len(dirs)
        best = np.full(n, np.inf)
        surf = np.full(n, -1)

        with np.errstate(divide="ignore", invalid="ignore"):
            s_back = (self.backdrop_z - o[2]) / dirs[:, 2]
            s_back[~(s_back > 0)] = np.inf
            best, surf = np.where(s_back < best, s_back, best), np.where(s_back < best, 0, surf)
            s_ground = (self.ground_y - o[1]) / dirs[:, 1]
            s_ground[~(dirs[:, 1] > 1e-9) | ~(s_ground > 0)] = np.inf
            take = s_ground < best
            best, surf = np.where(take, s_ground, best), np.where(take, 1, surf)
            for i, r in enumerate(self.rects):
                s = (r.z - o[2]) / dirs[:, 2]
                px, py = o[0] + s * dirs[:, 0], o[1] + s * dirs[:, 1]
                hit = (s > 0) & (px >= r.x0) & (px <= r.x1) & (py >= r.y_top) & (py <= self.ground_y)
                take = hit & (s < best)
                best, surf = np.where(take, s, best), np.where(take, 2 + i, surf)

        pts = o[None] + best[:, None] * dirs
        rgb = np.zeros((n, 3))
        labels = np.full(n, CATEGORY_ID["building"])
        m = surf == 0
        rgb[m] = self.back_tex(pts[m, 0], pts[m, 1])
        m = surf == 1
        road = m & (np.abs(pts[:, 0]) < self.road_half_width)
        walk = m & ~road
        rgb[road] = self.road_tex(*self._ground_uv(pts[road]))
        rgb[walk] = self.walk_tex(*self._ground_uv(pts[walk]))
        labels[road] = CATEGORY_ID["road"]
        labels[walk] = CATEGORY_ID["sidewalk"]
        for i, r in enumerate(self.rects):
            m = surf == 2 + i
            rgb[m] = r.texture(pts[m, 0], pts[m, 1])
            labels[m] = r.category

        # depth along the camera's optical axis
        depth = best * dirs_c[:, 2]
        rgb = rgb.reshape(H, ss, W, ss, 3).mean((1, 3))
        centre = ss // 2
        depth = depth.reshape(H, ss, W, ss)[:, centre, :, centre]
        labels = labels.reshape(H, ss, W, ss)[:, centre, :, centre]
        obj = (surf.reshape(H, ss, W, ss)[:, centre, :, centre] - 2)
        return rgb.astype(np.float32), depth.astype(np.float32), labels.astype(np.uint8), obj

    def _ground_uv(self, pts):
        # world-anchored, but roughly one texture unit per target-view pixel at
        # every distance, so the far ground does not alias
        z = np.maximum(pts[:, 2], 0.5)
        return self.K.fx * pts[:, 0] / z, self.K.fy * self.ground_y / z

    def noisy_binary(self, obj_index):
        """Per-object dilation/erosion of the clean mask, emulating pseudo-label bleeding."""
        out = np.zeros(obj_index.shape, dtype=bool)
        for i, (radius, dilate) in enumerate(self.noise_ops):
            m = obj_index == i
            if radius > 0 and m.any():
                # square element: borders shift by ``radius`` and corners stay square
                square = np.ones((2 * radius + 1,) * 2, dtype=bool)
                op = ndimage.binary_dilation if dilate else ndimage.binary_erosion
                m = op(m, structure=square, border_value=0 if dilate else 1)
            out |= m
        return out.astype(np.uint8)


def generate_synthetic_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> SceneSample:
    world = SyntheticWorld(seed, cfg)
    frames = []
    for pose in world.cam_poses:
        rgb, depth, labels, obj = world.render(pose)
        frames.append((rgb, depth, labels, obj))
    rgb, depth, labels, obj = frames[1]
    clean = binarize_semantics(labels)
    noisy = world.noisy_binary(obj) if cfg.noise_radius > 0 else clean.copy()
    # target-to-source transforms used to warp each source frame into the target view
    rel = {name: (world.cam_poses[i].inverse() @ world.cam_poses[1])
           for i, name in ((0, "prev"), (2, "next"))}
    return SceneSample(
        triplet=[f[0] for f in frames], intrinsics=world.K, binary_label=noisy,
        gt_depth=depth, full_labels=labels, clean_binary_label=clean,
        poses=rel,
        meta={"seed": int(seed), "scene_config": asdict(cfg),
              "camera_to_world": {n: world.cam_poses[i].matrix().tolist()
                                  for i, n in enumerate(("prev", "curr", "next"))},
              "target_to_source": {k: v.matrix().tolist() for k, v in rel.items()}},
    )


# --- image IO --------------------------------------------------------------------

def save_rgb(path, img):
    Image.fromarray((np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)).save(path)


def load_rgb(path, size=None):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"image not found: {path}")
    im = Image.open(path).convert("RGB")
    if size is not None and im.size != (size[1], size[0]):
        im = im.resize((size[1], size[0]), Image.BILINEAR)
    return np.asarray(im, dtype=np.float32) / 255.0


def save_depth_png(path, depth):
    """16-bit PNG holding meters x 256; zero marks missing depth."""
    val = np.clip(np.round(np.nan_to_num(np.asarray(depth, np.float64)) * 256.0), 0, 65535)
    Image.fromarray(val.astype(np.uint16)).save(path)


def load_depth_png(path):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"depth file not found: {path}")
    arr = np.asarray(Image.open(path)).astype(np.float32)
    return arr / 256.0


def save_label_png(path, label):
    Image.fromarray(np.asarray(label).astype(np.uint8)).save(path)


def load_label_png(path, size=None):
    if not os.path.isfile(path):
        raise FileNotFoundError(f"label file not found: {path}")
    im = Image.open(path)
    if size is not None and im.size != (size[1], size[0]):
        im = im.resize((size[1], size[0]), Image.NEAREST)
    return np.asarray(im).astype(np.int64)


# --- synthetic dataset folders -------------------------------------------------------

FRAME_FILES = ("img_prev.png", "img_curr.png", "img_next.png")


def write_scene(sample: SceneSample, directory):
    os.makedirs(directory, exist_ok=True)
    for name, img in zip(FRAME_FILES, sample.triplet):
        save_rgb(os.path.join(directory, name), img)
    if sample.gt_depth is not None:
        save_depth_png(os.path.join(directory, "depth.png"), sample.gt_depth)
    if sample.full_labels is not None:
        save_label_png(os.path.join(directory, "sem_full.png"), sample.full_labels)
    save_label_png(os.path.join(directory, "sem_binary.png"), sample.binary_label)
    sample.intrinsics.save(os.path.join(directory, "intrinsics.txt"))
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump(sample.meta, f, indent=2, sort_keys=True)


def read_scene(directory, size=None) -> SceneSample:
    """Load one ``NNNNN/`` scene folder; missing optional files are left as ``None``."""
    def p(name):
        return os.path.join(directory, name)

    for name in FRAME_FILES + ("sem_binary.png", "intrinsics.txt"):
        if not os.path.isfile(p(name)):
            raise FileNotFoundError(f"missing {p(name)}")
    K = Intrinsics.load(p("intrinsics.txt"))
    frames = [load_rgb(p(n), size) for n in FRAME_FILES]
    h, w = frames[0].shape[:2]
    if (w, h) != (K.width, K.height):
        K = K.scaled(w, h)
    depth = load_depth_png(p("depth.png")) if os.path.isfile(p("depth.png")) else None
    if depth is not None and depth.shape != (h, w):
        depth = None if size is None else _resize_nearest(depth, (h, w))
    full = load_label_png(p("sem_full.png"), (h, w)) if os.path.isfile(p("sem_full.png")) else None
    binary = load_label_png(p("sem_binary.png"), (h, w)).astype(np.uint8)
    meta, poses = {}, {}
    if os.path.isfile(p("meta.json")):
        with open(p("meta.json")) as f:
            meta = json.load(f)
        poses = {k: Pose.from_matrix(v) for k, v in meta.get("target_to_source", {}).items()}
    clean = binarize_semantics(full) if full is not None else None
    return SceneSample(frames, K, binary, depth, full, clean, poses, meta)


def _resize_nearest(arr, size):
    return np.asarray(Image.fromarray(arr).resize((size[1], size[0]), Image.NEAREST))


def list_scenes(root):
    if not os.path.isdir(root):
        raise FileNotFoundError(f"dataset directory not found: {root}")
    return sorted(os.path.join(root, d) for d in os.listdir(root)
                  if d.isdigit() and os.path.isdir(os.path.join(root, d)))


class SceneDataset:
    """Scenes from a folder written by :func:`write_scene` (``NNNNN/`` subfolders)."""

    def __init__(self, root, size=None):
        self.dirs = list_scenes(root)
        self.size = size

    def __len__(self):
        return len(self.dirs)

    def __getitem__(self, i):
        return read_scene(self.dirs[i], self.size)


def generate_dataset(out_dir, num_scenes, cfg: SceneConfig, seed=0):
    """Write ``num_scenes`` scenes; scene ``i`` uses seed ``seed * 100003 + i``."""
    os.makedirs(out_dir, exist_ok=True)
    for i in range(num_scenes):
        write_scene(generate_synthetic_scene(scene_seed(seed, i), cfg),
                    os.path.join(out_dir, f"{i:05d}"))


def scene_seed(seed, index):
    return int(seed) * 100003 + int(index)


# --- KITTI-format loading -----------------------------------------------------------

def _parse_frame_id(frame_id):
    parts = str(frame_id).split()
    if len(parts) < 2:
        raise ValueError(f"frame id {frame_id!r} should look like '<drive folder> <index> [l|r]'")
    side = parts[2] if len(parts) > 2 else "l"
    return parts[0], int(parts[1]), {"l": "image_02", "r": "image_03"}[side]


def _read_kitti_calib(path, camera):
    key = "P_rect_02" if camera == "image_02" else "P_rect_03"
    with open(path) as f:
        for line in f:
            if line.startswith(key + ":"):
                P = np.array([float(v) for v in line.split(":", 1)[1].split()]).reshape(3, 4)
                return P
    raise ValueError(f"{path}: no {key} entry")


def load_kitti_triplet(root, frame_id, size=(192, 640), img_ext=".png",
                       semantic_dir="semantic") -> SceneSample:
    """Load ``(n-1, n, n+1)`` from a raw-sync style tree.

    ``frame_id`` is ``"<drive folder> <index> [l|r]"`` as in the Eigen split
    files. Intrinsics come from ``<drive>/intrinsics.txt`` or, failing that,
    ``calib_cam_to_cam.txt`` in the date folder. Depth (16-bit PNG, value/256
    m) and semantic id maps are optional.
    """
    folder, idx, cam = _parse_frame_id(frame_id)
    drive = os.path.join(root, folder)
    names = [f"{i:010d}" for i in (idx - 1, idx, idx + 1)]
    paths = [os.path.join(drive, cam, "data", n + img_ext) for n in names]
    for path in paths:
        if not os.path.isfile(path):
            raise FileNotFoundError(f"missing KITTI frame: {path}")
    raw = Image.open(paths[1])
    orig_w, orig_h = raw.size
    frames = [load_rgb(p, size) for p in paths]

    k_txt = os.path.join(drive, "intrinsics.txt")
    calib = os.path.join(os.path.dirname(drive), "calib_cam_to_cam.txt")
    if os.path.isfile(k_txt):
        K = Intrinsics.load(k_txt)
    elif os.path.isfile(calib):
        P = _read_kitti_calib(calib, cam)
        K = Intrinsics(P[0, 0], P[1, 1], P[0, 2], P[1, 2], orig_w, orig_h)
    else:
        raise FileNotFoundError(f"no intrinsics: expected {k_txt} or {calib}")
    K = K.scaled(size[1], size[0])

    depth_path = os.path.join(drive, "proj_depth", "groundtruth", cam, names[1] + ".png")
    depth = load_depth_png(depth_path) if os.path.isfile(depth_path) else None

    sem_path = os.path.join(drive, semantic_dir, cam, names[1] + ".png")
    full = binary = None
    if os.path.isfile(sem_path):
        full = load_label_png(sem_path, size)
        binary = binarize_semantics(full)
    else:
        binary = np.zeros(size, np.uint8)
    return SceneSample(frames, K, binary, depth, full, None,
                       meta={"frame_id": str(frame_id), "has_labels": full is not None})
