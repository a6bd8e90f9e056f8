"""Training loop, total objective and per-image online refinement."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from PIL import Image

from .data import SceneSample, one_hot_labels
from .geometry import disp_to_depth, invert_transform, reproject
from .losses import PhotometricConfig, bce_loss, min_reprojection_loss, smoothness_loss
from .metrics import depth_edge_score, depth_metrics, mean_metrics
from .networks import DepthSemNet, NetworkConfig, PoseNet
from .ranking import total_ranking_loss
from .sampler import SampledPoints, SamplerConfig, sample_points

TERMS = ("photometric", "semantic", "smoothness", "ranking")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay_epochs: int = 15
    lr_decay_factor: float = 0.1
    batch_size: int = 12
    epochs: int = 20
    delta_s: float = 1e-3
    delta_r: float = 1e-3
    alpha: float = 0.85
    seed: int = 0
    use_ssfa: bool = True
    use_srl: bool = True
    automask: bool = False
    scales: tuple = (0, 1, 2, 3)
    grad_clip: float = 10.0
    rank_on_disparity: bool = False
    refine_iters: int = 20
    refine_lr: float | None = None
    overlay_every: int = 0

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        for name in ("lr", "delta_s", "delta_r", "grad_clip", "lr_decay_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_decay_epochs < 1:
            raise ValueError("batch_size and lr_decay_epochs must be >= 1, epochs >= 0")

    @classmethod
    def toy(cls, **kw):
        kw.setdefault("batch_size", 4)
        return cls(**kw)

    def to_dict(self):
        return asdict(self)


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """``cfg`` with SSFA conditioning, the ranking loss and automasking switched off."""
    return TrainConfig(**{**cfg.to_dict(), "use_ssfa": False, "use_srl": False, "automask": False})


def config_from_dict(cls, d, section="", factory=None):
    """Dataclass from a dict, rejecting unknown keys by name. ``factory``
    (e.g. a preset classmethod) builds the instance instead of ``cls``."""
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        where = f" in section '{section}'" if section else ""
        raise KeyError(f"unknown config key{'s' if len(unknown) > 1 else ''}{where}: "
                       + ", ".join(unknown))
    return (factory or cls)(**d)


# --- batching ------------------------------------------------------------------------

def segmap_for(sample: SceneSample, num_classes):
    if not sample.meta.get("has_labels", True):
        # placeholder; the model conditions on its own semantic output instead
        return np.zeros((num_classes,) + np.shape(sample.binary_label), np.float32)
    if num_classes == 2:
        return one_hot_labels(np.asarray(sample.binary_label).astype(np.int64), 2)
    if sample.full_labels is None:
        raise ValueError(f"a {num_classes}-class segmap needs full labels")
    return one_hot_labels(sample.full_labels, num_classes)


def _image(x):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(x, np.float32).transpose(2, 0, 1)))


def collate(samples, num_classes=2):
    """Stack scenes into a batch dict of NCHW tensors (and keep the raw samples)."""
    frames = [torch.stack([_image(s.triplet[i]) for s in samples]) for i in range(3)]
    batch = {
        "prev": frames[0], "curr": frames[1], "next": frames[2],
        "K": torch.stack([s.intrinsics.matrix() for s in samples]),
        "label": torch.stack([torch.from_numpy(np.asarray(s.binary_label, np.float32))
                              for s in samples])[:, None],
        "segmap": torch.stack([torch.from_numpy(segmap_for(s, num_classes)) for s in samples]),
        "samples": list(samples),
        "has_labels": all(s.meta.get("has_labels", True) for s in samples),
    }
    return batch


# --- objective -----------------------------------------------------------------------

def weighted_total(terms: dict, cfg: TrainConfig):
    """``L_ph + L_M + delta_s * L_s + delta_r * L_SR`` with SRL dropped when disabled."""
    for name, value in terms.items():
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise FloatingPointError(f"loss term '{name}' is not finite: {float(value)}")
    delta_r = cfg.delta_r if cfg.use_srl else 0.0
    return (terms["photometric"] + terms["semantic"]
            + cfg.delta_s * terms["smoothness"] + delta_r * terms["ranking"])


class SamplerCache:
    """Sampled points per image; labels never change, so they are keyed by content hash."""

    def __init__(self, cfg: SamplerConfig = SamplerConfig()):
        self.cfg = cfg
        self._store = {}

    @staticmethod
    def key(label, image):
        h = hashlib.sha1(np.ascontiguousarray(np.asarray(label, np.uint8)).tobytes())
        h.update(np.ascontiguousarray(np.asarray(image, np.float32)).tobytes())
        return h.hexdigest()

    def __call__(self, label, image) -> SampledPoints:
        k = self.key(label, image)
        if k not in self._store:
            seed = int(k[:8], 16) ^ self.cfg.seed
            self._store[k] = sample_points(np.asarray(label), np.asarray(image), self.cfg,
                                           np.random.default_rng(seed))
        return self._store[k]

    def __len__(self):
        return len(self._store)


def compute_terms(batch, outputs, poses, samples, cfg: TrainConfig, net_cfg: NetworkConfig,
                  has_labels=True):
    """Unweighted loss terms for one batch, each a scalar tensor."""
    target = batch["curr"]
    sources = [batch["prev"], batch["next"]]
    K = batch["K"]
    pcfg = PhotometricConfig(alpha=cfg.alpha)
    ph, smooth = 0.0, 0.0
    for s in cfg.scales:
        disp = outputs["disp"][s]
        depth = disp_to_depth(disp, net_cfg.d_min, net_cfg.d_max)
        synths, masks = [], []
        for src, T in zip(sources, poses):
            warped, mask = reproject(src, depth, K, T)
            synths.append(warped)
            masks.append(mask)
        ph = ph + min_reprojection_loss(target, synths, masks, pcfg,
                                        identity_sources=sources if cfg.automask else None)
        smooth = smooth + smoothness_loss(disp, target) / (2 ** s)
    n = len(cfg.scales)
    terms = {"photometric": ph / n, "smoothness": smooth / n}

    zero = target.sum() * 0
    if has_labels:
        label = batch["label"]
        terms["semantic"] = sum(bce_loss(outputs["sem_prob"][s], label) for s in cfg.scales) / n
    else:
        terms["semantic"] = zero

    rank = zero
    if cfg.use_srl and has_labels and samples is not None:
        depth0 = disp_to_depth(outputs["disp"][0], net_cfg.d_min, net_cfg.d_max)
        for b, pts in enumerate(samples):
            rank = rank + total_ranking_loss(depth0[b, 0], outputs["sem_prob"][0][b, 0],
                                             batch["label"][b, 0], pts,
                                             use_disparity=cfg.rank_on_disparity)
        rank = rank / len(samples)
    terms["ranking"] = rank
    return terms


def total_loss(batch, outputs, poses, samples, cfg: TrainConfig, net_cfg: NetworkConfig,
               has_labels=True):
    """Returns ``(scalar, breakdown)`` where breakdown holds floats of every term."""
    terms = compute_terms(batch, outputs, poses, samples, cfg, net_cfg, has_labels)
    total = weighted_total(terms, cfg)
    breakdown = {k: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
                 for k, v in terms.items()}
    breakdown["total"] = float(total)
    return total, breakdown


# --- trainer ---------------------------------------------------------------------------

def _param_hash(*modules):
    h = hashlib.sha1()
    for m in modules:
        for k, v in m.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Owns the depth/semantic network, the pose network and their optimizer."""

    def __init__(self, cfg: TrainConfig, net_cfg: NetworkConfig = None,
                 sampler_cfg: SamplerConfig = SamplerConfig(), run_dir=None):
        self.cfg = cfg
        net_cfg = net_cfg or NetworkConfig()
        self.net_cfg = NetworkConfig(**{**net_cfg.to_dict(), "use_ssfa": cfg.use_ssfa})
        self.sampler_cfg = sampler_cfg
        torch.manual_seed(cfg.seed)
        self.model = DepthSemNet(self.net_cfg)
        self.pose_net = PoseNet(self.net_cfg.pose_channels, self.net_cfg.pose_scale)
        self.optimizer = torch.optim.Adam(self.parameters(), lr=cfg.lr)
        self.scheduler = torch.optim.lr_scheduler.StepLR(
            self.optimizer, step_size=cfg.lr_decay_epochs, gamma=cfg.lr_decay_factor)
        self.sampler = SamplerCache(sampler_cfg)
        self.step = 0
        self.freeze_norm_stats = False
        self.epoch = 0
        self.run_dir = run_dir
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)
            with open(os.path.join(run_dir, "config.json"), "w") as f:
                json.dump(self.config_dict(), f, indent=2, sort_keys=True)

    def config_dict(self):
        return {"train": self.cfg.to_dict(), "network": self.net_cfg.to_dict(),
                "sampler": asdict(self.sampler_cfg)}

    def parameters(self):
        return list(self.model.parameters()) + list(self.pose_net.parameters())

    def param_hash(self):
        return _param_hash(self.model, self.pose_net)

    def _run_model(self, batch):
        if not self.net_cfg.use_ssfa:
            return self.model(batch["curr"])
        if batch.get("has_labels", True):
            return self.model(batch["curr"], batch["segmap"])
        return self.model(batch["curr"], self_condition=True)

    def forward(self, batch):
        outputs = self._run_model(batch)
        # both pairs go in temporal order so the network always sees forward motion;
        # the earlier pair is inverted to map the target into the previous frame
        poses = [invert_transform(self.pose_net(batch["prev"], batch["curr"])),
                 self.pose_net(batch["curr"], batch["next"])]
        return outputs, poses

    def samples_for(self, batch):
        if not self.cfg.use_srl:
            return None
        return [self.sampler(s.binary_label, s.target) for s in batch["samples"]]

    def train_step(self, batch, has_labels=True):
        """One optimizer step on a collated batch; returns the loss breakdown."""
        self.model.train()
        self.pose_net.train()
        if self.freeze_norm_stats:
            for m in self.model.modules():
                if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
                    m.eval()
        samples = self.samples_for(batch) if has_labels else None
        outputs, poses = self.forward(batch)
        total, breakdown = total_loss(batch, outputs, poses, samples, self.cfg, self.net_cfg,
                                      has_labels)
        self.optimizer.zero_grad()
        total.backward()
        bad = [n for n, p in list(self.model.named_parameters()) + list(self.pose_net.named_parameters())
               if p.grad is not None and not bool(torch.isfinite(p.grad).all())]
        if bad:
            dump = self._dump(batch, breakdown)
            raise FloatingPointError(f"non-finite gradient at step {self.step} in {bad[:3]}"
                                     + (f"; inputs dumped to {dump}" if dump else ""))
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.parameters(), self.cfg.grad_clip)
        self.optimizer.step()
        breakdown.update(step=self.step, epoch=self.epoch, lr=self.optimizer.param_groups[0]["lr"])
        self.step += 1
        self._log(breakdown)
        return breakdown

    def _dump(self, batch, breakdown):
        if not self.run_dir:
            return None
        path = os.path.join(self.run_dir, f"nan_step{self.step:06d}.pt")
        torch.save({k: v for k, v in batch.items() if isinstance(v, torch.Tensor)}
                   | {"breakdown": breakdown, "step": self.step}, path)
        return path

    def _log(self, row):
        if not self.run_dir:
            return
        path = os.path.join(self.run_dir, "losses.csv")
        cols = ["step", "epoch", "lr", "total"] + list(TERMS)
        new = not os.path.exists(path)
        with open(path, "a", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
            if new:
                w.writeheader()
            w.writerow(row)

    def epoch_order(self, n):
        # order depends only on (seed, epoch), which keeps resumed runs identical
        return np.random.default_rng([self.cfg.seed, self.epoch]).permutation(n)

    def train_epoch(self, scenes):
        order = self.epoch_order(len(scenes))
        bs = self.cfg.batch_size
        rows = []
        for i in range(0, len(order), bs):
            batch = collate([scenes[j] for j in order[i:i + bs]], self.net_cfg.sem_classes)
            rows.append(self.train_step(batch))
        if self.cfg.overlay_every and self.run_dir and (self.epoch + 1) % self.cfg.overlay_every == 0:
            s = scenes[int(order[0])]
            save_overlay(os.path.join(self.run_dir, "overlays", f"epoch{self.epoch + 1:03d}.png"),
                         s.target, self.sampler(s.binary_label, s.target))
        self.scheduler.step()
        self.epoch += 1
        if self.run_dir:
            self.save_checkpoint(os.path.join(self.run_dir, "checkpoints",
                                              f"epoch{self.epoch:03d}.pt"))
        return rows

    def fit(self, scenes, epochs=None, callback=None):
        epochs = self.cfg.epochs if epochs is None else epochs
        while self.epoch < epochs:
            rows = self.train_epoch(scenes)
            if callback:
                callback(self, rows)
        return self

    # -- checkpoints --
    def state(self):
        return {
            "model": self.model.state_dict(),
            "pose_net": self.pose_net.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "config": self.config_dict(),
            "torch_rng": torch.get_rng_state(),
        }

    def save_checkpoint(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        torch.save(self.state(), path)
        return path

    @classmethod
    def from_checkpoint(cls, path, run_dir=None, **overrides):
        if not os.path.isfile(path):
            raise FileNotFoundError(f"checkpoint not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        conf = state["config"]
        train = TrainConfig(**{**conf["train"], **overrides})
        trainer = cls(train, NetworkConfig(**conf["network"]), SamplerConfig(**conf["sampler"]),
                      run_dir=run_dir)
        trainer.load_state(state)
        return trainer

    def load_state(self, state):
        self.model.load_state_dict(state["model"])
        self.pose_net.load_state_dict(state["pose_net"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.scheduler.load_state_dict(state["scheduler"])
        self.step, self.epoch = state["step"], state["epoch"]
        torch.set_rng_state(state["torch_rng"])

    # -- inference --
    @torch.no_grad()
    def predict(self, sample: SceneSample):
        """``(depth H x W, foreground probability H x W)`` for the target frame."""
        self.model.eval()
        out = self._run_model(collate([sample], self.net_cfg.sem_classes))
        depth = disp_to_depth(out["disp"][0], self.net_cfg.d_min, self.net_cfg.d_max)
        return depth[0, 0].numpy(), out["sem_prob"][0][0, 0].numpy()

    def predict_depth(self, sample):
        return self.predict(sample)[0]

    def evaluate(self, scenes, median_scale=True):
        """Mean depth metrics and depth-edge score over scenes with gt depth."""
        rows, edges = [], []
        for s in scenes:
            if s.gt_depth is None:
                continue
            pred = self.predict_depth(s)
            rows.append(depth_metrics(pred, s.gt_depth, median_scale=median_scale))
            gt_label = s.clean_binary_label if s.clean_binary_label is not None else s.binary_label
            e = depth_edge_score(pred, s.gt_depth, gt_label)
            if np.isfinite(e):
                edges.append(e)
        if not rows:
            raise ValueError("no scene with ground-truth depth to evaluate")
        return mean_metrics(rows), float(np.mean(edges)) if edges else float("nan")


# --- online refinement -------------------------------------------------------------------

def online_refine(trainer: Trainer, sample: SceneSample, iterations=None, lr=None):
    """Fine-tune a copy of ``trainer`` on one triplet and return its depth for ``I_t``.

    The base trainer is left untouched. The ranking and semantic terms are
    used only when the sample carries a label.
    """
    if sample is None or len(sample.triplet) != 3 or any(f is None for f in sample.triplet):
        raise ValueError("online refinement needs both source frames")
    iterations = trainer.cfg.refine_iters if iterations is None else iterations
    if iterations == 0:
        return trainer.predict_depth(sample)
    clone = copy.copy(trainer)
    clone.model = copy.deepcopy(trainer.model)
    clone.pose_net = copy.deepcopy(trainer.pose_net)
    clone.run_dir = None
    lr = lr or trainer.cfg.refine_lr or trainer.cfg.lr
    clone.optimizer = torch.optim.Adam(clone.parameters(), lr=lr)
    clone.scheduler = None
    # one image gives poor batch statistics; keep the trained running estimates
    clone.freeze_norm_stats = True
    has_labels = sample.meta.get("has_labels", True)
    batch = collate([sample], trainer.net_cfg.sem_classes)
    for _ in range(iterations):
        clone.train_step(batch, has_labels=has_labels)
    return clone.predict_depth(sample)


# --- debug overlays ----------------------------------------------------------------------

def save_overlay(path, image, samples: SampledPoints):
    """Draws S points in red, N points in blue and random pairs in green."""
    img = (np.clip(np.asarray(image, np.float32), 0, 1) * 255).astype(np.uint8).copy()
    for (r, c) in samples.pairs.reshape(-1, 2):
        img[r, c] = (0, 255, 0)
    for q in samples.quads:
        for k, (r, c) in enumerate(q):
            img[r, c] = (255, 0, 0) if k < 2 else (0, 0, 255)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(img).save(path)
    return path
