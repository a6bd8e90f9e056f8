"""``semdepth`` command line: data generation, training, evaluation and inference."""
from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import os
import shutil
import sys

import numpy as np

DATA_ENV = "SEMDEPTH_DATA"
MANIFEST = "manifest.json"


class CLIError(Exception):
    pass


# --- run manifest ------------------------------------------------------------------------

def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def config_hash(obj):
    return hashlib.sha1(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


class RunManifest:
    """Provenance record written once into every output directory."""

    def __init__(self, command, config, seed):
        from . import __version__

        self.data = {
            "command": command,
            "argv": sys.argv[1:],
            "config": config,
            "config_hash": config_hash(config),
            "seed": seed,
            "code_version": __version__,
            "started": _now(),
            "finished": None,
        }

    def write(self, out_dir):
        self.data["finished"] = _now()
        with open(os.path.join(out_dir, MANIFEST), "w") as f:
            json.dump(self.data, f, indent=2, sort_keys=True, default=str)


def _prepare_out(path, force, allow_existing=False):
    if os.path.isdir(path) and os.listdir(path) and not allow_existing:
        if not force:
            raise CLIError(f"output directory {path} exists and is not empty (use --force)")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return path


def _data_root(arg):
    root = arg or os.environ.get(DATA_ENV)
    if not root:
        raise CLIError(f"no dataset given: pass --data or set {DATA_ENV}")
    if not os.path.isdir(root):
        raise CLIError(f"dataset directory not found: {root}")
    return root


def _parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CLIError(f"--size expects HxW, e.g. 64x192, got {text!r}") from None
    return h, w


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# --- config files -------------------------------------------------------------------------

SECTIONS = ("train", "network", "sampler")


def load_config(path=None, overrides=None):
    """Read a YAML config with optional ``train``, ``network`` and ``sampler`` sections."""
    import yaml

    from .networks import NetworkConfig
    from .sampler import SamplerConfig
    from .trainer import TrainConfig, config_from_dict

    raw = {}
    if path:
        if not os.path.isfile(path):
            raise CLIError(f"config file not found: {path}")
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise CLIError(f"{path}: expected a mapping at the top level")
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise CLIError(f"unknown config section(s): {', '.join(unknown)} "
                       f"(known: {', '.join(SECTIONS)})")
    train = dict(raw.get("train") or {})
    train.setdefault("batch_size", 4)
    train.update(overrides or {})
    try:
        cfg = config_from_dict(TrainConfig, train, "train")
        net = config_from_dict(NetworkConfig, raw.get("network"), "network", NetworkConfig.toy)
        samp = config_from_dict(SamplerConfig, raw.get("sampler"), "sampler")
    except KeyError as e:
        raise CLIError(e.args[0]) from None
    except (TypeError, ValueError) as e:
        raise CLIError(f"invalid config: {e}") from None
    return cfg, net, samp


# --- scene inputs -------------------------------------------------------------------------

def _load_triplet(paths, checkpoint_trainer, label=None, intrinsics=None):
    """A :class:`SceneSample` from a scene folder or three image paths."""
    from .data import SceneSample, binarize_semantics, load_label_png, load_rgb, read_scene
    from .geometry import Intrinsics

    size = (checkpoint_trainer.net_cfg.height, checkpoint_trainer.net_cfg.width)
    if len(paths) == 1 and os.path.isdir(paths[0]):
        return read_scene(paths[0], size)
    if len(paths) != 3:
        raise CLIError("expected a scene folder or three images (prev curr next)")
    frames = [load_rgb(p, size) for p in paths]
    K = Intrinsics.load(intrinsics).scaled(size[1], size[0]) if intrinsics else \
        Intrinsics.kitti_like(size[1], size[0])
    full, binary, has_labels = None, np.zeros(size, np.uint8), False
    if label:
        lab = load_label_png(label, size)
        if lab.max() <= 1:
            binary = lab.astype(np.uint8)
        else:
            full, binary = lab, binarize_semantics(lab)
        has_labels = True
    return SceneSample(frames, K, binary, None, full, None,
                       meta={"has_labels": has_labels, "inputs": list(paths)})


def _load_trainer(path):
    from .trainer import Trainer

    if not path or not os.path.isfile(path):
        raise CLIError(f"checkpoint not found: {path}")
    return Trainer.from_checkpoint(path)


def _save_depth_outputs(out_dir, depth, d_max=80.0):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .data import save_depth_png

    save_depth_png(os.path.join(out_dir, "depth.png"), depth)
    disp = 1.0 / np.clip(depth, 1e-3, None)
    vmax = np.percentile(disp, 95)
    plt.imsave(os.path.join(out_dir, "depth_color.png"), disp, cmap="magma", vmin=0, vmax=vmax)
    np.save(os.path.join(out_dir, "depth.npy"), depth.astype(np.float32))


def plot_category_absrel(path, per_category: dict, mean: float, other=None):
    """Bar chart of AbsRel per category with the mean as the rightmost bar."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = sorted(per_category) + ["mean"]
    vals = [per_category[n] for n in names[:-1]] + [mean]
    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(names)), 3))
    x = np.arange(len(names))
    ax.bar(x, vals, color=["tab:blue"] * (len(names) - 1) + ["tab:gray"])
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("AbsRel")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return names


# --- commands ----------------------------------------------------------------------------

def cmd_gen_data(args):
    from dataclasses import asdict

    from .data import SceneConfig, generate_dataset

    h, w = _parse_size(args.size)
    if args.num_scenes < 0:
        raise CLIError("--num-scenes must be >= 0")
    cfg = SceneConfig(height=h, width=w, noise_radius=args.noise_radius)
    out = _prepare_out(args.out, args.force)
    manifest = RunManifest("gen-data", {"scene": asdict(cfg), "num_scenes": args.num_scenes},
                           args.seed)
    generate_dataset(out, args.num_scenes, cfg, seed=args.seed)
    manifest.write(out)
    print(f"wrote {args.num_scenes} scenes to {out}")


def _read_dataset(root, size):
    from .data import SceneDataset

    ds = SceneDataset(root, size)
    if len(ds) == 0:
        raise CLIError(f"no scenes found under {root}")
    return [ds[i] for i in range(len(ds))]


def cmd_train(args):
    import torch

    from .trainer import Trainer

    root = _data_root(args.data)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, run_dir=args.out, **overrides)
        os.makedirs(args.out, exist_ok=True)
    else:
        cfg, net, samp = load_config(args.config, overrides)
        _prepare_out(args.out, args.force)
        torch.manual_seed(cfg.seed)
        trainer = Trainer(cfg, net, samp, run_dir=args.out)
    manifest = RunManifest("train", trainer.config_dict(), trainer.cfg.seed)
    scenes = _read_dataset(root, (trainer.net_cfg.height, trainer.net_cfg.width))

    def report(tr, rows):
        last = rows[-1] if rows else {}
        print(f"epoch {tr.epoch:3d}  step {tr.step:6d}  loss {last.get('total', float('nan')):.4f}",
              flush=True)

    trainer.fit(scenes, callback=report)
    trainer.save_checkpoint(os.path.join(args.out, "checkpoints", "last.pt"))
    manifest.write(args.out)


def _resize_depth(depth, shape):
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(depth, np.float32))[None, None]
    return F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)[0, 0].numpy()


def cmd_eval(args):
    from .metrics import (binary_seg_metrics, depth_edge_score, depth_metrics, format_table,
                          mean_metrics, per_category_absrel)

    root = _data_root(args.data)
    trainer = _load_trainer(args.checkpoint)
    out = _prepare_out(args.metrics_out, args.force)
    scenes = _read_dataset(root, (trainer.net_cfg.height, trainer.net_cfg.width))
    rows, seg, edges, cats = [], [], [], {}
    for s in scenes:
        if s.gt_depth is None:
            continue
        pred, prob = trainer.predict(s)
        if args.gt_as_pred:
            pred = s.gt_depth.copy()
        elif pred.shape != s.gt_depth.shape:
            pred = _resize_depth(pred, s.gt_depth.shape)
        rows.append(depth_metrics(pred, s.gt_depth, median_scale=not args.no_median_scale,
                                  crop=args.garg_crop))
        gt_bin = s.clean_binary_label if s.clean_binary_label is not None else s.binary_label
        seg.append(binary_seg_metrics(prob > 0.5, gt_bin))
        e = depth_edge_score(pred, s.gt_depth, gt_bin, median_scale=not args.no_median_scale)
        if np.isfinite(e):
            edges.append(e)
        if s.full_labels is not None:
            per, _ = per_category_absrel(pred, s.gt_depth, s.full_labels,
                                         median_scale=not args.no_median_scale)
            for k, v in per.items():
                cats.setdefault(k, []).append(v)
    if not rows:
        raise CLIError(f"no scene under {root} has ground-truth depth")
    mean = mean_metrics(rows)
    per_cat = {k: float(np.mean(v)) for k, v in cats.items()}
    cat_mean = float(np.mean(list(per_cat.values()))) if per_cat else float("nan")
    result = {
        "depth": mean.to_dict(),
        "num_scenes": len(rows),
        "segmentation": {"miou_bi": float(np.mean([m for m, _ in seg])),
                         "dice": float(np.mean([d for _, d in seg]))},
        "depth_edge_score": float(np.mean(edges)) if edges else None,
        "per_category_absrel": per_cat,
        "per_category_mean": cat_mean,
    }
    _write_json(os.path.join(out, "metrics.json"), result)
    table = format_table({"model": mean})
    seg_line = (f"binary mIoU {result['segmentation']['miou_bi']:.4f}  "
                f"DICE {result['segmentation']['dice']:.4f}")
    with open(os.path.join(out, "metrics.txt"), "w") as f:
        f.write(table + "\n" + seg_line + "\n")
    if per_cat:
        plot_category_absrel(os.path.join(out, "per_category_absrel.png"), per_cat, cat_mean)
    RunManifest("eval", {"checkpoint": os.path.abspath(args.checkpoint), "data": root,
                         "median_scale": not args.no_median_scale, "garg_crop": args.garg_crop},
                trainer.cfg.seed).write(out)
    print(table)
    print(seg_line)


def sample_eval(scenes, r_values, strategies, seed=0):
    """Mean inlier rate per strategy and ``r`` over scenes that carry clean labels."""
    from .sampler import SamplerConfig, direct_pairs, image_gradient, inlier_rate, sample_quadruplets

    cfg = SamplerConfig(seed=seed)
    acc = {st: {r: [] for r in r_values} for st in strategies}
    for i, s in enumerate(scenes):
        gt = s.clean_binary_label
        if gt is None:
            continue
        grad = image_gradient(s.target)
        for r in r_values:
            for st in strategies:
                rng = np.random.default_rng([seed, i])
                if st == "direct":
                    q = direct_pairs(s.binary_label, cfg, rng)
                else:
                    q = sample_quadruplets(s.binary_label, grad, cfg, rng, r=r)
                if len(q):
                    acc[st][r].append(inlier_rate(q, gt))
    return {st: {r: (float(np.mean(v)) if v else float("nan")) for r, v in rows.items()}
            for st, rows in acc.items()}


def format_inlier_table(rates):
    rs = list(next(iter(rates.values())).keys())
    head = f"{'r':<22}" + "".join(f"{r:>8}" for r in rs)
    lines = [head, "-" * len(head)]
    for st, row in rates.items():
        lines.append(f"{'Inlier rate (%) ' + st:<22}" + "".join(f"{100 * row[r]:8.2f}" for r in rs))
    return "\n".join(lines)


def cmd_sample_eval(args):
    root = _data_root(args.data)
    try:
        r_values = [int(v) for v in args.r_sweep.split(",") if v.strip()]
    except ValueError:
        raise CLIError(f"--r-sweep expects comma-separated integers, got {args.r_sweep!r}") from None
    if not r_values or min(r_values) < 0:
        raise CLIError("--r-sweep needs at least one non-negative radius")
    strategies = ["proposed", "direct"] if args.strategy == "both" else [args.strategy]
    scenes = _read_dataset(root, None)
    if all(s.clean_binary_label is None for s in scenes):
        raise CLIError("inlier rates need full semantic labels (sem_full.png) as ground truth")
    rates = sample_eval(scenes, r_values, strategies, args.seed)
    table = format_inlier_table(rates)
    print(table)
    if args.out:
        out = _prepare_out(args.out, args.force)
        _write_json(os.path.join(out, "inlier_rates.json"),
                    {st: {str(r): v for r, v in row.items()} for st, row in rates.items()})
        with open(os.path.join(out, "inlier_rates.txt"), "w") as f:
            f.write(table + "\n")
        RunManifest("sample-eval", {"data": root, "r_sweep": r_values, "strategies": strategies},
                    args.seed).write(out)


def cmd_infer(args):
    trainer = _load_trainer(args.checkpoint)
    sample = _load_triplet(args.image_triplet, trainer, args.label, args.intrinsics)
    out = _prepare_out(args.out, args.force)
    depth = trainer.predict_depth(sample)
    _save_depth_outputs(out, depth)
    RunManifest("infer", {"checkpoint": os.path.abspath(args.checkpoint),
                          "inputs": args.image_triplet}, trainer.cfg.seed).write(out)
    print(f"depth written to {out}")


def cmd_refine(args):
    import torch

    from .trainer import online_refine

    trainer = _load_trainer(args.checkpoint)
    if args.iters < 0:
        raise CLIError("--iters must be >= 0")
    sample = _load_triplet(args.triplet, trainer, args.label, args.intrinsics)
    out = _prepare_out(args.out, args.force)
    torch.manual_seed(args.seed)
    depth = online_refine(trainer, sample, iterations=args.iters)
    _save_depth_outputs(out, depth)
    RunManifest("refine", {"checkpoint": os.path.abspath(args.checkpoint), "inputs": args.triplet,
                           "iters": args.iters}, args.seed).write(out)
    print(f"refined depth written to {out}")


# --- parser -------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="semdepth", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num-scenes", type=int, default=50)
    g.add_argument("--size", default="64x192", help="HxW")
    g.add_argument("--noise-radius", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train depth, semantic and pose networks")
    t.add_argument("--data", help=f"dataset root (default: ${DATA_ENV})")
    t.add_argument("--config", help="YAML file with train/network/sampler sections")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="depth, segmentation and per-category metrics")
    e.add_argument("--data", help=f"dataset root (default: ${DATA_ENV})")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--metrics-out", required=True)
    e.add_argument("--no-median-scale", action="store_true")
    e.add_argument("--garg-crop", action="store_true")
    e.add_argument("--gt-as-pred", action="store_true", help=argparse.SUPPRESS)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample-eval", help="inlier rate of border sampling vs search radius")
    s.add_argument("--data", help=f"dataset root (default: ${DATA_ENV})")
    s.add_argument("--r-sweep", default="0,1,3,5,7,9")
    s.add_argument("--strategy", choices=["proposed", "direct", "both"], default="both")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sample_eval)

    for name, flag, func in (("infer", "--image-triplet", cmd_infer),
                             ("refine", "--triplet", cmd_refine)):
        c = sub.add_parser(name, help="predict depth" if name == "infer"
                           else "online refinement, then predict depth")
        c.add_argument(flag, nargs="+", required=True, metavar="PATH",
                       help="scene folder or three images: prev curr next")
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--out", required=True)
        c.add_argument("--label", help="semantic id or binary PNG for the current frame")
        c.add_argument("--intrinsics", help="intrinsics.txt (default: KITTI-like)")
        c.add_argument("--seed", type=int, default=0)
        c.add_argument("--force", action="store_true")
        if name == "refine":
            c.add_argument("--iters", type=int, default=20)
        c.set_defaults(func=func)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "image_triplet"):
        args.image_triplet = list(args.image_triplet)
    try:
        args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError, FloatingPointError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
