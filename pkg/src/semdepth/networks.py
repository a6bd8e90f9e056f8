"""Shared encoder, semantic decoder, SSFA depth decoder and pose network.

Layer names follow the decoder tables (``D_upconv4``, ``aconv4``, ``SAFE4``,
``D_iconv4``, ``D_disp3`` ...). Every decoder records the layers it executes in
``self.trace`` so the realised wiring can be inspected after a forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import se3_exp

FULL_ENCODER = (64, 256, 512, 1024, 2048)
FULL_DECODER = (16, 32, 64, 128, 256)


@dataclass
class NetworkConfig:
    encoder_channels: tuple = (16, 32, 64, 128, 256)
    decoder_channels: tuple = (8, 16, 32, 64, 128)
    sem_classes: int = 2
    height: int = 64
    width: int = 192
    d_min: float = 0.1
    d_max: float = 100.0
    use_ssfa: bool = True
    pose_channels: tuple = (16, 32, 64, 128, 256)
    pose_scale: float = 0.01
    init_depth: float | None = None

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.pose_channels = tuple(int(c) for c in self.pose_channels)
        if len(self.encoder_channels) != 5 or len(self.decoder_channels) != 5:
            raise ValueError("encoder_channels and decoder_channels need 5 entries")
        if self.height % 32 or self.width % 32:
            raise ValueError(f"input size {self.height}x{self.width} must be a multiple of 32")
        if self.d_min >= self.d_max:
            raise ValueError("d_min must be smaller than d_max")
        if self.init_depth is not None and not self.d_min < self.init_depth < self.d_max:
            raise ValueError(f"init_depth {self.init_depth} must lie inside ({self.d_min}, {self.d_max})")

    @classmethod
    def toy(cls, **kw):
        """Defaults for training from scratch on small synthetic scenes.

        An unscaled pose head and a depth head that starts near 1 m keep the
        jointly learned scale away from the ``d_min`` clamp.
        """
        kw.setdefault("pose_scale", 1.0)
        kw.setdefault("init_depth", 1.0)
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw):
        kw.setdefault("height", 192)
        kw.setdefault("width", 640)
        return cls(encoder_channels=FULL_ENCODER, decoder_channels=FULL_DECODER,
                   sem_classes=20, **kw)

    def to_dict(self):
        return asdict(self)


class Conv3x3(nn.Module):
    """Reflection-padded 3x3 convolution."""

    def __init__(self, in_channels, out_channels, stride=1, bias=True):
        super().__init__()
        self.pad = nn.ReflectionPad2d(1)
        self.conv = nn.Conv2d(in_channels, out_channels, 3, stride, bias=bias)

    def forward(self, x):
        return self.conv(self.pad(x))


class ConvBlock(nn.Module):
    def __init__(self, in_channels, out_channels, stride=1):
        super().__init__()
        self.conv = Conv3x3(in_channels, out_channels, stride)
        self.nonlin = nn.ELU(inplace=True)

    def forward(self, x):
        return self.nonlin(self.conv(x))


def upsample(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


class Tracer:
    """Mixin recording ``(name, inputs, in_chns, out_chns, resolution)`` per call."""

    def _reset_trace(self, height):
        self.trace = []
        self._height = height

    def _record(self, name, inputs, out):
        if getattr(self, "_height", None) is None:
            return
        self.trace.append({
            "layer": name,
            "inputs": [n for n, _ in inputs],
            "in_chns": [t.shape[1] for _, t in inputs],
            "out_chns": out.shape[1],
            "resolution": self._height // out.shape[2],
        })


class Encoder(nn.Module):
    """Five strided stages producing features at strides 2, 4, 8, 16, 32."""

    def __init__(self, channels=(16, 32, 64, 128, 256), in_channels=3):
        super().__init__()
        self.num_ch_enc = tuple(channels)
        stages, prev = [], in_channels
        for ch in channels:
            stages.append(nn.Sequential(ConvBlock(prev, ch, stride=2), ConvBlock(ch, ch)))
            prev = ch
        self.stages = nn.ModuleList(stages)

    def forward(self, image):
        if image.shape[-1] % 32 or image.shape[-2] % 32:
            raise ValueError(f"input size {tuple(image.shape[-2:])} must be a multiple of 32")
        feats, x = [], (image - 0.45) / 0.225
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Head(nn.Module):
    """Sigmoid map from a 3x3 conv, resized to the input resolution."""

    def __init__(self, in_channels):
        super().__init__()
        self.conv = Conv3x3(in_channels, 1)

    def forward(self, x, size):
        out = torch.sigmoid(self.conv(x))
        if out.shape[-2:] != size:
            out = F.interpolate(out, size=size, mode="bilinear", align_corners=False)
        return out


class SemanticDecoder(nn.Module, Tracer):
    def __init__(self, num_ch_enc, num_ch_dec=FULL_DECODER, scales=range(4)):
        super().__init__()
        self.scales = list(scales)
        self.num_ch_dec = tuple(num_ch_dec)
        self.upconv = nn.ModuleDict()
        self.iconv = nn.ModuleDict()
        self.heads = nn.ModuleDict()
        for i in range(4, -1, -1):
            cin = num_ch_enc[-1] if i == 4 else num_ch_dec[i + 1]
            self.upconv[str(i)] = ConvBlock(cin, num_ch_dec[i])
            skip = num_ch_enc[i - 1] if i > 0 else 0
            self.iconv[str(i)] = ConvBlock(num_ch_dec[i] + skip, num_ch_dec[i])
        for s in self.scales:
            self.heads[str(s)] = Head(num_ch_dec[s])
        self.trace = []

    def forward(self, feats, size):
        """Returns ``(upconv_features, probs)`` with ``probs[s]`` at full resolution."""
        self._reset_trace(size[0])
        x, name = feats[-1], "econv4"
        upconvs, probs = [None] * 5, {}
        for i in range(4, -1, -1):
            y = self.upconv[str(i)](x)
            self._record(f"S_upconv{i}", [(name, x)], y)
            upconvs[i] = y
            inputs = [(f"up(S_upconv{i})", upsample(y))]
            if i > 0:
                inputs.append((f"econv{i - 1}", feats[i - 1]))
            x = self.iconv[str(i)](torch.cat([t for _, t in inputs], 1))
            self._record(f"S_iconv{i}", inputs, x)
            name = f"S_iconv{i}"
            if i in self.scales:
                probs[i] = self.heads[str(i)](x, size)
                self._record(f"S_disp{i}", [(name, x)], probs[i])
        return upconvs, probs


class SAB(nn.Module, Tracer):
    """Semantic-aware spatial alignment block.

    Parameter-free batch norm, then a per-location scale and shift predicted
    from the segmentation map, then a 3x3 output conv.
    """

    def __init__(self, channels, sem_classes, hidden=None, tag="0"):
        super().__init__()
        hidden = hidden or max(channels // 2, 1)
        self.tag = tag
        self.norm = nn.BatchNorm2d(channels, affine=False)
        self.shared = nn.Sequential(Conv3x3(sem_classes, hidden), nn.ReLU())
        self.alpha = Conv3x3(hidden, channels)
        self.beta = Conv3x3(channels, channels)
        self.out = Conv3x3(channels, channels)
        self.trace = []

    def forward(self, x, segmap, in_name="x"):
        if segmap.shape[-2:] != x.shape[-2:]:
            segmap = F.interpolate(segmap, size=x.shape[-2:], mode="bilinear", align_corners=False)
        if segmap.shape[0] != x.shape[0]:
            raise ValueError(f"segmap batch {segmap.shape[0]} != feature batch {x.shape[0]}")
        t = self.tag
        x_norm = self.norm(x)
        actv = self.shared(segmap)
        alpha = self.alpha(actv)
        beta = self.beta(alpha)
        aligned = alpha * x_norm + beta
        out = self.out(aligned)
        self._record(f"BatchNorm2d_{t}", [(in_name, x)], x_norm)
        self._record(f"Conv2d_{t}", [(f"Interpolate_{t}", segmap)], actv)
        self._record(f"alphaConv2d_{t}", [(f"Conv2d_{t}", actv)], alpha)
        self._record(f"betaConv2d_{t}", [(f"alphaConv2d_{t}", alpha)], beta)
        self._record(f"Align_{t}", [(f"BatchNorm2d_{t}", x_norm), (f"alphaConv2d_{t}", alpha),
                                    (f"betaConv2d_{t}", beta)], aligned)
        self._record(f"OutConv2d_{t}", [(f"Align_{t}", aligned)], out)
        return out


class SSFA(nn.Module):
    """Fuse depth and semantic features, then two SABs with a residual."""

    def __init__(self, channels, sem_classes, use_sab=True):
        super().__init__()
        self.fuse = ConvBlock(2 * channels, channels)
        self.use_sab = use_sab
        if use_sab:
            self.sab0 = SAB(channels, sem_classes, tag="0")
            self.sab1 = SAB(channels, sem_classes, tag="1")

    def fuse_features(self, f_depth, f_sem):
        if f_depth.shape != f_sem.shape:
            raise ValueError(f"depth {tuple(f_depth.shape)} and semantic "
                             f"{tuple(f_sem.shape)} features differ in shape")
        return self.fuse(torch.cat([f_depth, f_sem], 1))

    def align(self, fused, segmap):
        h = self.sab0(fused, segmap, in_name="aconv")
        return fused + self.sab1(h, segmap, in_name="OutConv2d_0")

    def forward(self, f_depth, f_sem, segmap=None):
        fused = self.fuse_features(f_depth, f_sem)
        if not self.use_sab:
            return fused
        return self.align(fused, segmap)


class DepthDecoder(nn.Module, Tracer):
    def __init__(self, num_ch_enc, num_ch_dec=FULL_DECODER, sem_classes=2, use_ssfa=True,
                 scales=range(4)):
        super().__init__()
        self.scales = list(scales)
        self.use_ssfa = use_ssfa
        self.num_ch_dec = tuple(num_ch_dec)
        self.upconv = nn.ModuleDict()
        self.ssfa = nn.ModuleDict()
        self.iconv = nn.ModuleDict()
        self.heads = nn.ModuleDict()
        for i in range(4, -1, -1):
            cin = num_ch_enc[-1] if i == 4 else num_ch_dec[i + 1]
            self.upconv[str(i)] = ConvBlock(cin, num_ch_dec[i])
            self.ssfa[str(i)] = SSFA(num_ch_dec[i], sem_classes, use_sab=use_ssfa)
            skip = num_ch_enc[i - 1] if i > 0 else 0
            self.iconv[str(i)] = ConvBlock(num_ch_dec[i] + skip, num_ch_dec[i])
        for s in self.scales:
            self.heads[str(s)] = Head(num_ch_dec[s])
        self.trace = []
        self.ssfa_calls = 0

    def forward(self, feats, sem_upconvs, segmap, size):
        """Returns ``{scale: sigmoid disparity}`` at full resolution."""
        self._reset_trace(size[0])
        self.ssfa_calls = 0
        if self.use_ssfa:
            for block in self.ssfa.values():
                block.sab0._reset_trace(size[0])
                block.sab1._reset_trace(size[0])
        x, name = feats[-1], "econv4"
        disps = {}
        for i in range(4, -1, -1):
            y = self.upconv[str(i)](x)
            self._record(f"D_upconv{i}", [(name, x)], y)
            block = self.ssfa[str(i)]
            fused = block.fuse_features(y, sem_upconvs[i])
            self._record(f"aconv{i}", [(f"D_upconv{i}", y), (f"S_upconv{i}", sem_upconvs[i])], fused)
            x, name = fused, f"aconv{i}"
            if self.use_ssfa:
                x = block.align(fused, segmap)
                self.ssfa_calls += 1
                self._record(f"SAFE{i}", [(f"aconv{i}", fused), ("Segmap", segmap)], x)
                name = f"SAFE{i}"
            inputs = [(f"up({name})", upsample(x))]
            if i > 0:
                inputs.append((f"econv{i - 1}", feats[i - 1]))
            x = self.iconv[str(i)](torch.cat([t for _, t in inputs], 1))
            self._record(f"D_iconv{i}", inputs, x)
            name = f"D_iconv{i}"
            if i in self.scales:
                disps[i] = self.heads[str(i)](x, size)
                self._record(f"D_disp{i}", [(name, x)], disps[i])
        return disps


class DepthSemNet(nn.Module):
    """Encoder plus semantic and depth decoders sharing its features."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_channels)
        self.sem_decoder = SemanticDecoder(cfg.encoder_channels, cfg.decoder_channels)
        self.depth_decoder = DepthDecoder(cfg.encoder_channels, cfg.decoder_channels,
                                          cfg.sem_classes, use_ssfa=cfg.use_ssfa)
        if cfg.init_depth is not None:
            s = (1 / cfg.init_depth - 1 / cfg.d_max) / (1 / cfg.d_min - 1 / cfg.d_max)
            for head in self.depth_decoder.heads.values():
                nn.init.constant_(head.conv.conv.bias, math.log(s / (1 - s)))

    def forward(self, image, segmap=None, self_condition=False):
        """``self_condition`` conditions SSFA on the thresholded semantic output
        when no label is available (binary conditioning only)."""
        if self.cfg.use_ssfa and segmap is None and not self_condition:
            raise ValueError("SSFA conditioning is enabled but no segmap was given")
        size = tuple(image.shape[-2:])
        feats = self.encoder(image)
        upconvs, probs = self.sem_decoder(feats, size)
        if self.cfg.use_ssfa and segmap is None:
            if self.cfg.sem_classes != 2:
                raise ValueError("self-conditioning needs a 2-class segmap")
            fg = (probs[0].detach() > 0.5).float()
            segmap = torch.cat([1 - fg, fg], 1)
        disps = self.depth_decoder(feats, upconvs, segmap, size)
        return {"disp": disps, "sem_prob": probs, "features": feats}


class PoseNet(nn.Module):
    """Regresses the target-to-source transform from a stacked image pair."""

    def __init__(self, channels=(16, 32, 64, 128, 256), scale=0.01):
        super().__init__()
        self.scale = scale
        layers, prev = [], 6
        for ch in channels:
            layers += [Conv3x3(prev, ch, stride=2), nn.ReLU(inplace=True)]
            prev = ch
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Linear(prev, 6)
        # start from the identity motion
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, target, source):
        x = torch.cat([target, source], 1)
        x = (x - 0.45) / 0.225
        x = self.encoder(x).mean((2, 3))
        out = self.scale * self.head(x)
        return se3_exp(out[:, :3], out[:, 3:])
