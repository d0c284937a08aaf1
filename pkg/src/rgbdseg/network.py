"""Full scene-labeling model: dual conv paths, vertical context scans, a
horizontal fusion scan, cross-layer feature concatenation, and a 1x1 head.

Layout: conv stacks run channel-major (c,h,w); scan layers run (h,w,c); the
model permutes at the boundary. The RGB path has 7 blocks (one stride-2 conv,
two pooled blocks, then dilation-2 blocks) with taps after blocks 2, 3 and 5
resized onto the common G x G grid; the depth path is 3 pooled conv blocks.
Pooling uses ceil arithmetic, so a 426 crop yields G = 54 and a 64 crop G = 8.

Ablation flags rewire single stages: a disabled fusion layer becomes a 1x1
projection of the concatenated contexts, disabled context layers become 1x1
projections of the path features, a disabled path contributes a zero context
map, and "disable_rgb_path" reroutes the HHA input through the RGB stack with
the cross-layer concat removed (the strongest published ablation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nnops
from .autodiff import Tensor
from .metrics import resize_labels_nearest
from .recurrent import BiScanLayer, fuse_contexts, scan_bidirectional


@dataclass
class ConvBlockSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    dilation: int = 1
    pool: bool = False  # 2x2 ceil-mode maxpool after the activation


@dataclass
class PathConfig:
    blocks: list
    tap_blocks: tuple = ()  # 0-based block indices whose outputs are tapped


def rgb_path_config(channels, head_channels):
    c1, c2, c3, c4, c5, c6 = channels
    blocks = [
        ConvBlockSpec(c1, stride=2),
        ConvBlockSpec(c2, pool=True),
        ConvBlockSpec(c3, pool=True),
        ConvBlockSpec(c4),
        ConvBlockSpec(c5, padding=2, dilation=2),
        ConvBlockSpec(c6, padding=2, dilation=2),
        ConvBlockSpec(head_channels, kernel=1, padding=0),
    ]
    return PathConfig(blocks, tap_blocks=(1, 2, 4))


def depth_path_config(channels):
    return PathConfig([ConvBlockSpec(c, pool=True) for c in channels])


def _block_out_size(n, spec):
    n = nnops.conv_out_size(n, spec.kernel, spec.stride, spec.padding, spec.dilation)
    if spec.pool:
        n = -(-(n - 2) // 2) + 1
    return n


def path_out_sizes(path, n):
    sizes = []
    for spec in path.blocks:
        n = _block_out_size(n, spec)
        sizes.append(n)
    return sizes


def grid_size(crop_size, rgb_channels=(8,) * 6, head_channels=8):
    """Common G x G grid for a square crop (1/8 resolution, ceil pooling)."""
    return path_out_sizes(rgb_path_config(rgb_channels, head_channels), crop_size)[2]


@dataclass
class AblationFlags:
    disable_rgb_path: bool = False
    disable_depth_path: bool = False
    disable_multiscale_taps: bool = False
    disable_cross_layer: bool = False
    disable_fusion_layer: bool = False
    disable_context_layers: bool = False
    single_context_before_fusion: bool = False

    def active(self):
        return tuple(sorted(k for k, v in self.__dict__.items() if v))

    def validate(self):
        if self.disable_rgb_path and self.disable_depth_path:
            raise ValueError("cannot disable both input paths")
        on = set(self.active())
        allowed = (len(on) <= 1
                   or on == {"disable_context_layers", "disable_fusion_layer"})
        if not allowed:
            raise ValueError(f"unsupported ablation combination: {sorted(on)}")


@dataclass
class ModelConfig:
    crop_size: int = 64
    num_classes: int = 6
    hidden_size: int = 8
    head_channels: int = 32
    rgb_channels: tuple = (16, 24, 32, 32, 32, 32)
    depth_channels: tuple = (8, 16, 24)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    conventional_output_gate: bool = False
    rgb_init: str = "he"
    depth_init: str = "he"
    lstm_init: str = "fanin"  # "paper" restores uniform[-0.01, 0.01]

    def validate(self):
        if len(self.rgb_channels) != 6:
            raise ValueError("rgb_channels needs 6 block widths")
        if len(self.depth_channels) != 3:
            raise ValueError("depth_channels needs 3 block widths")
        if self.num_classes < 2 or self.num_classes > 254:
            raise ValueError("num_classes must be in [2, 254]")
        for name in (self.rgb_init, self.depth_init):
            if name not in ("he", "gaussian"):
                raise ValueError(f"unknown conv init {name!r}")
        if self.lstm_init not in ("paper", "fanin"):
            raise ValueError(f"unknown lstm init {self.lstm_init!r}")
        self.ablation.validate()


class _SeedStream:
    def __init__(self, seed):
        self._state = iter(np.random.SeedSequence(seed).generate_state(512))

    def __call__(self):
        return int(next(self._state))


def _conv_init(shape, kind, seeds):
    c_out, c_in, kh, kw = shape
    if kind == "he":
        std = float(np.sqrt(2.0 / (c_in * kh * kw)))
    else:
        std = 0.01
    return ad.gaussian(shape, std, seeds(), requires_grad=True)


class ContextFusionNet:
    """The trainable model; every parameter lives in exactly one named group."""

    def __init__(self, cfg, seed=0):
        cfg.validate()
        self.cfg = cfg
        flags = cfg.ablation
        seeds = _SeedStream(seed)
        d = cfg.hidden_size
        self._params = {}

        self.rgb_path = rgb_path_config(cfg.rgb_channels, cfg.head_channels)
        self._register_path("rgb", self.rgb_path, in_channels=3,
                            init=cfg.rgb_init, seeds=seeds)

        self.grid = path_out_sizes(self.rgb_path, cfg.crop_size)[2]
        if self.grid < 1:
            raise ValueError(f"crop {cfg.crop_size} collapses below a 1x1 grid")

        self.depth_path = depth_path_config(cfg.depth_channels)
        self.has_depth_path = not (flags.disable_depth_path or flags.disable_rgb_path)
        if self.has_depth_path:
            self._register_path("depth", self.depth_path, in_channels=3,
                                init=cfg.depth_init, seeds=seeds)

        taps = self.rgb_path.tap_blocks
        if flags.disable_multiscale_taps:
            taps = taps[-1:]
        self.taps = taps
        self.ctx_rgb_in = sum(self.rgb_path.blocks[i].out_channels for i in taps)
        self.ctx_depth_in = cfg.depth_channels[-1]

        self.ctx_rgb = self.ctx_depth = self.ctx_shared = self.fusion = None
        fusion_in = 4 * d
        if flags.single_context_before_fusion:
            self._register_scan("ctx_shared", "vertical",
                                self.ctx_rgb_in + self.ctx_depth_in, d, seeds)
            fusion_in = 2 * d
        elif flags.disable_context_layers:
            self._register_conv1x1("proj_ctx_rgb", self.ctx_rgb_in, 2 * d, seeds)
            if self.has_depth_path:
                self._register_conv1x1("proj_ctx_depth", self.ctx_depth_in, 2 * d, seeds)
        else:
            self._register_scan("ctx_rgb", "vertical", self.ctx_rgb_in, d, seeds)
            if self.has_depth_path:
                self._register_scan("ctx_depth", "vertical", self.ctx_depth_in, d, seeds)

        if flags.disable_fusion_layer:
            self._register_conv1x1("proj_fusionless", 4 * d, 2 * d, seeds)
        else:
            self._register_scan("fusion", "horizontal", fusion_in, d, seeds)

        self.cross_layer = not (flags.disable_cross_layer or flags.disable_rgb_path)
        self.head_in = (cfg.head_channels if self.cross_layer else 0) + 2 * d
        w = ad.gaussian([cfg.num_classes, self.head_in, 1, 1], 0.01, seeds(),
                        requires_grad=True, name="head.w")
        b = ad.zeros([cfg.num_classes], requires_grad=True, name="head.b")
        self._params["head.w"] = w
        self._params["head.b"] = b

    # -- construction helpers ------------------------------------------------

    def _register(self, name, tensor):
        if name in self._params:
            raise ValueError(f"duplicate parameter registration: {name}")
        tensor.name = name
        self._params[name] = tensor

    def _register_path(self, prefix, path, in_channels, init, seeds):
        c_in = in_channels
        for i, spec in enumerate(path.blocks):
            shape = [spec.out_channels, c_in, spec.kernel, spec.kernel]
            self._register(f"{prefix}.block{i}.w", _conv_init(shape, init, seeds))
            self._register(f"{prefix}.block{i}.b",
                           ad.zeros([spec.out_channels], requires_grad=True))
            c_in = spec.out_channels

    def _register_scan(self, name, direction, in_width, d, seeds):
        layer = BiScanLayer.init_uniform(direction, in_width, d, seeds(),
                                         self.cfg.conventional_output_gate,
                                         init=self.cfg.lstm_init)
        setattr(self, name, layer)
        for pname, t in layer.params().items():
            self._register(f"{name}.{pname}", t)

    def _register_conv1x1(self, name, c_in, c_out, seeds):
        self._register(f"{name}.w", _conv_init([c_out, c_in, 1, 1], "he", seeds))
        self._register(f"{name}.b", ad.zeros([c_out], requires_grad=True))

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self):
        return dict(self._params)

    def param_groups(self):
        """Disjoint, exhaustive split: RGB conv stack vs everything newly added."""
        pretrained = {k: v for k, v in self._params.items() if k.startswith("rgb.")}
        new = {k: v for k, v in self._params.items() if not k.startswith("rgb.")}
        assert len(pretrained) + len(new) == len(self._params)
        return {"pretrained_analog": pretrained, "new": new}

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    # -- forward --------------------------------------------------------------

    def _run_path(self, prefix, path, x, collect_taps=()):
        taps = {}
        for i, spec in enumerate(path.blocks):
            x = nnops.conv2d(x, self._params[f"{prefix}.block{i}.w"],
                             self._params[f"{prefix}.block{i}.b"],
                             stride=spec.stride, padding=spec.padding,
                             dilation=spec.dilation)
            x = ad.relu(x)
            if spec.pool:
                x = nnops.maxpool2d(x, 2, 2, ceil_mode=True)
            if i in collect_taps:
                taps[i] = x
        return x, taps

    def _hwc(self, x):
        return ad.permute(x, (1, 2, 0))

    def _chw(self, x):
        return ad.permute(x, (2, 0, 1))

    def _project(self, name, x_chw):
        return nnops.conv2d(x_chw, self._params[f"{name}.w"], self._params[f"{name}.b"])

    def forward(self, rgb, hha):
        """(3,S,S) rgb and hha in [0,1] -> logits (k, G, G)."""
        cfg, flags = self.cfg, self.cfg.ablation
        want = (3, cfg.crop_size, cfg.crop_size)
        if rgb.shape != want or hha.shape != want:
            raise ValueError(f"forward: inputs must be {want}, got {rgb.shape} and {hha.shape}")
        for nm, t in (("rgb", rgb), ("hha", hha)):
            # small slack so finite-difference probes stay legal
            if t.data.min() < -1e-3 or t.data.max() > 1 + 1e-3:
                raise ValueError(f"forward: {nm} values must lie in [0, 1]")

        main_in = hha if flags.disable_rgb_path else rgb
        conv7, taps = self._run_path("rgb", self.rgb_path, main_in, self.taps)
        tap_list = [taps[i] for i in self.taps]
        g = self.grid
        tap_list = [t if t.shape[1] == g else nnops.bilinear_resize(t, g, g)
                    for t in tap_list]
        f_rgb = ad.concat(tap_list, axis=0) if len(tap_list) > 1 else tap_list[0]

        f_depth = None
        if self.has_depth_path:
            f_depth, _ = self._run_path("depth", self.depth_path, hha)

        zero_ctx = lambda: ad.zeros([g, g, 2 * cfg.hidden_size])
        if flags.single_context_before_fusion:
            stacked = ad.concat([f_rgb, f_depth], axis=0)
            shared = scan_bidirectional(self.ctx_shared, self._hwc(stacked))
            fused = scan_bidirectional(self.fusion, shared)
        else:
            if flags.disable_context_layers:
                c_rgb = self._hwc(self._project("proj_ctx_rgb", f_rgb))
                c_depth = (self._hwc(self._project("proj_ctx_depth", f_depth))
                           if self.has_depth_path else zero_ctx())
            else:
                c_rgb = scan_bidirectional(self.ctx_rgb, self._hwc(f_rgb))
                c_depth = (scan_bidirectional(self.ctx_depth, self._hwc(f_depth))
                           if self.has_depth_path else zero_ctx())
            if flags.disable_fusion_layer:
                both = ad.concat([c_rgb, c_depth], axis=2)
                fused = self._hwc(self._project("proj_fusionless", self._chw(both)))
            else:
                fused = fuse_contexts(self.fusion, c_rgb, c_depth)

        fused_chw = self._chw(fused)
        head_in = ad.concat([conv7, fused_chw], axis=0) if self.cross_layer else fused_chw
        return nnops.conv2d(head_in, self._params["head.w"], self._params["head.b"])

    # -- inference ------------------------------------------------------------

    def predict_labels(self, logits, out_h=None, out_w=None):
        """Argmax per pixel (lowest class index wins ties) at the grid, plus a
        nearest-neighbor upsample to (out_h, out_w) when requested."""
        data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
        if not np.isfinite(data).all():
            raise ValueError("predict_labels: logits must be finite")
        grid_labels = data.argmax(axis=0).astype(np.uint8)
        if out_h is None:
            out_h = out_w = self.cfg.crop_size
        return grid_labels, resize_labels_nearest(grid_labels, out_h, out_w)

    # -- shape bookkeeping ----------------------------------------------------

    def shape_summary(self):
        """Constructor-level shape contract, no forward pass required."""
        cfg = self.cfg
        g, d = self.grid, cfg.hidden_size
        fusion_in = (2 * d if cfg.ablation.single_context_before_fusion else 4 * d)
        return {
            "grid": g,
            "rgb_context_input": (g, g, self.ctx_rgb_in),
            "context_map": (g, g, 2 * d),
            "fusion_input": (g, g, fusion_in),
            "fusion_output": (g, g, 2 * d),
            "head_input_channels": self.head_in,
            "logits": (cfg.num_classes, g, g),
        }
