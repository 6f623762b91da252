"""The burst super-resolution network.

Data flow for a burst of N packed RAW frames (B, N, 4, h, w):

1. every frame is unpacked to its 2h x 2w mosaic, projected to 3 channels by a
   3x3 conv, and a flow pyramid to the reference frame (index 0) is estimated;
2. features are extracted at h x w and pixel-shuffled to 2h x 2w (with
   ``use_new_pipeline=False`` extraction runs on the 2h x 2w mosaic instead);
3. a shared residual stack enhances the features, two stride-2 convs build a
   3-level pyramid, and pyramid FG-DCN aligns each frame to the reference;
4. a 1x1 conv fuses the N aligned features, windowed-attention groups
   reconstruct, and pixel-shuffle stages upsample to 2hs x 2ws RGB;
5. the result is added to a naive demosaic of the reference frame, bilinearly
   upsampled. The last conv starts at zero, so an untrained model returns
   exactly that baseline image.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .align import FeatureEnhance, PyramidAlign, ResidualBlock
from .errors import ConfigError, DimensionError, InputError
from .flow import FlowNet, FlowPyramid, zero_pyramid
from .raw_pipeline import unpack
from .swin import SwinBlock, SwinGroup

EXTRACTOR_KINDS = ("residual_cnn", "stb")
RECONSTRUCTOR_KINDS = ("residual_cnn", "stg")


@dataclass
class ModelConfig:
    preset: str = "tiny"
    channels: int = 32
    extractor_blocks: int = 2
    recon_groups: int = 2
    recon_blocks: int = 2
    heads: int = 4
    window: int = 4
    mlp_ratio: float = 2.0
    dcn_groups: int = 1
    enhance_blocks: int = 3
    pyramid_levels: int = 3
    flow_levels: int = 5
    flow_channels: tuple = (16, 32, 16)
    flow_kernel: int = 5
    scale: int = 4
    burst_size: int = 4
    use_new_pipeline: bool = True
    use_flow_guidance: bool = True
    extractor_kind: str = "stb"
    reconstructor_kind: str = "stg"
    warp_target: str = "current"
    tie_fusion: bool = False
    freeze_flow: bool = False
    single_frame: bool = False  # feed the reference into every slot: same network, one frame of data

    def __post_init__(self):
        self.flow_channels = tuple(self.flow_channels)

    def validate(self) -> None:
        if self.scale not in (2, 4):
            raise ConfigError(f"model scale must be 2 or 4, got {self.scale}")
        if self.burst_size < 1:
            raise ConfigError("burst_size must be >= 1")
        if self.extractor_kind not in EXTRACTOR_KINDS:
            raise ConfigError(f"extractor_kind must be one of {EXTRACTOR_KINDS}")
        if self.reconstructor_kind not in RECONSTRUCTOR_KINDS:
            raise ConfigError(f"reconstructor_kind must be one of {RECONSTRUCTOR_KINDS}")
        if self.channels % self.heads or self.channels % self.dcn_groups:
            raise ConfigError("channels must be divisible by heads and dcn_groups")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flow_channels"] = list(self.flow_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


# Widths and depths are not published; small/large are sized to the reported
# parameter totals (about 4.9M and 20.7M); they come out at 4.82M and 20.17M.
PRESETS = {
    "tiny": dict(channels=32, extractor_blocks=2, recon_groups=2, recon_blocks=2, heads=4, window=4,
                 dcn_groups=1, flow_levels=5, flow_channels=(16, 32, 16), flow_kernel=5),
    "small": dict(channels=72, extractor_blocks=6, recon_groups=4, recon_blocks=6, heads=6, window=8,
                  dcn_groups=8, flow_levels=5, flow_channels=(32, 64, 32, 16), flow_kernel=7),
    "large": dict(channels=160, extractor_blocks=6, recon_groups=6, recon_blocks=6, heads=8, window=8,
                  dcn_groups=8, flow_levels=5, flow_channels=(32, 64, 32, 16), flow_kernel=7),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = ModelConfig(preset=name, **{**PRESETS[name], **overrides})
    cfg.validate()
    return cfg


# Ablation rows, from the plain baseline to the full model:
# (new pipeline, extractor, flow guidance, reconstructor)
ABLATION_ROWS = {
    1: dict(use_new_pipeline=False, extractor_kind="residual_cnn", use_flow_guidance=False,
            reconstructor_kind="residual_cnn"),
    2: dict(use_new_pipeline=True, extractor_kind="residual_cnn", use_flow_guidance=False,
            reconstructor_kind="residual_cnn"),
    3: dict(use_new_pipeline=True, extractor_kind="residual_cnn", use_flow_guidance=True,
            reconstructor_kind="residual_cnn"),
    4: dict(use_new_pipeline=True, extractor_kind="residual_cnn", use_flow_guidance=True,
            reconstructor_kind="stg"),
    5: dict(use_new_pipeline=True, extractor_kind="stb", use_flow_guidance=True, reconstructor_kind="stg"),
}


def naive_demosaic(packed: torch.Tensor) -> torch.Tensor:
    """Bilinear demosaic of (B, 4, h, w) packed RAW to (B, 3, 2h, 2w).

    Normalised convolution: each missing sample is the weighted mean of the
    available same-color neighbours, which also handles the image border.
    """
    m = unpack(packed)
    B, _, H, W = m.shape
    masks = torch.zeros(3, 1, H, W, dtype=m.dtype, device=m.device)
    masks[0, 0, 0::2, 0::2] = 1
    masks[1, 0, 0::2, 1::2] = 1
    masks[1, 0, 1::2, 0::2] = 1
    masks[2, 0, 1::2, 1::2] = 1
    k_rb = torch.tensor([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=m.dtype, device=m.device) / 4
    k_g = torch.tensor([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=m.dtype, device=m.device) / 4
    kernels = torch.stack([k_rb, k_g, k_rb]).unsqueeze(1)
    num = F.conv2d(m * masks.view(1, 3, H, W), kernels, padding=1, groups=3)
    den = F.conv2d(masks.view(1, 3, H, W), kernels, padding=1, groups=3)
    return num / den


def baseline_upsample(packed: torch.Tensor, scale: int) -> torch.Tensor:
    """Naive demosaic followed by bilinear upsampling: (B, 4, h, w) -> (B, 3, 2hs, 2ws)."""
    rgb = naive_demosaic(packed)
    return F.interpolate(rgb, scale_factor=scale, mode="bilinear", align_corners=False)


class SwinStack(nn.Module):
    def __init__(self, dim, heads, window, blocks, mlp_ratio):
        super().__init__()
        self.blocks = nn.ModuleList([
            SwinBlock(dim, heads, window, shifted=bool(i % 2), mlp_ratio=mlp_ratio) for i in range(blocks)
        ])

    def forward(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x


class ResidualGroup(nn.Module):
    """CNN counterpart of a SwinGroup: residual blocks, 3x3 conv, outer skip."""

    def __init__(self, channels, blocks):
        super().__init__()
        self.body = nn.Sequential(*[ResidualBlock(channels) for _ in range(blocks)])
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv(self.body(x))


class BSRT(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C = cfg.channels

        if cfg.use_flow_guidance:
            self.conv_flow = nn.Conv2d(1, 3, 3, padding=1)
            self.flownet = FlowNet(cfg.flow_levels, cfg.flow_channels, cfg.flow_kernel)
            if cfg.freeze_flow:
                for p in list(self.conv_flow.parameters()) + list(self.flownet.parameters()):
                    p.requires_grad_(False)

        self.conv_first = nn.Conv2d(4 if cfg.use_new_pipeline else 1, C, 3, padding=1)
        if cfg.extractor_kind == "stb":
            self.extractor = SwinStack(C, cfg.heads, cfg.window, cfg.extractor_blocks, cfg.mlp_ratio)
        else:
            self.extractor = nn.Sequential(*[ResidualBlock(C) for _ in range(cfg.extractor_blocks)])
        if cfg.use_new_pipeline:
            self.conv_after_extract = nn.Conv2d(C, 4 * C, 3, padding=1)
            self.extract_shuffle = nn.PixelShuffle(2)
        else:
            self.conv_after_extract = nn.Conv2d(C, C, 3, padding=1)
            self.extract_shuffle = nn.Identity()

        self.enhance = FeatureEnhance(C, cfg.enhance_blocks)
        self.down_l2 = nn.Conv2d(C, C, 3, stride=2, padding=1)
        self.down_l3 = nn.Conv2d(C, C, 3, stride=2, padding=1)
        self.align = PyramidAlign(C, cfg.dcn_groups, cfg.pyramid_levels, cfg.warp_target)

        self.fusion = nn.Conv2d(C if cfg.tie_fusion else cfg.burst_size * C, C, 1)

        if cfg.reconstructor_kind == "stg":
            self.body = nn.ModuleList([
                SwinGroup(C, cfg.heads, cfg.window, cfg.recon_blocks, cfg.mlp_ratio) for _ in range(cfg.recon_groups)
            ])
        else:
            self.body = nn.ModuleList([ResidualGroup(C, cfg.recon_blocks) for _ in range(cfg.recon_groups)])
        self.conv_after_body = nn.Conv2d(C, C, 3, padding=1)

        stages = {2: 1, 4: 2}[cfg.scale]
        self.up_convs = nn.ModuleList([nn.Conv2d(C, 4 * C, 3, padding=1) for _ in range(stages)])
        self.shuffle = nn.PixelShuffle(2)
        self.conv_last = nn.Conv2d(C, 3, 3, padding=1)
        nn.init.zeros_(self.conv_last.weight)
        nn.init.zeros_(self.conv_last.bias)

    # -- stages --------------------------------------------------------------

    def _check_input(self, burst: torch.Tensor) -> None:
        if burst.dim() != 5 or burst.shape[2] != 4:
            raise DimensionError(f"expected a (B, N, 4, h, w) burst, got {tuple(burst.shape)}")
        B, N, _, h, w = burst.shape
        if N == 0:
            raise InputError("burst has no frames")
        if not self.cfg.tie_fusion and N != self.cfg.burst_size:
            raise InputError(f"model was built for bursts of {self.cfg.burst_size} frames, got {N}")
        if h % 4 or w % 4:
            raise DimensionError(f"packed frame size {h}x{w} must be divisible by 4")

    def compute_flows(self, burst: torch.Tensor) -> FlowPyramid:
        """Flow pyramid aligning every frame to frame 0, batched as (B*N, 2, ...)."""
        B, N, _, h, w = burst.shape
        if not self.cfg.use_flow_guidance:
            return zero_pyramid(burst.new_empty(B * N, 1, 2 * h, 2 * w))
        with torch.set_grad_enabled(torch.is_grad_enabled() and self.conv_flow.weight.requires_grad):
            mos = unpack(burst.reshape(B * N, 4, h, w))
            img = self.conv_flow(mos)
            ref = img.view(B, N, 3, 2 * h, 2 * w)[:, :1].expand(B, N, 3, 2 * h, 2 * w).reshape(B * N, 3, 2 * h, 2 * w)
            return self.flownet.estimate_padded(img, ref)

    def extract(self, burst: torch.Tensor) -> torch.Tensor:
        """Per-frame features at mosaic resolution, (B*N, C, 2h, 2w)."""
        B, N, _, h, w = burst.shape
        frames = burst.reshape(B * N, 4, h, w)
        if not self.cfg.use_new_pipeline:
            frames = unpack(frames)
        x = F.leaky_relu(self.conv_first(frames), 0.1)
        x = self.extractor(x)
        return self.extract_shuffle(self.conv_after_extract(x))

    def align_burst(self, burst: torch.Tensor, flows: FlowPyramid | None = None) -> torch.Tensor:
        """Aligned features (B, N, C, 2h, 2w)."""
        self._check_input(burst)
        B, N = burst.shape[:2]
        if flows is None:
            flows = self.compute_flows(burst)
        l1 = self.enhance(self.extract(burst))
        l2 = F.leaky_relu(self.down_l2(l1), 0.1)
        l3 = F.leaky_relu(self.down_l3(l2), 0.1)
        feats = [l1, l2, l3]

        def ref_of(f):
            shp = f.shape[1:]
            return f.view(B, N, *shp)[:, :1].expand(B, N, *shp).reshape(B * N, *shp)

        aligned = self.align(feats, [ref_of(f) for f in feats], flows)
        return aligned.view(B, N, *aligned.shape[1:])

    def fuse(self, aligned: torch.Tensor) -> torch.Tensor:
        B, N, C, H, W = aligned.shape
        if self.cfg.tie_fusion:
            fused = self.fusion(aligned.reshape(B * N, C, H, W)).view(B, N, C, H, W).sum(dim=1)
        else:
            fused = self.fusion(aligned.reshape(B, N * C, H, W))
        return F.leaky_relu(fused, 0.1)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        y = x
        for group in self.body:
            y = group(y)
        x = self.conv_after_body(y) + x
        for conv in self.up_convs:
            x = F.leaky_relu(self.shuffle(conv(x)), 0.1)
        return self.conv_last(x)

    def global_skip(self, burst: torch.Tensor) -> torch.Tensor:
        return baseline_upsample(burst[:, 0], self.cfg.scale)

    def forward(self, burst: torch.Tensor, flows: FlowPyramid | None = None) -> torch.Tensor:
        """(B, N, 4, h, w) packed RAW burst -> (B, 3, 2hs, 2ws) linear RGB."""
        if self.cfg.single_frame:
            burst = burst[:, :1].expand_as(burst)
        aligned = self.align_burst(burst, flows)
        return self.global_skip(burst) + self.reconstruct(self.fuse(aligned))

    # -- introspection -------------------------------------------------------

    def describe(self) -> dict:
        cfg = self.cfg
        return {
            "pipeline": "new" if cfg.use_new_pipeline else "old",
            "extraction_resolution": "packed" if cfg.use_new_pipeline else "mosaic",
            "extractor": cfg.extractor_kind,
            "alignment": ("pyramid_fgdcn" if cfg.use_flow_guidance else "pyramid_dcn"),
            "has_flownet": hasattr(self, "flownet"),
            "reconstructor": cfg.reconstructor_kind,
            "fusion": "conv1x1",
            "parameters": count_module_parameters(self),
        }


def count_module_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_parameters(cfg: ModelConfig) -> int:
    """Exact number of learnable scalars of a model built from ``cfg``."""
    with torch.device("meta"):
        model = BSRT(cfg)
    return count_module_parameters(model)


def ablation_variant(cfg: ModelConfig, row: int | None = None, **switches) -> BSRT:
    """Build a model with ablation switches applied (or one of the numbered ABLATION_ROWS)."""
    if row is not None:
        if row not in ABLATION_ROWS:
            raise ConfigError(f"ablation row must be one of {sorted(ABLATION_ROWS)}")
        switches = {**ABLATION_ROWS[row], **switches}
    return BSRT(replace(cfg, **switches))
