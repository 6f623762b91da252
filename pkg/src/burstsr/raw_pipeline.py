"""Synthetic RAW burst generation and Bayer packing primitives.

Each burst frame is produced from a clean sRGB image by unprocessing it to
linear camera space, moving it with a small rigid transform, downsampling
with an antialiased bicubic filter, sampling an RGGB mosaic, packing the
mosaic into four half-resolution planes and adding heteroscedastic noise.

Tensors are channel-first. A mosaic is ``(..., 1, H, W)``; a packed frame is
``(..., 4, H/2, W/2)`` with channel order R, G1, G2, B.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DimensionError
from .sampling import bilinear_sample, pixel_grid

SRGB = "srgb"
LINEAR = "linear"


@dataclass
class RgbImage:
    """A 3xHxW image with values in [0, 1] and a declared color space."""

    data: torch.Tensor
    color_space: str = SRGB

    def __post_init__(self):
        if self.color_space not in (SRGB, LINEAR):
            raise ContractError(f"unknown color space {self.color_space!r}")
        if self.data.dim() != 3 or self.data.shape[0] != 3:
            raise DimensionError(f"RgbImage expects 3xHxW, got {tuple(self.data.shape)}")

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]


@dataclass
class TransformParams:
    """Rigid motion at HR resolution: translation in pixels, rotation in radians."""

    dx: float = 0.0
    dy: float = 0.0
    rotation: float = 0.0

    def is_identity(self) -> bool:
        return self.dx == 0 and self.dy == 0 and self.rotation == 0


@dataclass
class NoiseParams:
    read_sigma: float = 0.0
    shot_gain: float = 0.0

    def __post_init__(self):
        for name in ("read_sigma", "shot_gain"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")


@dataclass
class CameraParams:
    """Color correction matrix (camera -> linear RGB) and white-balance gains."""

    ccm: list = field(default_factory=lambda: np.eye(3).tolist())
    red_gain: float = 1.0
    blue_gain: float = 1.0


@dataclass
class BurstConfig:
    burst_size: int = 4
    scale: int = 4
    max_shift: float = 8.0
    max_rotation_deg: float = 1.0
    read_sigma_range: tuple = (1e-3, 1e-2)
    shot_gain_range: tuple = (1e-4, 3e-3)
    red_gain_range: tuple = (1.5, 2.5)
    blue_gain_range: tuple = (1.5, 2.5)
    ccm_offdiag: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if int(self.burst_size) < 1:
            raise ConfigError(f"burst_size must be >= 1, got {self.burst_size}")
        if self.scale not in (1, 2, 4):
            raise ConfigError(f"scale must be 1, 2 or 4, got {self.scale}")
        if self.max_shift < 0 or self.max_rotation_deg < 0 or self.ccm_offdiag < 0:
            raise ConfigError("max_shift, max_rotation_deg and ccm_offdiag must be non-negative")
        for name in ("read_sigma_range", "shot_gain_range", "red_gain_range", "blue_gain_range"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi) or not math.isfinite(hi):
                raise ConfigError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        for name in ("red_gain_range", "blue_gain_range"):
            if getattr(self, name)[0] <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class BurstSample:
    """One synthetic burst. ``frames[0]`` is the reference (identity motion)."""

    frames: torch.Tensor  # (N, 4, h, w) packed, linear light
    hr: RgbImage  # linear camera-space target
    transforms: list
    noise: NoiseParams
    camera: CameraParams
    scale: int
    seed: int
    gt_flows: torch.Tensor | None = None  # (N, 2, 2h, 2w), mosaic resolution

    def meta(self) -> dict:
        return {
            "scale": self.scale,
            "seed": self.seed,
            "burst_size": int(self.frames.shape[0]),
            "packed_size": [int(self.frames.shape[-2]), int(self.frames.shape[-1])],
            "transforms": [asdict(t) for t in self.transforms],
            "noise": asdict(self.noise),
            "camera": asdict(self.camera),
            "hr_color_space": self.hr.color_space,
        }


# -- packing -----------------------------------------------------------------

def _check_even(h: int, w: int, what: str) -> None:
    if h % 2 or w % 2:
        raise DimensionError(f"{what} needs even height and width, got {h}x{w}")


def mosaic(img: RgbImage) -> torch.Tensor:
    """RGGB-sample a linear RGB image into a 1xHxW mosaic."""
    if img.color_space != LINEAR:
        raise ContractError("mosaic expects a linear-light image; unprocess sRGB input first")
    return mosaic_tensor(img.data)


def mosaic_tensor(rgb: torch.Tensor) -> torch.Tensor:
    H, W = rgb.shape[-2:]
    _check_even(H, W, "mosaic")
    out = rgb.new_empty(*rgb.shape[:-3], 1, H, W)
    out[..., 0, 0::2, 0::2] = rgb[..., 0, 0::2, 0::2]
    out[..., 0, 0::2, 1::2] = rgb[..., 1, 0::2, 1::2]
    out[..., 0, 1::2, 0::2] = rgb[..., 1, 1::2, 0::2]
    out[..., 0, 1::2, 1::2] = rgb[..., 2, 1::2, 1::2]
    return out


def pack(m: torch.Tensor) -> torch.Tensor:
    """(..., 1, H, W) mosaic -> (..., 4, H/2, W/2) planes R, G1, G2, B."""
    H, W = m.shape[-2:]
    _check_even(H, W, "pack")
    return torch.stack(
        [m[..., 0, 0::2, 0::2], m[..., 0, 0::2, 1::2], m[..., 0, 1::2, 0::2], m[..., 0, 1::2, 1::2]],
        dim=-3,
    )


def unpack(p: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`pack` (a 2x pixel shuffle)."""
    if p.shape[-3] != 4:
        raise DimensionError(f"unpack expects 4 channels, got {p.shape[-3]}")
    h, w = p.shape[-2:]
    out = p.new_empty(*p.shape[:-3], 1, 2 * h, 2 * w)
    out[..., 0, 0::2, 0::2] = p[..., 0, :, :]
    out[..., 0, 0::2, 1::2] = p[..., 1, :, :]
    out[..., 0, 1::2, 0::2] = p[..., 2, :, :]
    out[..., 0, 1::2, 1::2] = p[..., 3, :, :]
    return out


# -- camera pipeline ---------------------------------------------------------

def srgb_to_linear(x: torch.Tensor) -> torch.Tensor:
    return torch.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: torch.Tensor) -> torch.Tensor:
    x = x.clamp(0, 1)
    return torch.where(x <= 0.0031308, x * 12.92, 1.055 * x ** (1 / 2.4) - 0.055)


def random_camera(rng: np.random.Generator, cfg: BurstConfig | None = None) -> CameraParams:
    cfg = cfg or BurstConfig()
    ccm = np.eye(3)
    off = ~np.eye(3, dtype=bool)
    ccm[off] = rng.uniform(-cfg.ccm_offdiag, cfg.ccm_offdiag, size=6)
    ccm /= ccm.sum(axis=1, keepdims=True)
    return CameraParams(
        ccm=ccm.tolist(),
        red_gain=float(rng.uniform(*cfg.red_gain_range)),
        blue_gain=float(rng.uniform(*cfg.blue_gain_range)),
    )


def _apply_matrix(img: torch.Tensor, m: np.ndarray) -> torch.Tensor:
    mt = torch.as_tensor(m, dtype=img.dtype, device=img.device)
    return torch.einsum("ij,j...->i...", mt, img)


def _gains(camera: CameraParams, dtype, device) -> torch.Tensor:
    return torch.tensor([camera.red_gain, 1.0, camera.blue_gain], dtype=dtype, device=device).view(3, 1, 1)


def inverse_camera_pipeline(img: RgbImage, rng: np.random.Generator | None = None,
                            camera: CameraParams | None = None,
                            cfg: BurstConfig | None = None) -> tuple[RgbImage, CameraParams]:
    """sRGB -> linear camera space: inverse gamma, inverse CCM, inverse white balance.

    Camera parameters are drawn from ``rng`` unless given explicitly; the
    ones used are returned so the forward pipeline can undo the mapping.
    """
    if img.color_space != SRGB:
        raise ContractError("inverse_camera_pipeline expects an sRGB image")
    if camera is None:
        if rng is None:
            raise ContractError("either rng or camera must be provided")
        camera = random_camera(rng, cfg)
    lin = srgb_to_linear(img.data)
    cam = _apply_matrix(lin, np.linalg.inv(np.asarray(camera.ccm)))
    cam = cam / _gains(camera, cam.dtype, cam.device)
    return RgbImage(cam.clamp(0, 1), LINEAR), camera


def forward_camera_pipeline(img: RgbImage, camera: CameraParams) -> RgbImage:
    """Linear camera space -> sRGB (white balance, CCM, gamma)."""
    if img.color_space != LINEAR:
        raise ContractError("forward_camera_pipeline expects a linear image")
    rgb = _apply_matrix(img.data * _gains(camera, img.data.dtype, img.data.device), np.asarray(camera.ccm))
    return RgbImage(linear_to_srgb(rgb.clamp(0, 1)), SRGB)


# -- degradation -------------------------------------------------------------

def _motion_center(H: int, W: int) -> tuple[float, float]:
    return (W - 1) / 2.0, (H - 1) / 2.0


def warp_rigid(img: torch.Tensor, t: TransformParams) -> torch.Tensor:
    """out(p) = img(R (p - c) + c + d), bilinear, clamped to the image border."""
    if t.is_identity():
        return img.clone()
    C, H, W = img.shape
    ys, xs = pixel_grid(H, W, dtype=img.dtype, device=img.device)
    cx, cy = _motion_center(H, W)
    cos, sin = math.cos(t.rotation), math.sin(t.rotation)
    u, v = xs - cx, ys - cy
    sx = (cos * u - sin * v + cx + t.dx).clamp(0, W - 1)
    sy = (sin * u + cos * v + cy + t.dy).clamp(0, H - 1)
    out = bilinear_sample(img.unsqueeze(0), sy.reshape(1, -1), sx.reshape(1, -1))
    return out.view(C, H, W)


def bicubic_downsample(img: torch.Tensor, s: int) -> torch.Tensor:
    if s == 1:
        return img.clone()
    H, W = img.shape[-2:]
    out = F.interpolate(img.unsqueeze(0), size=(H // s, W // s), mode="bicubic",
                        align_corners=False, antialias=True)
    return out.squeeze(0)


def add_noise(x: torch.Tensor, noise: NoiseParams, rng: np.random.Generator) -> torch.Tensor:
    """Add N(0, read^2 + shot * signal) per pixel and clip to [0, 1]."""
    if noise.read_sigma == 0 and noise.shot_gain == 0:
        return x.clamp(0, 1)
    var = noise.read_sigma ** 2 + noise.shot_gain * x.clamp(min=0)
    z = torch.from_numpy(rng.standard_normal(tuple(x.shape))).to(x.dtype)
    return (x + var.sqrt() * z).clamp(0, 1)


def degrade(hr_linear: RgbImage, t: TransformParams, s: int, noise: NoiseParams,
            rng: np.random.Generator | None = None) -> torch.Tensor:
    """One packed RAW frame: warp, bicubic downsample, mosaic, pack, add noise."""
    if hr_linear.color_space != LINEAR:
        raise ContractError("degrade expects a linear image")
    if s not in (1, 2, 4):
        raise ConfigError(f"scale must be 1, 2 or 4, got {s}")
    H, W = hr_linear.height, hr_linear.width
    if H % (2 * s) or W % (2 * s):
        raise DimensionError(f"HR size {H}x{W} must be divisible by {2 * s}")
    lr = bicubic_downsample(warp_rigid(hr_linear.data, t), s)
    packed = pack(mosaic_tensor(lr))
    if rng is None:
        rng = np.random.default_rng()
    return add_noise(packed, noise, rng)


def rigid_flow(t: TransformParams, s: int, hr_size: tuple[int, int], dtype=torch.float64) -> torch.Tensor:
    """Flow (2, H/s, W/s) at LR mosaic resolution aligning a frame to the reference.

    ``warp(frame, flow)`` samples the frame at the location where each
    reference pixel's scene point landed.
    """
    H, W = hr_size
    h, w = H // s, W // s
    if t.is_identity():
        return torch.zeros(2, h, w, dtype=dtype)
    ys, xs = pixel_grid(h, w, dtype=dtype)
    qx = (xs + 0.5) * s - 0.5
    qy = (ys + 0.5) * s - 0.5
    cx, cy = _motion_center(H, W)
    u, v = qx - cx - t.dx, qy - cy - t.dy
    cos, sin = math.cos(t.rotation), math.sin(t.rotation)
    px_hr = cos * u + sin * v + cx
    py_hr = -sin * u + cos * v + cy
    fx = (px_hr + 0.5) / s - 0.5 - xs
    fy = (py_hr + 0.5) / s - 0.5 - ys
    return torch.stack([fx, fy])


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *keys])


_CAMERA, _NOISE_PARAMS, _MOTION, _NOISE = 0, 1, 2, 3


def draw_noise(rng: np.random.Generator, cfg: BurstConfig) -> NoiseParams:
    def loguniform(lo, hi):
        if lo == hi or lo == 0:
            return float(rng.uniform(lo, hi))
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))

    return NoiseParams(loguniform(*cfg.read_sigma_range), loguniform(*cfg.shot_gain_range))


def draw_transform(rng: np.random.Generator, cfg: BurstConfig) -> TransformParams:
    max_rot = math.radians(cfg.max_rotation_deg)
    return TransformParams(
        dx=float(rng.uniform(-cfg.max_shift, cfg.max_shift)),
        dy=float(rng.uniform(-cfg.max_shift, cfg.max_shift)),
        rotation=float(rng.uniform(-max_rot, max_rot)),
    )


def synthesize_burst(hr: RgbImage, cfg: BurstConfig, transforms: list | None = None,
                     noise: NoiseParams | None = None, camera: CameraParams | None = None) -> BurstSample:
    """Generate a burst from an sRGB image; every random draw is keyed by ``cfg.seed``.

    ``transforms``, ``noise`` and ``camera`` override the random draws when
    given (``transforms[0]`` must then be the identity).
    """
    cfg.validate()
    N, s = int(cfg.burst_size), cfg.scale
    if camera is None:
        camera = random_camera(_rng(cfg.seed, _CAMERA), cfg)
    hr_lin, camera = inverse_camera_pipeline(hr, camera=camera)
    if noise is None:
        noise = draw_noise(_rng(cfg.seed, _NOISE_PARAMS), cfg)
    if transforms is None:
        transforms = [TransformParams()] + [draw_transform(_rng(cfg.seed, _MOTION, i), cfg) for i in range(1, N)]
    if len(transforms) != N or not transforms[0].is_identity():
        raise ConfigError("transforms must hold burst_size entries with an identity reference")
    frames = torch.stack([
        degrade(hr_lin, t, s, noise, _rng(cfg.seed, _NOISE, i)) for i, t in enumerate(transforms)
    ])
    flows = torch.stack([rigid_flow(t, s, (hr_lin.height, hr_lin.width)) for t in transforms])
    return BurstSample(frames=frames, hr=hr_lin, transforms=list(transforms), noise=noise,
                       camera=camera, scale=s, seed=int(cfg.seed), gt_flows=flows)
