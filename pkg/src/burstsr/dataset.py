"""On-disk burst datasets.

Layout::

    root/
      manifest          one sample directory name per line
      sample_0000/
        hr.png          16-bit RGB, linear camera space
        frame_00.bin    uint16 little-endian, 4 x h x w channel-major, round(x * 65535)
        ...
        meta.json       transforms, noise, camera, seed, scale
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import InputError
from .raw_pipeline import BurstConfig, RgbImage, synthesize_burst
from .scenes import procedural_scene

log = logging.getLogger(__name__)

MANIFEST = "manifest"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}


def quantize16(x: np.ndarray | torch.Tensor) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().double().numpy()
    return np.round(np.clip(x, 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_png16(path: Path, rgb: np.ndarray | torch.Tensor) -> None:
    """Write a (3, H, W) image in [0, 1] as a 16-bit RGB PNG."""
    q = quantize16(rgb)
    if q.ndim != 3 or q.shape[0] != 3:
        raise InputError(f"expected a 3xHxW image, got {q.shape}")
    if not cv2.imwrite(str(path), np.ascontiguousarray(q.transpose(1, 2, 0)[..., ::-1])):
        raise InputError(f"could not write {path}")


def read_png16(path: Path) -> torch.Tensor:
    """Read a 16-bit RGB PNG as a float64 (3, H, W) tensor in [0, 1]."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None or img.dtype != np.uint16 or img.ndim != 3:
        raise InputError(f"{path} is not a 16-bit RGB image")
    return torch.from_numpy(img[..., 2::-1].transpose(2, 0, 1) / 65535.0)


def read_rgb(path: Path) -> np.ndarray | None:
    """Any 8/16-bit color or gray image as (H, W, 3) float in [0, 1]; None if unreadable."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        return None
    if img.dtype == np.uint8:
        img = img / 255.0
    elif img.dtype == np.uint16:
        img = img / 65535.0
    else:
        return None
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    elif img.shape[2] == 4:
        img = img[..., :3]
    return np.ascontiguousarray(img[..., ::-1])


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def write_sample(directory: Path, sample, extra: dict | None = None) -> dict:
    directory.mkdir(parents=True, exist_ok=True)
    write_png16(directory / "hr.png", sample.hr.data)
    for i, frame in enumerate(sample.frames):
        (directory / f"frame_{i:02d}.bin").write_bytes(quantize16(frame).astype("<u2").tobytes())
    meta = sample.meta()
    meta["hr_size"] = [sample.hr.height, sample.hr.width]
    meta.update(extra or {})
    (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return meta


def read_meta(directory: Path) -> dict:
    path = Path(directory) / "meta.json"
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def read_frames(directory: Path, meta: dict | None = None) -> torch.Tensor:
    """Packed frames (N, 4, h, w) as float64 in [0, 1]."""
    directory = Path(directory)
    meta = meta or read_meta(directory)
    h, w = meta["packed_size"]
    frames = []
    for i in range(int(meta["burst_size"])):
        path = directory / f"frame_{i:02d}.bin"
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise InputError(f"cannot read frame file {path}: {exc}") from exc
        if len(raw) != 2 * 4 * h * w:
            raise InputError(f"frame file {path} holds {len(raw)} bytes, expected {2 * 4 * h * w}")
        frames.append(np.frombuffer(raw, dtype="<u2").reshape(4, h, w) / 65535.0)
    return torch.from_numpy(np.stack(frames))


def write_manifest(root: Path, ids: list[str]) -> None:
    (root / MANIFEST).write_text("".join(f"{i}\n" for i in ids))


def read_manifest(root: Path) -> list[str]:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise InputError(f"no dataset manifest at {path}")
    ids = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    if not ids:
        raise InputError(f"manifest {path} is empty")
    return ids


def is_validation(sample_id: str, fraction: float = 0.1) -> bool:
    """Stable split: a sample is held out when its name hashes into the first ``fraction``."""
    h = int.from_bytes(hashlib.sha256(sample_id.encode()).digest()[:8], "little")
    return h / 2 ** 64 < fraction


def split_ids(ids: list[str], fraction: float = 0.1) -> tuple[list[str], list[str]]:
    val = [i for i in ids if is_validation(i, fraction)]
    train = [i for i in ids if not is_validation(i, fraction)]
    return train, val


def _crop_to_multiple(img: np.ndarray, m: int, size: int | None) -> np.ndarray:
    H, W = img.shape[:2]
    if size:
        if H < size or W < size:
            return img[:0]
        y0, x0 = (H - size) // 2, (W - size) // 2
        return img[y0:y0 + size, x0:x0 + size]
    return img[: H - H % m, : W - W % m]


def synthesize_dataset(images: list[tuple[str, np.ndarray]], out_dir: Path, cfg: BurstConfig,
                       hr_size: int | None = None) -> list[str]:
    """Write one burst per (name, HxWx3 sRGB image); returns the sample ids."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for index, (name, img) in enumerate(images):
        img = _crop_to_multiple(img, 2 * cfg.scale, hr_size)
        if img.shape[0] == 0 or img.shape[1] == 0:
            log.warning("skipping %s: smaller than the requested crop", name)
            continue
        sample_cfg = BurstConfig(**{**cfg.__dict__, "seed": sample_seed(cfg.seed, index)})
        hr = RgbImage(torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).double(), "srgb")
        sample = synthesize_burst(hr, sample_cfg)
        sid = f"sample_{index:04d}"
        write_sample(out_dir / sid, sample, {"source": name, "id": sid})
        ids.append(sid)
    if not ids:
        raise InputError("no usable input images")
    write_manifest(out_dir, ids)
    return ids


def load_images(rgb_dir: Path) -> list[tuple[str, np.ndarray]]:
    rgb_dir = Path(rgb_dir)
    if not rgb_dir.is_dir():
        raise InputError(f"{rgb_dir} is not a directory")
    out = []
    for path in sorted(p for p in rgb_dir.iterdir() if p.is_file()):
        img = read_rgb(path) if path.suffix.lower() in IMAGE_SUFFIXES else None
        if img is None:
            log.warning("skipping unreadable file %s", path)
            continue
        out.append((path.name, img))
    if not out:
        raise InputError(f"no readable images in {rgb_dir}")
    return out


def procedural_images(count: int, size: int, seed: int) -> list[tuple[str, np.ndarray]]:
    return [(f"procedural_{i:04d}", procedural_scene(np.random.default_rng([int(seed), i, 99]), size))
            for i in range(count)]


@dataclass
class BurstItem:
    sample_id: str
    frames: torch.Tensor  # (N, 4, h, w)
    hr: torch.Tensor  # (3, H, W)
    meta: dict


class BurstDataset:
    """In-memory view of a dataset directory (the sets used here are small)."""

    def __init__(self, root: Path, ids: list[str] | None = None, dtype=torch.float32):
        self.root = Path(root)
        if not self.root.is_dir():
            raise InputError(f"dataset directory {self.root} does not exist")
        self.ids = list(ids) if ids is not None else read_manifest(self.root)
        self.items = []
        for sid in self.ids:
            d = self.root / sid
            meta = read_meta(d)
            self.items.append(BurstItem(sid, read_frames(d, meta).to(dtype), read_png16(d / "hr.png").to(dtype), meta))

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i: int) -> BurstItem:
        return self.items[i]

    @property
    def scale(self) -> int:
        return int(self.items[0].meta["scale"])


def crop_item(item: BurstItem, crop: int | None, top: int, left: int, burst_size: int | None = None):
    """Aligned crop of frames and HR; ``top``/``left`` are in packed pixels."""
    frames, hr = item.frames, item.hr
    if burst_size is not None:
        if burst_size > frames.shape[0]:
            raise InputError(f"{item.sample_id} has {frames.shape[0]} frames, {burst_size} requested")
        frames = frames[:burst_size]
    if crop is None:
        return frames, hr
    f = 2 * int(item.meta["scale"])
    c = crop // f
    return frames[..., top:top + c, left:left + c], hr[..., top * f:(top + c) * f, left * f:(left + c) * f]
