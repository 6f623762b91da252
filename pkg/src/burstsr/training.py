"""Training loop with checkpointing and exact resumption.

Every random choice in a step (batch membership, crop position) is drawn from
a generator keyed by ``(seed, step)``, so a resumed run sees exactly the
batches the uninterrupted run would have seen and no RNG state needs saving.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import check_compatible, load_checkpoint, restore_model, restore_optimizer, save_checkpoint
from .dataset import BurstDataset, BurstItem, crop_item, read_manifest, split_ids
from .errors import ConfigError, InputError, TrainingDiverged
from .evaluate import evaluate_dataset
from .flow import endpoint_error, pool_flow
from .losses import aligned_l1_loss, flownet_aligner, l1_report
from .model import BSRT, ModelConfig
from .raw_pipeline import TransformParams, rigid_flow

log = logging.getLogger(__name__)

_CROP, _EPOCH, _PRETEXT = 12, 13, 14


@dataclass
class TrainConfig:
    data_dir: str = "data/train"
    out_dir: str = "runs/default"
    lr: float = 8e-5
    betas: tuple = (0.9, 0.999)
    halving_interval: int = 150
    epochs: int = 0  # when > 0, overrides ``steps``
    steps: int = 500
    batch_size: int = 2
    crop: int = 64
    seed: int = 0
    grad_clip: float = 5.0
    checkpoint_every: int = 100
    keep_checkpoints: bool = False
    val_every: int = 0  # 0: validate at checkpoints only
    val_fraction: float = 0.1
    double: bool = False
    loss: str = "l1"
    flow_pretrain_steps: int = 0
    flow_pretrain_lr: float = 1e-3
    flow_pretrain_batch: int = 8

    def __post_init__(self):
        self.betas = tuple(self.betas)

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.halving_interval < 1:
            raise ConfigError("halving_interval must be >= 1")
        if self.batch_size < 1 or self.flow_pretrain_batch < 1 or self.steps < 0 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and steps/epochs non-negative")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.loss not in ("l1", "aligned_l1"):
            raise ConfigError(f"loss must be 'l1' or 'aligned_l1', got {self.loss!r}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at_epoch(lr0: float, epoch: int, halving_interval: int) -> float:
    """Step decay: the rate halves after every ``halving_interval`` epochs."""
    return lr0 * 2.0 ** -(epoch // halving_interval)


def item_gt_flows(item: BurstItem) -> torch.Tensor:
    """Analytic flows (N, 2, 2h, 2w) recomputed from the stored transforms."""
    s = int(item.meta["scale"])
    hr_size = tuple(item.meta["hr_size"])
    return torch.stack([
        rigid_flow(TransformParams(**t), s, hr_size, dtype=item.frames.dtype) for t in item.meta["transforms"]
    ])


def flow_pretext_loss(model: BSRT, frames: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Endpoint error of the model's flow pyramid against pooled analytic flows."""
    B, N = frames.shape[:2]
    pyr = model.compute_flows(frames)
    gt = gt.reshape(B * N, *gt.shape[2:])
    return sum(endpoint_error(f, pool_flow(gt, 2 ** k)) for k, f in enumerate(pyr))


class Trainer:
    def __init__(self, model_cfg: ModelConfig, cfg: TrainConfig, resume: str | Path | None = None):
        cfg.validate()
        model_cfg.validate()
        self.cfg, self.model_cfg = cfg, model_cfg
        self.dtype = torch.float64 if cfg.double else torch.float32
        self.out_dir = Path(cfg.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        ids = read_manifest(Path(cfg.data_dir))
        train_ids, val_ids = split_ids(ids, cfg.val_fraction) if cfg.val_fraction > 0 else (ids, [])
        if not train_ids:
            raise InputError("validation split left no training samples")
        self.train_set = BurstDataset(cfg.data_dir, train_ids, self.dtype)
        self.val_set = BurstDataset(cfg.data_dir, val_ids, self.dtype) if val_ids else None
        self.gt_flows = [item_gt_flows(it) for it in self.train_set.items]
        if self.train_set.scale != model_cfg.scale:
            raise ConfigError(f"dataset scale {self.train_set.scale} differs from model scale {model_cfg.scale}")

        torch.manual_seed(cfg.seed)
        self.model = BSRT(model_cfg).to(self.dtype)
        self.params = [p for p in self.model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(self.params, lr=cfg.lr, betas=cfg.betas)
        self.step = 0
        self.best_psnr = -math.inf
        self.best_step = 0
        self.history: list[dict] = []
        if resume is not None:
            self._resume(Path(resume))
        else:
            (self.out_dir / "train.log").write_text("")

    # -- data ------------------------------------------------------------------

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_set) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch if self.cfg.epochs > 0 else self.cfg.steps

    def epoch_of(self, step: int) -> int:
        """Epoch during which 1-based update ``step`` happens."""
        return (step - 1) // self.steps_per_epoch

    def batch_indices(self, step: int) -> list[int]:
        spe = self.steps_per_epoch
        perm = np.random.default_rng([self.cfg.seed, _EPOCH, self.epoch_of(step)]).permutation(len(self.train_set))
        pos = (step - 1) % spe
        return [int(i) for i in perm[pos * self.cfg.batch_size:(pos + 1) * self.cfg.batch_size]]

    def _crop_batch(self, indices, rng):
        N = self.model_cfg.burst_size
        frames, hrs, flows = [], [], []
        for i in indices:
            item = self.train_set[i]
            h, w = item.frames.shape[-2:]
            hr_h = item.hr.shape[-2]
            crop = self.cfg.crop if self.cfg.crop and self.cfg.crop < hr_h else None
            top = left = 0
            if crop is not None:
                c = crop // (2 * self.train_set.scale)
                top, left = int(rng.integers(0, h - c + 1)), int(rng.integers(0, w - c + 1))
            f, hr = crop_item(item, crop, top, left, N)
            gt = self.gt_flows[i][:N]
            if crop is not None:
                c2 = 2 * (crop // (2 * self.train_set.scale))
                gt = gt[..., 2 * top:2 * top + c2, 2 * left:2 * left + c2]
            frames.append(f)
            hrs.append(hr)
            flows.append(gt)
        return torch.stack(frames), torch.stack(hrs), torch.stack(flows)

    def batch(self, step: int):
        idx = self.batch_indices(step)
        rng = np.random.default_rng([self.cfg.seed, _CROP, step])
        frames, hr, flows = self._crop_batch(idx, rng)
        return [self.train_set[i].sample_id for i in idx], frames, hr, flows

    # -- optimisation ------------------------------------------------------------

    def loss(self, sr: torch.Tensor, hr: torch.Tensor):
        if self.cfg.loss == "aligned_l1" and hasattr(self.model, "flownet"):
            return aligned_l1_loss(sr, hr, flownet_aligner(self.model.flownet))
        return l1_report(sr, hr)

    def pretrain_flow(self) -> list[float]:
        """Supervised warm start of the flow branch on the analytic flows."""
        cfg = self.model_cfg
        if self.cfg.flow_pretrain_steps <= 0 or not cfg.use_flow_guidance or cfg.single_frame:
            return []
        flow_params = list(self.model.conv_flow.parameters()) + list(self.model.flownet.parameters())
        for p in flow_params:  # a frozen flow branch is frozen for the SR loss only
            p.requires_grad_(True)
        opt = torch.optim.Adam(flow_params, lr=self.cfg.flow_pretrain_lr)
        losses = []
        n = len(self.train_set)
        with torch.enable_grad():
            for k in range(1, self.cfg.flow_pretrain_steps + 1):
                rng = np.random.default_rng([self.cfg.seed, _PRETEXT, k])
                idx = [int(i) for i in rng.integers(0, n, self.cfg.flow_pretrain_batch)]
                frames, _, flows = self._crop_batch(idx, rng)
                loss = flow_pretext_loss(self.model, frames, flows)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
        for p in flow_params:
            p.requires_grad_(not cfg.freeze_flow)
        self._log_line(f"flow_pretrain steps={len(losses)} epe_first={losses[0]!r} epe_last={losses[-1]!r}")
        return losses

    def train_step(self) -> float:
        step = self.step + 1
        lr = lr_at_epoch(self.cfg.lr, self.epoch_of(step), self.cfg.halving_interval)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        ids, frames, hr, _ = self.batch(step)
        report = self.loss(self.model(frames), hr)
        loss = report.total
        if not torch.isfinite(loss):
            dump = {"step": step, "batch_ids": ids, "loss": float(loss.detach())}
            (self.out_dir / "nan_dump.json").write_text(json.dumps(dump, indent=1))
            raise TrainingDiverged(f"non-finite loss at step {step} on batch {ids}")
        self.optimizer.zero_grad()
        loss.backward()
        if self.cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
        self.optimizer.step()
        self.step = step
        value = float(loss.detach())
        self.history.append({"step": step, "loss": value, "lr": lr})
        self._log_line(f"step={step} loss={value!r} lr={lr!r}")
        return value

    def validate(self) -> float | None:
        if self.val_set is None:
            return None
        report = evaluate_dataset(self.model, self.val_set, self.model_cfg.burst_size)
        self._log_line(f"step={self.step} val_psnr={report.mean_psnr!r} val_ssim={report.mean_ssim!r}")
        if report.mean_psnr > self.best_psnr:
            self.best_psnr, self.best_step = report.mean_psnr, self.step
            self.save(self.out_dir / "best.ckpt")
        return report.mean_psnr

    def run(self, until: int | None = None) -> list[dict]:
        """Train up to update ``until`` (default: the configured total)."""
        until = self.total_steps if until is None else until
        if self.step == 0:
            self.pretrain_flow()
        self.model.train()
        while self.step < until:
            self.train_step()
            at_ckpt = self.cfg.checkpoint_every > 0 and self.step % self.cfg.checkpoint_every == 0
            if (self.cfg.val_every > 0 and self.step % self.cfg.val_every == 0) or (self.cfg.val_every == 0 and at_ckpt):
                self.validate()
            if at_ckpt:
                self.save(self.out_dir / "last.ckpt")
                if self.cfg.keep_checkpoints:
                    self.save(self.out_dir / f"step_{self.step:06d}.ckpt")
        self.save(self.out_dir / "last.ckpt")
        return self.history

    # -- persistence -------------------------------------------------------------

    def train_state(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch_of(self.step + 1),
            "lr": self.optimizer.param_groups[0]["lr"],
            "best_psnr": self.best_psnr if math.isfinite(self.best_psnr) else None,
            "best_step": self.best_step,
            "rng": {"seed": self.cfg.seed, "scheme": "numpy default_rng keyed by (seed, stream, step)"},
            "dtype": "float64" if self.cfg.double else "float32",
        }

    def save(self, path: Path) -> None:
        save_checkpoint(path, self.model, self.model_cfg.to_dict(), self.optimizer, self.cfg.to_dict(),
                        self.train_state())

    def _resume(self, path: Path) -> None:
        ckpt = load_checkpoint(path)
        check_compatible(ckpt.model_config, self.model_cfg.to_dict())
        restore_model(self.model, ckpt)
        restore_optimizer(self.optimizer, self.model, ckpt)
        st = ckpt.train_state
        self.step = int(st["step"])
        self.best_psnr = st["best_psnr"] if st.get("best_psnr") is not None else -math.inf
        self.best_step = int(st.get("best_step", 0))
        self._log_line(f"resumed step={self.step} from={path}")

    def _log_line(self, line: str) -> None:
        log.info(line)
        with open(self.out_dir / "train.log", "a") as fh:
            fh.write(line + "\n")
