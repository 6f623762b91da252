"""``burstsr synth|train|eval|infer|plot``.

Each command ends by printing one ``status=ok|error command=<name> key=value ...``
line and exits nonzero on error.
"""

from __future__ import annotations

import argparse
import logging
import shlex
import sys
from pathlib import Path

import torch

from . import __version__
from .checkpoint import check_compatible, load_checkpoint, restore_model
from .config import load_config
from .dataset import (BurstDataset, load_images, procedural_images, read_meta, read_frames, synthesize_dataset,
                      write_png16)
from .errors import BurstSRError, InputError
from .evaluate import super_resolve, evaluate_dataset, write_report
from .model import BSRT, ModelConfig, count_module_parameters
from .plots import plot_training
from .training import Trainer

log = logging.getLogger("burstsr")


def _status(ok: bool, command: str, **fields) -> str:
    parts = [f"status={'ok' if ok else 'error'}", f"command={command}"]
    parts += [f"{k}={shlex.quote(str(v))}" for k, v in fields.items()]
    return " ".join(parts)


def _load_model(checkpoint: Path):
    ckpt = load_checkpoint(checkpoint)
    cfg = ModelConfig.from_dict(ckpt.model_config)
    dtype = torch.float64 if ckpt.train_state.get("dtype") == "float64" else torch.float32
    model = BSRT(cfg).to(dtype)
    restore_model(model, ckpt)
    model.eval()
    return model, cfg, ckpt


def cmd_synth(args) -> dict:
    run = load_config(args.config, args.set)
    out = Path(args.out or run.data.out_dir)
    count = args.procedural if args.procedural is not None else run.data.procedural
    size = args.size or run.data.hr_size or None
    if count:
        images = procedural_images(count, size or 128, run.data.burst.seed)
    else:
        rgb_dir = args.rgb_dir or run.data.rgb_dir
        if not rgb_dir:
            raise InputError("synth needs --rgb-dir or --procedural N")
        images = load_images(Path(rgb_dir))
    ids = synthesize_dataset(images, out, run.data.burst, size)
    return {"samples": len(ids), "out": out}


def cmd_train(args) -> dict:
    run = load_config(args.config, args.set)
    trainer = Trainer(run.model, run.train, resume=args.resume)
    history = trainer.run()
    final = history[-1]["loss"] if history else float("nan")
    return {"step": trainer.step, "final_loss": repr(final), "out": trainer.out_dir}


def cmd_eval(args) -> dict:
    run = load_config(args.config, args.set)
    checkpoint = Path(args.checkpoint or run.eval.checkpoint)
    model, cfg, _ = _load_model(checkpoint)
    if args.config or any(s.startswith("model.") for s in args.set):
        check_compatible(cfg.to_dict(), run.model.to_dict())
    data = Path(args.data or run.eval.data_dir)
    dataset = BurstDataset(data, dtype=next(model.parameters()).dtype)
    report = evaluate_dataset(model, dataset, cfg.burst_size)
    out = Path(args.report or run.eval.report or checkpoint.with_suffix(".eval.txt"))
    write_report(out, report, {"config_hash": cfg.config_hash(), "parameters": count_module_parameters(model),
                               "checkpoint": checkpoint.name})
    return {"mean_psnr": repr(report.mean_psnr), "mean_ssim": repr(report.mean_ssim), "report": out}


def cmd_infer(args) -> dict:
    model, cfg, _ = _load_model(Path(args.checkpoint))
    burst_dir = Path(args.burst)
    frames = read_frames(burst_dir, read_meta(burst_dir))
    if frames.shape[0] < cfg.burst_size:
        raise InputError(f"{burst_dir} holds {frames.shape[0]} frames, model needs {cfg.burst_size}")
    sr = super_resolve(model, frames[:cfg.burst_size])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_png16(out, sr)
    return {"out": out, "height": sr.shape[-2], "width": sr.shape[-1]}


def cmd_plot(args) -> dict:
    sidecar = plot_training(Path(args.log), Path(args.out), [Path(r) for r in args.reports or []])
    return {"files": ",".join(sidecar["files"]), "out": args.out}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="burstsr", description="Burst RAW super-resolution toolkit")
    p.add_argument("--version", action="version", version=f"burstsr {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="TOML file with [data] [model] [train] [eval] sections")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        return sp

    sp = with_config(sub.add_parser("synth", help="synthesize a RAW burst dataset"))
    sp.add_argument("--rgb-dir")
    sp.add_argument("--procedural", type=int, help="generate N procedural scenes instead of reading images")
    sp.add_argument("--size", type=int, help="HR size (center crop, or procedural scene size)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_synth)

    sp = with_config(sub.add_parser("train", help="train a model"))
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("eval", help="evaluate a checkpoint on a dataset"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--report")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="super-resolve one stored burst to a 16-bit PNG")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--burst", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("plot", help="plot training curves")
    sp.add_argument("--log", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--reports", nargs="*", help="eval reports for a PSNR-vs-parameters scatter")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        fields = args.func(args)
    except (BurstSRError, OSError) as exc:
        print(_status(False, args.command, error=type(exc).__name__, message=str(exc)))
        return 1
    print(_status(True, args.command, **fields))
    return 0


if __name__ == "__main__":
    sys.exit(main())
