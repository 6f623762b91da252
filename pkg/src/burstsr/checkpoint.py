"""Checkpoint archive: a zip of little-endian ``.npy`` arrays plus ``meta.json``.

Members::

    meta.json                  format version, model config, train config, train state
    params/<name>.npy          every entry of the model state dict
    optim/<name>.exp_avg.npy   Adam first moment
    optim/<name>.exp_avg_sq.npy

Arrays are stored as ``<f4``; a model trained in double precision is stored
as ``<f8`` so that resuming reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, InputError

FORMAT = "burstsr-checkpoint"
VERSION = 1


def _array_bytes(t: torch.Tensor) -> bytes:
    a = t.detach().cpu().numpy()
    if a.dtype.kind == "f":
        a = a.astype("<f8" if a.dtype == np.float64 else "<f4")
    else:
        a = a.astype(a.dtype.newbyteorder("<"))
    buf = io.BytesIO()
    np.save(buf, a, allow_pickle=False)
    return buf.getvalue()


def _read_array(zf: zipfile.ZipFile, name: str) -> torch.Tensor:
    with zf.open(name) as fh:
        return torch.from_numpy(np.load(io.BytesIO(fh.read()), allow_pickle=False).copy())


def _write(zf: zipfile.ZipFile, name: str, data: bytes | str) -> None:
    # fixed timestamp keeps archives byte-identical across runs
    zf.writestr(zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0)), data)


@dataclass
class Checkpoint:
    model_config: dict
    params: dict
    train_config: dict = field(default_factory=dict)
    train_state: dict = field(default_factory=dict)
    moments: dict = field(default_factory=dict)  # name -> (exp_avg, exp_avg_sq, step)


def save_checkpoint(path: Path, model: torch.nn.Module, model_config: dict, optimizer=None,
                    train_config: dict | None = None, train_state: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model_config,
        "train_config": train_config or {},
        "train_state": train_state or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, t in model.state_dict().items():
            _write(zf, f"params/{name}.npy", _array_bytes(t))
        if optimizer is not None:
            names = {id(p): n for n, p in model.named_parameters()}
            for group in optimizer.param_groups:
                for p in group["params"]:
                    st = optimizer.state.get(p)
                    if not st:
                        continue
                    n = names[id(p)]
                    _write(zf, f"optim/{n}.exp_avg.npy", _array_bytes(st["exp_avg"]))
                    _write(zf, f"optim/{n}.exp_avg_sq.npy", _array_bytes(st["exp_avg_sq"]))
                    meta.setdefault("optim_steps", {})[n] = float(st["step"])
        _write(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True))
    tmp.replace(path)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint {path} does not exist")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise InputError(f"{path} is not a checkpoint archive") from exc
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != FORMAT or meta.get("version") != VERSION:
            raise InputError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        params, moments = {}, {}
        for name in zf.namelist():
            if name.startswith("params/"):
                params[name[len("params/"):-len(".npy")]] = _read_array(zf, name)
            elif name.startswith("optim/") and name.endswith(".exp_avg.npy"):
                n = name[len("optim/"):-len(".exp_avg.npy")]
                moments[n] = (_read_array(zf, name), _read_array(zf, f"optim/{n}.exp_avg_sq.npy"),
                              meta["optim_steps"][n])
    return Checkpoint(meta["model_config"], params, meta["train_config"], meta["train_state"], moments)


def config_differences(a: dict, b: dict) -> list[str]:
    keys = sorted(set(a) | set(b))
    return [k for k in keys if a.get(k) != b.get(k)]


def check_compatible(ckpt_config: dict, model_config: dict) -> None:
    diff = config_differences(ckpt_config, model_config)
    if diff:
        detail = ", ".join(f"{k}: checkpoint={ckpt_config.get(k)!r} model={model_config.get(k)!r}" for k in diff)
        raise ConfigError(f"checkpoint and model configs differ in {diff}: {detail}")


def restore_model(model: torch.nn.Module, ckpt: Checkpoint) -> None:
    state = model.state_dict()
    missing = sorted(set(state) - set(ckpt.params))
    extra = sorted(set(ckpt.params) - set(state))
    if missing or extra:
        raise ConfigError(f"checkpoint parameters do not match model (missing {missing}, unexpected {extra})")
    with torch.no_grad():
        for name, t in state.items():
            src = ckpt.params[name]
            if src.shape != t.shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {tuple(src.shape)} vs model {tuple(t.shape)}")
            t.copy_(src.to(t.dtype))


def restore_optimizer(optimizer, model: torch.nn.Module, ckpt: Checkpoint) -> None:
    params = dict(model.named_parameters())
    for name, (m, v, step) in ckpt.moments.items():
        p = params[name]
        optimizer.state[p] = {
            "step": torch.tensor(step, dtype=torch.float32),
            "exp_avg": m.to(p.dtype).clone(),
            "exp_avg_sq": v.to(p.dtype).clone(),
        }
