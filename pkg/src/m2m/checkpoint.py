"""Model checkpoints: one .npz holding a JSON header plus named float64 arrays.

Training checkpoints may also carry the state needed to resume: last-epoch
weights, Adam moments, step count and the history so far.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .optim import AdamState
from .tensor import ShapeError

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ResumeState:
    epoch: int  # epochs completed
    last: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_nmae: float = float("inf")
    ema: dict[str, np.ndarray] = field(default_factory=dict)  # moving-average weights, if kept


def save(path, model, meta: dict | None = None, resume: ResumeState | None = None) -> None:
    header = {
        "version": CHECKPOINT_VERSION,
        "variant": model.cfg.variant,
        "model": model.cfg.to_dict(),
        "meta": meta or {},
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    if resume is not None:
        header["resume"] = {
            "epoch": resume.epoch,
            "adam_step": resume.adam_step,
            "history": resume.history,
            "best_epoch": resume.best_epoch,
            "best_nmae": resume.best_nmae,
        }
        groups = (("last", resume.last), ("adam_m", resume.adam_m), ("adam_v", resume.adam_v), ("ema", resume.ema))
        for prefix, d in groups:
            arrays.update({f"{prefix}/{k}": v for k, v in d.items()})
    tmp = f"{path}.tmp.npz"
    np.savez(tmp, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    os.replace(tmp, path)


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            arrays = {k: z[k] for k in z.files if k != "__header__"}
    except (OSError, KeyError, ValueError) as err:
        raise CheckpointError(f"{path}: not a readable checkpoint ({err})") from err
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    return header, arrays


def _group(arrays: dict, prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + "/")}


def model_config(path) -> ModelConfig:
    return ModelConfig.from_dict(read(path)[0]["model"])


def load(path, cfg: ModelConfig | None = None):
    """Rebuild the stored model; ``cfg`` (if given) must be shape-compatible."""
    from .baselines import build_model

    header, arrays = read(path)
    stored = ModelConfig.from_dict(header["model"])
    model = build_model(stored if cfg is None else cfg)
    load_weights(model, _group(arrays, "param"))
    return model


def load_weights(model, state: dict[str, np.ndarray]) -> None:
    own = dict([*model.named_parameters(), *model.named_buffers()])
    extra = set(state) - set(own)
    if extra:
        raise ShapeError(f"checkpoint has parameters/buffers the model lacks: {sorted(extra)[:5]}")
    model.load_state_dict(state)


def load_resume(path) -> ResumeState | None:
    header, arrays = read(path)
    r = header.get("resume")
    if r is None:
        return None
    return ResumeState(
        epoch=r["epoch"],
        last=_group(arrays, "last"),
        adam_m=_group(arrays, "adam_m"),
        adam_v=_group(arrays, "adam_v"),
        adam_step=r["adam_step"],
        history=r["history"],
        best_epoch=r["best_epoch"],
        best_nmae=r["best_nmae"],
        ema=_group(arrays, "ema"),
    )


def header(path) -> dict:
    return read(path)[0]


def adam_from_resume(model, state: ResumeState, **hyper) -> AdamState:
    names = [n for n, _ in model.named_parameters()]
    return AdamState(
        m=[state.adam_m[n].copy() for n in names],
        v=[state.adam_v[n].copy() for n in names],
        step=state.adam_step,
        **hyper,
    )
