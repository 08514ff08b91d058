"""Mini-batch training with the joint Poisson objective."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .config import TrainConfig
from .features import Features
from .metrics import DomainError, evaluate, joint_loss, poisson_loss
from .optim import AdamState, adam_step, clip_gradients
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "valid_loss", "valid_overall_nmae")


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss, activation or gradient."""

    def __init__(self, epoch: int, batch: int, group: str, detail: str):
        self.epoch, self.batch, self.group = epoch, batch, group
        super().__init__(f"non-finite value at epoch {epoch}, batch {batch} (parameter group: {group}): {detail}")


@dataclass
class TrainResult:
    model: object
    history: list[dict]
    best_epoch: int
    best_nmae: float
    resume: ckpt.ResumeState | None = field(default=None, repr=False)


def _offending_group(model) -> str:
    gen = {id(p) for p in model.generator_parameters()}
    for name, p in model.named_parameters():
        bad = not np.all(np.isfinite(p.data)) or (p.grad is not None and not np.all(np.isfinite(p.grad)))
        if bad:
            return f"{'W1 (meta generators)' if id(p) in gen else 'W2'}:{name}"
    return "activations"


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def validation_loss(model, data: Features, chunk: int = 2048) -> float:
    """Unregularized Poisson loss summed over tasks."""
    rates = model.predict(data, chunk)
    return sum(poisson_loss(Tensor(rates[:, t]), data.labels[:, t]).item() for t in range(rates.shape[1]))


def train(
    model,
    train_data: Features,
    valid_data: Features,
    cfg: TrainConfig | None = None,
    resume: ckpt.ResumeState | None = None,
    history_path=None,
    on_epoch=None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs and restore the weights with the best validation NMAE.

    With ``resume``, weights, optimizer moments and history continue from the
    stored epoch count. ``on_epoch(row, model)`` runs after each epoch's validation.

    With ``cfg.ema_decay`` > 0 the optimizer is unchanged, but validation, the
    callback and the returned model use an exponential moving average of the
    weights taken after every step.
    """
    cfg = cfg or TrainConfig()
    if len(train_data) == 0 or len(valid_data) == 0:
        raise ValueError("training and validation sets must be nonempty")
    params = model.parameters()
    hyper = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    if resume is None:
        model.calibrate_output(train_data.labels.mean(axis=0))
        opt = AdamState.create(params, **hyper)
        history, start = [], 0
        best_epoch, best_nmae, best_state = -1, math.inf, model.state_dict()
    else:
        best_state = model.state_dict()
        ckpt.load_weights(model, resume.last)
        opt = ckpt.adam_from_resume(model, resume, **hyper)
        history, start = list(resume.history), resume.epoch
        best_epoch, best_nmae = resume.best_epoch, resume.best_nmae
    ema = None
    if cfg.ema_decay > 0:
        start_ema = resume.ema if resume is not None and resume.ema else None
        ema = [(start_ema[name] if start_ema else p.data).copy() for name, p in model.named_parameters()]

    n = len(train_data)
    for epoch in range(start, cfg.epochs):
        order = batch_order(n, cfg.seed, epoch)
        total, seen = 0.0, 0
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            batch = train_data.take(order[lo : lo + cfg.batch_size])
            try:
                with T.Tape() as tape:
                    loss, _ = joint_loss(model, batch, cfg.loss)
                    tape.backward(loss)
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                if not all(np.all(np.isfinite(g)) for g in grads):
                    raise NonFiniteError("non-finite gradient")
            except (NonFiniteError, DomainError) as err:
                raise NumericalAbort(epoch, b, _offending_group(model), str(err)) from err
            clip_gradients(grads, *cfg.clip)
            adam_step(params, grads, opt)
            model.zero_grads()
            if ema is not None:
                for e, p in zip(ema, params):
                    e *= cfg.ema_decay
                    e += (1.0 - cfg.ema_decay) * p.data
            total += loss.item() * len(batch)
            seen += len(batch)

        raw = _swap_in(params, ema)
        report = evaluate(model, valid_data, chunk=cfg.eval_batch_size)
        row = {
            "epoch": epoch + 1,
            "train_loss": total / seen,
            "valid_loss": validation_loss(model, valid_data, cfg.eval_batch_size),
            "valid_overall_nmae": report.overall_nmae,
        }
        history.append(row)
        log.info("epoch %d train %.4f valid %.4f nmae %.4f", *[row[k] for k in HISTORY_FIELDS])
        if on_epoch is not None:
            on_epoch(row, model)
        if row["valid_overall_nmae"] < best_nmae:
            best_epoch, best_nmae, best_state = epoch + 1, row["valid_overall_nmae"], model.state_dict()
        _swap_in(params, raw)

    names = [name for name, _ in model.named_parameters()]
    state = ckpt.ResumeState(
        epoch=max(start, cfg.epochs),
        last=model.state_dict(),
        adam_m=dict(zip(names, opt.m)),
        adam_v=dict(zip(names, opt.v)),
        adam_step=opt.step,
        history=history,
        best_epoch=best_epoch,
        best_nmae=best_nmae,
        ema={} if ema is None else {name: e.copy() for name, e in zip(names, ema)},
    )
    model.load_state_dict(best_state)
    if history_path is not None:
        write_history(history, history_path)
    return TrainResult(model, history, best_epoch, best_nmae, state)


def _swap_in(params, arrays):
    """Load ``arrays`` into ``params`` and return the previous values (no-op for None)."""
    if arrays is None:
        return None
    old = [p.data.copy() for p in params]
    for p, a in zip(params, arrays):
        p.data[...] = a
    return old


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)
        ]
