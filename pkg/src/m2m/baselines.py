"""Reference multi-task models over the same featurization as M2M.

Scenario and profile embeddings enter as plain input features, concatenated
with the fused sequence representation.
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from . import tensor as T
from .backbone import Backbone, ExpertBank
from .config import ModelConfig
from .features import Features
from .meta import M2MModel, RateHead, RateModel
from .nn import MLP, Linear, Module

log = logging.getLogger(__name__)


def _input_width(cfg: ModelConfig) -> int:
    return cfg.d_fused + (len(cfg.scenario_vocab) + len(cfg.profile_vocab)) * cfg.d_input


class _Featurizer(Module):
    """Embeddings + transformer + fusion, plus raw scenario/profile embeddings."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.backbone = Backbone(cfg, rng, with_scenario_encoder=False)

    def __call__(self, batch: Features) -> T.Tensor:
        return T.concat([self.backbone.fused(batch), self.backbone.context(batch)], axis=-1)


class Tower(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, cfg: ModelConfig):
        self.mlp = MLP([d_in, hidden], rng, cfg.slope)
        self.rate = RateHead(hidden, rng, cfg.link)

    def __call__(self, x):
        return self.rate(self.mlp(x))


class SharedBottom(RateModel):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        h = cfg.baseline_hidden or matched_hidden(cfg, "shared_bottom")
        self.features = _Featurizer(cfg, rng)
        self.trunk = MLP([_input_width(cfg), h, h], rng, cfg.slope)
        self.towers = [Tower(h, h, rng, cfg) for _ in range(cfg.n_tasks)]

    def rate_layers(self):
        return [t.rate for t in self.towers]

    def __call__(self, batch: Features):
        z = self.trunk(self.features(batch))
        return T.concat([tw(z) for tw in self.towers], axis=1)


class MMoE(RateModel):
    """Shared expert bank; each task mixes experts with its own softmax gate."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        h = cfg.baseline_hidden or matched_hidden(cfg, "mmoe")
        d_in = _input_width(cfg)
        self.features = _Featurizer(cfg, rng)
        self.experts = ExpertBank(d_in, h, cfg.n_experts, rng, cfg.slope)
        self.gates = [Linear(d_in, cfg.n_experts, rng) for _ in range(cfg.n_tasks)]
        self.towers = [Tower(h, h, rng, cfg) for _ in range(cfg.n_tasks)]

    def rate_layers(self):
        return [t.rate for t in self.towers]

    def gate_weights(self, x) -> list[T.Tensor]:
        return [T.softmax(g(x), axis=1) for g in self.gates]

    def __call__(self, batch: Features):
        x = self.features(batch)
        views = self.experts(x)  # (n, k, h)
        n, k, h = views.shape
        outs = []
        for gate, tower in zip(self.gate_weights(x), self.towers):
            mixed = T.reshape(T.matmul(T.reshape(gate, (n, 1, k)), views), (n, h))
            outs.append(tower(mixed))
        return T.concat(outs, axis=1)


class SingleTaskNet(Module):
    def __init__(self, cfg: ModelConfig, hidden: int, rng: np.random.Generator):
        self.features = _Featurizer(cfg, rng)
        self.mlp = MLP([_input_width(cfg), hidden, hidden], rng, cfg.slope)
        self.rate = RateHead(hidden, rng, cfg.link)

    def __call__(self, batch: Features):
        return self.rate(self.mlp(self.features(batch)))


class SingleTask(RateModel):
    """One independent Embedding&MLP network per task, pooled over scenarios.

    Parameter sets are disjoint and Adam, clipping and the L2 penalty all act
    per parameter, so optimizing the summed loss trains each network exactly as
    if it were trained on its own.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        h = cfg.baseline_hidden or matched_hidden(cfg, "single_task")
        self.nets = [SingleTaskNet(cfg, h, rng) for _ in range(cfg.n_tasks)]

    def rate_layers(self):
        return [n.rate for n in self.nets]

    def forward_task(self, batch: Features, task: int):
        return self.nets[task](batch)

    def __call__(self, batch: Features):
        return T.concat([net(batch) for net in self.nets], axis=1)


BASELINES = {"shared_bottom": SharedBottom, "mmoe": MMoE, "single_task": SingleTask}


def non_generator_budget(cfg: ModelConfig) -> int:
    model = M2MModel(dataclasses.replace(cfg, variant="m2m"))
    gen = sum(p.size for p in model.generator_parameters())
    return model.num_parameters() - gen


def _count(cfg: ModelConfig, variant: str, hidden: int) -> int:
    model = BASELINES[variant](dataclasses.replace(cfg, variant=variant, baseline_hidden=hidden))
    return model.num_parameters()


def matched_hidden(cfg: ModelConfig, variant: str, tol: float = 0.10) -> int:
    """Hidden width whose parameter count is closest to M2M's non-generator budget."""
    budget = non_generator_budget(cfg)
    lo, hi = 4, 2048
    while hi - lo > 1:  # parameter count is monotone in the width
        mid = (lo + hi) // 2
        if _count(cfg, variant, mid) < budget:
            lo = mid
        else:
            hi = mid
    best = min((lo, hi), key=lambda h: abs(_count(cfg, variant, h) - budget))
    err = abs(_count(cfg, variant, best) - budget) / budget
    if err > tol:
        log.warning("%s: closest width %d misses the parameter budget by %.0f%%", variant, best, 100 * err)
    return best


def build_model(cfg: ModelConfig) -> RateModel:
    if cfg.variant == "m2m":
        return M2MModel(cfg)
    if cfg.variant not in BASELINES:
        raise ValueError(f"unknown variant {cfg.variant!r}")
    if cfg.baseline_hidden is None:
        cfg = dataclasses.replace(cfg, baseline_hidden=matched_hidden(cfg, cfg.variant))
    return BASELINES[cfg.variant](cfg)
