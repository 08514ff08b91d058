"""Scenario-conditioned meta networks and the assembled M2M model.

A meta unit is a hypernetwork: from the scenario knowledge vector it produces
the weights and biases of a K-layer feed-forward net, separately for every
sample in the batch, and then applies that net. Meta attention scores expert
views with such a generated net; the meta tower stacks generated layers with
residual connections.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .backbone import Backbone, ExpertBank, TaskAnchors
from .config import ModelConfig
from .features import Features
from .nn import Linear, Module, parameter
from .tensor import ShapeError, Tensor

RATE_FLOOR = 1e-6


class MetaUnit(Module):
    """K generated layers of width d, conditioned on a d_s-dim scenario vector.

    Layer i uses W = reshape(V_w[i] s + v_w[i], (d, d)) (rows index outputs)
    and b = V_b[i] s + v_b[i].
    """

    def __init__(self, d_s: int, d: int, depth: int, rng: np.random.Generator, slope: float = 0.01):
        self.d, self.depth, self.slope = d, depth, slope
        # generated weights get variance ~2/d: half from the static offset, half from the scenario term
        self.V_w = [parameter((d_s, d * d), rng, std=1.0 / math.sqrt(d * d_s)) for _ in range(depth)]
        self.v_w = [parameter((d * d,), rng, std=1.0 / math.sqrt(d)) for _ in range(depth)]
        self.V_b = [parameter((d_s, d), rng, std=0.1 / math.sqrt(d_s)) for _ in range(depth)]
        self.v_b = [parameter((d,), rng, zero=True) for _ in range(depth)]

    def generators(self) -> list[Tensor]:
        return [*self.V_w, *self.v_w, *self.V_b, *self.v_b]

    def generate(self, s: Tensor, i: int) -> tuple[Tensor, Tensor]:
        n = s.shape[0]
        W = T.reshape(T.add(T.matmul(s, self.V_w[i]), self.v_w[i]), (n, self.d, self.d))
        b = T.add(T.matmul(s, self.V_b[i]), self.v_b[i])
        return W, b

    def __call__(self, s: Tensor, h: Tensor) -> Tensor:
        """``s``: (N, d_s); ``h``: (N, d) or (N, n, d) with n vectors per sample."""
        if h.shape[-1] != self.d:
            raise ShapeError(f"meta unit of width {self.d} got input of width {h.shape[-1]}")
        if s.shape[0] != h.shape[0]:
            raise ShapeError(f"{s.shape[0]} scenario vectors for {h.shape[0]} inputs")
        flat = h.ndim == 2
        if flat:
            h = T.reshape(h, (h.shape[0], 1, self.d))
        n_vec = h.shape[1]
        for i in range(self.depth):
            W, b = self.generate(s, i)
            z = T.matmul(h, T.transpose(W, (0, 2, 1)))
            h = T.leaky_relu(T.add(z, T.expand(b, 1, n_vec)), self.slope)
        return T.reshape(h, (h.shape[0], self.d)) if flat else h


def meta_forward(unit: MetaUnit, s: Tensor, h: Tensor) -> Tensor:
    return unit(s, h)


class PlainUnit(Module):
    """Static-weight counterpart of MetaUnit used by the ablations."""

    def __init__(self, d: int, depth: int, rng: np.random.Generator, slope: float = 0.01):
        self.d, self.slope = d, slope
        self.layers = [Linear(d, d, rng) for _ in range(depth)]

    def __call__(self, s: Tensor | None, h: Tensor) -> Tensor:
        for layer in self.layers:
            h = T.leaky_relu(layer(h), self.slope)
        return h


class MetaAttention(Module):
    """Per-task attention over expert views with a scenario-generated scorer.

    [E_i || T_t] is projected to the meta width d, passed through the task's
    meta unit and reduced to a score by a static vector v.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.meta_dim
        self.P_e = parameter((cfg.d_view, d), rng)
        self.P_t = parameter((cfg.d_view, d), rng)
        self.c = parameter((d,), rng, zero=True)
        if cfg.disable_meta_attention:
            self.unit = PlainUnit(d, cfg.meta_depth, rng, cfg.slope)
        else:
            self.unit = MetaUnit(cfg.d_scenario, d, cfg.meta_depth, rng, cfg.slope)
        self.v = parameter((d, 1), rng)

    def scores(self, experts: Tensor, anchor: Tensor, s: Tensor) -> Tensor:
        n, k, _ = experts.shape
        anchor_part = T.reshape(T.matmul(T.reshape(anchor, (1, anchor.shape[0])), self.P_t), (self.c.shape[0],))
        x = T.add(T.matmul(experts, self.P_e), T.add(anchor_part, self.c))
        h = self.unit(s, x)  # (n, k, d)
        return T.reshape(T.matmul(h, self.v), (n, k))

    def __call__(self, experts: Tensor, anchor: Tensor, s: Tensor) -> tuple[Tensor, Tensor]:
        n, k, d_view = experts.shape
        alpha = T.softmax(self.scores(experts, anchor, s), axis=1)
        r = T.matmul(T.reshape(alpha, (n, 1, k)), experts)
        return T.reshape(r, (n, d_view)), alpha


def meta_attention(head: MetaAttention, experts: Tensor, anchor: Tensor, s: Tensor) -> Tensor:
    return head(experts, anchor, s)[0]


class MetaTower(Module):
    """L residual layers x <- LeakyReLU(Meta_j(x) + x), each with its own generator."""

    def __init__(self, d_s: int, d: int, depth: int, n_layers: int, rng: np.random.Generator, slope: float = 0.01):
        self.slope = slope
        self.units = [MetaUnit(d_s, d, depth, rng, slope) for _ in range(n_layers)]

    def __call__(self, x: Tensor, s: Tensor) -> Tensor:
        for unit in self.units:
            x = T.leaky_relu(T.add(unit(s, x), x), self.slope)
        return x


def meta_tower(tower: MetaTower, x: Tensor, s: Tensor) -> Tensor:
    return tower(x, s)


class PlainTower(Module):
    """Scenario-blind MLP tower (ablation without the meta tower)."""

    def __init__(self, d: int, n_layers: int, rng: np.random.Generator, slope: float = 0.01):
        self.slope = slope
        self.layers = [Linear(d, d, rng) for _ in range(n_layers)]

    def __call__(self, x: Tensor, s: Tensor | None = None) -> Tensor:
        for layer in self.layers:
            x = T.leaky_relu(layer(x), self.slope)
        return x


def predict_rate(pre: Tensor, link: str = "softplus", scale: Tensor | None = None) -> Tensor:
    """Strictly positive Poisson rate ``scale * link(pre) + floor``."""
    out = T.softplus(pre) if link == "softplus" else T.exp(pre)
    if scale is not None:
        out = T.mul(out, scale)
    return T.add(out, Tensor(np.full(out.shape[-1:], RATE_FLOOR)))


def inverse_link(rate: np.ndarray, link: str = "softplus") -> np.ndarray:
    rate = np.maximum(np.asarray(rate, dtype=np.float64) - RATE_FLOOR, 1e-12)
    if link == "exp":
        return np.log(rate)
    return rate + np.log(-np.expm1(-rate))  # softplus^{-1}


class RateHead(Module):
    """Linear read-out to one positive rate per sample.

    ``scale`` is a fixed per-task unit (the training-mean label once
    calibrated) so the pre-activation stays O(1) for counts in the hundreds.
    The bias starts where the link outputs one unit.
    """

    def __init__(self, d_in: int, rng: np.random.Generator, link: str = "softplus"):
        self.link = link
        self.linear = Linear(d_in, 1, rng)
        self.linear.bias.data[:] = inverse_link(1.0 + RATE_FLOOR, link)
        self.scale = Tensor(np.ones(1))

    def calibrate(self, mean_label: float) -> None:
        self.scale.data[:] = max(float(mean_label), 1e-3)

    def __call__(self, x: Tensor) -> Tensor:
        return predict_rate(self.linear(x), self.link, self.scale)


class TaskHead(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.meta_dim
        self.attention = MetaAttention(cfg, rng)
        self.proj = Linear(cfg.d_view, d, rng)
        if cfg.disable_meta_tower:
            self.tower = PlainTower(d, cfg.tower_layers, rng, cfg.slope)
        else:
            self.tower = MetaTower(cfg.d_scenario, d, cfg.meta_depth, cfg.tower_layers, rng, cfg.slope)
        self.rate = RateHead(d, rng, cfg.link)


class RateModel(Module):
    """Shared plumbing for every model that maps a batch to (N, m) rates."""

    cfg: ModelConfig

    def rate_layers(self) -> list[RateHead]:
        raise NotImplementedError

    def calibrate_output(self, mean_labels) -> None:
        """Start every task at its mean label, in units of that mean."""
        for head, mu in zip(self.rate_layers(), mean_labels):
            head.calibrate(mu)

    def generator_parameters(self) -> list[Tensor]:
        out = []
        for m in _modules(self):
            if isinstance(m, MetaUnit):
                out.extend(m.generators())
        return out

    def parameter_groups(self) -> tuple[list[Tensor], list[Tensor]]:
        """(meta-unit generator parameters, all other parameters)."""
        cached = vars(self).get("_groups")
        if cached is None:
            gen = {id(p) for p in self.generator_parameters()}
            params = self.parameters()
            cached = ([p for p in params if id(p) in gen], [p for p in params if id(p) not in gen])
            self._groups = cached  # parameter objects are fixed after construction
        return cached

    def predict(self, batch: Features, chunk: int = 2048) -> np.ndarray:
        """Rates without recording a tape."""
        out = []
        for start in range(0, len(batch), chunk):
            out.append(self(batch.take(slice(start, start + chunk))).data)
        return np.concatenate(out, axis=0)


def _modules(root: Module):
    seen = set()
    stack = [root]
    while stack:
        m = stack.pop()
        if id(m) in seen:
            continue
        seen.add(id(m))
        yield m
        for v in vars(m).values():
            items = v if isinstance(v, (list, tuple)) else [v]
            stack.extend(x for x in items if isinstance(x, Module))


class M2MModel(RateModel):
    """Backbone -> scenario knowledge -> per-task meta attention -> meta tower -> rate."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.experts = ExpertBank(cfg.d_expert_in, cfg.d_view, cfg.n_experts, rng, cfg.slope)
        self.anchors = TaskAnchors(cfg.n_tasks, cfg.d_task, cfg.d_view, rng, cfg.slope)
        self.heads = [TaskHead(cfg, rng) for _ in range(cfg.n_tasks)]

    def rate_layers(self) -> list[RateHead]:
        return [h.rate for h in self.heads]

    def __call__(self, batch: Features, scenario_knowledge=None, return_attention: bool = False):
        cfg = self.cfg
        views = self.experts(self.backbone.expert_input(batch))
        if scenario_knowledge is None:
            s = self.backbone.scenario_knowledge(batch)
        else:
            s = scenario_knowledge if isinstance(scenario_knowledge, Tensor) else Tensor(scenario_knowledge)
        anchors = self.anchors()
        outs, alphas = [], []
        for t, head in enumerate(self.heads):
            anchor = T.reshape(T.gather_rows(anchors, np.array([t])), (cfg.d_view,))
            r, alpha = head.attention(views, anchor, s)
            x = T.leaky_relu(head.proj(r), cfg.slope)
            x = head.tower(x, s)
            outs.append(head.rate(x))
            alphas.append(alpha)
        rates = T.concat(outs, axis=1)
        return (rates, alphas) if return_attention else rates


def m2m_forward(model: M2MModel, batch: Features) -> Tensor:
    return model(batch)
