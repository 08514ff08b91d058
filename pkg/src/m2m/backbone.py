"""Shared representation stage: sequence encoders, expert views, task anchors,
scenario knowledge."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .features import Features
from .nn import MLP, Module, parameter
from .tensor import ShapeError, Tensor


def embed_fields(ids: np.ndarray, tables: list[Tensor]) -> Tensor:
    """Concatenate per-field embeddings; ``ids`` has one trailing column per table."""
    if ids.shape[-1] != len(tables):
        raise ShapeError(f"{ids.shape[-1]} id columns for {len(tables)} embedding tables")
    return T.concat([T.gather_rows(tab, ids[..., i]) for i, tab in enumerate(tables)], axis=-1)


def embed_sequence(ids: np.ndarray, tables: list[Tensor], positional: Tensor | None) -> Tensor:
    """(N, T, C) bucket ids -> (N, T, C*d_input [+ d_pos]).

    The positional row for step t is concatenated, not added. ``positional``
    may be None to drop position information entirely.
    """
    x = embed_fields(ids, tables)
    if positional is None:
        return x
    n, steps = ids.shape[0], ids.shape[1]
    if steps > positional.shape[0]:
        raise ShapeError(f"sequence length {steps} exceeds positional table of {positional.shape[0]} rows")
    pos = T.gather_rows(positional, np.arange(steps))
    return T.concat([x, T.expand(pos, 0, n)], axis=-1)


def attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d)) V over the last two axes; d is the key width."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = T.scale(T.matmul(q, T.transpose(k, axes)), 1.0 / math.sqrt(q.shape[-1]))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    """h heads of scaled dot-product self-attention, concatenated and projected.

    Per-head projections are stored side by side in one matrix per role, which
    is the same map as h separate (d_model, d_model/h) matrices.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ShapeError(f"d_model={d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.W_q = parameter((d_model, d_model), rng)
        self.W_k = parameter((d_model, d_model), rng)
        self.W_v = parameter((d_model, d_model), rng)
        self.W_h = parameter((d_model, d_model), rng)

    def _split(self, x: Tensor) -> Tensor:
        n, steps, d = x.shape
        x = T.reshape(x, (n, steps, self.n_heads, d // self.n_heads))
        return T.transpose(x, (0, 2, 1, 3))

    def __call__(self, x: Tensor) -> Tensor:
        n, steps, d = x.shape
        q = self._split(T.matmul(x, self.W_q))
        k = self._split(T.matmul(x, self.W_k))
        v = self._split(T.matmul(x, self.W_v))
        heads = attention(q, k, v)  # (n, h, T, d/h)
        merged = T.reshape(T.transpose(heads, (0, 2, 1, 3)), (n, steps, d))
        return T.matmul(merged, self.W_h)


def multi_head(x: Tensor, mha: MultiHeadAttention) -> Tensor:
    return mha(x)


def fuse(h_behavior: Tensor, h_performance: Tensor, dense: Tensor | None = None) -> Tensor:
    """Mean-pool both sequences over time and concatenate with dense features."""
    parts = [T.mean(h_behavior, axis=1), T.mean(h_performance, axis=1)]
    if dense is not None:
        parts.append(dense)
    return T.concat(parts, axis=-1)


class ExpertBank(Module):
    """k two-layer LeakyReLU MLPs evaluated as one batched product."""

    def __init__(self, d_in: int, d_out: int, k: int, rng: np.random.Generator, slope: float = 0.01):
        self.k, self.d_out, self.slope = k, d_out, slope
        self.W1 = parameter((d_in, k * d_out), rng)
        self.b1 = parameter((k * d_out,), rng, zero=True)
        self.W2 = parameter((k, d_out, d_out), rng, std=1.0 / math.sqrt(d_out))
        self.b2 = parameter((k, d_out), rng, zero=True)

    def __call__(self, f: Tensor) -> Tensor:
        n = f.shape[0]
        h = T.leaky_relu(T.add(T.matmul(f, self.W1), self.b1), self.slope)
        h = T.transpose(T.reshape(h, (n, self.k, self.d_out)), (1, 0, 2))
        h = T.transpose(T.matmul(h, self.W2), (1, 0, 2))
        return T.leaky_relu(T.add(h, self.b2), self.slope)  # (n, k, d_out)


def expert_views(f: Tensor, bank: ExpertBank) -> Tensor:
    return bank(f)


class TaskAnchors(Module):
    """Input-independent task embeddings pushed through a per-task LeakyReLU layer."""

    def __init__(self, m: int, d_task: int, d_out: int, rng: np.random.Generator, slope: float = 0.01):
        self.m, self.slope = m, slope
        self.embedding = parameter((m, d_task), rng, std=1.0)
        self.W = parameter((m, d_task, d_out), rng, std=1.0 / math.sqrt(d_task))
        self.b = parameter((m, d_out), rng, zero=True)

    def __call__(self) -> Tensor:
        e = T.reshape(self.embedding, (self.m, 1, self.embedding.shape[1]))
        out = T.reshape(T.matmul(e, self.W), (self.m, self.W.shape[2]))
        return T.leaky_relu(T.add(out, self.b), self.slope)

    def anchor(self, t: int) -> Tensor:
        if not 0 <= t < self.m:
            raise IndexError(f"unknown task id {t}")
        return T.reshape(T.gather_rows(self(), np.array([t])), (self.W.shape[2],))


class ScenarioEncoder(Module):
    """Scenario knowledge: LeakyReLU feed-forward over scenario-attribute and profile embeddings."""

    def __init__(self, d_in: int, hidden: list[int], d_out: int, rng: np.random.Generator, slope: float = 0.01):
        self.mlp = MLP([d_in, *hidden, d_out], rng, slope)

    def __call__(self, x: Tensor) -> Tensor:
        return self.mlp(x)


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, with_scenario_encoder: bool = True):
        self.cfg = cfg
        d = cfg.d_input
        self.behavior_tables = [parameter((v, d), rng, std=1.0) for v in cfg.behavior_vocab]
        self.performance_tables = [parameter((v, d), rng, std=1.0) for v in cfg.performance_vocab]
        self.scenario_tables = [parameter((v, d), rng, std=1.0) for v in cfg.scenario_vocab]
        self.profile_tables = [parameter((v, d), rng, std=1.0) for v in cfg.profile_vocab]
        self.positional = parameter((cfg.seq_len, cfg.d_pos), rng, std=1.0)
        if cfg.disable_transformer:
            self.mha_behavior = self.mha_performance = None
        else:
            self.mha_behavior = MultiHeadAttention(cfg.d_behavior, cfg.n_heads, rng)
            self.mha_performance = MultiHeadAttention(cfg.d_performance, cfg.n_heads, rng)
        self.scenario_encoder = None
        if with_scenario_encoder:
            d_ctx = (len(cfg.scenario_vocab) + len(cfg.profile_vocab)) * d
            self.scenario_encoder = ScenarioEncoder(d_ctx, cfg.scenario_hidden, cfg.d_scenario, rng, cfg.slope)

    def sequences(self, batch: Features) -> tuple[Tensor, Tensor]:
        xb = embed_sequence(batch.behavior_ids, self.behavior_tables, self.positional)
        xp = embed_sequence(batch.performance_ids, self.performance_tables, self.positional)
        if self.mha_behavior is None:
            return xb, xp
        return self.mha_behavior(xb), self.mha_performance(xp)

    def fused(self, batch: Features) -> Tensor:
        hb, hp = self.sequences(batch)
        return fuse(hb, hp, Tensor(batch.dense))

    def expert_input(self, batch: Features) -> Tensor:
        f = self.fused(batch)
        if not self.cfg.expert_profile:
            return f
        return T.concat([f, embed_fields(batch.profile, self.profile_tables)], axis=-1)

    def context(self, batch: Features) -> Tensor:
        """Concatenated scenario-attribute and profile embeddings."""
        return T.concat(
            [
                embed_fields(batch.scenario_attrs, self.scenario_tables),
                embed_fields(batch.profile, self.profile_tables),
            ],
            axis=-1,
        )

    def scenario_knowledge(self, batch: Features) -> Tensor:
        return self.scenario_encoder(self.context(batch))
