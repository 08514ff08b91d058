"""Columnar featurization shared by every model in an experiment."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Sample, discretize, log_boundaries


@dataclass
class Features:
    behavior_ids: np.ndarray  # (N, T, B) bucket ids
    performance_ids: np.ndarray  # (N, T, P)
    scenario_attrs: np.ndarray  # (N, n_attr)
    profile: np.ndarray  # (N, n_profile)
    dense: np.ndarray  # (N, n_dense) log1p of per-channel window means
    labels: np.ndarray  # (N, m)
    scenario: np.ndarray  # (N,)
    rates: np.ndarray | None = None  # (N, m) ground-truth expected labels

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, idx) -> "Features":
        return Features(
            behavior_ids=self.behavior_ids[idx],
            performance_ids=self.performance_ids[idx],
            scenario_attrs=self.scenario_attrs[idx],
            profile=self.profile[idx],
            dense=self.dense[idx],
            labels=self.labels[idx],
            scenario=self.scenario[idx],
            rates=None if self.rates is None else self.rates[idx],
        )

    def digest(self) -> str:
        """Hash of the model inputs, used to assert identical featurization across models."""
        h = hashlib.sha256()
        for arr in (
            self.behavior_ids,
            self.performance_ids,
            self.scenario_attrs,
            self.profile,
            self.dense,
            self.labels,
            self.scenario,
        ):
            a = np.ascontiguousarray(arr)
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        return h.hexdigest()


@dataclass
class FeatureSpec:
    n_buckets: int = 32
    bucket_hi: float = 1e5
    seq_len: int | None = None  # keep only the most recent steps when set

    @property
    def boundaries(self) -> np.ndarray:
        return log_boundaries(self.n_buckets, self.bucket_hi)


def featurize(samples: Sequence[Sample], spec: FeatureSpec | None = None) -> Features:
    spec = spec or FeatureSpec()
    if not samples:
        raise ValueError("cannot featurize an empty sample list")
    behavior = np.stack([s.behavior_seq for s in samples])
    performance = np.stack([s.performance_seq for s in samples])
    if spec.seq_len is not None:
        if spec.seq_len > behavior.shape[1]:
            raise ValueError(f"requested T={spec.seq_len} but samples only hold {behavior.shape[1]} steps")
        behavior = behavior[:, -spec.seq_len :]
        performance = performance[:, -spec.seq_len :]
    b = spec.boundaries
    dense = np.log1p(np.concatenate([behavior.mean(axis=1), performance.mean(axis=1)], axis=1))
    rates = None
    if all(s.rates is not None for s in samples):
        rates = np.stack([s.rates for s in samples])
    return Features(
        behavior_ids=discretize(behavior, b).astype(np.int64),
        performance_ids=discretize(performance, b).astype(np.int64),
        scenario_attrs=np.stack([s.scenario_attrs for s in samples]).astype(np.int64),
        profile=np.stack([s.profile for s in samples]).astype(np.int64),
        dense=dense,
        labels=np.stack([s.labels for s in samples]).astype(np.float64),
        scenario=np.array([s.scenario_id for s in samples], dtype=np.int64),
        rates=rates,
    )


def vocab_sizes(features: Sequence[Features], n_buckets: int = 32) -> dict:
    """Embedding vocabularies large enough for every id in ``features``."""
    attrs = np.concatenate([f.scenario_attrs for f in features])
    prof = np.concatenate([f.profile for f in features])
    return {
        "behavior": [n_buckets] * features[0].behavior_ids.shape[2],
        "performance": [n_buckets] * features[0].performance_ids.shape[2],
        "scenario_attrs": [int(v) + 1 for v in attrs.max(axis=0)],
        "profile": [int(v) + 1 for v in prof.max(axis=0)],
        "n_dense": int(features[0].dense.shape[1]),
    }


def vocab_from_config(gen, n_buckets: int = 32) -> dict:
    """Vocabularies implied by a generator config (independent of which samples exist)."""
    return {
        "behavior": [n_buckets] * 3,
        "performance": [n_buckets] * 4,
        "scenario_attrs": [gen.n_scenarios, n_buckets, n_buckets],
        "profile": [gen.profile_buckets] * gen.latent_dim + [gen.n_categories],
        "n_dense": 7,
    }
