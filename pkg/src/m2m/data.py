"""Multi-scenario advertiser panels: schema, synthetic generator, splits, I/O.

The generator draws one latent state per advertiser and maps it through
scenario-specific mixing matrices to daily Poisson rates. Mixing matrices are
built from the Gram factor of a target correlation matrix, so the Pearson
correlation of the *labels* between two scenarios hits a configured value.
The inversion from label correlation to latent correlation is done by
Gauss-Hermite quadrature, because Poisson sampling attenuates correlations.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm

SCHEMA_VERSION = 1

TASKS = ("pv", "click", "expenditure", "gmv", "active_days")
PERFORMANCE_FIELDS = ("pv", "click", "expenditure", "gmv")
BEHAVIOR_FIELDS = ("logins", "campaign_mods", "bid_changes")
SCENARIOS = ("sponsored_search", "news_feed", "display", "star_shop", "brand_search")


class ConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(eq=False)
class Sample:
    advertiser_id: str
    scenario_id: int
    scenario_attrs: np.ndarray
    profile: np.ndarray
    behavior_seq: np.ndarray
    performance_seq: np.ndarray
    labels: np.ndarray
    day_index: int
    rates: np.ndarray | None = None  # ground-truth expected labels

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        if (self.advertiser_id, self.scenario_id, self.day_index) != (
            other.advertiser_id,
            other.scenario_id,
            other.day_index,
        ):
            return False
        if (self.rates is None) != (other.rates is None):
            return False
        pairs = [
            (self.scenario_attrs, other.scenario_attrs),
            (self.profile, other.profile),
            (self.behavior_seq, other.behavior_seq),
            (self.performance_seq, other.performance_seq),
            (self.labels, other.labels),
        ]
        if self.rates is not None:
            pairs.append((self.rates, other.rates))
        return all(np.array_equal(a, b) for a, b in pairs)

    def validate(self, n_scenarios: int | None = None) -> None:
        T = self.behavior_seq.shape[0]
        if self.performance_seq.shape[0] != T:
            raise DatasetFormatError("behavior and performance sequences differ in length")
        for name in ("behavior_seq", "performance_seq", "labels"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise DatasetFormatError(f"{name} must be finite and nonnegative")
        if n_scenarios is not None and not 0 <= self.scenario_id < n_scenarios:
            raise DatasetFormatError(f"scenario_id {self.scenario_id} outside [0, {n_scenarios})")

    def to_record(self) -> dict:
        rec = {
            "advertiser_id": self.advertiser_id,
            "scenario_id": int(self.scenario_id),
            "scenario_attrs": [int(v) for v in self.scenario_attrs],
            "profile": [int(v) for v in self.profile],
            "behavior_seq": _compact(self.behavior_seq),
            "performance_seq": _compact(self.performance_seq),
            "labels": [int(v) for v in self.labels],
            "day_index": int(self.day_index),
        }
        if self.rates is not None:
            rec["rates"] = [float(v) for v in self.rates]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Sample":
        rates = rec.get("rates")
        return cls(
            advertiser_id=str(rec["advertiser_id"]),
            scenario_id=int(rec["scenario_id"]),
            scenario_attrs=np.asarray(rec["scenario_attrs"], dtype=np.int64),
            profile=np.asarray(rec["profile"], dtype=np.int64),
            behavior_seq=np.asarray(rec["behavior_seq"], dtype=np.float64),
            performance_seq=np.asarray(rec["performance_seq"], dtype=np.float64),
            labels=np.asarray(rec["labels"], dtype=np.int64),
            day_index=int(rec["day_index"]),
            rates=None if rates is None else np.asarray(rates, dtype=np.float64),
        )


def _compact(arr: np.ndarray) -> list:
    # integral values are written as ints to keep files small; load restores float64
    if np.all(arr == np.round(arr)):
        return arr.astype(np.int64).tolist()
    return arr.tolist()


# ---------------------------------------------------------------------------
# configuration

# default label-correlation targets among (sponsored_search, news_feed, display)
DEFAULT_CORRELATIONS = {
    "expenditure": [[0, 1, 0.67], [0, 2, 0.57], [1, 2, 0.70]],
    "click": [[0, 1, 0.61], [0, 2, 0.53], [1, 2, 0.45]],
}


@dataclass
class GenConfig:
    scenario_names: list[str] = field(default_factory=lambda: list(SCENARIOS))
    scenario_sizes: list[int] = field(default_factory=lambda: [100_000, 30_000, 2_000, 2_000, 3_000])
    n_advertisers: int | None = None  # defaults to the largest scenario
    seq_len: int = 40
    horizon: int = 7
    n_days: int = 100
    latent_dim: int = 8
    # pairwise label-correlation targets per task: [scenario_a, scenario_b, rho]
    correlations: dict[str, list] = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_CORRELATIONS)))
    default_rho: float = 0.4
    noise: float = 0.3  # share of log-rate std not explained by the advertiser latent
    private_fraction: float = 0.7  # scenario-private share of the rate drift direction
    drift_scale: float = 0.5
    momentum_scale: float = 0.6  # log-rate change across the observed window per unit of momentum
    base_rates: list[float] = field(default_factory=lambda: [30.0, 2.0, 5.0, 8.0, 0.8])
    rate_sigma: list[float] = field(default_factory=lambda: [0.9, 0.9, 0.8, 1.0, 0.7])
    scenario_scale: list[float] = field(default_factory=lambda: [1.0, 0.8, 0.5, 0.6, 0.4])
    profile_buckets: int = 8
    n_categories: int = 10
    seed: int = 7

    @property
    def n_scenarios(self) -> int:
        return len(self.scenario_sizes)

    @property
    def n_tasks(self) -> int:
        return len(TASKS)

    @property
    def advertisers(self) -> int:
        return self.n_advertisers if self.n_advertisers is not None else max(self.scenario_sizes)

    def validate(self) -> None:
        S = self.n_scenarios
        if S < 1 or any(n <= 0 for n in self.scenario_sizes):
            raise ConfigError("scenario sizes must be positive")
        if len(self.scenario_names) != S or len(self.scenario_scale) != S:
            raise ConfigError("scenario_names / scenario_scale must have one entry per scenario")
        if max(self.scenario_sizes) > self.advertisers:
            raise ConfigError("a scenario cannot hold more samples than there are advertisers")
        for name in ("seq_len", "horizon", "n_days", "latent_dim", "profile_buckets", "n_categories"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.latent_dim < S:
            raise ConfigError("latent_dim must be at least the number of scenarios")
        if len(self.base_rates) != self.n_tasks or len(self.rate_sigma) != self.n_tasks:
            raise ConfigError("base_rates / rate_sigma need one entry per task")
        if not 0.0 <= self.noise < 1.0 or not 0.0 <= self.private_fraction <= 1.0:
            raise ConfigError("noise must lie in [0, 1) and private_fraction in [0, 1]")
        if self.momentum_scale < 0 or self.drift_scale < 0:
            raise ConfigError("drift_scale and momentum_scale must be non-negative")
        if not -1.0 <= self.default_rho <= 1.0:
            raise ConfigError("default_rho must lie in [-1, 1]")
        for task, pairs in self.correlations.items():
            if task not in TASKS:
                raise ConfigError(f"unknown task {task!r} in correlations")
            for a, b, rho in pairs:
                if not (0 <= a < S and 0 <= b < S and a != b):
                    raise ConfigError(f"bad scenario pair ({a}, {b}) for task {task}")
                if not -1.0 <= rho <= 1.0:
                    raise ConfigError(f"correlation {rho} outside [-1, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def target_matrix(self, task: str) -> np.ndarray:
        S = self.n_scenarios
        R = np.full((S, S), self.default_rho)
        for a, b, rho in self.correlations.get(task, []):
            R[a, b] = R[b, a] = rho
        np.fill_diagonal(R, 1.0)
        return R


@dataclass
class SplitSpec:
    train: float = 0.8
    valid: float = 0.1
    test: float = 0.1
    gap_days: int = 7

    def validate(self) -> None:
        if min(self.train, self.valid, self.test) < 0 or abs(self.train + self.valid + self.test - 1) > 1e-9:
            raise ConfigError("split fractions must be nonnegative and sum to 1")
        if self.gap_days < 7:
            raise ConfigError("gap between train and test must be at least 7 days")


# ---------------------------------------------------------------------------
# statistics helpers


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for a zero-variance vector")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def log_boundaries(n_buckets: int = 32, hi: float = 1e5) -> np.ndarray:
    """Boundaries for ``n_buckets`` half-open buckets: [0,1), then log-spaced up to ``hi``."""
    return np.geomspace(1.0, hi, n_buckets - 1)


def discretize(value, boundaries: Sequence[float] | None = None):
    """Bucket id of the half-open interval [lo, hi) that contains ``value``."""
    b = log_boundaries() if boundaries is None else np.asarray(boundaries, dtype=np.float64)
    if np.any(np.diff(b) <= 0):
        raise ValueError("bucket boundaries must be strictly increasing")
    v = np.asarray(value, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("discretize expects nonnegative values")
    ids = np.searchsorted(b, v, side="right")
    return int(ids) if ids.ndim == 0 else ids


# ---------------------------------------------------------------------------
# generator

_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(60)
_GH_W = _GH_W / _GH_W.sum()


def _label_moments(task: int, base: float, sigma: float, horizon: int, g: np.ndarray):
    """Conditional mean and variance of a label given the standardized log-rate ``g``."""
    lam = base * np.exp(sigma * g)
    if TASKS[task] == "active_days":
        p = -np.expm1(-lam)
        return horizon * p, horizon * p * (1 - p)
    return horizon * lam, horizon * lam


def label_pearson(task: int, rate_a, rate_b, r: float, horizon: int) -> float:
    """Pearson correlation of two labels whose standardized log-rates correlate at ``r``.

    ``rate_a`` / ``rate_b`` are (base, sigma) pairs. Exact up to quadrature error.
    """
    ga = _GH_X[:, None]
    gb = r * _GH_X[:, None] + math.sqrt(max(0.0, 1 - r * r)) * _GH_X[None, :]
    W = _GH_W[:, None] * _GH_W[None, :]
    ma, va = _label_moments(task, *rate_a, horizon, ga)
    mb, vb = _label_moments(task, *rate_b, horizon, gb)
    ea, eb = (W * ma).sum(), (W * mb).sum()
    cov = (W * ma * mb).sum() - ea * eb
    var_a = (W * (va + ma * ma)).sum() - ea**2
    var_b = (W * (vb + mb * mb)).sum() - eb**2
    return float(cov / math.sqrt(var_a * var_b))


def _latent_correlation(task: int, rate_a, rate_b, rho: float, horizon: int) -> float:
    f = lambda r: label_pearson(task, rate_a, rate_b, r, horizon) - rho  # noqa: E731
    lo, hi = -0.9999, 0.9999
    if f(hi) < 0 or f(lo) > 0:
        raise ConfigError(
            f"label correlation {rho} for task {TASKS[task]} is unreachable with the configured rates"
        )
    return brentq(f, lo, hi, xtol=1e-10)


@dataclass
class Maps:
    """Per-scenario mixing matrices and rate parameters."""

    latent: np.ndarray  # (S, m, q) unit rows: loadings of the standardized log-rate on z
    drift: np.ndarray  # (S, m, q) unit rows: direction of the past->future rate drift
    persistence: np.ndarray  # (S, m) how much of the in-window momentum carries into the horizon
    base: np.ndarray  # (S, m) median daily rate
    sigma: np.ndarray  # (m,) log-rate std


def _gram_factor(G: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(G)
    if vals.min() < -1e-9:
        raise ConfigError(
            f"correlation targets are not jointly positive semidefinite (min eigenvalue {vals.min():.4f})"
        )
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _random_rotation(q: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.normal(size=(q, q)))
    return Q * np.sign(np.diag(R))


def build_maps(config: GenConfig, rng: np.random.Generator) -> Maps:
    config.validate()
    S, m, q = config.n_scenarios, config.n_tasks, config.latent_dim
    sigma = np.asarray(config.rate_sigma, dtype=np.float64)
    base = np.outer(config.scenario_scale, config.base_rates)
    keep = 1.0 - config.noise**2
    latent = np.zeros((S, m, q))
    for j, task in enumerate(TASKS):
        target = config.target_matrix(task)
        G = np.eye(S)
        for a in range(S):
            for b in range(a + 1, S):
                r = _latent_correlation(
                    j, (base[a, j], sigma[j]), (base[b, j], sigma[j]), target[a, b], config.horizon
                )
                if abs(r) > keep:
                    raise ConfigError(
                        f"target {target[a, b]} for {task} needs latent correlation {r:.3f}, "
                        f"above the ceiling {keep:.3f} set by noise={config.noise}"
                    )
                G[a, b] = G[b, a] = r / keep
        F = _gram_factor(G)  # rows have unit norm, pairwise dots = G
        padded = np.zeros((S, q))
        padded[:, :S] = F
        latent[:, j, :] = padded @ _random_rotation(q, rng).T
    shared = rng.normal(size=(m, q))
    private = rng.normal(size=(S, m, q))
    shared /= np.linalg.norm(shared, axis=-1, keepdims=True)
    private /= np.linalg.norm(private, axis=-1, keepdims=True)
    pf = config.private_fraction
    drift = math.sqrt(1 - pf) * shared[None] + math.sqrt(pf) * private
    drift /= np.linalg.norm(drift, axis=-1, keepdims=True)
    persistence = math.sqrt(1 - pf) * rng.normal(size=m)[None] + math.sqrt(pf) * rng.normal(size=(S, m))
    return Maps(latent=latent, drift=drift, base=base, sigma=sigma, persistence=persistence)


@dataclass
class Panel:
    """Every advertiser in every scenario: rates and label draws."""

    z: np.ndarray  # (N, q)
    future_rates: np.ndarray  # (S, N, m) daily rate over the label horizon
    past_rates: np.ndarray  # (S, N, m) mid-window daily rate
    momentum: np.ndarray  # (N,) slope of the log-rate across the observed window
    labels: np.ndarray  # (S, N, m)
    expected: np.ndarray  # (S, N, m) E[label | rates]


def simulate_panel(
    config: GenConfig,
    rng: np.random.Generator,
    n_advertisers: int | None = None,
    maps: Maps | None = None,
) -> Panel:
    maps = build_maps(config, rng) if maps is None else maps
    N = config.advertisers if n_advertisers is None else n_advertisers
    S, m, q = maps.latent.shape
    z = rng.normal(size=(N, q))
    eps = rng.normal(size=(S, N, m))
    keep = math.sqrt(1.0 - config.noise**2)
    g = keep * np.einsum("smq,nq->snm", maps.latent, z)
    g = g + config.noise * eps
    future = maps.base[:, None, :] * np.exp(maps.sigma * g)
    drift = config.drift_scale * np.einsum("smq,nq->snm", maps.drift, z)
    tau = config.horizon
    labels = np.empty_like(future)
    expected = np.empty_like(future)
    for j, task in enumerate(TASKS):
        if task == "active_days":
            p = -np.expm1(-future[..., j])
            labels[..., j] = rng.binomial(tau, p)
            expected[..., j] = tau * p
        else:
            labels[..., j] = rng.poisson(tau * future[..., j])
            expected[..., j] = tau * future[..., j]
    h = rng.normal(size=N)
    carried = config.momentum_scale * maps.persistence[:, None, :] * h[None, :, None]
    past = future * np.exp(-drift - carried)
    return Panel(z=z, future_rates=future, past_rates=past, momentum=h, labels=labels, expected=expected)


def window_profile(config: GenConfig, momentum: np.ndarray) -> np.ndarray:
    """(N, T) multiplier on the mid-window rate for each observed day."""
    T = config.seq_len
    t = np.arange(T) / (T - 1) - 0.5 if T > 1 else np.zeros(1)
    return np.exp(config.momentum_scale * np.outer(momentum, t))


def empirical_correlations(panel: Panel, config: GenConfig) -> list[dict]:
    """Label Pearson for every scenario pair and task, next to its target."""
    out = []
    S = config.n_scenarios
    for j, task in enumerate(TASKS):
        target = config.target_matrix(task)
        for a in range(S):
            for b in range(a + 1, S):
                out.append(
                    {
                        "task": task,
                        "scenario_a": a,
                        "scenario_b": b,
                        "target": float(target[a, b]),
                        "empirical": pearson(panel.labels[a, :, j], panel.labels[b, :, j]),
                    }
                )
    return out


def _scenario_attrs(config: GenConfig, maps: Maps) -> np.ndarray:
    # scenario type + two scenario-level aggregates (size, mean activity), bucketized
    size_bucket = discretize(np.asarray(config.scenario_sizes, dtype=np.float64))
    activity = maps.base[:, TASKS.index("pv")]
    activity_bucket = discretize(activity)
    return np.stack([np.arange(config.n_scenarios), size_bucket, activity_bucket], axis=1)


def _profiles(config: GenConfig, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    edges = norm.ppf(np.arange(1, config.profile_buckets) / config.profile_buckets)
    buckets = np.searchsorted(edges, z, side="right")
    category = rng.integers(0, config.n_categories, size=(z.shape[0], 1))
    return np.concatenate([buckets, category], axis=1)


def generate(config: GenConfig) -> list[Sample]:
    return generate_with_panel(config)[0]


def generate_with_panel(config: GenConfig) -> tuple[list[Sample], Panel, Maps]:
    """Synthetic dataset plus the panel it was drawn from (for oracle checks)."""
    config.validate()
    seeds = np.random.SeedSequence(config.seed).spawn(3 + config.n_scenarios)
    maps = build_maps(config, np.random.default_rng(seeds[0]))
    panel = simulate_panel(config, np.random.default_rng(seeds[1]), maps=maps)
    profiles = _profiles(config, panel.z, np.random.default_rng(seeds[2]))
    attrs = _scenario_attrs(config, maps)
    i_act = TASKS.index("active_days")
    perf_idx = [TASKS.index(f) for f in PERFORMANCE_FIELDS]
    samples: list[Sample] = []
    for s, n_s in enumerate(config.scenario_sizes):
        rng = np.random.default_rng(seeds[3 + s])
        who = np.sort(rng.choice(config.advertisers, size=n_s, replace=False))
        past = panel.past_rates[s, who][:, None, :] * window_profile(config, panel.momentum[who])[:, :, None]
        perf = rng.poisson(past[:, :, perf_idx]).astype(np.float64)
        act = past[:, :, i_act]
        behavior_rates = np.stack([act, 0.3 * act, 0.5 * act + 0.05 * past[:, :, 1]], axis=-1)
        behavior = rng.poisson(behavior_rates).astype(np.float64)
        days = rng.integers(0, config.n_days, size=n_s)
        labels = panel.labels[s, who].astype(np.int64)
        expected = panel.expected[s, who]
        for k, adv in enumerate(who):
            samples.append(
                Sample(
                    advertiser_id=f"adv{adv:07d}",
                    scenario_id=s,
                    scenario_attrs=attrs[s].copy(),
                    profile=profiles[adv].copy(),
                    behavior_seq=behavior[k],
                    performance_seq=perf[k],
                    labels=labels[k],
                    day_index=int(days[k]),
                    rates=expected[k],
                )
            )
    return samples, panel, maps


# ---------------------------------------------------------------------------
# splitting


def split(samples: Sequence[Sample], spec: SplitSpec | None = None):
    """Time-ordered train/valid/test partition by ``day_index``.

    When the test window starts fewer than ``gap_days`` after the last train
    day, trailing train days are moved into validation until the gap holds.
    """
    spec = spec or SplitSpec()
    spec.validate()
    if not samples:
        return [], [], []
    days = sorted({s.day_index for s in samples})
    n = len(days)
    if n < 3:
        raise ValueError(f"need at least 3 distinct days to split, got {n}")
    n_train = max(1, int(round(spec.train * n)))
    n_test = max(1, int(round(spec.test * n)))
    n_train = min(n_train, n - n_test - (1 if spec.valid > 0 else 0))
    test_start = days[n - n_test]
    while n_train > 0 and test_start - days[n_train - 1] - 1 < spec.gap_days:
        n_train -= 1
    if n_train == 0:
        raise ValueError("too few distinct days to keep the train/test gap")
    train_days = set(days[:n_train])
    test_days = set(days[n - n_test :])
    train, valid, test = [], [], []
    for s in samples:
        if s.day_index in train_days:
            train.append(s)
        elif s.day_index in test_days:
            test.append(s)
        else:
            valid.append(s)
    return train, valid, test


# ---------------------------------------------------------------------------
# serialization


def save(samples: Iterable[Sample], path) -> str:
    """Write one JSON object per line; returns the sha256 of the file."""
    path = Path(path)
    digest = hashlib.sha256()
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            line = json.dumps(s.to_record(), separators=(",", ":")) + "\n"
            digest.update(line.encode("utf-8"))
            fh.write(line)
    return digest.hexdigest()


def load(path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                sample = Sample.from_record(json.loads(line))
                sample.validate()
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise DatasetFormatError(f"{path}: line {lineno}: {err}") from err
            out.append(sample)
    return out


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_metadata(path, config: GenConfig, correlations: list[dict], extra: dict | None = None) -> None:
    meta = {
        "schema_version": SCHEMA_VERSION,
        "seed": config.seed,
        "gen_config": config.to_dict(),
        "tasks": list(TASKS),
        "behavior_fields": list(BEHAVIOR_FIELDS),
        "performance_fields": list(PERFORMANCE_FIELDS),
        "scenario_attrs_note": "scenario type plus two synthetic aggregates (size, activity); stand-in features",
        "correlations": correlations,
    }
    if extra:
        meta.update(extra)
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
