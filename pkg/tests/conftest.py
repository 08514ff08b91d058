import numpy as np
import pytest

from m2m.config import ModelConfig
from m2m.features import Features


def tiny_config(**overrides) -> ModelConfig:
    """d=4, k=2, K=2, L=1, m=2, T=3 with small vocabularies."""
    kw = dict(
        n_scenarios=2,
        n_tasks=2,
        seq_len=3,
        behavior_vocab=[4] * 3,
        performance_vocab=[4] * 4,
        scenario_vocab=[2, 3],
        profile_vocab=[3, 3],
        n_dense=7,
        d_input=2,
        d_pos=2,
        n_heads=2,
        d_view=4,
        n_experts=2,
        d_task=3,
        d_scenario=3,
        scenario_hidden=[4],
        meta_dim=4,
        meta_depth=2,
        tower_layers=1,
    )
    kw.update(overrides)
    return ModelConfig(**kw)


def random_batch(cfg: ModelConfig, n: int, rng: np.random.Generator, mean_label: float = 3.0) -> Features:
    steps = cfg.seq_len
    attrs = np.stack([rng.integers(0, v, n) for v in cfg.scenario_vocab], axis=1)
    attrs[:, 0] = rng.integers(0, cfg.n_scenarios, n)
    return Features(
        behavior_ids=np.stack([rng.integers(0, v, (n, steps)) for v in cfg.behavior_vocab], axis=2),
        performance_ids=np.stack([rng.integers(0, v, (n, steps)) for v in cfg.performance_vocab], axis=2),
        scenario_attrs=attrs,
        profile=np.stack([rng.integers(0, v, n) for v in cfg.profile_vocab], axis=1),
        dense=rng.normal(size=(n, cfg.n_dense)),
        labels=rng.poisson(mean_label, (n, cfg.n_tasks)).astype(np.float64),
        scenario=attrs[:, 0].copy(),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
