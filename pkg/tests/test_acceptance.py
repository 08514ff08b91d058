"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed at the end of the run."""

import time

import numpy as np
import pytest

from m2m import checkpoint as ckpt
from m2m import data
from m2m.backbone import MultiHeadAttention
from m2m.baselines import MMoE, build_model
from m2m.config import TrainConfig
from m2m.gradcheck import grad_check
from m2m.meta import M2MModel, MetaTower
from m2m.features import vocab_from_config
from m2m.metrics import joint_loss, nmae, poisson_loss, smape
from m2m.run import ABLATIONS, RunConfig, fit, memory_bundle
from m2m.tensor import Tensor
from m2m.training import train

from conftest import ACCEPTANCE, random_batch, tiny_config


def record(number: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"criterion {number} {name}: {'PASS' if ok else 'FAIL'} ({detail})")


def test_c1_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        cfg = tiny_config(seed=seed)
        model = M2MModel(cfg)
        batch = random_batch(cfg, 4, np.random.default_rng(1000 + seed))
        report = grad_check(lambda: joint_loss(model, batch)[0], model.parameters(), h=1e-5, floor=1e-6)
        worst = max(worst, report.max_rel_error)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    record(1, "gradient correctness", ok, f"max rel error {worst:.2e} over 10 seeds, {elapsed:.0f} s")
    assert ok


def test_c2_metric_oracles():
    fixtures = [
        abs(smape([2, 3], [1, 3]) - 1 / 3),
        abs(nmae([2, 3], [1, 3]) - 1 / 4),
    ]
    rng = np.random.default_rng(2)
    bounded = invariant = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 20))
        y = np.where(rng.random(n) < 0.2, 0.0, 10 ** rng.uniform(-6, 4, n))
        y_hat = np.where(rng.random(n) < 0.2, 0.0, 10 ** rng.uniform(-6, 4, n))
        bounded += 0.0 <= smape(y_hat, y) <= 2.0
        if y.sum() <= 0:
            y[0] = 1.0
        c = 10 ** rng.uniform(-3, 3)
        invariant += abs(nmae(c * y_hat, c * y) - nmae(y_hat, y)) <= 1e-9 * nmae(y_hat, y) + 1e-15
    ok = max(fixtures) < 1e-12 and bounded == invariant == 10_000
    record(2, "metric oracles", ok, f"fixture error {max(fixtures):.1e}; {bounded}/10000 bounded, "
                                    f"{invariant}/10000 scale invariant")
    assert ok


def test_c3_poisson_minimum():
    rng = np.random.default_rng(3)
    misses = 0
    for y in rng.integers(0, 51, 1000):
        grid = np.round(np.arange(max(y - 1.0, 0.01), y + 1.0 + 1e-9, 0.01), 10)
        losses = [poisson_loss(Tensor([r]), [float(y)]).item() for r in grid]
        best = grid[int(np.argmin(losses))]
        misses += abs(best - y) > 0.01 + 1e-12
    record(3, "Poisson loss minimum", misses == 0, f"{1000 - misses}/1000 argmins within one grid step")
    assert misses == 0


def test_c4_generator_calibration():
    start = time.perf_counter()
    cfg = data.GenConfig()
    pairs = {(a, b): t for a, b, t in cfg.correlations["expenditure"]}
    got = {pair: [] for pair in pairs}
    for seed in range(10):
        panel = data.simulate_panel(cfg, np.random.default_rng(seed), 50_000)
        for row in data.empirical_correlations(panel, cfg):
            key = (row["scenario_a"], row["scenario_b"])
            if row["task"] == "expenditure" and key in pairs:
                got[key].append(row["empirical"])
    means = {k: float(np.mean(v)) for k, v in got.items()}
    elapsed = time.perf_counter() - start
    ok = all(abs(means[k] - pairs[k]) <= 0.05 for k in pairs) and elapsed < 120
    detail = ", ".join(f"{pairs[k]:.2f}->{means[k]:.3f}" for k in sorted(pairs))
    record(4, "generator calibration", ok, f"{detail}; {elapsed:.0f} s")
    assert ok


SEEDS = range(5)
MINOR = (2, 3)
COMPARISON_BUDGET = 30 * 60  # seconds


@pytest.fixture(scope="module")
def desk_runs():
    """Test reports for M2M, both multi-task baselines and the three ablations, per seed."""
    runs = {}
    for seed in SEEDS:
        cfg = RunConfig.desk(seed)
        start = time.perf_counter()
        bundle = memory_bundle(cfg.data, cfg.split, cfg.features)
        vocab = vocab_from_config(bundle.gen, cfg.features.n_buckets)
        reports = {}
        for variant in ("m2m", "shared_bottom", "mmoe"):
            reports[variant] = fit(bundle, cfg.model_config(vocab, variant=variant), cfg.train).report
        elapsed = time.perf_counter() - start
        reports["full"] = reports["m2m"]
        for name, flags in ABLATIONS.items():
            if name != "full":
                reports[name] = fit(bundle, cfg.model_config(vocab, variant="m2m", **flags), cfg.train).report
        runs[seed] = reports, elapsed
    return runs


def test_c5_minor_scenario_gain(desk_runs):
    wins, lines = 0, []
    for seed, (r, elapsed) in desk_runs.items():
        m2m, sb, mmoe = r["m2m"], r["shared_bottom"], r["mmoe"]
        gains = [1 - m2m.scenario_nmae(s) / sb.scenario_nmae(s) for s in MINOR]
        major = m2m.scenario_nmae(0) / mmoe.scenario_nmae(0) - 1
        won = min(gains) >= 0.05 and major <= 0.02 and elapsed <= COMPARISON_BUDGET
        wins += won
        lines.append(f"seed {seed}: minor gains {gains[0]:+.1%}/{gains[1]:+.1%}, "
                     f"dominant vs MMoE {major:+.1%}, {elapsed / 60:.0f} min")
    ok = wins >= 4
    record(5, "minor-scenario gain", ok, f"{wins}/5 seeds; " + "; ".join(lines))
    assert ok


def test_c6_ablation_ordering(desk_runs):
    wins, lines = 0, []
    for seed, (r, _) in desk_runs.items():
        full = r["full"].overall_nmae
        others = {name: r[name].overall_nmae for name in ABLATIONS if name != "full"}
        wins += all(full <= v for v in others.values())
        lines.append(f"seed {seed}: full {full:.4f} " + " ".join(f"{k} {v:.4f}" for k, v in others.items()))
    ok = wins >= 4
    record(6, "ablation ordering", ok, f"{wins}/5 seeds; " + "; ".join(lines))
    assert ok


def test_c7_structural_invariants(tmp_path):
    rng = np.random.default_rng(7)
    failures = []

    cfg = tiny_config(n_experts=3, n_tasks=3)
    batch = random_batch(cfg, 9, rng)
    _, alphas = M2MModel(cfg)(batch, return_attention=True)
    err = max(abs(a.data.sum(axis=1) - 1.0).max() for a in alphas)
    gate_cfg = tiny_config(n_experts=3, variant="mmoe")
    mmoe = MMoE(gate_cfg)
    gates = mmoe.gate_weights(mmoe.features(random_batch(gate_cfg, 9, rng)))
    err = max([err] + [abs(g.data.sum(axis=1) - 1.0).max() for g in gates])
    if err > 1e-12:
        failures.append(f"normalization off by {err:.1e}")

    tower = MetaTower(d_s=3, d=5, depth=3, n_layers=2, rng=rng)
    for unit in tower.units:
        for p in unit.generators():
            p.data[...] = 0.0
    x = np.abs(rng.normal(size=(6, 5)))
    if not np.array_equal(tower(Tensor(x), Tensor(rng.normal(size=(6, 3)))).data, x):
        failures.append("zero-generator tower is not the identity")

    mha = MultiHeadAttention(6, 2, rng)
    seqs = rng.normal(size=(3, 7, 6))
    perm = rng.permutation(7)
    if not np.allclose(mha(Tensor(seqs[:, perm])).data, mha(Tensor(seqs)).data[:, perm], rtol=1e-10, atol=1e-12):
        failures.append("attention block is not permutation equivariant")

    for variant in ("m2m", "shared_bottom", "mmoe", "single_task"):
        vcfg = tiny_config(seed=3, variant=variant)
        model = build_model(vcfg)
        tr, va = random_batch(vcfg, 48, rng), random_batch(vcfg, 16, rng)
        train(model, tr, va, TrainConfig(epochs=1, batch_size=16))
        ckpt.save(tmp_path / f"{variant}.npz", model)
        if not np.array_equal(ckpt.load(tmp_path / f"{variant}.npz").predict(va), model.predict(va)):
            failures.append(f"{variant} checkpoint round trip is not bit-exact")

    record(7, "structural invariants", not failures, "; ".join(failures) or "normalization, identity, "
           "equivariance and round trip all exact")
    assert not failures


def test_c8_determinism(tmp_path):
    texts = []
    for run in range(2):
        cfg = tiny_config(seed=8)
        r = np.random.default_rng(8)
        model = build_model(cfg)
        tr, va = random_batch(cfg, 96, r), random_batch(cfg, 32, r)
        path = tmp_path / f"history{run}.csv"
        train(model, tr, va, TrainConfig(epochs=3, batch_size=32, seed=8), history_path=path)
        texts.append(path.read_bytes())
    ok = texts[0] == texts[1]
    record(8, "determinism", ok, "history files byte-identical" if ok else "history files differ")
    assert ok
