import math

import numpy as np
import pytest

from m2m import tensor as T
from m2m.config import ModelConfig
from m2m.gradcheck import grad_check
from m2m.meta import (
    RATE_FLOOR,
    M2MModel,
    MetaAttention,
    MetaTower,
    MetaUnit,
    PlainUnit,
    RateHead,
    inverse_link,
    predict_rate,
)
from m2m.metrics import joint_loss
from m2m.tensor import ShapeError, Tape, Tensor

from conftest import random_batch, tiny_config


def zero_generators(unit: MetaUnit) -> None:
    for p in unit.generators():
        p.data[...] = 0.0


class TestMetaUnit:
    def test_hand_case(self, rng):
        unit = MetaUnit(d_s=2, d=1, depth=1, rng=rng)
        zero_generators(unit)
        unit.v_w[0].data[:] = 2.0
        unit.v_b[0].data[:] = 1.0
        out = unit(Tensor(rng.normal(size=(1, 2))), Tensor([[3.0]]))
        assert out.data.item() == 7.0

    def test_scenario_term_enters_weights(self, rng):
        unit = MetaUnit(d_s=1, d=1, depth=1, rng=rng)
        zero_generators(unit)
        unit.V_w[0].data[:] = 2.0  # W = 2 s
        unit.V_b[0].data[:] = -1.0  # b = -s
        out = unit(Tensor([[1.5], [0.5]]), Tensor([[2.0], [2.0]]))
        np.testing.assert_allclose(out.data, [[4.5], [1.5]])

    def test_rows_of_generated_matrix_are_outputs(self, rng):
        unit = MetaUnit(d_s=1, d=2, depth=1, rng=rng)
        zero_generators(unit)
        unit.v_w[0].data[:] = [1.0, 2.0, 3.0, 4.0]  # W = [[1, 2], [3, 4]]
        out = unit(Tensor([[0.0]]), Tensor([[1.0, 1.0]]))
        np.testing.assert_allclose(out.data, [[3.0, 7.0]])

    def test_zero_generators_give_zero_output(self, rng):
        unit = MetaUnit(d_s=3, d=4, depth=3, rng=rng)
        zero_generators(unit)
        out = unit(Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 4))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_generated_shapes(self, rng):
        unit = MetaUnit(d_s=3, d=4, depth=2, rng=rng)
        W, b = unit.generate(Tensor(rng.normal(size=(5, 3))), 1)
        assert W.shape == (5, 4, 4) and b.shape == (5, 4)

    def test_matches_per_sample_reference(self, rng):
        unit = MetaUnit(d_s=3, d=4, depth=2, rng=rng, slope=0.2)
        s, h = rng.normal(size=(3, 3)), rng.normal(size=(3, 2, 4))
        out = unit(Tensor(s), Tensor(h)).data
        for n in range(3):
            x = h[n]
            for i in range(2):
                W = (s[n] @ unit.V_w[i].data + unit.v_w[i].data).reshape(4, 4)
                b = s[n] @ unit.V_b[i].data + unit.v_b[i].data
                z = x @ W.T + b
                x = np.where(z > 0, z, 0.2 * z)
            np.testing.assert_allclose(out[n], x, rtol=1e-12)

    def test_distinct_scenarios_generate_distinct_weights(self, rng):
        unit = MetaUnit(d_s=3, d=4, depth=1, rng=rng)
        W, _ = unit.generate(Tensor(rng.normal(size=(2, 3))), 0)
        assert not np.allclose(W.data[0], W.data[1])

    def test_gradient_wrt_generators_and_scenario(self, rng):
        unit = MetaUnit(d_s=3, d=4, depth=2, rng=rng)
        s = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        h = rng.normal(size=(3, 4))
        report = grad_check(lambda: T.sum_(T.square(unit(s, Tensor(h)))), [*unit.generators(), s], h=1e-6, floor=1e-6)
        assert report.max_rel_error < 1e-4, report.worst

    def test_width_mismatch(self, rng):
        unit = MetaUnit(d_s=3, d=4, depth=1, rng=rng)
        with pytest.raises(ShapeError):
            unit(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5))))
        with pytest.raises(ShapeError):
            unit(Tensor(np.ones((3, 3))), Tensor(np.ones((2, 4))))

    def test_every_generator_gets_gradient(self):
        for seed in range(10):
            r = np.random.default_rng(seed)
            unit = MetaUnit(d_s=3, d=4, depth=3, rng=r)
            for p in unit.generators():  # zero-initialized biases would otherwise stay symmetric
                p.data += r.normal(scale=0.1, size=p.shape)
            with Tape() as tape:
                tape.backward(T.sum_(unit(Tensor(r.normal(size=(4, 3))), Tensor(r.normal(size=(4, 4))))))
            for p in unit.generators():
                assert np.abs(p.grad).sum() > 0


def attention_cfg(**kw) -> ModelConfig:
    return tiny_config(**kw)


class TestMetaAttention:
    def hand_head(self, rng, k_scores):
        """d_view = d = 1 head whose score for expert value e is exactly e."""
        cfg = attention_cfg(d_view=1, meta_dim=1, meta_depth=1, d_scenario=2)
        head = MetaAttention(cfg, rng)
        zero_generators(head.unit)
        head.unit.v_w[0].data[:] = 1.0
        head.P_e.data[:] = 1.0
        head.P_t.data[:] = 0.0
        head.c.data[:] = 0.0
        head.v.data[:] = 1.0
        experts = Tensor(np.array(k_scores, dtype=float).reshape(1, -1, 1))
        return head, experts

    def test_hand_case(self, rng):
        head, experts = self.hand_head(rng, [math.log(3.0), 0.0])
        r, alpha = head(experts, Tensor([0.5]), Tensor(rng.normal(size=(1, 2))))
        np.testing.assert_allclose(alpha.data[0], [0.75, 0.25], rtol=1e-12)
        np.testing.assert_allclose(r.data[0, 0], 0.75 * math.log(3.0), rtol=1e-12)

    def test_single_expert_returns_it(self, rng):
        cfg = attention_cfg(n_experts=1)
        head = MetaAttention(cfg, rng)
        e = rng.normal(size=(3, 1, cfg.d_view))
        r, alpha = head(Tensor(e), Tensor(rng.normal(size=cfg.d_view)), Tensor(rng.normal(size=(3, cfg.d_scenario))))
        np.testing.assert_array_equal(alpha.data, 1.0)
        np.testing.assert_allclose(r.data, e[:, 0])

    def test_identical_experts_uniform(self, rng):
        cfg = attention_cfg(n_experts=3)
        head = MetaAttention(cfg, rng)
        row = rng.normal(size=cfg.d_view)
        e = np.tile(row, (2, 3, 1))
        r, alpha = head(Tensor(e), Tensor(rng.normal(size=cfg.d_view)), Tensor(rng.normal(size=(2, cfg.d_scenario))))
        np.testing.assert_allclose(alpha.data, 1 / 3, rtol=1e-12)
        np.testing.assert_allclose(r.data, np.tile(row, (2, 1)), rtol=1e-12)

    def test_weights_positive_and_normalized(self):
        cfg = attention_cfg(n_experts=4)
        for seed in range(20):
            r = np.random.default_rng(seed)
            head = MetaAttention(cfg, r)
            e = Tensor(r.normal(scale=3.0, size=(8, 4, cfg.d_view)))
            _, alpha = head(e, Tensor(r.normal(size=cfg.d_view)), Tensor(r.normal(size=(8, cfg.d_scenario))))
            assert np.all(alpha.data > 0)
            np.testing.assert_allclose(alpha.data.sum(axis=1), 1.0, atol=1e-12)

    def test_plain_variant_ignores_scenario(self, rng):
        cfg = attention_cfg(disable_meta_attention=True)
        head = MetaAttention(cfg, rng)
        assert isinstance(head.unit, PlainUnit)
        e, a = Tensor(rng.normal(size=(1, 2, cfg.d_view))), Tensor(rng.normal(size=cfg.d_view))
        _, a1 = head(e, a, Tensor(rng.normal(size=(1, cfg.d_scenario))))
        _, a2 = head(e, a, Tensor(rng.normal(size=(1, cfg.d_scenario))))
        np.testing.assert_array_equal(a1.data, a2.data)


class TestMetaTower:
    def test_hand_case(self, rng):
        tower = MetaTower(d_s=1, d=1, depth=1, n_layers=1, rng=rng)
        unit = tower.units[0]
        zero_generators(unit)
        unit.v_w[0].data[:] = 1.0
        unit.v_b[0].data[:] = -1.0  # Meta(3) = 3 - 1 = 2
        out = tower(Tensor([[3.0]]), Tensor([[0.7]]))
        assert out.data.item() == 5.0

    def test_zero_generators_identity_on_nonnegative(self, rng):
        tower = MetaTower(d_s=3, d=5, depth=3, n_layers=2, rng=rng)
        for unit in tower.units:
            zero_generators(unit)
        x = np.abs(rng.normal(size=(4, 5)))
        np.testing.assert_array_equal(tower(Tensor(x), Tensor(rng.normal(size=(4, 3)))).data, x)

    def test_no_layers_is_identity(self, rng):
        tower = MetaTower(d_s=3, d=5, depth=3, n_layers=0, rng=rng)
        x = rng.normal(size=(2, 5))
        np.testing.assert_array_equal(tower(Tensor(x), Tensor(rng.normal(size=(2, 3)))).data, x)

    def test_layers_have_independent_generators(self, rng):
        tower = MetaTower(d_s=3, d=5, depth=2, n_layers=2, rng=rng)
        a, b = (set(map(id, u.generators())) for u in tower.units)
        assert not a & b


class TestRate:
    def test_zero_preactivation(self):
        assert predict_rate(Tensor([[0.0]])).data.item() == pytest.approx(math.log(2) + 1e-6, abs=1e-15)

    def test_floor(self):
        out = predict_rate(Tensor([[-800.0]])).data.item()
        assert out > 0 and out == pytest.approx(RATE_FLOOR, rel=1e-9)

    def test_monotone(self):
        x = np.linspace(-30, 30, 601).reshape(-1, 1)
        assert np.all(np.diff(predict_rate(Tensor(x)).data[:, 0]) > 0)

    def test_inverse_link(self):
        for link in ("softplus", "exp"):
            for rate in (0.01, 1.0, 300.0):
                pre = inverse_link(rate, link)
                assert predict_rate(Tensor([[pre]]), link).data.item() == pytest.approx(rate, rel=1e-9)

    def test_calibrated_head_starts_at_mean(self, rng):
        head = RateHead(3, rng)
        head.linear.weight.data[:] = 0.0
        head.calibrate(250.0)
        out = head(Tensor(rng.normal(size=(4, 3)))).data
        np.testing.assert_allclose(out, 250.0, rtol=1e-6)


class TestM2M:
    def test_output_contract(self, rng):
        cfg = tiny_config()
        model = M2MModel(cfg)
        out = model(random_batch(cfg, 6, rng))
        assert out.shape == (6, cfg.n_tasks) and np.all(out.data > 0)

    def test_attention_normalized_per_task(self, rng):
        cfg = tiny_config(n_experts=3, n_tasks=3)
        model = M2MModel(cfg)
        _, alphas = model(random_batch(cfg, 5, rng), return_attention=True)
        assert len(alphas) == 3
        for a in alphas:
            np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-12)

    def test_scenario_id_changes_outputs(self):
        cfg = tiny_config()
        for seed in range(10):
            r = np.random.default_rng(seed)
            model = M2MModel(tiny_config(seed=seed))
            batch = random_batch(cfg, 1, r)
            other = batch.take(slice(None))
            other.scenario_attrs = batch.scenario_attrs.copy()
            other.scenario_attrs[0, 0] = 1 - batch.scenario_attrs[0, 0]
            assert not np.allclose(model(batch).data, model(other).data)

    def test_frozen_knowledge_equalizes_scenarios(self, rng):
        cfg = tiny_config()
        model = M2MModel(cfg)
        batch = random_batch(cfg, 1, rng)
        other = batch.take(slice(None))
        other.scenario_attrs = batch.scenario_attrs.copy()
        other.scenario_attrs[0, 0] = 1 - batch.scenario_attrs[0, 0]
        s = np.ones((1, cfg.d_scenario))
        np.testing.assert_array_equal(model(batch, scenario_knowledge=s).data, model(other, scenario_knowledge=s).data)

    def test_scenario_sensitivity_over_inits(self):
        cfg = tiny_config()
        r = np.random.default_rng(7)
        batch = random_batch(cfg, 1, r)
        s1, s2 = r.normal(size=(1, cfg.d_scenario)), r.normal(size=(1, cfg.d_scenario))
        hits = 0
        for seed in range(100):
            model = M2MModel(tiny_config(seed=seed))
            hits += not np.allclose(model(batch, scenario_knowledge=s1).data, model(batch, scenario_knowledge=s2).data)
        assert hits >= 99

    def test_generator_gradient_completeness(self):
        cfg = tiny_config()
        for seed in range(5):
            r = np.random.default_rng(seed)
            model = M2MModel(tiny_config(seed=seed))
            for p in model.generator_parameters():
                p.data += r.normal(scale=0.05, size=p.shape)
            with Tape() as tape:
                loss, _ = joint_loss(model, random_batch(cfg, 4, r))
                tape.backward(loss)
            gens = model.generator_parameters()
            assert len(gens) == cfg.n_tasks * (1 + cfg.tower_layers) * 4 * cfg.meta_depth
            for p in gens:
                assert np.abs(p.grad).sum() > 0, p.name

    def test_parameter_groups_partition(self, rng):
        model = M2MModel(tiny_config())
        gen, rest = model.parameter_groups()
        assert len(gen) + len(rest) == len(model.parameters())
        assert not set(map(id, gen)) & set(map(id, rest))

    def test_ablation_flags_remove_generators(self):
        plain = M2MModel(tiny_config(disable_meta_attention=True, disable_meta_tower=True))
        assert plain.generator_parameters() == []
        assert M2MModel(tiny_config(disable_transformer=True)).backbone.mha_behavior is None

    @pytest.mark.parametrize("seed", range(10))
    def test_end_to_end_gradient(self, seed):
        cfg = tiny_config(seed=seed)
        model = M2MModel(cfg)
        batch = random_batch(cfg, 4, np.random.default_rng(1000 + seed))
        report = grad_check(lambda: joint_loss(model, batch)[0], model.parameters(), h=1e-5, floor=1e-6)
        assert report.max_rel_error < 1e-4, (report.worst, report.flagged[:3])
