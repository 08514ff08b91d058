import numpy as np
import pytest

from m2m import checkpoint as ckpt
from m2m.baselines import build_model
from m2m.config import LossConfig, TrainConfig
from m2m.metrics import evaluate, joint_loss
from m2m.optim import AdamState, adam_step, clip_gradients
from m2m.tensor import Tape
from m2m.training import NumericalAbort, batch_order, read_history, train, write_history

from conftest import random_batch, tiny_config


def setup(seed=0, n_train=64, n_valid=16, variant="m2m"):
    cfg = tiny_config(seed=seed, variant=variant)
    rng = np.random.default_rng(seed)
    return build_model(cfg), random_batch(cfg, n_train, rng), random_batch(cfg, n_valid, rng)


def sq_norm(model):
    return sum(float(np.vdot(p.data, p.data)) for p in model.parameters())


def test_zero_learning_rate_leaves_parameters():
    model, tr, va = setup()
    before = [p.data.copy() for p in model.parameters()]
    train(model, tr, va, TrainConfig(epochs=1, lr=0.0, batch_size=16))
    for p, b in zip(model.parameters(), before):
        np.testing.assert_array_equal(p.data, b)


def test_overfit_loss_decreases_for_most_seeds():
    monotone = 0
    for seed in range(10):
        model, tr, va = setup(seed)
        hist = train(model, tr, va, TrainConfig(epochs=5, seed=seed)).history
        losses = [h["train_loss"] for h in hist]
        monotone += all(b < a for a, b in zip(losses, losses[1:]))
    assert monotone >= 8


def test_batch_order_is_a_seeded_permutation():
    a = batch_order(50, 3, 1)
    np.testing.assert_array_equal(a, batch_order(50, 3, 1))
    np.testing.assert_array_equal(np.sort(a), np.arange(50))
    assert not np.array_equal(a, batch_order(50, 3, 2))


def test_identical_seeds_give_identical_history_file(tmp_path):
    texts = []
    for run in range(2):
        model, tr, va = setup(4)
        path = tmp_path / f"h{run}.csv"
        train(model, tr, va, TrainConfig(epochs=3, batch_size=16, seed=4), history_path=path)
        texts.append(path.read_bytes())
    assert texts[0] == texts[1]


def test_history_round_trip(tmp_path):
    rows = [{"epoch": 1, "train_loss": 0.1 + 0.2, "valid_loss": -3.5, "valid_overall_nmae": 1 / 3}]
    write_history(rows, tmp_path / "h.csv")
    assert read_history(tmp_path / "h.csv") == rows
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,valid_loss,valid_overall_nmae"


def test_best_validation_epoch_is_restored():
    model, tr, va = setup(1)
    res = train(model, tr, va, TrainConfig(epochs=4, batch_size=16, seed=1))
    best = min(res.history, key=lambda h: h["valid_overall_nmae"])
    assert res.best_epoch == best["epoch"]
    assert evaluate(model, va).overall_nmae == best["valid_overall_nmae"]


def test_non_finite_weight_aborts_with_diagnostics():
    model, tr, va = setup(2)
    gen, _ = model.parameter_groups()
    gen[0].data.flat[0] = np.inf
    with pytest.raises(NumericalAbort) as info:
        train(model, tr, va, TrainConfig(epochs=1, batch_size=16))
    err = info.value
    assert (err.epoch, err.batch) == (0, 0)
    assert err.group.startswith("W1") and gen[0].name in err.group


def test_resume_matches_uninterrupted_run():
    straight, tr, va = setup(5)
    full = train(straight, tr, va, TrainConfig(epochs=3, batch_size=16, seed=5))
    model, _, _ = setup(5)
    first = train(model, tr, va, TrainConfig(epochs=2, batch_size=16, seed=5))
    rest = train(model, tr, va, TrainConfig(epochs=3, batch_size=16, seed=5), resume=first.resume)
    assert [h["epoch"] for h in rest.history] == [1, 2, 3]
    assert rest.history == full.history
    for a, b in zip(rest.resume.last.values(), full.resume.last.values()):
        np.testing.assert_array_equal(a, b)


class TestWeightAverage:
    def test_single_step_closed_form(self):
        model, tr, va = setup(9)
        start = {name: p.data.copy() for name, p in model.named_parameters()}
        res = train(model, tr, va, TrainConfig(epochs=1, batch_size=len(tr), ema_decay=0.75))
        for name, p in model.named_parameters():
            np.testing.assert_allclose(p.data, 0.75 * start[name] + 0.25 * res.resume.last[name], rtol=1e-14)
            np.testing.assert_array_equal(res.resume.ema[name], p.data)

    def test_optimizer_trajectory_unchanged(self):
        plain, tr, va = setup(10)
        averaged, _, _ = setup(10)
        a = train(plain, tr, va, TrainConfig(epochs=2, batch_size=16))
        b = train(averaged, tr, va, TrainConfig(epochs=2, batch_size=16, ema_decay=0.9))
        for name in a.resume.last:
            np.testing.assert_array_equal(a.resume.last[name], b.resume.last[name])
        assert a.resume.ema == {}

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        cfg = TrainConfig(epochs=3, batch_size=16, seed=11, ema_decay=0.9)
        straight, tr, va = setup(11)
        full = train(straight, tr, va, cfg)
        model, _, _ = setup(11)
        first = train(model, tr, va, TrainConfig(epochs=2, batch_size=16, seed=11, ema_decay=0.9))
        ckpt.save(tmp_path / "r.npz", model, resume=first.resume)
        rest = train(model, tr, va, cfg, resume=ckpt.load_resume(tmp_path / "r.npz"))
        assert rest.history == full.history
        np.testing.assert_array_equal(model.predict(va), straight.predict(va))


@pytest.mark.parametrize("variant", ["m2m", "shared_bottom"])
def test_pure_weight_decay_step_shrinks_norm(variant):
    model, tr, _ = setup(6, variant=variant)
    params = model.parameters()
    before = sq_norm(model)
    with Tape() as tape:
        loss, _ = joint_loss(model, tr, LossConfig([0.0, 0.0], 1e-4))
        tape.backward(loss)
    grads = [p.grad for p in params]
    clip_gradients(grads)
    adam_step(params, grads, AdamState.create(params))
    assert sq_norm(model) < before


def test_empty_split_rejected():
    model, tr, va = setup()
    with pytest.raises(ValueError):
        train(model, tr, va.take(slice(0, 0)), TrainConfig(epochs=1))


class TestCheckpoint:
    @pytest.mark.parametrize("variant", ["m2m", "shared_bottom", "mmoe", "single_task"])
    def test_round_trip_is_bit_exact(self, tmp_path, variant):
        model, tr, va = setup(7, variant=variant)
        train(model, tr, va, TrainConfig(epochs=1, batch_size=32))
        path = tmp_path / "m.npz"
        ckpt.save(path, model, meta={"seed": 7})
        loaded = ckpt.load(path)
        np.testing.assert_array_equal(loaded.predict(va), model.predict(va))
        a, b = evaluate(model, va), evaluate(loaded, va)
        assert a.rows() == b.rows() and a.overall_nmae == b.overall_nmae
        assert ckpt.header(path)["variant"] == variant

    def test_resume_state_round_trip(self, tmp_path):
        model, tr, va = setup(8)
        res = train(model, tr, va, TrainConfig(epochs=2, batch_size=32))
        path = tmp_path / "r.npz"
        ckpt.save(path, model, resume=res.resume)
        state = ckpt.load_resume(path)
        assert state.epoch == 2 and state.adam_step == res.resume.adam_step
        assert state.history == res.history
        for k, v in res.resume.adam_v.items():
            np.testing.assert_array_equal(state.adam_v[k], v)

    def test_shape_mismatch_names_parameter(self, tmp_path):
        model, _, _ = setup(9)
        path = tmp_path / "m.npz"
        ckpt.save(path, model)
        other = build_model(tiny_config(meta_dim=5))
        header, arrays = ckpt.read(path)
        with pytest.raises(Exception, match="parameter"):
            ckpt.load_weights(other, ckpt._group(arrays, "param"))

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "bad.npz"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ckpt.CheckpointError):
            ckpt.read(path)
