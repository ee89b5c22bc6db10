import json

import numpy as np
import pytest

from stableflow.dynamics import VelocityField, eval_field, rollout_many
from stableflow.errors import DimensionMismatch, EmptyBatch, NonFinite
from stableflow.flow import DiffeoModel, forward, loss_gradient
from stableflow.synth import synthesize
from stableflow.train import (
    AdamState,
    TrainConfig,
    baseline_loss,
    load_checkpoint,
    load_training_state,
    prepare,
    save_checkpoint,
    train,
)


def small_cfg(**kw):
    base = dict(K=4, m=40, epochs=20, learning_rate=1e-3, seed=1)
    base.update(kw)
    return TrainConfig(**base)


def small_data(points=100, count=3):
    return synthesize("scurve", count=count, points=points, noise=0.005, seed=2)


def identity_targets(model, x):
    d = x - model.goal_x
    return -d / np.linalg.norm(d, axis=1, keepdims=True)


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.K, cfg.m, cfg.lengthscale) == (10, 200, 0.45)
        assert (cfg.learning_rate, cfg.l2_coeff) == (1e-4, 1e-8)
        assert (cfg.beta1, cfg.beta2, cfg.eps_adam) == (0.9, 0.999, 1e-8)

    @pytest.mark.parametrize("bad", [dict(K=0), dict(m=-1), dict(learning_rate=0.0),
                                     dict(batch_size=0), dict(potential="cubic"), dict(beta1=1.0)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_dict_roundtrip(self):
        cfg = small_cfg(batch_size=64)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"layers": 3})


def test_adam_first_step():
    # with bias correction the first step moves every coordinate by lr * sign(grad)
    cfg = TrainConfig(learning_rate=0.01)
    state = AdamState.zeros(3)
    theta = state.update(np.zeros(3), np.array([2.0, -0.5, 1e-3]), cfg)
    np.testing.assert_allclose(theta, [-0.01, 0.01, -0.01], rtol=1e-4)
    assert state.step == 1


class TestPrepare:
    def test_identity_model(self):
        model, batch = prepare(small_data(), small_cfg())
        assert np.all(model.params() == 0)
        x = np.random.default_rng(0).uniform(-1, 1, (50, 2))
        np.testing.assert_array_equal(forward(model, x), x)

    def test_pair_count(self):
        data = synthesize("scurve", count=7, points=1000, noise=0.01, seed=0)
        _, batch = prepare(data, small_cfg())
        assert len(batch.x) + batch.dropped == 7000

    def test_endpoints_on_goal_are_dropped(self):
        # noise-free copies all end exactly on the goal; neighbours are one sample spacing away
        _, batch = prepare(synthesize("scurve", count=7, points=1000), small_cfg())
        assert batch.dropped == 7 and len(batch.x) == 6993

    def test_normalized_batch(self):
        model, batch = prepare(small_data(), small_cfg())
        assert np.all(np.abs(batch.x) <= 0.5 + 1e-12)
        assert np.all(np.linalg.norm(batch.x - model.goal_x, axis=1) > 1e-3)

    def test_same_seed_bitwise(self):
        m1, b1 = prepare(small_data(), small_cfg())
        m2, b2 = prepare(small_data(), small_cfg())
        assert json.dumps(m1.to_dict()) == json.dumps(m2.to_dict())
        assert b1.x.tobytes() == b2.x.tobytes() and b1.xdot.tobytes() == b2.xdot.tobytes()

    def test_all_points_at_goal(self):
        with pytest.raises(EmptyBatch):
            prepare(small_data(points=20), small_cfg(eps_goal=10.0))


class TestTrain:
    def test_identity_targets_stay_put(self):
        model, batch = prepare(small_data(), small_cfg())
        xdot = identity_targets(model, batch.x)
        report = train(model, (batch.x, xdot), small_cfg(epochs=30, l2_coeff=1e-8))
        assert report.losses[0] < 1e-20
        assert np.max(np.abs(model.params())) < 1e-12
        probe = np.random.default_rng(3).uniform(-0.5, 0.5, (100, 2))
        ref = DiffeoModel.create(2, K=4, m=40, seed=1, goal_x=model.goal_x)
        dev = eval_field(VelocityField(model), probe) - eval_field(VelocityField(ref), probe)
        assert np.max(np.abs(dev)) < 1e-6

    def test_stationary_at_identity(self):
        model, batch = prepare(small_data(), small_cfg())
        _, grad = loss_gradient(model, (batch.x, identity_targets(model, batch.x)), l2=0.0)
        assert np.linalg.norm(grad) < 1e-10

    def test_small_steps_never_increase_loss(self):
        model, batch = prepare(small_data(points=40), small_cfg())
        report = train(model, batch, small_cfg(epochs=50, learning_rate=1e-6))
        assert np.all(np.diff(report.losses) <= 0)

    def test_loss_decreases_and_report(self, tmp_path):
        model, batch = prepare(small_data(), small_cfg())
        out = tmp_path / "m.json"
        report = train(model, batch, small_cfg(epochs=40, learning_rate=3e-3),
                       log_path=tmp_path / "log.csv", model_path=out)
        assert len(report.losses) == 40 and np.all(np.isfinite(report.losses))
        assert report.final_data_loss < 0.5 * baseline_loss(batch.x, batch.xdot, model.goal_x)
        assert report.model_path == str(out) and out.exists()
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,grad_norm,wall_ms" and len(lines) == 41
        assert report.config["epochs"] == 40

    def test_minibatch(self):
        model, batch = prepare(small_data(), small_cfg())
        cfg = small_cfg(epochs=5, batch_size=64)
        report = train(model, batch, cfg)
        assert len(report.losses) == 5
        model2, batch2 = prepare(small_data(), small_cfg())
        train(model2, batch2, cfg)
        assert model.params().tobytes() == model2.params().tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_reports_epoch(self):
        model, batch = prepare(small_data(points=30), small_cfg())
        xdot = batch.xdot.copy()
        xdot[0, 0] = np.inf
        with pytest.raises(NonFinite) as info:
            train(model, (batch.x, xdot), small_cfg(epochs=3))
        assert info.value.epoch == 0

    def test_stable_at_every_stage(self):
        model, batch = prepare(small_data(), small_cfg())
        snapshots = {}

        def grab(epoch, m):
            if epoch == 10:
                snapshots[10] = DiffeoModel.from_dict(m.to_dict())

        train(model, batch, small_cfg(epochs=40, learning_rate=1e-2), callback=grab)
        starts = np.random.default_rng(7).uniform(-1.0, 1.0, (25, 2))
        for m in (snapshots[10], model):
            field = VelocityField(m)
            for ro in rollout_many(field, starts, dt=1e-3, max_steps=20_000):
                phi = field.potential.value(forward(m, ro.x))
                assert ro.converged and np.all(np.diff(phi) < 0)


@pytest.mark.slow
def test_l2_sensitivity_scurve():
    data = synthesize("scurve", count=5, points=500, noise=0.005, seed=0)
    curves = []
    for lam in (0.0, 1e-8):
        cfg = TrainConfig(epochs=100, l2_coeff=lam)
        model, batch = prepare(data, cfg)
        curves.append(np.array(train(model, batch, cfg).losses))
    assert np.max(np.abs(curves[0] - curves[1]) / curves[1]) < 1e-6


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = DiffeoModel.create(2, K=4, m=30, seed=5)
        model.set_params(np.random.default_rng(5).normal(0, 0.1, model.n_params))
        model.set_goal([0.1, -0.2])
        save_checkpoint(model, tmp_path / "c.json")
        back = load_checkpoint(tmp_path / "c.json")
        probe = np.random.default_rng(6).uniform(-1, 1, (100, 2))
        a = eval_field(VelocityField(model), probe)
        b = eval_field(VelocityField(back), probe)
        assert a.tobytes() == b.tobytes()

    def test_flipped_mask_length(self, tmp_path):
        model = DiffeoModel.create(2, K=2, m=5)
        d = model.to_dict()
        d["layers"][0]["mask"] = d["layers"][0]["mask"] + [1]
        (tmp_path / "c.json").write_text(json.dumps(d))
        with pytest.raises(DimensionMismatch):
            load_checkpoint(tmp_path / "c.json")

    def test_resume_equals_straight_run(self, tmp_path):
        data = small_data()
        straight, batch = prepare(data, small_cfg())
        train(straight, batch, small_cfg(epochs=100))

        first, batch = prepare(data, small_cfg())
        ck = tmp_path / "ck.json"
        train(first, batch, small_cfg(epochs=50), model_path=ck)
        model, adam, epoch = load_training_state(ck)
        assert epoch == 50 and adam.step == 50
        train(model, batch, small_cfg(epochs=100), adam=adam, start_epoch=epoch)
        assert model.params().tobytes() == straight.params().tobytes()

    def test_periodic_checkpoints(self, tmp_path):
        model, batch = prepare(small_data(), small_cfg())
        ck = tmp_path / "ck.json"
        train(model, batch, small_cfg(epochs=7), checkpoint_path=ck, checkpoint_every=3)
        assert json.loads(ck.read_text())["epoch"] == 6
