"""Tests for the loss, Adam, the training loop, parameter counts and checkpoints."""
import time

import numpy as np
import pytest

from conftest import random_snapshots
from gallat.autodiff import Node, backward, numerical_gradient, relative_error
from gallat.checkpoint import load_checkpoint, save_checkpoint
from gallat.config import TrainConfig
from gallat.data_pipeline import SynthConfig, synth_generate
from gallat.ddw_graph import GridSpec
from gallat.errors import ContractError, DataFormatError, InsufficientHistoryError
from gallat.evaluation import evaluate_ha, evaluate_model, split
from gallat.features import FeatureConfig, FeatureScaler
from gallat.model import GallatModel, param_shapes
from gallat.temporal_attention import min_history
from gallat.training import (
    JOINT,
    PRETRAIN,
    Adam,
    ModelState,
    attention_param_formula,
    batch_gradient,
    compute_d_max,
    count_params,
    loss,
    target_loss,
    train,
    write_history_csv,
    write_loss_csv,
)
from gallat.transfer_attention import TransferOutput

# 7 days of 4 slots: 11 training, 4 validation and 4 test targets with P = 2
WEEK_SLOTS = 28


@pytest.fixture
def week(rng, grid):
    return random_snapshots(rng, grid.n, WEEK_SLOTS)


def fixed_output(d_norm, G, D_max):
    d_norm = np.asarray(d_norm, dtype=np.float64).reshape(-1, 1)
    G = np.asarray(G, dtype=np.float64)
    return TransferOutput(
        Node.constant(d_norm), Node.constant(d_norm * D_max), Node.constant(np.zeros_like(G)), Node.constant(G)
    )


def losses(history):
    return [(row.epoch, row.phase, row.train_loss, row.val_loss) for row in history]


class TestLoss:
    def test_perfect_prediction(self):
        G = np.array([[1.0, 3.0], [0.0, 2.0]])
        d = G.sum(axis=1)
        assert loss(fixed_output(d / 4.0, G, 4.0), d, G, 0.8, 0.2, 4.0).item() == 0.0

    def test_demand_only(self):
        G = np.array([[1.0, 3.0], [0.0, 2.0]])
        pred = fixed_output([0.5, 0.1], np.zeros((2, 2)), 4.0)
        demand = loss(pred, G.sum(axis=1), G, 1.0, 0.0, 4.0).item()
        e = np.array([0.5 - 1.0, 0.1 - 0.5])
        assert demand == pytest.approx(np.mean(0.5 * e * e), abs=1e-15)
        assert loss(pred, G.sum(axis=1), G, 0.8, 0.0, 4.0).item() == pytest.approx(0.8 * demand, abs=1e-15)

    def test_weighted_sum(self):
        # demand error 0.2 everywhere after scaling -> 0.02; od error 1.0 -> 0.5
        pred = fixed_output([0.2, 0.2], [[4.0, 4.0], [4.0, 4.0]], 4.0)
        value = loss(pred, [0.0, 0.0], np.zeros((2, 2)), 0.5, 0.5, 4.0).item()
        assert value == pytest.approx(0.5 * 0.02 + 0.5 * 0.5)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self, rng):
        params = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=(3, 1))}
        before = {k: v.copy() for k, v in params.items()}
        adam = Adam(params)
        adam.step({k: np.zeros_like(v) for k, v in params.items()})
        for k in params:
            assert np.array_equal(params[k], before[k])
        assert adam.t == 1

    def test_first_step_moves_by_learning_rate(self):
        params = {"w": np.array([[1.0, -1.0]])}
        Adam(params, lr=0.1).step({"w": np.array([[2.0, -3.0]])})
        assert np.allclose(params["w"], [[0.9, -0.9]], atol=1e-7)


class TestGradients:
    def test_full_loss_every_parameter(self, micro_model, snapshots):
        series = micro_model.series(snapshots)
        target = micro_model.history_needed + 1

        def value():
            return target_loss(micro_model, series, target, 0.8, 0.2).item()

        grads = backward(target_loss(micro_model, series, target, 0.8, 0.2), micro_model.params)
        for name, array in micro_model.params.items():
            numeric = numerical_gradient(value, array)
            assert relative_error(grads[name], numeric, floor=1e-6) < 1e-4, name

    @pytest.mark.parametrize("layout", [("semantic", "attention"), ("gat", "attention"), ("ddw", "dense")])
    def test_full_loss_variants(self, layout, micro_config, micro_features, grid, snapshots):
        spatial_layer, transfer_layer = layout
        cfg = micro_config.model_copy(update={"spatial_layer": spatial_layer, "transfer_layer": transfer_layer})
        scaler = FeatureScaler.fit(grid.n_rows, grid.n_cols, snapshots)
        model = GallatModel.initialize(cfg, micro_features, grid, scaler, 8.0, np.random.default_rng(7))
        series = model.series(snapshots)
        target = model.history_needed + 1

        def value():
            return target_loss(model, series, target, 0.8, 0.2).item()

        grads = backward(target_loss(model, series, target, 0.8, 0.2), model.params)
        for name, array in model.params.items():
            numeric = numerical_gradient(value, array)
            assert relative_error(grads[name], numeric, floor=1e-6) < 1e-4, name

    def test_embedding_rows_get_gradients(self, micro_model, week):
        series = micro_model.series(week)
        targets = micro_model.valid_targets(0, len(week))
        _, grads = batch_gradient(micro_model, series, targets, 0.8, 0.2)
        tables = [f"features.{t}" for t in ("node_table", "slot_table", "dow_table")]
        for name in tables:
            assert (np.abs(grads[name]).sum(axis=1) > 0).all(), name
        before = {name: micro_model.params[name].copy() for name in tables}
        Adam(micro_model.params).step(grads)
        for name in tables:
            assert (np.abs(micro_model.params[name] - before[name]).sum(axis=1) > 0).all(), name

    def test_micro_dimensions(self, micro_model):
        assert micro_model.fcfg.d == 10
        assert micro_model.fcfg.d_v == 8
        assert micro_model.history_needed == 8


class TestParamCount:
    def make_state(self, cfg, fcfg, grid, rng):
        params = {name: rng.normal(size=shape) for name, shape in param_shapes(cfg, fcfg, grid.n).items()}
        return ModelState(
            config=cfg, features=fcfg, grid=grid, scaler=FeatureScaler(n_rows=grid.n_rows, n_cols=grid.n_cols),
            D_max=1.0, params=params, adam_m={}, adam_v={}, rng_state={},
        )

    def test_counts_match_enumeration(self, micro_config, micro_features, grid, rng):
        state = self.make_state(micro_config, micro_features, grid, rng)
        counts = count_params(state)
        stored = sum(v.size for v in state.params.values())
        assert counts["total"] == stored
        assert counts["embeddings"] == sum(v.size for k, v in state.params.items() if k.startswith("features."))
        assert counts["attention_total"] == counts["attention_formula"]

    def test_formula_random_configs(self, grid):
        rng = np.random.default_rng(3)
        for _ in range(5):
            cfg = TrainConfig(d_e=int(rng.integers(1, 9)), P=1)
            fcfg = FeatureConfig(
                node_embed_dim=int(rng.integers(0, 6)), slot_embed_dim=int(rng.integers(0, 6)),
                dow_embed_dim=int(rng.integers(0, 6)), l=4,
            )
            state = self.make_state(cfg, fcfg, grid, rng)
            counts = count_params(state)
            assert counts["attention_total"] == attention_param_formula(cfg.d_e, fcfg.d_v, fcfg.d, grid.n)

    @pytest.mark.parametrize("spatial_layer,segments", [("ddw", 4), ("semantic", 3), ("gat", 1)])
    @pytest.mark.parametrize("transfer_layer", ["attention", "dense"])
    def test_formula_variants(self, spatial_layer, segments, transfer_layer, micro_features, grid, rng):
        cfg = TrainConfig(d_e=3, P=1, spatial_layer=spatial_layer, transfer_layer=transfer_layer)
        counts = count_params(self.make_state(cfg, micro_features, grid, rng))
        assert counts["attention_total"] == counts["attention_formula"]
        assert counts["attention_formula"] == attention_param_formula(
            3, micro_features.d_v, micro_features.d, grid.n, segments, transfer_layer
        )

    def test_dense_transfer_grows_with_the_city(self):
        small = attention_param_formula(16, 26, 28, 100, transfer_layer="dense")
        large = attention_param_formula(16, 26, 28, 400, transfer_layer="dense")
        assert large - small == 300 * (64 + 2)
        assert attention_param_formula(16, 26, 28, 400) - attention_param_formula(16, 26, 28, 100) == 300

    def test_default_configuration(self):
        assert attention_param_formula(16, 26, 28, 400) == 54896
        assert 176 * 16 * 16 / 54896 > 0.8

    def test_doubling_width_roughly_quadruples(self):
        small = attention_param_formula(16, 26, 28, 400)
        large = attention_param_formula(32, 26, 28, 400)
        assert 3.5 < large / small < 4.0


class TestTrain:
    def test_history_layout(self, week, micro_config, grid):
        result = train(week, micro_config, grid, l=4)
        phases = [(row.phase, row.epoch) for row in result.history]
        assert phases == [(PRETRAIN, 0), (PRETRAIN, 1), (PRETRAIN, 2), (JOINT, 0), (JOINT, 1), (JOINT, 2)]
        assert result.state.phase == JOINT
        assert all(np.isfinite(row.train_loss) and np.isfinite(row.val_loss) for row in result.history)

    def test_deterministic(self, week, micro_config, grid, tmp_path):
        first = train(week, micro_config, grid, l=4)
        second = train(week, micro_config, grid, l=4)
        assert losses(first.history) == losses(second.history)
        save_checkpoint(tmp_path / "a.zip", first.state)
        save_checkpoint(tmp_path / "b.zip", second.state)
        assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()

    def test_thread_count_does_not_change_results(self, week, micro_config, grid):
        serial = train(week, micro_config, grid, l=4)
        threaded = train(week, micro_config.model_copy(update={"threads": 3}), grid, l=4)
        assert losses(serial.history) == losses(threaded.history)
        for name, value in serial.state.params.items():
            assert np.array_equal(value, threaded.state.params[name]), name

    def test_seed_changes_results(self, week, micro_config, grid):
        a = train(week, micro_config, grid, l=4)
        b = train(week, micro_config.model_copy(update={"seed": 1}), grid, l=4)
        assert losses(a.history) != losses(b.history)

    def test_insufficient_history(self, rng, micro_config, grid):
        with pytest.raises(InsufficientHistoryError):
            train(random_snapshots(rng, grid.n, 14), micro_config, grid, l=4)

    def test_one_slot_per_day_rejected(self, week, micro_config, grid):
        with pytest.raises(ContractError) as e:
            train(week, micro_config, grid, l=1)
        assert "subsequent-slot" in str(e.value)

    def test_d_max(self, week):
        assert compute_d_max(week) == max(int(g.out_degree().max()) for g in week)
        assert compute_d_max([]) == 1.0

    @pytest.mark.parametrize("update", [
        {"spatial_layer": "semantic"}, {"spatial_layer": "gat"}, {"transfer_layer": "dense"},
        {"spatial_layer": "gat", "transfer_layer": "dense"},
    ])
    def test_variants_train(self, update, week, micro_config, grid):
        result = train(week, micro_config.model_copy(update=update), grid, l=4)
        assert all(np.isfinite(row.train_loss) and np.isfinite(row.val_loss) for row in result.history)
        model = result.state.model()
        pred = model.forward(model.series(week), 20).to_prediction()
        assert np.allclose(pred.Q.sum(axis=1), 1.0)
        assert np.allclose(pred.G_hat.sum(axis=1), pred.d_hat)

    def test_loss_csv_is_reproducible(self, week, micro_config, grid, tmp_path):
        write_loss_csv(tmp_path / "a.csv", train(week, micro_config, grid, l=4).history)
        write_loss_csv(tmp_path / "b.csv", train(week, micro_config, grid, l=4).history)
        text = (tmp_path / "a.csv").read_text()
        assert text.splitlines()[0] == "epoch,phase,train_loss,val_loss"
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_history_csv(self, week, micro_config, grid, tmp_path):
        result = train(week, micro_config.model_copy(update={"pretrain_epochs": 0}), grid, l=4)
        write_history_csv(tmp_path / "log.csv", result.history)
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,phase,train_loss,val_loss,seconds"
        assert len(lines) == 1 + micro_config.epochs + 1


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, week, micro_config, grid, tmp_path):
        state = train(week, micro_config, grid, l=4).state
        save_checkpoint(tmp_path / "ckpt.zip", state)
        loaded = load_checkpoint(tmp_path / "ckpt.zip")
        for group in ("params", "adam_m", "adam_v"):
            original, restored = getattr(state, group), getattr(loaded, group)
            assert set(original) == set(restored)
            for name in original:
                assert np.array_equal(original[name], restored[name]), f"{group}/{name}"
        assert loaded.config == state.config
        assert loaded.D_max == state.D_max
        assert loaded.rng_state == state.rng_state
        save_checkpoint(tmp_path / "again.zip", loaded)
        assert (tmp_path / "again.zip").read_bytes() == (tmp_path / "ckpt.zip").read_bytes()

    def test_loaded_model_predicts_identically(self, week, micro_config, grid, tmp_path):
        state = train(week, micro_config, grid, l=4).state
        save_checkpoint(tmp_path / "ckpt.zip", state)
        model, restored = state.model(), load_checkpoint(tmp_path / "ckpt.zip").model()
        a = model.forward(model.series(week), 20).G_hat.value
        b = restored.forward(restored.series(week), 20).G_hat.value
        assert np.array_equal(a, b)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.zip")

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "bad.zip"
        path.write_text("not a zip")
        with pytest.raises(DataFormatError):
            load_checkpoint(path)


def fixture_config(**updates):
    base = dict(d_e=8, P=3, batch_size=24, epochs=30, pretrain_epochs=10, learning_rate=5e-3,
                test_days=14, val_fraction=0.1, threads=4)
    base.update(updates)
    return TrainConfig(**base)


def training_targets(n_slots, cfg, l):
    spec = split(n_slots, l, cfg.test_days, cfg.val_fraction)
    return len(range(min_history(cfg.P, l) + 1, spec.train.stop))


class TestPretraining:
    @pytest.fixture(scope="class")
    def small_city(self):
        grid = GridSpec(**{**SynthConfig().grid.model_dump(), "n_rows": 3, "n_cols": 3})
        return synth_generate(SynthConfig(grid=grid, days=14, seed=5))

    def test_full_batch_loss_decreases(self, small_city):
        # one full-batch step per epoch, so each logged loss is taken just before the next step
        l = small_city.meta.slots_per_day
        cfg = fixture_config(epochs=0, pretrain_epochs=10, learning_rate=1e-3, batch_size=1024, test_days=2)
        assert training_targets(len(small_city.snapshots), cfg, l) <= cfg.batch_size
        history = train(small_city.snapshots, cfg, small_city.meta.grid, l).history
        values = [row.train_loss for row in history if row.epoch > 0]
        assert len(values) == 10
        assert all(b < a for a, b in zip(values, values[1:]))


@pytest.mark.slow
class TestSyntheticFixture:
    @pytest.fixture(scope="class")
    def fixture(self):
        return synth_generate(SynthConfig(days=42, seed=11))

    def test_pretraining_lowers_joint_start_loss(self, fixture):
        grid, l = fixture.meta.grid, fixture.meta.slots_per_day
        with_pre = train(fixture.snapshots, fixture_config(epochs=1), grid, l).history
        without = train(fixture.snapshots, fixture_config(epochs=1, pretrain_epochs=0), grid, l).history

        def joint_start(history):
            return next(row.val_loss for row in history if row.phase == JOINT and row.epoch == 0)

        assert joint_start(with_pre) <= joint_start(without)

    def test_beats_history_average(self, fixture):
        grid, l = fixture.meta.grid, fixture.meta.slots_per_day
        cfg = fixture_config()
        started = time.perf_counter()
        state = train(fixture.snapshots, cfg, grid, l).state
        model = state.model()
        spec = split(len(fixture.snapshots), l, cfg.test_days, cfg.val_fraction)
        targets = model.valid_targets(spec.test.start, spec.test.stop)
        assert len(targets) == 14 * l
        ours = {r.task: r.flat() for r in evaluate_model(model, model.series(fixture.snapshots), targets)}
        elapsed = time.perf_counter() - started
        ha = {r.task: r.flat() for r in evaluate_ha(fixture.snapshots, targets, l, spec.test.start)}
        for task in ("od", "demand"):
            key = f"{task}.mape.0"
            assert ours[task][key] <= 0.9 * ha[task][key], task
        assert elapsed < 1800.0

    def test_epoch_time_scales_linearly(self, fixture):
        grid, l = fixture.meta.grid, fixture.meta.slots_per_day
        cfg = fixture_config(epochs=1, pretrain_epochs=0, threads=1)
        full, part = len(fixture.snapshots), 713
        assert training_targets(full, cfg, l) == pytest.approx(2 * training_targets(part, cfg, l), rel=0.01)

        def epoch_seconds(n_slots):
            history = train(fixture.snapshots[:n_slots], cfg, grid, l).history
            return next(row.seconds for row in history if row.epoch == 1)

        assert epoch_seconds(full) <= 2.5 * epoch_seconds(part)
