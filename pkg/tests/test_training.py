import json

import numpy as np
import pandas as pd
import pytest

from errors import CheckpointError, ConfigError, DatasetError, DimensionError, TrainingError
from model import ModelConfig, PoeModel
from synthgen import SynthConfig, generate
from training import (
    AdamOptimizer,
    AnnealSchedule,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    write_gradient_norms,
    write_loss_trace,
)


@pytest.fixture(scope="module")
def synthetic():
    return generate(SynthConfig(
        n_users=120, n_items=[20, 15], latent_dim=3, mean_interactions=4.0,
        missing_domain_fraction=0.3, seed=3,
    ))


@pytest.fixture
def model(synthetic):
    return PoeModel.initialize(synthetic.item_counts, ModelConfig(latent_dim=4, hidden_dims=[16], seed=1))


class TestAnnealSchedule:
    def test_endpoints(self):
        schedule = AnnealSchedule(cap=0.2, total_steps=100)
        assert schedule.beta(0) == 0.0
        assert schedule.beta(50) == pytest.approx(0.1)
        assert schedule.beta(100) == pytest.approx(0.2)
        assert schedule.beta(10_000) == pytest.approx(0.2)

    def test_nondecreasing_and_bounded(self):
        schedule = AnnealSchedule(cap=0.7, total_steps=37)
        betas = [schedule.beta(s) for s in range(100)]
        assert all(a <= b for a, b in zip(betas, betas[1:]))
        assert max(betas) <= 0.7

    def test_cap_validated(self):
        with pytest.raises(ValueError):
            AnnealSchedule(cap=1.5, total_steps=10)


class TestTrainConfig:
    def test_epochs_required(self):
        with pytest.raises(ValueError):
            TrainConfig()

    def test_defaults(self):
        cfg = TrainConfig(epochs=3)
        assert cfg.batch_size == 500
        assert cfg.learning_rate == 1e-3
        assert cfg.anneal_cap == 0.2 and cfg.anneal_steps == 200000
        assert cfg.objective == "subsampled"

    def test_loss_config_defaults_to_unit_weights(self):
        assert TrainConfig(epochs=1).loss_config(3).domain_weights == [1.0, 1.0, 1.0]

    def test_weight_count_mismatch(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=1, domain_weights=[1.0]).loss_config(2)


class TestAdamOptimizer:
    def test_zero_gradient_step_leaves_parameters(self):
        params = {"w": np.array([1.0, -2.0])}
        optimizer = AdamOptimizer(params, learning_rate=0.1)
        optimizer.step({"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_moves_by_learning_rate(self):
        params = {"w": np.array([1.0, -2.0])}
        AdamOptimizer(params, learning_rate=0.1).step({"w": np.array([3.0, -0.5])})
        np.testing.assert_allclose(params["w"], [0.9, -1.9], rtol=1e-6)

    def test_missing_gradient_leaves_parameter(self):
        params = {"a": np.ones(2), "b": np.ones(2)}
        AdamOptimizer(params).step({"a": np.ones(2)})
        np.testing.assert_array_equal(params["b"], np.ones(2))

    def test_unknown_gradient(self):
        with pytest.raises(KeyError):
            AdamOptimizer({"a": np.ones(1)}).step({"b": np.ones(1)})


class TestTrain:
    def test_loss_decreases(self, model, synthetic):
        cfg = TrainConfig(epochs=15, batch_size=32, learning_rate=5e-3, anneal_steps=100, seed=2)
        result = train(model, synthetic, cfg)
        assert len(result.trace) == 15
        assert result.trace[-1].mean_loss < result.trace[0].mean_loss
        assert all(np.isfinite(row.mean_loss) for row in result.trace)
        assert result.step == 15 * 4

    def test_input_model_unchanged(self, model, synthetic):
        before = model.flat_parameters()
        train(model, synthetic, TrainConfig(epochs=1, batch_size=64))
        np.testing.assert_array_equal(model.flat_parameters(), before)

    def test_same_seed_same_parameters(self, model, synthetic):
        cfg = TrainConfig(epochs=2, batch_size=50, seed=7)
        a = train(model, synthetic, cfg).model.flat_parameters()
        b = train(model, synthetic, cfg).model.flat_parameters()
        np.testing.assert_array_equal(a, b)

    def test_different_seed_differs(self, model, synthetic):
        a = train(model, synthetic, TrainConfig(epochs=1, batch_size=50, seed=1)).model.flat_parameters()
        b = train(model, synthetic, TrainConfig(epochs=1, batch_size=50, seed=2)).model.flat_parameters()
        assert not np.array_equal(a, b)

    def test_zero_weight_domain_decoder_untouched(self, model, synthetic):
        cfg = TrainConfig(epochs=2, batch_size=60, domain_weights=[1.0, 0.0], track_gradient_norms=True)
        result = train(model, synthetic, cfg)
        for name, p in result.model.parameters().items():
            if name.startswith("decoder.1."):
                np.testing.assert_array_equal(p, model.parameters()[name])
        norms = {(r.epoch, r.domain): r.decoder_grad_norm for r in result.gradient_norms}
        assert norms[(1, 1)] == 0.0 and norms[(2, 1)] == 0.0
        assert norms[(1, 0)] > 0.0

    def test_joint_only_skips_partial_users(self, model, synthetic, caplog):
        result = train(model, synthetic, TrainConfig(epochs=1, batch_size=500, objective="joint_only"))
        assert result.step == 1
        assert "skipping" in caplog.text

    def test_item_count_mismatch(self, synthetic):
        other = PoeModel.initialize([20, 14], ModelConfig(latent_dim=2, hidden_dims=[4]))
        with pytest.raises(DimensionError):
            train(other, synthetic, TrainConfig(epochs=1))

    def test_user_without_domains_rejected(self, model, synthetic):
        broken = type(synthetic)(synthetic.user_keys, synthetic.domains, synthetic.presence.copy())
        broken.presence[0] = 0
        with pytest.raises(DatasetError):
            train(model, broken, TrainConfig(epochs=1))

    def test_on_epoch_callback(self, model, synthetic):
        seen = []
        train(model, synthetic, TrainConfig(epochs=2, batch_size=100), on_epoch=seen.append)
        assert [row.epoch for row in seen] == [1, 2]

    def test_non_finite_loss_aborts(self, model, synthetic, mocker):
        def nan_losses(model, batch, terms, cfg):
            return np.full(batch.size, np.nan), {}

        mocker.patch("training.batch_objective", side_effect=nan_losses)
        with pytest.raises(TrainingError) as info:
            train(model, synthetic, TrainConfig(epochs=2, batch_size=50))
        details = info.value.details
        assert details["epoch"] == 1 and details["step"] == 0
        assert len(details["users"]) == 10
        assert set(details["users"]) <= set(synthetic.user_keys)


def test_write_loss_trace(model, synthetic, tmp_path):
    result = train(model, synthetic, TrainConfig(epochs=2, batch_size=100, track_gradient_norms=True))
    trace = pd.read_csv(write_loss_trace(result.trace, tmp_path / "trace.csv"))
    assert list(trace.columns) == ["epoch", "step", "beta", "mean_loss"]
    assert trace["epoch"].tolist() == [1, 2]
    norms = pd.read_csv(write_gradient_norms(result.gradient_norms, tmp_path / "norms.csv"))
    assert list(norms.columns) == ["epoch", "domain", "decoder_grad_norm"]
    assert len(norms) == 4


class TestCheckpoint:
    def test_round_trip_is_exact(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "ckpt", step=12, domain_weights=[1.0, 2.0])
        loaded = load_checkpoint(tmp_path / "ckpt")
        np.testing.assert_array_equal(loaded.flat_parameters(), model.flat_parameters())
        assert loaded.item_counts == model.item_counts
        assert loaded.domain_ids == [0, 1]
        manifest = json.loads((tmp_path / "ckpt" / "checkpoint.json").read_text())
        assert manifest["step"] == 12 and manifest["domain_weights"] == [1.0, 2.0]

    def test_tensor_files_are_little_endian_float64(self, model, tmp_path):
        save_checkpoint(model, tmp_path)
        raw = np.fromfile(tmp_path / "decoder.0.1.bias.f64", dtype="<f8")
        np.testing.assert_array_equal(raw, model.parameters()["decoder.0.1.bias"])

    def test_domain_count_mismatch(self, model, tmp_path):
        save_checkpoint(model, tmp_path)
        path = tmp_path / "checkpoint.json"
        manifest = json.loads(path.read_text())
        manifest["n_domains"] = 1
        manifest["item_counts"] = manifest["item_counts"][:1]
        manifest["domain_ids"] = [0]
        path.write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError, match="tensors"):
            load_checkpoint(tmp_path)

    def test_truncated_tensor_named(self, model, tmp_path):
        save_checkpoint(model, tmp_path)
        path = tmp_path / "encoder.1.0.weight.f64"
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="encoder.1.0.weight"):
            load_checkpoint(tmp_path)

    def test_missing_tensor_file(self, model, tmp_path):
        save_checkpoint(model, tmp_path)
        (tmp_path / "decoder.1.0.bias.f64").unlink()
        with pytest.raises(CheckpointError, match="decoder.1.0.bias"):
            load_checkpoint(tmp_path)

    def test_corrupt_manifest(self, model, tmp_path):
        save_checkpoint(model, tmp_path)
        (tmp_path / "checkpoint.json").write_text("{not json")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)

    def test_malformed_manifest_sizes(self, model, tmp_path):
        save_checkpoint(model, tmp_path)
        path = tmp_path / "checkpoint.json"
        manifest = json.loads(path.read_text())
        manifest["latent_dim"] = "x"
        path.write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError, match="malformed"):
            load_checkpoint(tmp_path)
