"""Adam, the learning-rate schedule, and the training loop."""

import numpy as np
import pytest

from dgatt.data import RGBDSample
from dgatt.model import Model, toy_config
from dgatt.optim import (
    AdamState,
    TrainConfig,
    adam_step,
    lr_schedule,
    read_metrics,
    train,
    write_metrics,
)
from dgatt.tensor import Tensor


def make_params(values):
    return [(f"p{i}", Tensor(np.array(v), requires_grad=True))
            for i, v in enumerate(values)]


class TestAdam:
    def test_zero_gradient_fresh_state_no_change(self):
        params = make_params([[1.0, -2.0]])
        state = AdamState(params)
        before = params[0][1].data.copy()
        adam_step(state, params, {"p0": np.zeros(2)}, lr=1e-3)
        assert np.array_equal(params[0][1].data, before)

    def test_first_step_magnitude_is_lr(self):
        # closed form: m_hat = g, v_hat = g^2 -> step = lr * g/(|g| + eps)
        params = make_params([[5.0]])
        state = AdamState(params)
        adam_step(state, params, {"p0": np.ones(1)}, lr=1e-3)
        change = 5.0 - params[0][1].data[0]
        assert change == pytest.approx(1e-3, rel=1e-6)

    def test_identical_gradients_update_identically(self):
        params = make_params([[1.0], [1.0]])
        state = AdamState(params)
        g = np.array([0.37])
        adam_step(state, params, {"p0": g, "p1": g.copy()}, lr=1e-2)
        assert np.array_equal(params[0][1].data, params[1][1].data)

    def test_lr_zero_is_identity(self):
        params = make_params([[3.0, 4.0]])
        state = AdamState(params)
        before = params[0][1].data.copy()
        adam_step(state, params, {"p0": np.array([1.0, -2.0])}, lr=0.0)
        assert np.array_equal(params[0][1].data, before)

    def test_shape_mismatch(self):
        params = make_params([[1.0, 2.0]])
        state = AdamState(params)
        with pytest.raises(Exception, match="shape"):
            adam_step(state, params, {"p0": np.zeros(3)}, lr=1e-3)


class TestSchedule:
    def test_pinned_values(self):
        cfg = TrainConfig()
        assert lr_schedule(cfg, 0) == pytest.approx(1e-5)
        assert lr_schedule(cfg, 1) == pytest.approx(9e-6)
        assert lr_schedule(cfg, 2) == pytest.approx(8.1e-6)

    def test_strictly_decreasing(self):
        cfg = TrainConfig(decay=0.95)
        rates = [lr_schedule(cfg, e) for e in range(10)]
        assert all(a > b for a, b in zip(rates, rates[1:]))

    def test_invalid_cfg(self):
        with pytest.raises(ValueError):
            TrainConfig(lr0=0.0)
        with pytest.raises(ValueError):
            TrainConfig(decay=1.5)


def tiny_samples(n_ids=2, per_id=2, extent=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for identity in range(n_ids):
        base_rgb = rng.random((extent, extent, 3), dtype=np.float32)
        base_g = rng.random((extent, extent, 1), dtype=np.float32)
        for _ in range(per_id):
            out.append(RGBDSample(rgb=base_rgb, guidance=base_g,
                                  identity=identity, variation="neutral"))
    return out


def tiny_model(num_classes=2, seed=0):
    cfg = toy_config(num_classes=num_classes, seed=seed)
    from dataclasses import replace
    from dgatt.backbone import BackboneConfig
    return Model(replace(cfg,
                         backbone=BackboneConfig(input_extent=16, block_widths=(4, 8),
                                                 convs_per_block=(1, 1)),
                         pooling=replace(cfg.pooling, pooled_channels=4, shared_width=8),
                         classifier_hidden=16, aux_hidden=16))


class TestTrain:
    def test_single_sample_memorization(self):
        samples = tiny_samples(n_ids=2, per_id=1)[:2]
        model = tiny_model()
        history = train(model, samples, TrainConfig(lr0=3e-3, epochs=30, batch_size=2, seed=0))
        assert history[-1].train_acc == 1.0

    def test_fixed_seed_bit_identical_trace(self, tmp_path):
        def run(path):
            model = tiny_model(seed=5)
            history = train(model, tiny_samples(seed=3),
                            TrainConfig(lr0=1e-3, epochs=3, batch_size=3, seed=7),
                            metrics_path=path)
            return path.read_bytes(), history

        b1, h1 = run(tmp_path / "m1.csv")
        b2, h2 = run(tmp_path / "m2.csv")
        assert b1 == b2
        assert [r.loss_total for r in h1] == [r.loss_total for r in h2]

    def test_loss_decreases_by_epoch_five(self):
        model = tiny_model(num_classes=3)
        history = train(model, tiny_samples(n_ids=3, per_id=4),
                        TrainConfig(lr0=1e-3, epochs=6, batch_size=4, seed=1))
        assert history[5].loss_total < history[0].loss_total
        assert all(np.isfinite(r.loss_total) for r in history)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train(tiny_model(), [], TrainConfig())

    def test_label_out_of_range_rejected(self):
        samples = tiny_samples(n_ids=3, per_id=1)
        with pytest.raises(ValueError, match="range"):
            train(tiny_model(num_classes=2), samples, TrainConfig())

    def test_metrics_csv_columns(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "metrics.csv"
        train(model, tiny_samples(), TrainConfig(lr0=1e-3, epochs=2, batch_size=4),
              metrics_path=path)
        rows = read_metrics(path)
        assert list(rows[0].keys()) == ["epoch", "lr", "loss_total", "loss_rgb",
                                        "loss_guidance", "loss_attention", "train_acc"]
        assert len(rows) == 2
        assert rows[0]["loss_rgb"] != ""  # proposed variant has modality loss

    def test_metrics_empty_fields_without_modality_loss(self, tmp_path):
        from dataclasses import replace
        from dgatt.backbone import BackboneConfig
        cfg = toy_config(num_classes=2, variant="baseline")
        cfg = replace(cfg, backbone=BackboneConfig(input_extent=16, block_widths=(4, 8),
                                                   convs_per_block=(1, 1)),
                      classifier_hidden=16)
        path = tmp_path / "metrics.csv"
        train(Model(cfg), tiny_samples(), TrainConfig(lr0=1e-3, epochs=1, batch_size=4),
              metrics_path=path)
        row = read_metrics(path)[0]
        assert row["loss_rgb"] == "" and row["loss_guidance"] == ""
        assert row["loss_attention"] == ""
        assert row["loss_total"] != ""
