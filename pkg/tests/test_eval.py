"""Rank-1 evaluation, Grad-CAM, exports, and the ablation harness."""

from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgatt import pnm
from dgatt.data import ProtocolSplit, RGBDSample, SynthConfig, load_manifest, \
    split_protocol, synth_generate
from dgatt.eval import (
    AblationRow,
    EvalReport,
    ablate,
    export_attention,
    export_embeddings,
    grad_cam,
    rank1,
    write_ablation_table,
    write_eval_report,
)
from dgatt.model import Model, toy_config
from dgatt.optim import TrainConfig


@dataclass
class StubModel:
    """Fixed-logits stand-in for rank1 tests."""
    logits_fn: object

    def predict_logits(self, rgb, guidance=None):
        n = rgb.shape[0]
        return np.stack([self.logits_fn(i) for i in range(n)])


def fake_samples(n_ids=3, per_variation=4, variations=("pose", "occlusion")):
    rng = np.random.default_rng(0)
    samples = []
    for identity in range(n_ids):
        samples.append(RGBDSample(rng.random((8, 8, 3), dtype=np.float32),
                                  rng.random((8, 8, 1), dtype=np.float32),
                                  identity, "neutral"))
        for var in variations:
            for _ in range(per_variation):
                samples.append(RGBDSample(rng.random((8, 8, 3), dtype=np.float32),
                                          rng.random((8, 8, 1), dtype=np.float32),
                                          identity, var))
    return samples


def make_split(samples):
    return split_protocol(samples, "neutral-gallery")


class TestRank1:
    def test_oracle_model_scores_one(self):
        samples = fake_samples()
        split = make_split(samples)
        labels = {}
        for var, idxs in split.probes.items():
            for pos, i in enumerate(idxs):
                labels[(var, pos)] = samples[i].identity
        # the stub cannot see labels, so feed them per probe set via closure
        for var, idxs in split.probes.items():
            batch_labels = [samples[i].identity for i in idxs]
            model = StubModel(lambda i, bl=batch_labels: np.eye(3)[bl[i]])
            probes_only = ProtocolSplit(gallery=[], probes={var: idxs})
            report = rank1(model, probes_only, samples, batch_size=len(idxs))
            assert report.accuracy(var) == 1.0

    def test_constant_logits_pick_class_zero(self):
        samples = fake_samples()
        split = make_split(samples)
        model = StubModel(lambda i: np.zeros(3))
        report = rank1(model, split, samples)
        for var, idxs in split.probes.items():
            share = np.mean([samples[i].identity == 0 for i in idxs])
            assert report.accuracy(var) == pytest.approx(share)

    def test_average_is_unweighted_mean(self):
        report = EvalReport(per_set={"pose": (8, 10), "occlusion": (10, 10)})
        assert report.average == pytest.approx(0.9)

    @given(st.floats(min_value=0.1, max_value=10.0),
           st.floats(min_value=-5.0, max_value=5.0))
    @settings(max_examples=25, deadline=None)
    def test_argmax_invariance_under_increasing_transform(self, scale, shift):
        samples = fake_samples(n_ids=2, per_variation=2)
        split = make_split(samples)
        rng = np.random.default_rng(3)
        raw = {i: rng.normal(size=2) for i in range(len(samples))}

        def run(transform):
            idx_map = {}
            for var, idxs in split.probes.items():
                for pos, i in enumerate(idxs):
                    idx_map[i] = i
            model = StubModel(lambda i: transform(raw[i]))
            # identity order differs per batch; use batch of full probe sets
            return rank1(model, split, samples, batch_size=10**6)

        base = run(lambda x: x)
        scaled = run(lambda x: scale * x + shift)
        assert base.per_set == scaled.per_set

    def test_class_count_mismatch(self):
        samples = fake_samples(n_ids=3)
        split = make_split(samples)
        model = Model(toy_config(num_classes=2))
        with pytest.raises(ValueError, match="covers"):
            rank1(model, split, samples)

    def test_report_csv_format(self, tmp_path):
        report = EvalReport(per_set={"pose": (4, 5)})
        path = tmp_path / "report.csv"
        write_eval_report(path, report)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "probe_set,correct,total,accuracy"
        assert lines[1].startswith("pose,4,5,0.8")
        assert lines[-1].startswith("average")


@pytest.fixture(scope="module")
def toy_world(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalset")
    cfg = SynthConfig(ids=3, per_id=6, extent=64, seed=13,
                      mix={"neutral": 0.5, "pose": 0.5})
    _, samples = load_manifest(synth_generate(cfg, root))
    model = Model(toy_config(num_classes=3, seed=2))
    return model, samples


class TestGradCam:
    def test_values_normalized(self, toy_world):
        model, samples = toy_world
        heat = grad_cam(model, samples[0], 0)
        assert heat.values.shape == (8, 8)
        assert heat.values.min() >= 0.0 and heat.values.max() <= 1.0

    def test_zero_gradient_gives_zero_heatmap(self, toy_world):
        _, samples = toy_world
        model = Model(toy_config(num_classes=3, seed=2))
        for layer in model.classifier:
            layer.weight.data[:] = 0.0
            layer.bias.data[:] = 0.0
        heat = grad_cam(model, samples[0], 1)
        assert np.array_equal(heat.values, np.zeros((8, 8)))

    def test_upsample_extent(self, toy_world):
        model, samples = toy_world
        heat = grad_cam(model, samples[0], 0, upsample=True)
        assert heat.values.shape == (64, 64)

    def test_invalid_class(self, toy_world):
        model, samples = toy_world
        with pytest.raises(ValueError):
            grad_cam(model, samples[0], 99)


class TestExports:
    def test_attention_pgm_round_trip(self, toy_world, tmp_path):
        model, samples = toy_world
        path = tmp_path / "att.pgm"
        img = export_attention(model, samples[0], path)
        assert img.shape == (8, 8)
        assert np.array_equal(pnm.read_pgm(path), img)

    def test_attention_upsample(self, toy_world, tmp_path):
        model, samples = toy_world
        img = export_attention(model, samples[0], tmp_path / "att.pgm", upsample=True)
        assert img.shape == (64, 64)

    def test_uniform_attention_constant_pixels(self, tmp_path):
        model = Model(toy_config(num_classes=3, seed=2))
        rng = np.random.default_rng(0)
        sample = RGBDSample(rng.random((64, 64, 3), dtype=np.float32),
                            np.zeros((64, 64, 1), dtype=np.float32), 0, "neutral")
        # zero guidance + zero rgb would still vary; instead force constant
        # scores by zeroing the refinement conv
        model.refine.conv1x1.kernels.data[:] = 0.0
        model.refine.conv1x1.bias.data[:] = 0.0
        img = export_attention(model, sample, tmp_path / "flat.pgm")
        assert np.all(img == img.reshape(-1)[0])

    def test_variant_without_attention_rejected(self, tmp_path):
        model = Model(toy_config(num_classes=3, variant="baseline"))
        rng = np.random.default_rng(1)
        sample = RGBDSample(rng.random((64, 64, 3), dtype=np.float32),
                            rng.random((64, 64, 1), dtype=np.float32), 0, "neutral")
        with pytest.raises(ValueError, match="attention"):
            export_attention(model, sample, tmp_path / "x.pgm")

    def test_embeddings_shape_and_determinism(self, toy_world, tmp_path):
        model, samples = toy_world
        p1, p2 = tmp_path / "e1.csv", tmp_path / "e2.csv"
        n1 = export_embeddings(model, samples, p1)
        export_embeddings(model, samples, p2)
        assert n1 == len(samples)
        lines = p1.read_text().strip().splitlines()
        assert len(lines) == len(samples)
        first = lines[0].split(",")
        assert len(first) == 1 + model.cfg.classifier_hidden
        assert p1.read_bytes() == p2.read_bytes()


@pytest.fixture(scope="module")
def tiny_world(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablate")
    cfg = SynthConfig(ids=3, per_id=6, extent=32, seed=17,
                      mix={"neutral": 0.5, "pose": 0.5})
    _, samples = load_manifest(synth_generate(cfg, root))
    split = split_protocol(samples, "neutral-gallery")
    from dataclasses import replace
    from dgatt.backbone import BackboneConfig
    base = toy_config(num_classes=3, seed=0)
    base = replace(base, backbone=BackboneConfig(input_extent=32,
                                                 block_widths=(4, 8),
                                                 convs_per_block=(1, 1)),
                   pooling=replace(base.pooling, pooled_channels=4, shared_width=8),
                   classifier_hidden=16, aux_hidden=16)
    return base, samples, split


class TestAblate:
    def test_single_seed_zero_std_and_consistency(self, tiny_world):
        base, samples, split = tiny_world
        tc = TrainConfig(lr0=2e-3, decay=0.97, batch_size=8, epochs=4, seed=0)
        rows = ablate(base, samples, split, ["baseline"], [0], tc)
        assert all(r.std_acc == 0.0 for r in rows)
        assert all(r.seeds == 1 for r in rows)

        # direct run must agree with the table
        from dgatt.model import variant_config
        from dgatt.optim import train
        model = Model(variant_config(base, "baseline", seed=0))
        train(model, [samples[i] for i in split.gallery], tc)
        direct = rank1(model, split, samples)
        table = {r.probe_set: r.mean_acc for r in rows}
        for key in direct.per_set:
            assert direct.accuracy(key) == pytest.approx(table[key])

    def test_rerun_reproduces_table(self, tiny_world, tmp_path):
        base, samples, split = tiny_world
        tc = TrainConfig(lr0=2e-3, decay=0.97, batch_size=8, epochs=2, seed=0)
        rows1 = ablate(base, samples, split, ["baseline", "proposed"], [0, 1], tc)
        rows2 = ablate(base, samples, split, ["baseline", "proposed"], [0, 1], tc)
        p1, p2 = tmp_path / "a1.csv", tmp_path / "a2.csv"
        write_ablation_table(p1, rows1)
        write_ablation_table(p2, rows2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_requested_variants_present(self, tiny_world):
        base, samples, split = tiny_world
        tc = TrainConfig(lr0=2e-3, decay=0.97, batch_size=8, epochs=1, seed=0)
        rows = ablate(base, samples, split, ["baseline", "proposed"], [0], tc)
        assert {r.variant for r in rows} == {"baseline", "proposed"}

    def test_needs_a_seed(self, tiny_world):
        base, samples, split = tiny_world
        with pytest.raises(ValueError, match="seed"):
            ablate(base, samples, split, ["baseline"], [], TrainConfig())
