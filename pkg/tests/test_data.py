"""Depth normalization, PNM codecs, the synthetic generator, and protocols."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgatt import pnm
from dgatt.data import (
    DataError,
    SynthConfig,
    load_manifest,
    nonbackground_mask,
    normalize_depth,
    split_protocol,
    synth_generate,
)


class TestNormalizeDepth:
    def test_boundaries(self):
        out = normalize_depth(np.array([50, 200]), 50, 200)
        assert out[0] == 0.0
        assert out[1] == 1.0

    def test_midpoint(self):
        assert normalize_depth(np.array([125]), 50, 200)[0] == pytest.approx(0.5)

    def test_outside_clipped_to_zero(self):
        out = normalize_depth(np.array([300, 10]), 50, 200)
        assert np.array_equal(out, [0.0, 0.0])

    def test_invalid_planes(self):
        with pytest.raises(ValueError):
            normalize_depth(np.array([1]), 200, 50)

    @given(st.lists(st.integers(min_value=50, max_value=200), min_size=2, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_monotone_on_range(self, values):
        arr = np.sort(np.array(values))
        out = normalize_depth(arr, 50, 200)
        assert np.all(np.diff(out) >= 0)


class TestPnm:
    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        pnm.write_ppm(path, img)
        assert np.array_equal(pnm.read_ppm(path), img)

    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(5, 11), dtype=np.uint8)
        path = tmp_path / "x.pgm"
        pnm.write_pgm(path, img)
        assert np.array_equal(pnm.read_pgm(path), img)

    def test_16bit_pgm_big_endian(self, tmp_path):
        path = tmp_path / "deep.pgm"
        values = np.array([[1000, 0], [65535, 256]], dtype=np.uint16)
        body = values.astype(">u2").tobytes()
        path.write_bytes(b"P5\n2 2\n65535\n" + body)
        assert np.array_equal(pnm.read_pgm(path), values)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P3\n1 1\n255\n0")
        with pytest.raises(pnm.PnmError, match="magic"):
            pnm.read_pnm(path)


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    cfg = SynthConfig(ids=4, per_id=6, extent=32, seed=11)
    manifest_path = synth_generate(cfg, root)
    manifest, samples = load_manifest(manifest_path)
    return root, manifest, samples


class TestSynth:
    def test_sample_count(self, small_set):
        _, manifest, samples = small_set
        assert len(samples) == 4 * 6
        assert len(manifest.entries) == 24

    def test_byte_identical_regeneration(self, tmp_path):
        cfg = SynthConfig(ids=2, per_id=4, extent=24, seed=5)
        p1 = synth_generate(cfg, tmp_path / "a")
        p2 = synth_generate(cfg, tmp_path / "b")
        for e1, e2 in zip(load_manifest(p1)[0].entries, load_manifest(p2)[0].entries):
            assert (tmp_path / "a" / e1.rgb_path).read_bytes() == \
                (tmp_path / "b" / e2.rgb_path).read_bytes()
            assert (tmp_path / "a" / e1.guidance_path).read_bytes() == \
                (tmp_path / "b" / e2.guidance_path).read_bytes()
        assert p1.read_text() == p2.read_text()

    def test_values_in_unit_range(self, small_set):
        _, _, samples = small_set
        for s in samples[:6]:
            assert s.rgb.min() >= 0.0 and s.rgb.max() <= 1.0
            assert s.guidance.min() >= 0.0 and s.guidance.max() <= 1.0

    def test_illumination_guidance_matches_neutral_base(self, tmp_path):
        cfg = SynthConfig(ids=2, per_id=8, extent=24, seed=9,
                          mix={"neutral": 0.5, "illumination": 0.5})
        manifest_path = synth_generate(cfg, tmp_path)
        manifest, samples = load_manifest(manifest_path)
        for identity in (0, 1):
            base = next(s for s in samples
                        if s.identity == identity and s.variation == "neutral")
            for s in samples:
                if s.identity == identity and s.variation == "illumination":
                    assert np.array_equal(s.guidance, base.guidance)

    def test_identities_differ_in_guidance(self, small_set):
        _, _, samples = small_set
        bases = {}
        for s in samples:
            if s.variation == "neutral" and s.identity not in bases:
                bases[s.identity] = s.guidance
        ids = sorted(bases)
        for a in ids:
            for b in ids:
                if a < b:
                    assert np.max(np.abs(bases[a] - bases[b])) > 0.0

    def test_face_mask_nonempty_interior(self, small_set):
        _, _, samples = small_set
        mask = nonbackground_mask(samples[0])
        frac = mask.mean()
        assert 0.2 < frac < 0.95
        assert mask[16, 16]  # center pixel is on the face

    def test_thermal_channel_differs_from_depth(self, tmp_path):
        base = SynthConfig(ids=2, per_id=2, extent=24, seed=3)
        thermal = SynthConfig(ids=2, per_id=2, extent=24, seed=3, guidance="thermal")
        _, s_depth = load_manifest(synth_generate(base, tmp_path / "d"))
        _, s_thermal = load_manifest(synth_generate(thermal, tmp_path / "t"))
        assert s_depth[0].guidance.shape == s_thermal[0].guidance.shape
        assert np.max(np.abs(s_depth[0].guidance - s_thermal[0].guidance)) > 0.0

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SynthConfig(ids=1, per_id=5)
        with pytest.raises(ValueError):
            SynthConfig(mix={"neutral": 0.5, "pose": 0.6})
        with pytest.raises(ValueError):
            SynthConfig(guidance="sonar")


class TestManifest:
    def test_round_trip_quantized_rasters(self, small_set):
        root, manifest, samples = small_set
        e = manifest.entries[0]
        raw_rgb = pnm.read_ppm(root / e.rgb_path)
        assert np.array_equal(np.rint(samples[0].rgb * 255.0).astype(np.uint8), raw_rgb)

    def test_empty_manifest_rejected(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("# nothing here\n")
        with pytest.raises(DataError, match="empty"):
            load_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_manifest(tmp_path / "nope.tsv")

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("0\tneutral\ta.ppm\n")
        with pytest.raises(DataError, match=":1"):
            load_manifest(path)

    def test_bad_variation_rejected(self, tmp_path):
        path = tmp_path / "manifest.tsv"
        path.write_text("0\tgrimace\ta.ppm\tb.pgm\n")
        with pytest.raises(DataError, match="variation"):
            load_manifest(path)

    def test_noncontiguous_ids_remapped(self, tmp_path):
        cfg = SynthConfig(ids=2, per_id=2, extent=24, seed=1)
        manifest_path = synth_generate(cfg, tmp_path)
        text = manifest_path.read_text().replace("\n1\t", "\n7\t")
        manifest_path.write_text(text)
        manifest, samples = load_manifest(manifest_path)
        assert manifest.remapped == {0: 0, 7: 1}
        assert sorted({s.identity for s in samples}) == [0, 1]


class TestProtocol:
    def test_neutral_gallery_counts(self, tmp_path):
        cfg = SynthConfig(ids=4, per_id=8, extent=24, seed=2,
                          mix={"neutral": 0.25, "pose": 0.375, "occlusion": 0.375})
        _, samples = load_manifest(synth_generate(cfg, tmp_path))
        split = split_protocol(samples, "neutral-gallery")
        assert len(split.gallery) == 4 * 2
        assert sum(len(v) for v in split.probes.values()) == 4 * 6
        assert set(split.probes) == {"pose", "occlusion"}

    def test_gallery_probe_disjoint(self, small_set):
        _, _, samples = small_set
        split = split_protocol(samples, "neutral-gallery")
        gallery = set(split.gallery)
        for idxs in split.probes.values():
            assert gallery.isdisjoint(idxs)

    def test_probe_sets_filter_by_variation(self, small_set):
        _, _, samples = small_set
        split = split_protocol(samples, "neutral-gallery")
        for variation, idxs in split.probes.items():
            assert all(samples[i].variation == variation for i in idxs)

    def test_identity_without_neutral_rejected(self, small_set):
        _, _, samples = small_set
        trimmed = [s for s in samples if not (s.identity == 0 and s.variation == "neutral")]
        with pytest.raises(DataError, match="neutral"):
            split_protocol(trimmed, "neutral-gallery")

    def test_ratio_split_seeded(self, small_set):
        _, _, samples = small_set
        s1 = split_protocol(samples, "ratio", ratio=0.5, seed=4)
        s2 = split_protocol(samples, "ratio", ratio=0.5, seed=4)
        assert s1.gallery == s2.gallery and s1.probes == s2.probes
        gallery = set(s1.gallery)
        for idxs in s1.probes.values():
            assert gallery.isdisjoint(idxs)
