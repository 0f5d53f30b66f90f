import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import direct_convolution
from voicy.corpus import ToyCorpusSpec, load_manifest, make_toy_corpus
from voicy.dsp import Waveform
from voicy.scene import (
    SPEED_OF_SOUND,
    Rir,
    SamplerConfig,
    SceneError,
    ScenePlacement,
    ShoeboxRoom,
    SnrSampler,
    absorption_for_t60,
    apply_rir,
    build_dataset,
    derive_seed,
    draw_scene,
    estimate_snr,
    estimate_t60,
    fit_length,
    mix_at_snr,
    order_for_decay,
    render_scene,
    sabine_t60,
    schroeder_decay_db,
    simulate_rir,
    synthetic_babble,
)

FS = 24000


def tone(n=4800, seed=0):
    return Waveform(np.random.default_rng(seed).standard_normal(n))


# ---------------------------------------------------------------------------
# room simulation
# ---------------------------------------------------------------------------


class TestSimulateRir:
    def test_anechoic_one_metre(self):
        room = ShoeboxRoom((5, 4, 3), absorption=1.0, max_order=0)
        rir = simulate_rir(room, (2.0, 2.0, 1.5), (3.0, 2.0, 1.5), FS)
        assert np.count_nonzero(rir.taps) == 1
        assert rir.first_tap == 70
        assert abs(rir.taps[70] - 1 / (4 * math.pi)) <= 1e-12

    def test_full_absorption_ignores_order(self):
        # reflections are scaled by r = 0, so only the direct path survives
        room = ShoeboxRoom((5, 4, 3), absorption=1.0, max_order=5)
        assert np.count_nonzero(simulate_rir(room, (1, 1, 1), (2, 2, 2), FS).taps) == 1

    def test_mirror_symmetry(self):
        room = ShoeboxRoom((5, 4, 3), absorption=0.4, max_order=6)
        a = simulate_rir(room, (1.0, 1.5, 1.0), (2.0, 3.0, 2.0), FS)
        b = simulate_rir(room, (4.0, 1.5, 1.0), (3.0, 3.0, 2.0), FS)
        # image sums accumulate in a different order, so allow rounding
        np.testing.assert_allclose(a.taps, b.taps, rtol=0, atol=1e-15)

    def test_first_order_reflection(self):
        # floor image of a source at height 1 seen from height 1, 2 m away
        room = ShoeboxRoom((10, 10, 10), absorption=0.36, max_order=1)
        rir = simulate_rir(room, (4.0, 5.0, 1.0), (6.0, 5.0, 1.0), FS)
        d = math.sqrt(2.0**2 + 2.0**2)
        idx = round(d / SPEED_OF_SOUND * FS)
        assert rir.taps[idx] == pytest.approx(0.8 / (4 * math.pi * d))

    def test_direct_delay_random_scenes(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            dims = rng.uniform([3, 3, 2.4], [8, 8, 3.5])
            room = ShoeboxRoom(dims, rng.uniform(0.1, 1.0), max_order=3)
            src, mic = rng.uniform(0.1, dims - 0.1, size=(2, 3))
            expected = np.linalg.norm(src - mic) / SPEED_OF_SOUND * FS
            assert abs(simulate_rir(room, src, mic, FS).first_tap - expected) <= 1

    @pytest.mark.parametrize("src, mic", [((6, 1, 1), (1, 1, 1)), ((1, 1, 1), (1, 1, 0)), ((1, 1, 1), (1, 1, 1))])
    def test_invalid_positions(self, src, mic):
        with pytest.raises(SceneError):
            simulate_rir(ShoeboxRoom((5, 4, 3), 0.5, 2), src, mic, FS)

    def test_energy_decay_monotone(self):
        room = ShoeboxRoom((5, 4, 3), 0.3, 10)
        edc = schroeder_decay_db(simulate_rir(room, (1, 1, 1), (3, 2, 2), FS).taps)
        assert np.all(np.diff(edc) <= 1e-12)

    def test_t60_against_sabine_order_30(self):
        room = ShoeboxRoom((5, 4, 3), 0.3, 30)
        ratio = estimate_t60(simulate_rir(room, (1.2, 1.1, 1.3), (3.4, 2.7, 1.6), FS)) / sabine_t60(room)
        assert 0.65 <= ratio <= 1.35

    def test_order_for_decay_grows_with_t60(self):
        live = order_for_decay(ShoeboxRoom((5, 4, 3), 0.1))
        dead = order_for_decay(ShoeboxRoom((5, 4, 3), 0.5))
        assert live > dead > 0


class TestSabine:
    def test_inversion(self):
        dims = (5.0, 4.0, 3.0)
        alpha = absorption_for_t60(dims, 0.5)
        assert sabine_t60(ShoeboxRoom(dims, alpha)) == pytest.approx(0.5)

    def test_value(self):
        # V = 60, S = 94
        assert sabine_t60(ShoeboxRoom((5, 4, 3), 0.2)) == pytest.approx(0.161 * 60 / (94 * 0.2))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


class TestApplyRir:
    def test_identity(self):
        x = tone(500)
        y = apply_rir(x, Rir(np.array([1.0]), FS))
        np.testing.assert_allclose(y.samples, x.samples, atol=1e-12)

    def test_delay(self):
        x = tone(500)
        taps = np.zeros(101)
        taps[100] = 1.0
        y = apply_rir(x, Rir(taps, FS)).samples
        assert len(y) == 600
        np.testing.assert_allclose(y[100:], x.samples, atol=1e-12)
        np.testing.assert_allclose(y[:100], 0.0, atol=1e-12)

    def test_matches_direct_convolution(self):
        rng = np.random.default_rng(1)
        x = Waveform(rng.standard_normal(FS))
        taps = rng.standard_normal(2000)
        y = apply_rir(x, Rir(taps, FS)).samples
        ref = direct_convolution(x.samples, taps)
        assert np.max(np.abs(y - ref)) <= 1e-8 * np.max(np.abs(ref))

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
    def test_linearity(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((2, 300))
        rir = Rir(rng.standard_normal(50), FS)
        lhs = apply_rir(Waveform(a * x + b * y), rir).samples
        rhs = a * apply_rir(Waveform(x), rir).samples + b * apply_rir(Waveform(y), rir).samples
        np.testing.assert_allclose(lhs, rhs, atol=1e-8)

    def test_rate_mismatch(self):
        with pytest.raises(SceneError, match="sample-rate"):
            apply_rir(Waveform(np.ones(10), 16000), Rir(np.ones(3), FS))


# ---------------------------------------------------------------------------
# SNR
# ---------------------------------------------------------------------------


class TestMixAtSnr:
    def test_equal_power_zero_db(self):
        x = Waveform(np.array([1.0, -1.0, 1.0, -1.0]))
        res = mix_at_snr(x, Waveform(np.array([-1.0, 1.0, 1.0, -1.0])), 0.0)
        assert res.noise_scale == pytest.approx(1.0)
        assert res.achieved_snr_db == pytest.approx(0.0, abs=1e-12)

    def test_twenty_db_scale(self):
        x = Waveform(np.array([1.0, -1.0] * 4))
        res = mix_at_snr(x, Waveform(np.array([1.0, 1.0, -1.0, -1.0] * 2)), 20.0)
        assert res.noise_scale == pytest.approx(0.1)

    @settings(max_examples=40, deadline=None)
    @given(target=st.floats(-10, 40), seed=st.integers(0, 10_000), n_noise=st.integers(50, 3000))
    def test_achieved_matches_target(self, target, seed, n_noise):
        rng = np.random.default_rng(seed)
        signal = Waveform(rng.standard_normal(1000))
        noise = Waveform(rng.standard_normal(n_noise))
        res = mix_at_snr(signal, noise, target)
        assert abs(res.achieved_snr_db - target) <= 0.05
        assert abs(estimate_snr(signal, res.mixed) - target) <= 0.05

    def test_hardest_corpus_condition(self):
        signal, noise = tone(2000, 1), Waveform(synthetic_babble(700, FS, 3))
        res = mix_at_snr(signal, noise, -2.2)
        assert estimate_snr(signal, res.mixed) == pytest.approx(-2.2, abs=0.05)

    def test_tiles_short_noise(self):
        assert np.array_equal(fit_length(np.array([1.0, 2.0, 3.0]), 7), [1, 2, 3, 1, 2, 3, 1])

    @pytest.mark.parametrize("silent", ["signal", "noise"])
    def test_zero_power(self, silent):
        zero, live = Waveform(np.zeros(10)), tone(10)
        args = (zero, live) if silent == "signal" else (live, zero)
        with pytest.raises(SceneError, match="zero power"):
            mix_at_snr(*args, 5.0)


class TestEstimateSnr:
    def test_ten_db_loop(self):
        x = tone(3000, 4)
        mixed = mix_at_snr(x, tone(3000, 5), 10.0).mixed
        assert estimate_snr(x, mixed) == pytest.approx(10.0, abs=0.05)

    def test_noise_equals_clean(self):
        x = tone(100)
        assert estimate_snr(x, Waveform(2 * x.samples)) == pytest.approx(0.0, abs=1e-12)

    def test_infinite(self):
        with pytest.raises(SceneError, match="infinite SNR"):
            estimate_snr(tone(10), tone(10))

    def test_length_mismatch(self):
        with pytest.raises(SceneError, match="length"):
            estimate_snr(tone(10), tone(11))


# ---------------------------------------------------------------------------
# scenes and sampling
# ---------------------------------------------------------------------------


PLACEMENT = ScenePlacement((1.0, 1.0, 1.5), (4.0, 3.0, 1.0), (2.0, 3.5, 2.0), (2.0, 1.0, 1.5))


class TestRenderScene:
    speech = tone(4800, 7)
    external = Waveform(synthetic_babble(4800, FS, 8))

    def test_near_clean_scene(self):
        room = ShoeboxRoom((5, 4, 3), 1.0, 0)
        out = render_scene(room, PLACEMENT, self.speech, self.external, 60.0, 60.0, seed=1)
        rir = simulate_rir(room, PLACEMENT.speech_pos, PLACEMENT.mic_pos, FS)
        assert len(out) == len(self.speech) + len(rir.taps) - 1
        assert estimate_snr(apply_rir(self.speech, rir), out) >= 55.0

    def test_deterministic(self):
        room = ShoeboxRoom((5, 4, 3), 0.5, 4)
        a = render_scene(room, PLACEMENT, self.speech, self.external, 10.0, 5.0, seed=3)
        b = render_scene(room, PLACEMENT, self.speech, self.external, 10.0, 5.0, seed=3)
        assert np.array_equal(a.samples, b.samples)

    def test_white_noise_dominates(self):
        room = ShoeboxRoom((5, 4, 3), 0.5, 4)
        out = render_scene(room, PLACEMENT, self.speech, self.external, 5.0, 60.0, seed=2)
        reference = apply_rir(self.speech, simulate_rir(room, PLACEMENT.speech_pos, PLACEMENT.mic_pos, FS))
        assert estimate_snr(reference, out) == pytest.approx(5.0, abs=0.5)

    def test_placement_outside(self):
        bad = ScenePlacement((1.0, 1.0, 1.5), (4.0, 3.0, 1.0), (2.0, 3.5, 9.0), (2.0, 1.0, 1.5))
        with pytest.raises(SceneError, match="external_noise_pos"):
            render_scene(ShoeboxRoom((5, 4, 3), 0.5, 2), bad, self.speech, self.external, 5.0, 5.0, 0)


class TestSampler:
    def test_truncated_mean_is_exact(self):
        assert SnrSampler(SamplerConfig()).mean() == pytest.approx(16.0, abs=1e-9)

    def test_draws_within_bounds_and_mean(self):
        cfg = SamplerConfig()
        sampler = SnrSampler(cfg)
        snrs = [draw_scene(derive_seed(0, f"utt{i}"), cfg, 0, sampler).snr_db for i in range(200)]
        assert min(snrs) >= -2.2
        assert max(snrs) <= 35.0
        assert abs(np.mean(snrs) - 16.0) <= 1.0

    def test_t60_range(self):
        cfg = SamplerConfig()
        for i in range(50):
            d = draw_scene(i, cfg, 0)
            assert 0.12 <= d.reverb_t60 <= 1.25
            assert sabine_t60(d.reverb_room) == pytest.approx(d.reverb_t60)
            d.noisy_placement.validate(d.noisy_room)

    def test_derive_seed_stable(self):
        # first 8 little-endian bytes of sha256(b"1:spk00_utt000")
        assert derive_seed(1, "spk00_utt000") == derive_seed("1", "spk00_utt000")
        assert derive_seed(1, "a") != derive_seed(1, "b")

    def test_rejects_inverted_bounds(self):
        with pytest.raises(SceneError):
            SamplerConfig(snr_min=10.0, snr_mean=5.0)


class TestBuildDataset:
    @pytest.fixture(scope="class")
    @classmethod
    def toy(cls, tmp_path_factory):
        root = tmp_path_factory.mktemp("toy")
        make_toy_corpus(ToyCorpusSpec(n_speakers=2, utterances_per_speaker=5, seed=3), root)
        return root

    def test_cardinality_and_bytes(self, toy, tmp_path):
        a = build_dataset(toy / "manifest.jsonl", tmp_path / "a", seed=5)
        build_dataset(toy / "manifest.jsonl", tmp_path / "b", seed=5, threads=3)
        assert len(a) == 30
        assert sorted({r.condition for r in a.records}) == ["clean", "noisy_reverb", "reverb"]
        assert (tmp_path / "a/manifest.jsonl").read_bytes() == (tmp_path / "b/manifest.jsonl").read_bytes()
        for rec in a.records:
            assert (tmp_path / "a" / rec.audio_path).read_bytes() == (tmp_path / "b" / rec.audio_path).read_bytes()

    def test_fields(self, toy, tmp_path):
        out = build_dataset(toy / "manifest.jsonl", tmp_path, seed=5)
        for rec in out.records:
            if rec.condition == "clean":
                assert rec.snr_db is None
            else:
                assert 0.12 <= rec.t60_s <= 1.25
            if rec.condition == "noisy_reverb":
                assert -2.2 - 0.05 <= rec.snr_db <= 35.0 + 0.05
        header = json.loads((tmp_path / "manifest.jsonl").read_text().splitlines()[0])["header"]
        assert header["dataset"]["seed"] == 5

    def test_conditions_share_length(self, toy, tmp_path):
        from voicy.dsp import read_wav

        out = build_dataset(toy / "manifest.jsonl", tmp_path, seed=5)
        lengths = {}
        for rec in out.records:
            lengths.setdefault(rec.id, set()).add(len(read_wav(out.resolve(rec.audio_path))))
        assert all(len(v) == 1 for v in lengths.values())

    def test_unreadable_entry_recorded(self, toy, tmp_path):
        manifest = load_manifest(toy / "manifest.jsonl")
        (tmp_path / "in").mkdir()
        broken = tmp_path / "in" / "manifest.jsonl"
        lines = (toy / "manifest.jsonl").read_text().splitlines()
        first = json.loads(lines[1])
        first["audio_path"] = str(toy / "wavs" / "missing.wav")
        rest = [json.loads(x) for x in lines[2:]]
        for r in rest:
            r["audio_path"] = str(toy / r["audio_path"])
            r["alignment_path"] = str(toy / r["alignment_path"])
        first["alignment_path"] = str(toy / first["alignment_path"])
        header = json.loads(lines[0])
        header["header"]["inventory"] = str(toy / "inventory.txt")
        broken.write_text("\n".join(json.dumps(x) for x in [header, first, *rest]) + "\n")
        out = build_dataset(broken, tmp_path / "out", seed=5)
        failed = [r for r in out.records if r.error]
        assert len(failed) == 3 and {r.id for r in failed} == {manifest.records[0].id}
        assert len(out) == 30
