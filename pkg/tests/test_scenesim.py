import hashlib
import math

import numpy as np
import pytest
from scipy import signal as sps

from mcfront import mcmodel as mm
from mcfront.beamform import (
    MIC_SUBSETS,
    ArrayGeometry,
    LookDirection,
    build_bank,
    manifold_vector,
    reference_array,
    uniform_directions,
)
from mcfront.scenesim import (
    MAX_CLASSES,
    FrameDataset,
    SceneSpec,
    ScenePlan,
    class_codeword,
    class_envelope,
    class_source,
    delay_signal,
    diffuse_noise,
    feature_view,
    frame_labels,
    mix_scene,
    plane_wave_render,
    split_seeds,
    utterance_source,
)
from mcfront.signal import DFT_SPEC, stft

C = 343.0
FS = 16000


def pair(d=0.072):
    return ArrayGeometry(np.array([[-d / 2, 0, 0], [d / 2, 0, 0]]), "pair")


class TestClasses:
    def test_deterministic(self):
        a, la = class_source(3, 0.5, seed=11)
        b, lb = class_source(3, 0.5, seed=11)
        assert a.tobytes() == b.tobytes()
        np.testing.assert_array_equal(la, 3)
        assert la.shape == lb.shape == (DFT_SPEC.n_frames(8000),)

    def test_codewords_far_apart(self):
        words = [class_codeword(i) for i in range(MAX_CLASSES)]
        for i in range(MAX_CLASSES):
            assert 0 < words[i].sum() < 8
            for j in range(i):
                assert np.sum(words[i] != words[j]) >= 4

    def test_envelope_levels(self):
        env = class_envelope(0, 12.0)
        assert set(np.round(20 * np.log10(env), 9)) == {0.0, -12.0}

    def test_bad_class(self):
        with pytest.raises(ValueError):
            class_codeword(MAX_CLASSES)

    def test_band_energy_follows_envelope(self):
        wave, _ = class_source(5, 4.0, seed=1)
        f, p = sps.welch(wave, FS, nperseg=1024)
        on = class_codeword(5) == 1
        edges = (0, 400, 800, 1300, 2000, 2800, 3800, 5200, 8000)
        level = np.array([p[(f > lo + 50) & (f < hi - 50)].mean() for lo, hi in zip(edges[:-1], edges[1:])])
        ratio_db = 10 * np.log10(level[on].mean() / level[~on].mean())
        assert ratio_db == pytest.approx(12.0, abs=1.0)

    def test_utterance_segments(self):
        wave, classes = utterance_source(4.0, 8, np.random.default_rng(0))
        assert wave.shape == classes.shape == (64000,)
        change = np.flatnonzero(np.diff(classes)) + 1
        bounds = np.concatenate([[0], change, [64000]])
        # adjacent segments may repeat a class, so measured runs are at least 0.2 s except the last
        assert np.all(np.diff(bounds)[:-1] >= 0.2 * FS)

    def test_avoid(self):
        _, target = utterance_source(4.0, 8, np.random.default_rng(1))
        _, other = utterance_source(4.0, 8, np.random.default_rng(2), avoid=target)
        # a 0.5 s span meets at most three target segments, so a free class always exists
        assert not np.any(other == target)

    def test_frame_labels_use_centre(self):
        classes = np.zeros(1000, dtype=int)
        classes[260:] = 1
        lab = frame_labels(classes)
        # frame 1 covers 160..359, centre 260
        np.testing.assert_array_equal(lab[:3], [0, 1, 1])


class TestRender:
    def test_origin_sensor_unmodified(self):
        x = np.random.default_rng(0).standard_normal(2000)
        g = ArrayGeometry(np.zeros((1, 3)))
        np.testing.assert_array_equal(plane_wave_render(x, g, 1.0)[0], x)

    def test_broadside_identical(self):
        x = np.random.default_rng(1).standard_normal(2000)
        out = plane_wave_render(x, pair(), math.pi / 2)
        np.testing.assert_allclose(out[0], out[1], atol=1e-12)

    def test_integer_delay(self):
        x = np.arange(10.0)
        np.testing.assert_array_equal(delay_signal(x, 2), [0, 0, 0, 1, 2, 3, 4, 5, 6, 7])
        np.testing.assert_array_equal(delay_signal(x, -1), [1, 2, 3, 4, 5, 6, 7, 8, 9, 0])

    def test_phase_matches_manifold(self):
        g = pair()
        az = 0.3
        x = np.random.default_rng(2).standard_normal(FS * 4)
        out = plane_wave_render(x, g, az)
        f, pxy = sps.csd(out[0], out[1], FS, nperseg=512)
        k = np.argmin(np.abs(f - 1000.0))
        v = manifold_vector(g, LookDirection(az), 2 * math.pi * f[k])
        # scipy's csd is conj(X0) X1, i.e. the phase of ch1 relative to ch0
        measured = np.angle(pxy[k])
        expected = np.angle(v[1] * np.conj(v[0]))
        assert abs(np.angle(np.exp(1j * (measured - expected)))) < 0.02


class TestDiffuse:
    def test_single_mic_unit_variance(self):
        n = diffuse_noise(ArrayGeometry(np.zeros((1, 3))), 5.0, seed=3)
        assert n.shape == (1, 5 * FS)
        assert np.var(n) == pytest.approx(1.0, rel=0.05)

    def test_coherence_at_1khz(self):
        n = diffuse_noise(pair(), 30.0, seed=4)
        f, coh = sps.coherence(n[0], n[1], FS, nperseg=512)
        k = np.argmin(np.abs(f - 1000.0))
        x = 2 * math.pi * f[k] * 0.072 / C
        assert 0.44 <= coh[k] <= 0.64
        assert coh[k] == pytest.approx((math.sin(x) / x) ** 2, abs=0.10)

    def test_coherence_vanishes_at_sinc_zero(self):
        d = 0.072
        n = diffuse_noise(pair(d), 30.0, seed=5)
        f, coh = sps.coherence(n[0], n[1], FS, nperseg=512)
        k = np.argmin(np.abs(f - C / (2 * d)))
        assert coh[k] < 0.05

    def test_seeded(self):
        a = diffuse_noise(pair(), 1.0, seed=6)
        assert a.tobytes() == diffuse_noise(pair(), 1.0, seed=6).tobytes()
        assert a.tobytes() != diffuse_noise(pair(), 1.0, seed=7).tobytes()


def scene(snr=10.0, seed=0, interferer=True, duration=2.0):
    return SceneSpec(reference_array(), 0.2, snr, duration, 8, seed,
                     interferer_azimuth=3.0 if interferer else None, sir_db=5.0 if interferer else None)


class TestMix:
    def test_noise_free_equals_target(self):
        spec = scene(math.inf, interferer=False)
        u = mix_scene(spec, keep_components=True)
        # target stream is seeded by (scene seed, 1); the centre mic sits at the origin
        mono, _ = utterance_source(2.0, 8, np.random.default_rng((spec.seed, 1)))
        np.testing.assert_array_equal(u.reference_channel, mono)
        np.testing.assert_array_equal(u.waveform, u.components["target"])
        assert set(u.components) == {"target"}

    @pytest.mark.parametrize("snr", [0.0, 5.0, 20.0])
    def test_requested_snr(self, snr):
        u = mix_scene(scene(snr, seed=1), keep_components=True)
        ref = u.spec.geometry.reference_index()
        c = u.components
        measured = 10 * np.log10(np.mean(c["target"][ref] ** 2) / np.mean(c["noise"][ref] ** 2))
        assert measured == pytest.approx(snr, abs=0.5)
        sir = 10 * np.log10(np.mean(c["target"][ref] ** 2) / np.mean(c["interferer"][ref] ** 2))
        assert sir == pytest.approx(5.0, abs=0.5)

    def test_components_sum(self):
        u = mix_scene(scene(seed=2), keep_components=True)
        total = u.components["target"] + u.components["noise"] + u.components["interferer"]
        np.testing.assert_allclose(u.waveform, total, atol=1e-12)

    def test_bit_identical(self):
        a, b = mix_scene(scene(seed=3)), mix_scene(scene(seed=3))
        assert a.waveform.tobytes() == b.waveform.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_spec_roundtrip(self):
        spec = scene(math.inf, interferer=False)
        again = SceneSpec.from_dict(spec.to_dict())
        assert again.digest() == spec.digest()
        assert math.isinf(again.snr_db)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            SceneSpec(reference_array(), 0.0, 0.0, -1.0)
        with pytest.raises(ValueError):
            SceneSpec(reference_array(), 0.0, 0.0, 1.0, n_classes=1)
        with pytest.raises(ValueError):
            SceneSpec(reference_array(), 0.0, 0.0, 1.0, interferer_azimuth=1.0)

    def test_views_share_frame_count(self):
        u = mix_scene(scene(seed=4))
        bank = build_bank(reference_array(), uniform_directions(4), DFT_SPEC)
        t = u.labels.shape[0]
        assert feature_view(u, "lfbe").shape == (t, 64)
        assert feature_view(u, "dft1").shape == (t, 254)
        assert feature_view(u, "dftm", mics=MIC_SUBSETS[2]).shape == (t, 508)
        assert feature_view(u, "bf", mics=MIC_SUBSETS[7], bank=bank).shape == (t, 254)
        with pytest.raises(ValueError):
            feature_view(u, "bf")


def test_sd_gain_on_generated_scenes():
    """Output SNR gain of the SD beam steered at the target, noise only, target on a bank direction."""
    dirs = uniform_directions(12)
    gains = {}
    for n_mics in (2, 7):
        g = reference_array().subset(MIC_SUBSETS[n_mics])
        bank = build_bank(g, dirs, DFT_SPEC)
        spec = SceneSpec(reference_array(), dirs[0].azimuth, 0.0, 4.0, 8, seed=9)
        u = mix_scene(spec, keep_components=True)
        mics = list(MIC_SUBSETS[n_mics])
        x_t = stft(u.components["target"][mics])
        x_n = stft(u.components["noise"][mics])
        y_t, y_n = bank.apply(x_t)[0], bank.apply(x_n)[0]
        ref_t, ref_n = stft(u.components["target"][6]), stft(u.components["noise"][6])
        f = DFT_SPEC.bin_frequencies_hz()
        band = (f >= 500) & (f <= 4000)
        snr_in = np.sum(np.abs(ref_t[:, band]) ** 2) / np.sum(np.abs(ref_n[:, band]) ** 2)
        snr_out = np.sum(np.abs(y_t[:, band]) ** 2) / np.sum(np.abs(y_n[:, band]) ** 2)
        gains[n_mics] = 10 * np.log10(snr_out / snr_in)
    assert gains[7] > 0.0
    assert gains[7] > gains[2]


class TestSplits:
    def test_disjoint_ranges(self):
        seen = set()
        for base in (0, 1, 2):
            for split in ("train", "dev", "test"):
                s = set(split_seeds(split, 500, base))
                assert not (s & seen)
                seen |= s

    def test_bad_split(self):
        with pytest.raises(ValueError):
            split_seeds("valid", 3)

    def test_no_waveform_in_two_splits(self):
        ds = FrameDataset(ScenePlan(reference_array(), duration_s=0.5), {"train": 6, "dev": 3, "test": 3})
        digests = {}
        for split in ("train", "dev", "test"):
            for u in ds.utterances(split):
                h = hashlib.sha256(u.waveform.tobytes()).hexdigest()
                assert h not in digests
                digests[h] = split
        assert len(digests) == 12

    def test_view_labels_match(self):
        ds = FrameDataset(ScenePlan(reference_array(), duration_s=0.5), {"train": 2})
        feats, labels, specs = ds.view("train", "dft1")
        assert [f.shape[0] for f in feats] == [l.shape[0] for l in labels]
        assert feats[0].dtype == np.float32 and len(specs) == 2

    def test_plan_roundtrip_and_draw(self):
        plan = ScenePlan(reference_array(), contrast_db=9.0)
        again = ScenePlan.from_dict(plan.to_dict())
        assert again.draw(7).digest() == plan.draw(7).digest()
        spec = plan.draw(7)
        az = math.degrees(spec.target_azimuth)
        assert az <= 45.0 or az >= 315.0
        assert 135.0 <= math.degrees(spec.interferer_azimuth) <= 225.0
        assert spec.snr_db in (0.0, 5.0, 10.0, 20.0)


def test_clean_single_channel_separable():
    """A small LFBE classifier trained on clean reference-mic audio nearly solves the task."""
    plan = ScenePlan(reference_array(), snr_db_choices=(math.inf,), sir_db=None, duration_s=2.0)
    ds = FrameDataset(plan, {"train": 40, "dev": 10}, base_seed=5)
    tr_f, tr_l, _ = ds.view("train", "lfbe")
    dv_f, dv_l, _ = ds.view("dev", "lfbe")
    stats = mm.estimate_global_stats(np.concatenate(tr_f))
    model = mm.assemble("lfbe", mm.ClassifierConfig(hidden=32), np.random.default_rng(0), feature_stats=stats)
    train, dev = mm.DataView(tr_f, tr_l), mm.DataView(dv_f, dv_l)
    mm.fit(model, train, dev, mm.TrainConfig(epochs=6, batch_size=8))
    assert mm.evaluate(model, dev)["frame_error_rate"] < 0.05
