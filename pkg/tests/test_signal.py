import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mcfront.signal import (
    DFT_SPEC,
    LFBE_SPEC,
    FrameSpec,
    GlobalStats,
    causal_mean_subtract,
    deinterleave,
    dft_features,
    estimate_global_stats,
    frame_and_window,
    global_normalize,
    interleave,
    lfbe,
    hz_to_mel,
    lfbe_features,
    mel_filterbank,
    mel_to_hz,
    mel_triangle,
    periodic_hann,
    stft,
    to_spectral_frames,
)


def direct_dft(frame, n_fft):
    """O(N^2) DFT sum, independent of numpy.fft."""
    x = np.zeros(n_fft)
    x[: len(frame)] = frame
    n = np.arange(n_fft)
    return np.array([np.sum(x * np.exp(-2j * np.pi * k * n / n_fft)) for k in range(n_fft)])


class TestFrameSpec:
    def test_defaults(self):
        assert DFT_SPEC.window_length == 200
        assert DFT_SPEC.hop_length == 160
        assert DFT_SPEC.n_bins_kept == 127
        assert LFBE_SPEC.window_length == 400

    def test_window_must_fit_fft(self):
        with pytest.raises(ValueError):
            FrameSpec(window_ms=25.0, fft_size=256)

    def test_fft_power_of_two(self):
        with pytest.raises(ValueError):
            FrameSpec(fft_size=300)


class TestFraming:
    def test_single_window(self):
        frames = frame_and_window(np.ones(400), LFBE_SPEC)
        assert frames.shape == (1, 400)

    def test_constant_signal_gives_window(self):
        frames = frame_and_window(np.ones(1000), DFT_SPEC)
        np.testing.assert_array_equal(frames[0], periodic_hann(200))

    def test_one_second_frame_count(self):
        # floor((16000 - 200) / 160) + 1
        assert frame_and_window(np.zeros(16000), DFT_SPEC).shape[0] == (16000 - 200) // 160 + 1 == 99

    def test_short_signal_is_empty(self):
        assert frame_and_window(np.ones(150), DFT_SPEC).shape == (0, 200)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            frame_and_window(np.zeros(0), DFT_SPEC)

    def test_frames_are_slices(self):
        x = np.arange(1000.0)
        f = frame_and_window(x, DFT_SPEC, window=None)
        np.testing.assert_array_equal(f[2], x[320:520])

    def test_periodic_hann(self):
        w = periodic_hann(8)
        assert w[0] == 0.0
        assert w[4] == pytest.approx(1.0)


class TestDFT:
    def test_bin_count(self):
        spec = dft_features(np.zeros((3, 200)), DFT_SPEC)
        assert spec.shape == (3, 127)

    def test_zero_frame(self):
        assert np.all(dft_features(np.zeros((1, 200)), DFT_SPEC) == 0)

    def test_cosine_at_bin_three(self):
        n = np.arange(256)
        frame = np.cos(2 * np.pi * 3 * n / 256)
        spec = dft_features(frame[None], DFT_SPEC)[0]
        oracle = direct_dft(frame, 256)[1:128]
        np.testing.assert_allclose(spec, oracle, atol=1e-9)
        assert np.argmax(np.abs(spec)) == 2

    def test_matches_direct_dft_on_random_frame(self):
        rng = np.random.default_rng(3)
        frame = rng.standard_normal(200)
        np.testing.assert_allclose(dft_features(frame[None], DFT_SPEC)[0],
                                   direct_dft(frame, 256)[1:128], atol=1e-9)

    def test_parseval(self):
        rng = np.random.default_rng(4)
        frame = rng.standard_normal(200)
        full = direct_dft(frame, 256)
        time_energy = np.sum(frame**2)
        assert time_energy == pytest.approx(np.sum(np.abs(full) ** 2) / 256, rel=1e-10)
        kept = dft_features(frame[None], DFT_SPEC)[0]
        # each kept bin appears twice in the full (Hermitian) spectrum
        assert 2 * np.sum(np.abs(kept) ** 2) <= np.sum(np.abs(full) ** 2) + 1e-9

    def test_deterministic(self):
        x = np.random.default_rng(5).standard_normal(5000)
        a = dft_features(frame_and_window(x, DFT_SPEC), DFT_SPEC)
        b = dft_features(frame_and_window(x, DFT_SPEC), DFT_SPEC)
        assert a.tobytes() == b.tobytes()

    def test_multichannel_stft_layout(self):
        x = np.random.default_rng(6).standard_normal((3, 2000))
        z = stft(x)
        assert z.shape == (12, 127, 3)
        np.testing.assert_array_equal(z[:, :, 1], stft(x[1]))

    def test_interleave_order(self):
        z = np.array([[1 + 2j, 3 + 4j], [5 + 6j, 7 + 8j]])  # (K=2, M=2)
        np.testing.assert_array_equal(interleave(z), [1, 2, 3, 4, 5, 6, 7, 8])
        np.testing.assert_array_equal(deinterleave(interleave(z), 2), z)

    def test_spectral_frames(self):
        frames = to_spectral_frames(np.zeros((4, 127), complex), DFT_SPEC)
        assert len(frames) == 4 and frames[2].data.shape == (127, 1) and frames[2].frame_index == 2


class TestGlobalStats:
    def test_constant_stream(self):
        s = estimate_global_stats(np.full((10, 3), 2.5))
        np.testing.assert_array_equal(s.mean, 2.5)
        np.testing.assert_array_equal(s.variance, 1e-8)

    def test_two_vectors(self):
        s = estimate_global_stats(np.array([[0.0, 0.0], [2.0, 2.0]]))
        np.testing.assert_allclose(s.mean, 1.0)
        np.testing.assert_allclose(s.variance, 1.0)

    def test_stream_matches_two_pass(self):
        rng = np.random.default_rng(7)
        data = rng.normal(3.0, 2.0, (1000, 5))
        chunks = [data[i : i + 37] for i in range(0, 1000, 37)]
        s = estimate_global_stats(iter(chunks))
        mean = data.sum(0) / 1000
        var = ((data - mean) ** 2).sum(0) / 1000
        np.testing.assert_allclose(s.mean, mean, atol=1e-10)
        np.testing.assert_allclose(s.variance, var, atol=1e-10)

    def test_empty(self):
        with pytest.raises(ValueError, match="no data"):
            estimate_global_stats(iter([]))

    def test_normalize_examples(self):
        s = GlobalStats(np.array([1.0, -2.0]), np.array([1.0, 4.0]))
        np.testing.assert_array_equal(global_normalize(s.mean, s), 0.0)
        s = GlobalStats(np.zeros(1), np.full(1, 4.0))
        assert global_normalize(np.array([2.0]), s)[0] == 1.0

    def test_normalize_dimension_mismatch(self):
        s = GlobalStats(np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            global_normalize(np.zeros(3), s)

    def test_normalized_training_set(self):
        rng = np.random.default_rng(8)
        data = rng.normal(5.0, 3.0, (2000, 4)) * np.array([1.0, 10.0, 0.1, 2.0])
        s = estimate_global_stats(data)
        re = estimate_global_stats(global_normalize(data, s))
        assert np.max(np.abs(re.mean)) < 1e-6
        assert np.max(np.abs(re.variance - 1.0)) < 1e-3

    @given(arrays(np.float64, (6, 3), elements=st.floats(-1e3, 1e3)))
    @settings(max_examples=50, deadline=None)
    def test_denormalize_roundtrip(self, x):
        s = GlobalStats(np.array([1.0, -3.0, 0.5]), np.array([0.5, 2.0, 9.0]))
        np.testing.assert_allclose(s.denormalize(global_normalize(x, s)), x, rtol=1e-12, atol=1e-9)


class TestMel:
    def test_shape_and_range(self):
        fb = mel_filterbank(64, DFT_SPEC)
        assert fb.shape == (64, 127)
        assert np.all(fb >= 0) and np.all(fb <= 1)
        assert np.all(fb.sum(axis=1) > 0)

    def test_peak_at_coinciding_centre(self):
        freqs = DFT_SPEC.bin_frequencies_hz()
        centre = freqs[10]
        tri = mel_triangle(freqs, freqs[7] + 5.0, centre, freqs[14] - 3.0, 62.5)
        assert tri[10] == 1.0
        assert np.argmax(tri) == 10

    def test_filter_peaks_near_centres(self):
        fb = mel_filterbank(64, DFT_SPEC)
        centres = mel_to_hz(np.linspace(0.0, hz_to_mel(8000.0), 66))[1:-1]
        freqs = DFT_SPEC.bin_frequencies_hz()
        for row, c in zip(fb, centres):
            assert abs(freqs[np.argmax(row)] - c) <= 62.5

    def test_interior_bins_covered(self):
        fb = mel_filterbank(64, DFT_SPEC)
        assert np.all(fb.sum(axis=0)[:-1] > 0)

    def test_too_many_mels(self):
        with pytest.raises(ValueError):
            mel_filterbank(128, DFT_SPEC)


class TestLFBE:
    def test_zero_spectrum(self):
        fb = mel_filterbank(64, DFT_SPEC)
        np.testing.assert_allclose(lfbe(np.zeros(127), fb), np.log(1e-7))

    def test_identity_row(self):
        assert lfbe(np.array([np.e]), np.eye(1), 1e-30)[0] == pytest.approx(1.0)

    def test_negative_power(self):
        with pytest.raises(ValueError):
            lfbe(-np.ones(127), mel_filterbank(64, DFT_SPEC))

    @given(arrays(np.float64, 127, elements=st.floats(0.0, 100.0)), st.integers(0, 126),
           st.floats(0.01, 10.0))
    @settings(max_examples=50, deadline=None)
    def test_monotone(self, p, k, bump):
        fb = mel_filterbank(64, DFT_SPEC)
        q = p.copy()
        q[k] += bump
        assert np.all(lfbe(q, fb) >= lfbe(p, fb))

    def test_aligned_view_shares_frame_count(self):
        x = np.random.default_rng(9).standard_normal(16000)
        feats = lfbe_features(x)
        assert feats.shape == (DFT_SPEC.n_frames(16000), 64)


class TestCMS:
    def test_constant_equal_to_init(self):
        x = np.full((20, 3), 1.5)
        np.testing.assert_array_equal(causal_mean_subtract(x, np.full(3, 1.5)), 0.0)

    def test_first_frame(self):
        x = np.random.default_rng(10).standard_normal((5, 2))
        g = np.array([0.3, -0.2])
        np.testing.assert_allclose(causal_mean_subtract(x, g)[0], x[0] - g)

    def test_step_decays_geometrically(self):
        a = 0.9
        x = np.ones((30, 1))
        y = causal_mean_subtract(x, np.zeros(1), a)[:, 0]
        # closed form: m_{t-1} = 1 - a^t, so y_t = a^t
        np.testing.assert_allclose(y, a ** np.arange(30), rtol=1e-12)

    def test_strictly_causal(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((10, 2))
        y = causal_mean_subtract(x, np.zeros(2))
        x2 = x.copy()
        x2[6:] += 100.0
        np.testing.assert_array_equal(causal_mean_subtract(x2, np.zeros(2))[:6], y[:6])

    def test_bad_decay(self):
        with pytest.raises(ValueError):
            causal_mean_subtract(np.zeros((2, 2)), np.zeros(2), 1.0)
