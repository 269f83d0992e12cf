"""Framing, DFT features, global normalization and the log filter-bank path.

Conventions used throughout the package:

* ``fft_size/2 - 1`` bins are kept per frame (DC and Nyquist dropped), so the
  default 12.5 ms / 256-point DFT front-end yields K = 127 bins.
* Multi-channel spectra are held as complex arrays shaped ``(T, K, M)``.
* When a complex spectrum is flattened into a real feature vector the order
  is, per frequency ``k``: ``[Re X_1, Im X_1, ..., Re X_M, Im X_M]``, with
  frequencies concatenated ``k = 1..K`` (see :func:`interleave`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

VARIANCE_FLOOR = 1e-8
LOG_FLOOR = 1e-7
CMS_DECAY = 0.995


@dataclass(frozen=True)
class FrameSpec:
    sample_rate_hz: int = 16000
    window_ms: float = 12.5
    hop_ms: float = 10.0
    fft_size: int = 256

    def __post_init__(self):
        if self.sample_rate_hz <= 0 or self.window_ms <= 0 or self.hop_ms <= 0:
            raise ValueError("sample rate, window and hop must be positive")
        n = int(self.fft_size)
        if n < 4 or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two >= 4, got {self.fft_size}")
        if self.window_length > n:
            raise ValueError(
                f"window of {self.window_length} samples exceeds fft_size {n}"
            )

    @property
    def window_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate_hz / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000.0))

    @property
    def n_bins_kept(self) -> int:
        return self.fft_size // 2 - 1

    def bin_frequencies_hz(self) -> np.ndarray:
        """Centre frequencies of the kept bins (original bins 1..fft_size/2-1)."""
        return np.arange(1, self.n_bins_kept + 1) * self.sample_rate_hz / self.fft_size

    def bin_omegas(self) -> np.ndarray:
        return 2.0 * np.pi * self.bin_frequencies_hz()

    def n_frames(self, n_samples: int) -> int:
        w = self.window_length
        if n_samples < w:
            return 0
        return (n_samples - w) // self.hop_length + 1

    def to_dict(self) -> dict:
        return {
            "sample_rate_hz": self.sample_rate_hz,
            "window_ms": self.window_ms,
            "hop_ms": self.hop_ms,
            "fft_size": self.fft_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameSpec":
        return cls(
            sample_rate_hz=int(d["sample_rate_hz"]),
            window_ms=float(d["window_ms"]),
            hop_ms=float(d["hop_ms"]),
            fft_size=int(d["fft_size"]),
        )


DFT_SPEC = FrameSpec()
LFBE_SPEC = FrameSpec(window_ms=25.0, fft_size=512)


@dataclass(frozen=True)
class SpectralFrame:
    """One snapshot X(t, w_k) for all kept bins and channels, shape (K, M)."""

    data: np.ndarray
    frame_index: int
    spec: FrameSpec

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != self.spec.n_bins_kept:
            raise ValueError(
                f"expected ({self.spec.n_bins_kept}, M) data, got {self.data.shape}"
            )


def to_spectral_frames(spectra: np.ndarray, spec: FrameSpec) -> list[SpectralFrame]:
    spectra = np.asarray(spectra)
    if spectra.ndim == 2:
        spectra = spectra[:, :, None]
    return [SpectralFrame(spectra[t], t, spec) for t in range(spectra.shape[0])]


def stack_spectral_frames(frames: Iterable[SpectralFrame]) -> np.ndarray:
    return np.stack([f.data for f in frames])


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_and_window(samples, spec: FrameSpec, window: str | None = "hann") -> np.ndarray:
    """Slice ``samples`` (..., N) into windowed frames (..., T, W).

    T = floor((N - W) / hop) + 1; a signal shorter than one window gives T = 0.
    ``window=None`` (or ``"rect"``) leaves frames unweighted.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ValueError("samples must be non-empty")
    w = spec.window_length
    t = spec.n_frames(x.shape[-1])
    if t == 0:
        return np.zeros(x.shape[:-1] + (0, w))
    frames = np.lib.stride_tricks.sliding_window_view(x, w, axis=-1)
    frames = frames[..., : (t - 1) * spec.hop_length + 1 : spec.hop_length, :]
    if window in (None, "rect"):
        return np.array(frames)
    if window != "hann":
        raise ValueError(f"unknown window {window!r}")
    return frames * periodic_hann(w)


def dft_features(frames: np.ndarray, spec: FrameSpec) -> np.ndarray:
    """Zero-pad frames to ``fft_size`` and keep bins 1..fft_size/2-1.

    Returns complex (..., T, K).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] > spec.fft_size:
        raise ValueError("frame longer than fft_size")
    full = np.fft.rfft(frames, n=spec.fft_size, axis=-1)
    return full[..., 1 : spec.fft_size // 2]


def stft(samples, spec: FrameSpec = DFT_SPEC) -> np.ndarray:
    """Multi-channel STFT: samples (M, N) -> complex (T, K, M); (N,) -> (T, K)."""
    x = np.asarray(samples, dtype=np.float64)
    spectra = dft_features(frame_and_window(x, spec), spec)
    if x.ndim == 1:
        return spectra
    return np.moveaxis(spectra, 0, -1)


def interleave(spectra: np.ndarray) -> np.ndarray:
    """Complex (..., K, M) -> real (..., 2*K*M) in the package's Re/Im order."""
    z = np.asarray(spectra)
    out = np.stack([z.real, z.imag], axis=-1)
    return out.reshape(z.shape[:-2] + (-1,))


def deinterleave(x: np.ndarray, n_channels: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % (2 * n_channels):
        raise ValueError("feature length is not a multiple of 2*M")
    pairs = x.reshape(x.shape[:-1] + (-1, n_channels, 2))
    return pairs[..., 0] + 1j * pairs[..., 1]


@dataclass(frozen=True)
class GlobalStats:
    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.variance.shape or self.mean.ndim != 1:
            raise ValueError("mean and variance must be vectors of equal length")
        if np.any(self.variance <= 0):
            raise ValueError("variance must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def denormalize(self, y):
        return np.asarray(y) * np.sqrt(self.variance) + self.mean


def _as_chunks(features) -> Iterator[np.ndarray]:
    if isinstance(features, np.ndarray):
        yield features.reshape(-1, features.shape[-1]) if features.ndim > 1 else features[None]
        return
    for chunk in features:
        chunk = np.asarray(chunk, dtype=np.float64)
        yield chunk.reshape(-1, chunk.shape[-1]) if chunk.ndim > 1 else chunk[None]


def estimate_global_stats(features, floor: float = VARIANCE_FLOOR) -> GlobalStats:
    """Per-dimension mean and population variance over a stream of feature rows.

    ``features`` is an array (..., F) or an iterable of such chunks; chunks are
    merged with the pairwise update of Chan et al. so the stream is read once.
    """
    count = 0
    mean = None
    m2 = None
    for chunk in _as_chunks(features):
        n_b = chunk.shape[0]
        if n_b == 0:
            continue
        mean_b = chunk.mean(axis=0)
        m2_b = ((chunk - mean_b) ** 2).sum(axis=0)
        if mean is None:
            count, mean, m2 = n_b, mean_b, m2_b
            continue
        if mean_b.shape != mean.shape:
            raise ValueError("feature dimension changed within the stream")
        total = count + n_b
        delta = mean_b - mean
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta**2 * (count * n_b / total)
        count = total
    if count == 0:
        raise ValueError("no data")
    if count < 2:
        raise ValueError("need at least 2 feature vectors")
    return GlobalStats(mean=mean, variance=np.maximum(m2 / count, floor))


def global_normalize(x, stats: GlobalStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stats.dim:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs stats {stats.dim}")
    return (x - stats.mean) / np.sqrt(stats.variance)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, spec: FrameSpec) -> np.ndarray:
    """Triangular mel filters (n_mels, K) evaluated at the kept-bin frequencies.

    Centres are equally spaced in mel between 0 Hz and Nyquist (exclusive).
    Each triangle's half-widths are at least one bin spacing, so filters
    narrower than the DFT resolution at low frequency still touch a bin.
    """
    k = spec.n_bins_kept
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if n_mels > k:
        raise ValueError(f"n_mels={n_mels} exceeds the {k} kept bins")
    nyquist = spec.sample_rate_hz / 2.0
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), n_mels + 2))
    df = spec.sample_rate_hz / spec.fft_size
    freqs = spec.bin_frequencies_hz()
    fb = np.zeros((n_mels, k))
    for m in range(n_mels):
        fb[m] = mel_triangle(freqs, edges[m], edges[m + 1], edges[m + 2], df)
    return fb


def mel_triangle(freqs, lo: float, centre: float, hi: float, min_halfwidth: float = 0.0) -> np.ndarray:
    """Unit-peak triangle on [lo, hi] peaking at ``centre``."""
    left = max(centre - lo, min_halfwidth)
    right = max(hi - centre, min_halfwidth)
    rising = 1.0 - (centre - freqs) / left
    falling = 1.0 - (freqs - centre) / right
    return np.clip(np.where(freqs <= centre, rising, falling), 0.0, 1.0)


def lfbe(power_spectrum, fb: np.ndarray, floor: float = LOG_FLOOR) -> np.ndarray:
    """log(max(fb @ power, floor)) on the last axis."""
    p = np.asarray(power_spectrum, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("power spectrum must be non-negative")
    if floor <= 0:
        raise ValueError("floor must be positive")
    return np.log(np.maximum(p @ fb.T, floor))


def lfbe_features(
    samples,
    n_mels: int = 64,
    spec: FrameSpec = LFBE_SPEC,
    align_to: FrameSpec | None = DFT_SPEC,
    floor: float = LOG_FLOOR,
) -> np.ndarray:
    """Log filter-bank energies of a mono signal, (T, n_mels).

    With ``align_to`` set, the signal is padded so each LFBE frame is centred
    on the corresponding ``align_to`` frame; both views then share T.
    """
    x = np.asarray(samples, dtype=np.float64)
    if align_to is not None:
        if align_to.hop_length != spec.hop_length:
            raise ValueError("aligned views need equal hops")
        pad_total = spec.window_length - align_to.window_length
        left = pad_total // 2
        x = np.pad(x, (left, pad_total - left))
    spectra = dft_features(frame_and_window(x, spec), spec)
    return lfbe(np.abs(spectra) ** 2, mel_filterbank(n_mels, spec), floor)


def causal_mean_subtract(features, init_mean, decay: float = CMS_DECAY) -> np.ndarray:
    """Online mean subtraction: y_t = x_t - m_{t-1}, m_t = a m_{t-1} + (1-a) x_t.

    ``m_{-1}`` is ``init_mean`` (normally the global mean).
    """
    if not 0.0 < decay < 1.0:
        raise ValueError("decay must lie in (0, 1)")
    x = np.asarray(features, dtype=np.float64)
    m = np.array(init_mean, dtype=np.float64, copy=True)
    out = np.empty_like(x)
    for t in range(x.shape[0]):
        out[t] = x[t] - m
        m = decay * m + (1.0 - decay) * x[t]
    return out
