"""Synthetic labelled array scenes.

A scene is a class-bearing target rendered as a far-field plane wave, plus
spherically isotropic (diffuse) noise and an optional point interferer.
Classes are white noise shaped by fixed 8-band spectral envelopes, so the
frame label is recoverable from the short-time spectrum alone and spatial
filtering helps only by improving SNR/SIR.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .beamform import (
    SPEED_OF_SOUND,
    ArrayGeometry,
    BeamformerBank,
    LookDirection,
    diffuse_coherence,
    propagation_delays,
    select_max_energy,
)
from .signal import DFT_SPEC, FrameSpec, interleave, lfbe_features, stft

BAND_EDGES_HZ = (0.0, 400.0, 800.0, 1300.0, 2000.0, 2800.0, 3800.0, 5200.0, 8000.0)
ENVELOPE_CONTRAST_DB = 12.0
SEGMENT_RANGE_S = (0.2, 0.5)
RENDER_TAPS = 33
COHERENCE_JITTER = 1e-6
MAX_CLASSES = 14

# Generator of the extended [8,4,4] Hamming code: any two distinct codewords
# differ in at least 4 positions.
_HAMMING_G = np.array(
    [
        [1, 0, 0, 0, 0, 1, 1, 1],
        [0, 1, 0, 0, 1, 0, 1, 1],
        [0, 0, 1, 0, 1, 1, 0, 1],
        [0, 0, 0, 1, 1, 1, 1, 0],
    ]
)

SPLIT_OFFSETS = {"train": 0, "dev": 1_000_000_000, "test": 2_000_000_000}


def class_codeword(class_id: int) -> np.ndarray:
    """Band on/off pattern of a class; the two flat codewords are skipped."""
    if not 0 <= class_id < MAX_CLASSES:
        raise ValueError(f"class_id must be in [0, {MAX_CLASSES})")
    message = class_id + 1
    bits = np.array([(message >> (3 - i)) & 1 for i in range(4)])
    return (bits @ _HAMMING_G) % 2


def class_envelope(class_id: int, contrast_db: float = ENVELOPE_CONTRAST_DB) -> np.ndarray:
    """Linear amplitude gain per band (8 values); "off" bands sit ``contrast_db`` below "on" bands."""
    low = 10.0 ** (-contrast_db / 20.0)
    return np.where(class_codeword(class_id) == 1, 1.0, low)


def _band_gain(class_id: int, freqs: np.ndarray, contrast_db: float) -> np.ndarray:
    env = class_envelope(class_id, contrast_db)
    band = np.clip(np.searchsorted(BAND_EDGES_HZ, freqs, side="right") - 1, 0, len(env) - 1)
    return env[band]


def _shaped_noise(class_id: int, n: int, rng: np.random.Generator, fs: int,
                  contrast_db: float = ENVELOPE_CONTRAST_DB) -> np.ndarray:
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    spec *= _band_gain(class_id, np.fft.rfftfreq(n, 1.0 / fs), contrast_db)
    seg = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(seg**2))
    return seg / rms if rms > 0 else seg


def frame_labels(sample_classes: np.ndarray, spec: FrameSpec = DFT_SPEC) -> np.ndarray:
    """Class at each frame's centre sample."""
    t = spec.n_frames(sample_classes.shape[0])
    centres = np.arange(t) * spec.hop_length + spec.window_length // 2
    return sample_classes[centres].astype(np.int64)


def class_source(class_id: int, duration_s: float, seed: int, sample_rate_hz: int = 16000,
                 spec: FrameSpec = DFT_SPEC,
                 contrast_db: float = ENVELOPE_CONTRAST_DB) -> tuple[np.ndarray, np.ndarray]:
    """One constant-class segment: (unit-RMS mono waveform, frame labels)."""
    n = int(round(duration_s * sample_rate_hz))
    rng = np.random.default_rng((seed, class_id))
    wave = _shaped_noise(class_id, n, rng, sample_rate_hz, contrast_db)
    return wave, frame_labels(np.full(n, class_id), spec)


def utterance_source(duration_s: float, n_classes: int, rng: np.random.Generator,
                     sample_rate_hz: int = 16000,
                     segment_range_s: tuple[float, float] = SEGMENT_RANGE_S,
                     contrast_db: float = ENVELOPE_CONTRAST_DB,
                     avoid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated random-class segments: (waveform, per-sample class ids).

    ``avoid`` is a per-sample class sequence (e.g. a target's); each segment
    then draws its class from those absent in ``avoid`` over its span.
    """
    if not 2 <= n_classes <= MAX_CLASSES:
        raise ValueError(f"n_classes must be in [2, {MAX_CLASSES}]")
    n = int(round(duration_s * sample_rate_hz))
    if avoid is not None and avoid.shape[0] != n:
        raise ValueError("avoid must cover every sample")
    wave = np.empty(n)
    classes = np.empty(n, dtype=np.int64)
    pos = 0
    while pos < n:
        seg = int(round(rng.uniform(*segment_range_s) * sample_rate_hz))
        seg = min(seg, n - pos)
        if avoid is None:
            cid = int(rng.integers(n_classes))
        else:
            allowed = np.setdiff1d(np.arange(n_classes), avoid[pos : pos + seg])
            if allowed.size == 0:
                allowed = np.arange(n_classes)
            cid = int(allowed[rng.integers(allowed.size)])
        wave[pos : pos + seg] = (_shaped_noise(cid, seg, rng, sample_rate_hz, contrast_db)
                                 if seg > 1 else 0.0)
        classes[pos : pos + seg] = cid
        pos += seg
    return wave, classes


def _fractional_delay_filter(frac: float, taps: int) -> np.ndarray:
    half = taps // 2
    u = np.arange(taps) - half - frac
    window = 0.5 * (1.0 + np.cos(2.0 * np.pi * u / (taps + 1)))
    return np.sinc(u) * window


def delay_signal(x: np.ndarray, delay_samples: float, taps: int = RENDER_TAPS) -> np.ndarray:
    """x(n - delay) by windowed-sinc interpolation, same length as x."""
    delay_samples = round(float(delay_samples), 9)
    n0 = math.floor(delay_samples)
    frac = delay_samples - n0
    if frac == 0.0:
        out = np.zeros_like(x)
        if n0 >= 0:
            out[n0:] = x[: x.shape[0] - n0] if n0 else x
        else:
            out[:n0] = x[-n0:]
        return out
    full = np.convolve(x, _fractional_delay_filter(frac, taps))
    half = taps // 2
    idx = np.arange(x.shape[0]) - n0 + half
    valid = (idx >= 0) & (idx < full.shape[0])
    out = np.zeros_like(x)
    out[valid] = full[idx[valid]]
    return out


def plane_wave_render(mono, geometry: ArrayGeometry, azimuth: float, c: float = SPEED_OF_SOUND,
                      sample_rate_hz: int = 16000, elevation: float = 0.0,
                      taps: int = RENDER_TAPS) -> np.ndarray:
    """Far-field rendering (M, N); channel m is delayed consistently with the manifold vector."""
    x = np.asarray(mono, dtype=np.float64)
    tau = propagation_delays(geometry, LookDirection(azimuth, elevation), c)
    return np.stack([delay_signal(x, t * sample_rate_hz, taps) for t in tau])


@functools.lru_cache(maxsize=8)
def _coherence_factors(positions: bytes, m: int, n: int, fs: int, c: float) -> np.ndarray:
    """Cholesky factors of Gamma(omega) + jitter*I for every rfft bin of an n-sample block."""
    geom = ArrayGeometry(np.frombuffer(positions, dtype=np.float64).reshape(m, 3))
    omegas = 2.0 * np.pi * np.fft.rfftfreq(n, 1.0 / fs)
    gamma = diffuse_coherence(geom, omegas, c) + COHERENCE_JITTER * np.eye(m)
    chol = np.linalg.cholesky(gamma)
    chol.setflags(write=False)
    return chol


def diffuse_noise(geometry: ArrayGeometry, duration_s: float, spec: FrameSpec = DFT_SPEC,
                  c: float = SPEED_OF_SOUND, seed: int = 0) -> np.ndarray:
    """Unit-variance noise (M, N) whose inter-channel coherence follows sinc(omega d / c).

    Independent complex Gaussian spectra are coloured per frequency by the
    Cholesky factor of Gamma(omega) + 1e-6 I and returned to the time domain.
    The whole signal is one synthesis block, so the field is exactly stationary.
    """
    fs = spec.sample_rate_hz
    n = int(round(duration_s * fs))
    m = geometry.n_mics
    rng = np.random.default_rng(seed)
    chol = _coherence_factors(geometry.positions.tobytes(), m, n, fs, float(c))
    n_freq = chol.shape[0]
    z = (rng.standard_normal((n_freq, m)) + 1j * rng.standard_normal((n_freq, m))) / np.sqrt(2.0)
    # DC and (even-n) Nyquist bins of a real signal are real-valued
    z[0] = rng.standard_normal(m)
    if n % 2 == 0:
        z[-1] = rng.standard_normal(m)
    spectra = np.sqrt(n) * np.einsum("fij,fj->fi", chol, z)
    return np.fft.irfft(spectra, n, axis=0).T


@dataclass(frozen=True)
class SceneSpec:
    geometry: ArrayGeometry
    target_azimuth: float
    snr_db: float
    duration_s: float
    n_classes: int = 8
    seed: int = 0
    sample_rate_hz: int = 16000
    interferer_azimuth: float | None = None
    sir_db: float | None = None
    c: float = SPEED_OF_SOUND
    contrast_db: float = ENVELOPE_CONTRAST_DB

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if not 2 <= self.n_classes <= MAX_CLASSES:
            raise ValueError(f"n_classes must be in [2, {MAX_CLASSES}]")
        if (self.interferer_azimuth is None) != (self.sir_db is None):
            raise ValueError("interferer_azimuth and sir_db must be given together")

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "target_azimuth": self.target_azimuth,
            "snr_db": None if math.isinf(self.snr_db) else self.snr_db,
            "duration_s": self.duration_s,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "sample_rate_hz": self.sample_rate_hz,
            "interferer_azimuth": self.interferer_azimuth,
            "sir_db": self.sir_db,
            "c": self.c,
            "contrast_db": self.contrast_db,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        snr = d.get("snr_db")
        return cls(
            geometry=ArrayGeometry.from_dict(d["geometry"]),
            target_azimuth=float(d["target_azimuth"]),
            snr_db=math.inf if snr is None else float(snr),
            duration_s=float(d["duration_s"]),
            n_classes=int(d.get("n_classes", 8)),
            seed=int(d.get("seed", 0)),
            sample_rate_hz=int(d.get("sample_rate_hz", 16000)),
            interferer_azimuth=d.get("interferer_azimuth"),
            sir_db=d.get("sir_db"),
            c=float(d.get("c", SPEED_OF_SOUND)),
            contrast_db=float(d.get("contrast_db", ENVELOPE_CONTRAST_DB)),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Utterance:
    spec: SceneSpec
    waveform: np.ndarray
    labels: np.ndarray
    components: dict = field(default_factory=dict)

    @property
    def reference_channel(self) -> np.ndarray:
        return self.waveform[self.spec.geometry.reference_index()]


def _power(x: np.ndarray) -> float:
    return float(np.mean(x**2))


def mix_scene(spec: SceneSpec, keep_components: bool = False) -> Utterance:
    """Render target, diffuse noise and optional interferer; levels are set at the reference mic."""
    fs = spec.sample_rate_hz
    frame_spec = replace(DFT_SPEC, sample_rate_hz=fs)
    geom = spec.geometry
    ref = geom.reference_index()
    mono, sample_classes = utterance_source(spec.duration_s, spec.n_classes,
                                            np.random.default_rng((spec.seed, 1)), fs,
                                            contrast_db=spec.contrast_db)
    target = plane_wave_render(mono, geom, spec.target_azimuth, spec.c, fs)
    mix = target.copy()
    p_target = _power(target[ref])
    components = {"target": target} if keep_components else {}
    if not math.isinf(spec.snr_db):
        noise = diffuse_noise(geom, spec.duration_s, frame_spec, spec.c, seed=hash_seed(spec.seed, 2))
        noise = noise[:, : mix.shape[1]]
        noise *= math.sqrt(p_target / (_power(noise[ref]) * 10.0 ** (spec.snr_db / 10.0)))
        mix += noise
        if keep_components:
            components["noise"] = noise
    if spec.interferer_azimuth is not None:
        # the interferer never shares the target's class at the same instant
        imono, _ = utterance_source(spec.duration_s, spec.n_classes,
                                    np.random.default_rng((spec.seed, 3)), fs,
                                    contrast_db=spec.contrast_db, avoid=sample_classes)
        interf = plane_wave_render(imono, geom, spec.interferer_azimuth, spec.c, fs)
        interf *= math.sqrt(p_target / (_power(interf[ref]) * 10.0 ** (spec.sir_db / 10.0)))
        mix += interf
        if keep_components:
            components["interferer"] = interf
    return Utterance(spec, mix, frame_labels(sample_classes, frame_spec), components)


def hash_seed(*parts: int) -> int:
    return int.from_bytes(hashlib.sha256(repr(parts).encode()).digest()[:4], "little")


def feature_view(utt: Utterance, kind: str, mics: Sequence[int] | None = None,
                 bank: BeamformerBank | None = None, n_mels: int = 64) -> np.ndarray:
    """Per-frame features of one utterance.

    kind: ``lfbe`` (reference mic, n_mels), ``dft1`` (reference mic, 2K),
    ``dftm`` (selected ``mics``, 2KM) or ``bf`` (energy-selected beam of
    ``bank`` over ``mics``, 2K). All views share the label frame count.
    """
    fs = utt.spec.sample_rate_hz
    dft_spec = replace(DFT_SPEC, sample_rate_hz=fs)
    if kind == "lfbe":
        return lfbe_features(utt.reference_channel, n_mels)
    if kind == "dft1":
        return interleave(stft(utt.reference_channel, dft_spec)[:, :, None])
    wave = utt.waveform if mics is None else utt.waveform[list(mics)]
    if kind == "dftm":
        return interleave(stft(wave, dft_spec))
    if kind == "bf":
        if bank is None:
            raise ValueError("the bf view needs a beamformer bank")
        _, out = select_max_energy(bank, stft(wave, dft_spec))
        return interleave(out[:, :, None])
    raise ValueError(f"unknown view {kind!r}")


@dataclass(frozen=True)
class ScenePlan:
    """Distribution from which per-utterance SceneSpecs are drawn."""

    geometry: ArrayGeometry
    n_classes: int = 8
    duration_s: float = 4.0
    snr_db_choices: tuple = (0.0, 5.0, 10.0, 20.0)
    sir_db: float | None = 5.0
    target_sector_deg: tuple = (-45.0, 45.0)
    interferer_sector_deg: tuple = (135.0, 225.0)
    sample_rate_hz: int = 16000
    c: float = SPEED_OF_SOUND
    contrast_db: float = ENVELOPE_CONTRAST_DB

    def draw(self, seed: int) -> SceneSpec:
        rng = np.random.default_rng((seed, 0))
        az = math.radians(rng.uniform(*self.target_sector_deg)) % (2 * math.pi)
        snr = float(self.snr_db_choices[int(rng.integers(len(self.snr_db_choices)))])
        iaz = None
        if self.sir_db is not None:
            iaz = math.radians(rng.uniform(*self.interferer_sector_deg)) % (2 * math.pi)
        return SceneSpec(self.geometry, az, snr, self.duration_s, self.n_classes, seed,
                         self.sample_rate_hz, iaz, self.sir_db, self.c, self.contrast_db)

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "n_classes": self.n_classes,
            "duration_s": self.duration_s,
            "snr_db_choices": list(self.snr_db_choices),
            "sir_db": self.sir_db,
            "target_sector_deg": list(self.target_sector_deg),
            "interferer_sector_deg": list(self.interferer_sector_deg),
            "sample_rate_hz": self.sample_rate_hz,
            "c": self.c,
            "contrast_db": self.contrast_db,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenePlan":
        return cls(
            geometry=ArrayGeometry.from_dict(d["geometry"]),
            n_classes=int(d.get("n_classes", 8)),
            duration_s=float(d.get("duration_s", 4.0)),
            snr_db_choices=tuple(d.get("snr_db_choices", (0.0, 5.0, 10.0, 20.0))),
            sir_db=d.get("sir_db", 5.0),
            target_sector_deg=tuple(d.get("target_sector_deg", (-45.0, 45.0))),
            interferer_sector_deg=tuple(d.get("interferer_sector_deg", (135.0, 225.0))),
            sample_rate_hz=int(d.get("sample_rate_hz", 16000)),
            c=float(d.get("c", SPEED_OF_SOUND)),
            contrast_db=float(d.get("contrast_db", ENVELOPE_CONTRAST_DB)),
        )


def split_seeds(split: str, n: int, base_seed: int = 0) -> list[int]:
    """Scene seeds of a split; ranges of different splits never overlap."""
    if split not in SPLIT_OFFSETS:
        raise ValueError(f"unknown split {split!r}")
    if not 0 <= n <= 1_000_000 or not 0 <= base_seed < 1000:
        raise ValueError("n must be <= 1e6 and base_seed < 1000")
    start = SPLIT_OFFSETS[split] + base_seed * 1_000_000
    return list(range(start, start + n))


class FrameDataset:
    """Lazily generated utterances for train/dev/test splits of one ScenePlan."""

    def __init__(self, plan: ScenePlan, sizes: dict, base_seed: int = 0):
        self.plan = plan
        self.sizes = dict(sizes)
        self.base_seed = base_seed

    def specs(self, split: str) -> list[SceneSpec]:
        return [self.plan.draw(s) for s in split_seeds(split, self.sizes.get(split, 0), self.base_seed)]

    def utterances(self, split: str) -> Iterator[Utterance]:
        for spec in self.specs(split):
            yield mix_scene(spec)

    def view(self, split: str, kind: str, **kwargs) -> tuple[list[np.ndarray], list[np.ndarray], list[SceneSpec]]:
        feats, labels, specs = [], [], []
        for utt in self.utterances(split):
            feats.append(feature_view(utt, kind, **kwargs).astype(np.float32))
            labels.append(utt.labels)
            specs.append(utt.spec)
        return feats, labels, specs
