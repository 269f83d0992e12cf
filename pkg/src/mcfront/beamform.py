"""Fixed super-directive beamforming for a far-field plane-wave model.

Shapes: a bank holds weights ``(D, K, M)``; snapshots are ``(T, K, M)``.
The beamformer output is ``Y = w^H X``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .signal import FrameSpec, stack_spectral_frames

SPEED_OF_SOUND = 343.0
DEFAULT_LOADING = 0.01
REFERENCE_DIAMETER = 0.072

# Mic subsets of the reference array; index 6 is the centre microphone.
MIC_SUBSETS = {
    1: (6,),
    2: (0, 3),
    4: (0, 1, 3, 4),
    7: (0, 1, 2, 3, 4, 5, 6),
}


class SingularCoherenceError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class ArrayGeometry:
    positions: np.ndarray
    name: str = "array"

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError("positions must be an (M, 3) array with M >= 1")
        object.__setattr__(self, "positions", pos)

    @property
    def n_mics(self) -> int:
        return self.positions.shape[0]

    def distances(self) -> np.ndarray:
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    def reference_index(self) -> int:
        """Microphone closest to the array origin."""
        return int(np.argmin(np.linalg.norm(self.positions, axis=1)))

    def subset(self, indices: Sequence[int], name: str | None = None) -> "ArrayGeometry":
        idx = list(indices)
        return ArrayGeometry(self.positions[idx], name or f"{self.name}[{','.join(map(str, idx))}]")

    def to_dict(self) -> dict:
        return {"name": self.name, "positions": self.positions.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArrayGeometry":
        if "positions" not in d:
            raise ValueError("geometry is missing field 'positions'")
        return cls(np.asarray(d["positions"], dtype=np.float64), d.get("name", "array"))

    @classmethod
    def load(cls, path) -> "ArrayGeometry":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def reference_array(diameter: float = REFERENCE_DIAMETER) -> ArrayGeometry:
    """Six mics equi-spaced on a circle plus one at the centre (index 6)."""
    r = diameter / 2.0
    ang = np.arange(6) * np.pi / 3.0
    ring = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(6)], axis=1)
    return ArrayGeometry(np.vstack([ring, np.zeros((1, 3))]), "circular7")


@dataclass(frozen=True)
class LookDirection:
    azimuth: float
    elevation: float = 0.0
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "azimuth", float(self.azimuth) % (2.0 * math.pi))

    def unit_vector(self) -> np.ndarray:
        """Unit vector pointing from the array towards the source."""
        ce = math.cos(self.elevation)
        return np.array(
            [ce * math.cos(self.azimuth), ce * math.sin(self.azimuth), math.sin(self.elevation)]
        )

    def to_dict(self) -> dict:
        return {"azimuth": self.azimuth, "elevation": self.elevation, "label": self.label}

    @classmethod
    def from_dict(cls, d: dict) -> "LookDirection":
        return cls(d["azimuth"], d.get("elevation", 0.0), d.get("label", ""))


def uniform_directions(n: int) -> list[LookDirection]:
    return [
        LookDirection(2.0 * math.pi * d / n, 0.0, f"az{round(360.0 * d / n):03d}")
        for d in range(n)
    ]


def propagation_delays(geom: ArrayGeometry, p: LookDirection, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """Arrival delay of each sensor relative to the origin, in seconds.

    Sensors displaced towards the source hear the wavefront early (negative delay).
    """
    return -(geom.positions @ p.unit_vector()) / c


def manifold_vector(geom: ArrayGeometry, p: LookDirection, omega, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """v_m = exp(-j omega tau_m); ``omega`` may be an array, giving (..., M)."""
    if c <= 0:
        raise ValueError("speed of sound must be positive")
    tau = propagation_delays(geom, p, c)
    return np.exp(-1j * np.multiply.outer(np.asarray(omega, dtype=np.float64), tau))


def diffuse_coherence(geom: ArrayGeometry, omega, c: float = SPEED_OF_SOUND) -> np.ndarray:
    """Spherically isotropic coherence sinc(omega d_mn / c); (..., M, M)."""
    if c <= 0:
        raise ValueError("speed of sound must be positive")
    x = np.multiply.outer(np.asarray(omega, dtype=np.float64), geom.distances()) / c
    # np.sinc is the normalized sinc sin(pi u)/(pi u)
    return np.sinc(x / np.pi)


def _sd_solve(gamma: np.ndarray, v: np.ndarray, loading: float) -> np.ndarray:
    """Columns of w for a real symmetric ``gamma`` (M, M) and manifolds v (M, D)."""
    m = gamma.shape[0]
    loaded = gamma + loading * np.eye(m)
    try:
        chol = np.linalg.cholesky(loaded)
    except np.linalg.LinAlgError as exc:
        raise SingularCoherenceError("singular coherence") from exc
    if np.min(np.diag(chol)) ** 2 < 1e-12 * np.max(np.diag(loaded)):
        raise SingularCoherenceError("singular coherence")
    # y = loaded^{-1} v via the two triangular factors
    z = np.linalg.solve(chol, v)
    y = np.linalg.solve(chol.T, z)
    denom = np.einsum("md,md->d", v.conj(), y)
    return y / denom


def sd_weights(
    geom: ArrayGeometry,
    p: LookDirection,
    omega: float,
    loading: float = DEFAULT_LOADING,
    c: float = SPEED_OF_SOUND,
) -> np.ndarray:
    """Super-directive (diffuse-noise MVDR) weights with diagonal loading.

    w = G^{-1} v / (v^H G^{-1} v) with G = Gamma_diffuse + loading * I, so the
    look direction passes undistorted: w^H v = 1.
    """
    if loading < 0:
        raise ValueError("diagonal loading must be non-negative")
    v = manifold_vector(geom, p, omega, c)
    gamma = diffuse_coherence(geom, omega, c)
    return _sd_solve(gamma, v[:, None], loading)[:, 0]


def apply_beamformer(w, x) -> complex:
    w = np.asarray(w)
    x = np.asarray(x)
    if w.shape != x.shape or w.ndim != 1:
        raise ValueError(f"weight/snapshot shape mismatch: {w.shape} vs {x.shape}")
    return complex(np.vdot(w, x))


def realify_weights(w) -> np.ndarray:
    """Real (2M, 2) matrix R with R^T [Re X_1, Im X_1, ...] = [Re Y, Im Y].

    Each 2x2 block is built from the conjugated coefficient a_m = conj(w_m),
    the entry of w^H that multiplies X_m: rows [Re a, Im a] and [-Im a, Re a]
    stacked as in the real-valued form of the beamforming product.
    """
    a = np.conj(np.asarray(w, dtype=np.complex128).ravel())
    blocks = np.empty((a.size, 2, 2))
    blocks[:, 0, 0] = a.real
    blocks[:, 0, 1] = a.imag
    blocks[:, 1, 0] = -a.imag
    blocks[:, 1, 1] = a.real
    return blocks.reshape(2 * a.size, 2)


def realify_snapshot(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128).ravel()
    return np.stack([x.real, x.imag], axis=-1).reshape(-1)


def apply_realified(r: np.ndarray, x_real: np.ndarray) -> np.ndarray:
    return r.T @ x_real


@dataclass(frozen=True)
class BeamformerBank:
    weights: np.ndarray
    geometry: ArrayGeometry
    directions: tuple
    spec: FrameSpec
    diagonal_loading: np.ndarray
    c: float = SPEED_OF_SOUND

    def __post_init__(self):
        d, k, m = self.weights.shape
        if d != len(self.directions) or k != self.spec.n_bins_kept or m != self.geometry.n_mics:
            raise ValueError("bank dimensions do not match geometry/directions/spec")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.weights.shape

    def manifolds(self) -> np.ndarray:
        omegas = self.spec.bin_omegas()
        return np.stack([manifold_vector(self.geometry, p, omegas, self.c) for p in self.directions])

    def distortionless_error(self) -> float:
        resp = np.einsum("dkm,dkm->dk", self.weights.conj(), self.manifolds())
        return float(np.max(np.abs(resp - 1.0)))

    def apply(self, spectra: np.ndarray) -> np.ndarray:
        """All beams at once: (T, K, M) -> (D, T, K)."""
        return np.einsum("dkm,tkm->dtk", self.weights.conj(), spectra)

    def to_dict(self) -> dict:
        return {
            "format": "mcfront-bank/1",
            "geometry": self.geometry.to_dict(),
            "directions": [p.to_dict() for p in self.directions],
            "spec": self.spec.to_dict(),
            "diagonal_loading": self.diagonal_loading.tolist(),
            "speed_of_sound": self.c,
            # weights[d][k] = [[Re w_1, Im w_1], ..., [Re w_M, Im w_M]]
            "weights": np.stack([self.weights.real, self.weights.imag], -1).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BeamformerBank":
        w = np.asarray(d["weights"], dtype=np.float64)
        return cls(
            weights=w[..., 0] + 1j * w[..., 1],
            geometry=ArrayGeometry.from_dict(d["geometry"]),
            directions=tuple(LookDirection.from_dict(p) for p in d["directions"]),
            spec=FrameSpec.from_dict(d["spec"]),
            diagonal_loading=np.asarray(d["diagonal_loading"], dtype=np.float64),
            c=float(d.get("speed_of_sound", SPEED_OF_SOUND)),
        )


def build_bank(
    geom: ArrayGeometry,
    directions: Sequence[LookDirection],
    spec: FrameSpec,
    loading=DEFAULT_LOADING,
    c: float = SPEED_OF_SOUND,
) -> BeamformerBank:
    """SD weights for every (direction, kept bin). ``loading`` is a scalar or a (K,) schedule."""
    directions = tuple(directions)
    if not directions:
        raise ValueError("need at least one look direction")
    k = spec.n_bins_kept
    sched = np.broadcast_to(np.asarray(loading, dtype=np.float64), (k,)).copy()
    if np.any(sched < 0):
        raise ValueError("diagonal loading must be non-negative")
    omegas = spec.bin_omegas()
    gammas = diffuse_coherence(geom, omegas, c)
    manifolds = np.stack([manifold_vector(geom, p, omegas, c) for p in directions], axis=-1)
    weights = np.empty((len(directions), k, geom.n_mics), dtype=np.complex128)
    for i in range(k):
        weights[:, i, :] = _sd_solve(gammas[i], manifolds[i], sched[i]).T
    return BeamformerBank(weights, geom, directions, spec, sched, c)


def select_max_energy(bank: BeamformerBank, frames) -> tuple[int, np.ndarray]:
    """Pick the beam with the largest total output energy.

    ``frames`` is a complex array (T, K, M) or a sequence of SpectralFrame.
    Ties go to the lowest index. Returns (index, output (T, K)).
    """
    if isinstance(frames, np.ndarray):
        spectra = frames
    else:
        frames = list(frames)
        if not frames:
            raise ValueError("empty frame sequence")
        spectra = stack_spectral_frames(frames)
    if spectra.ndim != 3 or spectra.shape[0] == 0:
        raise ValueError("empty frame sequence")
    outputs = bank.apply(spectra)
    energy = np.sum(outputs.real**2 + outputs.imag**2, axis=(1, 2))
    idx = int(np.argmax(energy))
    return idx, outputs[idx]
