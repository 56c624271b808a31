"""Narrowband geometric MIMO channel, DFT codebooks and per-beam gains.

Conventions used throughout the package:

* Arrays are uniform linear arrays. ``orientation`` is the global azimuth
  (degrees) of the array broadside; steering uses the angle relative to it.
* The steering phase of element ``n`` is ``exp(-j*2*pi*d*n*sin(az))`` with
  ``d`` the spacing in wavelengths (``exp(-j*pi*n*sin(az))`` at half-wavelength),
  normalized to unit norm. Elevation is accepted and ignored.
* Beam pairs ``(r, t)`` flatten to ``i = t * |C_R| + r`` (zero-based).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyChannelError, InvalidInputError, ShapeError


@dataclass(frozen=True)
class ArrayConfig:
    num_elements: int
    element_spacing: float = 0.5
    orientation: float = 0.0
    geometry: str = "uniform-linear"

    def __post_init__(self):
        if int(self.num_elements) != self.num_elements or self.num_elements < 1:
            raise InvalidInputError(f"num_elements must be a positive integer, got {self.num_elements}")
        if not self.element_spacing > 0:
            raise InvalidInputError("element_spacing must be > 0")
        if self.geometry != "uniform-linear":
            raise InvalidInputError(f"unsupported geometry {self.geometry!r}")


@dataclass(frozen=True)
class MultipathComponent:
    gain: complex
    aod_az: float
    aod_el: float
    aoa_az: float
    aoa_el: float

    def __post_init__(self):
        if not np.isfinite(self.gain):
            raise InvalidInputError("path gain must be finite")
        for name in ("aod_az", "aoa_az"):
            v = getattr(self, name)
            if not (np.isfinite(v) and -180.0 <= v <= 180.0):
                raise InvalidInputError(f"{name}={v} outside [-180, 180]")
        for name in ("aod_el", "aoa_el"):
            v = getattr(self, name)
            if not (np.isfinite(v) and -90.0 <= v <= 90.0):
                raise InvalidInputError(f"{name}={v} outside [-90, 90]")


@dataclass(frozen=True)
class Codebook:
    """Row ``k`` of ``vectors`` is the k-th codeword."""

    vectors: np.ndarray

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def size(self) -> int:
        return self.vectors.shape[1]


def wrap_degrees(angle):
    """Wrap to [-180, 180)."""
    return (np.asarray(angle, dtype=float) + 180.0) % 360.0 - 180.0


def steering_vector(array: ArrayConfig, azimuth: float, elevation: float = 0.0) -> np.ndarray:
    if not (np.isfinite(azimuth) and np.isfinite(elevation)):
        raise InvalidInputError("steering angles must be finite")
    rel = np.deg2rad(azimuth - array.orientation)
    n = np.arange(array.num_elements)
    phase = -2j * np.pi * array.element_spacing * n * np.sin(rel)
    return np.exp(phase) / np.sqrt(array.num_elements)


def channel_matrix(mpcs, tx: ArrayConfig, rx: ArrayConfig) -> np.ndarray:
    """N_rx x N_tx matrix ``sqrt(Ntx*Nrx) * sum_l a_l a_r(AoA_l) a_t(AoD_l)^H``."""
    if len(mpcs) == 0:
        raise EmptyChannelError("channel needs at least one multipath component")
    H = np.zeros((rx.num_elements, tx.num_elements), dtype=complex)
    for p in mpcs:
        a_r = steering_vector(rx, p.aoa_az, p.aoa_el)
        a_t = steering_vector(tx, p.aod_az, p.aod_el)
        H += p.gain * np.outer(a_r, a_t.conj())
    H *= np.sqrt(tx.num_elements * rx.num_elements)
    if not np.all(np.isfinite(H)):
        raise InvalidInputError("channel matrix has non-finite entries")
    return H


def dft_codebook(n: int) -> Codebook:
    if int(n) != n or n < 1:
        raise InvalidInputError(f"codebook size must be a positive integer, got {n}")
    k = np.arange(n)
    vectors = np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)
    return Codebook(vectors)


def codebook_boresights(n: int, orientation: float = 0.0) -> np.ndarray:
    """Global azimuth (degrees) at which each DFT codeword peaks.

    Codeword ``k`` peaks at ``sin(az) = 2k/n`` folded into [-1, 1); only the
    front half-plane of the ULA is reported.
    """
    u = 2.0 * np.arange(n) / n
    u = np.where(u >= 1.0, u - 2.0, u)
    return wrap_degrees(orientation + np.rad2deg(np.arcsin(u)))


def beam_gains(H, ct: Codebook, cr: Codebook, complex_values: bool = False) -> np.ndarray:
    """Combined channel ``w_r^H H f_t`` for every pair, flattened as ``t*|C_R| + r``.

    Returns magnitudes, or the complex values when ``complex_values`` is set.
    """
    H = np.asarray(H)
    if H.ndim != 2 or H.shape != (cr.size, ct.size):
        raise ShapeError(f"H has shape {H.shape}, codebooks need {(cr.size, ct.size)}")
    Y = cr.vectors.conj() @ H @ ct.vectors.T  # Y[r, t]
    y = Y.T.reshape(-1)
    return y if complex_values else np.abs(y)


def split_index(i: int, n_rx: int) -> tuple[int, int]:
    """Inverse of the pair flattening: returns ``(t, r)``."""
    return divmod(int(i), n_rx)


def best_beam(gains) -> int:
    g = np.abs(np.asarray(gains))
    if g.size == 0:
        raise InvalidInputError("empty gain vector")
    # np.argmax returns the first maximum, i.e. lowest index on ties
    return int(np.argmax(g))


def rsrp(gains, n_rs: int = 1, noise_power: float = 0.0, rng=None) -> np.ndarray:
    """Per-beam RSRP in dB: mean of ``|y_i + w|^2`` over ``n_rs`` RS resources.

    ``w`` is circular complex Gaussian noise of power ``noise_power``; with zero
    noise the result is exactly ``20*log10|y_i|``. Transmit power is 1.
    """
    if n_rs < 1:
        raise InvalidInputError("n_rs must be >= 1")
    if noise_power < 0:
        raise InvalidInputError("noise_power must be >= 0")
    y = np.asarray(gains)
    if noise_power == 0:
        with np.errstate(divide="ignore"):
            return 20.0 * np.log10(np.abs(y))
    rng = np.random.default_rng(rng)
    shape = (n_rs,) + y.shape
    w = np.sqrt(noise_power / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    power = np.mean(np.abs(y[None, ...] + w) ** 2, axis=0)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(power)
