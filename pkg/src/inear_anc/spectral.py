"""Correlogram spectral estimation and DFT-grid frequency responses.

Spectra are obtained the way the calibration stage needs them: biased auto-
and cross-correlations over a symmetric lag span, wrapped into a circular DFT
buffer (negative lags at the end) and transformed with a one-sided FFT. All
functions are pure; nothing here holds state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from inear_anc.errors import SpectralError

logger = logging.getLogger(__name__)

UNEXCITED_FLOOR = 1e-12
COHERENCE_TOLERANCE = 1e-6


def _as_signal(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise SpectralError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ImpulseResponse:
    """Sampled impulse response of one acoustic path."""

    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float).reshape(-1)
        if samples.size < 1:
            raise SpectralError("impulse response needs at least one sample")
        if not np.all(np.isfinite(samples)):
            raise SpectralError("impulse response contains non-finite samples")
        if not self.sample_rate > 0:
            raise SpectralError(f"sample_rate must be positive, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImpulseResponse):
            return NotImplemented
        return (
            self.sample_rate == other.sample_rate
            and self.samples.shape == other.samples.shape
            and bool(np.array_equal(self.samples, other.samples))
        )

    __hash__ = None

    @classmethod
    def zeros(cls, sample_rate: float, length: int = 1) -> ImpulseResponse:
        return cls(np.zeros(length), sample_rate)

    def scaled(self, factor: float) -> ImpulseResponse:
        return ImpulseResponse(self.samples * factor, self.sample_rate)


@dataclass(frozen=True)
class FrequencyGrid:
    """One-sided DFT grid Ω_k = 2πk/L_DFT, k = 0 … L_DFT/2."""

    dft_length: int
    sample_rate: float

    def __post_init__(self):
        if int(self.dft_length) != self.dft_length or self.dft_length < 2:
            raise SpectralError(f"dft_length must be an integer >= 2, got {self.dft_length}")
        if self.dft_length % 2:
            raise SpectralError(f"dft_length must be even, got {self.dft_length}")
        if not self.sample_rate > 0:
            raise SpectralError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "dft_length", int(self.dft_length))
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    @property
    def n_bins(self) -> int:
        return self.dft_length // 2 + 1

    @property
    def bins(self) -> np.ndarray:
        return np.arange(self.n_bins)

    @property
    def omega(self) -> np.ndarray:
        """Normalized angular frequency of every bin, 0 … π."""
        return 2.0 * np.pi * self.bins / self.dft_length

    @property
    def frequencies(self) -> np.ndarray:
        return self.bins * self.sample_rate / self.dft_length

    def frequency_of(self, k: int) -> float:
        return k * self.sample_rate / self.dft_length

    def bin_at_or_above(self, frequency: float) -> int:
        """Smallest bin whose frequency is >= ``frequency``."""
        return int(np.searchsorted(self.frequencies, frequency, side="left"))

    def bin_at_or_below(self, frequency: float) -> int:
        """Largest bin whose frequency is <= ``frequency``."""
        return int(np.searchsorted(self.frequencies, frequency, side="right")) - 1


@dataclass(frozen=True, eq=False)
class CorrelationEstimate:
    """Correlation values over lags -lag_max … +lag_max."""

    values: np.ndarray
    lag_max: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (2 * self.lag_max + 1,):
            raise SpectralError(
                f"correlation of length {values.size} does not match lag_max {self.lag_max}"
            )
        object.__setattr__(self, "values", values)

    @property
    def lags(self) -> np.ndarray:
        return np.arange(-self.lag_max, self.lag_max + 1)

    def at(self, lag: int) -> float:
        return float(self.values[lag + self.lag_max])


@dataclass(frozen=True, eq=False)
class SpectralEstimate:
    """Per-repetition Φ̂_xx, Φ̂_dx, Φ̂_dd on a DFT grid."""

    phi_xx: np.ndarray
    phi_dx: np.ndarray
    phi_dd: np.ndarray
    grid: FrequencyGrid
    repetition_id: int = 0
    power_x: float = field(default=float("nan"))

    def __post_init__(self):
        n = self.grid.n_bins
        phi_xx = np.asarray(self.phi_xx, dtype=float)
        phi_dd = np.asarray(self.phi_dd, dtype=float)
        phi_dx = np.asarray(self.phi_dx, dtype=complex)
        for name, arr in (("phi_xx", phi_xx), ("phi_dx", phi_dx), ("phi_dd", phi_dd)):
            if arr.shape != (n,):
                raise SpectralError(f"{name} has shape {arr.shape}, grid expects ({n},)")
        if np.any(phi_xx < 0) or np.any(phi_dd < 0):
            raise SpectralError("auto spectra must be nonnegative")
        object.__setattr__(self, "phi_xx", phi_xx)
        object.__setattr__(self, "phi_dx", phi_dx)
        object.__setattr__(self, "phi_dd", phi_dd)
        if np.isnan(self.power_x):
            # Parseval: φ_xx(0) is the mean of the two-sided spectrum.
            two_sided = np.concatenate([phi_xx, phi_xx[-2:0:-1]])
            object.__setattr__(self, "power_x", float(np.mean(two_sided)))

    def excited(self) -> np.ndarray:
        """Mask of bins where Φ̂_xx is above the relative floor."""
        peak = float(np.max(self.phi_xx)) if self.phi_xx.size else 0.0
        if peak <= 0:
            return np.zeros(self.phi_xx.shape, dtype=bool)
        return self.phi_xx >= UNEXCITED_FLOOR * peak

    def transfer(self) -> np.ndarray:
        """Φ̂_dx/Φ̂_xx on excited bins, zero elsewhere."""
        out = np.zeros(self.phi_dx.shape, dtype=complex)
        mask = self.excited()
        out[mask] = self.phi_dx[mask] / self.phi_xx[mask]
        return out

    def coherence(self) -> np.ndarray:
        """Magnitude-squared coherence clamped to [0, 1]; 0 where undefined."""
        out = np.zeros(self.phi_xx.shape)
        peak_dd = float(np.max(self.phi_dd)) if self.phi_dd.size else 0.0
        mask = self.excited() & (self.phi_dd > UNEXCITED_FLOOR * peak_dd)
        out[mask] = np.abs(self.phi_dx[mask]) ** 2 / (self.phi_xx[mask] * self.phi_dd[mask])
        return np.clip(out, 0.0, 1.0)


def biased_correlation(a, b, tau_max: int) -> CorrelationEstimate:
    """φ̂(τ) = (1/N) Σ_n a(n+τ) b(n) for |τ| <= tau_max, zeros outside the record."""
    a = _as_signal(a, "a")
    b = _as_signal(b, "b")
    if a.size != b.size:
        raise SpectralError(f"signal lengths differ: {a.size} != {b.size}")
    n = a.size
    if n == 0:
        raise SpectralError("signals are empty")
    if tau_max < 0 or tau_max >= n:
        raise SpectralError(f"tau_max must be in [0, {n - 1}], got {tau_max}")
    full = signal.correlate(a, b, mode="full")
    centre = n - 1
    values = full[centre - tau_max : centre + tau_max + 1] / n
    return CorrelationEstimate(values, int(tau_max))


def correlation_to_spectrum(corr: CorrelationEstimate, grid: FrequencyGrid) -> np.ndarray:
    """DFT of a lag sequence with negative lags wrapped to the buffer end."""
    tau = corr.lag_max
    if 2 * tau + 1 > grid.dft_length:
        raise SpectralError(
            f"correlation span {2 * tau + 1} exceeds the DFT length {grid.dft_length}"
        )
    buffer = np.zeros(grid.dft_length)
    buffer[: tau + 1] = corr.values[tau:]
    if tau:
        buffer[-tau:] = corr.values[:tau]
    return np.fft.rfft(buffer)


def _clamp_auto(spectrum: np.ndarray, name: str) -> np.ndarray:
    real = spectrum.real
    negative = real < 0
    if np.any(negative):
        peak = float(np.max(np.abs(real)))
        worst = float(-np.min(real))
        if peak > 0 and worst > 1e-9 * peak:
            logger.warning(
                "%s: clamped %d negative bins (worst %.3g relative)",
                name, int(negative.sum()), worst / peak,
            )
    return np.maximum(real, 0.0)


def estimate_spectra(
    x,
    d,
    secondary_length: int,
    filter_length: int,
    grid: FrequencyGrid,
    repetition_id: int = 0,
) -> SpectralEstimate:
    """Estimate Φ̂_xx, Φ̂_dx, Φ̂_dd with τ_max = L_s + L_w - 1."""
    x = _as_signal(x, "x")
    d = _as_signal(d, "d")
    tau_max = int(secondary_length) + int(filter_length) - 1
    if x.size != d.size:
        raise SpectralError(f"signal lengths differ: {x.size} != {d.size}")
    if x.size < 2 * tau_max:
        raise SpectralError(
            f"record of {x.size} samples is shorter than 2*tau_max = {2 * tau_max}"
        )
    phi_xx_lag = biased_correlation(x, x, tau_max)
    phi_xx = _clamp_auto(correlation_to_spectrum(phi_xx_lag, grid), "phi_xx")
    phi_dd = _clamp_auto(
        correlation_to_spectrum(biased_correlation(d, d, tau_max), grid), "phi_dd"
    )
    phi_dx = correlation_to_spectrum(biased_correlation(d, x, tau_max), grid)
    estimate = SpectralEstimate(
        phi_xx, phi_dx, phi_dd, grid, repetition_id, power_x=phi_xx_lag.at(0)
    )
    unexcited = int((~estimate.excited()).sum())
    if unexcited:
        logger.warning("repetition %d: %d unexcited bins", repetition_id, unexcited)
    logger.debug("repetition %d: spectra estimated with tau_max=%d", repetition_id, tau_max)
    return estimate


def fir_frequency_response(w, grid: FrequencyGrid) -> np.ndarray:
    """W(Ω_k) = Σ_m w[m] e^{-jΩ_k m} on bins 0 … L_DFT/2."""
    w = _as_signal(w, "w")
    if w.size > grid.dft_length:
        raise SpectralError(f"filter of {w.size} taps exceeds the DFT length {grid.dft_length}")
    return np.fft.rfft(w, n=grid.dft_length)


def path_frequency_response(ir: ImpulseResponse | np.ndarray, grid: FrequencyGrid) -> np.ndarray:
    """Exact DTFT samples of an impulse response of any length on the grid."""
    samples = ir.samples if isinstance(ir, ImpulseResponse) else _as_signal(ir, "ir")
    length = grid.dft_length
    if samples.size > length:
        padded = np.zeros(-(-samples.size // length) * length)
        padded[: samples.size] = samples
        samples = padded.reshape(-1, length).sum(axis=0)
    return np.fft.rfft(samples, n=length)
