"""Closed-loop prediction, attenuation metrics and evaluation experiments."""

from __future__ import annotations

import concurrent.futures
import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

from inear_anc.design import ControllerDesign
from inear_anc.errors import ClosedLoopSingularityError, ConfigError, SpectralError
from inear_anc.scene import AcousticPathSet, DoA, NoiseFieldSpec, simulate_incident
from inear_anc.spectral import (
    UNEXCITED_FLOOR,
    FrequencyGrid,
    SpectralEstimate,
    biased_correlation,
    correlation_to_spectrum,
    estimate_spectra,
    fir_frequency_response,
    path_frequency_response,
)

logger = logging.getLogger(__name__)

SINGULARITY_FLOOR = 1e-9
# Lowest reported P_on / P_off (-300 dB); a perfect cancellation stays finite.
RESIDUAL_FLOOR = 1e-30


@dataclass(frozen=True)
class EvaluationBand:
    """Frequency band [f_low, f_high] and, once resolved on a grid, its bin range."""

    f_low: float = 100.0
    f_high: float = 4000.0
    k_low: int | None = None
    k_high: int | None = None

    def __post_init__(self):
        if not 0 <= self.f_low < self.f_high:
            raise ConfigError(
                f"band must satisfy 0 <= f_low < f_high, got ({self.f_low}, {self.f_high})"
            )
        if (self.k_low is None) != (self.k_high is None):
            raise ConfigError("k_low and k_high must be given together")
        if self.k_low is not None and not 0 <= self.k_low <= self.k_high:
            raise ConfigError(f"band bins must satisfy 0 <= k_low <= k_high, got "
                              f"({self.k_low}, {self.k_high})")

    def resolve(self, grid: FrequencyGrid) -> EvaluationBand:
        """k_low: first bin at or above f_low; k_high: last bin at or below f_high."""
        if self.f_high > grid.sample_rate / 2.0:
            raise ConfigError(
                f"f_high {self.f_high} Hz exceeds the Nyquist frequency {grid.sample_rate / 2:g} Hz"
            )
        k_low, k_high = grid.bin_at_or_above(self.f_low), grid.bin_at_or_below(self.f_high)
        if k_low > k_high:
            raise ConfigError(f"band {self.f_low}-{self.f_high} Hz contains no bin")
        return replace(self, k_low=k_low, k_high=k_high)

    def to_dict(self) -> dict:
        return {"f_low": self.f_low, "f_high": self.f_high}


def _taps(w) -> np.ndarray:
    if isinstance(w, ControllerDesign):
        return w.w
    return np.asarray(w, dtype=float)


def _closed_loop_gain(w, spectra: SpectralEstimate, paths: AcousticPathSet) -> np.ndarray:
    """W/(1 + W B_x) S on the spectra grid."""
    grid = spectra.grid
    big_w = fir_frequency_response(_taps(w), grid)
    den = 1.0 + big_w * path_frequency_response(paths.feedback, grid)
    magnitude = np.abs(den)
    k = int(np.argmin(magnitude))
    if magnitude[k] < SINGULARITY_FLOOR:
        raise ClosedLoopSingularityError(
            "closed loop 1 + W B_x vanishes", bin_index=k, frequency=grid.frequency_of(k)
        )
    return big_w / den * path_frequency_response(paths.secondary, grid)


def closed_loop_psd(w, spectra: SpectralEstimate, paths: AcousticPathSet) -> np.ndarray:
    """Residual PSD at the ear drum: coherence floor plus the model mismatch term.

    The floor (1 - γ²) Φ_dd is written as Φ_dd - |Φ_dx|²/Φ_xx without clamping
    γ², so the zero filter returns Φ_dd even where an estimate has γ² > 1.
    """
    excited = spectra.excited()
    phi_xx = np.where(excited, spectra.phi_xx, 1.0)
    coherent = np.where(excited, np.abs(spectra.phi_dx) ** 2 / phi_xx, 0.0)
    mismatch = spectra.transfer() - _closed_loop_gain(w, spectra, paths)
    residual = np.where(excited, np.abs(mismatch) ** 2 * spectra.phi_xx, 0.0)
    return np.maximum(spectra.phi_dd - coherent + residual, 0.0)


def band_power(psd, band: EvaluationBand, grid: FrequencyGrid | None = None) -> float:
    """Mean of ``psd`` over bins k_low … k_high inclusive."""
    if band.k_low is None:
        if grid is None:
            raise ConfigError("band is not resolved on a grid")
        band = band.resolve(grid)
    psd = np.asarray(psd, dtype=float)
    if band.k_high >= psd.size:
        raise ConfigError(f"band bins {band.k_low}-{band.k_high} exceed {psd.size} bins")
    return float(np.mean(psd[band.k_low : band.k_high + 1]))


def _ratio_db(p_on: float, p_off: float) -> float:
    if not p_off > 0:
        raise SpectralError("ANC-off band power is zero; attenuation is undefined")
    return 10.0 * math.log10(max(p_on, RESIDUAL_FLOOR * p_off) / p_off)


def attenuation(w, spectra: SpectralEstimate, paths: AcousticPathSet,
                band: EvaluationBand) -> float:
    """10 log10(P_on / P_off) in dB; negative means attenuation."""
    band = band.resolve(spectra.grid)
    p_on = band_power(closed_loop_psd(w, spectra, paths), band)
    return _ratio_db(p_on, band_power(spectra.phi_dd, band))


@dataclass(frozen=True, eq=False)
class AttenuationProfile:
    """Band attenuation per DoA for one controller on one repetition."""

    doas: tuple[DoA, ...]
    attenuation_db: np.ndarray
    p_on: np.ndarray
    p_off: np.ndarray
    label: str = "w"
    repetition_id: int = 0
    field_kind: str = "single_doa"
    seed: int = 0
    band: EvaluationBand = field(default_factory=EvaluationBand)

    def __post_init__(self):
        for name in ("attenuation_db", "p_on", "p_off"):
            values = np.asarray(getattr(self, name), dtype=float)
            if values.shape != (len(self.doas),):
                raise ConfigError(f"{name} does not match the {len(self.doas)} DoAs")
            object.__setattr__(self, name, values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttenuationProfile):
            return NotImplemented
        return (
            self.doas == other.doas
            and self.metadata() == other.metadata()
            and all(np.array_equal(getattr(self, n), getattr(other, n))
                    for n in ("attenuation_db", "p_on", "p_off"))
        )

    __hash__ = None

    def at(self, doa: DoA) -> float:
        try:
            return float(self.attenuation_db[self.doas.index(doa)])
        except ValueError:
            raise ConfigError(f"DoA {doa} is not part of the profile") from None

    def best(self) -> tuple[DoA, float]:
        i = int(np.argmin(self.attenuation_db))
        return self.doas[i], float(self.attenuation_db[i])

    def worst(self) -> tuple[DoA, float]:
        i = int(np.argmax(self.attenuation_db))
        return self.doas[i], float(self.attenuation_db[i])

    def metadata(self) -> dict:
        return {
            "controller": self.label,
            "repetition": self.repetition_id,
            "field": self.field_kind,
            "seed": self.seed,
            "band": self.band.to_dict(),
        }

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["doa_deg", "attenuation_db", "p_on", "p_off"])
            for doa, a, on, off in zip(self.doas, self.attenuation_db, self.p_on, self.p_off):
                writer.writerow([f"{doa.azimuth:g}", f"{a:.17g}", f"{on:.17g}", f"{off:.17g}"])
        path.with_suffix(".json").write_text(json.dumps(self.metadata(), indent=2) + "\n")
        return path


@dataclass(frozen=True, eq=False)
class FrequencyProfile:
    """Per-bin ANC-off and ANC-on PSD; attenuation is NaN where Φ_dd is below the floor."""

    frequencies: np.ndarray
    phi_dd: np.ndarray
    phi_ee: np.ndarray
    attenuation_db: np.ndarray
    coherence: np.ndarray
    label: str = "w"
    repetition_id: int = 0

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["freq_hz", "phi_dd", "phi_ee", "attenuation_db", "coherence"])
            for f, dd, ee, a, c in zip(self.frequencies, self.phi_dd, self.phi_ee,
                                       self.attenuation_db, self.coherence):
                gap = "" if math.isnan(a) else f"{a:.17g}"
                writer.writerow([f"{f:.17g}", f"{dd:.17g}", f"{ee:.17g}", gap, f"{c:.17g}"])
        metadata = {"controller": self.label, "repetition": self.repetition_id}
        path.with_suffix(".json").write_text(json.dumps(metadata, indent=2) + "\n")
        return path


def frequency_profile(w, spectra: SpectralEstimate, paths: AcousticPathSet,
                      label: str = "w") -> FrequencyProfile:
    phi_ee = closed_loop_psd(w, spectra, paths)
    phi_dd = spectra.phi_dd
    peak = float(np.max(phi_dd)) if phi_dd.size else 0.0
    audible = phi_dd >= UNEXCITED_FLOOR * peak if peak > 0 else np.zeros(phi_dd.shape, bool)
    ratio = np.maximum(phi_ee / np.where(audible, phi_dd, 1.0), RESIDUAL_FLOOR)
    db = np.where(audible, 10.0 * np.log10(ratio), np.nan)
    return FrequencyProfile(
        frequencies=spectra.grid.frequencies,
        phi_dd=phi_dd,
        phi_ee=phi_ee,
        attenuation_db=db,
        coherence=spectra.coherence(),
        label=label,
        repetition_id=spectra.repetition_id,
    )


@dataclass(frozen=True)
class SweepSettings:
    """Excitation and estimation parameters shared by every sweep DoA."""

    dft_length: int = 8192
    secondary_length: int = 712
    duration: float = 4.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if not self.duration > 0:
            raise ConfigError(f"duration must be positive, got {self.duration}")


def _sweep_doas(paths: AcousticPathSet, resolution: float | None) -> list[DoA]:
    if resolution is None:
        return paths.doas
    if not resolution > 0:
        raise ConfigError(f"sweep resolution must be positive, got {resolution}")
    count = int(round(360.0 / resolution))
    doas = [DoA(i * resolution) for i in range(count)]
    for doa in doas:
        paths.doa_index(doa)
    return doas


def doa_sweep(w, paths: AcousticPathSet, band: EvaluationBand, settings: SweepSettings,
              resolution: float | None = None, label: str | None = None) -> AttenuationProfile:
    """Attenuation per DoA, each DoA excited on its own by a seeded white source."""
    taps = _taps(w)
    label = label or (w.label if isinstance(w, ControllerDesign) else "w")
    grid = FrequencyGrid(settings.dft_length, paths.sample_rate)
    resolved = band.resolve(grid)
    doas = _sweep_doas(paths, resolution)

    def evaluate_doa(doa: DoA) -> tuple[float, float]:
        noise = NoiseFieldSpec.single(doa, settings.duration, paths.sample_rate, settings.seed)
        x, d = simulate_incident(paths, noise)
        spectra = estimate_spectra(x, d, settings.secondary_length, taps.size, grid,
                                   paths.repetition_id)
        p_on = band_power(closed_loop_psd(taps, spectra, paths), resolved)
        return p_on, band_power(spectra.phi_dd, resolved)

    if settings.workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=settings.workers) as executor:
            powers = list(executor.map(evaluate_doa, doas))
    else:
        powers = [evaluate_doa(doa) for doa in doas]
    p_on = np.array([p[0] for p in powers])
    p_off = np.array([p[1] for p in powers])
    profile = AttenuationProfile(
        doas=tuple(doas),
        attenuation_db=np.array([_ratio_db(on, off) for on, off in powers]),
        p_on=p_on,
        p_off=p_off,
        label=label,
        repetition_id=paths.repetition_id,
        seed=settings.seed,
        band=band,
    )
    best_doa, best = profile.best()
    logger.info("sweep %s on repetition %d: best %.2f dB at %s deg", label,
                paths.repetition_id, best, best_doa)
    return profile


@dataclass(frozen=True)
class ReinsertionReport:
    """Held-out and matched-insertion sweeps per controller label."""

    held_out: int
    held_out_profiles: dict[str, AttenuationProfile]
    matched_profiles: dict[str, AttenuationProfile]

    def improvement(self, baseline: str, candidate: str, doa: DoA) -> float:
        """dB of extra attenuation of ``candidate`` over ``baseline`` on the held-out insertion."""
        return self._held(baseline).at(doa) - self._held(candidate).at(doa)

    def degradation(self, label: str, doa: DoA) -> float:
        """dB lost by ``label`` between its matched insertion and the held-out one."""
        return self._held(label).at(doa) - self.matched_profiles[label].at(doa)

    def _held(self, label: str) -> AttenuationProfile:
        try:
            return self.held_out_profiles[label]
        except KeyError:
            raise ConfigError(f"no controller labelled {label!r} in the report") from None

    def rows(self) -> list[dict]:
        out = []
        for label, held in self.held_out_profiles.items():
            matched = self.matched_profiles[label]
            for doa, a in zip(held.doas, held.attenuation_db):
                out.append({
                    "doa_deg": doa.azimuth,
                    "controller": label,
                    "held_out_db": float(a),
                    "matched_db": matched.at(doa),
                })
        return out

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["doa_deg", "controller", "held_out_db", "matched_db"])
            for row in self.rows():
                writer.writerow([f"{row['doa_deg']:g}", row["controller"],
                                 f"{row['held_out_db']:.17g}", f"{row['matched_db']:.17g}"])
        return path


def reinsertion_experiment(designs: list[ControllerDesign], paths_all: list[AcousticPathSet],
                           held_out: int, band: EvaluationBand, settings: SweepSettings,
                           resolution: float | None = None) -> ReinsertionReport:
    """Sweep each design on a held-out reinsertion and on its own nominal insertion."""
    by_id = {p.repetition_id: p for p in paths_all}
    if held_out not in by_id:
        raise ConfigError(f"held-out repetition {held_out} is not in the scene")
    if designs and all(held_out in d.repetitions for d in designs):
        raise ConfigError(f"every design was fitted on held-out repetition {held_out}")
    labels = [d.label for d in designs]
    if len(set(labels)) != len(labels):
        raise ConfigError("controller labels must be unique")
    held, matched = {}, {}
    for design in designs:
        held[design.label] = doa_sweep(design, by_id[held_out], band, settings, resolution)
        nominal = by_id.get(design.r0)
        if nominal is None:
            raise ConfigError(f"nominal repetition {design.r0} of {design.label} is missing")
        matched[design.label] = doa_sweep(design, nominal, band, settings, resolution)
    return ReinsertionReport(held_out, held, matched)


def simulate_closed_loop(w, paths: AcousticPathSet,
                         noise: NoiseFieldSpec) -> tuple[np.ndarray, np.ndarray]:
    """Run the feedforward loop sample by sample; returns (e, d).

    The reference microphone hears m = x - B_x * u and the controller plays
    u = W * m. The instantaneous feedback tap b[0] acts one sample late.
    """
    taps = _taps(w)
    x, d = simulate_incident(paths, noise)
    b = np.zeros(max(2, len(paths.feedback) + 1))
    b[: len(paths.feedback)] = paths.feedback.samples
    b[1] += b[0]
    b[0] = 0.0
    # u (1 + W B) = W x; the denominator leads with 1 because b[0] is zero.
    denominator = np.convolve(taps, b)
    denominator[0] = 1.0
    u = signal.lfilter(taps, denominator, x)
    e = d - signal.convolve(u, paths.secondary.samples, mode="full")[: d.size]
    return e, d


def time_domain_attenuation(w, paths: AcousticPathSet, noise: NoiseFieldSpec,
                            band: EvaluationBand, dft_length: int,
                            secondary_length: int) -> float:
    """Band attenuation measured on the simulated residual instead of predicted."""
    taps = _taps(w)
    e, d = simulate_closed_loop(taps, paths, noise)
    settle = min(taps.size + secondary_length, e.size // 2)
    e, d = e[settle:], d[settle:]
    grid = FrequencyGrid(dft_length, paths.sample_rate)
    tau = min(secondary_length + taps.size - 1, (dft_length - 1) // 2)
    resolved = band.resolve(grid)
    phi_ee = correlation_to_spectrum(biased_correlation(e, e, tau), grid).real
    phi_dd = correlation_to_spectrum(biased_correlation(d, d, tau), grid).real
    return _ratio_db(band_power(phi_ee, resolved), band_power(phi_dd, resolved))
