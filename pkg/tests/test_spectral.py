"""Tests for correlogram estimation and grid frequency responses."""

import numpy as np
import pytest

from inear_anc.errors import SpectralError
from inear_anc.spectral import (
    CorrelationEstimate,
    FrequencyGrid,
    ImpulseResponse,
    SpectralEstimate,
    biased_correlation,
    correlation_to_spectrum,
    estimate_spectra,
    fir_frequency_response,
    path_frequency_response,
)


def describe_frequency_grid():
    def it_spans_dc_to_nyquist():
        grid = FrequencyGrid(8, 8000.0)
        assert grid.n_bins == 5
        assert grid.omega[-1] == pytest.approx(np.pi)
        assert grid.frequencies[-1] == 4000.0

    def it_finds_band_edges():
        grid = FrequencyGrid(16, 16.0)
        assert grid.bin_at_or_above(2.5) == 3
        assert grid.bin_at_or_below(2.5) == 2
        assert grid.bin_at_or_above(3.0) == 3
        assert grid.bin_at_or_below(3.0) == 3

    def it_rejects_odd_lengths():
        with pytest.raises(SpectralError, match="even"):
            FrequencyGrid(9, 8.0)


def describe_impulse_response():
    def it_is_read_only():
        ir = ImpulseResponse([1.0, 0.5], 8.0)
        with pytest.raises(ValueError):
            ir.samples[0] = 2.0

    def it_compares_by_value():
        assert ImpulseResponse([1.0, 0.5], 8.0) == ImpulseResponse(np.array([1.0, 0.5]), 8)
        assert ImpulseResponse([1.0, 0.5], 8.0) != ImpulseResponse([1.0, 0.5], 16.0)

    def it_rejects_non_finite_samples():
        with pytest.raises(SpectralError, match="non-finite"):
            ImpulseResponse([1.0, np.nan], 8.0)


def describe_biased_correlation():
    def it_matches_the_mean_square_at_lag_zero():
        x = np.random.default_rng(3).standard_normal(1000)
        corr = biased_correlation(x, x, 5)
        assert corr.at(0) == pytest.approx(np.mean(x**2), rel=1e-12)

    def it_peaks_at_the_delay():
        x = np.random.default_rng(4).standard_normal(4000)
        d = np.concatenate([np.zeros(5), x[:-5]])
        corr = biased_correlation(d, x, 10)
        assert corr.lags[np.argmax(corr.values)] == 5

    def it_divides_by_the_record_length():
        corr = biased_correlation([1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0], 2)
        np.testing.assert_allclose(corr.values, [0.5, 0.75, 1.0, 0.75, 0.5])

    def it_rejects_mismatched_lengths():
        with pytest.raises(SpectralError, match="lengths differ"):
            biased_correlation(np.ones(10), np.ones(11), 2)

    def it_rejects_lags_beyond_the_record():
        with pytest.raises(SpectralError, match="tau_max"):
            biased_correlation(np.ones(10), np.ones(10), 10)


def describe_correlation_to_spectrum():
    def it_maps_a_lag_zero_impulse_to_a_flat_spectrum():
        grid = FrequencyGrid(8, 8.0)
        spectrum = correlation_to_spectrum(CorrelationEstimate(np.array([0.0, 2.0, 0.0]), 1), grid)
        np.testing.assert_allclose(spectrum, np.full(5, 2.0))

    def it_wraps_negative_lags_to_the_buffer_end():
        grid = FrequencyGrid(8, 8.0)
        spectrum = correlation_to_spectrum(CorrelationEstimate(np.array([1.0, 0.0, 0.0]), 1), grid)
        np.testing.assert_allclose(spectrum, np.exp(1j * grid.omega), atol=1e-12)

    def it_rejects_spans_longer_than_the_dft():
        with pytest.raises(SpectralError, match="exceeds the DFT length"):
            correlation_to_spectrum(CorrelationEstimate(np.zeros(9), 4), FrequencyGrid(8, 8.0))


def describe_estimate_spectra():
    def it_recovers_a_pure_gain():
        x = np.random.default_rng(5).standard_normal(8000)
        grid = FrequencyGrid(64, 8000.0)
        spectra = estimate_spectra(x, 0.5 * x, 8, 4, grid)
        np.testing.assert_allclose(spectra.transfer(), 0.5, atol=1e-9)
        np.testing.assert_allclose(spectra.coherence(), 1.0, atol=1e-9)

    def it_reports_the_lag_zero_power():
        x = np.random.default_rng(6).standard_normal(4000)
        spectra = estimate_spectra(x, x, 8, 4, FrequencyGrid(64, 8000.0), repetition_id=3)
        assert spectra.power_x == pytest.approx(np.mean(x**2))
        assert spectra.repetition_id == 3
        assert np.all(spectra.phi_xx >= 0)

    def it_rejects_records_shorter_than_the_lag_span():
        grid = FrequencyGrid(64, 8000.0)
        with pytest.raises(SpectralError, match="shorter than 2\\*tau_max"):
            estimate_spectra(np.ones(20), np.ones(20), 8, 4, grid)


def describe_spectral_estimate():
    def it_leaves_unexcited_bins_out():
        grid = FrequencyGrid(8, 8.0)
        phi_xx = np.array([1.0, 1.0, 0.0, 1.0, 1.0])
        spectra = SpectralEstimate(phi_xx, 0.5 * phi_xx, 0.25 * phi_xx, grid)
        assert spectra.excited().tolist() == [True, True, False, True, True]
        assert spectra.transfer()[2] == 0
        assert spectra.coherence()[2] == 0

    def it_fills_power_by_parseval():
        grid = FrequencyGrid(8, 8.0)
        spectra = SpectralEstimate(np.full(5, 2.0), np.zeros(5), np.ones(5), grid)
        assert spectra.power_x == pytest.approx(2.0)

    def it_rejects_negative_auto_spectra():
        grid = FrequencyGrid(8, 8.0)
        with pytest.raises(SpectralError, match="nonnegative"):
            SpectralEstimate(-np.ones(5), np.zeros(5), np.ones(5), grid)

    def it_rejects_arrays_off_the_grid():
        with pytest.raises(SpectralError, match="phi_xx"):
            SpectralEstimate(np.ones(4), np.zeros(5), np.ones(5), FrequencyGrid(8, 8.0))


def describe_frequency_responses():
    def it_is_flat_for_a_unit_tap():
        np.testing.assert_allclose(fir_frequency_response([1.0], FrequencyGrid(8, 8.0)), 1.0)

    def it_rejects_filters_longer_than_the_grid():
        with pytest.raises(SpectralError, match="exceeds the DFT length"):
            fir_frequency_response(np.ones(9), FrequencyGrid(8, 8.0))

    def it_samples_the_dtft_of_long_paths():
        grid = FrequencyGrid(8, 8.0)
        h = np.random.default_rng(7).standard_normal(13)
        n = np.arange(h.size)
        expected = np.array([np.sum(h * np.exp(-1j * omega * n)) for omega in grid.omega])
        np.testing.assert_allclose(path_frequency_response(h, grid), expected, atol=1e-12)
