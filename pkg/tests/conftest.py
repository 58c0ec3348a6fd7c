"""Test fixtures for inear-anc tests."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from inear_anc.scene import AcousticPathSet, DoA, PrimaryPaths, SceneConfig
from inear_anc.spectral import ImpulseResponse, SpectralEstimate


@pytest.fixture
def cli_runner():
    """Click CLI test runner."""
    return CliRunner()


@pytest.fixture
def make_paths():
    """Build a one-DoA path set from raw sample lists."""

    def build(secondary=(1.0,), feedback=(0.0,), h_x=(1.0,), h_d=(1.0,), sample_rate=8.0,
              repetition_id=0, doa=270.0):
        def ir(samples):
            return ImpulseResponse(np.asarray(samples, dtype=float), sample_rate)

        return AcousticPathSet(
            repetition_id=repetition_id,
            doa_paths={DoA(doa): PrimaryPaths(ir(h_x), ir(h_d))},
            secondary=ir(secondary),
            feedback=ir(feedback),
            sample_rate=sample_rate,
        )

    return build


@pytest.fixture
def make_spectra():
    """Spectra with a prescribed Φ_xx and primary transfer T = Φ_dx/Φ_xx.

    Φ_dd defaults to |T|² Φ_xx, i.e. a fully coherent pair.
    """

    def build(grid, target, phi_xx=None, phi_dd=None, repetition_id=0, power_x=1.0):
        phi_xx = np.ones(grid.n_bins) if phi_xx is None else np.asarray(phi_xx, dtype=float)
        target = np.broadcast_to(np.asarray(target, dtype=complex), (grid.n_bins,))
        phi_dx = target * phi_xx
        if phi_dd is None:
            phi_dd = np.abs(target) ** 2 * phi_xx
        return SpectralEstimate(phi_xx, phi_dx, phi_dd, grid, repetition_id, power_x)

    return build


@pytest.fixture
def small_scene_config():
    """Four DoAs at 8 kHz with short paths; keeps synthesis and sweeps quick."""
    return SceneConfig(repetitions=2, doa_resolution=90.0, sample_rate=8000.0, path_length=64)


@pytest.fixture
def fast_config_file(tmp_path):
    """Config file for CLI runs: fast preset on a four-DoA, two-repetition scene."""
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps({
        "scene": {"synthetic": {"repetitions": 2, "doa_resolution": 90.0}},
        "output_dir": str(tmp_path / "out"),
    }))
    return path
