"""Tests for the error hierarchy."""

import pytest

from inear_anc.errors import (
    AncError,
    ClosedLoopSingularityError,
    ConfigError,
    InfeasibleDesignError,
    IngestionError,
    SpectralError,
)


def describe_exit_codes():
    @pytest.mark.parametrize(("error", "code"), [
        (AncError, 1),
        (ConfigError, 2),
        (SpectralError, 2),
        (IngestionError, 3),
        (InfeasibleDesignError, 4),
        (ClosedLoopSingularityError, 5),
    ])
    def it_maps_each_error_to_its_code(error, code):
        assert error("boom").exit_code == code

    def it_keeps_value_errors_catchable():
        with pytest.raises(ValueError):
            raise ConfigError("rho must be in (0, 1)")


def describe_ingestion_error():
    def it_names_the_failing_entry():
        error = IngestionError("missing file", repetition=2, role="h_x", doa=90.0)
        assert str(error) == "missing file (repetition 2, role h_x, DoA 90 deg)"
        assert error.repetition == 2

    def it_leaves_plain_messages_alone():
        assert str(IngestionError("manifest not found")) == "manifest not found"


def describe_closed_loop_singularity_error():
    def it_names_the_bin_and_frequency():
        error = ClosedLoopSingularityError("1 + W B_x vanishes", bin_index=4, frequency=172.27)
        assert str(error) == "1 + W B_x vanishes at bin 4 (172.3 Hz)"
        assert error.bin_index == 4
