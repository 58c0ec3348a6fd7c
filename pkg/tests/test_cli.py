"""Tests for CLI module."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from inear_anc.cli import main
from inear_anc.design import ControllerDesign, DesignConfig, SolverDiagnostics, export_controller
from inear_anc.errors import ClosedLoopSingularityError, InfeasibleDesignError


def _write_config(directory):
    path = directory / "experiment.json"
    path.write_text(json.dumps({
        "scene": {"synthetic": {"repetitions": 2, "doa_resolution": 90.0}},
        "output_dir": str(directory / "out"),
    }))
    return path


@pytest.fixture(scope="module")
def designed(tmp_path_factory):
    """Output tree with an ipsilateral controller designed on the fast preset."""
    directory = tmp_path_factory.mktemp("designed")
    config = _write_config(directory)
    result = CliRunner().invoke(main, ["design", "--preset", "fast", "--config", str(config),
                                       "--field", "ipsi", "--repetitions", "0"])
    assert result.exit_code == 0, result.output
    return config


def describe_main_group():
    def it_shows_version(cli_runner):
        result = cli_runner.invoke(main, ["--version"])
        assert result.exit_code == 0
        assert "0.1.0" in result.output

    def it_lists_the_commands(cli_runner):
        result = cli_runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        for command in ("synth", "design", "evaluate", "margins"):
            assert command in result.output

    def it_offers_the_paper_and_fast_presets(cli_runner):
        result = cli_runner.invoke(main, ["design", "--help"])
        assert result.exit_code == 0
        assert "[paper|fast]" in result.output


def describe_synth_command():
    def it_writes_an_archive(cli_runner, fast_config_file, tmp_path):
        result = cli_runner.invoke(main, ["synth", "--preset", "fast",
                                          "--config", str(fast_config_file)])
        assert result.exit_code == 0, result.output
        assert "DoAs: 4 (90 deg)" in result.output
        assert "sha256: " in result.output
        assert (tmp_path / "out" / "scene" / "manifest.json").is_file()

    def it_is_reproducible_for_a_seed(cli_runner, fast_config_file, tmp_path):
        outputs = []
        for name in ("a", "b"):
            result = cli_runner.invoke(main, ["synth", "--preset", "fast", "--seed", "7",
                                              "--config", str(fast_config_file),
                                              "--out", str(tmp_path / name)])
            assert result.exit_code == 0, result.output
            outputs.append([line for line in result.output.splitlines()
                            if line.startswith("sha256")])
        assert outputs[0] == outputs[1]

    def it_rejects_a_full_perturbation(cli_runner, fast_config_file):
        result = cli_runner.invoke(main, ["synth", "--preset", "fast", "--perturbation", "1.0",
                                          "--config", str(fast_config_file)])
        assert result.exit_code == 2
        assert "perturbation" in result.output


def describe_design_command():
    def it_writes_the_controller_files(designed):
        controllers = designed.parent / "out" / "controllers"
        for name in ("w_ipsi.csv", "w_ipsi.wav", "w_ipsi.json", "w_ipsi.config.json"):
            assert (controllers / name).is_file()
        sidecar = json.loads((controllers / "w_ipsi.json").read_text())
        assert sidecar["feasible"] is True
        assert sidecar["repetitions"] == [0]

    @pytest.mark.slow
    def it_is_bit_reproducible(cli_runner, tmp_path, designed):
        config = _write_config(tmp_path)
        result = cli_runner.invoke(main, ["design", "--preset", "fast", "--config", str(config),
                                          "--field", "ipsi", "--repetitions", "0"])
        assert result.exit_code == 0, result.output
        fresh = (tmp_path / "out" / "controllers" / "w_ipsi.csv").read_bytes()
        assert fresh == (designed.parent / "out" / "controllers" / "w_ipsi.csv").read_bytes()

    def it_fails_on_a_missing_archive(cli_runner, fast_config_file, tmp_path):
        result = cli_runner.invoke(main, ["design", "--preset", "fast",
                                          "--config", str(fast_config_file),
                                          "--archive", str(tmp_path / "nowhere")])
        assert result.exit_code == 3
        assert "manifest not found" in result.output

    def it_rejects_a_bad_repetition_list(cli_runner, fast_config_file):
        result = cli_runner.invoke(main, ["design", "--preset", "fast",
                                          "--config", str(fast_config_file),
                                          "--repetitions", "zero"])
        assert result.exit_code == 2

    def it_exits_with_the_infeasible_code(cli_runner, fast_config_file, mocker):
        mocker.patch("inear_anc.experiment.run_design",
                     side_effect=InfeasibleDesignError("no feasible improvement"))
        result = cli_runner.invoke(main, ["design", "--preset", "fast",
                                          "--config", str(fast_config_file)])
        assert result.exit_code == 4
        assert "Error: no feasible improvement" in result.output

    def it_exits_with_the_infeasible_code_when_nothing_improves(cli_runner, tmp_path):
        config = tmp_path / "silent.json"
        config.write_text(json.dumps({
            "scene": {"synthetic": {"repetitions": 1, "doa_resolution": 90.0,
                                    "passive_gain": 0.0}},
            "output_dir": str(tmp_path / "out"),
        }))
        result = cli_runner.invoke(main, ["design", "--preset", "fast", "--config", str(config),
                                          "--field", "ipsi"])
        assert result.exit_code == 4
        assert "nothing to attenuate" in result.output
        assert "Error: no feasible improvement over the initial controller for w_ipsi" in (
            result.output
        )
        assert (tmp_path / "out" / "controllers" / "w_ipsi.json").is_file()

    def it_exits_with_the_singularity_code(cli_runner, fast_config_file, mocker):
        mocker.patch("inear_anc.experiment.run_design",
                     side_effect=ClosedLoopSingularityError("closed loop 1 + W B_x vanishes",
                                                            bin_index=3))
        result = cli_runner.invoke(main, ["design", "--preset", "fast",
                                          "--config", str(fast_config_file)])
        assert result.exit_code == 5
        assert "at bin 3" in result.output


def describe_evaluate_command():
    def it_writes_sweeps_and_a_summary(cli_runner, designed):
        result = cli_runner.invoke(main, ["evaluate", "--preset", "fast",
                                          "--config", str(designed),
                                          "--plan", "sweep", "--controller", "w_ipsi"])
        assert result.exit_code == 0, result.output
        out = designed.parent / "out"
        assert (out / "profiles" / "w_ipsi_sweep_rep00.csv").is_file()
        assert (out / "summary.txt").is_file()
        assert "w_ipsi (repetition 0): best" in result.output

    def it_writes_a_frequency_profile(cli_runner, designed):
        result = cli_runner.invoke(main, ["evaluate", "--preset", "fast",
                                          "--config", str(designed),
                                          "--plan", "frequency", "--controller", "w_ipsi"])
        assert result.exit_code == 0, result.output
        path = designed.parent / "out" / "profiles" / "w_ipsi_frequency_rep00.csv"
        assert path.read_text().startswith("freq_hz,phi_dd,phi_ee,attenuation_db,coherence")

    @pytest.mark.slow
    def it_writes_identical_profiles_on_a_rerun(cli_runner, tmp_path):
        profiles = []
        for name in ("first", "second"):
            directory = tmp_path / name
            directory.mkdir()
            config = _write_config(directory)
            for command in (["design", "--field", "ipsi", "--repetitions", "0"],
                            ["evaluate", "--plan", "sweep", "--controller", "w_ipsi"]):
                result = cli_runner.invoke(main, [*command, "--preset", "fast",
                                                  "--config", str(config)])
                assert result.exit_code == 0, result.output
            out = directory / "out"
            profiles.append(((out / "profiles" / "w_ipsi_sweep_rep00.csv").read_bytes(),
                             (out / "summary.txt").read_bytes()))
        assert profiles[0] == profiles[1]

    def it_needs_saved_controllers(cli_runner, fast_config_file):
        result = cli_runner.invoke(main, ["evaluate", "--preset", "fast",
                                          "--config", str(fast_config_file)])
        assert result.exit_code == 3
        assert "no controllers" in result.output


def describe_margins_command():
    def it_prints_the_stability_report(cli_runner, designed):
        result = cli_runner.invoke(main, ["margins", "--preset", "fast",
                                          "--config", str(designed), "--controller", "w_ipsi"])
        assert result.exit_code == 0, result.output
        assert "Gain margin:" in result.output
        assert "Phase margin:" in result.output
        assert "Encirclements: 0" in result.output

    def it_lists_violating_bins_of_an_unstable_controller(cli_runner, fast_config_file,
                                                          tmp_path):
        w = np.zeros(64)
        w[0] = 100.0
        design = ControllerDesign(w, DesignConfig(filter_length=64, dft_length=1024), 0, (),
                                  False, SolverDiagnostics(), 44100.0, label="w_loud")
        export_controller(design, tmp_path / "out" / "controllers")
        result = cli_runner.invoke(main, ["margins", "--preset", "fast",
                                          "--config", str(fast_config_file),
                                          "--controller", "w_loud"])
        assert result.exit_code == 4
        assert "Violating bins:" in result.output

    def it_rejects_an_unknown_repetition(cli_runner, designed):
        result = cli_runner.invoke(main, ["margins", "--preset", "fast",
                                          "--config", str(designed), "--controller", "w_ipsi",
                                          "--repetition", "9"])
        assert result.exit_code == 2
        assert "repetition 9" in result.output
