"""Experiment runner shared by the CLI commands.

Output layout under ``ExperimentConfig.output_dir``::

    scene/manifest.json            synthesized path archive
    controllers/<label>.csv|.wav   coefficients, with <label>.json sidecar
    profiles/*.csv                 sweeps, reinsertion tables, frequency profiles
    summary.txt                    human-readable evaluation summary
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from inear_anc.config import ExperimentConfig, save_config
from inear_anc.design import (
    ControllerDesign,
    StabilityReport,
    controller_label,
    design_margins,
    export_controller,
    load_controller,
    optimize,
)
from inear_anc.errors import ConfigError, IngestionError
from inear_anc.evaluate import (
    AttenuationProfile,
    FrequencyProfile,
    ReinsertionReport,
    doa_sweep,
    frequency_profile,
    reinsertion_experiment,
)
from inear_anc.scene import (
    AcousticPathSet,
    NoiseFieldSpec,
    export_scene,
    ingest_scene,
    simulate_incident,
    synthesize_scene,
)
from inear_anc.spectral import FrequencyGrid, SpectralEstimate, estimate_spectra

logger = logging.getLogger(__name__)


def scene_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / "scene"


def controllers_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / "controllers"


def profiles_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / "profiles"


def load_scene(config: ExperimentConfig) -> list[AcousticPathSet]:
    if config.scene.archive is not None:
        return ingest_scene(config.scene.archive)
    return synthesize_scene(config.scene.synthetic)


def synthesize_archive(config: ExperimentConfig, audio_format: str = "csv") -> Path:
    paths = synthesize_scene(config.scene.synthetic)
    return export_scene(paths, scene_dir(config), audio_format, config.scene.synthetic)


def _by_id(scene: list[AcousticPathSet]) -> dict[int, AcousticPathSet]:
    return {p.repetition_id: p for p in scene}


def calibration_spectra(config: ExperimentConfig, scene: list[AcousticPathSet],
                        repetitions: tuple[int, ...]) -> list[SpectralEstimate]:
    """Excite every repetition with the calibration field and estimate its spectra."""
    by_id = _by_id(scene)
    missing = [r for r in repetitions if r not in by_id]
    if missing:
        raise ConfigError(f"repetition {missing[0]} is not in the scene")
    spectra = []
    for r in repetitions:
        paths = by_id[r]
        grid = FrequencyGrid(config.design.dft_length, paths.sample_rate)
        x, d = simulate_incident(paths, config.calibration.noise(paths.sample_rate))
        spectra.append(
            estimate_spectra(x, d, config.estimation.secondary_length,
                             config.design.filter_length, grid, r)
        )
        logger.info("calibrated repetition %d with a %s field", r, config.calibration.field)
    return spectra


def used_repetitions(config: ExperimentConfig, scene: list[AcousticPathSet]) -> tuple[int, ...]:
    return config.design.repetitions_used or tuple(sorted(_by_id(scene)))


def run_design(config: ExperimentConfig, scene: list[AcousticPathSet] | None = None,
               label: str | None = None) -> tuple[ControllerDesign, StabilityReport]:
    scene = load_scene(config) if scene is None else scene
    repetitions = used_repetitions(config, scene)
    spectra = calibration_spectra(config, scene, repetitions)
    label = label or controller_label(config.calibration.field, config.calibration.doa,
                                      len(repetitions))
    design = optimize(spectra, scene, config.design, label=label)
    margins = design_margins(design, _by_id(scene)[design.r0])
    return design, margins


def save_design(config: ExperimentConfig, design: ControllerDesign,
                margins: StabilityReport) -> Path:
    path = export_controller(design, controllers_dir(config), margins)
    save_config(config, controllers_dir(config) / f"{design.label}.config.json")
    return path


def resolve_controller(config: ExperimentConfig, name: str) -> ControllerDesign:
    """Controller by label (looked up under controllers/) or by path."""
    candidate = Path(name)
    if candidate.suffix in (".json", ".csv") or candidate.exists():
        return load_controller(candidate)
    return load_controller(controllers_dir(config) / f"{name}.json")


def available_controllers(config: ExperimentConfig) -> list[str]:
    folder = controllers_dir(config)
    return sorted(p.name[: -len(".json")] for p in folder.glob("*.json")
                  if not p.name.endswith(".config.json"))


@dataclass
class EvaluationResult:
    sweeps: list[AttenuationProfile] = field(default_factory=list)
    frequency: list[FrequencyProfile] = field(default_factory=list)
    reinsertion: ReinsertionReport | None = None
    margins: dict[str, StabilityReport] = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)


def run_evaluation(config: ExperimentConfig, designs: list[ControllerDesign],
                   scene: list[AcousticPathSet] | None = None) -> EvaluationResult:
    """Run the configured evaluation plan and write its CSV outputs."""
    if not designs:
        raise IngestionError("no controllers to evaluate")
    scene = load_scene(config) if scene is None else scene
    by_id = _by_id(scene)
    plan = config.plan
    settings = config.sweep_settings()
    out = profiles_dir(config)
    result = EvaluationResult()
    for design in designs:
        if design.r0 in by_id:
            result.margins[design.label] = design_margins(design, by_id[design.r0])

    if plan.kind == "reinsertion":
        report = reinsertion_experiment(designs, scene, plan.held_out, config.band, settings,
                                        plan.resolution)
        result.reinsertion = report
        result.files.append(report.write_csv(out / f"reinsertion_heldout{plan.held_out:02d}.csv"))
        for label, profile in report.held_out_profiles.items():
            result.sweeps.append(profile)
            result.files.append(profile.write_csv(
                out / f"{label}_sweep_rep{plan.held_out:02d}.csv"))
        return result

    for design in designs:
        r = design.r0 if plan.repetition is None else plan.repetition
        if r not in by_id:
            raise ConfigError(f"evaluation repetition {r} is not in the scene")
        paths = by_id[r]
        if plan.kind == "sweep":
            profile = doa_sweep(design, paths, config.band, settings, plan.resolution)
            result.sweeps.append(profile)
            result.files.append(profile.write_csv(out / f"{design.label}_sweep_rep{r:02d}.csv"))
        else:
            grid = FrequencyGrid(design.config.dft_length, paths.sample_rate)
            noise = config.calibration.noise(paths.sample_rate)
            noise = NoiseFieldSpec(noise.kind, plan.duration, noise.sample_rate, plan.seed,
                                   noise.doa)
            x, d = simulate_incident(paths, noise)
            spectra = estimate_spectra(x, d, config.estimation.secondary_length, design.w.size,
                                       grid, r)
            profile = frequency_profile(design, spectra, paths, design.label)
            result.frequency.append(profile)
            result.files.append(profile.write_csv(
                out / f"{design.label}_frequency_rep{r:02d}.csv"))
    return result


def _format_db(value: float) -> str:
    return f"{value:.2f} dB" if math.isfinite(value) else str(value)


def summary_text(result: EvaluationResult) -> str:
    lines = []
    for profile in result.sweeps:
        best_doa, best = profile.best()
        worst_doa, worst = profile.worst()
        lines.append(
            f"{profile.label} (repetition {profile.repetition_id}): "
            f"best {_format_db(best)} at {best_doa} deg, "
            f"worst {_format_db(worst)} at {worst_doa} deg"
        )
    for profile in result.frequency:
        finite = [a for a in profile.attenuation_db if math.isfinite(a)]
        deepest = min(finite) if finite else math.nan
        lines.append(f"{profile.label} (repetition {profile.repetition_id}): "
                     f"deepest per-bin attenuation {_format_db(deepest)}")
    if result.reinsertion is not None:
        lines.append(f"held-out repetition {result.reinsertion.held_out}")
    for label, report in result.margins.items():
        lines.append(
            f"{label} margins: GM {report.formatted_gain_margin()}, "
            f"PM {report.formatted_phase_margin()} deg, "
            f"min Re(W B_x) {report.min_real_part:.4f}"
        )
    return "\n".join(lines) + "\n"


def write_summary(config: ExperimentConfig, result: EvaluationResult) -> Path:
    path = Path(config.output_dir) / "summary.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(summary_text(result))
    return path
