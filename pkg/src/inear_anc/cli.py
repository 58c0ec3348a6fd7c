"""CLI interface for in-ear ANC controller design."""

import functools
import logging

import click

from inear_anc import experiment
from inear_anc.config import load_config, merge, with_seed
from inear_anc.design import design_margins
from inear_anc.errors import AncError, ConfigError, InfeasibleDesignError
from inear_anc.scene import archive_checksum


def handle_errors(command):
    """Report AncError on stderr and exit with its code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except AncError as e:
            click.echo(f"Error: {e}", err=True)
            raise SystemExit(e.exit_code)

    return wrapper


def experiment_options(command):
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False),
                     help="JSON experiment config"),
        click.option("--preset", type=click.Choice(["paper", "fast"]), default="paper",
                     show_default=True, help="Parameter preset applied before --config"),
        click.option("--seed", type=int, help="Master seed for scene, calibration and evaluation"),
        click.option("--out", "out_dir", type=click.Path(file_okay=False),
                     help="Output directory"),
        click.option("--archive", type=click.Path(), help="Ingest this path archive"),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def build_config(config_path, preset, seed, out_dir, archive, overrides=None):
    overrides = dict(overrides or {})
    if out_dir is not None:
        overrides["output_dir"] = out_dir
    if archive is not None:
        overrides = merge(overrides, {"scene": {"archive": archive}})
    config = load_config(config_path, preset, overrides)
    return with_seed(config, seed) if seed is not None else config


def _set(overrides: dict, section: str, key: str, value):
    if value is not None:
        overrides.setdefault(section, {})[key] = value


def _repetition_list(value):
    if value is None or value == "all":
        return None
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected 'all' or comma-separated ids, got {value!r}")


@click.group()
@click.version_option(package_name="roaming-panda-inear-anc")
@click.option("-v", "--verbose", count=True, help="Log progress (-v info, -vv debug)")
def main(verbose: int):
    """In-ear ANC - design and evaluate fixed feedforward controllers."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@experiment_options
@click.option("--repetitions", type=int, help="Number of reinsertion repetitions")
@click.option("--perturbation", type=float, help="Relative gain perturbation per reinsertion")
@click.option("--leakage", type=float, help="Feedback path as a fraction of the secondary path")
@click.option("--audio-format", type=click.Choice(["csv", "wav"]), default="csv",
              show_default=True)
@handle_errors
def synth(config_path, preset, seed, out_dir, archive, repetitions, perturbation, leakage,
          audio_format):
    """Synthesize a path archive."""
    overrides = {}
    synthetic = {}
    for key, value in (("repetitions", repetitions), ("perturbation", perturbation),
                       ("leakage", leakage)):
        if value is not None:
            synthetic[key] = value
    if synthetic:
        overrides["scene"] = {"synthetic": synthetic}
    config = build_config(config_path, preset, seed, out_dir, archive, overrides)
    manifest = experiment.synthesize_archive(config, audio_format)
    scene = config.scene.synthetic
    click.echo(f"Archive: {manifest.parent}")
    click.echo(f"Repetitions: {scene.repetitions}")
    click.echo(f"DoAs: {int(round(360 / scene.doa_resolution))} ({scene.doa_resolution:g} deg)")
    click.echo(f"Sample rate: {scene.sample_rate:g} Hz")
    click.echo(f"sha256: {archive_checksum(manifest.parent)}")


@main.command()
@experiment_options
@click.option("--field", type=click.Choice(["diffuse", "ipsi", "contra", "doa"]),
              help="Calibration noise field")
@click.option("--doa", type=float, help="Azimuth in degrees for --field doa")
@click.option("--repetitions", help="Repetitions used in the design ('all' or '0,1,2')")
@click.option("--rho", type=float, help="Robustness parameter in (0, 1)")
@click.option("--beta", type=float, help="Relative Tikhonov regularization")
@click.option("--initialization", type=click.Choice(["zero", "wiener"]))
@click.option("--label", help="Controller label used in file names")
@handle_errors
def design(config_path, preset, seed, out_dir, archive, field, doa, repetitions, rho, beta,
           initialization, label):
    """Design a controller from a calibration field."""
    overrides = {}
    _set(overrides, "calibration", "field", field)
    _set(overrides, "calibration", "azimuth", doa)
    _set(overrides, "design", "rho", rho)
    _set(overrides, "design", "beta_relative", beta)
    _set(overrides, "design", "initialization", initialization)
    if repetitions is not None:
        overrides.setdefault("design", {})["repetitions_used"] = _repetition_list(repetitions)
    config = build_config(config_path, preset, seed, out_dir, archive, overrides)
    controller, margins = experiment.run_design(config, label=label)
    path = experiment.save_design(config, controller, margins)
    diagnostics = controller.diagnostics
    click.echo(f"Controller: {controller.label} -> {path}")
    click.echo(f"Nominal repetition: {controller.r0}")
    click.echo(f"Cost: {controller.baseline_cost:.6g} -> {controller.final_cost:.6g}")
    click.echo(f"Solver: {diagnostics.message} after {diagnostics.iterations} iterations")
    click.echo(f"GM: {margins.formatted_gain_margin()}  PM: {margins.formatted_phase_margin()}")
    if not controller.improved:
        raise InfeasibleDesignError(
            f"no feasible improvement over the initial controller for {controller.label}"
        )


@main.command()
@experiment_options
@click.option("--plan", type=click.Choice(["sweep", "reinsertion", "frequency"]),
              help="Evaluation plan")
@click.option("--controller", "controllers", multiple=True,
              help="Controller label or sidecar path (repeatable; default: all saved)")
@click.option("--held-out", type=int, help="Held-out repetition for the reinsertion plan")
@click.option("--repetition", type=int, help="Repetition to evaluate on (default: nominal)")
@click.option("--workers", type=int, help="Threads for DoA sweeps")
@handle_errors
def evaluate(config_path, preset, seed, out_dir, archive, plan, controllers, held_out,
             repetition, workers):
    """Evaluate saved controllers and write profiles and summary.txt."""
    overrides = {}
    _set(overrides, "plan", "kind", plan)
    _set(overrides, "plan", "held_out", held_out)
    _set(overrides, "plan", "repetition", repetition)
    _set(overrides, "plan", "workers", workers)
    if controllers:
        overrides.setdefault("plan", {})["controllers"] = list(controllers)
    config = build_config(config_path, preset, seed, out_dir, archive, overrides)
    labels = config.plan.controllers or tuple(experiment.available_controllers(config))
    designs = [experiment.resolve_controller(config, name) for name in labels]
    result = experiment.run_evaluation(config, designs)
    summary = experiment.write_summary(config, result)
    for path in result.files:
        click.echo(f"Wrote {path}")
    click.echo(summary.read_text(), nl=False)


@main.command()
@experiment_options
@click.option("--controller", "controller_name", required=True,
              help="Controller label or sidecar path")
@click.option("--repetition", type=int, help="Feedback path repetition (default: nominal)")
@click.option("--scale", type=float, default=1.0, show_default=True,
              help="Multiply the coefficients before the analysis")
@handle_errors
def margins(config_path, preset, seed, out_dir, archive, controller_name, repetition, scale):
    """Print the stability report of a controller."""
    config = build_config(config_path, preset, seed, out_dir, archive)
    controller = experiment.resolve_controller(config, controller_name)
    if scale != 1.0:
        controller = controller.scaled(scale)
    scene = experiment.load_scene(config)
    by_id = {p.repetition_id: p for p in scene}
    r = controller.r0 if repetition is None else repetition
    if r not in by_id:
        raise ConfigError(f"repetition {r} is not in the scene")
    report = design_margins(controller, by_id[r])
    click.echo(f"Controller: {controller.label} (repetition {r}, rho {report.rho:g})")
    click.echo(f"Gain margin: {report.formatted_gain_margin()}")
    click.echo(f"Phase margin: {report.formatted_phase_margin()}")
    click.echo(f"Encirclements: {report.encirclements}")
    click.echo(f"Min Re(W B_x): {report.min_real_part:.6g}")
    if report.violating_bins:
        grid = report.grid
        shown = ", ".join(f"{grid.frequency_of(k):.1f} Hz" for k in report.violating_bins[:10])
        click.echo(f"Violating bins: {len(report.violating_bins)} ({shown})", err=True)
        raise InfeasibleDesignError(f"{controller.label} violates the stability constraint")
