"""Experiment configuration: dataclasses, presets and the JSON file format.

Values are resolved in three layers: a named preset, then an optional JSON
file, then command-line overrides. Every section validates itself on
construction and names the offending field in its ``ConfigError``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from inear_anc.design import DesignConfig
from inear_anc.errors import ConfigError
from inear_anc.evaluate import EvaluationBand, SweepSettings
from inear_anc.scene import CONTRALATERAL, IPSILATERAL, DoA, NoiseFieldSpec, SceneConfig

FIELD_KINDS = ("diffuse", "ipsi", "contra", "doa")
PLAN_KINDS = ("sweep", "reinsertion", "frequency")


@dataclass(frozen=True)
class SceneSource:
    """Either an archive to ingest or parameters of a synthetic scene."""

    archive: str | None = None
    synthetic: SceneConfig = field(default_factory=SceneConfig)


@dataclass(frozen=True)
class CalibrationConfig:
    field: str = "diffuse"
    azimuth: float | None = None
    duration: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.field not in FIELD_KINDS:
            raise ConfigError(f"calibration.field must be one of {FIELD_KINDS}, got {self.field!r}")
        if self.field == "doa" and self.azimuth is None:
            raise ConfigError("calibration.azimuth is required for field 'doa'")
        if not self.duration > 0:
            raise ConfigError(f"calibration.duration must be positive, got {self.duration}")
        if self.seed < 0:
            raise ConfigError(f"calibration.seed must be >= 0, got {self.seed}")

    @property
    def doa(self) -> DoA | None:
        return {"ipsi": IPSILATERAL, "contra": CONTRALATERAL}.get(
            self.field, DoA(self.azimuth) if self.field == "doa" else None
        )

    def noise(self, sample_rate: float) -> NoiseFieldSpec:
        if self.field == "diffuse":
            return NoiseFieldSpec.diffuse(self.duration, sample_rate, self.seed)
        return NoiseFieldSpec.single(self.doa, self.duration, sample_rate, self.seed)


@dataclass(frozen=True)
class EstimationConfig:
    secondary_length: int = 712

    def __post_init__(self):
        if self.secondary_length < 1:
            raise ConfigError(
                f"estimation.secondary_length must be >= 1, got {self.secondary_length}"
            )


@dataclass(frozen=True)
class EvaluationPlan:
    kind: str = "sweep"
    controllers: tuple[str, ...] = ()
    held_out: int | None = None
    repetition: int | None = None
    duration: float = 4.0
    seed: int = 1
    resolution: float | None = None
    workers: int = 1

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ConfigError(f"plan.kind must be one of {PLAN_KINDS}, got {self.kind!r}")
        if self.kind == "reinsertion" and self.held_out is None:
            raise ConfigError("plan.held_out is required for the reinsertion plan")
        if not self.duration > 0:
            raise ConfigError(f"plan.duration must be positive, got {self.duration}")
        if self.workers < 1:
            raise ConfigError(f"plan.workers must be >= 1, got {self.workers}")
        if self.seed < 0:
            raise ConfigError(f"plan.seed must be >= 0, got {self.seed}")
        object.__setattr__(self, "controllers", tuple(self.controllers))


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSource = field(default_factory=SceneSource)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    band: EvaluationBand = field(default_factory=EvaluationBand)
    plan: EvaluationPlan = field(default_factory=EvaluationPlan)
    output_dir: str = "out"

    def __post_init__(self):
        span = 2 * self.tau_max + 1
        if span > self.design.dft_length:
            raise ConfigError(
                f"design.dft_length {self.design.dft_length} is shorter than the correlation "
                f"span {span} implied by filter_length and secondary_length"
            )
        fs = self.scene.synthetic.sample_rate
        if self.scene.archive is None:
            shortest = min(self.calibration.duration, self.plan.duration) * fs
            if shortest < 2 * self.tau_max:
                raise ConfigError("calibration/plan duration is too short for the lag span")
            if self.band.f_high > fs / 2:
                raise ConfigError(f"band.f_high {self.band.f_high} exceeds Nyquist {fs / 2:g}")

    @property
    def tau_max(self) -> int:
        return self.estimation.secondary_length + self.design.filter_length - 1

    def sweep_settings(self) -> SweepSettings:
        return SweepSettings(
            dft_length=self.design.dft_length,
            secondary_length=self.estimation.secondary_length,
            duration=self.plan.duration,
            seed=self.plan.seed,
            workers=self.plan.workers,
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["design"] = self.design.to_dict()
        data["band"] = self.band.to_dict()
        data["plan"]["controllers"] = list(self.plan.controllers)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        _reject_unknown(cls, data, "")
        kwargs = {}
        if "scene" in data:
            scene = dict(data["scene"])
            _reject_unknown(SceneSource, scene, "scene.")
            if "synthetic" in scene:
                scene["synthetic"] = _build(SceneConfig, scene["synthetic"], "scene.synthetic.")
            kwargs["scene"] = SceneSource(**scene)
        if "calibration" in data:
            kwargs["calibration"] = _build(CalibrationConfig, data["calibration"], "calibration.")
        if "estimation" in data:
            kwargs["estimation"] = _build(EstimationConfig, data["estimation"], "estimation.")
        if "design" in data:
            kwargs["design"] = DesignConfig.from_dict(data["design"])
        if "band" in data:
            _reject_unknown(EvaluationBand, data["band"], "band.")
            kwargs["band"] = EvaluationBand(**data["band"])
        if "plan" in data:
            plan = dict(data["plan"])
            if "controllers" in plan:
                plan["controllers"] = tuple(plan["controllers"])
            kwargs["plan"] = _build(EvaluationPlan, plan, "plan.")
        if "output_dir" in data:
            kwargs["output_dir"] = str(data["output_dir"])
        return cls(**kwargs)


def _reject_unknown(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    unknown = sorted(set(data) - {f.name for f in fields(cls)})
    if unknown:
        raise ConfigError(f"unknown config field {prefix}{unknown[0]!r}")


def _build(cls, data: dict, prefix: str):
    _reject_unknown(cls, data, prefix)
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"invalid {prefix.rstrip('.')} section: {e}") from e


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = value
    return merged


PRESETS = {
    "paper": {},
    "fast": {
        "scene": {"synthetic": {"path_length": 128}},
        "calibration": {"duration": 1.0},
        "estimation": {"secondary_length": 128},
        "design": {"filter_length": 64, "dft_length": 1024},
        "plan": {"duration": 1.0},
    },
}


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return merge(ExperimentConfig().to_dict(), PRESETS[name])


def preset_config(name: str) -> ExperimentConfig:
    return ExperimentConfig.from_dict(preset_dict(name))


def load_config(path: str | Path | None = None, preset: str = "paper",
                overrides: dict | None = None) -> ExperimentConfig:
    """Preset defaults, then the JSON file at ``path``, then ``overrides``."""
    data = preset_dict(preset)
    if path is not None:
        path = Path(path)
        try:
            data = merge(data, json.loads(path.read_text()))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if overrides:
        data = merge(data, overrides)
    return ExperimentConfig.from_dict(data)


def save_config(config: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Apply one master seed: scene and calibration use it, evaluation uses seed + 1."""
    scene = replace(config.scene, synthetic=replace(config.scene.synthetic, seed=seed))
    return replace(
        config,
        scene=scene,
        calibration=replace(config.calibration, seed=seed),
        plan=replace(config.plan, seed=seed + 1),
    )
