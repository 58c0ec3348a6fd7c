"""Acoustic path sets, calibration noise fields and path archives.

A path set holds one measurement repetition: the primary paths from every
source direction to the external microphone (h_x) and to the ear drum (h_d),
plus the secondary path S and the feedback path B_x of the headphone.
Synthetic scenes stand in for a measured database when none is available.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import soundfile as sf
from scipy import signal

from inear_anc.errors import CausalityWarning, ConfigError, IngestionError
from inear_anc.spectral import ImpulseResponse

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "inear-anc-paths"
ARCHIVE_VERSION = 1
MANIFEST_NAME = "manifest.json"
PRIMARY_ROLES = ("h_x", "h_d")
DEVICE_ROLES = ("secondary", "feedback")
RESERVED_ROLES = ("inner_mic",)


@dataclass(frozen=True, order=True)
class DoA:
    """Azimuth in the horizontal plane; 270 deg is ipsilateral, 90 deg contralateral."""

    azimuth: float

    def __post_init__(self):
        azimuth = float(self.azimuth)
        if not math.isfinite(azimuth):
            raise ConfigError(f"azimuth must be finite, got {self.azimuth}")
        azimuth = round(azimuth % 360.0, 9)
        if azimuth >= 360.0:
            azimuth = 0.0
        object.__setattr__(self, "azimuth", azimuth + 0.0)

    @property
    def shadow(self) -> float:
        """0 on the ipsilateral pole, 1 on the contralateral pole."""
        return 0.5 * (1.0 - math.cos(math.radians(self.azimuth - 270.0)))

    @property
    def is_ipsilateral(self) -> bool:
        return self.shadow <= 0.5 + 1e-12

    @property
    def tag(self) -> str:
        return f"az{int(round(self.azimuth * 10)):04d}"

    def __str__(self) -> str:
        return f"{self.azimuth:g}"


IPSILATERAL = DoA(270.0)
CONTRALATERAL = DoA(90.0)


def doa_grid(resolution: float) -> list[DoA]:
    """All multiples of ``resolution`` in [0, 360)."""
    if not resolution > 0:
        raise ConfigError(f"doa_resolution must be positive, got {resolution}")
    count = int(round(360.0 / resolution))
    if count < 1 or abs(count * resolution - 360.0) > 1e-9:
        raise ConfigError(f"doa_resolution must divide 360, got {resolution}")
    return [DoA(i * resolution) for i in range(count)]


class PrimaryPaths(NamedTuple):
    h_x: ImpulseResponse
    h_d: ImpulseResponse


@dataclass(frozen=True, eq=False)
class AcousticPathSet:
    """Impulse responses of one measurement repetition."""

    repetition_id: int
    doa_paths: dict[DoA, PrimaryPaths]
    secondary: ImpulseResponse
    feedback: ImpulseResponse
    sample_rate: float

    def __post_init__(self):
        if not self.doa_paths:
            raise ConfigError("doa_paths must not be empty")
        paths = {}
        for doa, pair in sorted(self.doa_paths.items()):
            if not isinstance(doa, DoA):
                doa = DoA(doa)
            if len(pair) != 2 or any(p is None for p in pair):
                raise ConfigError(f"DoA {doa} needs both h_x and h_d")
            paths[doa] = PrimaryPaths(*pair)
        object.__setattr__(self, "doa_paths", paths)
        rates = {ir.sample_rate for pair in paths.values() for ir in pair}
        rates |= {self.secondary.sample_rate, self.feedback.sample_rate}
        if rates != {float(self.sample_rate)}:
            raise ConfigError(
                f"repetition {self.repetition_id}: mixed sample rates {sorted(rates)}"
            )

    @property
    def doas(self) -> list[DoA]:
        return list(self.doa_paths)

    def doa_index(self, doa: DoA) -> int:
        try:
            return self.doas.index(doa)
        except ValueError:
            raise ConfigError(
                f"DoA {doa} not present in repetition {self.repetition_id}"
            ) from None

    def paths_for(self, doa: DoA) -> PrimaryPaths:
        self.doa_index(doa)
        return self.doa_paths[doa]

    def has_feedback(self) -> bool:
        return bool(np.any(self.feedback.samples != 0))

    def isclose(self, other: AcousticPathSet, atol: float = 1e-12) -> bool:
        """Same layout and every impulse response equal within ``atol``."""

        def close(a: ImpulseResponse, b: ImpulseResponse) -> bool:
            return (
                a.sample_rate == b.sample_rate
                and a.samples.shape == b.samples.shape
                and bool(np.allclose(a.samples, b.samples, rtol=0.0, atol=atol))
            )

        if self.repetition_id != other.repetition_id or self.doas != other.doas:
            return False
        pairs = [(self.secondary, other.secondary), (self.feedback, other.feedback)]
        for doa in self.doas:
            pairs.extend(zip(self.doa_paths[doa], other.doa_paths[doa]))
        return all(close(a, b) for a, b in pairs)


@dataclass(frozen=True)
class NoiseFieldSpec:
    """Calibration or evaluation excitation made of white Gaussian sources."""

    kind: str
    duration: float
    sample_rate: float
    seed: int = 0
    doa: DoA | None = None
    amplitude: float = 1.0

    def __post_init__(self):
        if self.kind not in ("diffuse", "single_doa"):
            raise ConfigError(f"field kind must be 'diffuse' or 'single_doa', got {self.kind!r}")
        if self.kind == "single_doa" and self.doa is None:
            raise ConfigError("single_doa field needs a doa")
        if self.doa is not None and not isinstance(self.doa, DoA):
            object.__setattr__(self, "doa", DoA(self.doa))
        if not self.duration > 0:
            raise ConfigError(f"duration must be positive, got {self.duration}")
        if not self.sample_rate > 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed}")

    @classmethod
    def diffuse(cls, duration: float, sample_rate: float, seed: int = 0) -> NoiseFieldSpec:
        return cls("diffuse", duration, sample_rate, seed)

    @classmethod
    def single(cls, doa: DoA | float, duration: float, sample_rate: float,
               seed: int = 0) -> NoiseFieldSpec:
        doa = doa if isinstance(doa, DoA) else DoA(doa)
        return cls("single_doa", duration, sample_rate, seed, doa)

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


def source_signal(seed: int, doa_index: int, n: int, amplitude: float = 1.0) -> np.ndarray:
    """White Gaussian source of one DoA, derived from (seed, DoA index)."""
    rng = np.random.default_rng([int(seed), int(doa_index)])
    return amplitude * rng.standard_normal(n)


def _filter(source: np.ndarray, ir: ImpulseResponse) -> np.ndarray:
    return signal.convolve(source, ir.samples, mode="full")[: source.size]


def simulate_doa(paths: AcousticPathSet, doa: DoA, n: int, seed: int,
                 amplitude: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """External-mic and ear-drum contribution of a single source direction."""
    pair = paths.paths_for(doa)
    s = source_signal(seed, paths.doa_index(doa), n, amplitude)
    return _filter(s, pair.h_x), _filter(s, pair.h_d)


def simulate_incident(paths: AcousticPathSet, field: NoiseFieldSpec) -> tuple[np.ndarray,
                                                                               np.ndarray]:
    """Simulate x(n) at the external microphone and d(n) at the ear drum."""
    if field.sample_rate != paths.sample_rate:
        raise ConfigError(
            f"field sample_rate {field.sample_rate} differs from paths {paths.sample_rate}"
        )
    n = field.n_samples
    if field.kind == "single_doa":
        return simulate_doa(paths, field.doa, n, field.seed, field.amplitude)
    x = np.zeros(n)
    d = np.zeros(n)
    for doa in paths.doas:
        x_i, d_i = simulate_doa(paths, doa, n, field.seed, field.amplitude)
        x = x + x_i
        d = d + d_i
    return x, d


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of the synthetic path generator (delays in samples)."""

    repetitions: int = 7
    doa_resolution: float = 7.5
    sample_rate: float = 44100.0
    path_length: int = 712
    seed: int = 0
    external_delay: int = 4
    external_decay: float = 0.6
    contralateral_delay: float = 10.0
    ear_contralateral_delay: float = 6.0
    max_shadow_db: float = 12.0
    ear_shadow_db: float = 6.0
    device_delay: int = 10
    passive_pole: float = 0.85
    passive_gain: float = 0.5
    secondary_delay: int = 3
    secondary_pole: float = 0.5
    secondary_gain: float = 0.5
    leakage: float = 0.3
    perturbation: float = 0.2
    delay_jitter: int = 1

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError(f"repetitions must be >= 1, got {self.repetitions}")
        if not 0.0 <= self.perturbation < 1.0:
            raise ConfigError(f"perturbation must be in [0, 1), got {self.perturbation}")
        if self.delay_jitter < 0:
            raise ConfigError(f"delay_jitter must be >= 0, got {self.delay_jitter}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if not self.sample_rate > 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        for name in ("external_decay", "passive_pole", "secondary_pole"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        for name in ("external_delay", "device_delay", "secondary_delay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.leakage < 0:
            raise ConfigError(f"leakage must be >= 0, got {self.leakage}")
        doa_grid(self.doa_resolution)
        longest = (self.external_delay + math.ceil(self.contralateral_delay) + self.device_delay
                   + self.delay_jitter)
        if self.path_length <= longest:
            raise ConfigError(f"path_length must exceed the longest delay {longest}")
        for doa in doa_grid(self.doa_resolution):
            if doa.is_ipsilateral and self.relative_delay(doa) <= 0:
                raise ConfigError(
                    "device_delay leaves no causality margin on the ipsilateral side "
                    f"(DoA {doa})"
                )

    def relative_delay(self, doa: DoA) -> int:
        """Delay of h_d behind h_x for ``doa`` before reinsertion jitter."""
        spread = self.contralateral_delay - self.ear_contralateral_delay
        return self.device_delay - int(round(spread * doa.shadow))


def _decaying(pole: float, length: int) -> np.ndarray:
    return pole ** np.arange(length)


def _placed(kernel: np.ndarray, delay: int, length: int, gain: float) -> np.ndarray:
    out = np.zeros(length)
    if delay < length:
        span = min(kernel.size, length - delay)
        out[delay : delay + span] = gain * kernel[:span]
    return out


def fit_offset(config: SceneConfig, repetition: int) -> float:
    """Seating offset of a reinsertion in [-1, 1]; 0 is the nominal fit.

    Reinsertions alternate between a looser (+) and a tighter (-) seat and
    approach the nominal fit as the repetition index grows.
    """
    if repetition == 0:
        return 0.0
    levels = max(1, math.ceil((config.repetitions - 1) / 2))
    level = (repetition + 1) // 2
    magnitude = max(0, levels - level + 1) / levels
    return magnitude if repetition % 2 else -magnitude


def _reinsertion(config: SceneConfig, repetition: int) -> tuple[float, float, int]:
    """Gains of h_d and S and the delay offset shared by h_d, S and B_x."""
    if repetition == 0 or config.perturbation == 0:
        return 1.0, 1.0, 0
    # A looser seat leaks more noise to the ear drum and couples the driver less.
    offset = config.perturbation * fit_offset(config, repetition)
    rng = np.random.default_rng([config.seed, repetition])
    jitter = int(rng.integers(-config.delay_jitter, config.delay_jitter + 1))
    return 1.0 + offset, 1.0 - offset, jitter


def synthesize_scene(config: SceneConfig) -> list[AcousticPathSet]:
    """Deterministic family of synthetic path sets emulating reinsertions."""
    fs = config.sample_rate
    length = config.path_length
    grid = doa_grid(config.doa_resolution)
    external = _decaying(config.external_decay, length)
    passive = config.passive_gain * (1.0 - config.passive_pole) * _decaying(
        config.passive_pole, length
    )
    eardrum = np.convolve(external, passive)[:length]
    secondary_kernel = _decaying(config.secondary_pole, length)

    scene = []
    late = 0
    for r in range(config.repetitions):
        gain_d, gain_s, jitter = _reinsertion(config, r)
        s_delay = max(1, config.secondary_delay + jitter)
        secondary = _placed(secondary_kernel, s_delay, length, gain_s * config.secondary_gain)
        doa_paths = {}
        for doa in grid:
            shadow = doa.shadow
            t_x = config.external_delay + int(round(config.contralateral_delay * shadow))
            t_d = max(0, t_x + config.relative_delay(doa) + jitter)
            g_x = 10.0 ** (-config.max_shadow_db * shadow / 20.0)
            g_d = 10.0 ** (-config.ear_shadow_db * shadow / 20.0)
            h_x = _placed(external, t_x, length, g_x)
            h_d = _placed(eardrum, t_d, length, gain_d * g_d)
            doa_paths[doa] = PrimaryPaths(ImpulseResponse(h_x, fs), ImpulseResponse(h_d, fs))
            if t_d - t_x < s_delay:
                late += 1
        scene.append(
            AcousticPathSet(
                repetition_id=r,
                doa_paths=doa_paths,
                secondary=ImpulseResponse(secondary, fs),
                feedback=ImpulseResponse(config.leakage * secondary, fs),
                sample_rate=fs,
            )
        )
    if late:
        warnings.warn(
            f"{late} (repetition, DoA) pairs reach the ear drum before the secondary path "
            "can act; those directions cannot be attenuated broadband",
            CausalityWarning,
            stacklevel=2,
        )
    logger.info("synthesized %d repetitions over %d DoAs", config.repetitions, len(grid))
    return scene


def _write_payload(path: Path, samples: np.ndarray, sample_rate: float, audio_format: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    if audio_format == "wav":
        sf.write(str(path), samples.astype(np.float32), int(round(sample_rate)), subtype="FLOAT")
    else:
        np.savetxt(path, samples, fmt="%.17g")


def export_scene(paths: list[AcousticPathSet], directory: str | Path,
                 audio_format: str = "csv", scene_config: SceneConfig | None = None) -> Path:
    """Write path sets as manifest + one payload file per impulse response."""
    if audio_format not in ("csv", "wav"):
        raise ConfigError(f"audio_format must be 'csv' or 'wav', got {audio_format!r}")
    if not paths:
        raise ConfigError("nothing to export")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sample_rate = paths[0].sample_rate
    entries = []

    def add(rep: int, role: str, ir: ImpulseResponse, doa: DoA | None = None):
        stem = role if doa is None else f"{role}_{doa.tag}"
        relative = f"rep{rep:02d}/{stem}.{audio_format}"
        _write_payload(directory / relative, ir.samples, sample_rate, audio_format)
        entry = {"repetition": rep, "role": role, "path": relative}
        if doa is not None:
            entry["doa"] = doa.azimuth
        entries.append(entry)

    for path_set in paths:
        for doa, pair in path_set.doa_paths.items():
            add(path_set.repetition_id, "h_x", pair.h_x, doa)
            add(path_set.repetition_id, "h_d", pair.h_d, doa)
        add(path_set.repetition_id, "secondary", path_set.secondary)
        add(path_set.repetition_id, "feedback", path_set.feedback)

    manifest = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "sample_rate": sample_rate,
        "doa_grid": [doa.azimuth for doa in paths[0].doas],
        "repetitions": len(paths),
        "has_feedback": any(p.has_feedback() for p in paths),
        "audio_format": audio_format,
        "entries": entries,
    }
    if scene_config is not None:
        manifest["synthetic"] = asdict(scene_config)
    manifest_path = directory / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("exported %d repetitions to %s", len(paths), directory)
    return manifest_path


def _manifest_path(archive: str | Path) -> Path:
    archive = Path(archive)
    return archive if archive.suffix == ".json" else archive / MANIFEST_NAME


def _read_payload(path: Path, sample_rate: float, entry: dict) -> ImpulseResponse:
    context = {"repetition": entry.get("repetition"), "role": entry.get("role"),
               "doa": entry.get("doa")}
    if not path.is_file():
        raise IngestionError(f"payload {entry.get('path')} is missing", **context)
    try:
        if path.suffix.lower() == ".wav":
            samples, file_rate = sf.read(str(path), dtype="float64", always_2d=True)
            if samples.shape[1] != 1:
                raise IngestionError(f"payload {path.name} is not single-channel", **context)
            samples = samples[:, 0]
            if float(file_rate) != float(sample_rate):
                raise IngestionError(
                    f"payload {path.name} has sample rate {file_rate}, manifest says "
                    f"{sample_rate}", **context,
                )
        else:
            samples = np.loadtxt(path, dtype=float, ndmin=1)
    except IngestionError:
        raise
    except (ValueError, RuntimeError, OSError) as e:
        raise IngestionError(f"payload {path.name} is corrupt: {e}", **context) from e
    if "sample_rate" in entry and float(entry["sample_rate"]) != float(sample_rate):
        raise IngestionError(f"entry sample rate {entry['sample_rate']} differs from manifest",
                             **context)
    if samples.ndim != 1 or samples.size == 0 or not np.all(np.isfinite(samples)):
        raise IngestionError(f"payload {path.name} is empty or non-finite", **context)
    return ImpulseResponse(samples, sample_rate)


def ingest_scene(archive: str | Path) -> list[AcousticPathSet]:
    """Load and validate a path archive written in the manifest layout."""
    manifest_path = _manifest_path(archive)
    if not manifest_path.is_file():
        raise IngestionError(f"manifest not found at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise IngestionError(f"manifest {manifest_path} is not valid JSON: {e}") from e
    for key in ("sample_rate", "doa_grid", "repetitions", "entries"):
        if key not in manifest:
            raise IngestionError(f"manifest is missing the {key!r} field")
    root = manifest_path.parent
    sample_rate = float(manifest["sample_rate"])
    grid = [DoA(a) for a in manifest["doa_grid"]]

    primary: dict[int, dict[DoA, dict[str, ImpulseResponse]]] = {}
    device: dict[int, dict[str, ImpulseResponse]] = {}
    for entry in manifest["entries"]:
        role = entry.get("role")
        rep = entry.get("repetition")
        if role in RESERVED_ROLES:
            continue
        if role not in PRIMARY_ROLES + DEVICE_ROLES or not isinstance(rep, int):
            raise IngestionError(f"unrecognized manifest entry {entry}")
        ir = _read_payload(root / entry["path"], sample_rate, entry)
        if role in PRIMARY_ROLES:
            if "doa" not in entry:
                raise IngestionError("primary path entry without doa", repetition=rep, role=role)
            primary.setdefault(rep, {}).setdefault(DoA(entry["doa"]), {})[role] = ir
        else:
            device.setdefault(rep, {})[role] = ir

    repetitions = sorted(set(primary) | set(device))
    if len(repetitions) != int(manifest["repetitions"]):
        raise IngestionError(
            f"manifest declares {manifest['repetitions']} repetitions, found {len(repetitions)}"
        )
    scene = []
    for rep in repetitions:
        found = primary.get(rep, {})
        for doa in grid:
            for role in PRIMARY_ROLES:
                if role not in found.get(doa, {}):
                    raise IngestionError("primary path missing", repetition=rep, role=role,
                                         doa=doa.azimuth)
        extra = sorted(set(found) - set(grid))
        if extra:
            raise IngestionError(f"DoA coverage differs from the manifest grid: {extra[0]}",
                                 repetition=rep)
        roles = device.get(rep, {})
        if "secondary" not in roles:
            raise IngestionError("secondary path missing", repetition=rep, role="secondary")
        feedback = roles.get("feedback")
        if feedback is None:
            if manifest.get("has_feedback", False):
                raise IngestionError("feedback path missing", repetition=rep, role="feedback")
            feedback = ImpulseResponse.zeros(sample_rate)
        scene.append(
            AcousticPathSet(
                repetition_id=rep,
                doa_paths={doa: PrimaryPaths(found[doa]["h_x"], found[doa]["h_d"])
                           for doa in grid},
                secondary=roles["secondary"],
                feedback=feedback,
                sample_rate=sample_rate,
            )
        )
    logger.info("ingested %d repetitions from %s", len(scene), root)
    return scene


def archive_checksum(archive: str | Path) -> str:
    """sha256 over the manifest and every payload in manifest order."""
    manifest_path = _manifest_path(archive)
    if not manifest_path.is_file():
        raise IngestionError(f"manifest not found at {manifest_path}")
    digest = hashlib.sha256(manifest_path.read_bytes())
    manifest = json.loads(manifest_path.read_text())
    for entry in manifest.get("entries", []):
        payload = manifest_path.parent / entry["path"]
        if payload.is_file():
            digest.update(payload.read_bytes())
    return digest.hexdigest()
