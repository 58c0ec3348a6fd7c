"""Stability-constrained FIR controller design.

The controller minimizes the regularized residual over all used repetitions

    J(w) = Σ_r Σ_k Φ_xx |Φ_dx/Φ_xx - W/(1 + W B_x) S|² + β |W|²

subject to Re(W(Ω_k) B_x(Ω_k, r0)) > -ρ at every bin, which keeps the
open-loop Nyquist contour right of a vertical line through -ρ. The solver is
an augmented Lagrangian over the per-bin inequalities with L-BFGS-B inner
solves and analytic gradients.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import soundfile as sf
from scipy import linalg
from scipy import optimize as sp_optimize

from inear_anc.errors import (
    ClosedLoopSingularityError,
    ConfigError,
    IngestionError,
    SpectralError,
)
from inear_anc.scene import AcousticPathSet, DoA
from inear_anc.spectral import (
    FrequencyGrid,
    SpectralEstimate,
    fir_frequency_response,
    path_frequency_response,
)

logger = logging.getLogger(__name__)

SINGULARITY_FLOOR = 1e-9
SECONDARY_FLOOR = 1e-12
REJECTED_STEP_VALUE = 1e20
PROJECTION_SLACK = 1e-9


@dataclass(frozen=True)
class SolverOptions:
    """Augmented-Lagrangian settings; feasibility_margin is ε_feas on Re(W B_x) + ρ."""

    tolerance: float = 1e-8
    max_iterations: int = 30
    inner_iterations: int = 500
    feasibility_margin: float = 1e-3
    penalty_initial: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e8

    def __post_init__(self):
        if not self.feasibility_margin > 0:
            raise ConfigError(
                f"solver.feasibility_margin must be positive, got {self.feasibility_margin}"
            )
        if not self.tolerance > 0:
            raise ConfigError(f"solver.tolerance must be positive, got {self.tolerance}")
        if self.max_iterations < 1 or self.inner_iterations < 1:
            raise ConfigError("solver iteration limits must be >= 1")
        if not self.penalty_initial > 0 or not self.penalty_growth > 1:
            raise ConfigError("solver penalty_initial must be > 0 and penalty_growth > 1")


@dataclass(frozen=True)
class DesignConfig:
    filter_length: int = 512
    dft_length: int = 8192
    beta_relative: float = 0.01
    rho: float = 0.8
    r0_band: tuple[float, float] = (100.0, 12000.0)
    repetitions_used: tuple[int, ...] | None = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    initialization: str = "zero"
    constrain_all_repetitions: bool = False
    constraint_stride: int = 1

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ConfigError(f"rho must be in (0, 1), got {self.rho}")
        if self.filter_length < 1:
            raise ConfigError(f"filter_length must be >= 1, got {self.filter_length}")
        if self.dft_length < 2 or self.dft_length % 2:
            raise ConfigError(f"dft_length must be even and >= 2, got {self.dft_length}")
        if self.filter_length > self.dft_length:
            raise ConfigError("filter_length must not exceed dft_length")
        if not self.beta_relative >= 0:
            raise ConfigError(f"beta_relative must be >= 0, got {self.beta_relative}")
        if self.initialization not in ("zero", "wiener"):
            raise ConfigError(
                f"initialization must be 'zero' or 'wiener', got {self.initialization!r}"
            )
        if self.constraint_stride < 1:
            raise ConfigError(f"constraint_stride must be >= 1, got {self.constraint_stride}")
        lo, hi = self.r0_band
        if not 0 <= lo < hi:
            raise ConfigError(f"r0_band must satisfy 0 <= low < high, got {self.r0_band}")
        object.__setattr__(self, "r0_band", (float(lo), float(hi)))
        if self.repetitions_used is not None:
            used = tuple(sorted({int(r) for r in self.repetitions_used}))
            if not used:
                raise ConfigError("repetitions_used must not be empty")
            object.__setattr__(self, "repetitions_used", used)
        if isinstance(self.solver, dict):
            object.__setattr__(self, "solver", SolverOptions(**self.solver))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["r0_band"] = list(self.r0_band)
        if self.repetitions_used is not None:
            data["repetitions_used"] = list(self.repetitions_used)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> DesignConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown design field {unknown[0]!r}")
        data = dict(data)
        if "solver" in data:
            solver_known = {f.name for f in fields(SolverOptions)}
            extra = sorted(set(data["solver"]) - solver_known)
            if extra:
                raise ConfigError(f"unknown design.solver field {extra[0]!r}")
            data["solver"] = SolverOptions(**data["solver"])
        if "r0_band" in data:
            data["r0_band"] = tuple(data["r0_band"])
        if data.get("repetitions_used") is not None:
            data["repetitions_used"] = tuple(data["repetitions_used"])
        return cls(**data)


@dataclass(frozen=True)
class SolverDiagnostics:
    iterations: int = 0
    inner_iterations: int = 0
    converged: bool = False
    stationarity: float = math.nan
    min_constraint_margin: float = math.nan
    rejected_steps: int = 0
    projections: int = 0
    penalty: float = math.nan
    message: str = ""


@dataclass(frozen=True, eq=False)
class ControllerDesign:
    """FIR coefficients together with the configuration and solver record behind them."""

    w: np.ndarray
    config: DesignConfig
    r0: int
    cost_trace: tuple[float, ...]
    feasible: bool
    diagnostics: SolverDiagnostics
    sample_rate: float
    repetitions: tuple[int, ...] = ()
    label: str = "w"
    improved: bool = True

    def __post_init__(self):
        w = np.array(self.w, dtype=float).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "cost_trace", tuple(float(c) for c in self.cost_trace))
        object.__setattr__(self, "repetitions", tuple(int(r) for r in self.repetitions))

    @property
    def final_cost(self) -> float:
        return self.cost_trace[-1] if self.cost_trace else math.nan

    @property
    def baseline_cost(self) -> float:
        return self.cost_trace[0] if self.cost_trace else math.nan

    def scaled(self, factor: float) -> ControllerDesign:
        """Same record with coefficients multiplied by ``factor`` (for margin studies)."""
        return ControllerDesign(
            self.w * factor, self.config, self.r0, (), False, self.diagnostics,
            self.sample_rate, self.repetitions, f"{self.label}_x{factor:g}", self.improved,
        )


@dataclass(frozen=True, eq=False)
class StabilityReport:
    """Open-loop contour W B_x on the grid and the margins read from it."""

    open_loop: np.ndarray
    gain_margin: float
    phase_margin: float | None
    encirclements: int
    min_real_part: float
    rho: float | None = None
    constraint: np.ndarray | None = None
    violating_bins: tuple[int, ...] = ()
    phase_crossover: float | None = None
    gain_crossover: float | None = None
    grid: FrequencyGrid | None = None

    @property
    def gain_margin_db(self) -> float:
        return 20.0 * math.log10(self.gain_margin) if math.isfinite(self.gain_margin) else math.inf

    def is_feasible(self) -> bool:
        return not self.violating_bins and self.encirclements == 0

    def formatted_gain_margin(self) -> str:
        return "inf" if math.isinf(self.gain_margin) else f"{self.gain_margin:.6g}"

    def formatted_phase_margin(self) -> str:
        return "undefined" if self.phase_margin is None else f"{self.phase_margin:.6g}"

    def to_dict(self) -> dict:
        data = {
            "gain_margin": self.formatted_gain_margin(),
            "phase_margin_deg": self.formatted_phase_margin(),
            "encirclements": self.encirclements,
            "min_real_part": self.min_real_part,
            "rho": self.rho,
            "violating_bins": list(self.violating_bins),
        }
        if self.grid is not None:
            data["violating_frequencies_hz"] = [
                self.grid.frequency_of(k) for k in self.violating_bins
            ]
        return data


def controller_label(field_kind: str, doa: DoA | None = None, repetition_count: int = 1) -> str:
    """File-name label mirroring the w^diff / w^ipsi / w^contra naming."""
    if field_kind == "diffuse":
        label = "w_diff"
    elif field_kind == "ipsi":
        label = "w_ipsi"
    elif field_kind == "contra":
        label = "w_contra"
    elif field_kind == "doa" and doa is not None:
        label = f"w_doa{int(round(doa.azimuth * 10)):04d}"
    else:
        raise ConfigError(f"no controller label for field kind {field_kind!r}")
    return f"{label}_ri" if repetition_count > 1 else label


def _band_bins(grid: FrequencyGrid, band: tuple[float, float]) -> np.ndarray:
    lo, hi = band
    nyquist = grid.sample_rate / 2.0
    if lo < 0 or hi > nyquist or lo >= hi:
        raise ConfigError(f"band {band} Hz is not within (0, {nyquist:g}) Hz")
    k_lo, k_hi = grid.bin_at_or_above(lo), grid.bin_at_or_below(hi)
    if k_lo > k_hi:
        raise ConfigError(f"band {band} Hz contains no DFT bin")
    return np.arange(k_lo, k_hi + 1)


def select_nominal_repetition(paths: list[AcousticPathSet], band: tuple[float, float],
                              dft_length: int = 8192) -> int:
    """Repetition whose secondary path gives the least multiplicative uncertainty."""
    if not paths:
        raise ConfigError("at least one repetition is required")
    ordered = sorted(paths, key=lambda p: p.repetition_id)
    if len(ordered) == 1:
        return ordered[0].repetition_id
    grid = FrequencyGrid(dft_length, ordered[0].sample_rate)
    bins = _band_bins(grid, band)
    responses = np.array([path_frequency_response(p.secondary, grid)[bins] for p in ordered])
    spreads = []
    for c, candidate in enumerate(responses):
        magnitude = np.abs(candidate)
        floor = SECONDARY_FLOOR * float(np.max(np.abs(responses)))
        weak = np.flatnonzero(magnitude < floor)
        if weak.size:
            k = int(bins[weak[0]])
            raise SpectralError(
                f"secondary path of repetition {ordered[c].repetition_id} vanishes at "
                f"{grid.frequency_of(k):.1f} Hz"
            )
        others = np.delete(responses, c, axis=0)
        spreads.append(float(np.max(np.abs(others - candidate) / magnitude)))
    best = int(np.argmin(spreads))
    logger.info("nominal repetition %d (max relative deviation %.4g)",
                ordered[best].repetition_id, spreads[best])
    return ordered[best].repetition_id


class _Singular(Exception):
    def __init__(self, bin_index: int):
        self.bin_index = bin_index


class DesignProblem:
    """Per-bin model of the design problem on one DFT grid."""

    def __init__(self, spectra: list[SpectralEstimate], paths: list[AcousticPathSet],
                 config: DesignConfig, r0: int | None = None):
        by_id_spectra = {s.repetition_id: s for s in spectra}
        by_id_paths = {p.repetition_id: p for p in paths}
        used = config.repetitions_used or tuple(sorted(by_id_spectra))
        missing = [r for r in used if r not in by_id_spectra or r not in by_id_paths]
        if missing:
            raise ConfigError(f"repetitions_used references missing repetition {missing[0]}")
        self.config = config
        self.repetitions = tuple(used)
        first = by_id_spectra[used[0]]
        self.grid = first.grid
        if self.grid.dft_length != config.dft_length:
            raise ConfigError(
                f"spectra use dft_length {self.grid.dft_length}, config says {config.dft_length}"
            )
        for r in used:
            if by_id_spectra[r].grid != self.grid:
                raise SpectralError(f"repetition {r} is estimated on a different grid")
            if by_id_paths[r].sample_rate != self.grid.sample_rate:
                raise ConfigError(f"repetition {r} paths do not match the grid sample rate")
        if r0 is None:
            r0 = select_nominal_repetition([by_id_paths[r] for r in used], config.r0_band,
                                           config.dft_length)
        if r0 not in by_id_spectra or r0 not in by_id_paths:
            raise ConfigError(f"nominal repetition {r0} is not available")
        self.r0 = int(r0)
        self.beta = config.beta_relative * by_id_spectra[self.r0].power_x

        self.weights = []
        self.targets = []
        self.secondary = []
        self.feedback = []
        for r in used:
            estimate = by_id_spectra[r]
            self.weights.append(np.where(estimate.excited(), estimate.phi_xx, 0.0))
            self.targets.append(estimate.transfer())
            self.secondary.append(path_frequency_response(by_id_paths[r].secondary, self.grid))
            self.feedback.append(path_frequency_response(by_id_paths[r].feedback, self.grid))
        self.nominal_feedback = path_frequency_response(by_id_paths[self.r0].feedback, self.grid)
        if config.constrain_all_repetitions:
            self.constraint_feedback = np.array(self.feedback)
        else:
            self.constraint_feedback = self.nominal_feedback[np.newaxis, :]
        self.constraint_bins = np.arange(0, self.grid.n_bins, config.constraint_stride)

    @property
    def filter_length(self) -> int:
        return self.config.filter_length

    @property
    def rho(self) -> float:
        return self.config.rho

    def response(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.filter_length,):
            raise ConfigError(f"w must have {self.filter_length} taps, got shape {w.shape}")
        return fir_frequency_response(w, self.grid)

    def to_taps(self, spectrum: np.ndarray) -> np.ndarray:
        """Re Σ_k X_k e^{-jΩ_k m} for m < L_w; adjoint of the tap-to-bin map."""
        return np.fft.fft(spectrum, n=self.grid.dft_length).real[: self.filter_length]

    def evaluate(self, w: np.ndarray, gradient: bool = False):
        """Cost (and its gradient); raises _Singular on a vanishing 1 + W B_x."""
        big_w = self.response(w)
        total = 0.0
        g = np.zeros(self.grid.n_bins, dtype=complex)
        for phi, target, s, b in zip(self.weights, self.targets, self.secondary, self.feedback):
            den = 1.0 + big_w * b
            magnitude = np.abs(den)
            k = int(np.argmin(magnitude))
            if magnitude[k] < SINGULARITY_FLOOR:
                raise _Singular(k)
            error = target - big_w / den * s
            total += float(np.sum(phi * np.abs(error) ** 2))
            if gradient:
                g += -2.0 * phi * np.conj(error) * s / den**2
        count = len(self.repetitions)
        total += self.beta * count * float(np.sum(np.abs(big_w) ** 2))
        if not gradient:
            return total
        g += 2.0 * self.beta * count * np.conj(big_w)
        return total, self.to_taps(g)

    def real_parts(self, w: np.ndarray) -> np.ndarray:
        """Re(W B_x) for every constrained feedback path and every bin."""
        return (self.response(w)[np.newaxis, :] * self.constraint_feedback).real

    def margin(self, w: np.ndarray) -> float:
        return float(np.min(self.real_parts(w))) + self.rho

    def project(self, w: np.ndarray) -> tuple[np.ndarray, bool]:
        """Scale w toward zero until Re(W B_x) >= -ρ + ε_feas at every bin."""
        limit = self.rho - self.config.solver.feasibility_margin
        lowest = float(np.min(self.real_parts(w)))
        if lowest >= -limit:
            return np.asarray(w, dtype=float), False
        alpha = limit / -lowest * (1.0 - PROJECTION_SLACK)
        return alpha * np.asarray(w, dtype=float), True

    def safe_cost(self, w: np.ndarray) -> float:
        try:
            return self.evaluate(w)
        except _Singular:
            return math.inf


def _singularity(problem: DesignProblem, k: int) -> ClosedLoopSingularityError:
    return ClosedLoopSingularityError(
        "closed loop 1 + W B_x vanishes", bin_index=k, frequency=problem.grid.frequency_of(k)
    )


def cost(w, spectra: list[SpectralEstimate], paths: list[AcousticPathSet],
         config: DesignConfig, r0: int | None = None) -> float:
    """Regularized multi-repetition cost; +inf when the closed loop is singular."""
    return DesignProblem(spectra, paths, config, r0).safe_cost(np.asarray(w, dtype=float))


def cost_gradient(w, spectra: list[SpectralEstimate], paths: list[AcousticPathSet],
                  config: DesignConfig, r0: int | None = None) -> np.ndarray:
    """Analytic gradient of ``cost`` with respect to the FIR taps."""
    problem = DesignProblem(spectra, paths, config, r0)
    try:
        return problem.evaluate(np.asarray(w, dtype=float), gradient=True)[1]
    except _Singular as e:
        raise _singularity(problem, e.bin_index) from None


def stability_constraint(w, feedback_response, rho: float) -> np.ndarray:
    """c_k = |W B_x|² - |W B_x + 2ρ|²; the design is feasible where every c_k < 0."""
    if not 0.0 < rho < 1.0:
        raise ConfigError(f"rho must be in (0, 1), got {rho}")
    v = _open_loop(w, feedback_response)
    return np.abs(v) ** 2 - np.abs(v + 2.0 * rho) ** 2


def wiener_initialization(problem: DesignProblem) -> np.ndarray:
    """Feedback-free regularized least-squares FIR fit, scaled to feasibility."""
    count = len(problem.repetitions)
    curvature = np.full(problem.grid.n_bins, problem.beta * count)
    cross = np.zeros(problem.grid.n_bins, dtype=complex)
    for phi, target, s in zip(problem.weights, problem.targets, problem.secondary):
        curvature = curvature + phi * np.abs(s) ** 2
        cross += phi * np.conj(target) * s
    autocorrelation = problem.to_taps(curvature.astype(complex))
    rhs = problem.to_taps(cross)
    try:
        w = linalg.solve_toeplitz(autocorrelation, rhs)
    except (linalg.LinAlgError, ValueError):
        logger.warning("wiener initialization is singular; starting from zero")
        return np.zeros(problem.filter_length)
    if not np.all(np.isfinite(w)):
        return np.zeros(problem.filter_length)
    w, scaled = problem.project(w)
    if scaled:
        logger.info("wiener initialization scaled to satisfy the stability constraint")
    return w


def _augmented_lagrangian(problem: DesignProblem, w0: np.ndarray, scale: float,
                          baseline: float) -> tuple[np.ndarray, list[float], SolverDiagnostics]:
    options = problem.config.solver
    bins = problem.constraint_bins
    feedback = problem.constraint_feedback[:, bins]
    offset = problem.rho - 2.0 * options.feasibility_margin
    multipliers = np.zeros(feedback.shape)
    penalty = options.penalty_initial
    rejected = 0

    def constraints(big_w: np.ndarray) -> np.ndarray:
        return (big_w[bins][np.newaxis, :] * feedback).real + offset

    def lagrangian(w: np.ndarray):
        nonlocal rejected
        try:
            value, grad = problem.evaluate(w, gradient=True)
        except _Singular:
            rejected += 1
            return REJECTED_STEP_VALUE, np.zeros_like(w)
        shifted = np.maximum(0.0, multipliers - penalty * constraints(problem.response(w)))
        value = value / scale + (np.sum(shifted**2) - np.sum(multipliers**2)) / (2.0 * penalty)
        pull = np.zeros(problem.grid.n_bins, dtype=complex)
        pull[bins] = np.sum(shifted * feedback, axis=0)
        return value, grad / scale - problem.to_taps(pull)

    w = np.asarray(w0, dtype=float)
    best_w, best_cost = w, baseline
    trace = [baseline]
    inner_total = 0
    projections = 0
    converged = False
    previous_value = math.inf
    previous_violation = math.inf
    stationarity = math.nan
    iteration = 0
    for iteration in range(1, options.max_iterations + 1):
        result = sp_optimize.minimize(
            lagrangian, w, jac=True, method="L-BFGS-B",
            options={"maxiter": options.inner_iterations, "ftol": 1e-15,
                     "gtol": options.tolerance * 1e-2},
        )
        w = result.x
        inner_total += int(result.nit)
        stationarity = float(np.max(np.abs(result.jac))) if result.jac is not None else math.nan
        g = constraints(problem.response(w))
        violation = float(max(0.0, -np.min(g)))

        candidate, scaled = problem.project(w)
        projections += int(scaled)
        candidate_cost = problem.safe_cost(candidate)
        if candidate_cost < best_cost:
            best_w, best_cost = candidate, candidate_cost
            trace.append(candidate_cost)
        logger.info(
            "outer iteration %d: cost %.6g (normalized %.6g), violation %.3g, penalty %.3g",
            iteration, candidate_cost, candidate_cost / scale, violation, penalty,
        )

        multipliers = np.maximum(0.0, multipliers - penalty * g)
        value = float(result.fun)
        settled = abs(previous_value - value) <= options.tolerance * max(1.0, abs(value))
        if violation <= options.feasibility_margin and settled:
            converged = True
            break
        if violation > 0.25 * previous_violation:
            penalty = min(penalty * options.penalty_growth, options.penalty_max)
        previous_violation = violation
        previous_value = value

    if rejected:
        logger.warning("%d line-search steps rejected on a singular closed loop", rejected)
    message = "converged" if converged else "maximum outer iterations reached"
    if not converged:
        logger.warning("solver stopped: %s", message)
    diagnostics = SolverDiagnostics(
        iterations=iteration,
        inner_iterations=inner_total,
        converged=converged,
        stationarity=stationarity,
        min_constraint_margin=problem.margin(best_w),
        rejected_steps=rejected,
        projections=projections,
        penalty=penalty,
        message=message,
    )
    return best_w, trace, diagnostics


def optimize_controller(problem: DesignProblem, w_init=None, label: str = "w",
                        sample_rate: float | None = None) -> ControllerDesign:
    config = problem.config
    if w_init is None and config.initialization == "wiener":
        w_init = wiener_initialization(problem)
    w0 = np.zeros(config.filter_length) if w_init is None else np.asarray(w_init, dtype=float)
    problem.response(w0)
    w0, _ = problem.project(w0)
    baseline = problem.safe_cost(w0)
    if not math.isfinite(baseline):
        logger.warning("initial controller closes a singular loop; starting from zero")
        w0 = np.zeros(config.filter_length)
        baseline = problem.evaluate(w0)

    if baseline > 0:
        best_w, trace, diagnostics = _augmented_lagrangian(problem, w0, baseline, baseline)
    else:
        best_w, trace = w0, [baseline]
        diagnostics = SolverDiagnostics(converged=True, min_constraint_margin=problem.margin(w0),
                                        message="nothing to attenuate")
    improved = len(trace) > 1
    if not improved:
        logger.warning("no feasible improvement over the initial controller")
    feasible = diagnostics.min_constraint_margin >= config.solver.feasibility_margin * (
        1.0 - 1e-6
    )
    return ControllerDesign(
        w=best_w,
        config=config,
        r0=problem.r0,
        cost_trace=tuple(trace),
        feasible=feasible,
        diagnostics=diagnostics,
        sample_rate=problem.grid.sample_rate if sample_rate is None else sample_rate,
        repetitions=problem.repetitions,
        label=label,
        improved=improved,
    )


def optimize(spectra: list[SpectralEstimate], paths: list[AcousticPathSet],
             config: DesignConfig, w_init=None, r0: int | None = None,
             label: str = "w") -> ControllerDesign:
    """Design the controller; the result always satisfies the stability constraint."""
    problem = DesignProblem(spectra, paths, config, r0)
    logger.info(
        "designing %s: L_w=%d, L_DFT=%d, repetitions %s, r0=%d, beta=%.4g",
        label, config.filter_length, config.dft_length, list(problem.repetitions),
        problem.r0, problem.beta,
    )
    return optimize_controller(problem, w_init, label)


def _open_loop(w, feedback_response) -> np.ndarray:
    feedback_response = np.asarray(feedback_response, dtype=complex)
    grid_length = 2 * (feedback_response.size - 1)
    w = np.asarray(w, dtype=float)
    if grid_length < 2 or w.size > grid_length:
        raise ConfigError(f"{w.size} taps do not fit a grid of {feedback_response.size} bins")
    return np.fft.rfft(w, n=grid_length) * feedback_response


def _phase_crossover(v: np.ndarray) -> tuple[float, float | None]:
    """Smallest 1/|v| where the chord contour meets the negative real axis."""
    start, end = v[:-1], v[1:]
    im0, im1 = start.imag, end.imag
    crossing = (im0 * im1 <= 0) & (im0 != im1)
    k = np.flatnonzero(crossing)
    t = im0[k] / (im0[k] - im1[k])
    re = start[k].real + t * (end[k].real - start[k].real)
    position = k + t
    on_axis = np.flatnonzero((v.imag == 0) & (v.real < 0))
    re = np.concatenate([re, v[on_axis].real])
    position = np.concatenate([position, on_axis.astype(float)])
    negative = re < 0
    if not np.any(negative):
        return math.inf, None
    i = int(np.argmin(np.where(negative, re, np.inf)))
    return 1.0 / -float(re[i]), float(position[i])


def _gain_crossover(v: np.ndarray) -> tuple[float | None, float | None]:
    """Smallest 180 - |arg v| where the chord contour meets the unit circle."""
    start = v[:-1]
    d = v[1:] - start
    a = np.abs(d) ** 2
    b = 2.0 * (start.real * d.real + start.imag * d.imag)
    c = np.abs(start) ** 2 - 1.0
    disc = b**2 - 4.0 * a * c
    k = np.flatnonzero((a > 0) & (disc >= 0))
    root = np.sqrt(disc[k])
    t = np.concatenate([(-b[k] - root) / (2.0 * a[k]), (-b[k] + root) / (2.0 * a[k])])
    k = np.concatenate([k, k])
    inside = (t >= 0.0) & (t <= 1.0)
    k, t = k[inside], t[inside]
    if k.size == 0:
        return None, None
    points = start[k] + t * d[k]
    margins = 180.0 - np.abs(np.degrees(np.angle(points)))
    i = int(np.argmin(margins))
    return float(margins[i]), float(k[i] + t[i])


def compute_margins(w, feedback_response, rho: float | None = None,
                    grid: FrequencyGrid | None = None) -> StabilityReport:
    """Gain/phase margins of the contour W B_x, interpolated linearly between bins.

    The gain margin is inf when the contour never reaches the negative real
    axis; the phase margin is None when |W B_x| never reaches 1.
    """
    v = _open_loop(w, feedback_response)
    gain_margin, phase_crossover = _phase_crossover(v)
    phase_margin, gain_crossover = _gain_crossover(v)

    # The mirrored half of the contour doubles the one-sided winding.
    angle = np.unwrap(np.angle(v + 1.0))
    encirclements = int(round((angle[-1] - angle[0]) / math.pi))

    constraint = None
    violating: tuple[int, ...] = ()
    if rho is not None:
        constraint = np.abs(v) ** 2 - np.abs(v + 2.0 * rho) ** 2
        violating = tuple(int(k) for k in np.flatnonzero(constraint >= 0))
    return StabilityReport(
        open_loop=v,
        gain_margin=gain_margin,
        phase_margin=phase_margin,
        encirclements=encirclements,
        min_real_part=float(np.min(v.real)),
        rho=rho,
        constraint=constraint,
        violating_bins=violating,
        phase_crossover=phase_crossover,
        gain_crossover=gain_crossover,
        grid=grid,
    )


def design_margins(design: ControllerDesign, paths: AcousticPathSet) -> StabilityReport:
    """Margins of a design against the feedback path of ``paths``."""
    grid = FrequencyGrid(design.config.dft_length, paths.sample_rate)
    return compute_margins(design.w, path_frequency_response(paths.feedback, grid),
                           design.config.rho, grid)


def export_controller(design: ControllerDesign, directory: str | Path,
                      margins: StabilityReport | None = None) -> Path:
    """Write <label>.csv, <label>.wav (float32) and the <label>.json sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / design.label
    np.savetxt(stem.with_suffix(".csv"), design.w, fmt="%.17g")
    sf.write(str(stem.with_suffix(".wav")), design.w.astype(np.float32),
             int(round(design.sample_rate)), subtype="FLOAT")
    sidecar = {
        "label": design.label,
        "r0": design.r0,
        "repetitions": list(design.repetitions),
        "sample_rate": design.sample_rate,
        "feasible": design.feasible,
        "improved": design.improved,
        "cost_trace": list(design.cost_trace),
        "config": design.config.to_dict(),
        "diagnostics": asdict(design.diagnostics),
        "coefficients": f"{design.label}.csv",
    }
    if margins is not None:
        sidecar["margins"] = margins.to_dict()
    path = stem.with_suffix(".json")
    path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_controller(path: str | Path) -> ControllerDesign:
    """Read a controller back from its JSON sidecar (or the CSV next to it)."""
    path = Path(path)
    sidecar_path = path if path.suffix == ".json" else path.with_suffix(".json")
    if not sidecar_path.is_file():
        raise IngestionError(f"controller sidecar not found at {sidecar_path}")
    try:
        sidecar = json.loads(sidecar_path.read_text())
        coefficients = sidecar_path.parent / sidecar["coefficients"]
        w = np.loadtxt(coefficients, dtype=float, ndmin=1)
    except (KeyError, ValueError, OSError) as e:
        raise IngestionError(f"controller {sidecar_path.name} is unreadable: {e}") from e
    diagnostics = SolverDiagnostics(**sidecar.get("diagnostics", {}))
    return ControllerDesign(
        w=w,
        config=DesignConfig.from_dict(sidecar["config"]),
        r0=int(sidecar["r0"]),
        cost_trace=tuple(sidecar.get("cost_trace", ())),
        feasible=bool(sidecar.get("feasible", False)),
        diagnostics=diagnostics,
        sample_rate=float(sidecar["sample_rate"]),
        repetitions=tuple(sidecar.get("repetitions", ())),
        label=sidecar.get("label", sidecar_path.stem),
        improved=bool(sidecar.get("improved", True)),
    )
