"""
Optimal control of piecewise-constant rf schedules.

A control model is H(Omega, delta, phi) = H0 + delta M + Omega (e^{i phi} R + h.c.)
in rad/s. The transfer fidelity |<target| U |initial>|^2 is differentiated
exactly through the eigendecomposition of every segment generator.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

import constants
from models.errors import InvalidParameterError, OptimizationError
from models.schemas import DefectTable, DriveConfig, MultiStartReport, OptimizationReport, PulseSchedule
from services.dynamics import Trajectory, propagate, rb_resonance_field, rb_starkmap
from services.stark_manifold import (
    Hamiltonian,
    build_hydrogen_hamiltonian,
    build_rb_hamiltonian,
    field_for_frequency,
    pseudospin_operators,
)
from utils import parallel_map, read_csv, write_csv

logger = logging.getLogger(__name__)

OptimizerMethod = Literal["gradient", "derivative-free"]


@dataclass(frozen=True)
class ControlModel:
    name: str
    drift: np.ndarray
    detuning_operator: np.ndarray
    raising: np.ndarray
    initial: np.ndarray
    target: np.ndarray
    labels: Tuple[str, ...] = ()
    named: Dict[str, int] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.drift.shape[0]

    def control_operator(self, phase: float = 0.0) -> np.ndarray:
        a = np.exp(1j * phase) * self.raising
        return a + a.conj().T

    def segment_hamiltonian(self, omega: float, delta: float, phase: float = 0.0) -> np.ndarray:
        return self.drift + delta * self.detuning_operator + omega * self.control_operator(phase)


def _basis_vector(dim: int, index: int) -> np.ndarray:
    vector = np.zeros(dim, dtype=complex)
    vector[index] = 1.0
    return vector


def hydrogen_control_model(n: int = constants.TRANSFER_MANIFOLD, omega_rf: float = constants.RF_FREQUENCY) -> ControlModel:
    """n1 = 0 ladder: H = delta J1z + Omega J1x, from the south pole to the circular level."""
    reference = build_hydrogen_hamiltonian(
        n, field_for_frequency(n, omega_rf), DriveConfig(omega_rf=omega_rf), "rotating", m_sector="ladder"
    )
    ops = pseudospin_operators(n, "ladder")
    return ControlModel(
        name="hydrogen",
        drift=np.array(reference.static, dtype=complex),
        detuning_operator=ops["J1z"].astype(complex),
        raising=0.5 * ops["J1+"].astype(complex),
        initial=_basis_vector(reference.dim, reference.named[constants.INITIAL_LEVEL["hydrogen"]]),
        target=_basis_vector(reference.dim, reference.named["c"]),
        labels=reference.labels,
        named=dict(reference.named),
    )


def rb_control_model(
    n: int = constants.TRANSFER_MANIFOLD,
    defects: Optional[DefectTable] = None,
    window: int = constants.DEFAULT_WINDOW,
    ladder_depth: int = constants.DEFAULT_LADDER_DEPTH,
    omega_rf: float = constants.RF_FREQUENCY,
) -> ControlModel:
    """Rb subspace from i to c at the calibrated ladder resonance; delta moves the static field."""
    defects = defects or DefectTable.rubidium()
    reference_field = rb_resonance_field(n, omega_rf, defects, window)
    starkmap = rb_starkmap(n, reference_field, defects, window)
    rb = build_rb_hamiltonian(
        n, reference_field, defects, window, DriveConfig(omega_rf=omega_rf), ladder_depth, starkmap=starkmap
    )
    hamiltonian = rb.hamiltonian
    for label in (constants.INITIAL_LEVEL["rb"], "c"):
        if label not in hamiltonian.named:
            raise InvalidParameterError(f"level {label!r} missing from the Rb subspace")
    return ControlModel(
        name="rb",
        drift=np.array(hamiltonian.static, dtype=complex),
        detuning_operator=(rb.field_operator * field_for_frequency(n, 1.0)).astype(complex),
        raising=(rb.coupling / (3.0 * n)).astype(complex),
        initial=_basis_vector(hamiltonian.dim, hamiltonian.named[constants.INITIAL_LEVEL["rb"]]),
        target=_basis_vector(hamiltonian.dim, hamiltonian.named["c"]),
        labels=hamiltonian.labels,
        named=dict(hamiltonian.named),
    )


def _phases(schedule: PulseSchedule) -> np.ndarray:
    if schedule.phases is None:
        return np.zeros(schedule.segment_count)
    return np.asarray(schedule.phases)


def _segments(schedule: PulseSchedule, model: ControlModel) -> List[Tuple[np.ndarray, np.ndarray, np.ndarray, float]]:
    durations, omegas, deltas = schedule.arrays()
    out = []
    for tau, omega, delta, phase in zip(durations, omegas, deltas, _phases(schedule)):
        h = model.segment_hamiltonian(omega, delta, phase)
        energies, vectors = np.linalg.eigh(h)
        out.append((h, energies, vectors, float(tau)))
    return out


def _evolve(energies: np.ndarray, vectors: np.ndarray, tau: float, psi: np.ndarray) -> np.ndarray:
    return vectors @ (np.exp(-1j * energies * tau) * (vectors.conj().T @ psi))


def fidelity(schedule: PulseSchedule, model: ControlModel) -> float:
    """|<target| U(schedule) |initial>|^2."""
    psi = model.initial
    for _, energies, vectors, tau in _segments(schedule, model):
        psi = _evolve(energies, vectors, tau, psi)
    value = float(abs(model.target.conj() @ psi) ** 2)
    if not math.isfinite(value):
        raise OptimizationError("non-finite fidelity")
    return value


def _divided_differences(energies: np.ndarray, tau: float) -> np.ndarray:
    """Frechet kernel of exp(-i lambda tau): (f(a) - f(b)) / (a - b), stable at a = b."""
    mean = 0.5 * (energies[:, None] + energies[None, :])
    gap = energies[:, None] - energies[None, :]
    return -1j * tau * np.exp(-1j * mean * tau) * np.sinc(gap * tau / (2.0 * math.pi))


def fidelity_gradient(
    schedule: PulseSchedule, model: ControlModel
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Fidelity with its exact derivatives per segment w.r.t. Omega, delta and duration."""
    segments = _segments(schedule, model)
    forward = [model.initial]
    for _, energies, vectors, tau in segments:
        forward.append(_evolve(energies, vectors, tau, forward[-1]))
    amplitude = model.target.conj() @ forward[-1]

    count = len(segments)
    grads = {name: np.zeros(count) for name in ("omega", "delta", "duration")}
    chi = model.target
    for k in range(count - 1, -1, -1):
        h, energies, vectors, tau = segments[k]
        kernel = _divided_differences(energies, tau)
        left = vectors.conj().T @ chi
        right = vectors.conj().T @ forward[k]

        def d_amplitude(operator: np.ndarray) -> complex:
            return left.conj() @ ((vectors.conj().T @ operator @ vectors) * kernel) @ right

        phase = _phases(schedule)[k]
        grads["omega"][k] = 2.0 * np.real(np.conj(amplitude) * d_amplitude(model.control_operator(phase)))
        grads["delta"][k] = 2.0 * np.real(np.conj(amplitude) * d_amplitude(model.detuning_operator))
        grads["duration"][k] = 2.0 * np.real(np.conj(amplitude) * (-1j) * (chi.conj() @ h @ forward[k + 1]))
        # backward state before segment k
        chi = vectors @ (np.exp(1j * energies * tau) * (vectors.conj().T @ chi))
    value = float(abs(amplitude) ** 2)
    if not math.isfinite(value):
        raise OptimizationError("non-finite fidelity")
    return value, grads


def _project_durations(values: np.ndarray, lower: float, total: float) -> np.ndarray:
    """Euclidean projection onto {v >= lower, sum(v) <= total}."""
    clipped = np.maximum(values, lower)
    if clipped.sum() <= total:
        return clipped
    lo, hi = 0.0, float(np.max(values) - lower)
    for _ in range(200):
        theta = 0.5 * (lo + hi)
        if np.maximum(values - theta, lower).sum() > total:
            lo = theta
        else:
            hi = theta
    return np.maximum(values - hi, lower)


@dataclass
class ControlProblem:
    """Schedule variables scaled by their bounds: Omega / Omega_max, delta / delta_max, tau / budget."""

    model: ControlModel
    template: PulseSchedule
    variable_durations: bool = False
    min_duration: float = constants.OPT_MIN_DURATION

    def __post_init__(self):
        count = self.template.segment_count
        if self.variable_durations and count * self.min_duration > self.template.budget:
            raise OptimizationError(
                f"infeasible bounds: {count} segments of at least {self.min_duration:.3g} s exceed the budget"
            )

    @property
    def count(self) -> int:
        return self.template.segment_count

    @property
    def has_delta(self) -> bool:
        return self.template.delta_max > 0.0

    def pack(self, schedule: PulseSchedule) -> np.ndarray:
        durations, omegas, deltas = schedule.arrays()
        parts = [omegas / self.template.omega_max]
        if self.has_delta:
            parts.append(deltas / self.template.delta_max)
        if self.variable_durations:
            parts.append(durations / self.template.budget)
        return np.concatenate(parts)

    def _split(self, x: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
        n = self.count
        omegas = x[:n]
        offset = n
        deltas = None
        if self.has_delta:
            deltas = x[offset : offset + n]
            offset += n
        durations = x[offset : offset + n] if self.variable_durations else None
        return omegas, deltas, durations

    def project(self, x: np.ndarray) -> np.ndarray:
        omegas, deltas, durations = self._split(np.asarray(x, dtype=float))
        parts = [np.clip(omegas, 0.0, 1.0)]
        if deltas is not None:
            parts.append(np.clip(deltas, -1.0, 1.0))
        if durations is not None:
            parts.append(_project_durations(durations, self.min_duration / self.template.budget, 1.0))
        return np.concatenate(parts)

    def unpack(self, x: np.ndarray) -> PulseSchedule:
        omegas, deltas, durations = self._split(x)
        return self.template.with_values(
            durations=None if durations is None else durations * self.template.budget,
            omegas=omegas * self.template.omega_max,
            deltas=None if deltas is None else deltas * self.template.delta_max,
        )

    def bounds(self) -> List[Tuple[float, float]]:
        bounds = [(0.0, 1.0)] * self.count
        if self.has_delta:
            bounds += [(-1.0, 1.0)] * self.count
        if self.variable_durations:
            bounds += [(self.min_duration / self.template.budget, 1.0)] * self.count
        return bounds

    def value(self, x: np.ndarray) -> float:
        return fidelity(self.unpack(x), self.model)

    def value_and_gradient(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grads = fidelity_gradient(self.unpack(x), self.model)
        parts = [grads["omega"] * self.template.omega_max]
        if self.has_delta:
            parts.append(grads["delta"] * self.template.delta_max)
        if self.variable_durations:
            parts.append(grads["duration"] * self.template.budget)
        return value, np.concatenate(parts)

    def finite_difference_gradient(self, x: np.ndarray, step: float = constants.FINITE_DIFFERENCE_STEP) -> np.ndarray:
        """Central differences in the scaled variables (no projection)."""
        x = np.asarray(x, dtype=float)
        gradient = np.zeros_like(x)
        for k in range(x.size):
            shift = np.zeros_like(x)
            shift[k] = step
            gradient[k] = (self._raw_value(x + shift) - self._raw_value(x - shift)) / (2.0 * step)
        return gradient

    def _raw_value(self, x: np.ndarray) -> float:
        omegas, deltas, durations = self._split(x)
        template = self.template
        schedule = PulseSchedule.model_construct(
            durations=tuple(template.durations if durations is None else durations * template.budget),
            omegas=tuple(omegas * template.omega_max),
            deltas=tuple(template.deltas if deltas is None else deltas * template.delta_max),
            phases=template.phases,
            omega_max=template.omega_max,
            delta_max=template.delta_max,
            budget=template.budget,
        )
        return fidelity(schedule, self.model)


def gradient_check(
    schedule: PulseSchedule, model: ControlModel, variable_durations: bool = False
) -> Tuple[np.ndarray, np.ndarray, float]:
    """(analytic, finite-difference, relative error) in scaled variables."""
    problem = ControlProblem(model, schedule, variable_durations)
    x = problem.pack(schedule)
    _, analytic = problem.value_and_gradient(x)
    numeric = problem.finite_difference_gradient(x)
    scale = max(np.linalg.norm(analytic), 1e-300)
    return analytic, numeric, float(np.linalg.norm(analytic - numeric) / scale)


def _gradient_ascent(problem: ControlProblem, x0: np.ndarray, max_iterations: int) -> OptimizationReport:
    x = problem.project(x0)
    value, gradient = problem.value_and_gradient(x)
    trace, norms = [value], []
    step = constants.OPT_INITIAL_STEP
    reason = "iteration-cap"
    iterations = 0
    while iterations < max_iterations:
        iterations += 1
        norm = float(np.linalg.norm(problem.project(x + gradient) - x))
        norms.append(norm)
        if norm < constants.OPT_GRADIENT_TOLERANCE:
            reason = "gradient"
            break
        accepted = False
        for _ in range(constants.OPT_MAX_BACKTRACKS):
            candidate = problem.project(x + step * gradient)
            if problem.value(candidate) >= value + constants.OPT_ARMIJO * gradient @ (candidate - x):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            reason = "line-search"
            break
        new_value, new_gradient = problem.value_and_gradient(candidate)
        s = candidate - x
        y = gradient - new_gradient
        curvature = float(s @ y)
        # Barzilai-Borwein step for the minimization of -F
        step = float(s @ s) / curvature if curvature > 0 else 2.0 * step
        step = float(np.clip(step, *constants.OPT_STEP_BOUNDS))
        gain = new_value - value
        x, value, gradient = candidate, new_value, new_gradient
        trace.append(value)
        if gain < constants.OPT_FIDELITY_TOLERANCE:
            reason = "fidelity-gain"
            break
    logger.debug("Gradient ascent: %d iterations, F=%.8f (%s)", iterations, value, reason)
    return OptimizationReport(
        fidelity_trace=trace,
        gradient_norms=norms,
        schedule=problem.unpack(x),
        termination_reason=reason,
        iterations=iterations,
        method="gradient",
    )


def _derivative_free(problem: ControlProblem, x0: np.ndarray, max_iterations: int) -> OptimizationReport:
    best_x = problem.project(x0)
    trace = [problem.value(best_x)]

    def objective(x: np.ndarray) -> float:
        return -problem.value(problem.project(x))

    def record(xk: np.ndarray) -> None:
        nonlocal best_x
        candidate = problem.project(xk)
        value = problem.value(candidate)
        if value > trace[-1]:
            best_x = candidate
            trace.append(value)

    result = minimize(
        objective,
        best_x,
        method="Powell",
        bounds=problem.bounds(),
        callback=record,
        options={"maxiter": max_iterations, "xtol": 1e-8, "ftol": 1e-12},
    )
    record(result.x)
    _, gradient = problem.value_and_gradient(best_x)
    norm = float(np.linalg.norm(problem.project(best_x + gradient) - best_x))
    return OptimizationReport(
        fidelity_trace=trace,
        gradient_norms=[norm],
        schedule=problem.unpack(best_x),
        termination_reason="converged" if result.success else str(result.message),
        iterations=int(result.nit),
        method="derivative-free",
    )


def optimize(
    schedule0: PulseSchedule,
    model: ControlModel,
    method: OptimizerMethod = "gradient",
    variable_durations: bool = False,
    max_iterations: int = constants.OPT_MAX_ITERATIONS,
) -> OptimizationReport:
    """Maximize the transfer fidelity within the schedule's bounds.

    Args:
        schedule0: Feasible start; its bounds and (fixed) durations define the problem
        model: Control model
        method: "gradient" (projected ascent, Barzilai-Borwein step, Armijo
            backtracking) or "derivative-free" (bounded Powell)
        variable_durations: Optimize segment durations under the time budget
        max_iterations: Iteration cap

    Returns:
        OptimizationReport with the fidelity trace of accepted steps

    Raises:
        OptimizationError: infeasible bounds or non-finite fidelity
    """
    problem = ControlProblem(model, schedule0, variable_durations)
    x0 = problem.pack(schedule0)
    if method == "gradient":
        report = _gradient_ascent(problem, x0, max_iterations)
    elif method == "derivative-free":
        report = _derivative_free(problem, x0, max_iterations)
    else:
        raise InvalidParameterError(f"unknown optimization method {method!r}")
    logger.info(
        "Pulse optimization (%s, %s model, %d segments): F %.6f -> %.6f, %s",
        method,
        model.name,
        schedule0.segment_count,
        report.fidelity_trace[0],
        report.fidelity,
        report.termination_reason,
    )
    return report


def random_schedule(template: PulseSchedule, seed: int) -> PulseSchedule:
    """Feasible start with the template's durations and uniformly drawn controls."""
    rng = np.random.default_rng(seed)
    count = template.segment_count
    return template.with_values(
        omegas=rng.uniform(0.0, 1.0, count) * template.omega_max,
        deltas=rng.uniform(-1.0, 1.0, count) * template.delta_max,
    )


def multi_start(
    template: PulseSchedule,
    model: ControlModel,
    starts: int = constants.OPT_STARTS,
    seed: int = 0,
    method: OptimizerMethod = "gradient",
    variable_durations: bool = False,
    max_iterations: int = constants.OPT_MAX_ITERATIONS,
    workers: int = 1,
) -> MultiStartReport:
    """Independent optimizations from seeded random starts; seeds are seed .. seed + starts - 1."""
    seeds = [seed + k for k in range(starts)]

    def run(s: int) -> OptimizationReport:
        return optimize(random_schedule(template, s), model, method, variable_durations, max_iterations)

    reports = parallel_map(run, seeds, workers)
    fidelities = [r.fidelity for r in reports]
    best = reports[int(np.argmax(fidelities))]
    logger.info("Multi-start: best F=%.6f, dispersion %.3g over %d starts", best.fidelity, np.std(fidelities), starts)
    return MultiStartReport(best=best, fidelities=fidelities, seeds=seeds)


def single_pulse_schedule(
    omega_rabi: float = constants.RABI_FREQUENCY, duration: Optional[float] = None, budget: Optional[float] = None
) -> PulseSchedule:
    """One resonant segment; the default length is a pi rotation of the ladder."""
    duration = math.pi / omega_rabi if duration is None else duration
    return PulseSchedule.uniform(1, duration, omega_rabi, budget=max(duration, budget or duration))


def simulate_schedule(schedule: PulseSchedule, model: ControlModel, points_per_segment: int = 20) -> Trajectory:
    """Time-resolved populations under a schedule, segment by segment."""
    psi = model.initial
    times: List[np.ndarray] = [np.zeros(1)]
    populations: List[np.ndarray] = [np.abs(psi[None, :]) ** 2]
    start = 0.0
    durations, omegas, deltas = schedule.arrays()
    for tau, omega, delta, phase in zip(durations, omegas, deltas, _phases(schedule)):
        segment = Hamiltonian(
            static=model.segment_hamiltonian(omega, delta, phase),
            labels=model.labels,
            named=dict(model.named),
            rate_bound=max(abs(omega), abs(delta), 1.0),
        )
        grid = np.linspace(0.0, tau, points_per_segment + 1)
        trajectory = propagate(segment, psi, grid, store_amplitudes=True)
        psi = trajectory.amplitudes[-1]
        times.append(start + grid[1:])
        populations.append(trajectory.populations[1:])
        start += tau
    return Trajectory(np.concatenate(times), np.vstack(populations), dict(model.named))


def save_schedule(schedule: PulseSchedule, path: Path) -> Path:
    durations, omegas, deltas = schedule.arrays()
    mhz = constants.TWO_PI * constants.MHZ
    header = ["segment", "duration_ns", "omega_over_2pi_MHz", "delta_over_2pi_MHz"]
    columns = [np.arange(schedule.segment_count), durations / constants.NS, omegas / mhz, deltas / mhz]
    if schedule.phases is not None:
        header.append("phase_rad")
        columns.append(np.asarray(schedule.phases))
    return write_csv(path, header, columns)


def load_schedule(
    path: Path,
    omega_max: float = constants.OPT_OMEGA_MAX,
    delta_max: float = constants.OPT_DELTA_MAX,
    budget: Optional[float] = None,
) -> PulseSchedule:
    """Read a schedule CSV; the budget defaults to the schedule's total duration."""
    try:
        table = read_csv(path)
        mhz = constants.TWO_PI * constants.MHZ
        durations = table["duration_ns"] * constants.NS
        omegas = table["omega_over_2pi_MHz"] * mhz
        deltas = table["delta_over_2pi_MHz"] * mhz
    except (OSError, KeyError, ValueError) as e:
        raise InvalidParameterError(f"cannot read schedule {path}: {e}") from e
    total = float(durations.sum())
    return PulseSchedule(
        durations=tuple(durations),
        omegas=tuple(omegas),
        deltas=tuple(deltas),
        phases=tuple(table["phase_rad"]) if "phase_rad" in table else None,
        omega_max=max(omega_max, float(np.max(omegas))),
        delta_max=max(delta_max, float(np.max(np.abs(deltas)))),
        budget=max(budget or total, total),
    )
