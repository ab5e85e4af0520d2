"""
Time propagation of manifold states and the transfer protocols built on it.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import solve_ivp
from scipy.stats import binom

import constants
from models.errors import InvalidParameterError, NormDriftError, RydbergError
from models.schemas import CODATA, DefectTable, DriveConfig, FieldRamp, PhysicalConstants, PulseEnvelope
from services.stark_manifold import (
    Hamiltonian,
    StarkMap,
    build_hydrogen_hamiltonian,
    build_rb_hamiltonian,
    field_for_frequency,
    ladder_resonance_field,
    rb_stark_map,
    stark_frequency,
)
from utils import parallel_map, write_csv

logger = logging.getLogger(__name__)

Model = Literal["hydrogen", "rb"]
Method = Literal["exact-step", "adaptive"]


@dataclass(frozen=True)
class StateVector:
    amplitudes: np.ndarray
    labels: Tuple[str, ...] = ()

    def __post_init__(self):
        amplitudes = np.asarray(self.amplitudes, dtype=complex)
        object.__setattr__(self, "amplitudes", amplitudes)
        if abs(np.linalg.norm(amplitudes) - 1.0) > constants.NORM_TOLERANCE:
            raise InvalidParameterError(f"state is not normalized (norm={np.linalg.norm(amplitudes):.12f})")

    @classmethod
    def basis_state(cls, dim: int, index: int, labels: Tuple[str, ...] = ()) -> "StateVector":
        amplitudes = np.zeros(dim, dtype=complex)
        amplitudes[index] = 1.0
        return cls(amplitudes, labels)

    @property
    def populations(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2


@dataclass(frozen=True)
class Trajectory:
    """Populations of every basis state on a time grid."""

    times: np.ndarray
    populations: np.ndarray  # (len(times), dim)
    named: Dict[str, int] = field(default_factory=dict)
    amplitudes: Optional[np.ndarray] = None

    def columns(self) -> List[str]:
        order = ("south",) + constants.NAMED_LEVEL_ORDER
        return [label for label in order if label in self.named]

    def level_populations(self) -> Dict[str, np.ndarray]:
        """Named-level populations plus ``other`` (the remainder)."""
        out = {label: self.populations[:, self.named[label]] for label in self.columns()}
        named_total = sum(out.values()) if out else np.zeros(len(self.times))
        out["other"] = np.clip(self.populations.sum(axis=1) - named_total, 0.0, None)
        return out

    def final(self) -> Dict[str, float]:
        return {label: float(values[-1]) for label, values in self.level_populations().items()}

    def at(self, index: int) -> Dict[str, float]:
        return {label: float(values[index]) for label, values in self.level_populations().items()}

    def norm_error(self) -> float:
        return float(np.max(np.abs(self.populations.sum(axis=1) - 1.0)))

    def to_csv(self, path: Path) -> Path:
        levels = self.level_populations()
        header = ["time_us"] + list(levels)
        return write_csv(path, header, [self.times / constants.US] + list(levels.values()))


def _as_vector(psi0: Union[StateVector, np.ndarray], dim: int) -> np.ndarray:
    vector = psi0.amplitudes if isinstance(psi0, StateVector) else np.asarray(psi0, dtype=complex)
    if vector.shape != (dim,):
        raise InvalidParameterError(f"initial state has shape {vector.shape}, Hamiltonian dimension is {dim}")
    if abs(np.linalg.norm(vector) - 1.0) > constants.NORM_TOLERANCE:
        raise InvalidParameterError("initial state is not normalized")
    return vector


def _check_norms(amplitudes: np.ndarray, times: np.ndarray) -> None:
    drift = np.abs(np.linalg.norm(amplitudes, axis=1) - 1.0)
    worst = int(np.argmax(drift))
    if drift[worst] > constants.NORM_ABORT:
        raise NormDriftError(float(drift[worst]), float(times[worst]), worst)
    if drift[worst] > constants.NORM_TOLERANCE:
        logger.warning("Norm drift %.3e at t=%.4e s", drift[worst], times[worst])


def evolve_static(static: np.ndarray, psi0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Amplitudes exp(-i H t) psi0 for every t (any order), H diagonalized once."""
    energies, vectors = np.linalg.eigh(static)
    coefficients = vectors.conj().T @ psi0
    phases = np.exp(-1j * np.outer(times, energies))
    return (phases * coefficients) @ vectors.T


def _step(h: np.ndarray, dt: float) -> np.ndarray:
    energies, vectors = np.linalg.eigh(h)
    return (vectors * np.exp(-1j * energies * dt)) @ vectors.conj().T


def _substep(hamiltonian: Hamiltonian, max_substep: Optional[float]) -> float:
    limit = constants.TWO_PI / (constants.SUBSTEPS_PER_PERIOD * hamiltonian.rate_bound)
    return min(limit, max_substep) if max_substep else limit


def _propagate_exact(
    hamiltonian: Hamiltonian, psi: np.ndarray, grid: np.ndarray, max_substep: Optional[float]
) -> np.ndarray:
    t0, t_end = grid[0], grid[-1]
    span = t_end - t0
    out = np.empty((grid.size, psi.size), dtype=complex)
    out[0] = psi
    if span == 0.0:
        return out
    steps = max(1, int(math.ceil(span / _substep(hamiltonian, max_substep) - 1e-9)))
    dt = span / steps
    logger.debug("Exact-step propagation: %d sub-steps of %.3e s", steps, dt)
    current = psi.copy()
    k = 0
    sample = 1
    while sample < grid.size:
        # advance the uniform chain up to the sub-step containing the next sample
        while k < steps and t0 + (k + 1) * dt <= grid[sample] + 1e-12 * dt:
            current = _step(hamiltonian(t0 + (k + 0.5) * dt), dt) @ current
            k += 1
        remainder = grid[sample] - (t0 + k * dt)
        if remainder > 1e-12 * dt:
            t_k = t0 + k * dt
            out[sample] = _step(hamiltonian(t_k + 0.5 * remainder), remainder) @ current
        else:
            out[sample] = current
        sample += 1
    return out


def _propagate_adaptive(hamiltonian: Hamiltonian, psi: np.ndarray, grid: np.ndarray) -> np.ndarray:
    if grid.size == 1:
        return psi[None, :].copy()

    def rhs(t, y):
        return -1j * (hamiltonian(t) @ y)

    solution = solve_ivp(
        rhs,
        (grid[0], grid[-1]),
        psi,
        method="DOP853",
        t_eval=grid,
        rtol=constants.ADAPTIVE_RTOL,
        atol=constants.ADAPTIVE_ATOL,
        max_step=_substep(hamiltonian, None) * constants.SUBSTEPS_PER_PERIOD / 4.0,
    )
    if not solution.success:
        raise RydbergError(f"adaptive propagation failed: {solution.message}")
    return solution.y.T


def propagate(
    hamiltonian: Hamiltonian,
    psi0: Union[StateVector, np.ndarray],
    grid: Sequence[float],
    method: Method = "exact-step",
    max_substep: Optional[float] = None,
    store_amplitudes: bool = False,
) -> Trajectory:
    """Propagate a state on a time grid.

    Static generators are diagonalized once. Otherwise the exact-step method
    applies exact exponentials over a uniform sub-step chain fixed by the
    generator's rate bound; samples between chain points get a partial step
    that does not feed back into the chain.

    Args:
        hamiltonian: Generator in rad/s
        psi0: Normalized initial state
        grid: Strictly increasing sample times (s); the first is the start time
        method: "exact-step" or "adaptive"
        max_substep: Optional tighter sub-step bound (s)
        store_amplitudes: Keep complex amplitudes in the trajectory

    Returns:
        Trajectory of basis-state populations
    """
    psi = _as_vector(psi0, hamiltonian.dim)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise InvalidParameterError("time grid must be non-empty and strictly increasing")
    if hamiltonian.is_static:
        amplitudes = evolve_static(hamiltonian.static, psi, grid - grid[0])
    elif method == "exact-step":
        amplitudes = _propagate_exact(hamiltonian, psi, grid, max_substep)
    elif method == "adaptive":
        amplitudes = _propagate_adaptive(hamiltonian, psi, grid)
    else:
        raise InvalidParameterError(f"unknown propagation method {method!r}")
    _check_norms(amplitudes, grid)
    return Trajectory(
        times=grid,
        populations=np.abs(amplitudes) ** 2,
        named=dict(hamiltonian.named),
        amplitudes=amplitudes if store_amplitudes else None,
    )


def detuning(n: int, field: float, omega_rf: float, physics: PhysicalConstants = CODATA) -> float:
    """delta = omega_n - omega_rf in rad/s."""
    return stark_frequency(n, field, physics) - omega_rf


def spin_rotation_populations(j: float, theta: float) -> np.ndarray:
    """Populations of mJ = -J .. J after rotating |J, -J> by theta."""
    twice_j = int(round(2 * j))
    k = np.arange(twice_j + 1)
    return binom.pmf(k, twice_j, math.sin(0.5 * theta) ** 2)


# Transfer models


@lru_cache(maxsize=8)
def _cached_starkmap(
    n: int, field: float, defects: Tuple[Tuple[int, float], ...], l_hydrogenic: int, window: int, m_lo: int
) -> StarkMap:
    table = DefectTable(defects=dict(defects), l_hydrogenic=l_hydrogenic)
    return rb_stark_map(n, field, table, window, range(m_lo, n + window))


def rb_starkmap(n: int, field: float, defects: DefectTable, window: int, m_lo: int = 2) -> StarkMap:
    """Stark map shared between calls with identical arguments."""
    return _cached_starkmap(n, field, tuple(sorted(defects.defects.items())), defects.l_hydrogenic, window, m_lo)


@lru_cache(maxsize=32)
def _cached_resonance(
    n: int, omega: float, defects: Tuple[Tuple[int, float], ...], l_hydrogenic: int, window: int
) -> float:
    table = DefectTable(defects=dict(defects), l_hydrogenic=l_hydrogenic)
    return ladder_resonance_field(n, omega, table, window)


def rb_resonance_field(n: int, omega: float, defects: DefectTable, window: int) -> float:
    """Field putting the mean diagonalized i -> c step on omega, shared between calls."""
    return _cached_resonance(n, omega, tuple(sorted(defects.defects.items())), defects.l_hydrogenic, window)


def rabi_field(n: int, omega_rabi: float, physics: PhysicalConstants = CODATA) -> float:
    """sigma+ amplitude E+ (V/m) for a ladder Rabi frequency omega_rabi."""
    if omega_rabi < 0:
        raise InvalidParameterError("Rabi frequency must be >= 0")
    return omega_rabi * physics.hbar / (1.5 * n * physics.e * physics.a0)


def transfer_hamiltonian(
    n: int,
    omega_rabi: float,
    delta: float,
    model: Model = "hydrogen",
    envelope: Optional[PulseEnvelope] = None,
    omega_rf: float = constants.RF_FREQUENCY,
    defects: Optional[DefectTable] = None,
    window: int = constants.DEFAULT_WINDOW,
    ladder_depth: int = constants.DEFAULT_LADDER_DEPTH,
    field_ramp: Optional[FieldRamp] = None,
    calibrate: bool = True,
) -> Hamiltonian:
    """Rotating-frame transfer generator; the static field is set from delta.

    For the rb model with ``calibrate`` the field puts the mean diagonalized
    i -> c step at omega_rf + delta; otherwise the linear hydrogen field is used.
    """
    if omega_rf + delta < 0:
        raise InvalidParameterError("omega_rf + delta must be >= 0")
    drive = DriveConfig(
        omega_rf=omega_rf,
        e_plus=complex(rabi_field(n, omega_rabi)),
        envelope=envelope or PulseEnvelope.square(),
    )
    if field_ramp is not None:
        reference = 0.5 * (field_ramp.f_start + field_ramp.f_end)
    elif model == "rb" and calibrate:
        reference = rb_resonance_field(n, omega_rf + delta, defects or DefectTable.rubidium(), window)
    else:
        reference = field_for_frequency(n, omega_rf + delta)
    if model == "hydrogen":
        return build_hydrogen_hamiltonian(
            n, reference, drive, "rotating", m_sector="ladder", field_ramp=field_ramp
        )
    if model == "rb":
        defects = defects or DefectTable.rubidium()
        starkmap = rb_starkmap(n, reference, defects, window)
        return build_rb_hamiltonian(
            n, reference, defects, window, drive, ladder_depth, field_ramp=field_ramp, starkmap=starkmap
        ).hamiltonian
    raise InvalidParameterError(f"unknown model {model!r}")


def initial_state(hamiltonian: Hamiltonian, model: Model) -> StateVector:
    label = constants.INITIAL_LEVEL[model]
    if label not in hamiltonian.named:
        raise InvalidParameterError(f"initial level {label!r} is not in the basis")
    return StateVector.basis_state(hamiltonian.dim, hamiltonian.named[label], hamiltonian.labels)


def _populations(hamiltonian: Hamiltonian, amplitudes: np.ndarray) -> Dict[str, float]:
    trajectory = Trajectory(np.zeros(1), np.abs(amplitudes[None, :]) ** 2, dict(hamiltonian.named))
    return trajectory.at(0)


def rabi_transfer(
    n: int,
    omega_rabi: float,
    delta: float,
    duration: float,
    model: Model = "hydrogen",
    envelope: Optional[PulseEnvelope] = None,
    **model_options,
) -> Dict[str, float]:
    """Named-level populations after an rf pulse of nominal length ``duration``.

    Square envelopes (the default) reduce to an ideal pulse of the effective
    duration (nominal plus the envelope's correction); shaped envelopes are
    propagated with the ramps included and hold = duration - rise - fall.
    """
    if duration < 0:
        raise InvalidParameterError(f"pulse duration must be >= 0, got {duration}")
    envelope = envelope or PulseEnvelope.square()
    if envelope.is_square:
        hamiltonian = transfer_hamiltonian(n, omega_rabi, delta, model, **model_options)
        psi0 = initial_state(hamiltonian, model)
        effective = envelope.effective_duration(duration)
        if effective == 0.0:
            return _populations(hamiltonian, psi0.amplitudes)
        return propagate(hamiltonian, psi0, [0.0, effective]).final()
    hold = max(0.0, duration - envelope.rise - envelope.fall)
    shaped = envelope.model_copy(update={"hold": hold})
    hamiltonian = transfer_hamiltonian(n, omega_rabi, delta, model, shaped, **model_options)
    psi0 = initial_state(hamiltonian, model)
    if shaped.total == 0.0:
        return _populations(hamiltonian, psi0.amplitudes)
    return propagate(hamiltonian, psi0, [0.0, shaped.total]).final()


def rabi_scan(
    n: int,
    omega_rabi: float,
    delta: float,
    durations: Sequence[float],
    model: Model = "hydrogen",
    envelope: Optional[PulseEnvelope] = None,
    workers: int = 1,
    **model_options,
) -> Trajectory:
    """Populations versus nominal pulse length; times of the trajectory are the nominal durations."""
    durations = np.asarray(durations, dtype=float)
    if np.any(durations < 0):
        raise InvalidParameterError("pulse durations must be >= 0")
    envelope = envelope or PulseEnvelope.square()
    logger.info("Rabi scan (%s model, n=%d): %d durations", model, n, durations.size)
    if envelope.is_square:
        hamiltonian = transfer_hamiltonian(n, omega_rabi, delta, model, **model_options)
        psi0 = initial_state(hamiltonian, model).amplitudes
        effective = np.array([envelope.effective_duration(d) for d in durations])
        amplitudes = evolve_static(hamiltonian.static, psi0, effective)
        amplitudes[effective == 0.0] = psi0
        _check_norms(amplitudes, durations)
        return Trajectory(durations, np.abs(amplitudes) ** 2, dict(hamiltonian.named))

    def point(duration: float) -> Dict[str, float]:
        return rabi_transfer(n, omega_rabi, delta, duration, model, envelope, **model_options)

    results = parallel_map(point, durations, workers)
    hamiltonian = transfer_hamiltonian(n, omega_rabi, delta, model, **model_options)
    populations = np.zeros((durations.size, hamiltonian.dim))
    for row, result in enumerate(results):
        for label, index in hamiltonian.named.items():
            populations[row, index] = result[label]
    return Trajectory(durations, populations, dict(hamiltonian.named))


def passage_sequence(
    ramp: Optional[FieldRamp] = None,
    rise: float = constants.PASSAGE_RF_RISE,
    fall: float = constants.PASSAGE_RF_FALL,
    shape: str = "linear",
) -> Tuple[FieldRamp, PulseEnvelope]:
    """Field ramp and rf envelope of the adiabatic sequence (rf up, field ramp, rf down)."""
    ramp = (ramp or FieldRamp.passage()).model_copy(update={"pre_hold": rise, "post_hold": fall})
    envelope = PulseEnvelope(rise=rise, hold=ramp.duration, fall=fall, shape=shape)
    return ramp, envelope


def _recentred_ramp(n: int, ramp: FieldRamp, omega_rf: float, model_options: Dict) -> FieldRamp:
    defects = model_options.get("defects") or DefectTable.rubidium()
    window = model_options.get("window", constants.DEFAULT_WINDOW)
    shift = rb_resonance_field(n, omega_rf, defects, window) - field_for_frequency(n, omega_rf)
    logger.debug("passage ramp shifted by %.4g V/m onto the ladder resonance", shift)
    return ramp.model_copy(update={"f_start": ramp.f_start + shift, "f_end": ramp.f_end + shift})


def adiabatic_passage(
    n: int,
    omega_rabi: float,
    ramp: Optional[FieldRamp] = None,
    rise: float = constants.PASSAGE_RF_RISE,
    fall: float = constants.PASSAGE_RF_FALL,
    model: Model = "rb",
    shape: str = "linear",
    omega_rf: float = constants.RF_FREQUENCY,
    allow_non_crossing: bool = False,
    **model_options,
) -> Dict[str, float]:
    """Final populations after the rf-dressed field sweep through resonance.

    The crossing is checked on the nominal (linear) ramp. For the rb model the
    ramp is then shifted by the offset between the calibrated ladder resonance
    and the linear resonant field, so the sweep stays centred on the
    diagonalized ladder.

    Raises:
        InvalidParameterError: if the ramp does not cross delta = 0 and
            ``allow_non_crossing`` is False
    """
    ramp, envelope = passage_sequence(ramp, rise, fall, shape)
    start = detuning(n, ramp.f_start, omega_rf)
    end = detuning(n, ramp.f_end, omega_rf)
    if start * end > 0:
        message = (
            f"field ramp does not cross resonance (delta from {start / constants.TWO_PI / constants.MHZ:.2f} "
            f"to {end / constants.TWO_PI / constants.MHZ:.2f} MHz)"
        )
        if not allow_non_crossing:
            raise InvalidParameterError(message)
        logger.warning(message)
    if model == "rb" and model_options.get("calibrate", True):
        ramp = _recentred_ramp(n, ramp, omega_rf, model_options)
    hamiltonian = transfer_hamiltonian(
        n, omega_rabi, 0.0, model, envelope, omega_rf, field_ramp=ramp, **model_options
    )
    psi0 = initial_state(hamiltonian, model)
    return propagate(hamiltonian, psi0, [0.0, ramp.total]).final()


def adiabatic_scan(
    n: int,
    omegas: Sequence[float],
    model: Model = "rb",
    workers: int = 1,
    **options,
) -> List[Dict[str, float]]:
    """adiabatic_passage over Rabi frequencies, merged in input order."""
    logger.info("Adiabatic scan (%s model, n=%d): %d Rabi frequencies", model, n, len(omegas))
    return parallel_map(lambda omega: adiabatic_passage(n, omega, model=model, **options), list(omegas), workers)
