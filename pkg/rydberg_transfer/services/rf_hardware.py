"""
Four-electrode rf superposition and the polarization-purity procedure.

The field at the centre of the structure is linear in the complex drives
V_i exp(i phi_i): (E+, E-) = T @ C @ drives, with T a 2x4 transfer matrix and
C an optional 4x4 cross-talk matrix. The procedure tunes amplitudes and
phases against a measurement oracle returning sigma+/sigma- Rabi
frequencies on the i -> i' transition.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

import constants
from models.errors import InvalidParameterError, OptimizationError
from models.schemas import CODATA, AuditRecord, ElectrodeDrive, PhysicalConstants, PolarizationMeasurement
from utils import parallel_map

logger = logging.getLogger(__name__)

ELECTRODE_AZIMUTHS = np.arange(constants.ELECTRODE_COUNT) * (math.pi / 2.0)


@dataclass(frozen=True)
class TransferMatrix:
    """Maps complex electrode drives to (E+, E-) in V/m at the centre."""

    matrix: np.ndarray
    cross_talk: np.ndarray = field(default_factory=lambda: np.eye(constants.ELECTRODE_COUNT, dtype=complex))

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=complex)
        cross_talk = np.asarray(self.cross_talk, dtype=complex)
        if matrix.shape != (2, constants.ELECTRODE_COUNT) or cross_talk.shape != (4, 4):
            raise InvalidParameterError("transfer matrix must be 2x4 with a 4x4 cross-talk matrix")
        if not (np.all(np.isfinite(matrix)) and np.all(np.isfinite(cross_talk))):
            raise InvalidParameterError("transfer matrix entries must be finite")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "cross_talk", cross_talk)

    @property
    def effective(self) -> np.ndarray:
        return self.matrix @ self.cross_talk

    @classmethod
    def ideal(cls, scale: float = constants.IDEAL_FIELD_PER_DRIVE) -> "TransferMatrix":
        """Electrode k at azimuth a_k = k pi / 2 fed with line phase psi_k.

        Each electrode alone gives a linear field along its axis,
        scale * e^{i psi_k} (e^{-i a_k}, e^{i a_k}) / 2. Opposite electrodes
        driven in phase give a linear field, and drive phases k pi / 2 give
        pure sigma+.
        """
        line = np.exp(1j * np.asarray(constants.ELECTRODE_LINE_PHASES))
        columns = np.vstack([np.exp(-1j * ELECTRODE_AZIMUTHS), np.exp(1j * ELECTRODE_AZIMUTHS)]) * line
        return cls(0.5 * scale * columns)

    @classmethod
    def perturbed(
        cls,
        seed: int,
        amplitude_spread: float = 0.1,
        phase_spread: float = 0.2,
        cross_talk: float = 0.0,
        scale: float = constants.IDEAL_FIELD_PER_DRIVE,
    ) -> "TransferMatrix":
        """Ideal geometry with random per-entry amplitude and phase imbalances."""
        rng = np.random.default_rng(seed)
        base = cls.ideal(scale).matrix
        gains = 1.0 + amplitude_spread * rng.uniform(-1.0, 1.0, size=base.shape)
        phases = phase_spread * rng.uniform(-1.0, 1.0, size=base.shape)
        coupling = np.eye(4, dtype=complex)
        if cross_talk > 0:
            off = cross_talk * (rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4)))
            coupling = coupling + off - np.diag(np.diag(off))
        return cls(base * gains * np.exp(1j * phases), coupling)

    def save(self, path: Path) -> Path:
        """Plain-text table: one row per electrode, columns Re/Im of T+ and T- (and cross-talk)."""
        rows = np.column_stack(
            [
                np.arange(1, 5),
                self.matrix[0].real,
                self.matrix[0].imag,
                self.matrix[1].real,
                self.matrix[1].imag,
                self.cross_talk.real,
                self.cross_talk.imag,
            ]
        )
        header = "electrode re_plus im_plus re_minus im_minus " + " ".join(
            [f"re_c{k}" for k in range(1, 5)] + [f"im_c{k}" for k in range(1, 5)]
        )
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(path, rows, header=header, fmt="%.17g")
        return path

    @classmethod
    def load(cls, path: Path) -> "TransferMatrix":
        try:
            rows = np.loadtxt(path, ndmin=2)
        except (OSError, ValueError) as e:
            raise InvalidParameterError(f"cannot read transfer matrix {path}: {e}") from e
        if rows.shape[0] != 4 or rows.shape[1] not in (5, 13):
            raise InvalidParameterError(f"transfer matrix table {path} has shape {rows.shape}")
        matrix = np.vstack([rows[:, 1] + 1j * rows[:, 2], rows[:, 3] + 1j * rows[:, 4]])
        if rows.shape[1] == 13:
            return cls(matrix, rows[:, 5:9] + 1j * rows[:, 9:13])
        return cls(matrix)


def save_drives(drives: ElectrodeDrive, path: Path) -> Path:
    rows = np.column_stack([np.arange(1, 5), drives.amplitudes, drives.phases])
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, rows, header="electrode amplitude phase_rad", fmt="%.17g")
    return path


def load_drives(path: Path) -> ElectrodeDrive:
    try:
        rows = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as e:
        raise InvalidParameterError(f"cannot read drive table {path}: {e}") from e
    return ElectrodeDrive(amplitudes=tuple(rows[:, 1]), phases=tuple(rows[:, 2]))


def field_at_center(drives: ElectrodeDrive, transfer: TransferMatrix) -> Tuple[complex, complex]:
    """(E+, E-) in V/m."""
    e_plus, e_minus = transfer.effective @ drives.phasors
    return complex(e_plus), complex(e_minus)


def rabi_from_fields(amplitude: complex, dipole: float, physics: PhysicalConstants = CODATA) -> float:
    """Omega = sqrt(2) d |E| / hbar in rad/s."""
    if dipole <= 0:
        raise InvalidParameterError("transition dipole must be positive")
    return math.sqrt(2.0) * dipole * abs(amplitude) / physics.hbar


def purity(e_plus: complex, e_minus: complex) -> float:
    """|E-| / sqrt(|E+|^2 + |E-|^2)."""
    total = math.hypot(abs(e_plus), abs(e_minus))
    if total == 0.0:
        raise InvalidParameterError("purity undefined for a zero field")
    return abs(e_minus) / total


def drive_purity(drives: ElectrodeDrive, transfer: TransferMatrix) -> float:
    return purity(*field_at_center(drives, transfer))


def global_scale(drives: ElectrodeDrive, factor: float) -> ElectrodeDrive:
    if factor < 0:
        raise InvalidParameterError(f"scale factor must be >= 0, got {factor}")
    return drives.model_copy(update={"amplitudes": tuple(a * factor for a in drives.amplitudes)})


def drive_for_rabi(
    drives: ElectrodeDrive,
    transfer: TransferMatrix,
    omega_rabi: float,
    n: int = constants.TRANSFER_MANIFOLD,
    physics: PhysicalConstants = CODATA,
) -> ElectrodeDrive:
    """Scale all drives so the hydrogenic ladder Rabi frequency equals ``omega_rabi``."""
    e_plus, _ = field_at_center(drives, transfer)
    current = 1.5 * n * physics.e * physics.a0 * abs(e_plus) / physics.hbar
    if current == 0.0:
        raise InvalidParameterError("drives produce no sigma+ field")
    return global_scale(drives, omega_rabi / current)


class Polarimeter(Protocol):
    def measure(self, drives: ElectrodeDrive) -> PolarizationMeasurement: ...


class SimulatedPolarimeter:
    """Rabi-frequency measurements on i -> i' from the linear field model.

    Omega- is a direct sigma- Rabi measurement. Omega+ uses the reversed
    static field, where the sigma+ component drives the same transition as a
    sigma- field, i.e. the roles of E+ and E- swap. Each reading is the
    average of ``repeats`` draws with multiplicative Gaussian noise.
    """

    def __init__(
        self,
        transfer: TransferMatrix,
        dipole: float = constants.DEFAULT_DIPOLE,
        noise: float = constants.MEASUREMENT_NOISE,
        repeats: int = constants.MEASUREMENT_REPEATS,
        seed: int = 0,
    ):
        if noise < 0 or repeats < 1:
            raise InvalidParameterError("noise must be >= 0 and repeats >= 1")
        self.transfer = transfer
        self.dipole = dipole
        self.noise = noise
        self.repeats = repeats
        self.rng = np.random.default_rng(seed)
        self.count = 0

    def _sigma_minus_rabi(self, e_plus: complex, e_minus: complex, reversed_field: bool) -> float:
        sigma_minus = e_plus if reversed_field else e_minus
        exact = rabi_from_fields(sigma_minus, self.dipole)
        if self.noise == 0.0:
            return exact
        draws = exact * (1.0 + self.noise * self.rng.standard_normal(self.repeats))
        return float(max(0.0, np.mean(draws)))

    def measure(self, drives: ElectrodeDrive) -> PolarizationMeasurement:
        e_plus, e_minus = field_at_center(drives, self.transfer)
        omega_plus = self._sigma_minus_rabi(e_plus, e_minus, reversed_field=True)
        omega_minus = self._sigma_minus_rabi(e_plus, e_minus, reversed_field=False)
        self.count += 1
        spread = self.noise / math.sqrt(self.repeats)
        return PolarizationMeasurement(
            omega_plus=omega_plus,
            omega_minus=omega_minus,
            uncertainty=spread * max(omega_plus, omega_minus),
        )


@dataclass
class PolarizationResult:
    drives: ElectrodeDrive
    audit: List[AuditRecord]
    measurements: int

    def audit_lines(self) -> List[str]:
        return [record.as_line() for record in self.audit]


def _sinusoid_extremum(phases: Sequence[float], powers: Sequence[float], maximize: bool) -> float:
    """Extremum of c0 + c1 cos(p) + c2 sin(p) through three samples."""
    design = np.column_stack([np.ones(3), np.cos(phases), np.sin(phases)])
    c0, c1, c2 = np.linalg.solve(design, np.asarray(powers))
    best = math.atan2(c2, c1)
    return best if maximize else best + math.pi


def _phase_search(objective: Callable[[float], float], maximize: bool, step: int) -> float:
    """Coarse scan, golden-section refinement to PHASE_TOLERANCE, sinusoid polish.

    ``objective`` returns a measured Rabi frequency; its square is sinusoidal
    in the phase.
    """
    sign = -1.0 if maximize else 1.0
    grid = np.linspace(0.0, 2.0 * math.pi, constants.PHASE_GRID_POINTS, endpoint=False)
    values = np.array([sign * objective(p) for p in grid])
    best = int(np.argmin(values))
    width = grid[1] - grid[0]
    # golden works on an offset variable near 1 so its relative tolerance is absolute in rad
    origin = grid[best] - 1.0

    def shifted(u: float) -> float:
        return sign * objective(origin + u)

    try:
        result = minimize_scalar(
            shifted,
            bracket=(1.0 - width, 1.0, 1.0 + width),
            method="golden",
            options={"xtol": 0.5 * constants.PHASE_TOLERANCE},
        )
    except ValueError:
        # ties on the coarse grid leave no strict bracket
        result = minimize_scalar(
            shifted,
            bounds=(1.0 - width, 1.0 + width),
            method="bounded",
            options={"xatol": constants.PHASE_TOLERANCE},
        )
    if not result.success or not math.isfinite(result.fun):
        raise OptimizationError(f"phase search did not converge: {result.message}", step=step)
    phase = origin + float(result.x)
    golden_value = float(result.fun)

    offset = constants.PHASE_POLISH_OFFSET
    samples = [phase - offset, phase, phase + offset]
    powers = [objective(p) ** 2 for p in samples]
    try:
        polished = _sinusoid_extremum(samples, powers, maximize)
    except np.linalg.LinAlgError:
        return float(np.mod(phase, 2.0 * math.pi))
    if sign * objective(polished) <= golden_value:
        phase = polished
    return float(np.mod(phase, 2.0 * math.pi))


def optimize_polarization(
    transfer: Optional[TransferMatrix] = None,
    oracle: Optional[Polarimeter] = None,
    noise: float = constants.MEASUREMENT_NOISE,
    passes: int = constants.POLARIZATION_PASSES,
    initial: Optional[ElectrodeDrive] = None,
    repeats: int = constants.MEASUREMENT_REPEATS,
    seed: int = 0,
) -> PolarizationResult:
    """Sequential amplitude/phase tuning minimizing the sigma- component.

    Each pass: (1) sigma+ of every electrode alone, (2) amplitude matching
    inside pairs 1-3 and 2-4, (3) intra-pair phase maximizing the pair's
    sigma+, (4) scaling pair 2-4 so both pairs give the same sigma-,
    (5) common phase of pair 2-4 minimizing the global sigma-.

    Args:
        transfer: Transfer matrix for the default simulated oracle
        oracle: Measurement oracle; built from ``transfer`` when omitted
        noise: Relative noise of the default oracle
        passes: Number of passes through the five steps
        initial: Starting drives (unit amplitudes, zero phases by default)
        repeats: Averaged readings per measurement for the default oracle
        seed: Seed of the default oracle

    Returns:
        Final drives with the audit log

    Raises:
        OptimizationError: with the step index when a step cannot proceed
    """
    if oracle is None:
        if transfer is None:
            transfer = TransferMatrix.ideal()
        oracle = SimulatedPolarimeter(transfer, noise=noise, repeats=repeats, seed=seed)
    drives = initial or ElectrodeDrive()
    audit: List[AuditRecord] = []
    count = 0

    def measure(d: ElectrodeDrive) -> PolarizationMeasurement:
        nonlocal count
        count += 1
        return oracle.measure(d)

    def record(pass_index: int, step: int, parameter: str, value: float, m: PolarizationMeasurement) -> None:
        entry = AuditRecord(
            pass_index=pass_index,
            step=step,
            parameter=parameter,
            value=value,
            omega_plus=m.omega_plus,
            omega_minus=m.omega_minus,
            drives=drives,
        )
        audit.append(entry)
        logger.debug("polarization %s", entry.as_line())

    for pass_index in range(passes):
        # 1. sigma+ of each electrode alone
        single = []
        for i in range(constants.ELECTRODE_COUNT):
            m = measure(drives.only({i}))
            single.append(m.omega_plus)
            record(pass_index, 1, f"V{i + 1}", drives.amplitudes[i], m)

        # 2. amplitude matching inside each pair
        for a, b in constants.ELECTRODE_PAIRS:
            if single[b] <= 0.0:
                raise OptimizationError(f"electrode {b + 1} produces no sigma+ field", step=2)
            drives = drives.with_amplitude(b, drives.amplitudes[b] * single[a] / single[b])
            record(pass_index, 2, f"V{b + 1}", drives.amplitudes[b], measure(drives.only({b})))

        # 3. intra-pair phase maximizing the pair sigma+
        for a, b in constants.ELECTRODE_PAIRS:
            pair = {a, b}
            base = drives

            def pair_plus(phase: float, base=base, pair=pair, b=b) -> float:
                return measure(base.with_phase(b, phase).only(pair)).omega_plus

            phase = _phase_search(pair_plus, maximize=True, step=3)
            drives = drives.with_phase(b, phase)
            record(pass_index, 3, f"phi{b + 1}", phase, measure(drives.only(pair)))

        # 4. equalize the sigma- of both pairs by scaling pair 2-4
        (a1, b1), (a2, b2) = constants.ELECTRODE_PAIRS
        minus_first = measure(drives.only({a1, b1})).omega_minus
        minus_second = measure(drives.only({a2, b2})).omega_minus
        if minus_second > 0.0 and minus_first > 0.0:
            factor = minus_first / minus_second
            drives = drives.with_amplitude(a2, drives.amplitudes[a2] * factor)
            drives = drives.with_amplitude(b2, drives.amplitudes[b2] * factor)
        else:
            factor = 1.0
            logger.warning("pass %d step 4: a pair produces no sigma- field, scaling skipped", pass_index)
        record(pass_index, 4, "scale24", factor, measure(drives))

        # 5. common phase of pair 2-4 minimizing the global sigma-
        base = drives
        phi_a, phi_b = base.phases[a2], base.phases[b2]

        def global_minus(shift: float) -> float:
            shifted = base.with_phase(a2, phi_a + shift).with_phase(b2, phi_b + shift)
            return measure(shifted).omega_minus

        shift = _phase_search(global_minus, maximize=False, step=5)
        drives = drives.with_phase(a2, phi_a + shift).with_phase(b2, phi_b + shift)
        record(pass_index, 5, "phi24", shift, measure(drives))

    logger.info("Polarization procedure: %d passes, %d measurements", passes, count)
    return PolarizationResult(drives=drives, audit=audit, measurements=count)


def grid_search_polarization(
    transfer: TransferMatrix,
    drives: ElectrodeDrive,
    scales: Optional[np.ndarray] = None,
    phases: Optional[np.ndarray] = None,
) -> Tuple[float, float, float]:
    """Brute-force minimum purity over the pair 2-4 scale and common phase.

    Returns:
        (purity, scale, phase) at the best grid point
    """
    scales = np.linspace(0.5, 1.5, 401) if scales is None else np.asarray(scales)
    phases = np.linspace(0.0, 2.0 * math.pi, 2001, endpoint=False) if phases is None else np.asarray(phases)
    (a1, b1), (a2, b2) = constants.ELECTRODE_PAIRS
    plus_a, minus_a = field_at_center(drives.only({a1, b1}), transfer)
    plus_b, minus_b = field_at_center(drives.only({a2, b2}), transfer)
    rotor = scales[:, None] * np.exp(1j * phases)[None, :]
    e_plus = plus_a + rotor * plus_b
    e_minus = minus_a + rotor * minus_b
    values = np.abs(e_minus) / np.hypot(np.abs(e_plus), np.abs(e_minus))
    row, col = np.unravel_index(int(np.argmin(values)), values.shape)
    return float(values[row, col]), float(scales[row]), float(phases[col])


def monte_carlo_purity(
    transfer: TransferMatrix,
    noise: float,
    runs: int = constants.MONTE_CARLO_RUNS,
    seed: int = 0,
    repeats: int = constants.MEASUREMENT_REPEATS,
    passes: int = constants.POLARIZATION_PASSES,
    workers: int = 1,
) -> np.ndarray:
    """True purity reached by independent noisy runs (seeds seed .. seed + runs - 1)."""

    def run(k: int) -> float:
        result = optimize_polarization(transfer, noise=noise, passes=passes, repeats=repeats, seed=seed + k)
        return drive_purity(result.drives, transfer)

    values = np.asarray(parallel_map(run, range(runs), workers))
    logger.info("Monte-Carlo purity over %d runs: median %.4g", runs, float(np.median(values)))
    return values
