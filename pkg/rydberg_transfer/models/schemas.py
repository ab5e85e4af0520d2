"""
Pydantic records shared by the services and the CLI.
"""

import hashlib
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

import constants
from models.errors import InvalidParameterError


class FrozenModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class PhysicalConstants(FrozenModel):
    """CODATA constants used in every frequency and coupling formula."""

    e: float = constants.ELEMENTARY_CHARGE
    a0: float = constants.BOHR_RADIUS
    hbar: float = constants.HBAR
    h: float = constants.PLANCK
    hartree: float = constants.HARTREE_ENERGY

    @model_validator(mode="after")
    def _check_planck(self) -> "PhysicalConstants":
        if not math.isclose(self.h, 2.0 * math.pi * self.hbar, rel_tol=1e-12):
            raise ValueError("h must equal 2*pi*hbar")
        return self

    @classmethod
    def from_codata(cls) -> "PhysicalConstants":
        return cls()

    @property
    def rydberg_energy(self) -> float:
        """Infinite-mass Rydberg energy in J."""
        return 0.5 * self.hartree

    @property
    def atomic_field(self) -> float:
        """Atomic unit of electric field in V/m."""
        return self.hartree / (self.e * self.a0)

    def constant_set_hash(self) -> str:
        """MD5 of the sorted ``name=value`` lines."""
        lines = sorted(f"{name}={value!r}" for name, value in self.model_dump().items())
        return hashlib.md5("\n".join(lines).encode()).hexdigest()


CODATA = PhysicalConstants.from_codata()


class ParabolicState(FrozenModel):
    n: int = Field(ge=1)
    n1: int = Field(ge=0)
    n2: int = Field(ge=0)
    m: int

    @model_validator(mode="after")
    def _check_closure(self) -> "ParabolicState":
        if self.n1 + self.n2 + abs(self.m) + 1 != self.n:
            raise ValueError(f"n1 + n2 + |m| + 1 != n for {self}")
        return self

    @classmethod
    def of(cls, n: int, n1: int, m: int) -> "ParabolicState":
        return cls(n=n, n1=n1, n2=n - n1 - abs(m) - 1, m=m)

    @property
    def k(self) -> int:
        return self.n1 - self.n2


class SphericalState(FrozenModel):
    n: int = Field(ge=1)
    l: int = Field(ge=0)  # noqa: E741
    m: int

    @model_validator(mode="after")
    def _check_ranges(self) -> "SphericalState":
        if not abs(self.m) <= self.l < self.n:
            raise ValueError(f"need |m| <= l < n, got {self}")
        return self


class SpinLadderState(FrozenModel):
    """Level of the n1 = 0 ladder seen as a spin J = (n - 1)/2."""

    J: float = Field(ge=0.5)
    mJ: float

    @model_validator(mode="after")
    def _check_half_integers(self) -> "SpinLadderState":
        twice_j = 2.0 * self.J
        offset = self.mJ + self.J
        if not float(twice_j).is_integer() or not float(offset).is_integer():
            raise ValueError("J and mJ + J must be (half-)integers")
        if not 0 <= offset <= twice_j:
            raise ValueError(f"mJ={self.mJ} outside [-J, J] for J={self.J}")
        return self

    @property
    def n(self) -> int:
        return int(round(2.0 * self.J)) + 1

    def to_parabolic(self) -> ParabolicState:
        return ParabolicState.of(self.n, 0, int(round(self.mJ + self.J)))

    @classmethod
    def from_parabolic(cls, state: ParabolicState) -> "SpinLadderState":
        if state.n1 != 0 or state.m < 0:
            raise InvalidParameterError(f"{state} is not on the n1=0 ladder")
        j = 0.5 * (state.n - 1)
        return cls(J=j, mJ=state.m - j)


class DefectTable(FrozenModel):
    """Quantum defects per orbital series; zero from ``l_hydrogenic`` on."""

    defects: Dict[int, float] = Field(default_factory=dict)
    l_hydrogenic: int = Field(default=constants.RUBIDIUM_HYDROGENIC_L, ge=0)

    @field_validator("defects")
    @classmethod
    def _non_negative(cls, value: Dict[int, float]) -> Dict[int, float]:
        for l, delta in value.items():
            if l < 0 or delta < 0:
                raise ValueError(f"invalid defect entry l={l}, delta={delta}")
        return value

    @model_validator(mode="after")
    def _zero_above_threshold(self) -> "DefectTable":
        for l, delta in self.defects.items():
            if l >= self.l_hydrogenic and delta != 0.0:
                raise ValueError(f"delta_{l} must vanish for l >= {self.l_hydrogenic}")
        return self

    def delta(self, l: int) -> float:  # noqa: E741
        if l >= self.l_hydrogenic:
            return 0.0
        return self.defects.get(l, 0.0)

    def effective_n(self, n: int, l: int) -> float:  # noqa: E741
        return n - self.delta(l)

    @property
    def is_hydrogenic(self) -> bool:
        return all(delta == 0.0 for delta in self.defects.values())

    @classmethod
    def rubidium(cls) -> "DefectTable":
        return cls(defects=dict(constants.RUBIDIUM_DEFECTS), l_hydrogenic=constants.RUBIDIUM_HYDROGENIC_L)

    @classmethod
    def hydrogen(cls) -> "DefectTable":
        return cls(defects={}, l_hydrogenic=0)


class NamedLevel(FrozenModel):
    label: str
    n: int
    state: ParabolicState


class PulseEnvelope(FrozenModel):
    """Trapezoidal rf amplitude envelope.

    ``correction`` is a flat shift of the nominal duration used when an
    envelope is reduced to an ideal square pulse of the same area; it
    defaults to the measured -68 ns. ``square`` gives the uncorrected pulse.
    """

    rise: float = Field(default=0.0, ge=0.0)
    hold: float = Field(default=0.0, ge=0.0)
    fall: float = Field(default=0.0, ge=0.0)
    shape: Literal["linear", "cosine"] = "linear"
    correction: float = constants.PULSE_DURATION_CORRECTION

    @classmethod
    def square(cls, duration: float = 0.0) -> "PulseEnvelope":
        return cls(hold=duration, correction=0.0)

    @classmethod
    def calibrated(cls, duration: float = 0.0) -> "PulseEnvelope":
        return cls(hold=duration, correction=constants.PULSE_DURATION_CORRECTION)

    @property
    def is_square(self) -> bool:
        return self.rise == 0.0 and self.fall == 0.0

    @property
    def total(self) -> float:
        return self.rise + self.hold + self.fall

    def effective_duration(self, nominal: float) -> float:
        """Square-pulse duration equivalent to a nominal pulse length."""
        if nominal < 0:
            raise InvalidParameterError(f"pulse duration must be >= 0, got {nominal}")
        if nominal == 0.0:
            return 0.0
        return max(0.0, nominal + self.correction)

    def _ramp(self, fraction: np.ndarray) -> np.ndarray:
        fraction = np.clip(fraction, 0.0, 1.0)
        if self.shape == "cosine":
            return 0.5 * (1.0 - np.cos(np.pi * fraction))
        return fraction

    def amplitude(self, t):
        """Relative amplitude in [0, 1] at time(s) ``t`` measured from the pulse start."""
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        on = (t >= 0.0) & (t <= self.total)
        out = np.where(on, 1.0, out)
        if self.rise > 0:
            rising = on & (t < self.rise)
            out = np.where(rising, self._ramp(t / self.rise), out)
        if self.fall > 0:
            start = self.rise + self.hold
            falling = on & (t > start)
            out = np.where(falling, self._ramp((self.total - t) / self.fall), out)
        return out if out.ndim else float(out)


class FieldRamp(FrozenModel):
    """Piecewise-linear static field: hold, linear ramp, hold."""

    f_start: float
    f_end: float
    duration: float = Field(gt=0.0)
    pre_hold: float = Field(default=0.0, ge=0.0)
    post_hold: float = Field(default=0.0, ge=0.0)

    @classmethod
    def passage(cls) -> "FieldRamp":
        return cls(
            f_start=constants.PASSAGE_FIELD_START,
            f_end=constants.PASSAGE_FIELD_END,
            duration=constants.PASSAGE_FIELD_RAMP,
            pre_hold=constants.PASSAGE_RF_RISE,
            post_hold=constants.PASSAGE_RF_FALL,
        )

    @property
    def total(self) -> float:
        return self.pre_hold + self.duration + self.post_hold

    def field(self, t):
        t = np.asarray(t, dtype=float)
        fraction = np.clip((t - self.pre_hold) / self.duration, 0.0, 1.0)
        out = self.f_start + (self.f_end - self.f_start) * fraction
        return out if out.ndim else float(out)


class DriveConfig(FrozenModel):
    omega_rf: float = constants.RF_FREQUENCY
    e_plus: complex = 0j
    e_minus: complex = 0j
    envelope: PulseEnvelope = Field(default_factory=PulseEnvelope)

    @model_validator(mode="after")
    def _check_frequency(self) -> "DriveConfig":
        if (self.e_plus != 0 or self.e_minus != 0) and self.omega_rf <= 0:
            raise ValueError("omega_rf must be positive when a drive amplitude is set")
        return self


class ElectrodeDrive(FrozenModel):
    """Amplitudes and phases of the four ring electrodes."""

    amplitudes: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    phases: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    @field_validator("amplitudes")
    @classmethod
    def _non_negative(cls, value):
        if any(v < 0 or not math.isfinite(v) for v in value):
            raise ValueError(f"electrode amplitudes must be finite and >= 0, got {value}")
        return value

    @field_validator("phases")
    @classmethod
    def _wrap(cls, value):
        return tuple(float(np.mod(p, 2.0 * math.pi)) for p in value)

    @property
    def phasors(self) -> np.ndarray:
        return np.asarray(self.amplitudes) * np.exp(1j * np.asarray(self.phases))

    def with_amplitude(self, index: int, value: float) -> "ElectrodeDrive":
        amplitudes = list(self.amplitudes)
        amplitudes[index] = value
        return self.model_copy(update={"amplitudes": tuple(amplitudes)})

    def with_phase(self, index: int, value: float) -> "ElectrodeDrive":
        phases = list(self.phases)
        phases[index] = float(np.mod(value, 2.0 * math.pi))
        return self.model_copy(update={"phases": tuple(phases)})

    def only(self, indices) -> "ElectrodeDrive":
        """Same drive with every electrode outside ``indices`` switched off."""
        amplitudes = tuple(a if i in indices else 0.0 for i, a in enumerate(self.amplitudes))
        return self.model_copy(update={"amplitudes": amplitudes})


class PolarizationMeasurement(FrozenModel):
    omega_plus: float = Field(ge=0.0)
    omega_minus: float = Field(ge=0.0)
    uncertainty: float = Field(default=0.0, ge=0.0)


class AuditRecord(FrozenModel):
    """One line of the polarization procedure log."""

    pass_index: int
    step: int
    parameter: str
    value: float
    omega_plus: float
    omega_minus: float
    drives: ElectrodeDrive

    def as_line(self) -> str:
        return (
            f"pass={self.pass_index} step={self.step} {self.parameter}={self.value:.9g} "
            f"omega_plus={self.omega_plus:.9g} omega_minus={self.omega_minus:.9g}"
        )


class ProbeCalibration(FrozenModel):
    eta0: float = Field(default=constants.DETECTION_EFFICIENCY_RATIO, gt=0.0, le=1.0)
    eta: Dict[str, float] = Field(default_factory=dict)

    @field_validator("eta")
    @classmethod
    def _in_unit_interval(cls, value: Dict[str, float]) -> Dict[str, float]:
        for level, eta in value.items():
            if not 0.0 < eta <= 1.0:
                raise ValueError(f"eta for {level} must lie in (0, 1], got {eta}")
        return value

    def efficiency(self, level: str) -> float:
        if level not in self.eta:
            raise InvalidParameterError(f"no probe efficiency calibrated for level {level!r}")
        return self.eta[level]


class IonizationModel(FrozenModel):
    """Phenomenological field-ionization detection; fields in arbitrary units."""

    thresholds: Dict[str, float] = Field(default_factory=lambda: dict(constants.IONIZATION_THRESHOLDS))
    width: float = Field(default=constants.IONIZATION_WIDTH, gt=0.0)
    efficiencies: Dict[str, float] = Field(default_factory=dict)
    unit: str = constants.IONIZATION_FIELD_UNIT

    @model_validator(mode="after")
    def _check_efficiencies(self) -> "IonizationModel":
        for level, eta in self.efficiencies.items():
            if not 0.0 < eta <= 1.0:
                raise ValueError(f"detection efficiency for {level} must lie in (0, 1]")
        return self

    def efficiency(self, level: str) -> float:
        return self.efficiencies.get(level, 1.0)

    @classmethod
    def default(cls, eta0: float = constants.DETECTION_EFFICIENCY_RATIO) -> "IonizationModel":
        """i-like levels detected with efficiency 1, circular-side levels with ``eta0``."""
        efficiencies = {label: 1.0 for label in ("south", "i", "i'", "j", "k", "l")}
        efficiencies.update({label: eta0 for label in ("c", "d", "e", "f", "g")})
        return cls(efficiencies=efficiencies)


class FitResult(FrozenModel):
    parameters: Dict[str, float]
    uncertainties: Dict[str, float]
    residual_norm: float
    flags: List[str] = Field(default_factory=list)

    @field_validator("uncertainties")
    @classmethod
    def _non_negative(cls, value: Dict[str, float]) -> Dict[str, float]:
        return {k: abs(v) for k, v in value.items()}

    @property
    def ok(self) -> bool:
        return not self.flags


class PulseSchedule(FrozenModel):
    """Piecewise-constant (Omega, delta) segments with their bounds."""

    durations: Tuple[float, ...]
    omegas: Tuple[float, ...]
    deltas: Tuple[float, ...]
    phases: Optional[Tuple[float, ...]] = None
    omega_max: float = Field(default=constants.OPT_OMEGA_MAX, gt=0.0)
    delta_max: float = Field(default=constants.OPT_DELTA_MAX, ge=0.0)
    budget: float = Field(default=constants.OPT_BUDGET, gt=0.0)

    @model_validator(mode="after")
    def _check_bounds(self) -> "PulseSchedule":
        count = len(self.durations)
        if count == 0 or len(self.omegas) != count or len(self.deltas) != count:
            raise ValueError("durations, omegas and deltas must have the same non-zero length")
        if self.phases is not None and len(self.phases) != count:
            raise ValueError("phases must match the segment count")
        if any(d <= 0 for d in self.durations):
            raise ValueError("segment durations must be positive")
        if sum(self.durations) > self.budget * (1.0 + 1e-12):
            raise ValueError("total duration exceeds the time budget")
        tolerance = 1e-12
        if any(w < -tolerance * self.omega_max or w > self.omega_max * (1 + tolerance) for w in self.omegas):
            raise ValueError("segment Rabi frequency outside [0, omega_max]")
        if any(abs(d) > self.delta_max * (1 + tolerance) + tolerance for d in self.deltas):
            raise ValueError("segment detuning outside [-delta_max, delta_max]")
        return self

    @property
    def segment_count(self) -> int:
        return len(self.durations)

    @property
    def total_duration(self) -> float:
        return float(sum(self.durations))

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.asarray(self.durations), np.asarray(self.omegas), np.asarray(self.deltas)

    def with_values(self, durations=None, omegas=None, deltas=None) -> "PulseSchedule":
        update = {}
        if durations is not None:
            update["durations"] = tuple(float(v) for v in durations)
        if omegas is not None:
            update["omegas"] = tuple(float(v) for v in np.clip(omegas, 0.0, self.omega_max))
        if deltas is not None:
            update["deltas"] = tuple(float(v) for v in np.clip(deltas, -self.delta_max, self.delta_max))
        return PulseSchedule.model_validate({**self.model_dump(), **update})

    @classmethod
    def uniform(
        cls,
        segments: int,
        total: float,
        omega: float,
        delta: float = 0.0,
        omega_max: Optional[float] = None,
        delta_max: Optional[float] = None,
        budget: Optional[float] = None,
    ) -> "PulseSchedule":
        if segments < 1:
            raise InvalidParameterError("a schedule needs at least one segment")
        return cls(
            durations=(total / segments,) * segments,
            omegas=(omega,) * segments,
            deltas=(delta,) * segments,
            omega_max=omega_max if omega_max is not None else max(omega, constants.OPT_OMEGA_MAX),
            delta_max=delta_max if delta_max is not None else max(abs(delta), constants.OPT_DELTA_MAX),
            budget=budget if budget is not None else total,
        )


class OptimizationReport(FrozenModel):
    fidelity_trace: List[float]
    gradient_norms: List[float]
    schedule: PulseSchedule
    termination_reason: str
    iterations: int
    method: str

    @property
    def fidelity(self) -> float:
        return self.fidelity_trace[-1]


class MultiStartReport(FrozenModel):
    best: OptimizationReport
    fidelities: List[float]
    seeds: List[int]

    @property
    def dispersion(self) -> float:
        return float(np.std(self.fidelities))


# Run configuration (units in key names, converted to SI by ``RunConfig.resolve``)


class SectionModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class RunSection(SectionModel):
    scenario: str = "default"
    model: Literal["hydrogen", "rb"] = "hydrogen"
    seed: int = 0
    output_dir: Optional[str] = None
    workers: Optional[int] = Field(default=None, ge=1)
    atoms: int = Field(default=0, ge=0)


class PhysicsSection(SectionModel):
    n: int = Field(default=constants.TRANSFER_MANIFOLD, ge=2)
    F0_V_per_cm: float = Field(default=constants.RESONANT_FIELD / constants.V_PER_CM, ge=0.0)
    omega_rf_over_2pi_MHz: float = Field(default=constants.RF_FREQUENCY / constants.TWO_PI / constants.MHZ, gt=0.0)
    omega_rabi_over_2pi_MHz: float = Field(default=constants.RABI_FREQUENCY / constants.TWO_PI / constants.MHZ, ge=0.0)
    delta_over_2pi_MHz: Optional[float] = None
    defects_file: Optional[str] = None
    window: int = Field(default=constants.DEFAULT_WINDOW, ge=1)
    ladder_depth: int = Field(default=constants.DEFAULT_LADDER_DEPTH, ge=1)


class SweepSection(SectionModel):
    start: float = 0.0
    stop: float = constants.RABI_SCAN_DURATION / constants.US
    points: int = Field(default=constants.RABI_SCAN_POINTS, ge=1)
    fit: bool = False

    @model_validator(mode="after")
    def _ordered(self) -> "SweepSection":
        if self.points > 1 and self.stop <= self.start:
            raise ValueError("sweep stop must exceed start")
        return self

    def values(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.points)


class PulseSection(SectionModel):
    rise_us: float = Field(default=constants.PASSAGE_RF_RISE / constants.US, ge=0.0)
    fall_us: float = Field(default=constants.PASSAGE_RF_FALL / constants.US, ge=0.0)
    ramp_us: float = Field(default=constants.PASSAGE_FIELD_RAMP / constants.US, gt=0.0)
    shape: Literal["linear", "cosine"] = "linear"
    correction_ns: float = constants.PULSE_DURATION_CORRECTION / constants.NS
    F_start_V_per_cm: float = constants.PASSAGE_FIELD_START / constants.V_PER_CM
    F_end_V_per_cm: float = constants.PASSAGE_FIELD_END / constants.V_PER_CM


class PolarizationSection(SectionModel):
    noise: float = Field(default=constants.MEASUREMENT_NOISE, ge=0.0)
    passes: int = Field(default=constants.POLARIZATION_PASSES, ge=1)
    repeats: int = Field(default=constants.MEASUREMENT_REPEATS, ge=1)
    transfer_matrix_file: Optional[str] = None
    perturbed: bool = False
    amplitude_spread: float = Field(default=0.1, ge=0.0)
    phase_spread: float = Field(default=0.2, ge=0.0)
    omega_plus_over_2pi_MHz: float = Field(default=constants.SIGMA_PLUS_RABI / constants.TWO_PI / constants.MHZ, ge=0.0)
    omega_minus_over_2pi_kHz: float = Field(default=constants.SIGMA_MINUS_RABI / constants.TWO_PI / constants.KHZ, ge=0.0)


class OptimizerSection(SectionModel):
    segments: int = Field(default=constants.OPT_SEGMENTS, ge=1)
    budget_ns: float = Field(default=constants.OPT_BUDGET / constants.NS, gt=0.0)
    omega_max_over_2pi_MHz: float = Field(default=constants.OPT_OMEGA_MAX / constants.TWO_PI / constants.MHZ, gt=0.0)
    delta_max_over_2pi_MHz: float = Field(default=constants.OPT_DELTA_MAX / constants.TWO_PI / constants.MHZ, ge=0.0)
    method: Literal["gradient", "derivative-free"] = "gradient"
    starts: int = Field(default=constants.OPT_STARTS, ge=1)
    max_iterations: int = Field(default=constants.OPT_MAX_ITERATIONS, ge=1)
    variable_durations: bool = False
    schedule_file: Optional[str] = None


class RunConfig(SectionModel):
    run: RunSection = Field(default_factory=RunSection)
    physics: PhysicsSection = Field(default_factory=PhysicsSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    pulse: PulseSection = Field(default_factory=PulseSection)
    polarization: PolarizationSection = Field(default_factory=PolarizationSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)

    @model_validator(mode="after")
    def _files_exist(self) -> "RunConfig":
        for name in (self.physics.defects_file, self.polarization.transfer_matrix_file, self.optimizer.schedule_file):
            if name is not None and not Path(name).is_file():
                raise ValueError(f"referenced file does not exist: {name}")
        return self

    def resolve(self) -> "ResolvedRun":
        physics, pulse, opt, pol = self.physics, self.pulse, self.optimizer, self.polarization
        mhz = constants.TWO_PI * constants.MHZ
        return ResolvedRun(
            model=self.run.model,
            seed=self.run.seed,
            n=physics.n,
            field=physics.F0_V_per_cm * constants.V_PER_CM,
            omega_rf=physics.omega_rf_over_2pi_MHz * mhz,
            omega_rabi=physics.omega_rabi_over_2pi_MHz * mhz,
            delta=None if physics.delta_over_2pi_MHz is None else physics.delta_over_2pi_MHz * mhz,
            window=physics.window,
            ladder_depth=physics.ladder_depth,
            rise=pulse.rise_us * constants.US,
            fall=pulse.fall_us * constants.US,
            ramp=pulse.ramp_us * constants.US,
            shape=pulse.shape,
            correction=pulse.correction_ns * constants.NS,
            f_start=pulse.F_start_V_per_cm * constants.V_PER_CM,
            f_end=pulse.F_end_V_per_cm * constants.V_PER_CM,
            omega_plus=pol.omega_plus_over_2pi_MHz * mhz,
            omega_minus=pol.omega_minus_over_2pi_kHz * constants.TWO_PI * constants.KHZ,
            budget=opt.budget_ns * constants.NS,
            omega_max=opt.omega_max_over_2pi_MHz * mhz,
            delta_max=opt.delta_max_over_2pi_MHz * mhz,
        )


class ResolvedRun(FrozenModel):
    """SI view of a RunConfig (rad/s, s, V/m)."""

    model: Literal["hydrogen", "rb"]
    seed: int
    n: int
    field: float
    omega_rf: float
    omega_rabi: float
    delta: Optional[float]
    window: int
    ladder_depth: int
    rise: float
    fall: float
    ramp: float
    shape: Literal["linear", "cosine"]
    correction: float
    f_start: float
    f_end: float
    omega_plus: float
    omega_minus: float
    budget: float
    omega_max: float
    delta_max: float
