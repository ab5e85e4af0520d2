"""
Stark manifolds of hydrogen and rubidium.

Hydrogen uses the exact two-pseudospin form of the linear Stark effect:
J1 and J2 of size j = (n - 1)/2 with m = m1 + m2 and n1 - n2 = m1 - m2. The
in-manifold position operator is z = (3/2) n a0 (J1z - J2z) and
x + iy = (3/2) n a0 (J1+ - J2+).

Rubidium uses a spherical |n l m> basis over a window of manifolds with
quantum-defect energies. Each m block is diagonalized on its own (F z
conserves m); the eigenstates carry the named-level labels.

Hamiltonians are angular frequencies (H / hbar, rad/s). Basis order:
parabolic states by m ascending then n1 ascending; spherical states by m
ascending, then n, then l; ladder states by mJ ascending.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np

import constants
from models.errors import InvalidParameterError
from models.schemas import (
    CODATA,
    DefectTable,
    DriveConfig,
    FieldRamp,
    NamedLevel,
    ParabolicState,
    PhysicalConstants,
    SphericalState,
    SpinLadderState,
)
from services.radial import RadialIntegrals, hydrogen_radial_element
from utils import hermiticity_error, read_key_value_table

logger = logging.getLogger(__name__)

Representation = Literal["parabolic", "spherical", "ladder"]
MSector = Literal["all", "nonnegative", "ladder"]
Frame = Literal["lab", "rotating"]
SigmaMinusPolicy = Literal["time_dependent", "reject"]


# Basis enumeration and relabelling


def _check_n(n: int) -> None:
    if n < 2:
        raise InvalidParameterError(f"manifold needs n >= 2, got {n}")


def manifold_basis(n: int, representation: Representation = "parabolic", m_sector: MSector = "all") -> list:
    """Ordered basis of the n manifold.

    Args:
        n: Principal quantum number (>= 2)
        representation: parabolic, spherical or ladder
        m_sector: "all" or "nonnegative" (ignored for the ladder)

    Returns:
        List of ParabolicState, SphericalState or SpinLadderState
    """
    _check_n(n)
    if representation == "ladder":
        j = 0.5 * (n - 1)
        return [SpinLadderState(J=j, mJ=k - j) for k in range(n)]
    m_values = range(0 if m_sector == "nonnegative" else -(n - 1), n)
    if representation == "parabolic":
        return [ParabolicState.of(n, n1, m) for m in m_values for n1 in range(n - abs(m))]
    if representation == "spherical":
        return [SphericalState(n=n, l=l, m=m) for m in m_values for l in range(abs(m), n)]
    raise InvalidParameterError(f"unknown representation {representation!r}")


def parabolic_to_pseudospin(state: ParabolicState) -> Tuple[float, float]:
    """(m1, m2) with m = m1 + m2 and n1 - n2 = m1 - m2."""
    return 0.5 * (state.m + state.n1 - state.n2), 0.5 * (state.m - state.n1 + state.n2)


def pseudospin_to_parabolic(n: int, m1: float, m2: float) -> ParabolicState:
    j = 0.5 * (n - 1)
    if abs(m1) > j + 1e-12 or abs(m2) > j + 1e-12:
        raise InvalidParameterError(f"pseudospin projections ({m1}, {m2}) exceed j={j}")
    m = int(round(m1 + m2))
    k = int(round(m1 - m2))
    n1 = (n - 1 - abs(m) + k) // 2
    return ParabolicState.of(n, n1, m)


def pseudospin_labels(n: int, m_sector: MSector = "all") -> List[Tuple[float, float]]:
    """(m1, m2) pairs in parabolic basis order."""
    if m_sector == "ladder":
        j = 0.5 * (n - 1)
        return [(k - j, j) for k in range(n)]
    return [parabolic_to_pseudospin(s) for s in manifold_basis(n, "parabolic", m_sector)]


def named_level(label: str, n: int) -> NamedLevel:
    """Resolve a named level to its parabolic state |n, n1, m>."""
    if label == "south":
        n1, m = 0, 0
    elif label == "i":
        n1, m = 1, 2
    elif label == "i'":
        n1, m = 3, 1
    elif label in constants.LOW_LADDER_LEVELS:
        n1, m = 0, constants.LOW_LADDER_LEVELS[label]
    elif label in constants.TOP_LADDER_LEVELS:
        n1, m = 0, n - 1 - constants.TOP_LADDER_LEVELS[label]
    else:
        raise InvalidParameterError(f"unknown level label {label!r}")
    if m < 0 or n1 > n - 1 - m:
        raise InvalidParameterError(f"level {label!r} does not exist for n={n}")
    return NamedLevel(label=label, n=n, state=ParabolicState.of(n, n1, m))


def available_levels(n: int) -> List[NamedLevel]:
    levels = []
    for label in ("south",) + constants.NAMED_LEVEL_ORDER:
        try:
            levels.append(named_level(label, n))
        except InvalidParameterError:
            continue
    return levels


# Hydrogen first-order Stark structure


def stark_frequency(n: int, field: float, physics: PhysicalConstants = CODATA) -> float:
    """omega_n = (3/2) n F e a0 / hbar in rad/s."""
    if field < 0:
        raise InvalidParameterError(f"static field must be >= 0, got {field}")
    return 1.5 * n * field * physics.e * physics.a0 / physics.hbar


def field_for_frequency(n: int, omega: float, physics: PhysicalConstants = CODATA) -> float:
    """Static field (V/m) for which omega_n equals ``omega``."""
    if omega < 0:
        raise InvalidParameterError("frequency must be >= 0")
    return omega * physics.hbar / (1.5 * n * physics.e * physics.a0)


def first_order_energy(state: ParabolicState, field: float, physics: PhysicalConstants = CODATA) -> float:
    """(3/2) n (n1 - n2) F e a0 in J, relative to the manifold centre."""
    return 1.5 * state.n * state.k * field * physics.e * physics.a0


def ladder_coupling(n: int, mJ: float) -> float:
    """<mJ + 1 | J+ | mJ> for J = (n - 1)/2."""
    j = 0.5 * (n - 1)
    if not -j - 1e-12 <= mJ < j - 1e-12:
        raise InvalidParameterError(f"mJ={mJ} has no raised state for J={j}")
    return math.sqrt(j * (j + 1.0) - mJ * (mJ + 1.0))


def spin_operators(j: float) -> Tuple[np.ndarray, np.ndarray]:
    """(Jz, J+) for spin j in the |j, m> basis ordered by m ascending."""
    m = np.arange(-j, j + 0.5, 1.0)
    jz = np.diag(m)
    jp = np.diag(np.sqrt(j * (j + 1.0) - m[:-1] * (m[:-1] + 1.0)), k=-1)
    return jz, jp


# Hamiltonian generators


@dataclass(frozen=True)
class FieldTerm:
    """Hermitian operator times a real coefficient f(t)."""

    operator: np.ndarray
    coefficient: Callable[[float], float]


@dataclass(frozen=True)
class DriveTerm:
    """c(t) A + conj(c(t)) A^dagger for a (non-Hermitian) operator A."""

    operator: np.ndarray
    coefficient: Callable[[float], complex]


@dataclass(frozen=True)
class Hamiltonian:
    """Time-dependent generator H(t) / hbar in rad/s."""

    static: np.ndarray
    field_terms: Tuple[FieldTerm, ...] = ()
    drive_terms: Tuple[DriveTerm, ...] = ()
    labels: Tuple[str, ...] = ()
    named: Dict[str, int] = field(default_factory=dict)
    rate_bound: float = 0.0

    @property
    def dim(self) -> int:
        return self.static.shape[0]

    @property
    def is_static(self) -> bool:
        return not self.field_terms and not self.drive_terms

    def __call__(self, t: float) -> np.ndarray:
        h = np.array(self.static, dtype=complex)
        for term in self.field_terms:
            h += term.coefficient(t) * term.operator
        for term in self.drive_terms:
            c = term.coefficient(t)
            if c != 0:
                a = c * term.operator
                h += a + a.conj().T
        return h

    def hermiticity_error(self, times: Iterable[float]) -> float:
        return max(hermiticity_error(self(t)) for t in times)

    def time_reversed(self, total: float) -> "Hamiltonian":
        """Generator of U(total, 0)^dagger: H_rev(s) = -H(total - s)."""
        fields = tuple(
            FieldTerm(-term.operator, lambda s, f=term.coefficient: f(total - s)) for term in self.field_terms
        )
        drives = tuple(
            DriveTerm(-term.operator, lambda s, f=term.coefficient: f(total - s)) for term in self.drive_terms
        )
        return Hamiltonian(-self.static, fields, drives, self.labels, dict(self.named), self.rate_bound)


def _index_map(labels: Sequence[Tuple[float, float]]) -> Dict[Tuple[int, int], int]:
    return {(int(round(2 * m1)), int(round(2 * m2))): k for k, (m1, m2) in enumerate(labels)}


def pseudospin_operators(n: int, m_sector: MSector = "all") -> Dict[str, np.ndarray]:
    """J1z, J2z, J1+, J2+ restricted to a sector of the n manifold."""
    _check_n(n)
    j = 0.5 * (n - 1)
    labels = pseudospin_labels(n, m_sector)
    index = _index_map(labels)
    dim = len(labels)
    ops = {name: np.zeros((dim, dim)) for name in ("J1z", "J2z", "J1+", "J2+")}
    for k, (m1, m2) in enumerate(labels):
        ops["J1z"][k, k] = m1
        ops["J2z"][k, k] = m2
        if m1 < j - 1e-12:
            target = index.get((int(round(2 * (m1 + 1))), int(round(2 * m2))))
            if target is not None:
                ops["J1+"][target, k] = math.sqrt(j * (j + 1) - m1 * (m1 + 1))
        if m2 < j - 1e-12:
            target = index.get((int(round(2 * m1)), int(round(2 * (m2 + 1)))))
            if target is not None:
                ops["J2+"][target, k] = math.sqrt(j * (j + 1) - m2 * (m2 + 1))
    return ops


def _hydrogen_named(n: int, m_sector: MSector) -> Dict[str, int]:
    index = _index_map(pseudospin_labels(n, m_sector))
    named = {}
    for level in available_levels(n):
        m1, m2 = parabolic_to_pseudospin(level.state)
        k = index.get((int(round(2 * m1)), int(round(2 * m2))))
        if k is not None:
            named[level.label] = k
    return named


def _envelope_factor(drive: DriveConfig) -> Optional[Callable[[float], float]]:
    if drive.envelope.is_square:
        return None
    return drive.envelope.amplitude


def build_hydrogen_hamiltonian(
    n: int,
    field: float,
    drive: DriveConfig,
    frame: Frame = "rotating",
    co_rotating: bool = True,
    sigma_minus_policy: SigmaMinusPolicy = "time_dependent",
    m_sector: MSector = "all",
    field_ramp: Optional[FieldRamp] = None,
    physics: PhysicalConstants = CODATA,
) -> Hamiltonian:
    """Hydrogen n manifold under a static field and an rf drive.

    Square envelopes are treated as an always-on drive (the pulse length is
    set by the propagation grid); shaped envelopes multiply the drive.

    Args:
        n: Principal quantum number
        field: Static field in V/m (ignored when ``field_ramp`` is given)
        drive: rf frequency, sigma+/sigma- amplitudes (V/m) and envelope
        frame: "lab" or "rotating" (rotating at omega_rf about z)
        co_rotating: Keep only J1 for sigma+ and J2 for sigma- in the rotating frame
        sigma_minus_policy: In the rotating frame, keep sigma- time-dependent at 2 omega_rf or reject it
        m_sector: "all", "nonnegative" or "ladder" (n1 = 0 states only)
        field_ramp: Optional piecewise-linear F0(t)
        physics: Physical constants

    Returns:
        Hamiltonian generator in rad/s
    """
    _check_n(n)
    if field < 0:
        raise InvalidParameterError(f"static field must be >= 0, got {field}")
    omega = drive.omega_rf
    if frame == "rotating" and omega <= 0:
        raise InvalidParameterError("rotating frame requires omega_rf > 0")
    if m_sector == "ladder" and (drive.e_minus != 0 or (frame == "lab" or not co_rotating) and drive.e_plus != 0):
        raise InvalidParameterError("the ladder sector is closed only for co-rotating sigma+ driving")
    if frame == "rotating" and drive.e_minus != 0 and sigma_minus_policy == "reject":
        raise InvalidParameterError("sigma- amplitude rejected in the rotating frame by configuration")

    j = 0.5 * (n - 1)
    ops = pseudospin_operators(n, m_sector)
    dim = ops["J1z"].shape[0]
    stark_op = ops["J1z"] - ops["J2z"]
    lz = ops["J1z"] + ops["J2z"]
    g_unit = 1.5 * n * physics.e * physics.a0 / physics.hbar  # rad/s per V/m

    identity = np.eye(dim)
    # rotating frame: a global phase (omega_n + omega) j brings the n1 = 0 ladder to delta * J1z
    shift = j * identity if frame == "rotating" else 0.0 * identity
    static = np.zeros((dim, dim), dtype=complex)
    field_terms: List[FieldTerm] = []
    if field_ramp is None:
        static += g_unit * field * (stark_op + shift)
        fields = [field]
    else:
        field_terms.append(FieldTerm(stark_op + shift, lambda t, r=field_ramp: g_unit * r.field(t)))
        fields = [field_ramp.f_start, field_ramp.f_end]
    if frame == "rotating":
        static += -omega * (lz - shift)

    envelope = _envelope_factor(drive)

    def shaped(amplitude: complex, carrier: Callable[[float], complex]) -> Callable[[float], complex]:
        if envelope is None:
            return lambda t: amplitude * carrier(t)
        return lambda t: amplitude * envelope(t) * carrier(t)

    drive_terms: List[DriveTerm] = []
    half_plus = 0.5 * g_unit * drive.e_plus
    half_minus = 0.5 * g_unit * drive.e_minus
    j1m, j2m = ops["J1+"].T, ops["J2+"].T
    if frame == "lab":
        carrier = lambda t: np.exp(-1j * omega * t)  # noqa: E731
        if drive.e_plus != 0:
            drive_terms.append(DriveTerm(ops["J1+"] - ops["J2+"], shaped(half_plus, carrier)))
        if drive.e_minus != 0:
            drive_terms.append(DriveTerm(j1m - j2m, shaped(half_minus, carrier)))
    else:
        plus_op = ops["J1+"] if co_rotating else ops["J1+"] - ops["J2+"]
        if drive.e_plus != 0:
            if envelope is None:
                a = half_plus * plus_op
                static += a + a.conj().T
            else:
                drive_terms.append(DriveTerm(plus_op, shaped(half_plus, lambda t: 1.0)))
        if drive.e_minus != 0:
            minus_op = -j2m if co_rotating else j1m - j2m
            drive_terms.append(DriveTerm(minus_op, shaped(half_minus, lambda t: np.exp(-2j * omega * t))))

    detunings = [abs(g_unit * f - omega) for f in fields]
    rate = max([abs(2 * half_plus), abs(2 * half_minus)] + detunings)
    if frame == "lab" or drive.e_minus != 0:
        rate = max(rate, 2.0 * omega + g_unit * max(fields))
    labels = tuple(f"({m1:+g},{m2:+g})" for m1, m2 in pseudospin_labels(n, m_sector))
    logger.debug("Built hydrogen n=%d %s-frame Hamiltonian, dim=%d", n, frame, dim)
    return Hamiltonian(
        static=static,
        field_terms=tuple(field_terms),
        drive_terms=tuple(drive_terms),
        labels=labels,
        named=_hydrogen_named(n, m_sector),
        rate_bound=rate if rate > 0 else constants.TWO_PI * constants.MHZ,
    )


# Spherical-basis dipole operators


def _cos_factor(l: int, m: int) -> float:  # noqa: E741
    """<l+1, m | cos(theta) | l, m>."""
    return math.sqrt(((l + 1) ** 2 - m * m) / ((2 * l + 1) * (2 * l + 3)))


def _raise_factor(l: int, m: int, l_out: int) -> float:  # noqa: E741
    """<l_out, m+1 | sin(theta) e^{i phi} | l, m> (Condon-Shortley)."""
    if l_out == l + 1:
        return -math.sqrt((l + m + 1) * (l + m + 2) / ((2 * l + 1) * (2 * l + 3)))
    if l_out == l - 1 and l > 0:
        return math.sqrt((l - m) * (l - m - 1) / ((2 * l - 1) * (2 * l + 1)))
    return 0.0


def spherical_dipole_operators(
    basis: Sequence[SphericalState],
    radial: Callable[[SphericalState, SphericalState], float],
) -> Tuple[np.ndarray, np.ndarray]:
    """(z, x + iy) in units of a0 over a spherical basis.

    Args:
        basis: States |n l m>
        radial: <a| r |b> for |l_a - l_b| = 1

    Returns:
        Real matrices Z and R with R[a, b] = <a| x + iy |b>
    """
    index = {(s.n, s.l, s.m): k for k, s in enumerate(basis)}
    dim = len(basis)
    z = np.zeros((dim, dim))
    r = np.zeros((dim, dim))
    ns = sorted({s.n for s in basis})
    for b, s in enumerate(basis):
        for n_out in ns:
            for l_out in (s.l - 1, s.l + 1):
                if l_out < 0:
                    continue
                a = index.get((n_out, l_out, s.m))
                if a is not None and a > b:
                    low = min(s.l, l_out)
                    value = radial(basis[a], s) * _cos_factor(low, s.m)
                    z[a, b] = z[b, a] = value
                a = index.get((n_out, l_out, s.m + 1))
                if a is not None:
                    r[a, b] = radial(basis[a], s) * _raise_factor(s.l, s.m, l_out)
    return z, r


def hydrogen_radial(a: SphericalState, b: SphericalState) -> float:
    """Within-manifold hydrogen radial element."""
    if a.n != b.n:
        raise InvalidParameterError("hydrogen_radial only covers one manifold")
    return hydrogen_radial_element(a.n, max(a.l, b.l))


# Rubidium Stark map


def load_defect_table(path: Path, l_hydrogenic: Optional[int] = None) -> DefectTable:
    """Read ``l = delta_l`` lines (plus an optional ``l_hydrogenic = ...`` line)."""
    table = read_key_value_table(path)
    threshold = table.pop("l_hydrogenic", None)
    try:
        defects = {int(k): float(v) for k, v in table.items()}
        if l_hydrogenic is None:
            l_hydrogenic = int(threshold) if threshold is not None else max(defects, default=-1) + 1
    except ValueError as e:
        raise InvalidParameterError(f"malformed defect table {path}: {e}") from e
    return DefectTable(defects=defects, l_hydrogenic=l_hydrogenic)


def window_manifolds(n_center: int, window: int) -> List[int]:
    if window < 1:
        raise InvalidParameterError(f"basis window must be >= 1, got {window}")
    low = n_center - (window - 1) // 2
    return [n for n in range(low, low + window) if n >= 1]


@dataclass(frozen=True)
class StarkBlock:
    """Static Stark eigenstates at fixed m."""

    m: int
    basis: Tuple[SphericalState, ...]
    energies: np.ndarray  # rad/s, relative to the hydrogen centre of n_center
    vectors: np.ndarray  # columns in the spherical basis
    manifold: np.ndarray  # assigned n per eigenstate
    rank: np.ndarray  # n1 label within n_center, -1 elsewhere
    in_band: np.ndarray
    z: np.ndarray  # spherical-basis z in a0


@dataclass(frozen=True)
class StarkMap:
    n_center: int
    field: float
    window: int
    defects: DefectTable
    blocks: Dict[int, StarkBlock]
    raising: Dict[int, np.ndarray]  # (x + iy) in a0, block m -> block m + 1, spherical bases
    atomic: Dict[int, np.ndarray]  # diagonal zero-field energies per block, rad/s
    warnings: Tuple[str, ...] = ()

    def level(self, label: str) -> Tuple[int, int]:
        """(m, column) of a named level."""
        target = named_level(label, self.n_center).state
        block = self.blocks.get(target.m)
        if block is None:
            raise InvalidParameterError(f"m={target.m} block not computed for level {label!r}")
        hits = np.flatnonzero(block.rank == target.n1)
        if hits.size == 0:
            raise InvalidParameterError(f"level {label!r} not found in the Stark map")
        return target.m, int(hits[0])

    def energy(self, label: str) -> float:
        m, col = self.level(label)
        return float(self.blocks[m].energies[col])

    def metadata(self) -> Dict[str, object]:
        return {
            "n_center": self.n_center,
            "field_V_per_m": self.field,
            "window": self.window,
            "m_blocks": sorted(self.blocks),
            "warnings": list(self.warnings),
        }


def _hydrogen_center(n: int, physics: PhysicalConstants) -> float:
    return -physics.rydberg_energy / (n * n) / physics.hbar


def rb_stark_map(
    n_center: int,
    field: float,
    defects: DefectTable,
    window: int = constants.DEFAULT_WINDOW,
    m_values: Optional[Iterable[int]] = None,
    physics: PhysicalConstants = CODATA,
    radial: Optional[RadialIntegrals] = None,
) -> StarkMap:
    """Diagonalize the windowed spherical basis block by block.

    Args:
        n_center: Manifold carrying the named levels
        field: Static field in V/m
        defects: Quantum defects
        window: Number of manifolds, centred on ``n_center``
        m_values: m blocks to compute (default 0 .. n_max - 1)
        physics: Physical constants
        radial: Precomputed radial integrals for the same window

    Returns:
        StarkMap with eigenstates, manifold assignment and n1 ranks
    """
    _check_n(n_center)
    if field < 0:
        raise InvalidParameterError(f"static field must be >= 0, got {field}")
    manifolds = window_manifolds(n_center, window)
    n_max = max(manifolds)
    m_list = sorted(set(m_values)) if m_values is not None else list(range(0, n_max))
    if radial is None:
        states = tuple((n, l, defects.effective_n(n, l)) for n in manifolds for l in range(n))
        radial = RadialIntegrals(states)
    cache: Dict[Tuple[int, int, int, int], float] = {}

    def radial_element(a: SphericalState, b: SphericalState) -> float:
        key = (a.n, a.l, b.n, b.l) if (a.n, a.l) <= (b.n, b.l) else (b.n, b.l, a.n, a.l)
        if key not in cache:
            cache[key] = radial.element(
                (a.n, a.l, defects.effective_n(a.n, a.l)), (b.n, b.l, defects.effective_n(b.n, b.l))
            )
        return cache[key]

    to_rad = physics.hartree / physics.hbar
    centre = _hydrogen_center(n_center, physics)
    field_au = field / physics.atomic_field
    omega_n = stark_frequency(n_center, field, physics)

    def block_basis(m: int) -> List[SphericalState]:
        return [SphericalState(n=n, l=l, m=m) for n in manifolds for l in range(abs(m), n)]

    blocks: Dict[int, StarkBlock] = {}
    raising: Dict[int, np.ndarray] = {}
    atomic: Dict[int, np.ndarray] = {}
    for m in m_list:
        basis = block_basis(m)
        if not basis:
            continue
        z, _ = spherical_dipole_operators(basis, radial_element)
        e0 = np.array([-0.5 / defects.effective_n(s.n, s.l) ** 2 * to_rad - centre for s in basis])
        h = np.diag(e0) + field_au * to_rad * z
        energies, vectors = np.linalg.eigh(h)
        weights = np.zeros((len(manifolds), len(basis)))
        for row, s in enumerate(basis):
            weights[manifolds.index(s.n)] += np.abs(vectors[row]) ** 2
        manifold = np.asarray(manifolds)[np.argmax(weights, axis=0)]
        rank = np.full(len(basis), -1)
        own = np.flatnonzero(manifold == n_center)
        rank[own[np.argsort(energies[own], kind="stable")]] = np.arange(own.size)
        edge = (n_center - 1 - abs(m) + constants.BAND_MARGIN) * omega_n + constants.BAND_MARGIN * constants.TWO_PI * constants.MHZ
        in_band = (manifold == n_center) & (np.abs(energies) <= edge)
        blocks[m] = StarkBlock(m, tuple(basis), energies, vectors, manifold, rank, in_band, z)
        atomic[m] = e0
    for m in blocks:
        if m + 1 in blocks:
            lower, upper = blocks[m].basis, blocks[m + 1].basis
            combined = list(upper) + list(lower)
            _, r = spherical_dipole_operators(combined, radial_element)
            raising[m] = r[: len(upper), len(upper):]
    logger.info(
        "Stark map n=%d F=%.4g V/m window=%d: %d m blocks", n_center, field, window, len(blocks)
    )
    return StarkMap(n_center, field, window, defects, blocks, raising, atomic)


def check_window_convergence(
    n_center: int,
    field: float,
    defects: DefectTable,
    window: int,
    labels: Sequence[str] = ("i", "j", "c"),
    tolerance: float = constants.WINDOW_CONVERGENCE_TOLERANCE,
    physics: PhysicalConstants = CODATA,
) -> Tuple[float, List[str]]:
    """Shift of named-level energies when the window grows by two manifolds."""
    m_values = {named_level(label, n_center).state.m for label in labels}
    small = rb_stark_map(n_center, field, defects, window, m_values, physics)
    large = rb_stark_map(n_center, field, defects, window + 2, m_values, physics)
    shift = max(abs(small.energy(label) - large.energy(label)) for label in labels)
    warnings = []
    if shift > tolerance:
        message = (
            f"basis window {window} not converged: named levels move by "
            f"{shift / constants.TWO_PI / constants.MHZ:.3f} MHz with window {window + 2}"
        )
        logger.warning(message)
        warnings.append(message)
    return shift, warnings


def transition_frequency(starkmap: StarkMap, a: str, b: str) -> float:
    """(E_b - E_a) / hbar in rad/s."""
    return starkmap.energy(b) - starkmap.energy(a)


def ladder_resonance_field(
    n_center: int,
    omega: float,
    defects: DefectTable,
    window: int = constants.DEFAULT_WINDOW,
    path: Tuple[str, str] = ("i", "c"),
    tolerance: float = constants.RESONANCE_TOLERANCE,
    max_iterations: int = constants.RESONANCE_MAX_ITERATIONS,
    physics: PhysicalConstants = CODATA,
) -> float:
    """Static field at which the mean Rb step spacing along ``path`` equals omega.

    Starts from the linear hydrogen field and rescales F by omega / spacing
    until the diagonalized spacing is within ``tolerance``. In Rb the m = 2
    level i sits on the n1 = 0 ladder; in hydrogen use a path starting at j.

    Raises:
        InvalidParameterError: for a path without a positive m step or a
            non-positive spacing
    """
    if omega <= 0:
        raise InvalidParameterError(f"resonance needs omega > 0, got {omega}")
    lower, upper = (named_level(label, n_center).state for label in path)
    steps = upper.m - lower.m
    if steps <= 0:
        raise InvalidParameterError(f"path {path} must raise m")
    manifolds = window_manifolds(n_center, window)
    radial = RadialIntegrals(tuple((n, l, defects.effective_n(n, l)) for n in manifolds for l in range(n)))
    field = field_for_frequency(n_center, omega, physics)
    spacing = 0.0
    for iteration in range(max_iterations):
        starkmap = rb_stark_map(n_center, field, defects, window, (lower.m, upper.m), physics, radial)
        spacing = transition_frequency(starkmap, *path) / steps
        if spacing <= 0:
            raise InvalidParameterError(f"non-positive ladder spacing at F={field:.4g} V/m")
        logger.debug(
            "resonance iteration %d: F=%.6g V/m, spacing %.6f MHz",
            iteration, field, spacing / constants.TWO_PI / constants.MHZ,
        )
        if abs(spacing - omega) <= tolerance:
            return field
        field *= omega / spacing
    logger.warning(
        "ladder resonance not converged after %d iterations (spacing off by %.3f kHz)",
        max_iterations, (spacing - omega) / constants.TWO_PI / constants.KHZ,
    )
    return field


def transition_dipole(starkmap: StarkMap, a: str, b: str, physics: PhysicalConstants = CODATA) -> float:
    """|<b| d_q |a>| in C m for the spherical component q = m_b - m_a.

    For |q| = 1 this is e a0 |<upper| (x + iy) |lower>| / sqrt(2).
    """
    m_a, col_a = starkmap.level(a)
    m_b, col_b = starkmap.level(b)
    if abs(m_b - m_a) != 1:
        raise InvalidParameterError("only Delta m = +-1 dipoles are supported")
    (m_low, col_low), (m_high, col_high) = sorted([(m_a, col_a), (m_b, col_b)])
    if m_low not in starkmap.raising:
        raise InvalidParameterError(f"no raising block from m={m_low}")
    low = starkmap.blocks[m_low].vectors[:, col_low]
    high = starkmap.blocks[m_high].vectors[:, col_high]
    element = high.conj() @ starkmap.raising[m_low] @ low
    return float(physics.e * physics.a0 * abs(element) / math.sqrt(2.0))


def stark_map_table(
    n: int,
    fields: Sequence[float],
    model: Literal["hydrogen", "rb"] = "hydrogen",
    defects: Optional[DefectTable] = None,
    window: int = constants.DEFAULT_WINDOW,
    labels: Sequence[str] = constants.NAMED_LEVEL_ORDER,
    physics: PhysicalConstants = CODATA,
) -> Dict[str, np.ndarray]:
    """Named-level energy offsets (rad/s) versus static field.

    Hydrogen offsets are first order; the Rb offsets come from the windowed
    diagonalization and are relative to the hydrogenic manifold centre.
    """
    present = [level.label for level in available_levels(n) if level.label in labels]
    table = {"field": np.asarray(fields, dtype=float)}
    for label in present:
        table[label] = np.zeros(len(fields))
    for k, f in enumerate(fields):
        if model == "hydrogen":
            for label in present:
                table[label][k] = first_order_energy(named_level(label, n).state, f, physics) / physics.hbar
        else:
            m_values = {named_level(label, n).state.m for label in present}
            smap = rb_stark_map(n, f, defects or DefectTable.rubidium(), window, m_values, physics)
            for label in present:
                table[label][k] = smap.energy(label)
    return table


# Rubidium dynamics subspace


@dataclass(frozen=True)
class RbModel:
    hamiltonian: Hamiltonian
    starkmap: StarkMap
    levels: Tuple[Tuple[int, int], ...]  # (m, column) per subspace index
    coupling: np.ndarray  # (x + iy) on the subspace, a0
    stark: np.ndarray  # A in rad/s
    field_operator: np.ndarray  # Z in rad/s per V/m
    reference_field: float


def select_subspace(
    starkmap: StarkMap, m_min: int, ladder_depth: int
) -> Tuple[List[Tuple[int, int]], Dict[str, int]]:
    """Lowest in-band manifold states per m, plus index of every named level kept."""
    levels: List[Tuple[int, int]] = []
    for m in sorted(starkmap.blocks):
        if m < m_min:
            continue
        block = starkmap.blocks[m]
        candidates = np.flatnonzero(block.in_band)
        candidates = candidates[np.argsort(block.energies[candidates], kind="stable")]
        levels.extend((m, int(c)) for c in candidates[:ladder_depth])
    named = {}
    position = {lv: k for k, lv in enumerate(levels)}
    for level in available_levels(starkmap.n_center):
        if level.label == "south":
            continue
        try:
            key = starkmap.level(level.label)
        except InvalidParameterError:
            continue
        if key in position:
            named[level.label] = position[key]
    return levels, named


def build_rb_hamiltonian(
    n_center: int,
    field: float,
    defects: DefectTable,
    window: int = constants.DEFAULT_WINDOW,
    drive: Optional[DriveConfig] = None,
    ladder_depth: int = constants.DEFAULT_LADDER_DEPTH,
    m_min: int = 2,
    field_ramp: Optional[FieldRamp] = None,
    starkmap: Optional[StarkMap] = None,
    check_convergence: bool = False,
    physics: PhysicalConstants = CODATA,
) -> RbModel:
    """Rotating-frame Rb Hamiltonian on the Stark-eigenstate subspace.

    The static part is A + F(t) Z, projected on the eigenstates of the map
    computed at ``field``; the sigma+ drive couples them through x + iy and
    sigma- (if any) rotates at 2 omega_rf.

    Args:
        n_center: Manifold of the transfer
        field: Static field (V/m); reference for the eigenbasis
        defects: Quantum defects
        window: Manifold window of the spherical basis
        drive: rf drive; defaults to no drive at the default frequency
        ladder_depth: In-band states kept per m
        m_min: Lowest m kept (2 starts from i)
        field_ramp: Optional F0(t)
        starkmap: Reuse a map computed at ``field``
        check_convergence: Compare named energies against a larger window

    Returns:
        RbModel with the Hamiltonian and the subspace description
    """
    drive = drive or DriveConfig()
    if drive.omega_rf <= 0:
        raise InvalidParameterError("rotating frame requires omega_rf > 0")
    if ladder_depth < 1:
        raise InvalidParameterError("ladder_depth must be >= 1")
    m_lo = max(0, m_min - 1) if drive.e_minus != 0 else m_min
    if starkmap is None:
        starkmap = rb_stark_map(n_center, field, defects, window, range(m_lo, n_center + window), physics)
    warnings = list(starkmap.warnings)
    if check_convergence:
        _, extra = check_window_convergence(n_center, field, defects, window, physics=physics)
        warnings.extend(extra)
        starkmap = replace(starkmap, warnings=tuple(warnings))

    levels, named = select_subspace(starkmap, m_min, ladder_depth)
    dim = len(levels)
    to_rad = physics.hartree / physics.hbar
    per_field = to_rad / physics.atomic_field  # rad/s per (V/m) per a0

    stark = np.zeros((dim, dim))
    zop = np.zeros((dim, dim))
    coupling = np.zeros((dim, dim))
    ms = np.array([m for m, _ in levels], dtype=float)
    by_m: Dict[int, List[int]] = {}
    for k, (m, _) in enumerate(levels):
        by_m.setdefault(m, []).append(k)
    for m, rows in by_m.items():
        block = starkmap.blocks[m]
        cols = [levels[k][1] for k in rows]
        v = block.vectors[:, cols]
        a = v.T @ np.diag(starkmap.atomic[m]) @ v
        z = v.T @ block.z @ v
        stark[np.ix_(rows, rows)] = a
        zop[np.ix_(rows, rows)] = z * per_field
        upper = by_m.get(m + 1)
        if upper is not None and m in starkmap.raising:
            vu = starkmap.blocks[m + 1].vectors[:, [levels[k][1] for k in upper]]
            coupling[np.ix_(upper, rows)] = vu.T @ starkmap.raising[m] @ v

    omega = drive.omega_rf
    static = stark.astype(complex) - omega * np.diag(ms)
    field_terms: Tuple[FieldTerm, ...] = ()
    if field_ramp is None:
        static += field * zop
        offset_field = field
    else:
        field_terms = (FieldTerm(zop, field_ramp.field),)
        offset_field = field_ramp.f_start
    offset = float(np.mean(np.diag(stark + offset_field * zop) - omega * ms))
    static -= offset * np.eye(dim)

    envelope = _envelope_factor(drive)
    half = physics.e * physics.a0 / (2.0 * physics.hbar)
    drive_terms: List[DriveTerm] = []
    if drive.e_plus != 0:
        amplitude = half * drive.e_plus
        if envelope is None:
            a = amplitude * coupling
            static += a + a.conj().T
        else:
            drive_terms.append(DriveTerm(coupling, lambda t: amplitude * envelope(t)))
    if drive.e_minus != 0:
        amplitude_minus = half * drive.e_minus
        carrier = (lambda t: amplitude_minus * np.exp(-2j * omega * t)) if envelope is None else (
            lambda t: amplitude_minus * envelope(t) * np.exp(-2j * omega * t)
        )
        drive_terms.append(DriveTerm(coupling.T, carrier))

    fields = [field] if field_ramp is None else [field_ramp.f_start, field_ramp.f_end]
    omega_plus = 1.5 * n_center * 2.0 * half * abs(drive.e_plus)
    detunings = [abs(stark_frequency(n_center, f, physics) - omega) for f in fields]
    rate = max([omega_plus] + detunings)
    if drive.e_minus != 0:
        rate = max(rate, 2.0 * omega)
    labels = tuple(f"m={m},n1={int(starkmap.blocks[m].rank[c])}" for m, c in levels)
    hamiltonian = Hamiltonian(
        static=static,
        field_terms=field_terms,
        drive_terms=tuple(drive_terms),
        labels=labels,
        named=named,
        rate_bound=rate if rate > 0 else constants.TWO_PI * constants.MHZ,
    )
    logger.info("Rb subspace n=%d: %d states (m >= %d, depth %d)", n_center, dim, m_min, ladder_depth)
    return RbModel(hamiltonian, starkmap, tuple(levels), coupling, stark, zop, field)
