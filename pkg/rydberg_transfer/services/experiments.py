"""
Measurement recipes: detection model, probe-efficiency correction and the
fits that turn simulated populations into Rabi frequencies and splittings.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import curve_fit, least_squares
from scipy.signal import find_peaks
from scipy.stats import norm

import constants
from models.errors import FitError, InvalidParameterError
from models.schemas import FieldRamp, FitResult, IonizationModel, ProbeCalibration, PulseEnvelope
from services.dynamics import (
    Model,
    Trajectory,
    adiabatic_passage,
    initial_state,
    propagate,
    rabi_scan,
    transfer_hamiltonian,
)
from services.rf_hardware import rabi_from_fields
from services.stark_manifold import Hamiltonian

logger = logging.getLogger(__name__)


# Counting statistics and probe correction


def binomial_sample(
    populations: Mapping[str, float], atoms: int = constants.ATOMS_PER_POINT, seed: int = 0
) -> Tuple[Dict[str, float], Dict[str, float]]:
    """Simulated detection of ``atoms`` atoms per level: (estimates, 1-sigma error bars)."""
    if atoms < 1:
        raise InvalidParameterError("need at least one atom per point")
    rng = np.random.default_rng(seed)
    estimates, errors = {}, {}
    for label in sorted(populations):
        p = min(1.0, max(0.0, float(populations[label])))
        estimate = rng.binomial(atoms, p) / atoms
        estimates[label] = estimate
        errors[label] = math.sqrt(estimate * (1.0 - estimate) / atoms)
    return estimates, errors


def probe_corrected_population(
    n49: float, n51_i: float, calibration: ProbeCalibration, level: str
) -> Tuple[float, float]:
    """P_p = (eta0 / eta_p) * N(49, p) / N(51, i) with its statistical error bar.

    The error bar treats both counts as independent counting samples,
    sigma_r^2 = r (1 + r) / N(51, i) on the unclipped ratio r, so it stays
    finite and grows when the probe count exceeds the reference.
    """
    if n49 < 0 or n51_i < 0:
        raise InvalidParameterError("counts must be >= 0")
    if n51_i == 0:
        raise InvalidParameterError("reference count N(51, i) must be positive")
    scale = calibration.eta0 / calibration.efficiency(level)
    ratio = n49 / n51_i
    error = scale * math.sqrt(ratio * (1.0 + ratio) / n51_i)
    return scale * ratio, error


def population_from_signal_ratio(ratio: float, eta0: float = constants.DETECTION_EFFICIENCY_RATIO) -> float:
    """Circular-level population from the detected c/i signal ratio."""
    if ratio < 0:
        raise InvalidParameterError("signal ratio must be >= 0")
    if not 0.0 < eta0 <= 1.0:
        raise InvalidParameterError("eta0 must lie in (0, 1]")
    return ratio / eta0


# Field-ionization detection


def ionization_spectrum(
    populations: Mapping[str, float], model: IonizationModel, fields: Sequence[float]
) -> np.ndarray:
    """Detected signal versus ionization field: one normalized Gaussian per level.

    Each peak has area P_p * eta_p; levels without a threshold are not detected.
    """
    total = sum(v for k, v in populations.items() if k != "other")
    if total > 1.0 + 1e-9:
        raise InvalidParameterError(f"populations sum to {total:.6f} > 1")
    fields = np.asarray(fields, dtype=float)
    signal = np.zeros_like(fields)
    for label, population in populations.items():
        if label not in model.thresholds:
            continue
        weight = population * model.efficiency(label)
        signal += weight * norm.pdf(fields, loc=model.thresholds[label], scale=model.width)
    return signal


def default_ionization_fields(model: IonizationModel, points: int = 801) -> np.ndarray:
    low = min(model.thresholds.values()) - 4.0 * model.width
    high = max(model.thresholds.values()) + 4.0 * model.width
    return np.linspace(low, high, points)


def peak_area(signal: np.ndarray, fields: np.ndarray, center: float, half_width: float) -> float:
    window = np.abs(fields - center) <= half_width
    return float(trapezoid(signal[window], fields[window]))


def residual_fraction(
    before: np.ndarray, after: np.ndarray, fields: np.ndarray, model: IonizationModel, level: str
) -> float:
    """Signal left at ``level``'s threshold after the transfer, relative to before."""
    center = model.thresholds[level]
    reference = peak_area(before, fields, center, model.width)
    if reference <= 0.0:
        raise InvalidParameterError(f"no {level!r} signal before the transfer")
    return peak_area(after, fields, center, model.width) / reference


# Fits


def _covariance_errors(jacobian: np.ndarray, residuals: np.ndarray) -> Tuple[np.ndarray, bool]:
    dof = max(1, residuals.size - jacobian.shape[1])
    variance = float(residuals @ residuals) / dof
    try:
        covariance = np.linalg.inv(jacobian.T @ jacobian) * variance
    except np.linalg.LinAlgError:
        return np.full(jacobian.shape[1], np.inf), True
    return np.sqrt(np.abs(np.diag(covariance))), False


def fit_rabi_oscillation(times: np.ndarray, values: np.ndarray) -> FitResult:
    """Fit a sin^2(Omega t / 2) to a two-level oscillation; times are fitted in units of the span."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size < 4:
        raise FitError("need at least four points for a Rabi fit")
    if np.ptp(values) < 1e-9:
        logger.warning("Rabi fit skipped: flat data")
        return FitResult(
            parameters={"omega": 0.0, "amplitude": float(np.mean(values))},
            uncertainties={"omega": 0.0, "amplitude": 0.0},
            residual_norm=0.0,
            flags=["flat"],
        )

    def model(u, amplitude, omega):
        return amplitude * np.sin(0.5 * omega * u) ** 2

    span = times[-1] - times[0]
    u = times / span
    spacing = np.min(np.diff(u))
    # coarse seed: best least-squares amplitude for each trial frequency
    trials = np.geomspace(0.5 * math.pi, math.pi / spacing, 4000)
    basis = np.sin(0.5 * np.outer(trials, u)) ** 2
    amplitudes = (basis @ values) / np.maximum(np.sum(basis * basis, axis=1), 1e-300)
    misfit = np.sum((values[None, :] - amplitudes[:, None] * basis) ** 2, axis=1)
    best = int(np.argmin(misfit))
    try:
        params, covariance = curve_fit(model, u, values, p0=[amplitudes[best], trials[best]], maxfev=20000)
    except RuntimeError as e:
        raise FitError(f"Rabi fit did not converge: {e}") from e
    residual = float(np.linalg.norm(values - model(u, *params)))
    errors = np.sqrt(np.abs(np.diag(covariance))) if np.all(np.isfinite(covariance)) else np.zeros(2)
    return FitResult(
        parameters={"amplitude": float(params[0]), "omega": float(abs(params[1]) / span)},
        uncertainties={"amplitude": float(errors[0]), "omega": float(errors[1] / span)},
        residual_norm=residual,
    )


def _gaussian(x, amplitude, center, sigma):
    return amplitude * np.exp(-0.5 * ((x - center) / sigma) ** 2)


def fit_doublet(detunings: np.ndarray, spectrum: np.ndarray, linewidth: float) -> FitResult:
    """Two-Gaussian fit with a shared width; flags an unresolved doublet.

    Detunings are fitted in units of ``linewidth``.
    """
    x = np.asarray(detunings, dtype=float) / linewidth
    spectrum = np.asarray(spectrum, dtype=float)
    peaks, _ = find_peaks(spectrum)
    if peaks.size >= 2:
        peaks = np.sort(peaks[np.argsort(spectrum[peaks])[-2:]])

        def doublet(u, a1, c1, a2, c2, sigma):
            return _gaussian(u, a1, c1, sigma) + _gaussian(u, a2, c2, sigma)

        p0 = [spectrum[peaks[0]], x[peaks[0]], spectrum[peaks[1]], x[peaks[1]], 1.0]
        try:
            params, covariance = curve_fit(doublet, x, spectrum, p0=p0, maxfev=20000)
        except RuntimeError as e:
            raise FitError(f"doublet fit did not converge: {e}") from e
        a1, c1, a2, c2, sigma = params
        errors = np.sqrt(np.abs(np.diag(covariance))) * linewidth
        (w_low, c_low), (w_high, c_high) = sorted([(a1, c1), (a2, c2)], key=lambda pair: pair[1])
        splitting = (c_high - c_low) * linewidth
        sigma = abs(sigma) * linewidth
        flags = [] if splitting >= sigma else ["unresolved"]
        if flags:
            logger.warning("Autler-Townes doublet not resolved")
        return FitResult(
            parameters={
                "splitting": float(splitting),
                "center_low": float(c_low * linewidth),
                "center_high": float(c_high * linewidth),
                "weight_low": float(w_low),
                "weight_high": float(w_high),
                "sigma": float(sigma),
            },
            uncertainties={"splitting": float(math.hypot(errors[1], errors[3])), "sigma": float(errors[4])},
            residual_norm=float(np.linalg.norm(spectrum - doublet(x, *params))),
            flags=flags,
        )

    # a single line: fit one Gaussian and report zero splitting
    top = int(np.argmax(spectrum))
    try:
        params, covariance = curve_fit(_gaussian, x, spectrum, p0=[spectrum[top], x[top], 1.0], maxfev=20000)
    except RuntimeError as e:
        raise FitError(f"line fit did not converge: {e}") from e
    errors = np.sqrt(np.abs(np.diag(covariance))) * linewidth
    logger.warning("Autler-Townes doublet not resolved")
    return FitResult(
        parameters={
            "splitting": 0.0,
            "center_low": float(params[1] * linewidth),
            "center_high": float(params[1] * linewidth),
            "weight_low": float(params[0]),
            "weight_high": float(params[0]),
            "sigma": float(abs(params[2]) * linewidth),
        },
        uncertainties={"splitting": float(errors[1]), "sigma": float(errors[2])},
        residual_norm=float(np.linalg.norm(spectrum - _gaussian(x, *params))),
        flags=["unresolved"],
    )


# Experiment recipes


@dataclass
class SigmaMinusResult:
    times: np.ndarray
    population: np.ndarray
    omega_minus: float
    fit: FitResult
    errors: Optional[np.ndarray] = None


def sigma_minus_rabi_experiment(
    e_minus: complex,
    times: Sequence[float],
    dipole: float = constants.DEFAULT_DIPOLE,
    atoms: int = 0,
    seed: int = 0,
) -> SigmaMinusResult:
    """Rabi oscillation i -> i' driven by the sigma- component alone.

    The transition is treated as an isolated resonant two-level system.
    With ``atoms`` > 0 the populations are binomially sampled before the fit.
    """
    times = np.asarray(times, dtype=float)
    omega = rabi_from_fields(e_minus, dipole)
    two_level = Hamiltonian(
        static=0.5 * omega * np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex),
        labels=("i", "i'"),
        named={"i": 0, "i'": 1},
        rate_bound=max(omega, 1.0),
    )
    trajectory = propagate(two_level, np.array([1.0, 0.0], dtype=complex), times)
    population = trajectory.populations[:, 1]
    errors = None
    if atoms > 0:
        rng = np.random.default_rng(seed)
        population = rng.binomial(atoms, np.clip(population, 0.0, 1.0)) / atoms
        errors = np.sqrt(population * (1.0 - population) / atoms)
    fit = fit_rabi_oscillation(times, population)
    logger.info(
        "sigma- Rabi: Omega/2pi = %.4g kHz, fitted %.4g kHz",
        omega / constants.TWO_PI / constants.KHZ,
        fit.parameters["omega"] / constants.TWO_PI / constants.KHZ,
    )
    return SigmaMinusResult(times=times, population=population, omega_minus=omega, fit=fit, errors=errors)


@dataclass
class AutlerTownesResult:
    detunings: np.ndarray
    spectrum: np.ndarray
    lines: List[Tuple[float, float]]  # (position, weight) of the dressed components
    omega_plus: float
    fit: FitResult


def autler_townes_lines(omega_plus: float, rf_detuning: float = 0.0) -> List[Tuple[float, float]]:
    """Probe line positions (rad/s) and weights of i dressed with i' by the sigma+ field."""
    dressed = np.array([[0.0, 0.5 * omega_plus], [0.5 * omega_plus, -rf_detuning]])
    energies, vectors = np.linalg.eigh(dressed)
    weights = np.abs(vectors[0]) ** 2
    return [(float(e), float(w)) for e, w in zip(energies, weights)]


def autler_townes_experiment(
    e_plus: complex,
    detunings: Sequence[float],
    dipole: float = constants.DEFAULT_DIPOLE,
    linewidth: float = constants.AUTLER_TOWNES_LINEWIDTH,
    rf_detuning: float = 0.0,
) -> AutlerTownesResult:
    """Weak-probe spectrum of the dressed i level with a two-Gaussian fit."""
    if linewidth <= 0:
        raise InvalidParameterError("linewidth must be positive")
    detunings = np.asarray(detunings, dtype=float)
    omega = rabi_from_fields(e_plus, dipole)
    lines = autler_townes_lines(omega, rf_detuning)
    spectrum = np.zeros_like(detunings)
    for position, weight in lines:
        spectrum += _gaussian(detunings, weight, position, linewidth)
    fit = fit_doublet(detunings, spectrum, linewidth)
    logger.info(
        "Autler-Townes: Omega+/2pi = %.4g MHz, fitted splitting %.4g MHz",
        omega / constants.TWO_PI / constants.MHZ,
        fit.parameters["splitting"] / constants.TWO_PI / constants.MHZ,
    )
    return AutlerTownesResult(detunings=detunings, spectrum=spectrum, lines=lines, omega_plus=omega, fit=fit)


@dataclass
class RabiScanResult:
    trajectory: Trajectory
    fit: FitResult
    snapshots: Dict[float, Dict[str, float]] = field(default_factory=dict)


def _scan_model(
    n: int, omega_rabi: float, delta: float, model: Model, model_options: dict
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, Dict[str, int]]:
    hamiltonian = transfer_hamiltonian(n, omega_rabi, delta, model, **model_options)
    psi0 = initial_state(hamiltonian, model).amplitudes
    energies, vectors = np.linalg.eigh(hamiltonian.static)
    return energies, vectors, vectors.conj().T @ psi0, dict(hamiltonian.named)


def _scan_populations(
    spectrum: Tuple[np.ndarray, np.ndarray, np.ndarray, Dict[str, int]],
    durations: np.ndarray,
    correction: float,
    labels: Sequence[str],
) -> np.ndarray:
    energies, vectors, coefficients, named = spectrum
    effective = np.where(durations > 0.0, np.maximum(0.0, durations + correction), 0.0)
    amplitudes = (np.exp(-1j * np.outer(effective, energies)) * coefficients) @ vectors.T
    columns = [named[label] for label in labels]
    return np.abs(amplitudes[:, columns]) ** 2


def rabi_scan_experiment(
    omega_rabi: float,
    durations: Sequence[float],
    model: Model = "rb",
    n: int = constants.TRANSFER_MANIFOLD,
    delta: float = 0.0,
    correction: float = constants.PULSE_DURATION_CORRECTION,
    data: Optional[Mapping[str, np.ndarray]] = None,
    snapshots: Sequence[float] = constants.SNAPSHOT_DURATIONS,
    omega_span: float = 0.1,
    omega_points: int = 41,
    correction_range: Tuple[float, float] = (-200.0 * constants.NS, 200.0 * constants.NS),
    correction_points: int = 17,
    workers: int = 1,
    **model_options,
) -> RabiScanResult:
    """Rabi transfer versus pulse length with a fit of (Omega_rf, duration correction).

    Without ``data`` the scan simulated at (omega_rabi, correction) is used as
    synthetic data. The fit seeds from a coarse grid in both parameters and
    refines with least squares over every named level present in the data.
    """
    durations = np.asarray(durations, dtype=float)
    envelope = PulseEnvelope(correction=correction)
    trajectory = rabi_scan(n, omega_rabi, delta, durations, model, envelope, workers, **model_options)
    if data is None:
        data = {label: values for label, values in trajectory.level_populations().items() if label != "other"}
    labels = sorted(label for label in data if label in trajectory.named)
    if not labels:
        raise FitError("no named level in the data matches the model")
    target = np.column_stack([np.asarray(data[label], dtype=float) for label in labels])

    corrections = np.linspace(*correction_range, correction_points)
    best = (np.inf, omega_rabi, correction)
    for trial in omega_rabi * np.linspace(1.0 - omega_span, 1.0 + omega_span, omega_points):
        spectrum = _scan_model(n, trial, delta, model, model_options)
        for c in corrections:
            misfit = float(np.sum((_scan_populations(spectrum, durations, c, labels) - target) ** 2))
            if misfit < best[0]:
                best = (misfit, trial, c)
    _, omega_seed, correction_seed = best
    scale = np.array([omega_seed, 10.0 * constants.NS])

    def residuals(x: np.ndarray) -> np.ndarray:
        omega, c = x * scale
        spectrum = _scan_model(n, omega, delta, model, model_options)
        return (_scan_populations(spectrum, durations, c, labels) - target).ravel()

    x0 = np.array([1.0, correction_seed / scale[1]])
    solution = least_squares(residuals, x0, method="lm", xtol=1e-12, ftol=1e-12, gtol=1e-12)
    omega_fit, correction_fit = solution.x * scale
    errors, singular = _covariance_errors(solution.jac, solution.fun)
    flags = []
    if singular or not solution.success:
        flags.append("degenerate")
        logger.warning("Rabi scan fit is degenerate: %s", solution.message)
    fit = FitResult(
        parameters={"omega_rabi": float(omega_fit), "correction": float(correction_fit)},
        uncertainties={"omega_rabi": float(errors[0] * scale[0]), "correction": float(errors[1] * scale[1])},
        residual_norm=float(np.linalg.norm(solution.fun)),
        flags=flags,
    )
    taken = {}
    spectrum = _scan_model(n, omega_fit, delta, model, model_options)
    for duration in snapshots:
        pops = _scan_populations(spectrum, np.array([duration]), correction_fit, list(trajectory.named))
        taken[float(duration)] = {label: float(p) for label, p in zip(trajectory.named, pops[0])}
    logger.info(
        "Rabi scan fit: Omega/2pi = %.5g MHz, correction = %.4g ns",
        omega_fit / constants.TWO_PI / constants.MHZ,
        correction_fit / constants.NS,
    )
    return RabiScanResult(trajectory=trajectory, fit=fit, snapshots=taken)


def count_maxima(values: np.ndarray, prominence: float = 0.1) -> np.ndarray:
    """Indices of the oscillation maxima of a population curve."""
    peaks, _ = find_peaks(np.asarray(values), prominence=prominence)
    return peaks


@dataclass
class AdiabaticResult:
    populations: Dict[str, float]
    fields: np.ndarray
    spectrum_before: np.ndarray
    spectrum_after: np.ndarray
    transfer_efficiency: float


def adiabatic_experiment(
    n: int = constants.TRANSFER_MANIFOLD,
    omega_rabi: float = constants.PASSAGE_RABI_FREQUENCY,
    model: Model = "rb",
    ramp: Optional[FieldRamp] = None,
    ionization: Optional[IonizationModel] = None,
    fields: Optional[Sequence[float]] = None,
    **options,
) -> AdiabaticResult:
    """Adiabatic passage with ionization spectra before and after.

    The transfer efficiency is estimated from the residual signal at the
    initial level's threshold.
    """
    ionization = ionization or IonizationModel.default()
    fields = default_ionization_fields(ionization) if fields is None else np.asarray(fields, dtype=float)
    start = constants.INITIAL_LEVEL[model]
    populations = adiabatic_passage(n, omega_rabi, ramp=ramp, model=model, **options)
    before = ionization_spectrum({start: 1.0}, ionization, fields)
    after = ionization_spectrum(populations, ionization, fields)
    efficiency = 1.0 - residual_fraction(before, after, fields, ionization, start)
    logger.info("Adiabatic passage: P_c = %.4f, spectrum transfer estimate %.4f", populations.get("c", 0.0), efficiency)
    return AdiabaticResult(
        populations=populations,
        fields=fields,
        spectrum_before=before,
        spectrum_after=after,
        transfer_efficiency=efficiency,
    )


@dataclass
class ProbeCalibrationResult:
    eta: Dict[str, float]
    true_eta: Dict[str, float]
    prepared: Dict[str, Dict[str, float]]


def _prepared_populations(
    source: str, spurious_fraction: float, passage_map: Mapping[str, str], fg_split: float
) -> Dict[str, float]:
    ladder = list(constants.TOP_LADDER_LEVELS)
    target = passage_map[source]
    populations = {label: 0.0 for label in ladder}
    if target == "f":
        populations["f"] = 1.0 - fg_split
        populations["g"] = fg_split
    else:
        populations[target] = 1.0
    if spurious_fraction > 0.0:
        # the spurious part leaks to the ladder neighbours of the target
        position = ladder.index(target)
        neighbours = [ladder[k] for k in (position - 1, position + 1) if 0 <= k < len(ladder)]
        populations = {label: (1.0 - spurious_fraction) * p for label, p in populations.items()}
        for label in neighbours:
            populations[label] += spurious_fraction / len(neighbours)
    return populations


def probe_calibration_sequence(
    eta0: float = constants.DETECTION_EFFICIENCY_RATIO,
    probe_fidelity: float = 1.0,
    spurious_fraction: float = constants.PROBE_SPURIOUS_FRACTION,
    passage_map: Optional[Mapping[str, str]] = None,
    fg_split: float = constants.PROBE_FG_SPLIT,
    atoms: int = 0,
    seed: int = 0,
) -> ProbeCalibrationResult:
    """Probe-efficiency calibration from adiabatically prepared ladder levels.

    Each q in the passage map is assumed to end in p = map[q]; the measured
    ratio N(49, p) / N(51, i) is taken as eta_p. Population left elsewhere
    makes the estimate low. The level l prepares comparable f and g
    populations, so eta_f and eta_g are estimated jointly.
    """
    if not 0.0 <= spurious_fraction < 1.0:
        raise InvalidParameterError("spurious fraction must lie in [0, 1)")
    if not 0.0 < probe_fidelity <= 1.0 or not 0.0 < eta0 <= 1.0:
        raise InvalidParameterError("eta0 and probe fidelity must lie in (0, 1]")
    passage_map = dict(passage_map or constants.PASSAGE_MAP)
    true_eta = {label: eta0 * probe_fidelity for label in constants.TOP_LADDER_LEVELS}
    rng = np.random.default_rng(seed)
    eta, prepared = {}, {}
    for source in sorted(passage_map):
        target = passage_map[source]
        populations = _prepared_populations(source, spurious_fraction, passage_map, fg_split)
        prepared[source] = populations
        probed = ("f", "g") if target == "f" else (target,)
        # expected detected fraction relative to the N(51, i) reference
        signal = sum(true_eta[label] * populations[label] for label in probed)
        if atoms > 0:
            signal = rng.binomial(atoms, min(1.0, signal)) / atoms
        for label in probed:
            eta[label] = signal
    logger.info("Probe calibration: %s", ", ".join(f"eta_{k}={v:.4f}" for k, v in sorted(eta.items())))
    return ProbeCalibrationResult(eta=eta, true_eta=true_eta, prepared=prepared)
