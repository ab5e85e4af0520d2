import numpy as np
import pytest
from scipy.integrate import trapezoid

import constants
from models.errors import FitError, InvalidParameterError
from models.schemas import CODATA, IonizationModel, ProbeCalibration
from services.experiments import (
    adiabatic_experiment,
    autler_townes_experiment,
    autler_townes_lines,
    binomial_sample,
    count_maxima,
    default_ionization_fields,
    fit_rabi_oscillation,
    ionization_spectrum,
    population_from_signal_ratio,
    probe_calibration_sequence,
    probe_corrected_population,
    rabi_scan_experiment,
    residual_fraction,
    sigma_minus_rabi_experiment,
)

US, NS, KHZ = constants.US, constants.NS, constants.KHZ


def field_for_rabi(omega: float) -> float:
    return omega * CODATA.hbar / (np.sqrt(2.0) * constants.DEFAULT_DIPOLE)


def test_binomial_sample_is_seeded():
    populations = {"c": 0.8, "d": 0.15, "other": 0.05}
    first = binomial_sample(populations, 100, seed=3)
    assert first == binomial_sample(populations, 100, seed=3)
    estimates, errors = first
    for label, p in estimates.items():
        assert errors[label] == pytest.approx(np.sqrt(p * (1.0 - p) / 100))
    with pytest.raises(InvalidParameterError):
        binomial_sample(populations, 0)


def test_corrected_population_with_counting_error():
    calibration = ProbeCalibration(eta={"c": 0.23, "d": 0.115})
    population, error = probe_corrected_population(40, 100, calibration, "d")
    assert population == pytest.approx(0.8)
    assert error == pytest.approx(2.0 * np.sqrt(0.4 * 1.4 / 100))
    with pytest.raises(InvalidParameterError):
        probe_corrected_population(40, 0, calibration, "c")
    with pytest.raises(InvalidParameterError):
        probe_corrected_population(40, 100, calibration, "g")


def test_counting_error_bar_is_not_clipped_at_saturation():
    calibration = ProbeCalibration(eta={"c": 0.23})
    near, near_error = probe_corrected_population(100, 100, calibration, "c")
    above, above_error = probe_corrected_population(120, 100, calibration, "c")
    assert near == pytest.approx(1.0)
    assert above == pytest.approx(1.2)
    assert near_error == pytest.approx(np.sqrt(2.0 / 100))
    assert above_error == pytest.approx(np.sqrt(1.2 * 2.2 / 100))
    assert above_error > near_error > 0.0


def test_population_from_signal_ratio():
    assert population_from_signal_ratio(0.23) == pytest.approx(1.0)
    with pytest.raises(InvalidParameterError):
        population_from_signal_ratio(-0.1)


def test_ionization_peaks_carry_detected_population():
    model = IonizationModel.default()
    fields = default_ionization_fields(model, 4001)
    signal = ionization_spectrum({"i": 0.5, "c": 0.5}, model, fields)
    assert trapezoid(signal, fields) == pytest.approx(0.5 + 0.5 * constants.DETECTION_EFFICIENCY_RATIO, rel=2e-4)
    with pytest.raises(InvalidParameterError):
        ionization_spectrum({"i": 0.7, "c": 0.7}, model, fields)


def test_residual_fraction_of_a_partial_transfer():
    model = IonizationModel.default()
    fields = default_ionization_fields(model, 4001)
    before = ionization_spectrum({"i": 1.0}, model, fields)
    after = ionization_spectrum({"i": 0.25, "c": 0.75}, model, fields)
    assert residual_fraction(before, after, fields, model, "i") == pytest.approx(0.25, rel=1e-3)


def test_rabi_fit_recovers_frequency():
    times = np.linspace(0.0, 10.0 * US, 201)
    omega = constants.TWO_PI * 107.0 * KHZ
    fit = fit_rabi_oscillation(times, 0.9 * np.sin(0.5 * omega * times) ** 2)
    assert fit.ok
    assert fit.parameters["omega"] == pytest.approx(omega, rel=1e-6)
    assert fit.parameters["amplitude"] == pytest.approx(0.9, rel=1e-6)


def test_rabi_fit_flags_flat_data_and_needs_points():
    fit = fit_rabi_oscillation(np.linspace(0.0, 1e-6, 10), np.zeros(10))
    assert fit.flags == ["flat"]
    with pytest.raises(FitError):
        fit_rabi_oscillation(np.arange(3.0), np.arange(3.0))


def test_sigma_minus_oscillation():
    omega = constants.SIGMA_MINUS_RABI
    times = np.linspace(0.0, 10.0 * US, 201)
    result = sigma_minus_rabi_experiment(field_for_rabi(omega), times)
    assert result.omega_minus == pytest.approx(omega)
    assert result.fit.parameters["omega"] == pytest.approx(omega, rel=1e-5)
    half_period = np.pi / result.fit.parameters["omega"]
    assert half_period / US == pytest.approx(4.67, abs=0.01)


def test_sigma_minus_with_counting_noise_reports_error_bars():
    times = np.linspace(0.0, 10.0 * US, 101)
    result = sigma_minus_rabi_experiment(field_for_rabi(constants.SIGMA_MINUS_RABI), times, atoms=100, seed=1)
    assert result.errors is not None
    assert np.all((result.population >= 0.0) & (result.population <= 1.0))
    assert result.fit.parameters["omega"] == pytest.approx(constants.SIGMA_MINUS_RABI, rel=0.1)


def test_autler_townes_lines_are_symmetric_on_resonance(mhz):
    lines = autler_townes_lines(30.0 * mhz)
    positions = sorted(position for position, _ in lines)
    assert positions == pytest.approx([-15.0 * mhz, 15.0 * mhz])
    assert [weight for _, weight in lines] == pytest.approx([0.5, 0.5])


def test_autler_townes_splitting_equals_rabi_frequency(mhz):
    detunings = np.linspace(-40.0, 40.0, 801) * mhz
    result = autler_townes_experiment(field_for_rabi(constants.SIGMA_PLUS_RABI), detunings)
    assert result.fit.ok
    assert result.fit.parameters["splitting"] == pytest.approx(constants.SIGMA_PLUS_RABI, rel=1e-4)


def test_autler_townes_flags_an_unresolved_doublet(mhz):
    detunings = np.linspace(-20.0, 20.0, 401) * mhz
    result = autler_townes_experiment(field_for_rabi(1.0 * mhz), detunings)
    assert "unresolved" in result.fit.flags


def test_rabi_scan_fit_recovers_rate_and_correction(mhz):
    omega = 3.52 * mhz
    durations = np.linspace(0.0, 2.0 * US, 201)
    result = rabi_scan_experiment(omega, durations, "hydrogen", n=5, correction=-68.0 * NS)
    assert result.fit.parameters["omega_rabi"] == pytest.approx(omega, rel=1e-6)
    assert result.fit.parameters["correction"] / NS == pytest.approx(-68.0, abs=0.1)
    assert set(result.snapshots) == {float(d) for d in constants.SNAPSHOT_DURATIONS}


def test_count_maxima():
    t = np.linspace(0.0, 3.0, 601)
    assert count_maxima(np.sin(np.pi * t) ** 2).size == 3


def test_adiabatic_experiment_moves_the_ionization_signal(mhz):
    result = adiabatic_experiment(51, 3.5 * mhz, "hydrogen")
    assert result.populations["c"] > 0.95
    assert result.transfer_efficiency > 0.95
    model = IonizationModel.default()
    high = result.fields > model.thresholds["c"] - 1.0
    assert trapezoid(result.spectrum_after[high], result.fields[high]) > trapezoid(
        result.spectrum_before[high], result.fields[high]
    )


def test_probe_calibration_is_exact_without_spurious_population():
    result = probe_calibration_sequence()
    for label, eta in result.eta.items():
        assert eta == pytest.approx(result.true_eta[label])
    assert set(result.eta) == {"c", "d", "e", "f", "g"}
    assert result.prepared["l"]["f"] == pytest.approx(0.5)


def test_spurious_population_biases_the_calibration_low():
    result = probe_calibration_sequence(spurious_fraction=0.1)
    assert result.eta["c"] < result.true_eta["c"]
    assert result.eta["d"] < result.true_eta["d"]
    with pytest.raises(InvalidParameterError):
        probe_calibration_sequence(spurious_fraction=1.0)
