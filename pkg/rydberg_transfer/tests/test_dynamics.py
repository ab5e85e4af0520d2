import numpy as np
import pytest

import constants
from models.errors import InvalidParameterError
from models.schemas import DriveConfig, FieldRamp, PulseEnvelope
from services.dynamics import (
    StateVector,
    adiabatic_passage,
    adiabatic_scan,
    detuning,
    initial_state,
    propagate,
    rabi_field,
    rabi_scan,
    rabi_transfer,
    spin_rotation_populations,
    transfer_hamiltonian,
)
from services.experiments import count_maxima
from services.stark_manifold import build_hydrogen_hamiltonian, field_for_frequency, pseudospin_labels

V_PER_CM = constants.V_PER_CM
NS = constants.NS


def test_spin_rotation_populations():
    assert spin_rotation_populations(2.0, 0.0) == pytest.approx([1.0, 0.0, 0.0, 0.0, 0.0])
    assert spin_rotation_populations(2.0, np.pi) == pytest.approx([0.0, 0.0, 0.0, 0.0, 1.0])
    assert spin_rotation_populations(25.0, 1.3).sum() == pytest.approx(1.0)


def test_state_vector_must_be_normalized():
    with pytest.raises(InvalidParameterError):
        StateVector(np.array([1.0, 1.0]))
    assert StateVector.basis_state(3, 2).populations == pytest.approx([0.0, 0.0, 1.0])


def test_resonant_pi_pulse_reaches_the_circular_level(mhz):
    omega = 3.52 * mhz
    populations = rabi_transfer(5, omega, 0.0, np.pi / omega)
    assert populations["c"] == pytest.approx(1.0, abs=1e-9)
    assert populations["south"] == pytest.approx(0.0, abs=1e-9)


def test_resonant_scan_is_a_spin_rotation(mhz):
    omega = 2.0 * mhz
    durations = np.linspace(0.0, 1e-6, 41)
    trajectory = rabi_scan(6, omega, 0.0, durations)
    expected = np.array([spin_rotation_populations(2.5, omega * t) for t in durations])
    assert np.allclose(trajectory.populations, expected, atol=1e-9)
    assert trajectory.norm_error() < 1e-9


def test_detuned_two_level_transfer_is_incomplete(mhz):
    omega, delta = 1.0 * mhz, 1.0 * mhz
    generalized = np.hypot(omega, delta)
    populations = rabi_transfer(2, omega, delta, np.pi / generalized)
    assert populations["c"] == pytest.approx(omega ** 2 / generalized ** 2, abs=1e-9)


def test_duration_correction_shifts_the_pulse(mhz):
    omega = 3.52 * mhz
    envelope = PulseEnvelope(correction=-68.0 * NS)
    corrected = rabi_transfer(5, omega, 0.0, np.pi / omega + 68.0 * NS, envelope=envelope)
    assert corrected["c"] == pytest.approx(1.0, abs=1e-9)
    assert rabi_transfer(5, omega, 0.0, 0.0, envelope=envelope)["south"] == 1.0


def test_pulse_envelope_defaults_to_the_measured_correction():
    assert PulseEnvelope().correction == pytest.approx(-68.0 * NS)
    assert PulseEnvelope(hold=200 * NS).effective_duration(200 * NS) == pytest.approx(132 * NS)
    assert PulseEnvelope.calibrated().correction == PulseEnvelope().correction
    assert PulseEnvelope.square().correction == 0.0
    assert PulseEnvelope.square().effective_duration(200 * NS) == pytest.approx(200 * NS)


def test_exact_step_agrees_with_adaptive_for_shaped_pulse(mhz):
    envelope = PulseEnvelope(rise=200 * NS, hold=300 * NS, fall=200 * NS)
    hamiltonian = transfer_hamiltonian(4, 3.0 * mhz, 0.5 * mhz, envelope=envelope)
    psi0 = initial_state(hamiltonian, "hydrogen")
    grid = np.linspace(0.0, envelope.total, 15)
    exact = propagate(hamiltonian, psi0, grid, max_substep=0.5 * NS)
    adaptive = propagate(hamiltonian, psi0, grid, method="adaptive")
    assert np.allclose(exact.populations, adaptive.populations, atol=1e-4)
    assert exact.norm_error() < 1e-9


def test_time_reversed_generator_undoes_the_evolution(mhz):
    envelope = PulseEnvelope(rise=200 * NS, hold=300 * NS, fall=200 * NS)
    hamiltonian = transfer_hamiltonian(4, 3.0 * mhz, 0.5 * mhz, envelope=envelope)
    psi0 = initial_state(hamiltonian, "hydrogen")
    total = envelope.total
    forward = propagate(hamiltonian, psi0, [0.0, total], store_amplitudes=True).amplitudes[-1]
    reversed_generator = hamiltonian.time_reversed(total)
    back = propagate(reversed_generator, forward, [0.0, total], store_amplitudes=True).amplitudes[-1]
    assert abs(np.vdot(psi0.amplitudes, back)) == pytest.approx(1.0, abs=1e-10)


def test_halving_the_sub_step_leaves_populations_unchanged(mhz):
    envelope = PulseEnvelope(rise=200 * NS, hold=300 * NS, fall=200 * NS)
    hamiltonian = transfer_hamiltonian(4, 3.0 * mhz, 0.5 * mhz, envelope=envelope)
    psi0 = initial_state(hamiltonian, "hydrogen")
    grid = np.linspace(0.0, envelope.total, 8)
    coarse = propagate(hamiltonian, psi0, grid, max_substep=0.1 * NS)
    fine = propagate(hamiltonian, psi0, grid, max_substep=0.05 * NS)
    assert np.max(np.abs(coarse.populations - fine.populations)) < 1e-6


def test_lab_frame_matches_the_exact_rotating_frame(mhz):
    n = 3
    drive = DriveConfig(e_plus=complex(rabi_field(n, 5.0 * mhz)))
    field = field_for_frequency(n, drive.omega_rf)
    lab = build_hydrogen_hamiltonian(n, field, drive, "lab")
    rotating = build_hydrogen_hamiltonian(n, field, drive, "rotating", co_rotating=False)
    psi0 = initial_state(lab, "hydrogen")
    grid = np.linspace(0.0, 100 * NS, 11)
    in_lab = propagate(lab, psi0, grid, method="adaptive")
    in_rotating = propagate(rotating, psi0, grid)
    assert rotating.is_static
    assert np.allclose(in_lab.populations, in_rotating.populations, atol=1e-5)
    assert in_rotating.populations[-1, lab.named["south"]] < 0.99


def test_propagate_rejects_bad_grids_and_states(mhz):
    hamiltonian = transfer_hamiltonian(4, 3.0 * mhz, 0.0)
    psi0 = initial_state(hamiltonian, "hydrogen")
    with pytest.raises(InvalidParameterError):
        propagate(hamiltonian, psi0, [0.0, 2e-7, 1e-7])
    with pytest.raises(InvalidParameterError):
        propagate(hamiltonian, np.array([1.0, 0.0]), [0.0, 1e-7])
    with pytest.raises(InvalidParameterError):
        rabi_transfer(4, 3.0 * mhz, 0.0, -1e-9)


def test_level_populations_account_for_every_state(mhz, tmp_path):
    trajectory = rabi_scan(51, 3.52 * mhz, 0.0, np.linspace(0.0, 2e-7, 5))
    levels = trajectory.level_populations()
    assert trajectory.columns()[0] == "south"
    assert "other" in levels
    total = sum(levels.values())
    assert np.allclose(total, 1.0)
    path = trajectory.to_csv(tmp_path / "scan.csv")
    header = path.read_text(encoding="utf-8").splitlines()[0].split(",")
    assert header[0] == "time_us"
    assert header[-1] == "other"


def test_detuning_at_the_resonant_field():
    assert detuning(51, 2.35 * V_PER_CM, constants.RF_FREQUENCY) == pytest.approx(0.0, abs=constants.TWO_PI * 2e6)


def test_adiabatic_passage_transfers_the_hydrogen_ladder(mhz):
    populations = adiabatic_passage(51, 3.5 * mhz, model="hydrogen")
    assert populations["c"] > 0.95
    assert populations["south"] < 0.01


def test_adiabatic_passage_requires_a_resonance_crossing(mhz):
    ramp = FieldRamp(f_start=2.45 * V_PER_CM, f_end=2.40 * V_PER_CM, duration=1e-6)
    with pytest.raises(InvalidParameterError):
        adiabatic_passage(51, 3.5 * mhz, ramp=ramp, model="hydrogen")


def test_adiabatic_scan_keeps_input_order(mhz):
    omegas = [0.05 * mhz, 3.5 * mhz]
    serial = adiabatic_scan(51, omegas, "hydrogen")
    threaded = adiabatic_scan(51, omegas, "hydrogen", workers=2)
    assert serial == threaded
    assert serial[0]["c"] < serial[1]["c"]


@pytest.mark.slow
def test_rubidium_transfer_generator_conserves_probability(mhz):
    hamiltonian = transfer_hamiltonian(51, 3.52 * mhz, 0.0, "rb")
    assert {"i", "c"} <= set(hamiltonian.named)
    assert hamiltonian.hermiticity_error([0.0]) < 1e-12
    trajectory = rabi_scan(51, 3.52 * mhz, 0.0, np.linspace(0.0, 1e-6, 51), "rb")
    assert trajectory.norm_error() < 1e-9
    assert trajectory.populations[0, hamiltonian.named["i"]] == pytest.approx(1.0)


@pytest.mark.slow
def test_full_manifold_rotation_follows_the_binomial_law(mhz):
    n, omega = 51, 3.52 * mhz
    drive = DriveConfig(e_plus=complex(rabi_field(n, omega)))
    hamiltonian = build_hydrogen_hamiltonian(
        n, field_for_frequency(n, drive.omega_rf), drive, "rotating", m_sector="nonnegative"
    )
    j = 0.5 * (n - 1)
    labels = pseudospin_labels(n, "nonnegative")
    ladder = sorted((k for k, (_, m2) in enumerate(labels) if abs(m2 - j) < 1e-9), key=lambda k: labels[k][0])
    times = np.linspace(0.0, 2.0 * np.pi / omega, 20)
    trajectory = propagate(hamiltonian, initial_state(hamiltonian, "hydrogen"), times)
    expected = np.array([spin_rotation_populations(j, omega * t) for t in times])
    assert hamiltonian.dim == n * (n + 1) // 2
    assert len(ladder) == n
    assert np.max(np.abs(trajectory.populations[:, ladder] - expected)) < 1e-6
    assert np.max(1.0 - trajectory.populations[:, ladder].sum(axis=1)) < 1e-6


@pytest.mark.slow
def test_rubidium_rabi_oscillation_is_limited_to_eighty_percent():
    durations = np.linspace(0.0, constants.RABI_SCAN_DURATION, constants.RABI_SCAN_POINTS)
    trajectory = rabi_scan(51, constants.RABI_FREQUENCY, 0.0, durations, "rb")
    p_c = trajectory.populations[:, trajectory.named["c"]]
    peaks = count_maxima(p_c)
    assert peaks.size >= 20
    assert durations[peaks[0]] < 300 * NS
    assert p_c[peaks[0]] == pytest.approx(0.80, abs=0.05)
    assert np.mean(np.diff(durations[peaks])) < 300 * NS


@pytest.mark.slow
def test_rubidium_adiabatic_passage_reaches_the_circular_level(mhz):
    populations = adiabatic_passage(51, constants.PASSAGE_RABI_FREQUENCY)
    assert populations["c"] > 0.95
    assert sum(populations[label] for label in ("d", "e", "f", "g")) <= 0.05
    assert populations["i"] < 0.02
    assert adiabatic_passage(51, 0.2 * mhz)["c"] < 0.5
