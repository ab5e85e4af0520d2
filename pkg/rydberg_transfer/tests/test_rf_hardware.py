import numpy as np
import pytest

import constants
from models.errors import InvalidParameterError, OptimizationError
from models.schemas import CODATA, ElectrodeDrive
from services.rf_hardware import (
    ELECTRODE_AZIMUTHS,
    SimulatedPolarimeter,
    TransferMatrix,
    drive_for_rabi,
    drive_purity,
    field_at_center,
    grid_search_polarization,
    load_drives,
    monte_carlo_purity,
    optimize_polarization,
    purity,
    rabi_from_fields,
    save_drives,
)


def test_ideal_structure_gives_pure_sigma_plus_with_quadrature_phases():
    transfer = TransferMatrix.ideal(2.0)
    drives = ElectrodeDrive(phases=tuple(ELECTRODE_AZIMUTHS))
    e_plus, e_minus = field_at_center(drives, transfer)
    assert abs(e_plus) == pytest.approx(2.0 * np.sqrt(2.0))
    assert abs(e_minus) == pytest.approx(0.0, abs=1e-12)
    assert purity(e_plus, e_minus) == pytest.approx(0.0, abs=1e-12)


def test_line_compensated_phases_give_the_full_sigma_plus_field():
    transfer = TransferMatrix.ideal(2.0)
    phases = tuple(ELECTRODE_AZIMUTHS - np.asarray(constants.ELECTRODE_LINE_PHASES))
    e_plus, e_minus = field_at_center(ElectrodeDrive(phases=phases), transfer)
    assert abs(e_plus) == pytest.approx(4.0)
    assert abs(e_minus) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("pair", constants.ELECTRODE_PAIRS)
def test_opposite_electrodes_in_phase_give_a_linear_field(pair):
    e_plus, e_minus = field_at_center(ElectrodeDrive().only(set(pair)), TransferMatrix.ideal())
    assert abs(e_plus) > 0.1
    assert abs(e_plus) == pytest.approx(abs(e_minus))
    assert purity(e_plus, e_minus) == pytest.approx(1.0 / np.sqrt(2.0))


def test_purity_is_undefined_without_a_field():
    with pytest.raises(InvalidParameterError):
        purity(0j, 0j)


def test_transfer_matrix_shape_is_checked():
    with pytest.raises(InvalidParameterError):
        TransferMatrix(np.ones((2, 3)))
    with pytest.raises(InvalidParameterError):
        TransferMatrix(np.full((2, 4), np.nan))


def test_transfer_matrix_table_round_trip(tmp_path):
    transfer = TransferMatrix.perturbed(seed=7, cross_talk=0.05)
    loaded = TransferMatrix.load(transfer.save(tmp_path / "transfer.txt"))
    assert np.array_equal(loaded.matrix, transfer.matrix)
    assert np.array_equal(loaded.cross_talk, transfer.cross_talk)
    (tmp_path / "bad.txt").write_text("1 2 3\n", encoding="utf-8")
    with pytest.raises(InvalidParameterError):
        TransferMatrix.load(tmp_path / "bad.txt")


def test_drive_table_round_trip(tmp_path):
    drives = ElectrodeDrive(amplitudes=(1.0, 0.9, 1.1, 0.8), phases=(0.0, 1.5, 3.1, 4.7))
    assert load_drives(save_drives(drives, tmp_path / "drives.txt")) == drives


def test_electrode_drive_validation_and_phase_wrapping():
    with pytest.raises(ValueError):
        ElectrodeDrive(amplitudes=(1.0, -1.0, 1.0, 1.0))
    drives = ElectrodeDrive().with_phase(1, 2.0 * np.pi + 0.5)
    assert drives.phases[1] == pytest.approx(0.5)
    assert drives.only({0, 2}).amplitudes == (1.0, 0.0, 1.0, 0.0)


def test_rabi_frequency_from_field():
    omega = rabi_from_fields(2.0, constants.DEFAULT_DIPOLE)
    assert omega == pytest.approx(np.sqrt(2.0) * constants.DEFAULT_DIPOLE * 2.0 / CODATA.hbar)
    with pytest.raises(InvalidParameterError):
        rabi_from_fields(1.0, 0.0)


def test_polarimeter_swaps_components_for_the_reversed_field():
    transfer = TransferMatrix.perturbed(seed=1)
    drives = ElectrodeDrive(phases=(0.1, 1.2, 3.0, 4.9))
    e_plus, e_minus = field_at_center(drives, transfer)
    reading = SimulatedPolarimeter(transfer).measure(drives)
    assert reading.omega_plus == pytest.approx(rabi_from_fields(e_plus, constants.DEFAULT_DIPOLE))
    assert reading.omega_minus == pytest.approx(rabi_from_fields(e_minus, constants.DEFAULT_DIPOLE))


@pytest.mark.parametrize("transfer", [TransferMatrix.ideal(), TransferMatrix.perturbed(seed=3)])
def test_noiseless_procedure_cancels_sigma_minus(transfer):
    result = optimize_polarization(transfer)
    final = drive_purity(result.drives, transfer)
    assert final < 1e-6
    best, _, _ = grid_search_polarization(transfer, result.drives)
    assert final <= best + 1e-3


def test_audit_records_every_step_and_counts_measurements():
    transfer = TransferMatrix.perturbed(seed=5)
    oracle = SimulatedPolarimeter(transfer)
    result = optimize_polarization(oracle=oracle, passes=2)
    assert result.measurements == oracle.count
    steps = [record.step for record in result.audit]
    assert set(steps) == {1, 2, 3, 4, 5}
    assert steps.count(1) == 2 * constants.ELECTRODE_COUNT
    assert {record.pass_index for record in result.audit} == {0, 1}
    assert result.audit_lines()[0].startswith("pass=0 step=1 V1=")


def test_steps_four_and_five_reduce_sigma_minus():
    transfer = TransferMatrix.perturbed(seed=11)
    result = optimize_polarization(transfer)
    after = {record.step: record.omega_minus for record in result.audit}
    assert after[4] > 0.0
    assert after[5] <= after[4]
    assert after[5] < 1e-6 * after[4]


def test_same_seed_gives_the_same_audit():
    transfer = TransferMatrix.perturbed(seed=2)
    first = optimize_polarization(transfer, noise=0.05, seed=9)
    second = optimize_polarization(transfer, noise=0.05, seed=9)
    assert first.audit_lines() == second.audit_lines()


def test_missing_electrode_stops_the_amplitude_matching():
    matrix = TransferMatrix.ideal().matrix.copy()
    matrix[:, 3] = 0.0
    with pytest.raises(OptimizationError) as error:
        optimize_polarization(TransferMatrix(matrix))
    assert error.value.step == 2


def test_averaging_repeated_readings_improves_purity():
    transfer = TransferMatrix.perturbed(seed=4)
    single = monte_carlo_purity(transfer, noise=0.05, runs=30, repeats=1)
    averaged = monte_carlo_purity(transfer, noise=0.05, runs=30, repeats=25)
    assert np.median(averaged) < np.median(single)


def test_drive_for_rabi_sets_the_ladder_rabi_frequency():
    transfer = TransferMatrix.perturbed(seed=6)
    drives = optimize_polarization(transfer).drives
    omega = constants.RABI_FREQUENCY
    scaled = drive_for_rabi(drives, transfer, omega, 51)
    e_plus, _ = field_at_center(scaled, transfer)
    assert 1.5 * 51 * CODATA.e * CODATA.a0 * abs(e_plus) / CODATA.hbar == pytest.approx(omega)
    assert drive_purity(scaled, transfer) == pytest.approx(drive_purity(drives, transfer), abs=1e-12)


def test_measured_rabi_frequencies_give_a_sub_percent_sigma_minus_fraction():
    def field(omega_rabi):
        return omega_rabi * CODATA.hbar / (np.sqrt(2.0) * constants.DEFAULT_DIPOLE)

    e_plus, e_minus = field(constants.SIGMA_PLUS_RABI), field(constants.SIGMA_MINUS_RABI)
    assert rabi_from_fields(e_plus, constants.DEFAULT_DIPOLE) == pytest.approx(constants.SIGMA_PLUS_RABI)
    assert 100.0 * purity(e_plus, e_minus) == pytest.approx(0.36, abs=0.02)
