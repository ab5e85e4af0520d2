import numpy as np
import pytest

import constants
from models.errors import OptimizationError
from models.schemas import PulseSchedule
from services.pulse_opt import (
    ControlModel,
    ControlProblem,
    _project_durations,
    fidelity,
    gradient_check,
    hydrogen_control_model,
    load_schedule,
    multi_start,
    optimize,
    random_schedule,
    rb_control_model,
    save_schedule,
    simulate_schedule,
    single_pulse_schedule,
)

NS = constants.NS


def random_model(dim: int, seed: int) -> ControlModel:
    rng = np.random.default_rng(seed)
    drift = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    raising = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    scale = constants.TWO_PI * 1e6
    initial = np.zeros(dim, dtype=complex)
    initial[0] = 1.0
    target = np.zeros(dim, dtype=complex)
    target[-1] = 1.0
    return ControlModel(
        name="random",
        drift=0.5 * scale * (drift + drift.conj().T),
        detuning_operator=np.diag(np.arange(dim, dtype=complex)),
        raising=raising,
        initial=initial,
        target=target,
    )


def test_single_pi_pulse_is_perfect_on_the_ladder(mhz):
    schedule = single_pulse_schedule(3.52 * mhz)
    assert schedule.total_duration == pytest.approx(np.pi / (3.52 * mhz))
    assert fidelity(schedule, hydrogen_control_model(51)) == pytest.approx(1.0, abs=1e-9)


def test_fidelity_is_invariant_under_a_global_phase(small_ladder, under_rotated):
    shifted = PulseSchedule.model_validate({**under_rotated.model_dump(), "phases": (0.7,) * 8})
    assert fidelity(shifted, small_ladder) == pytest.approx(fidelity(under_rotated, small_ladder), abs=1e-12)


@pytest.mark.parametrize("variable_durations", [False, True])
def test_gradient_matches_finite_differences_on_the_ladder(small_ladder, mhz, variable_durations):
    schedule = PulseSchedule(
        durations=(20 * NS, 35 * NS, 15 * NS, 40 * NS, 25 * NS),
        omegas=tuple(np.array([2.0, 5.0, 1.0, 7.5, 3.0]) * mhz),
        deltas=tuple(np.array([0.5, -1.0, 2.0, 0.0, -3.0]) * mhz),
        omega_max=10 * mhz,
        delta_max=5 * mhz,
        budget=200 * NS,
    )
    _, _, error = gradient_check(schedule, small_ladder, variable_durations)
    assert error < 1e-5


def test_gradient_matches_finite_differences_for_a_generic_model(mhz):
    model = random_model(4, seed=2)
    schedule = PulseSchedule(
        durations=(30 * NS, 50 * NS, 20 * NS),
        omegas=tuple(np.array([1.0, 4.0, 2.5]) * mhz),
        deltas=tuple(np.array([0.3, -0.7, 0.1]) * mhz),
        phases=(0.0, 0.4, 1.9),
        omega_max=5 * mhz,
        delta_max=1 * mhz,
        budget=150 * NS,
    )
    _, _, error = gradient_check(schedule, model, variable_durations=True)
    assert error < 1e-5


def test_project_durations():
    projected = _project_durations(np.array([0.5, 0.5, 0.5]), 0.1, 1.0)
    assert projected == pytest.approx([1.0 / 3.0] * 3)
    projected = _project_durations(np.array([0.9, 0.05, 0.3]), 0.1, 1.0)
    assert projected.sum() == pytest.approx(1.0)
    assert projected.min() >= 0.1
    assert _project_durations(np.array([0.2, 0.3]), 0.1, 1.0) == pytest.approx([0.2, 0.3])


def test_infeasible_duration_bounds(small_ladder, mhz):
    template = PulseSchedule.uniform(16, 10 * NS, 1.0 * mhz, budget=10 * NS)
    with pytest.raises(OptimizationError):
        ControlProblem(small_ladder, template, variable_durations=True)


def test_gradient_ascent_completes_an_under_rotated_transfer(small_ladder, under_rotated):
    start = fidelity(under_rotated, small_ladder)
    report = optimize(under_rotated, small_ladder)
    assert report.fidelity > 0.999
    assert report.fidelity > start
    assert np.all(np.diff(report.fidelity_trace) >= 0.0)
    assert report.termination_reason in {"gradient", "fidelity-gain", "line-search", "iteration-cap"}
    assert report.schedule.total_duration <= under_rotated.budget * (1 + 1e-12)


def test_variable_durations_respect_the_budget(small_ladder, under_rotated):
    report = optimize(under_rotated, small_ladder, variable_durations=True, max_iterations=100)
    assert report.schedule.total_duration <= under_rotated.budget * (1 + 1e-9)
    assert min(report.schedule.durations) >= constants.OPT_MIN_DURATION * (1 - 1e-9)
    assert report.fidelity >= report.fidelity_trace[0]


def test_derivative_free_search_improves_the_transfer(small_ladder, under_rotated):
    report = optimize(under_rotated, small_ladder, method="derivative-free", max_iterations=200)
    assert report.method == "derivative-free"
    assert report.fidelity > 0.99
    assert report.fidelity == max(report.fidelity_trace)


def test_multi_start_is_reproducible(small_ladder, under_rotated):
    first = multi_start(under_rotated, small_ladder, starts=3, seed=4, max_iterations=50)
    second = multi_start(under_rotated, small_ladder, starts=3, seed=4, max_iterations=50, workers=3)
    assert first.seeds == [4, 5, 6]
    assert first.fidelities == second.fidelities
    assert first.best.fidelity == max(first.fidelities)
    assert first.dispersion >= 0.0


def test_random_schedule_stays_within_bounds(under_rotated):
    schedule = random_schedule(under_rotated, seed=1)
    assert schedule == random_schedule(under_rotated, seed=1)
    assert max(schedule.omegas) <= under_rotated.omega_max
    assert max(abs(d) for d in schedule.deltas) <= under_rotated.delta_max
    assert schedule.durations == under_rotated.durations


def test_schedule_budget_is_enforced(mhz):
    with pytest.raises(ValueError):
        PulseSchedule(durations=(100 * NS, 200 * NS), omegas=(0.0, 0.0), deltas=(0.0, 0.0), budget=250 * NS)
    with pytest.raises(ValueError):
        PulseSchedule(durations=(100 * NS,), omegas=(20 * mhz,), deltas=(0.0,), omega_max=10 * mhz)


def test_schedule_csv_round_trip(tmp_path, under_rotated, small_ladder):
    schedule = random_schedule(under_rotated, seed=3)
    loaded = load_schedule(save_schedule(schedule, tmp_path / "schedule.csv"), budget=schedule.budget)
    assert loaded.durations == pytest.approx(schedule.durations, rel=1e-9)
    assert loaded.omegas == pytest.approx(schedule.omegas, rel=1e-9)
    assert fidelity(loaded, small_ladder) == pytest.approx(fidelity(schedule, small_ladder), abs=1e-6)


def test_simulated_schedule_ends_at_the_schedule_fidelity(small_ladder, under_rotated):
    trajectory = simulate_schedule(under_rotated, small_ladder, points_per_segment=5)
    assert trajectory.times.size == 8 * 5 + 1
    assert trajectory.times[-1] == pytest.approx(under_rotated.total_duration)
    target = small_ladder.named["c"]
    assert trajectory.populations[-1, target] == pytest.approx(fidelity(under_rotated, small_ladder), abs=1e-9)
    assert trajectory.norm_error() < 1e-9


@pytest.mark.slow
def test_rubidium_control_model_gradient_and_improvement(mhz):
    model = rb_control_model(51)
    assert model.initial.shape == model.target.shape == (model.dim,)
    template = PulseSchedule.uniform(
        4, 400 * NS, 2.0 * mhz, omega_max=10 * mhz, delta_max=5 * mhz, budget=400 * NS
    )
    _, _, error = gradient_check(template, model)
    assert error < 1e-3
    report = optimize(template, model, max_iterations=30)
    assert report.fidelity >= fidelity(template, model)


@pytest.mark.slow
def test_rubidium_schedule_beats_the_best_single_pulse(mhz):
    model = rb_control_model(51)
    lengths = np.linspace(100 * NS, 300 * NS, 41)
    singles = [fidelity(single_pulse_schedule(constants.RABI_FREQUENCY, t), model) for t in lengths]
    best = int(np.argmax(singles))
    t_best = float(lengths[best])
    template = PulseSchedule.uniform(
        8, t_best, constants.RABI_FREQUENCY, omega_max=10 * mhz, delta_max=5 * mhz, budget=t_best
    )
    report = optimize(template, model, max_iterations=100)
    assert report.fidelity > max(singles[best], 0.80)
    assert sum(report.schedule.durations) <= t_best * (1 + 1e-9)
