import numpy as np
import pytest

from models.errors import InvalidParameterError
from services.radial import RadialIntegrals, hydrogen_radial_element, inner_turning_point, numerov_wavefunctions


def test_hydrogen_element_formula():
    assert hydrogen_radial_element(10, 4) == pytest.approx(1.5 * 10 * np.sqrt(84.0))
    with pytest.raises(InvalidParameterError):
        hydrogen_radial_element(10, 10)


def test_numerov_matches_exact_hydrogen_element():
    integrals = RadialIntegrals(((10, 3, 10.0), (10, 4, 10.0)))
    value = integrals.numerov_element(10.0, 3, 10.0, 4)
    assert value == pytest.approx(hydrogen_radial_element(10, 4), rel=2e-3)


def test_numerov_wavefunction_is_normalized_with_radial_nodes():
    x, y = numerov_wavefunctions([10.0], [3])
    step = x[1] - x[0]
    assert 2.0 * step * np.sum(y[:, 0] ** 2 * x ** 2) == pytest.approx(1.0)
    allowed = x ** 2 >= inner_turning_point(np.array(10.0), np.array(3.0))
    values = y[allowed, 0]
    values = values[values != 0.0]
    sign_changes = np.count_nonzero(np.diff(np.sign(values)) != 0)
    assert sign_changes == 10 - 3 - 1


def test_numerov_rejects_unbound_quantum_numbers():
    with pytest.raises(InvalidParameterError):
        numerov_wavefunctions([3.0], [3])
    with pytest.raises(InvalidParameterError):
        numerov_wavefunctions([10.0, 11.0], [2])


def test_element_uses_exact_formula_within_a_hydrogenic_manifold():
    integrals = RadialIntegrals(((12, 5, 12.0), (12, 6, 12.0)))
    assert not integrals.needs_numerov
    assert integrals.element((12, 5, 12.0), (12, 6, 12.0)) == hydrogen_radial_element(12, 6)


def test_element_is_symmetric_and_needs_dipole_selection_rule():
    states = ((11, 2, 11 - 1.3471), (12, 3, 12 - 0.016532))
    integrals = RadialIntegrals(states)
    assert integrals.needs_numerov
    forward = integrals.element(states[0], states[1])
    backward = integrals.element(states[1], states[0])
    assert np.isfinite(forward)
    assert forward == pytest.approx(backward)
    with pytest.raises(InvalidParameterError):
        integrals.element((12, 3, 12.0), (12, 5, 12.0))
