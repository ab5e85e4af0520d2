"""
Radial dipole integrals for Rydberg states with quantum defects.

Wavefunctions are integrated inward with Numerov's method in the scaled
coordinate x = sqrt(r / a0), where the radial equation for Y = P / sqrt(x)
reads Y'' = g(x) Y with

    g(x) = (2l + 1/2)(2l + 3/2) / x^2 - 8 + 4 x^2 / n*^2.

All states requested together share one grid and are integrated as the
columns of a single array.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple

import numpy as np

import constants
from models.errors import InvalidParameterError

logger = logging.getLogger(__name__)

StateKey = Tuple[float, int]


def hydrogen_radial_element(n: int, l_upper: int) -> float:
    """<n, l_upper - 1 | r | n, l_upper> in units of a0 for hydrogen.

    Sign follows the Numerov convention of this module (outermost lobe
    positive), for which the within-manifold element is positive.
    """
    if not 0 < l_upper < n:
        raise InvalidParameterError(f"need 0 < l < n, got n={n}, l={l_upper}")
    return 1.5 * n * math.sqrt(n * n - l_upper * l_upper)


def inner_turning_point(n_eff: np.ndarray, l: np.ndarray) -> np.ndarray:  # noqa: E741
    """Classical inner turning point in a0 (zero for l = 0)."""
    ratio = np.clip(l * (l + 1.0) / n_eff ** 2, 0.0, 1.0)
    return n_eff ** 2 * (1.0 - np.sqrt(1.0 - ratio))


def numerov_wavefunctions(
    n_eff: Iterable[float],
    l: Iterable[int],  # noqa: E741
    step: float = constants.RADIAL_STEP,
) -> Tuple[np.ndarray, np.ndarray]:
    """Integrate a batch of radial functions on a shared scaled grid.

    Args:
        n_eff: Effective principal quantum numbers
        l: Orbital quantum numbers
        step: Grid step in x

    Returns:
        (x, Y) with Y of shape (len(x), number of states), normalized so that
        2 * sum(Y^2 x^2) * step = 1
    """
    n_eff = np.atleast_1d(np.asarray(list(n_eff), dtype=float))
    ls = np.atleast_1d(np.asarray(list(l), dtype=float))
    if n_eff.shape != ls.shape:
        raise InvalidParameterError("n_eff and l must have the same length")
    if np.any(n_eff <= ls):
        raise InvalidParameterError("effective quantum numbers must exceed l")

    x_out = np.sqrt(2.0 * n_eff * (n_eff + constants.RADIAL_OUTER_PADDING))
    x = step * np.arange(1, int(math.ceil(x_out.max() / step)) + 4)
    size, count = x.size, n_eff.size
    start = np.minimum(np.ceil(x_out / step).astype(int), size - 2)
    x_stop_sq = inner_turning_point(n_eff, ls)
    kappa = (2.0 * ls + 0.5) * (2.0 * ls + 1.5)
    h12 = step * step / 12.0

    def g(index: int) -> np.ndarray:
        xi = x[index]
        return kappa / (xi * xi) - 8.0 + 4.0 * xi * xi / (n_eff * n_eff)

    y = np.zeros((size, count))
    alive = np.ones(count, dtype=bool)
    g_next = g(size - 1)
    g_here = g(size - 2)
    for k in range(size - 2, 0, -1):
        g_prev = g(k - 1)
        seed = k == start
        y[k - 1, seed] = constants.RADIAL_SEED
        active = alive & (k < start)
        if np.any(active):
            numer = 2.0 * y[k, active] * (1.0 + 5.0 * h12 * g_here[active]) - y[k + 1, active] * (
                1.0 - h12 * g_next[active]
            )
            value = numer / (1.0 - h12 * g_prev[active])
            inside = x[k - 1] ** 2 < x_stop_sq[active]
            diverging = inside & (np.abs(value) > np.abs(y[k, active]))
            value[diverging] = 0.0
            y[k - 1, active] = value
            idx = np.flatnonzero(active)
            alive[idx[diverging]] = False
        g_next, g_here = g_here, g_prev

    norm = 2.0 * step * np.sum(y * y * (x * x)[:, None], axis=0)
    if np.any(~np.isfinite(norm)) or np.any(norm <= 0.0):
        raise InvalidParameterError("radial integration produced a non-normalizable function")
    y /= np.sqrt(norm)
    logger.debug("Integrated %d radial functions on %d grid points", count, size)
    return x, y


@dataclass
class RadialIntegrals:
    """Radial matrix elements <n l | r | n' l'> in a0 for one basis.

    Pairs of hydrogenic states in the same manifold use the exact formula;
    everything else is evaluated from Numerov wavefunctions.
    """

    states: Tuple[Tuple[int, int, float], ...]  # (n, l, n_eff)
    step: float = constants.RADIAL_STEP
    _columns: Dict[StateKey, int] = field(init=False, default_factory=dict)
    _x: np.ndarray = field(init=False, default=None)
    _y: np.ndarray = field(init=False, default=None)

    def _ensure_wavefunctions(self) -> None:
        if self._y is not None:
            return
        keys = sorted({(round(n_eff, 12), l) for _, l, n_eff in self.states})
        self._columns = {key: k for k, key in enumerate(keys)}
        self._x, self._y = numerov_wavefunctions([k[0] for k in keys], [k[1] for k in keys], self.step)

    @staticmethod
    def _is_hydrogenic(n_eff: float) -> bool:
        return abs(n_eff - round(n_eff)) < 1e-12

    def numerov_element(self, n_eff_a: float, l_a: int, n_eff_b: float, l_b: int) -> float:
        self._ensure_wavefunctions()
        ya = self._y[:, self._columns[(round(n_eff_a, 12), l_a)]]
        yb = self._y[:, self._columns[(round(n_eff_b, 12), l_b)]]
        return float(2.0 * self.step * np.sum(ya * yb * self._x ** 4))

    def element(self, a: Tuple[int, int, float], b: Tuple[int, int, float]) -> float:
        n_a, l_a, eff_a = a
        n_b, l_b, eff_b = b
        if abs(l_a - l_b) != 1:
            raise InvalidParameterError("dipole radial elements need |l - l'| = 1")
        if n_a == n_b and self._is_hydrogenic(eff_a) and self._is_hydrogenic(eff_b):
            return hydrogen_radial_element(n_a, max(l_a, l_b))
        return self.numerov_element(eff_a, l_a, eff_b, l_b)

    @property
    def needs_numerov(self) -> bool:
        ns = {n for n, _, _ in self.states}
        return len(ns) > 1 or not all(self._is_hydrogenic(eff) for _, _, eff in self.states)
