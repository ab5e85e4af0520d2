"""
Defaults shared by the simulator, the calibration recipes and the CLI.

Physical constants come from scipy.constants (CODATA). Everything else is a
tunable default: experiment parameters, numerical tolerances, placeholders for
detector calibration and optimizer settings.
"""

import math

from scipy import constants as codata

# Physical constants (SI)
ELEMENTARY_CHARGE = codata.e
BOHR_RADIUS = codata.physical_constants["Bohr radius"][0]
HBAR = codata.hbar
PLANCK = codata.h
HARTREE_ENERGY = codata.physical_constants["Hartree energy"][0]
# Atomic unit of electric field, V/m
ATOMIC_FIELD = HARTREE_ENERGY / (ELEMENTARY_CHARGE * BOHR_RADIUS)

TWO_PI = 2.0 * math.pi

# Unit conversions (multiply to get SI)
V_PER_CM = 100.0
MHZ = 1.0e6
KHZ = 1.0e3
US = 1.0e-6
NS = 1.0e-9

# Experiment defaults
RF_FREQUENCY = TWO_PI * 230.0 * MHZ  # rad/s
RABI_FREQUENCY = TWO_PI * 3.52 * MHZ  # rad/s, resonant transfer calibration
TRANSFER_MANIFOLD = 51
POLARIZATION_MANIFOLD = 52
RESONANT_FIELD = 2.35 * V_PER_CM  # omega_51 ~ omega_rf
POLARIZATION_FIELD = 1.76 * V_PER_CM  # i -> i' resonant at 230 MHz in n=52
PASSAGE_FIELD_START = 2.45 * V_PER_CM
PASSAGE_FIELD_END = 2.24 * V_PER_CM
PASSAGE_FIELD_RAMP = 1.5 * US
PASSAGE_RF_RISE = 1.0 * US
PASSAGE_RF_FALL = 1.0 * US
PASSAGE_RABI_FREQUENCY = TWO_PI * 3.5 * MHZ
PULSE_DURATION_CORRECTION = -68.0 * NS
RABI_SCAN_DURATION = 6.0 * US
RABI_SCAN_POINTS = 1201
SNAPSHOT_DURATIONS = (0.45 * US, 4.26 * US)
SIGMA_MINUS_RABI = TWO_PI * 107.0 * KHZ
SIGMA_PLUS_RABI = TWO_PI * 30.0 * MHZ

# Named levels reported in trajectories, in CSV column order
NAMED_LEVEL_ORDER = ("i", "i'", "j", "k", "l", "c", "d", "e", "f", "g")
# Ladder offsets of the named levels near the circular state (m = n - 1 - offset)
TOP_LADDER_LEVELS = {"c": 0, "d": 1, "e": 2, "f": 3, "g": 4}
# Low ladder levels at fixed m with n1 = 0
LOW_LADDER_LEVELS = {"j": 3, "k": 4, "l": 5}
INITIAL_LEVEL = {"hydrogen": "south", "rb": "i"}

# Rubidium quantum defects (j-averaged, leading Rydberg-Ritz term); l >= 4 hydrogenic
RUBIDIUM_DEFECTS = {0: 3.1311804, 1: 2.6505, 2: 1.3471, 3: 0.016532}
RUBIDIUM_HYDROGENIC_L = 4

# Stark basis
DEFAULT_WINDOW = 3  # manifolds, centred on n
DEFAULT_LADDER_DEPTH = 2  # in-band Stark states kept per m for the dynamics subspace
BAND_MARGIN = 1.5  # in units of hbar*omega_n beyond the hydrogenic band edge
WINDOW_CONVERGENCE_TOLERANCE = TWO_PI * 1.0 * MHZ  # rad/s
RESONANCE_TOLERANCE = TWO_PI * 1.0 * KHZ  # rad/s, mean ladder spacing vs omega_rf
RESONANCE_MAX_ITERATIONS = 12

# Radial integrals (scaled Numerov, x = sqrt(r / a0))
RADIAL_STEP = 0.01
RADIAL_OUTER_PADDING = 15.0  # r_out = 2 n* (n* + padding)
RADIAL_SEED = 1.0e-10

# Propagation
SUBSTEPS_PER_PERIOD = 50
NORM_TOLERANCE = 1.0e-9
NORM_ABORT = 1.0e-6
ADAPTIVE_RTOL = 1.0e-10
ADAPTIVE_ATOL = 1.0e-12
HERMITICITY_TOLERANCE = 1.0e-12

# Polarization procedure
ELECTRODE_COUNT = 4
ELECTRODE_PAIRS = ((0, 2), (1, 3))
# Feed-line phase per electrode in the ideal structure; electrodes 3 and 4 lag by a quarter period
ELECTRODE_LINE_PHASES = (0.0, 0.0, 0.5 * math.pi, 0.5 * math.pi)
IDEAL_FIELD_PER_DRIVE = 1.0  # V/m per unit drive amplitude
PHASE_GRID_POINTS = 16
PHASE_TOLERANCE = 1.0e-3  # rad
PHASE_POLISH_OFFSET = 0.1  # rad
POLARIZATION_PASSES = 1
MEASUREMENT_NOISE = 0.0  # relative sigma on measured Rabi frequencies
MEASUREMENT_REPEATS = 1
MONTE_CARLO_RUNS = 100
DEFAULT_DIPOLE = 1000.0 * ELEMENTARY_CHARGE * BOHR_RADIUS  # C m, used when no Stark map is supplied

# Detection
DETECTION_EFFICIENCY_RATIO = 0.23  # eta0 = D_c / D_i
ATOMS_PER_POINT = 100
# Ionization thresholds in arbitrary units, ordered by binding energy (placeholders)
IONIZATION_THRESHOLDS = {"south": 10.0, "i": 10.0, "i'": 10.5, "j": 11.0, "k": 11.5, "l": 12.0,
                         "g": 13.0, "f": 13.5, "e": 14.0, "d": 14.5, "c": 15.0}
IONIZATION_WIDTH = 0.3
IONIZATION_FIELD_UNIT = "arb."
AUTLER_TOWNES_LINEWIDTH = TWO_PI * 2.0 * MHZ  # rad/s, Gaussian sigma
PROBE_SPURIOUS_FRACTION = 0.0
PROBE_FG_SPLIT = 0.5
PASSAGE_MAP = {"i": "c", "j": "d", "k": "e", "l": "f"}

# Pulse optimization
OPT_SEGMENTS = 16
OPT_BUDGET = 400.0 * NS
OPT_OMEGA_MAX = TWO_PI * 10.0 * MHZ
OPT_DELTA_MAX = TWO_PI * 10.0 * MHZ
OPT_MIN_DURATION = 1.0 * NS
OPT_MAX_ITERATIONS = 500
OPT_GRADIENT_TOLERANCE = 1.0e-6
OPT_FIDELITY_TOLERANCE = 1.0e-8
OPT_ARMIJO = 1.0e-4
OPT_MAX_BACKTRACKS = 30
OPT_INITIAL_STEP = 0.05
OPT_STEP_BOUNDS = (1.0e-4, 1.0e4)
OPT_STARTS = 16
FINITE_DIFFERENCE_STEP = 1.0e-5  # relative to the bound of each variable

# Output
CSV_FLOAT_FORMAT = "%.10g"
SUMMARY_FILE = "summary.json"
ERROR_FILE = "error.json"
OUTPUT_DIR = "runs"
WORKERS = 1

# Logging Configuration
LOG_LEVEL = "INFO"  # Logging level: DEBUG, INFO, WARNING, ERROR, CRITICAL
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

# Environment overrides (read through python-dotenv)
ENV_LOG_LEVEL = "RYDBERG_LOG_LEVEL"
ENV_WORKERS = "RYDBERG_WORKERS"
ENV_OUTPUT_DIR = "RYDBERG_OUTPUT_DIR"
