"""
Utility functions shared by the services and the CLI.

File helpers (JSON, CSV, INI), environment defaults, logging setup and a
small ordered parallel map used by the sweeps.
"""

import configparser
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, TypeVar

import numpy as np
from dotenv import load_dotenv

import constants
from models.errors import ConfigError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for a CLI invocation.

    Args:
        level: Explicit level name; falls back to the environment, then to constants.LOG_LEVEL
    """
    load_dotenv()
    name = (level or os.getenv(constants.ENV_LOG_LEVEL) or constants.LOG_LEVEL).upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format=constants.LOG_FORMAT,
        datefmt=constants.LOG_DATE_FORMAT,
        force=True,
    )


def env_default(name: str, fallback):
    """Read an environment override, coerced to the type of ``fallback``."""
    load_dotenv()
    raw = os.getenv(name)
    if raw is None or raw == "":
        return fallback
    try:
        return type(fallback)(raw)
    except ValueError as e:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from e


def parallel_map(func: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """Map ``func`` over ``items``, results in input order.

    Args:
        func: Pure function of one item
        items: Work items
        workers: Thread count; 1 runs inline

    Returns:
        List of results, merged by item index
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def hermiticity_error(matrix: np.ndarray) -> float:
    """max |H - H^dagger| relative to the spectral norm of H."""
    scale = np.linalg.norm(matrix, 2)
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(matrix - matrix.conj().T)) / scale)


def save_json_file(file_path: Path, data: Dict) -> bool:
    """
    Save data to a JSON file.

    Args:
        file_path: Path to the JSON file
        data: Dictionary to save

    Returns:
        True if successful, False otherwise
    """
    try:
        file_path.parent.mkdir(parents=True, exist_ok=True)

        with open(file_path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        return True
    except (IOError, TypeError) as e:
        logger.warning("Error saving JSON file %s: %s", file_path, e)
        return False


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, complex):
        return {"real": value.real, "imag": value.imag}
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def write_csv(file_path: Path, header: Sequence[str], columns: Sequence[np.ndarray]) -> Path:
    """Write equal-length columns as CSV with a fixed float format."""
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    file_path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(file_path, data, delimiter=",", header=",".join(header), comments="", fmt=constants.CSV_FLOAT_FORMAT)
    return file_path


def read_csv(file_path: Path) -> Dict[str, np.ndarray]:
    """Read a CSV written by ``write_csv`` into named columns."""
    with open(file_path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
    data = np.loadtxt(file_path, delimiter=",", skiprows=1, ndmin=2)
    return {name: data[:, k] for k, name in enumerate(header)}


def read_ini(file_path: Path) -> Dict[str, Dict[str, str]]:
    """Read an INI file into a dict of sections; keys keep their case."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"cannot read config {file_path}: {e}") from e
    return {section: dict(parser.items(section)) for section in parser.sections()}


def read_key_value_table(file_path: Path) -> Dict[str, str]:
    """Read ``key = value`` lines, ignoring blanks and ``#`` comments."""
    table = {}
    try:
        lines = Path(file_path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read {file_path}: {e}") from e
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{file_path}:{number}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        table[key] = value
    return table
