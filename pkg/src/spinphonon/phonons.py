"""Harmonic phonon bath: mode data, Bose statistics, smeared deltas and spectra."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constants import K_B

logger = logging.getLogger(__name__)

PHONON_FORMAT = "SPINPHONON-PHONONS"
PHONON_VERSION = 1
ORTHONORMAL_TOL = 1e-8


class PhononFormatError(ValueError):
    """Malformed phonon file; the message carries the offending line number."""


@dataclass(frozen=True)
class PhononSet:
    """Gamma-point modes.

    frequencies : (n_modes,) cm^-1
    eigenvectors : (3 n_atoms, n_modes) mass-weighted Hessian eigenvectors
    masses : (n_atoms,) amu
    mode_indices : original index of each retained mode in the source file
    """

    frequencies: np.ndarray
    eigenvectors: np.ndarray
    masses: np.ndarray
    omega_min: float = 1.0
    mode_indices: np.ndarray | None = None

    def __post_init__(self):
        freqs = np.asarray(self.frequencies, dtype=float).reshape(-1)
        vecs = np.asarray(self.eigenvectors, dtype=float)
        masses = np.asarray(self.masses, dtype=float).reshape(-1)
        if vecs.ndim != 2 or vecs.shape[1] != freqs.size or vecs.shape[0] != 3 * masses.size:
            raise ValueError(
                f"eigenvectors must be (3*n_atoms, n_modes) = ({3 * masses.size}, {freqs.size}), "
                f"got {vecs.shape}")
        if self.omega_min <= 0:
            raise ValueError("omega_min must be positive")
        if freqs.size and freqs.min() < self.omega_min:
            raise ValueError(f"mode frequency {freqs.min()} below omega_min {self.omega_min}")
        idx = np.arange(freqs.size) if self.mode_indices is None else np.asarray(self.mode_indices)
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "eigenvectors", vecs)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "mode_indices", idx)

    @property
    def n_modes(self) -> int:
        return self.frequencies.size

    @property
    def n_atoms(self) -> int:
        return self.masses.size

    def subset(self, keep) -> "PhononSet":
        keep = np.asarray(keep)
        return PhononSet(self.frequencies[keep], self.eigenvectors[:, keep], self.masses,
                         self.omega_min, self.mode_indices[keep])


def model_bath(frequencies, omega_min: float = 1.0) -> PhononSet:
    """Bath of independent modes with unit masses and trivial eigenvectors.

    Used when couplings are supplied directly in the mode basis.
    """
    freqs = np.asarray(frequencies, dtype=float)
    n_atoms = -(-freqs.size // 3)
    vecs = np.eye(3 * n_atoms)[:, : freqs.size]
    return PhononSet(freqs, vecs, np.ones(n_atoms), omega_min)


def check_orthonormal(eigenvectors, tol: float = ORTHONORMAL_TOL) -> None:
    vecs = np.asarray(eigenvectors, dtype=float)
    err = np.abs(vecs.T @ vecs - np.eye(vecs.shape[1]))
    if err.size and err.max() > tol:
        bad = np.unravel_index(np.argmax(err), err.shape)
        raise ValueError(
            f"eigenvector columns not orthonormal: |L^T L - 1| = {err.max():.3e} at modes {bad}")


def _validated(freqs, vecs, masses, omega_min) -> PhononSet:
    freqs = np.asarray(freqs, dtype=float)
    negative = np.flatnonzero(freqs < 0)
    if negative.size:
        raise ValueError(f"imaginary (negative) frequency {freqs[negative[0]]} at mode {negative[0]}")
    check_orthonormal(vecs)
    keep = np.flatnonzero(freqs >= omega_min)
    dropped = freqs.size - keep.size
    if dropped:
        logger.info("dropped %d mode(s) below omega_min = %g cm^-1", dropped, omega_min)
    return PhononSet(freqs[keep], np.asarray(vecs)[:, keep], masses, omega_min, keep)


def load_phonons(path, omega_min: float = 1.0) -> PhononSet:
    """Read the plain-text phonon format.

    ::

        SPINPHONON-PHONONS 1
        n_atoms <N>
        n_modes <M>
        MASSES
        <m_1>            (amu, one per line)
        MODES
        <freq_cm1> <L_1x> <L_1y> <L_1z> <L_2x> ...   (one line per mode)

    Blank lines and ``#`` comments are ignored.
    """
    lines = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if text:
            lines.append((lineno, text))

    def fail(lineno, msg):
        raise PhononFormatError(f"{path}:{lineno}: {msg}")

    if not lines:
        raise PhononFormatError(f"{path}: empty phonon file")
    it = iter(lines)
    lineno, text = next(it)
    head = text.split()
    if len(head) != 2 or head[0] != PHONON_FORMAT:
        fail(lineno, f"expected '{PHONON_FORMAT} <version>' header")
    if head[1] != str(PHONON_VERSION):
        fail(lineno, f"unsupported phonon format version {head[1]}")

    def keyed_int(key):
        try:
            lineno, text = next(it)
        except StopIteration:
            raise PhononFormatError(f"{path}: unexpected end of file, expected '{key}'") from None
        parts = text.split()
        if len(parts) != 2 or parts[0] != key:
            fail(lineno, f"expected '{key} <int>'")
        try:
            value = int(parts[1])
        except ValueError:
            fail(lineno, f"'{parts[1]}' is not an integer")
        if value < 1:
            fail(lineno, f"{key} must be positive")
        return value

    def section(name):
        try:
            lineno, text = next(it)
        except StopIteration:
            raise PhononFormatError(f"{path}: unexpected end of file, expected {name}") from None
        if text != name:
            fail(lineno, f"expected section '{name}'")

    def numbers(count):
        try:
            lineno, text = next(it)
        except StopIteration:
            raise PhononFormatError(f"{path}: unexpected end of file") from None
        parts = text.split()
        if len(parts) != count:
            fail(lineno, f"expected {count} values, found {len(parts)}")
        try:
            return np.array([float(p) for p in parts])
        except ValueError as exc:
            fail(lineno, str(exc))

    n_atoms = keyed_int("n_atoms")
    n_modes = keyed_int("n_modes")
    section("MASSES")
    masses = np.array([numbers(1)[0] for _ in range(n_atoms)])
    if np.any(masses <= 0):
        raise PhononFormatError(f"{path}: masses must be positive")
    section("MODES")
    rows = np.array([numbers(1 + 3 * n_atoms) for _ in range(n_modes)])
    extra = next(it, None)
    if extra is not None:
        fail(extra[0], "trailing content after the last mode")
    return _validated(rows[:, 0], rows[:, 1:].T, masses, omega_min)


def write_phonons(path, frequencies, eigenvectors, masses) -> None:
    freqs = np.asarray(frequencies, dtype=float)
    vecs = np.asarray(eigenvectors, dtype=float)
    masses = np.asarray(masses, dtype=float)
    out = [f"{PHONON_FORMAT} {PHONON_VERSION}", f"n_atoms {masses.size}", f"n_modes {freqs.size}",
           "MASSES"]
    out += [f"{m:.17g}" for m in masses]
    out.append("MODES")
    for k, w in enumerate(freqs):
        out.append(" ".join(f"{x:.17g}" for x in (w, *vecs[:, k])))
    Path(path).write_text("\n".join(out) + "\n")


def load_phonons_csv(frequency_csv, displacement_csv, masses, omega_min: float = 1.0) -> PhononSet:
    """Converter for a generic pair of CSV files.

    ``frequency_csv`` holds one frequency (cm^-1) per row, ``displacement_csv``
    the (3 n_atoms, n_modes) eigenvector matrix. Masses are passed in amu.
    """
    freqs = np.loadtxt(frequency_csv, delimiter=",", ndmin=1)
    vecs = np.loadtxt(displacement_csv, delimiter=",", ndmin=2)
    return _validated(freqs, vecs, np.asarray(masses, dtype=float), omega_min)


def bose_occupation(omega, T):
    """Bose-Einstein occupation ``1 / (exp(omega / k_B T) - 1)``; zero at ``T = 0``."""
    omega = np.asarray(omega, dtype=float)
    T = np.asarray(T, dtype=float)
    if np.any(omega <= 0):
        raise ValueError("bose_occupation requires omega > 0")
    if np.any(T < 0):
        raise ValueError("temperature must be non-negative")
    with np.errstate(divide="ignore", over="ignore"):
        x = np.where(T > 0, omega / (K_B * np.where(T > 0, T, 1.0)), np.inf)
        n = 1.0 / np.expm1(x)
    return n if n.ndim else float(n)


def smeared_delta(x, eta: float, kind: str = "gaussian"):
    """Unit-area broadened delta function of width ``eta`` (cm^-1), in 1/cm^-1."""
    if eta <= 0:
        raise ValueError("smearing width eta must be positive")
    x = np.asarray(x, dtype=float)
    if kind == "gaussian":
        out = np.exp(-0.5 * (x / eta) ** 2) / (eta * np.sqrt(2.0 * np.pi))
    elif kind == "lorentzian":
        out = (eta / np.pi) / (x * x + eta * eta)
    else:
        raise ValueError(f"unknown smearing kind {kind!r}")
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class SpectralGrid:
    omega_grid: np.ndarray
    values: np.ndarray
    eta: float

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.omega_grid))


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("omega grid must be strictly ascending with at least two points")
    return grid


def _broadened_sum(grid, centers, weights, eta, kind):
    out = np.zeros_like(grid)
    for w0, wt in zip(centers, weights):
        out += wt * smeared_delta(grid - w0, eta, kind)
    return out


def phonon_dos(phonons: PhononSet, grid, eta: float, kind: str = "gaussian") -> SpectralGrid:
    """Density of states ``sum_a delta(omega - omega_a)`` in modes per cm^-1."""
    if phonons.n_modes == 0:
        raise ValueError("phonon set has no modes")
    grid = _check_grid(grid)
    values = _broadened_sum(grid, phonons.frequencies, np.ones(phonons.n_modes), eta, kind)
    return SpectralGrid(grid, values, eta)


def coupling_density(couplings, phonons: PhononSet, grid, eta: float,
                     kind: str = "gaussian") -> SpectralGrid:
    """Spin-phonon coupling density ``V(omega) = sum_a |dD/dq_a|_F^2 delta(omega - omega_a)``."""
    first = np.asarray(couplings.first)
    if first.shape[0] != phonons.n_modes:
        raise ValueError(
            f"coupling set has {first.shape[0]} modes, phonon set has {phonons.n_modes}")
    grid = _check_grid(grid)
    weights = np.sum(first ** 2, axis=(1, 2))
    values = _broadened_sum(grid, phonons.frequencies, weights, eta, kind)
    return SpectralGrid(grid, values, eta)
