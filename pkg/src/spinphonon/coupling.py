"""Spin-phonon coupling coefficients from grid-fitted ZFS tensors.

Cartesian derivatives of D come from least-squares cubic fits on 6-point
(1D) and 6x6 (2D) displacement grids; they are projected onto normal
coordinates with the mass-weighted Hessian eigenvectors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Callable

import numpy as np

from .constants import AMU_KG, HBAR_SI, TWO_PI_C
from .phonons import PhononSet

COUPLING_FORMAT = "SPINPHONON-COUPLINGS"
COUPLING_VERSION = 1
# independent components of a symmetric 3x3 tensor, in file order
SYM_INDEX = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
GRID_OFFSETS = np.array([-3.0, -2.0, -1.0, 1.0, 2.0, 3.0])
# exponents (m, n) of x^m y^n with m + n <= 3
CUBIC_2D_TERMS = [(m, n) for m in range(4) for n in range(4) if m + n <= 3]


@dataclass(frozen=True)
class Geometry:
    coordinates: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        xyz = np.asarray(self.coordinates, dtype=float)
        if xyz.ndim != 2 or xyz.shape[1] != 3 or xyz.shape[0] < 1:
            raise ValueError("coordinates must be an (n_atoms, 3) array")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("coordinates must be finite")
        object.__setattr__(self, "coordinates", xyz)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n_atoms(self) -> int:
        return self.coordinates.shape[0]

    def displaced(self, delta) -> "Geometry":
        """Copy shifted by a flat (3 n_atoms,) displacement vector in Angstrom."""
        return Geometry(self.coordinates + np.reshape(delta, self.coordinates.shape), self.labels)


DTensorEvaluator = Callable[[Geometry], np.ndarray]


def symmetrize(tensor):
    tensor = np.asarray(tensor, dtype=float)
    return 0.5 * (tensor + np.swapaxes(tensor, -1, -2))


def generate_distortions(geom: Geometry, amplitude: float, count: int, seed: int) -> list[Geometry]:
    """Random distortions with every coordinate shifted uniformly in [-amplitude, amplitude]."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    shifts = rng.uniform(-amplitude, amplitude, size=(count,) + geom.coordinates.shape)
    return [Geometry(geom.coordinates + s, geom.labels) for s in shifts]


def _lstsq(design, values):
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise np.linalg.LinAlgError("degenerate derivative grid: singular least-squares system")
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    return coef


def _evaluate(evaluator, geom, displacements):
    return np.array([symmetrize(evaluator(geom.displaced(d))) for d in displacements])


@dataclass(frozen=True)
class GridDerivatives:
    """Derivatives of all D components from one grid fit (each entry 3x3, cm^-1 / A^k)."""

    first: tuple
    second: dict = field(default_factory=dict)


def fit_grid_derivatives(evaluator: DTensorEvaluator, geom: Geometry, dofs, step: float = 0.01):
    """Fit D on a displacement grid spanned by one or two Cartesian DOFs.

    ``dofs=(i,)`` uses the 6 points ``{+-1, +-2, +-3} * step`` and a cubic in
    one variable. ``dofs=(i, j)`` uses the 6x6 product grid and the
    10-coefficient bivariate cubic. Returns :class:`GridDerivatives` whose
    ``second`` is keyed by ``(i, i)``, ``(j, j)``, ``(i, j)``.
    """
    if step <= 0:
        raise ValueError("grid step must be positive")
    dofs = tuple(int(i) for i in np.atleast_1d(dofs))
    n_dof = 3 * geom.n_atoms
    if not dofs or len(dofs) > 2 or any(not 0 <= i < n_dof for i in dofs):
        raise ValueError(f"dofs must be one or two indices below {n_dof}")
    if len(dofs) == 2 and dofs[0] == dofs[1]:
        raise ValueError("two-dimensional grid needs two distinct DOFs")
    # fit in units of step for conditioning, rescale afterwards
    u = GRID_OFFSETS
    if len(dofs) == 1:
        (i,) = dofs
        disp = np.zeros((u.size, n_dof))
        disp[:, i] = u * step
        values = _evaluate(evaluator, geom, disp).reshape(u.size, 9)
        design = np.vander(u, 4, increasing=True)
        a = _lstsq(design, values).reshape(4, 3, 3)
        return GridDerivatives((a[1] / step,), {(i, i): 2.0 * a[2] / step**2})
    i, j = dofs
    uu, vv = (g.ravel() for g in np.meshgrid(u, u, indexing="ij"))
    disp = np.zeros((uu.size, n_dof))
    disp[:, i] = uu * step
    disp[:, j] = vv * step
    values = _evaluate(evaluator, geom, disp).reshape(uu.size, 9)
    design = np.column_stack([uu**m * vv**n for m, n in CUBIC_2D_TERMS])
    coef = dict(zip(CUBIC_2D_TERMS, _lstsq(design, values).reshape(len(CUBIC_2D_TERMS), 3, 3)))
    second = {
        (i, i): 2.0 * coef[(2, 0)] / step**2,
        (j, j): 2.0 * coef[(0, 2)] / step**2,
        (i, j): coef[(1, 1)] / step**2,
    }
    return GridDerivatives((coef[(1, 0)] / step, coef[(0, 1)] / step), second)


def cartesian_derivatives(evaluator: DTensorEvaluator, geom: Geometry, step: float = 0.01,
                          second: bool = True, dofs=None):
    """All first (n_dof, 3, 3) and, optionally, second (n_dof, n_dof, 3, 3) derivatives.

    First derivatives and pure second derivatives come from the 1D grids,
    mixed second derivatives from the 2D grids.
    """
    n_dof = 3 * geom.n_atoms
    dofs = range(n_dof) if dofs is None else [int(i) for i in dofs]
    first = np.zeros((n_dof, 3, 3))
    hess = np.zeros((n_dof, n_dof, 3, 3)) if second else None
    for i in dofs:
        fit = fit_grid_derivatives(evaluator, geom, (i,), step)
        first[i] = fit.first[0]
        if second:
            hess[i, i] = fit.second[(i, i)]
    if second:
        for i, j in combinations_with_replacement(dofs, 2):
            if i == j:
                continue
            mixed = fit_grid_derivatives(evaluator, geom, (i, j), step).second[(i, j)]
            hess[i, j] = hess[j, i] = mixed
    return first, hess


def normal_mode_lengths(phonons: PhononSet) -> np.ndarray:
    """``sqrt(hbar / (omega_a m_i))`` in Angstrom, shape (3 n_atoms, n_modes)."""
    if phonons.n_modes and phonons.frequencies.min() < phonons.omega_min:
        raise ValueError("mode frequency below omega_min")
    omega = TWO_PI_C * phonons.frequencies  # rad / s
    mass = np.repeat(phonons.masses, 3) * AMU_KG
    return np.sqrt(HBAR_SI / (mass[:, None] * omega[None, :])) * 1e10


def mode_projector(phonons: PhononSet) -> np.ndarray:
    """Matrix ``M[i, a] = sqrt(hbar / (omega_a m_i)) L_ia`` (Angstrom)."""
    return normal_mode_lengths(phonons) * phonons.eigenvectors


def _check_rows(n_rows, phonons):
    if n_rows != phonons.eigenvectors.shape[0]:
        raise ValueError(
            f"derivatives cover {n_rows} DOFs but eigenvectors have "
            f"{phonons.eigenvectors.shape[0]} rows")


def cartesian_to_mode_first(cart, phonons: PhononSet) -> np.ndarray:
    """``dD/dq_a = sum_i sqrt(hbar/(omega_a m_i)) L_ia dD/dX_i``, shape (n_modes, 3, 3)."""
    cart = np.asarray(cart, dtype=float)
    _check_rows(cart.shape[0], phonons)
    return np.einsum("ia,ikl->akl", mode_projector(phonons), cart)


def _dense_hessian(cart2, n_dof):
    if isinstance(cart2, dict):
        dense = np.zeros((n_dof, n_dof, 3, 3))
        for (i, j), tensor in cart2.items():
            dense[i, j] = tensor
            dense[j, i] = tensor
        return dense
    return np.asarray(cart2, dtype=float)


def cartesian_to_mode_second(cart2, phonons: PhononSet, pairs=None):
    """Second derivatives in the mode basis for the requested ``(alpha, beta)`` pairs.

    ``cart2`` is either a dense (n_dof, n_dof, 3, 3) array or a sparse dict
    ``{(i, j): tensor}``. Without ``pairs`` every pair ``alpha <= beta`` is
    returned. Output is ``(pairs, tensors)``.
    """
    n_dof = phonons.eigenvectors.shape[0]
    dense = _dense_hessian(cart2, n_dof)
    _check_rows(dense.shape[0], phonons)
    M = mode_projector(phonons)
    if pairs is None:
        pairs = all_pairs(phonons.n_modes)
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    half = np.einsum("ia,ijkl->ajkl", M, dense)  # contract the first index once
    tensors = np.einsum("pj,pjkl->pkl", M[:, pairs[:, 1]].T, half[pairs[:, 0]])
    return pairs, tensors


def mode_to_cartesian_first(mode_first, phonons: PhononSet) -> np.ndarray:
    """Inverse of :func:`cartesian_to_mode_first` via the pseudo-inverse of the projector."""
    pinv = np.linalg.pinv(mode_projector(phonons).T)
    return np.einsum("ia,akl->ikl", pinv, np.asarray(mode_first))


def mode_to_cartesian_second(mode_second_dense, phonons: PhononSet) -> np.ndarray:
    pinv = np.linalg.pinv(mode_projector(phonons).T)
    return np.einsum("ia,jb,abkl->ijkl", pinv, pinv, np.asarray(mode_second_dense))


def all_pairs(n_modes: int) -> np.ndarray:
    a, b = np.triu_indices(n_modes)
    return np.column_stack([a, b])


def window_pairs(frequencies, max_gap: float) -> np.ndarray:
    """Pairs ``alpha <= beta`` with ``|omega_alpha - omega_beta| <= max_gap``."""
    freqs = np.asarray(frequencies, dtype=float)
    pairs = all_pairs(freqs.size)
    keep = np.abs(freqs[pairs[:, 0]] - freqs[pairs[:, 1]]) <= max_gap
    return pairs[keep]


@dataclass
class CouplingSet:
    """Mode-basis ZFS derivatives (cm^-1 per dimensionless normal coordinate).

    first : (n_modes, 3, 3)
    pairs : (n_pairs, 2) mode pairs with alpha <= beta that have second derivatives
    second : (n_pairs, 3, 3)
    mode_subset : original mode indices covered, if not all
    """

    first: np.ndarray
    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    second: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    mode_subset: np.ndarray | None = None

    def __post_init__(self):
        self.first = symmetrize(np.asarray(self.first, dtype=float).reshape(-1, 3, 3))
        pairs = np.asarray(self.pairs, dtype=int).reshape(-1, 2)
        second = symmetrize(np.asarray(self.second, dtype=float).reshape(-1, 3, 3))
        if pairs.shape[0] != second.shape[0]:
            raise ValueError("pairs and second derivatives differ in length")
        if pairs.size and (pairs.min() < 0 or pairs.max() >= self.n_modes):
            raise ValueError("pair index out of range")
        # canonical ordering alpha <= beta, sorted, no duplicates
        pairs = np.sort(pairs, axis=1)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs, second = pairs[order], second[order]
        if pairs.shape[0] > 1 and np.any(np.all(np.diff(pairs, axis=0) == 0, axis=1)):
            raise ValueError("duplicate mode pair in second derivatives")
        self.pairs, self.second = pairs, second

    @property
    def n_modes(self) -> int:
        return self.first.shape[0]

    @property
    def has_second(self) -> bool:
        return self.pairs.shape[0] > 0

    def pair_lookup(self) -> dict:
        return {(int(a), int(b)): k for k, (a, b) in enumerate(self.pairs)}

    def second_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_modes, self.n_modes, 3, 3))
        dense[self.pairs[:, 0], self.pairs[:, 1]] = self.second
        dense[self.pairs[:, 1], self.pairs[:, 0]] = self.second
        return dense

    def scaled(self, first=1.0, second=1.0) -> "CouplingSet":
        return CouplingSet(self.first * first, self.pairs, self.second * second, self.mode_subset)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.first, self.pairs, self.second):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def mode_couplings(first_cart, phonons: PhononSet, second_cart=None, pairs=None,
                   max_gap: float | None = None) -> CouplingSet:
    """Project Cartesian derivatives onto modes.

    Second derivatives are computed for ``pairs`` if given, else for pairs
    within ``max_gap`` cm^-1 of each other, else for every pair.
    """
    first = cartesian_to_mode_first(first_cart, phonons)
    if second_cart is None:
        return CouplingSet(first, mode_subset=phonons.mode_indices)
    if pairs is None and max_gap is not None:
        pairs = window_pairs(phonons.frequencies, max_gap)
    pairs, second = cartesian_to_mode_second(second_cart, phonons, pairs)
    return CouplingSet(first, pairs, second, phonons.mode_indices)


def expand_cluster(cart, index_map, n_atoms_cell: int, order: int = 1):
    """Scatter cluster-atom derivatives onto supercell DOF rows.

    ``index_map[k]`` is the supercell atom matching cluster atom ``k``; atoms
    of the cell outside the cluster get zero derivatives.
    """
    index_map = np.asarray(index_map, dtype=int)
    rows = (3 * index_map[:, None] + np.arange(3)).ravel()
    n_dof = 3 * n_atoms_cell
    cart = np.asarray(cart, dtype=float)
    if cart.shape[0] != rows.size:
        raise ValueError(f"index map covers {rows.size} DOFs, derivatives have {cart.shape[0]}")
    if rows.max(initial=-1) >= n_dof:
        raise ValueError("index map refers to atoms outside the supercell")
    if order == 1:
        out = np.zeros((n_dof, 3, 3))
        out[rows] = cart
    else:
        out = np.zeros((n_dof, n_dof, 3, 3))
        out[np.ix_(rows, rows)] = cart
    return out


def _fmt_tensor(t):
    return " ".join(f"{t[i, j]:.17g}" for i, j in SYM_INDEX)


def _parse_tensor(values):
    t = np.zeros((3, 3))
    for v, (i, j) in zip(values, SYM_INDEX):
        t[i, j] = t[j, i] = v
    return t


def save_couplings(path, couplings: CouplingSet) -> None:
    """Text format: header, ``FIRST`` block (one mode per line), ``SECOND`` block
    (``alpha beta`` followed by the 6 components xx yy zz xy xz yz)."""
    out = [f"{COUPLING_FORMAT} {COUPLING_VERSION}",
           f"n_modes {couplings.n_modes}",
           f"has_second {int(couplings.has_second)}",
           f"n_pairs {couplings.pairs.shape[0]}"]
    if couplings.mode_subset is not None:
        out.append("mode_subset " + " ".join(str(int(k)) for k in couplings.mode_subset))
    out.append("FIRST")
    out += [f"{a} {_fmt_tensor(t)}" for a, t in enumerate(couplings.first)]
    out.append("SECOND")
    out += [f"{a} {b} {_fmt_tensor(t)}" for (a, b), t in zip(couplings.pairs, couplings.second)]
    Path(path).write_text("\n".join(out) + "\n")


def load_couplings(path) -> CouplingSet:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    lines = [(k + 1, ln) for k, ln in enumerate(lines) if ln and not ln.startswith("#")]

    def fail(lineno, msg):
        raise ValueError(f"{path}:{lineno}: {msg}")

    if not lines or lines[0][1].split() != [COUPLING_FORMAT, str(COUPLING_VERSION)]:
        fail(lines[0][0] if lines else 1, "not a version-1 coupling file")
    header, pos = {}, 1
    while pos < len(lines) and lines[pos][1] != "FIRST":
        lineno, text = lines[pos]
        key, *rest = text.split()
        header[key] = rest
        pos += 1
    try:
        n_modes = int(header["n_modes"][0])
        n_pairs = int(header["n_pairs"][0])
    except (KeyError, IndexError, ValueError):
        fail(lines[min(pos, len(lines) - 1)][0], "missing n_modes / n_pairs header")
    subset = np.array([int(k) for k in header["mode_subset"]]) if "mode_subset" in header else None
    first_lines = lines[pos + 1: pos + 1 + n_modes]
    second_pos = pos + 1 + n_modes
    if second_pos >= len(lines) or lines[second_pos][1] != "SECOND":
        fail(lines[min(second_pos, len(lines) - 1)][0], "expected SECOND section")
    second_lines = lines[second_pos + 1:]
    if len(second_lines) != n_pairs:
        fail(lines[-1][0], f"expected {n_pairs} pair records, found {len(second_lines)}")
    first = np.zeros((n_modes, 3, 3))
    for k, (lineno, text) in enumerate(first_lines):
        parts = text.split()
        if len(parts) != 7 or int(parts[0]) != k:
            fail(lineno, "malformed first-derivative record")
        first[k] = _parse_tensor([float(v) for v in parts[1:]])
    pairs = np.zeros((n_pairs, 2), dtype=int)
    second = np.zeros((n_pairs, 3, 3))
    for k, (lineno, text) in enumerate(second_lines):
        parts = text.split()
        if len(parts) != 8:
            fail(lineno, "malformed second-derivative record")
        pairs[k] = int(parts[0]), int(parts[1])
        second[k] = _parse_tensor([float(v) for v in parts[2:]])
    return CouplingSet(first, pairs, second, subset)
