"""Static spin Hamiltonian: zero-field splitting plus Zeeman term."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constants import G_E, MU_B


@dataclass(frozen=True)
class SpinOperators:
    Sx: np.ndarray
    Sy: np.ndarray
    Sz: np.ndarray

    def as_tuple(self):
        return self.Sx, self.Sy, self.Sz


@dataclass(frozen=True)
class EigenSystem:
    """Eigenvalues (ascending, cm^-1) and eigenvectors stored as columns."""

    energies: np.ndarray
    states: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.energies)

    def gaps(self) -> np.ndarray:
        """Matrix of transition energies ``E_b - E_a`` indexed ``[b, a]``."""
        return self.energies[:, None] - self.energies[None, :]

    def transform(self, op: np.ndarray) -> np.ndarray:
        """Express ``op`` (given in the |m_s> basis) in the eigenbasis."""
        return self.states.conj().T @ op @ self.states


@dataclass(frozen=True)
class SpinSystem:
    """Spin ``S`` with ZFS tensor (cm^-1), g tensor and field (T).

    The D tensor is symmetrized on construction; it is not made traceless.
    """

    spin_S: float
    D_tensor: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    g_tensor: np.ndarray = field(default_factory=lambda: G_E * np.eye(3))
    B_field: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        two_s = 2.0 * self.spin_S
        if self.spin_S < 0.5 or abs(two_s - round(two_s)) > 1e-12:
            raise ValueError(f"spin_S must be a positive multiple of 1/2, got {self.spin_S}")
        D = np.asarray(self.D_tensor, dtype=float)
        g = np.asarray(self.g_tensor, dtype=float)
        B = np.asarray(self.B_field, dtype=float)
        if D.shape != (3, 3) or g.shape != (3, 3) or B.shape != (3,):
            raise ValueError("D_tensor and g_tensor must be 3x3, B_field a 3-vector")
        object.__setattr__(self, "D_tensor", 0.5 * (D + D.T))
        object.__setattr__(self, "g_tensor", g)
        object.__setattr__(self, "B_field", B)

    @classmethod
    def from_axial(cls, spin_S, D, E=0.0, g=G_E, B_field=(0.0, 0.0, 0.0)):
        """Traceless D tensor ``diag(-D/3 + E, -D/3 - E, 2D/3)``."""
        D_tensor = np.diag([-D / 3.0 + E, -D / 3.0 - E, 2.0 * D / 3.0])
        g_tensor = np.asarray(g, dtype=float)
        if g_tensor.ndim == 0:
            g_tensor = float(g_tensor) * np.eye(3)
        return cls(spin_S, D_tensor, g_tensor, np.asarray(B_field, dtype=float))

    @property
    def dim(self) -> int:
        return int(round(2 * self.spin_S)) + 1


def spin_operators(spin_S: float) -> SpinOperators:
    """Angular momentum matrices in the |S, m> basis ordered m = S, S-1, ..., -S."""
    two_s = 2.0 * spin_S
    if spin_S < 0 or abs(two_s - round(two_s)) > 1e-12:
        raise ValueError(f"spin must be a non-negative multiple of 1/2, got {spin_S}")
    m = spin_S - np.arange(int(round(two_s)) + 1)
    # <m+1|S+|m> = sqrt(S(S+1) - m(m+1)); S+ sits on the first superdiagonal
    s_plus = np.diag(np.sqrt(spin_S * (spin_S + 1) - m[1:] * (m[1:] + 1)), 1).astype(complex)
    s_minus = s_plus.conj().T
    Sx = 0.5 * (s_plus + s_minus)
    Sy = -0.5j * (s_plus - s_minus)
    Sz = np.diag(m).astype(complex)
    return SpinOperators(Sx, Sy, Sz)


def quadratic_operators(spin_S: float) -> np.ndarray:
    """Array ``Q[i, j] = S_i S_j`` of shape (3, 3, d, d).

    ``sum_ij D_ij Q[i, j]`` is the operator ``S . D . S``.
    """
    ops = spin_operators(spin_S).as_tuple()
    return np.array([[si @ sj for sj in ops] for si in ops])


def tensor_operator(tensor, spin_S: float) -> np.ndarray:
    """Operator ``S . T . S`` for a 3x3 tensor ``T`` (or a stack of them)."""
    tensor = np.asarray(tensor)
    return np.einsum("...ij,ijab->...ab", tensor, quadratic_operators(spin_S))


def build_hamiltonian(system: SpinSystem) -> np.ndarray:
    """``H = S.D.S + mu_B S.g.B`` in cm^-1, basis ordered m = S ... -S."""
    ops = spin_operators(system.spin_S).as_tuple()
    H = tensor_operator(system.D_tensor, system.spin_S)
    gB = system.g_tensor @ system.B_field
    for S_i, field_i in zip(ops, gB):
        H = H + MU_B * field_i * S_i
    return 0.5 * (H + H.conj().T)


def eigensolve(H, atol: float = 1e-10) -> EigenSystem:
    """Diagonalize a Hermitian matrix.

    Each eigenvector is rephased so its largest-magnitude component is real
    and positive (ties go to the lowest index).
    """
    H = np.asarray(H, dtype=complex)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("Hamiltonian must be a square matrix")
    scale = max(np.abs(H).max(), 1.0)
    if np.abs(H - H.conj().T).max() > atol * scale:
        raise ValueError("Hamiltonian is not Hermitian")
    energies, states = np.linalg.eigh(0.5 * (H + H.conj().T))
    for k in range(states.shape[1]):
        col = states[:, k]
        pivot = np.argmax(np.round(np.abs(col), 12))
        states[:, k] = col * (abs(col[pivot]) / col[pivot])
    return EigenSystem(energies, states)


def state_index(eig: EigenSystem, m: float, spin_S: float) -> int:
    """Index of the eigenstate with the largest overlap on |m_s = m>."""
    row = int(round(spin_S - m))
    if not 0 <= row < eig.dim:
        raise ValueError(f"m_s = {m} is not a projection of spin {spin_S}")
    return int(np.argmax(np.abs(eig.states[row, :]) ** 2))


def axial_parameters(D_tensor) -> tuple[float, float]:
    """Axial ``D`` and rhombic ``E`` (cm^-1) of the traceless part of a ZFS tensor.

    The principal axis with the largest |eigenvalue| is taken as z, so that
    ``0 <= E <= |D|/3``.
    """
    D_tensor = np.asarray(D_tensor, dtype=float)
    traceless = 0.5 * (D_tensor + D_tensor.T) - np.trace(D_tensor) / 3.0 * np.eye(3)
    vals = np.linalg.eigvalsh(traceless)
    order = np.argsort(np.abs(vals))
    dx, dy, dz = vals[order]
    return 1.5 * dz, 0.5 * abs(dx - dy)
