"""Built-in synthetic baths and analytic D-tensor functions.

These let every workflow run without electronic-structure input. The baths
carry couplings directly in the mode basis (see :func:`model_bath`).
"""

from __future__ import annotations

import numpy as np

from .coupling import CouplingSet, Geometry, symmetrize, window_pairs
from .phonons import PhononSet, model_bath

# second-derivative directions: xz / yz drive |Delta m_s| = 1 transfer,
# zz modulates the |0> / |+-1> splitting (pure dephasing only)
_TRANSFER = np.zeros((2, 3, 3))
_TRANSFER[0, 0, 2] = _TRANSFER[0, 2, 0] = 1.0
_TRANSFER[1, 1, 2] = _TRANSFER[1, 2, 1] = 1.0
_ZZ = np.zeros((3, 3))
_ZZ[2, 2] = 1.0


def axial_tensor(xz=0.0, yz=0.0, zz=0.0, xx_yy=0.0, xy=0.0):
    """Symmetric tensor from its xz, yz, zz, (xx - yy)/2 and xy parts."""
    t = xz * _TRANSFER[0] + yz * _TRANSFER[1] + zz * _ZZ
    t[0, 0] += xx_yy
    t[1, 1] -= xx_yy
    t[0, 1] = t[1, 0] = xy
    return t


def _random_tensors(rng, n, scale=1.0, dephasing=1.0, flip=0.0):
    """Random symmetric tensors; ``flip`` weights the |Delta m_s| = 2 parts."""
    parts = rng.normal(size=(n, 5))
    return scale * np.array([axial_tensor(p[0], p[1], dephasing * p[2], flip * p[3], flip * p[4])
                             for p in parts])


def degenerate_pair_bath(energies, strengths, seed=0, omega_min=1.0, dephasing=1.0):
    """Two degenerate modes at each energy; only intra-group pairs couple.

    A group at energy ``e`` contributes ``strength^2 n(e) (n(e) + 1)`` to the
    Raman rates.
    """
    rng = np.random.default_rng(seed)
    freqs = np.repeat(np.asarray(energies, dtype=float), 2)
    pairs, tensors = [], []
    for g, s in enumerate(strengths):
        a, b = 2 * g, 2 * g + 1
        for p in ((a, a), (a, b), (b, b)):
            pairs.append(p)
        tensors.extend(_random_tensors(rng, 3, s, dephasing))
    phonons = model_bath(freqs, omega_min)
    first = 0.1 * _random_tensors(rng, freqs.size)
    return phonons, CouplingSet(first, pairs, tensors)


def two_mode_bath(e1=326.0, e2=576.0, strength1=1.0, strength2=1.0, seed=0):
    return degenerate_pair_bath([e1, e2], [strength1, strength2], seed)


def low_mode_bath(energy=20.0, strength=1.0, seed=0):
    return degenerate_pair_bath([energy], [strength], seed)


def dense_bath(n_modes=200, omega_lo=60.0, omega_hi=260.0, window=None, scale=1e-3, flip=0.3,
               seed=0, omega_min=1.0):
    """Quasi-continuous bath with Debye-like density ``rho ~ omega^2`` on
    [omega_lo, omega_hi] and random couplings for every pair closer than
    ``window`` cm^-1 (all pairs if ``window`` is None)."""
    rng = np.random.default_rng(seed)
    u = (np.arange(n_modes) + 0.5) / n_modes
    freqs = (omega_lo**3 + u * (omega_hi**3 - omega_lo**3)) ** (1.0 / 3.0)
    phonons = model_bath(freqs, omega_min)
    pairs = window_pairs(freqs, np.inf if window is None else window)
    tensors = _random_tensors(rng, pairs.shape[0], scale, flip=flip)
    first = _random_tensors(rng, n_modes, scale, flip=flip)
    return phonons, CouplingSet(first, pairs, tensors)


class PolynomialDTensor:
    """Analytic D(x) = D0 + sum_i A_i x_i + 1/2 sum_ij B_ij x_i x_j + sum_i C_i x_i^3.

    ``x`` is the flattened displacement from ``reference`` (Angstrom). The
    exact derivatives at the reference are ``A`` and ``B``.
    """

    def __init__(self, reference: Geometry, D0, A, B, C=None):
        self.reference = reference
        n = 3 * reference.n_atoms
        self.D0 = symmetrize(D0)
        self.A = symmetrize(np.asarray(A, dtype=float).reshape(n, 3, 3))
        B = symmetrize(np.asarray(B, dtype=float).reshape(n, n, 3, 3))
        self.B = 0.5 * (B + B.transpose(1, 0, 2, 3))
        self.C = np.zeros((n, 3, 3)) if C is None else symmetrize(np.asarray(C).reshape(n, 3, 3))

    @classmethod
    def random(cls, reference: Geometry, seed=0, scale=0.1):
        rng = np.random.default_rng(seed)
        n = 3 * reference.n_atoms
        D0 = axial_tensor(zz=0.092)
        return cls(reference, D0, scale * rng.normal(size=(n, 3, 3)),
                   scale * rng.normal(size=(n, n, 3, 3)), scale * rng.normal(size=(n, 3, 3)))

    @classmethod
    def zero(cls, reference: Geometry):
        n = 3 * reference.n_atoms
        return cls(reference, np.zeros((3, 3)), np.zeros((n, 3, 3)), np.zeros((n, n, 3, 3)))

    def __call__(self, geom: Geometry) -> np.ndarray:
        x = (geom.coordinates - self.reference.coordinates).ravel()
        return (self.D0 + np.einsum("i,ikl->kl", x, self.A)
                + 0.5 * np.einsum("i,j,ijkl->kl", x, x, self.B)
                + np.einsum("i,ikl->kl", x**3, self.C))


def toy_molecule(n_atoms=2, seed=0):
    """Reference geometry, masses and an orthonormal mode matrix for a small cluster.

    Frequencies are spread over 200-900 cm^-1; the eigenvectors are a random
    orthogonal matrix.
    """
    rng = np.random.default_rng(seed)
    coords = rng.normal(scale=1.5, size=(n_atoms, 3))
    n = 3 * n_atoms
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    q = q * np.sign(np.diag(r))
    freqs = np.linspace(200.0, 900.0, n)
    masses = rng.uniform(1.0, 16.0, size=n_atoms)
    return Geometry(coords), PhononSet(freqs, q, masses)


PRESETS = {
    "two_mode": two_mode_bath,
    "low_mode": low_mode_bath,
    "dense": dense_bath,
}
