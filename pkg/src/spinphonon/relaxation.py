"""Redfield rate generators for one- and two-phonon spin relaxation, secular
propagation of the reduced density matrix, and T1 / T2 extraction.

Energies enter in cm^-1 and every assembled rate is converted once to s^-1
with ``rate[s^-1] = 2 pi c * rate[cm^-1]``.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm
from scipy.optimize import least_squares

from .constants import K_B, TWO_PI_C
from .coupling import CouplingSet
from .phonons import PhononSet, smeared_delta
from .spin import EigenSystem, SpinSystem, build_hamiltonian, eigensolve, quadratic_operators, state_index

logger = logging.getLogger(__name__)

SCREEN_WIDTHS = 8.0  # pairs whose delta argument exceeds this many eta are skipped
CHUNK_SIZE = 1024  # fixed reduction chunks: results do not depend on the thread count
DENOMINATOR_FLOOR = 1e-10  # cm^-1, for unregularized fourth-order denominators
MONO_EXP_TOL = 1e-3


class IncompleteCouplingError(ValueError):
    """Second derivatives are missing for mode pairs inside the resonance window."""

    def __init__(self, missing):
        self.missing = [tuple(int(k) for k in p) for p in missing]
        shown = ", ".join(map(str, self.missing[:10]))
        more = "" if len(self.missing) <= 10 else f" ... ({len(self.missing)} total)"
        super().__init__(f"missing second derivatives for mode pairs {shown}{more}")


class SingularDenominatorError(ZeroDivisionError):
    pass


class NoDecayError(ValueError):
    pass


def default_threads() -> int:
    return max(1, int(os.environ.get("SPINPHONON_NUM_THREADS", "1")))


def _bose(omega, T):
    # omega > 0 assumed; T = 0 gives 0
    if T <= 0:
        return np.zeros_like(np.asarray(omega, dtype=float))
    with np.errstate(over="ignore"):
        return 1.0 / np.expm1(np.asarray(omega, dtype=float) / (K_B * T))


def _shell(omega_ba, omega_a, omega_b):
    """Mode energies moved onto the energy shell ``omega_a - omega_b = omega_ba``
    keeping their mean fixed."""
    mean = 0.5 * (omega_a + omega_b)
    shifted_a = mean + 0.5 * omega_ba
    shifted_b = mean - 0.5 * omega_ba
    if np.any(shifted_a <= 0) or np.any(shifted_b <= 0):
        raise ValueError("spin gap exceeds phonon energies; use balanced=False")
    return shifted_a, shifted_b


def g2ph(omega_ba, omega_a, omega_b, T, eta, kind="gaussian", balanced=False, channels="raman"):
    """Two-phonon kernel ``delta(omega_ba - omega_a + omega_b) n_a (n_b + 1)`` in 1/cm^-1.

    Mode ``a`` is absorbed and ``b`` emitted. With ``balanced=True`` the
    occupations are evaluated at frequencies moved onto the energy shell,
    which makes forward/backward ratios obey detailed balance exactly under
    finite smearing (identical to the bare kernel on resonance).
    ``channels="all"`` adds two-phonon absorption and emission.
    """
    omega_ba = np.asarray(omega_ba, dtype=float)
    omega_a = np.asarray(omega_a, dtype=float)
    omega_b = np.asarray(omega_b, dtype=float)
    if np.any(omega_a <= 0) or np.any(omega_b <= 0):
        raise ValueError("phonon frequencies must be positive")
    if np.any(np.asarray(T) < 0):
        raise ValueError("temperature must be non-negative")
    if balanced:
        shell_a, shell_b = _shell(omega_ba, omega_a, omega_b)
    else:
        shell_a, shell_b = omega_a, omega_b
    out = smeared_delta(omega_ba - omega_a + omega_b, eta, kind) * _bose(shell_a, T) * (_bose(shell_b, T) + 1.0)
    if channels == "all":
        n_a, n_b = _bose(omega_a, T), _bose(omega_b, T)
        out = out + smeared_delta(omega_ba - omega_a - omega_b, eta, kind) * n_a * n_b
        out = out + smeared_delta(omega_ba + omega_a + omega_b, eta, kind) * (n_a + 1) * (n_b + 1)
    elif channels != "raman":
        raise ValueError(f"unknown channel set {channels!r}")
    return out if np.ndim(out) else float(out)


@dataclass
class RateGenerator:
    """Secular Redfield generator in the eigenbasis of the spin Hamiltonian.

    ``population_rates[b, a]`` is the a -> b transfer rate (s^-1); columns sum
    to zero. ``dephasing_rates[a, b]`` is the pure-dephasing rate of the
    coherence between a and b.
    """

    population_rates: np.ndarray
    dephasing_rates: np.ndarray
    energies: np.ndarray
    provenance: tuple = ()

    @classmethod
    def from_transfer(cls, transfer, energies, dephasing=None, provenance=()):
        W = np.array(transfer, dtype=float)
        np.fill_diagonal(W, 0.0)
        if np.any(W < 0):
            raise ValueError("transfer rates must be non-negative")
        np.fill_diagonal(W, -W.sum(axis=0))
        d = W.shape[0]
        deph = np.zeros((d, d)) if dephasing is None else np.array(dephasing, dtype=float)
        np.fill_diagonal(deph, 0.0)
        return cls(W, 0.5 * (deph + deph.T), np.asarray(energies, dtype=float), tuple(provenance))

    @classmethod
    def zero(cls, energies, provenance=()):
        d = len(energies)
        return cls.from_transfer(np.zeros((d, d)), energies, provenance=provenance)

    @property
    def dim(self) -> int:
        return self.population_rates.shape[0]

    @property
    def coherence_rates(self) -> np.ndarray:
        """``Gamma_ab = (|W_aa| + |W_bb|) / 2 + dephasing_ab`` (s^-1)."""
        out = np.abs(np.diag(self.population_rates))
        gamma = 0.5 * (out[:, None] + out[None, :]) + self.dephasing_rates
        np.fill_diagonal(gamma, 0.0)
        return gamma

    @property
    def coherence_freqs(self) -> np.ndarray:
        """``omega_ab = 2 pi c (E_a - E_b)`` in rad/s."""
        return TWO_PI_C * (self.energies[:, None] - self.energies[None, :])

    def __add__(self, other: "RateGenerator") -> "RateGenerator":
        if not np.array_equal(self.energies, other.energies):
            raise ValueError("generators built on different spin spectra")
        return RateGenerator(self.population_rates + other.population_rates,
                             self.dephasing_rates + other.dephasing_rates,
                             self.energies, self.provenance + other.provenance)


def _ordered_reduce(func, n_items, n_threads=1, chunk=CHUNK_SIZE):
    """Sum ``func(slice)`` over fixed chunks in index order."""
    slices = [slice(k, min(k + chunk, n_items)) for k in range(0, n_items, chunk)]
    if not slices:
        return None
    if n_threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(func, slices))
    else:
        parts = [func(s) for s in slices]
    total = parts[0]
    for part in parts[1:]:
        total = tuple(t + p for t, p in zip(total, part))
    return total


def _eigen_quadratics(eig: EigenSystem, spin_S: float) -> np.ndarray:
    Q = quadratic_operators(spin_S)
    U = eig.states
    return np.einsum("bx,ijxy,yc->ijbc", U.conj().T, Q, U)


def matrix_elements(tensors, eig: EigenSystem, spin_S: float) -> np.ndarray:
    """``<b| S . T . S |c>`` in the eigenbasis for a stack of 3x3 tensors."""
    return np.einsum("pij,ijbc->pbc", np.asarray(tensors, dtype=float), _eigen_quadratics(eig, spin_S))


def _active_modes(phonons: PhononSet, cutoff):
    if cutoff is None:
        return np.ones(phonons.n_modes, dtype=bool)
    return phonons.frequencies <= cutoff


def _required_pairs(freqs, active, max_gap, sum_gap=None):
    """Unordered active pairs (a <= b) with |w_a - w_b| <= max_gap (or w_a + w_b <= sum_gap)."""
    idx = np.flatnonzero(active)
    order = idx[np.argsort(freqs[idx], kind="stable")]
    w = freqs[order]
    out = []
    hi = np.searchsorted(w, w + max_gap, side="right")
    for k in range(order.size):
        partners = order[k:hi[k]]
        out.append(np.column_stack([np.full(partners.size, order[k]), partners]))
    if sum_gap is not None:
        for k in range(order.size):
            partners = order[k:][w[k:] + w[k] <= sum_gap]
            out.append(np.column_stack([np.full(partners.size, order[k]), partners]))
    if not out:
        return np.zeros((0, 2), dtype=int)
    pairs = np.sort(np.concatenate(out), axis=1)
    return np.unique(pairs, axis=0)


def _screened_pairs(couplings: CouplingSet, phonons: PhononSet, eig: EigenSystem, eta, cutoff,
                    channels="raman"):
    """Stored second-derivative pairs that can contribute, after checking completeness."""
    if couplings.n_modes != phonons.n_modes:
        raise ValueError(
            f"coupling set has {couplings.n_modes} modes, phonon set has {phonons.n_modes}")
    freqs = phonons.frequencies
    active = _active_modes(phonons, cutoff)
    window = SCREEN_WIDTHS * eta
    max_gap = np.abs(eig.gaps()).max() + window
    required = _required_pairs(freqs, active, max_gap, max_gap if channels == "all" else None)
    lookup = couplings.pair_lookup()
    missing = [tuple(p) for p in required if (int(p[0]), int(p[1])) not in lookup]
    if missing:
        raise IncompleteCouplingError(missing)
    rows = np.array([lookup[(int(a), int(b))] for a, b in required], dtype=int)
    return required, couplings.second[rows] if rows.size else np.zeros((0, 3, 3))


def assemble_R2_2ph(eig: EigenSystem, couplings: CouplingSet, phonons: PhononSet, T: float,
                    eta: float, cutoff=None, spin_S=None, kind="gaussian", balanced=True,
                    channels="raman", n_threads=1, include_dephasing=True) -> RateGenerator:
    """Two-phonon Raman generator from quadratic spin-phonon coupling.

    ``R_{bb,aa} = pi/(4 hbar^2) sum_{alpha beta} |V^{ab}_{ba}|^2 G(omega_ba, omega_alpha, omega_beta)``
    over all ordered mode pairs, and the matching pure-dephasing rates
    ``pi/(4 hbar^2) sum (V_aa - V_bb)^2 G(0, omega_alpha, omega_beta)``.
    """
    spin_S = (eig.dim - 1) / 2 if spin_S is None else spin_S
    pairs, tensors = _screened_pairs(couplings, phonons, eig, eta, cutoff, channels)
    d = eig.dim
    if pairs.shape[0] == 0:
        return RateGenerator.zero(eig.energies, ("R2_2ph",))
    gaps = eig.gaps()
    Qe = _eigen_quadratics(eig, spin_S)
    freqs = phonons.frequencies
    prefactor = 0.25 * math.pi * TWO_PI_C

    def chunk(sl):
        V = np.einsum("pij,ijbc->pbc", tensors[sl], Qe)
        wa = freqs[pairs[sl, 0]][:, None, None]
        wb = freqs[pairs[sl, 1]][:, None, None]
        cross = (pairs[sl, 0] != pairs[sl, 1]).astype(float)[:, None, None]
        G = g2ph(gaps, wa, wb, T, eta, kind, balanced, channels) \
            + cross * g2ph(gaps, wb, wa, T, eta, kind, balanced, channels)
        transfer = np.sum(np.abs(V) ** 2 * G, axis=0)
        if not include_dephasing:
            return transfer, np.zeros((d, d))
        diag = np.real(np.einsum("pbb->pb", V))
        diff2 = (diag[:, :, None] - diag[:, None, :]) ** 2
        G0 = g2ph(0.0, wa, wb, T, eta, kind, balanced, channels) \
            + cross * g2ph(0.0, wb, wa, T, eta, kind, balanced, channels)
        return transfer, np.sum(diff2 * G0, axis=0)

    transfer, deph = _ordered_reduce(chunk, pairs.shape[0], n_threads)
    return RateGenerator.from_transfer(prefactor * transfer, eig.energies, prefactor * deph, ("R2_2ph",))


def _regularized_inverse(x, epsilon):
    if epsilon > 0:
        return x / (x * x + epsilon * epsilon)
    small = np.abs(x) < DENOMINATOR_FLOOR
    if np.any(small):
        raise SingularDenominatorError(
            f"{int(small.sum())} fourth-order denominator(s) below {DENOMINATOR_FLOOR} cm^-1; "
            "enable regularization (epsilon > 0)")
    return 1.0 / x


def assemble_R4_2ph(eig: EigenSystem, couplings: CouplingSet, phonons: PhononSet, T: float,
                    eta: float, cutoff=None, spin_S=None, epsilon=0.1, kind="gaussian",
                    balanced=True, n_threads=1) -> RateGenerator:
    """Two-phonon Raman generator from linear coupling at fourth order.

    ``R_{bb,aa} = pi/(2 hbar^2) sum_{alpha beta} |T^{ab,+}_{ba} + T^{ba,-}_{ba}|^2 G(omega_ba, omega_alpha, omega_beta)``
    with ``T^{ab,+-}_{ba} = sum_c <b|H_alpha|c><c|H_beta|a> / (E_c - E_a +- omega_beta)``.
    Denominators ``1/x`` become ``x / (x^2 + epsilon^2)`` when ``epsilon > 0``.
    """
    spin_S = (eig.dim - 1) / 2 if spin_S is None else spin_S
    if couplings.n_modes != phonons.n_modes:
        raise ValueError("coupling and phonon mode counts differ")
    freqs = phonons.frequencies
    active = _active_modes(phonons, cutoff)
    gaps = eig.gaps()
    max_gap = np.abs(gaps).max() + SCREEN_WIDTHS * eta
    upper = _required_pairs(freqs, active, max_gap)
    ordered = np.concatenate([upper, upper[upper[:, 0] != upper[:, 1]][:, ::-1]])
    if ordered.shape[0] == 0:
        return RateGenerator.zero(eig.energies, ("R4_2ph",))
    ordered = ordered[np.lexsort((ordered[:, 1], ordered[:, 0]))]
    H = matrix_elements(couplings.first, eig, spin_S)
    E = eig.energies
    # dE[c, b, a] = E_c - E_a, independent of b
    dE = np.broadcast_to(E[:, None, None] - E[None, None, :], (eig.dim,) * 3)

    def chunk(sl):
        al, be = ordered[sl, 0], ordered[sl, 1]
        wa = freqs[al][:, None, None]
        wb = freqs[be][:, None, None]
        if balanced:
            sa, sb = _shell(gaps[None], wa, wb)  # (P, b, a)
        else:
            sa = np.broadcast_to(wa, (al.size,) + gaps.shape)
            sb = np.broadcast_to(wb, (al.size,) + gaps.shape)
        plus = _regularized_inverse(dE[None] + sb[:, None], epsilon)  # (P, c, b, a)
        minus = _regularized_inverse(dE[None] - sa[:, None], epsilon)
        Ha, Hb = H[al], H[be]
        t_plus = np.einsum("pbc,pca,pcba->pba", Ha, Hb, plus)
        t_minus = np.einsum("pbc,pca,pcba->pba", Hb, Ha, minus)
        G = g2ph(gaps, wa, wb, T, eta, kind, balanced)
        return (np.sum(np.abs(t_plus + t_minus) ** 2 * G, axis=0),)

    (transfer,) = _ordered_reduce(chunk, ordered.shape[0], n_threads)
    return RateGenerator.from_transfer(0.5 * math.pi * TWO_PI_C * transfer, eig.energies,
                                       provenance=("R4_2ph",))


def assemble_R2_1ph(eig: EigenSystem, couplings: CouplingSet, phonons: PhononSet, T: float,
                    eta: float, cutoff=None, spin_S=None, kind="gaussian",
                    balanced=True) -> RateGenerator:
    """Resonant one-phonon (direct) generator in secular form.

    ``R_{bb,aa} = pi/(2 hbar^2) sum_alpha |<b|H_alpha|a>|^2 delta(|omega_ba| - omega_alpha)``
    times ``n`` for absorption (``omega_ba > 0``) or ``n + 1`` for emission.
    Degenerate levels do not exchange population.
    """
    spin_S = (eig.dim - 1) / 2 if spin_S is None else spin_S
    active = _active_modes(phonons, cutoff)
    freqs = phonons.frequencies[active]
    if freqs.size == 0:
        return RateGenerator.zero(eig.energies, ("R2_1ph",))
    H = matrix_elements(couplings.first[active], eig, spin_S)
    gaps = eig.gaps()
    absolute = np.abs(gaps)
    delta = smeared_delta(absolute[None] - freqs[:, None, None], eta, kind)
    if balanced:
        occ_at = np.where(absolute > 0, absolute, 1.0)[None] * np.ones_like(delta)
    else:
        occ_at = np.broadcast_to(freqs[:, None, None], delta.shape)
    n = _bose(occ_at, T)
    occupation = np.where(gaps[None] > 0, n, n + 1.0)
    occupation = np.where(absolute[None] > 0, occupation, 0.0)
    transfer = np.sum(np.abs(H) ** 2 * delta * occupation, axis=0)
    return RateGenerator.from_transfer(0.5 * math.pi * TWO_PI_C * transfer, eig.energies,
                                       provenance=("R2_1ph",))


def pure_dephasing_rate(eig, couplings, phonons, T, eta, pair, cutoff=None, spin_S=None,
                        kind="gaussian", balanced=True) -> float:
    """Pure-dephasing rate ``1/T2*`` (s^-1) of the coherence between eigenstates ``pair``."""
    gen = assemble_R2_2ph(eig, couplings, phonons, T, eta, cutoff, spin_S, kind, balanced)
    a, b = pair
    return float(gen.dephasing_rates[a, b])


@dataclass
class DensityTrajectory:
    times: np.ndarray
    populations: np.ndarray  # (n_times, d)
    coherences: np.ndarray  # (n_times, d, d), zero diagonal

    def density_matrices(self) -> np.ndarray:
        rho = self.coherences.copy()
        idx = np.arange(rho.shape[1])
        rho[:, idx, idx] = self.populations
        return rho

    def coherence(self, a, b) -> np.ndarray:
        return self.coherences[:, a, b]


def _check_density(rho0, tol=1e-10):
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.ndim != 2 or rho0.shape[0] != rho0.shape[1]:
        raise ValueError("initial state must be a square matrix")
    if np.abs(rho0 - rho0.conj().T).max() > tol:
        raise ValueError("initial state is not Hermitian")
    if abs(np.trace(rho0) - 1.0) > tol:
        raise ValueError("initial state does not have unit trace")
    if np.linalg.eigvalsh(0.5 * (rho0 + rho0.conj().T)).min() < -tol:
        raise ValueError("initial state is not positive semidefinite")
    return rho0


def propagate(gen: RateGenerator, rho0, times) -> DensityTrajectory:
    """Secular evolution: ``dp/dt = W p`` for populations, and
    ``rho_ab(t) = rho_ab(0) exp[(-i omega_ab - Gamma_ab) t]`` for coherences."""
    rho0 = _check_density(rho0)
    if rho0.shape[0] != gen.dim:
        raise ValueError("initial state dimension does not match the generator")
    times = np.asarray(times, dtype=float)
    p0 = np.real(np.diag(rho0))
    W = gen.population_rates
    pops = np.array([expm(W * t) @ p0 for t in times])
    decay = np.exp((-1j * gen.coherence_freqs - gen.coherence_rates)[None] * times[:, None, None])
    coh = rho0[None] * decay
    idx = np.arange(gen.dim)
    coh[:, idx, idx] = 0.0
    return DensityTrajectory(times, pops, coh)


@dataclass
class RateFit:
    rate: float
    y_inf: float
    y0: float
    residual_norm: float
    relative_residual: float
    mono_exponential: bool
    decay_constants_spanned: float


def extract_rate(traj: DensityTrajectory, observable) -> RateFit:
    """Fit ``y(t) = y_inf + (y_0 - y_inf) exp(-t / tau)`` and return ``1 / tau``.

    ``observable`` is a population index or an ``(a, b)`` pair, whose
    coherence magnitude is fitted.
    """
    if isinstance(observable, (tuple, list)):
        a, b = observable
        y = np.abs(traj.coherence(a, b))
    else:
        y = traj.populations[:, int(observable)]
    return fit_exponential(traj.times, y)


def fit_exponential(t, y) -> RateFit:
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    span = np.abs(y - y[0]).max()
    if span <= 1e-12 * max(1.0, abs(y[0])):
        raise NoDecayError("signal does not decay")
    y_end = y[-1]
    amp0 = y[0] - y_end
    # first time the distance to the end value falls below 1/e
    below = np.flatnonzero(np.abs(y - y_end) <= abs(amp0) / math.e)
    t_e = t[below[0]] if below.size and t[below[0]] > 0 else t[-1] / 3.0
    scale = 1.0 / t_e

    def residuals(x):
        y_inf, y0, log_k = x
        return y_inf + (y0 - y_inf) * np.exp(-np.exp(log_k) * scale * t) - y

    x0 = np.array([y_end, y[0], 0.0])
    sol = least_squares(residuals, x0, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    y_inf, y0, log_k = sol.x
    rate = float(np.exp(log_k) * scale)
    if not np.isfinite(rate) or rate <= 0:
        raise NoDecayError("fitted decay rate is not positive")
    resid = sol.fun
    amp = abs(y0 - y_inf)
    rel = float(np.sqrt(np.mean(resid**2)) / amp) if amp > 0 else math.inf
    spanned = float(rate * (t.max() - t.min()))
    if spanned < 3.0:
        raise ValueError(f"trajectory spans only {spanned:.2f} decay constants (need >= 3)")
    return RateFit(rate, float(y_inf), float(y0), float(np.linalg.norm(resid)), rel,
                   rel <= MONO_EXP_TOL, spanned)


def t2_from_components(T1: float, T2_star: float) -> float:
    """``1/T2 = 1/(2 T1) + 1/T2*``; ``T2_star`` may be infinite."""
    if not T1 > 0 or not T2_star > 0:
        raise ValueError("T1 and T2* must be positive")
    return 1.0 / (0.5 / T1 + 1.0 / T2_star)


def log_time_grid(rate_estimate: float, decades: float = 6.0, points_per_decade: int = 40,
                  slowest_rate: float | None = None) -> np.ndarray:
    """``t = 0`` plus log-spaced times covering ``decades`` around ``1 / rate_estimate``,
    extended to ``1000 / slowest_rate`` when given."""
    lo = -0.5 * decades
    hi = 0.5 * decades
    if slowest_rate is not None and slowest_rate > 0:
        hi = max(hi, math.log10(rate_estimate / slowest_rate) + 0.5 * decades)
    n = int(math.ceil((hi - lo) * points_per_decade)) + 1
    return np.concatenate([[0.0], np.logspace(lo, hi, n) / rate_estimate])


@dataclass
class RelaxationResult:
    temperature: float
    T1: float
    T2: float = math.nan
    T2_star: float = math.nan
    T2_from_components: float = math.nan
    mechanism_rates: dict = field(default_factory=dict)
    residual_norm: float = math.nan
    mono_exponential: bool = True
    eta: float = math.nan
    cutoff: float | None = None


MECHANISMS = ("R2_1ph", "R2_2ph", "R4_2ph")


@dataclass
class RelaxationModel:
    """Spin system + phonon bath + couplings, with the numerical settings of a run.

    ``relaxation(T)`` reproduces the population-recovery protocol: start in
    ``|m_s = initial_ms>``, monitor ``|m_s = monitor_ms>``, fit a single
    exponential. T2 comes from the decay of the coherence between the two.
    """

    system: SpinSystem
    phonons: PhononSet
    couplings: CouplingSet
    eta: float = 1.0
    smearing: str = "gaussian"
    cutoff: float | None = None
    r4_epsilon: float = 0.1
    enable_R2_1ph: bool = False
    enable_R2_2ph: bool = True
    enable_R4: bool = False
    balanced: bool = True
    channels: str = "raman"
    initial_ms: float = 1.0
    monitor_ms: float = 0.0
    time_decades: float = 6.0
    n_threads: int = field(default_factory=default_threads)

    def __post_init__(self):
        self._eig = eigensolve(build_hamiltonian(self.system))

    @property
    def eigensystem(self) -> EigenSystem:
        return self._eig

    def with_options(self, **changes) -> "RelaxationModel":
        return replace(self, **changes)

    @property
    def enabled(self) -> tuple:
        flags = (self.enable_R2_1ph, self.enable_R2_2ph, self.enable_R4)
        return tuple(m for m, on in zip(MECHANISMS, flags) if on)

    def generator(self, T: float, mechanisms=None) -> RateGenerator:
        mechanisms = self.enabled if mechanisms is None else tuple(mechanisms)
        if not mechanisms:
            raise ValueError("no relaxation mechanism enabled")
        eig, S = self._eig, self.system.spin_S
        common = dict(cutoff=self.cutoff, spin_S=S, kind=self.smearing, balanced=self.balanced)
        total = None
        for m in mechanisms:
            if m == "R2_1ph":
                gen = assemble_R2_1ph(eig, self.couplings, self.phonons, T, self.eta, **common)
            elif m == "R2_2ph":
                gen = assemble_R2_2ph(eig, self.couplings, self.phonons, T, self.eta,
                                      channels=self.channels, n_threads=self.n_threads, **common)
            elif m == "R4_2ph":
                gen = assemble_R4_2ph(eig, self.couplings, self.phonons, T, self.eta,
                                      epsilon=self.r4_epsilon, n_threads=self.n_threads, **common)
            else:
                raise ValueError(f"unknown mechanism {m!r}")
            total = gen if total is None else total + gen
        return total

    def states(self) -> tuple[int, int]:
        S = self.system.spin_S
        return (state_index(self._eig, self.initial_ms, S), state_index(self._eig, self.monitor_ms, S))

    def population_rate(self, gen: RateGenerator) -> RateFit | None:
        """Fitted recovery rate of the monitored population; ``None`` if nothing decays."""
        init, mon = self.states()
        W = gen.population_rates
        escape = -W[init, init]
        if escape <= 0:
            return None
        d = gen.dim
        rho0 = np.zeros((d, d), dtype=complex)
        rho0[init, init] = 1.0
        nonzero = np.abs(np.linalg.eigvals(W))
        nonzero = nonzero[nonzero > 1e-12 * nonzero.max()]
        times = log_time_grid(escape, self.time_decades, slowest_rate=nonzero.min())
        traj = propagate(gen, rho0, times)
        return extract_rate(traj, mon)

    def coherence_rate(self, gen: RateGenerator) -> RateFit | None:
        init, mon = self.states()
        gamma = gen.coherence_rates[mon, init]
        if gamma <= 0:
            return None
        d = gen.dim
        psi = np.zeros(d, dtype=complex)
        psi[[mon, init]] = 1.0 / math.sqrt(2.0)
        traj = propagate(gen, np.outer(psi, psi.conj()), log_time_grid(gamma, self.time_decades))
        return extract_rate(traj, (mon, init))

    def relaxation(self, T: float, compute_T2: bool = True, per_mechanism: bool = False) -> RelaxationResult:
        gen = self.generator(T)
        fit = self.population_rate(gen)
        result = RelaxationResult(T, math.inf if fit is None else 1.0 / fit.rate,
                                  eta=self.eta, cutoff=self.cutoff)
        if fit is not None:
            result.residual_norm = fit.residual_norm
            result.mono_exponential = fit.mono_exponential
            if not fit.mono_exponential:
                logger.warning("T=%g K: population recovery is not mono-exponential "
                               "(relative residual %.2e)", T, fit.relative_residual)
        if per_mechanism:
            for m in self.enabled:
                sub = self.population_rate(self.generator(T, (m,)))
                result.mechanism_rates[m] = 0.0 if sub is None else sub.rate
        if compute_T2:
            init, mon = self.states()
            deph = gen.dephasing_rates[mon, init]
            result.T2_star = math.inf if deph <= 0 else 1.0 / deph
            coh = self.coherence_rate(gen)
            result.T2 = math.inf if coh is None else 1.0 / coh.rate
            if math.isfinite(result.T1):
                result.T2_from_components = t2_from_components(result.T1, result.T2_star)
        return result

    def sweep(self, temperatures, compute_T2=True, per_mechanism=False, n_jobs=1) -> list[RelaxationResult]:
        temperatures = list(temperatures)
        run = lambda T: self.relaxation(T, compute_T2, per_mechanism)  # noqa: E731
        if n_jobs > 1:
            with ThreadPoolExecutor(n_jobs) as pool:
                return list(pool.map(run, temperatures))
        return [run(T) for T in temperatures]
