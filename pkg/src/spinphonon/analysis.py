"""Temperature-dependence models for relaxation rates and phonon cutoff scans.

The fitters follow the scikit-learn estimator API: ``fit(T, rate)`` then
``predict(T)``, with hyper-parameters exposed through ``get_params``.
Temperatures may be given as a 1-D array or a single-column 2-D array.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import least_squares, nnls
from scipy.signal import find_peaks
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_array, check_is_fitted

from .constants import K_B

logger = logging.getLogger(__name__)

RATE_UNITS = {"rate_s-1": 1.0, "rate_ms-1": 1e3, "rate_us-1": 1e6}
TIME_UNITS = {"T1_s": 1.0, "T1_ms": 1e-3, "T1_us": 1e-6}


@dataclass
class T1Curve:
    temperatures: np.ndarray
    rates: np.ndarray
    source: str = "simulated"

    def __post_init__(self):
        self.temperatures, self.rates = check_curve(self.temperatures, self.rates)

    @classmethod
    def from_csv(cls, path, source="experimental-import") -> "T1Curve":
        """Read a two-column CSV whose header states units, e.g. ``T_K,rate_s-1`` or ``T_K,T1_ms``."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
        if not rows:
            raise ValueError(f"{path}: empty curve file")
        header = [h.strip() for h in rows[0]]
        if len(header) != 2 or header[0] != "T_K":
            raise ValueError(f"{path}: header must be 'T_K,<rate or T1 column with units>'")
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        if header[1] in RATE_UNITS:
            rates = data[:, 1] * RATE_UNITS[header[1]]
        elif header[1] in TIME_UNITS:
            rates = 1.0 / (data[:, 1] * TIME_UNITS[header[1]])
        else:
            raise ValueError(f"{path}: unknown unit column {header[1]!r}")
        return cls(data[:, 0], rates, source)


def check_temperatures(T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    if T.ndim == 2:
        T = check_array(T, ensure_min_features=1)
        if T.shape[1] != 1:
            raise ValueError("temperatures must be a single column")
        T = T[:, 0]
    T = check_array(T, ensure_2d=False)
    if T.ndim != 1:
        raise ValueError("temperatures must be one-dimensional")
    if np.any(T <= 0):
        raise ValueError("temperatures must be positive")
    return T


def check_curve(T, rate, min_points=2):
    T = check_temperatures(T)
    rate = check_array(np.asarray(rate, dtype=float), ensure_2d=False)
    if rate.shape != T.shape:
        raise ValueError("temperatures and rates differ in length")
    if T.size < min_points:
        raise ValueError(f"need at least {min_points} points, got {T.size}")
    if np.any(np.diff(T) <= 0):
        order = np.argsort(T)
        T, rate = T[order], rate[order]
        if np.any(np.diff(T) <= 0):
            raise ValueError("temperatures must be distinct")
    if np.any(rate <= 0):
        raise ValueError("rates must be positive")
    return T, rate


@dataclass
class FitResult:
    model: str
    params: dict
    units: dict
    stderr: dict
    residual_norm: float
    converged: bool
    gradient_norm: float = 0.0
    r2: float = math.nan
    identifiable: bool = True
    notes: list = field(default_factory=list)

    def report(self) -> str:
        lines = [f"model: {self.model}"]
        for name, value in self.params.items():
            lines.append(f"  {name} = {value:.6g} +/- {self.stderr.get(name, math.nan):.3g} "
                         f"{self.units.get(name, '')}".rstrip())
        lines.append(f"  residual_norm = {self.residual_norm:.6g}")
        lines.append(f"  R2 = {self.r2:.8f}")
        lines.append(f"  converged = {self.converged} (gradient norm {self.gradient_norm:.3g})")
        lines += [f"  note: {n}" for n in self.notes]
        return "\n".join(lines)

    def rows(self):
        for name, value in self.params.items():
            yield self.model, name, value, self.stderr.get(name, math.nan), self.units.get(name, "")


def bose_peak(energy, T):
    """``exp(-E/k_B T) / (exp(-E/k_B T) - 1)^2 = n (n + 1)`` for a mode of energy ``E`` (cm^-1)."""
    x = np.asarray(energy, dtype=float) / (K_B * np.asarray(T, dtype=float))
    q = np.exp(-x)
    return q / (1.0 - q) ** 2


def _bose_peak_log_derivative(energy, T):
    """``d log(n(n+1)) / d E``."""
    x = energy / (K_B * T)
    return -1.0 / (np.tanh(0.5 * x) * K_B * T)


class TwoModeRaman(RegressorMixin, BaseEstimator):
    """``rate(T) = amp1 n1(n1+1) + amp2 n2(n2+1)`` with ``n_k`` the Bose factor at ``e_k``.

    Energies ``e1 < e2`` in cm^-1, amplitudes in s^-1. Parameters are fitted
    in log form so they stay positive. ``loss="log"`` fits log-rates,
    ``loss="linear"`` the rates themselves. Missing initial energies are
    found by a coarse grid search with non-negative amplitudes.
    """

    def __init__(self, e1_init=None, e2_init=None, amp1_init=None, amp2_init=None, loss="log",
                 max_nfev=5000, grid=(5.0, 5000.0, 60)):
        self.e1_init = e1_init
        self.e2_init = e2_init
        self.amp1_init = amp1_init
        self.amp2_init = amp2_init
        self.loss = loss
        self.max_nfev = max_nfev
        self.grid = grid

    @staticmethod
    def model(T, amp1, e1, amp2, e2):
        return amp1 * bose_peak(e1, T) + amp2 * bose_peak(e2, T)

    def _initial(self, T, rate):
        if self.e1_init is not None and self.e2_init is not None:
            e1, e2 = sorted((float(self.e1_init), float(self.e2_init)))
            basis = np.column_stack([bose_peak(e1, T), bose_peak(e2, T)]) / rate[:, None]
            amps = nnls(basis, np.ones_like(rate))[0]
        else:
            lo, hi, n = self.grid
            energies = np.geomspace(lo, hi, int(n))
            best = (math.inf, None)
            for i, e1 in enumerate(energies):
                for e2 in energies[i + 1:]:
                    basis = np.column_stack([bose_peak(e1, T), bose_peak(e2, T)]) / rate[:, None]
                    amps, res = nnls(basis, np.ones_like(rate))
                    if res < best[0]:
                        best = (res, (e1, e2, amps))
            e1, e2, amps = best[1]
        amp1 = self.amp1_init if self.amp1_init is not None else amps[0]
        amp2 = self.amp2_init if self.amp2_init is not None else amps[1]
        floor = 1e-12 * rate.max()
        return np.log([max(amp1, floor), e1, max(amp2, floor), e2])

    def fit(self, T, rate):
        T, rate = check_curve(T, rate, min_points=6)
        if T.max() / T.min() < 3.0:
            warnings.warn("temperatures span less than a factor 3", UserWarning)
        if self.loss not in ("log", "linear"):
            raise ValueError(f"loss must be 'log' or 'linear', got {self.loss!r}")
        log_y = np.log(rate)

        def model_parts(p):
            amp1, e1, amp2, e2 = np.exp(p)
            f1, f2 = bose_peak(e1, T), bose_peak(e2, T)
            total = amp1 * f1 + amp2 * f2
            # d total / d log(param)
            jac = np.column_stack([amp1 * f1, amp1 * f1 * e1 * _bose_peak_log_derivative(e1, T),
                                   amp2 * f2, amp2 * f2 * e2 * _bose_peak_log_derivative(e2, T)])
            return total, jac

        if self.loss == "log":
            fun = lambda p: np.log(model_parts(p)[0]) - log_y  # noqa: E731

            def jac(p):
                total, j = model_parts(p)
                return j / total[:, None]
        else:
            # residuals in units of the largest rate keep the gradient test scale-free
            y_scale = rate.max()
            fun = lambda p: (model_parts(p)[0] - rate) / y_scale  # noqa: E731
            jac = lambda p: model_parts(p)[1] / y_scale  # noqa: E731

        p0 = self._initial(T, rate)
        sol = least_squares(fun, p0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                            max_nfev=self.max_nfev)
        p = sol.x
        if p[1] > p[3]:
            p = p[[2, 3, 0, 1]]
        J = jac(p)
        r = fun(p)
        grad = float(np.abs(J.T @ r).max())
        scale = max(1.0, float(np.abs(r).max()))
        converged = bool(sol.status > 0 and grad <= 1e-6 * scale)
        self.amp1_, self.e1_, self.amp2_, self.e2_ = (float(v) for v in np.exp(p))
        stderr = _log_param_stderr(J, r, np.exp(p))
        names = ("amp1", "e1", "amp2", "e2")
        pred = self.predict(T)
        notes = []
        identifiable = True
        if abs(self.e2_ - self.e1_) <= 1e-2 * self.e2_:
            identifiable = False
            notes.append("e1 and e2 coincide: two-mode model unidentifiable")
        weights = np.array([self.amp1_ * bose_peak(self.e1_, T), self.amp2_ * bose_peak(self.e2_, T)])
        frac = (weights / pred).max(axis=1)
        if frac.min() < 1e-6:
            identifiable = False
            notes.append("one term contributes negligibly at every temperature")
        for note in notes:
            warnings.warn(note, UserWarning)
        if not converged:
            warnings.warn(f"two-mode fit did not converge (gradient {grad:.3e})", ConvergenceWarning)
        self.fit_result_ = FitResult(
            "two_mode_raman", dict(zip(names, (self.amp1_, self.e1_, self.amp2_, self.e2_))),
            {"amp1": "s^-1", "e1": "cm^-1", "amp2": "s^-1", "e2": "cm^-1"},
            dict(zip(names, stderr)), float(np.linalg.norm(r)), converged, grad,
            float(r2_score(np.log(rate), np.log(pred))), identifiable, notes)
        return self

    def predict(self, T):
        check_is_fitted(self, "e1_")
        return self.model(check_temperatures(T), self.amp1_, self.e1_, self.amp2_, self.e2_)


def _log_param_stderr(J, r, values):
    dof = max(r.size - J.shape[1], 1)
    s2 = float(r @ r) / dof
    try:
        cov = np.linalg.inv(J.T @ J) * s2
        return np.sqrt(np.clip(np.diag(cov), 0, None)) * values
    except np.linalg.LinAlgError:
        return np.full(J.shape[1], math.nan)


class PowerLaw(RegressorMixin, BaseEstimator):
    """``rate = A T^n`` by linear regression of log-rate on log-T."""

    def fit(self, T, rate):
        T, rate = check_curve(T, rate)
        reg = stats.linregress(np.log(T), np.log(rate))
        self.exponent_ = float(reg.slope)
        self.amplitude_ = float(np.exp(reg.intercept))
        resid = np.log(rate) - (reg.intercept + reg.slope * np.log(T))
        self.fit_result_ = FitResult(
            "power_law", {"A": self.amplitude_, "n": self.exponent_},
            {"A": "s^-1 K^-n", "n": ""},
            {"A": self.amplitude_ * float(reg.intercept_stderr), "n": float(reg.stderr)},
            float(np.linalg.norm(resid)), True, 0.0, float(reg.rvalue**2))
        return self

    def predict(self, T):
        check_is_fitted(self, "exponent_")
        return self.amplitude_ * check_temperatures(T) ** self.exponent_


class Orbach(RegressorMixin, BaseEstimator):
    """Comparison model ``rate = A exp(-delta / k_B T)``."""

    def fit(self, T, rate):
        T, rate = check_curve(T, rate)
        reg = stats.linregress(1.0 / (K_B * T), np.log(rate))
        self.delta_ = float(-reg.slope)
        self.amplitude_ = float(np.exp(reg.intercept))
        resid = np.log(rate) - (reg.intercept + reg.slope / (K_B * T))
        self.fit_result_ = FitResult(
            "orbach", {"A": self.amplitude_, "delta": self.delta_}, {"A": "s^-1", "delta": "cm^-1"},
            {"A": self.amplitude_ * float(reg.intercept_stderr), "delta": float(reg.stderr)},
            float(np.linalg.norm(resid)), True, 0.0, float(reg.rvalue**2))
        return self

    def predict(self, T):
        check_is_fitted(self, "delta_")
        return self.amplitude_ * np.exp(-self.delta_ / (K_B * check_temperatures(T)))


def fit_two_mode(curve: T1Curve, initial=None, **kwargs) -> FitResult:
    """Fit the two-mode Raman law; ``initial`` is ``(e1, e2)`` or ``(amp1, e1, amp2, e2)``."""
    if initial is not None:
        if len(initial) == 2:
            kwargs.update(e1_init=initial[0], e2_init=initial[1])
        else:
            kwargs.update(amp1_init=initial[0], e1_init=initial[1], amp2_init=initial[2],
                          e2_init=initial[3])
    return TwoModeRaman(**kwargs).fit(curve.temperatures, curve.rates).fit_result_


def fit_power_law(curve: T1Curve) -> FitResult:
    return PowerLaw().fit(curve.temperatures, curve.rates).fit_result_


def coupling_peaks(spectrum, count=2, below=1000.0):
    """Energies of the ``count`` strongest local maxima of a spectrum below ``below`` cm^-1."""
    grid, values = spectrum.omega_grid, spectrum.values
    idx, _ = find_peaks(values)
    idx = idx[grid[idx] < below]
    strongest = idx[np.argsort(values[idx])[::-1][:count]]
    return np.sort(grid[strongest])


@dataclass
class CutoffScan:
    temperature: float
    cutoffs: np.ndarray
    T1: np.ndarray
    T1_full: float
    converged_cutoff: float | None

    def rows(self):
        return zip(self.cutoffs, self.T1)


def cutoff_scan(model, temperature: float, cutoffs, tolerance: float = 0.05) -> CutoffScan:
    """T1 with only phonons below each cutoff; reports the smallest cutoff within
    ``tolerance`` of the full-spectrum T1."""
    cutoffs = np.sort(np.asarray(cutoffs, dtype=float))
    full = model.with_options(cutoff=None).relaxation(temperature, compute_T2=False).T1
    values = np.array([model.with_options(cutoff=c).relaxation(temperature, compute_T2=False).T1
                       for c in cutoffs])
    converged = None
    for c, t1 in zip(cutoffs, values):
        if math.isfinite(t1) and abs(t1 - full) <= tolerance * full:
            converged = float(c)
            break
    return CutoffScan(float(temperature), cutoffs, values, float(full), converged)
