import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import ConvergenceWarning

from spinphonon.analysis import (Orbach, PowerLaw, T1Curve, TwoModeRaman, bose_peak, coupling_peaks,
                                 cutoff_scan, fit_power_law, fit_two_mode)
from spinphonon.phonons import coupling_density, model_bath
from spinphonon.presets import dense_bath, two_mode_bath
from spinphonon.relaxation import RelaxationModel
from spinphonon.spin import SpinSystem

K_B = 0.6950348
TRUE = dict(amp1=3.6e11, e1=326.0, amp2=1.8e12, e2=576.0)
TEMPS = np.linspace(50, 500, 15)


def synthetic(T=TEMPS, **p):
    p = {**TRUE, **p}
    return TwoModeRaman.model(T, p["amp1"], p["e1"], p["amp2"], p["e2"])


def test_bose_peak_reference():
    # exp(-80/208.510) / (exp(-80/208.510) - 1)^2, mpmath
    assert bose_peak(80.0, 300.0) == pytest.approx(6.710495769613278, rel=1e-12)
    assert (K_B * 300 / 80) ** 2 == pytest.approx(6.79321931078025, rel=1e-12)


def test_bose_peak_tracks_t_squared_at_high_temperature():
    B = 80.0
    T = np.linspace(3.75 * B / K_B, 2000, 50)
    ratio = bose_peak(B, T) / (K_B * T / B) ** 2
    assert np.all(np.abs(ratio - 1) < 0.02)


def test_two_mode_recovers_energies_from_grid_search():
    est = TwoModeRaman().fit(TEMPS, synthetic())
    assert est.e1_ == pytest.approx(326.0, rel=1e-3)
    assert est.e2_ == pytest.approx(576.0, rel=1e-3)
    assert est.fit_result_.converged
    assert est.fit_result_.r2 > 0.999999


@settings(max_examples=15)
@given(st.lists(st.floats(0.7, 1.3), min_size=4, max_size=4))
def test_two_mode_perturbed_starts(factors):
    start = {k + "_init": v * f for (k, v), f in zip(TRUE.items(), factors)}
    est = TwoModeRaman(**start).fit(TEMPS, synthetic())
    got = est.fit_result_.params
    for name, value in TRUE.items():
        assert got[name] == pytest.approx(value, rel=1e-3)


@pytest.mark.parametrize("loss", ["log", "linear"])
def test_two_mode_equivariance(loss):
    base = TwoModeRaman(e1_init=300, e2_init=600, loss=loss).fit(TEMPS, synthetic())
    scaled = TwoModeRaman(e1_init=300, e2_init=600, loss=loss).fit(TEMPS, 7.5 * synthetic())
    assert scaled.e1_ == pytest.approx(base.e1_, rel=1e-6)
    assert scaled.e2_ == pytest.approx(base.e2_, rel=1e-6)
    assert scaled.amp1_ == pytest.approx(7.5 * base.amp1_, rel=1e-6)
    assert scaled.amp2_ == pytest.approx(7.5 * base.amp2_, rel=1e-6)


def test_single_term_data_is_flagged_or_vanishing():
    rate = synthetic(amp2=0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        est = TwoModeRaman(e1_init=300, e2_init=600).fit(TEMPS, rate)
    res = est.fit_result_
    small = min(est.amp1_ * bose_peak(est.e1_, TEMPS).max(), est.amp2_ * bose_peak(est.e2_, TEMPS).max())
    assert (not res.identifiable) or small < 1e-6 * rate.max()


def test_two_mode_warns_when_unconverged():
    with pytest.warns(ConvergenceWarning):
        TwoModeRaman(e1_init=100, e2_init=900, max_nfev=2).fit(TEMPS, synthetic())


def test_two_mode_needs_six_points():
    with pytest.raises(ValueError, match="6"):
        TwoModeRaman().fit(TEMPS[:5], synthetic(TEMPS[:5]))


def test_estimator_protocol():
    est = TwoModeRaman(e1_init=300, e2_init=600)
    assert clone(est).get_params() == est.get_params()
    est.fit(TEMPS.reshape(-1, 1), synthetic())
    np.testing.assert_allclose(est.predict(TEMPS), synthetic(), rtol=1e-6)
    assert est.score(TEMPS, synthetic()) > 0.999999


@pytest.mark.parametrize("n", [2.0, 5.0])
def test_power_law_exact(n):
    T = np.linspace(100, 300, 10)
    est = PowerLaw().fit(T, 3e-2 * T**n)
    assert est.exponent_ == pytest.approx(n, abs=1e-6)
    assert est.amplitude_ == pytest.approx(3e-2, rel=1e-6)


def test_power_law_on_low_energy_two_mode_law():
    T = np.linspace(100, 300, 12)
    res = fit_power_law(T1Curve(T, 1e6 * bose_peak(20.0, T)))
    assert 1.8 <= res.params["n"] <= 2.2


def test_power_law_rejects_nonpositive():
    with pytest.raises(ValueError):
        PowerLaw().fit([100, 200, 300], [1.0, -1.0, 2.0])


def test_orbach_recovers_barrier():
    T = np.linspace(20, 200, 10)
    est = Orbach().fit(T, 5e8 * np.exp(-150.0 / (K_B * T)))
    assert est.delta_ == pytest.approx(150.0, rel=1e-10)


def test_fit_two_mode_from_curve():
    res = fit_two_mode(T1Curve(TEMPS, synthetic()), initial=(320.0, 580.0))
    assert res.params["e1"] == pytest.approx(326.0, rel=1e-3)
    assert "e2" in res.report() and len(list(res.rows())) == 4


@pytest.mark.parametrize("column,scale", [("rate_s-1", 1.0), ("rate_ms-1", 1e3), ("T1_ms", None)])
def test_curve_csv_units(tmp_path, column, scale):
    p = tmp_path / "curve.csv"
    p.write_text(f"T_K,{column}\n100,2\n200,4\n")
    curve = T1Curve.from_csv(p)
    expect = np.array([2.0, 4.0]) * scale if scale else 1.0 / (np.array([2.0, 4.0]) * 1e-3)
    np.testing.assert_allclose(curve.rates, expect)
    assert curve.source == "experimental-import"


def test_curve_csv_unknown_unit(tmp_path):
    p = tmp_path / "curve.csv"
    p.write_text("T_K,rate_hz\n100,2\n200,4\n")
    with pytest.raises(ValueError, match="unknown unit"):
        T1Curve.from_csv(p)


def test_curve_validation():
    with pytest.raises(ValueError):
        T1Curve([100, 100], [1, 2])
    with pytest.raises(ValueError):
        T1Curve([100, 200], [1, 0])
    curve = T1Curve([200, 100], [2, 1])
    np.testing.assert_array_equal(curve.temperatures, [100, 200])


def test_coupling_peaks_match_two_mode_bath():
    ph, cs = two_mode_bath()
    vw = coupling_density(cs, ph, np.linspace(0, 1500, 3001), 1.0)
    np.testing.assert_allclose(coupling_peaks(vw), [326.0, 576.0])


def test_single_mode_spectrum_has_one_peak():
    ph = model_bath([350.0])
    from spinphonon.coupling import CouplingSet
    vw = coupling_density(CouplingSet(np.ones((1, 3, 3))), ph, np.linspace(0, 1000, 2001), 3.0)
    np.testing.assert_allclose(coupling_peaks(vw, count=5), [350.0])


def test_cutoff_scan_limits_and_monotonicity():
    ph, cs = dense_bath(200, seed=0)
    model = RelaxationModel(SpinSystem.from_axial(1, 0.092, B_field=(0, 0, 1e-3)), ph, cs, eta=4.0)
    scan = cutoff_scan(model, 300.0, [50.0, 80.0, 120.0, 160.0, 220.0, 300.0])
    assert math.isinf(scan.T1[0])
    assert scan.T1[-1] == scan.T1_full
    finite = scan.T1[np.isfinite(scan.T1)]
    assert np.all(np.diff(finite) <= 0)
    assert scan.converged_cutoff is not None
    k = list(scan.cutoffs).index(scan.converged_cutoff)
    assert abs(scan.T1[k] - scan.T1_full) <= 0.05 * scan.T1_full
    assert k == 0 or abs(scan.T1[k - 1] - scan.T1_full) > 0.05 * scan.T1_full
