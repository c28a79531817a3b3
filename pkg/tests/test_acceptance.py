"""Acceptance suite: one PASS/FAIL line per criterion (run with ``-s`` to see them)."""

import math
import time

import numpy as np

from spinphonon.analysis import T1Curve, cutoff_scan, fit_power_law, fit_two_mode
from spinphonon.coupling import (CouplingSet, Geometry, cartesian_to_mode_first,
                                 fit_grid_derivatives, mode_couplings,
                                 mode_to_cartesian_first, mode_to_cartesian_second)
from spinphonon.phonons import model_bath
from spinphonon.presets import (axial_tensor, degenerate_pair_bath, dense_bath, low_mode_bath,
                                toy_molecule, two_mode_bath)
from spinphonon.relaxation import (RelaxationModel, assemble_R2_2ph, assemble_R4_2ph,
                                   log_time_grid, propagate, pure_dephasing_rate)
from spinphonon.spin import SpinSystem, build_hamiltonian, eigensolve
from spinphonon.surrogate import init_params, loss_and_grad, train_surrogate

K_B = 0.6950348
TWO_PI_C = 2 * math.pi * 2.99792458e10
ZERO_FIELD = SpinSystem.from_axial(1, 0.092)


def verdict(number, title, ok, detail):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}")
    assert ok, detail


def rel(a, b):
    return abs(a - b) / abs(b)


def bose(w, T):
    return 1.0 / math.expm1(w / (K_B * T))


def gauss0(eta):
    return 1.0 / (eta * math.sqrt(2 * math.pi))


def trajectories(model, T):
    """Population trajectory from |+1> and coherence trajectory of (|0> + |+1>)/sqrt2."""
    gen = model.generator(T)
    init, mon = model.states()
    d = gen.dim
    rho = np.zeros((d, d), dtype=complex)
    rho[init, init] = 1.0
    W = gen.population_rates
    rates = np.abs(np.linalg.eigvals(W))
    rates = rates[rates > 1e-12 * rates.max()]
    out = [propagate(gen, rho, log_time_grid(-W[init, init], 6, slowest_rate=rates.min()))]
    psi = np.zeros(d, dtype=complex)
    psi[[init, mon]] = 1 / math.sqrt(2)
    gamma = gen.coherence_rates[mon, init]
    out.append(propagate(gen, np.outer(psi, psi.conj()), log_time_grid(gamma, 6)))
    return out


def tuned_nv_bath(dephasing):
    return degenerate_pair_bath([300.0, 500.0], [1.0, 0.6], seed=2, dephasing=dephasing)


# ---------------------------------------------------------------------------


def test_criterion_01_two_mode_raman_curve():
    start = time.perf_counter()
    ph, cs = two_mode_bath(strength2=2.0)
    model = RelaxationModel(ZERO_FIELD, ph, cs, eta=1.0)
    T = np.linspace(50, 500, 15)
    T1 = np.array([r.T1 for r in model.sweep(T, compute_T2=False)])
    fit = fit_two_mode(T1Curve(T, 1 / T1))
    elapsed = time.perf_counter() - start
    e1, e2 = fit.params["e1"], fit.params["e2"]
    ok = rel(e1, 326.0) < 0.01 and rel(e2, 576.0) < 0.01 and fit.r2 > 0.999 and elapsed < 10
    verdict(1, "two-mode Raman curve", ok,
            f"e1={e1:.3f} e2={e2:.3f} cm^-1, R2={fit.r2:.8f}, {elapsed:.2f} s")


def test_criterion_02_high_temperature_power_law():
    start = time.perf_counter()
    ph, cs = low_mode_bath(20.0)
    model = RelaxationModel(ZERO_FIELD, ph, cs, eta=1.0)
    T = np.linspace(100, 300, 11)
    T1 = np.array([r.T1 for r in model.sweep(T, compute_T2=False)])
    n = fit_power_law(T1Curve(T, 1 / T1)).params["n"]
    elapsed = time.perf_counter() - start
    verdict(2, "high-T power law", abs(n - 2.0) <= 0.1 and elapsed < 5,
            f"n={n:.4f}, {elapsed:.2f} s")


def test_criterion_03_t2_closure_and_nv_ratio():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(3):
        ph, cs = degenerate_pair_bath([250.0, 420.0], [1.0, 0.8], seed=seed, dephasing=1.5)
        model = RelaxationModel(ZERO_FIELD, ph, cs, eta=1.0)
        for T in (100.0, 300.0):
            res = model.relaxation(T)
            assert math.isfinite(res.T2_star)
            worst = max(worst, rel(res.T2, res.T2_from_components))
    # zz couplings only dephase, so T2* scales as 1 / dephasing^2 at fixed T1
    base = RelaxationModel(ZERO_FIELD, *tuned_nv_bath(1.0), eta=1.0).relaxation(300.0)
    factor = math.sqrt(base.T2_star / (7 / 9 * base.T1))
    tuned = RelaxationModel(ZERO_FIELD, *tuned_nv_bath(factor), eta=1.0).relaxation(300.0)
    ratio = tuned.T2 / tuned.T1
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and abs(ratio - 0.56) < 1e-6 and elapsed < 5
    verdict(3, "T2 closure and NV-like ratio", ok,
            f"max closure mismatch {worst:.2e}, T2/T1={ratio:.8f} (zz scale {factor:.4f}), {elapsed:.2f} s")


def test_criterion_04_equilibrium_on_dense_bath():
    start = time.perf_counter()
    ph, cs = dense_bath(200, seed=0)
    eig = eigensolve(build_hamiltonian(ZERO_FIELD))
    rho = np.zeros((3, 3), dtype=complex)
    rho[0, 0] = 1.0  # |m = +1>
    errors = {}
    for T in (10.0, 100.0, 300.0):
        gen = assemble_R2_2ph(eig, cs, ph, T, 4.0)
        slowest = np.sort(np.abs(np.linalg.eigvals(gen.population_rates)))[1]
        start_state = eig.states.conj().T @ rho @ eig.states
        traj = propagate(gen, start_state, [0.0, 60.0 / slowest])
        boltz = np.exp(-(eig.energies - eig.energies[0]) / (K_B * T))
        errors[T] = np.abs(traj.populations[-1] - boltz / boltz.sum()).max()
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) < 1e-6 and elapsed < 30
    verdict(4, "Boltzmann equilibrium (200 modes)", ok,
            ", ".join(f"{T:g} K: {e:.1e}" for T, e in errors.items()) + f", {elapsed:.2f} s")


def test_criterion_05_conservation_and_positivity():
    cases = [(two_mode_bath(strength2=2.0), (50.0, 300.0, 500.0)),
             (low_mode_bath(20.0), (100.0, 300.0)),
             (tuned_nv_bath(1.0), (300.0,)),
             (dense_bath(200, seed=0), (10.0, 100.0, 300.0))]
    worst_trace, lowest, count = 0.0, math.inf, 0
    for (ph, cs), temps in cases:
        model = RelaxationModel(ZERO_FIELD, ph, cs, eta=1.0 if ph.n_modes < 10 else 4.0)
        for T in temps:
            for traj in trajectories(model, T):
                rho = traj.density_matrices()
                worst_trace = max(worst_trace, np.abs(np.trace(rho, axis1=1, axis2=2) - 1).max())
                lowest = min(lowest, traj.populations.min())
                count += 1
    ok = worst_trace < 1e-10 and lowest >= -1e-10
    verdict(5, "trace and positivity", ok,
            f"{count} trajectories, max |Tr-1|={worst_trace:.1e}, min population={lowest:.1e}")


def _hand_ops():
    r = 1 / math.sqrt(2)
    sx = r * np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex)
    sy = r * np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]])
    sz = np.diag([1.0, 0.0, -1.0]).astype(complex)
    ops = (sx, sy, sz)
    return lambda t: sum(t[i, j] * ops[i] @ ops[j] for i in range(3) for j in range(3))


def test_criterion_06_one_pair_oracles():
    op = _hand_ops()
    eig = eigensolve(build_hamiltonian(SpinSystem.from_axial(1, 0.092, B_field=(0, 0, 1e-3))))
    lo, hi = 0, 2
    E, U = eig.energies, eig.states
    gap = E[hi] - E[lo]
    zero = np.zeros((3, 3))

    T, eta = 300.0, 1e-5
    tensor = axial_tensor(xz=0.7, yz=-0.3)
    ph = model_bath([300.0 + gap, 300.0])
    cs = CouplingSet(np.zeros((2, 3, 3)), [(0, 0), (0, 1), (1, 1)], [zero, tensor, zero])
    V = U.conj().T @ op(tensor) @ U
    want = math.pi / 4 * abs(V[hi, lo]) ** 2 * gauss0(eta) * bose(ph.frequencies[0], T) \
        * (bose(ph.frequencies[1], T) + 1) * TWO_PI_C
    err_r2 = rel(assemble_R2_2ph(eig, cs, ph, T, eta).population_rates[hi, lo], want)

    T, eps = 200.0, 0.1
    rng = np.random.default_rng(3)
    first = np.array([axial_tensor(*rng.normal(size=5)) for _ in range(2)])
    ph = model_bath([250.0 + gap, 250.0])
    Ha, Hb = (U.conj().T @ op(f) @ U for f in first)
    wa, wb = ph.frequencies
    reg = lambda x: x / (x * x + eps * eps)  # noqa: E731
    amp = sum(Ha[hi, c] * Hb[c, lo] * reg(E[c] - E[lo] + wb) + Hb[hi, c] * Ha[c, lo] * reg(E[c] - E[lo] - wa)
              for c in range(3))
    want = math.pi / 2 * abs(amp) ** 2 * gauss0(eta) * bose(wa, T) * (bose(wb, T) + 1) * TWO_PI_C
    got = assemble_R4_2ph(eig, CouplingSet(first), ph, T, eta, epsilon=eps).population_rates[hi, lo]
    err_r4 = rel(got, want)

    eig0 = eigensolve(build_hamiltonian(ZERO_FIELD))
    T, eta, w = 300.0, 2.0, 0.37
    ph = model_bath([400.0, 400.0])
    cs = CouplingSet(np.zeros((2, 3, 3)), [(0, 0), (0, 1), (1, 1)], [zero, axial_tensor(zz=w), zero])
    n = bose(400.0, T)
    want = math.pi / 4 * 2 * w**2 * gauss0(eta) * n * (n + 1) * TWO_PI_C
    err_deph = rel(pure_dephasing_rate(eig0, cs, ph, T, eta, (0, 1)), want)

    ok = max(err_r2, err_r4, err_deph) < 1e-12
    verdict(6, "one-pair oracles", ok,
            f"relative errors R2={err_r2:.1e} R4={err_r4:.1e} dephasing={err_deph:.1e}")


def test_criterion_07_derivative_engine():
    rng = np.random.default_rng(7)
    ref = Geometry(np.array([[0.0, 0.0, 0.0], [1.1, -0.2, 0.5]]))
    c = rng.normal(size=10)
    i, j = 1, 4

    def evaluate(geom):
        x = (geom.coordinates - ref.coordinates).ravel()
        u, v = x[i], x[j]
        f = (c[0] + c[1] * u + c[2] * v + c[3] * u * u + c[4] * u * v + c[5] * v * v
             + c[6] * u**3 + c[7] * u * u * v + c[8] * u * v * v + c[9] * v**3)
        D = np.zeros((3, 3))
        D[0, 2] = D[2, 0] = f
        return D

    one = fit_grid_derivatives(evaluate, ref, (i,), step=0.01)
    two = fit_grid_derivatives(evaluate, ref, (i, j), step=0.01)
    pairs = [(one.first[0][0, 2], c[1]), (two.first[0][0, 2], c[1]), (two.first[1][0, 2], c[2]),
             (two.second[(i, i)][0, 2], 2 * c[3]), (two.second[(i, j)][0, 2], c[4]),
             (two.second[(j, j)][0, 2], 2 * c[5])]
    fit_err = max(rel(got, want) for got, want in pairs)

    _, ph = toy_molecule(3, seed=5)
    cart = rng.normal(size=(9, 3, 3))
    cart = cart + cart.transpose(0, 2, 1)
    h = rng.normal(size=(9, 9, 3, 3))
    h = h + h.transpose(1, 0, 2, 3)
    h = h + h.transpose(0, 1, 3, 2)
    back1 = mode_to_cartesian_first(cartesian_to_mode_first(cart, ph), ph)
    back2 = mode_to_cartesian_second(mode_couplings(cart, ph, h).second_dense(), ph)
    trip_err = max(np.abs(back1 - cart).max() / np.abs(cart).max(), np.abs(back2 - h).max() / np.abs(h).max())
    ok = fit_err < 1e-9 and trip_err < 1e-8
    verdict(7, "derivative engine", ok, f"grid fit error {fit_err:.1e}, round trip error {trip_err:.1e}")


def test_criterion_08_surrogate():
    rng = np.random.default_rng(11)
    params = [p + 0.1 * rng.normal(size=p.shape) for p in init_params((4, 3, 2, 1), rng)]
    X, y = rng.normal(size=(9, 4)), rng.normal(size=9)
    _, grads = loss_and_grad(params, X, y, 1e-3)
    grad_err = 0.0
    h = 1e-6
    for p, g in zip(params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up, _ = loss_and_grad(params, X, y, 1e-3)
            p[idx] = old - h
            down, _ = loss_and_grad(params, X, y, 1e-3)
            p[idx] = old
            num = (up - down) / (2 * h)
            grad_err = max(grad_err, abs(g[idx] - num) / max(abs(num), 1e-3))

    noise = 1e-5
    X = rng.uniform(-0.05, 0.05, size=(2000, 6))
    w = rng.normal(size=6)
    w *= 1e-3 / np.std(X @ w)  # target spread ~1e-3 cm^-1
    y = X @ w + noise * rng.normal(size=2000)
    start = time.perf_counter()
    _, report = train_surrogate(X, y, 1600, 400, seed=0, hidden_layer_sizes=(16, 8),
                                max_epochs=400, patience=50, batch_size=32)
    elapsed = time.perf_counter() - start
    ok = grad_err < 1e-6 and report.validation_rmse <= 2 * noise
    verdict(8, "surrogate gradient and training", ok,
            f"gradient error {grad_err:.1e}, validation RMSE {report.validation_rmse:.2e} "
            f"(noise {noise:.0e}, {report.epochs} epochs, {elapsed:.1f} s)")


def test_criterion_09_smearing_and_threads():
    ph, cs = dense_bath(200, seed=0)
    model = RelaxationModel(ZERO_FIELD, ph, cs, eta=4.0, n_threads=1)
    T = 300.0
    full = model.relaxation(T, compute_T2=False).T1
    half = model.with_options(eta=2.0).relaxation(T, compute_T2=False).T1
    change = rel(half, full)
    threaded = model.with_options(n_threads=4).relaxation(T, compute_T2=False).T1
    drift = rel(threaded, full)
    ok = change < 0.10 and drift < 1e-12
    verdict(9, "smearing and thread determinism", ok,
            f"T1(eta=4)={full:.4e} s, T1(eta=2)={half:.4e} s, change {change:.2%}, thread drift {drift:.1e}")


def test_criterion_10_cutoff_scan():
    ph, cs = dense_bath(200, seed=0)
    model = RelaxationModel(ZERO_FIELD, ph, cs, eta=4.0)
    scan = cutoff_scan(model, 300.0, np.arange(80.0, 261.0, 5.0))
    finite = scan.T1[np.isfinite(scan.T1)]
    monotone = bool(np.all(np.diff(finite) <= finite[:-1] * 1e-12))
    reaches = rel(scan.T1[-1], scan.T1_full) < 1e-12
    ok = monotone and reaches and scan.converged_cutoff is not None
    verdict(10, "cutoff scan", ok,
            f"monotone={monotone}, final/full match={reaches}, 5% cutoff={scan.converged_cutoff} cm^-1")
