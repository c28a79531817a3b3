"""Command-line entry point: couple, relax, analyze, train, scan.

Exit codes: 0 success, 1 numerical failure, 2 configuration or I/O error.
The thread count of the rate assembly comes from ``SPINPHONON_NUM_THREADS``.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
import warnings

import numpy as np

from . import presets
from .analysis import PowerLaw, TwoModeRaman, coupling_peaks, cutoff_scan
from .config import ConfigError, RunConfig
from .coupling import (cartesian_derivatives, expand_cluster, load_couplings, mode_couplings,
                       save_couplings)
from .files import (file_sha256, read_results, read_xyz, write_manifest, write_results,
                    write_table, write_text_atomic)
from .phonons import coupling_density, load_phonons, phonon_dos
from .relaxation import IncompleteCouplingError, NoDecayError, RelaxationModel, default_threads
from .surrogate import (DTensorSurrogate, TrainingDivergedError, load_surrogate, load_training_csv,
                        save_surrogate)

logger = logging.getLogger("spinphonon")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2
NUMERIC_ERRORS = (IncompleteCouplingError, NoDecayError, TrainingDivergedError, ArithmeticError,
                  np.linalg.LinAlgError)


def load_bath(cfg: RunConfig):
    """Phonons and couplings from a preset or from ``paths.phonons`` / ``paths.couplings``."""
    preset = cfg["preset"]
    if preset is not None:
        spec = {"name": preset} if isinstance(preset, str) else dict(preset)
        name = spec.pop("name", None)
        if name not in presets.PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(presets.PRESETS)}")
        return presets.PRESETS[name](**spec)
    omega_min = float(cfg["numerics"]["omega_min_cm1"])
    phonons = load_phonons(cfg.require_path("phonons"), omega_min)
    couplings = load_couplings(cfg.require_path("couplings"))
    if couplings.n_modes != phonons.n_modes:
        raise ConfigError(f"coupling file has {couplings.n_modes} modes, phonon file retains "
                          f"{phonons.n_modes} above omega_min")
    if couplings.mode_subset is not None and not np.array_equal(couplings.mode_subset,
                                                                phonons.mode_indices):
        raise ConfigError("coupling file was computed for a different set of retained modes")
    return phonons, couplings


def build_model(cfg: RunConfig, phonons=None, couplings=None) -> RelaxationModel:
    if phonons is None:
        phonons, couplings = load_bath(cfg)
    num, tog, spin = cfg["numerics"], cfg["toggles"], cfg["spin"]
    return RelaxationModel(
        cfg.spin_system(), phonons, couplings,
        eta=float(num["eta_cm1"]), smearing=num["smearing"],
        cutoff=None if num["cutoff_cm1"] is None else float(num["cutoff_cm1"]),
        r4_epsilon=float(num["r4_epsilon_cm1"]),
        enable_R2_1ph=bool(tog["enable_R2_1ph"]), enable_R2_2ph=bool(tog["enable_R2_2ph"]),
        enable_R4=bool(tog["enable_R4"]), balanced=bool(num["balanced_occupations"]),
        channels=num["two_phonon_channels"], initial_ms=float(spin["initial_ms"]),
        monitor_ms=float(spin["monitor_ms"]), time_decades=float(num["time_decades"]),
        n_threads=default_threads())


def _evaluator(cfg: RunConfig, geometry):
    ev = cfg["evaluator"]
    kind = ev.get("kind", "surrogate")
    if kind == "surrogate":
        path = cfg.require_path("surrogate")
        surrogate = load_surrogate(path)
        surrogate.reference = geometry
        return surrogate, f"surrogate:{file_sha256(path)}"
    if kind == "polynomial":
        seed = int(ev.get("seed", 0))
        return (presets.PolynomialDTensor.random(geometry, seed, float(ev.get("scale", 0.1))),
                f"polynomial:seed={seed}")
    if kind == "zero":
        return presets.PolynomialDTensor.zero(geometry), "zero"
    raise ConfigError(f"unknown evaluator kind {kind!r}")


def cmd_couple(cfg: RunConfig, args) -> int:
    cfg.validate(needed=("geometry", "phonons"))
    geometry = read_xyz(cfg.require_path("geometry"))
    phonons = load_phonons(cfg.require_path("phonons"), float(cfg["numerics"]["omega_min_cm1"]))
    evaluator, checksum = _evaluator(cfg, geometry)
    num = cfg["numerics"]
    step = float(num["grid_step_A"])
    second = bool(num["second_order"])
    first_cart, second_cart = cartesian_derivatives(evaluator, geometry, step, second=second)
    if geometry.n_atoms != phonons.n_atoms:
        map_path = cfg.path("index_map")
        if map_path is None:
            raise ConfigError(
                f"cluster has {geometry.n_atoms} atoms but phonons describe {phonons.n_atoms}; "
                "paths.index_map is required")
        index_map = np.loadtxt(cfg.require_path("index_map"), dtype=int, ndmin=1)
        if index_map.size != geometry.n_atoms:
            raise ConfigError("index map length differs from the cluster atom count")
        first_cart = expand_cluster(first_cart, index_map, phonons.n_atoms, 1)
        if second:
            second_cart = expand_cluster(second_cart, index_map, phonons.n_atoms, 2)
    window = num["second_window_cm1"]
    couplings = mode_couplings(first_cart, phonons, second_cart if second else None,
                               max_gap=None if window is None else float(window))
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / "couplings.txt"
    tmp = out_dir / ".couplings.txt.tmp"
    save_couplings(tmp, couplings)
    tmp.replace(out)
    provenance = {"grid_step_A": step, "grid_first": "1D, 6 points", "grid_second": "2D, 6x6 points",
                  "evaluator": checksum, "n_modes": couplings.n_modes,
                  "n_pairs": int(couplings.pairs.shape[0])}
    logger.info("wrote %s (%d modes, %d pairs)", out, couplings.n_modes, couplings.pairs.shape[0])
    write_manifest(out_dir / "manifest_couple.json", "couple", cfg.data, [out],
                   {"provenance": provenance})
    return EXIT_OK


def _eta_check(model: RelaxationModel, T: float) -> dict:
    full = model.relaxation(T, compute_T2=False).T1
    half = model.with_options(eta=0.5 * model.eta).relaxation(T, compute_T2=False).T1
    change = abs(half - full) / full if math.isfinite(full) and full > 0 else 0.0
    check = {"temperature_K": T, "eta_cm1": model.eta, "T1_s": full, "T1_half_eta_s": half,
             "relative_change": change, "converged": change < 0.1}
    if check["converged"]:
        logger.info("eta convergence: T1 changes by %.2f%% from eta=%g to eta/2", 100 * change, model.eta)
    else:
        logger.warning("eta NOT converged: T1 changes by %.1f%% between eta=%g and eta/2",
                       100 * change, model.eta)
    return check


def cmd_relax(cfg: RunConfig, args) -> int:
    cfg.validate()
    temps = cfg.temperatures()
    model = build_model(cfg)
    tog = cfg["toggles"]
    results = model.sweep(temps, compute_T2=bool(tog["compute_T2"]),
                          per_mechanism=bool(tog["per_mechanism"]))
    out_dir = cfg.output_dir
    out = out_dir / "results.csv"
    write_results(out, results)
    extra = {}
    if tog["eta_check"]:
        extra["eta_check"] = _eta_check(model, float(temps[-1]))
    for r in results:
        logger.info("T = %g K: T1 = %.6g s, T2 = %.6g s, T2* = %.6g s", r.temperature, r.T1, r.T2, r.T2_star)
    write_manifest(out_dir / "manifest_relax.json", "relax", cfg.data, [out], extra)
    return EXIT_OK


def _spectra(cfg: RunConfig, phonons, couplings, out_dir):
    an = cfg["analysis"]
    grid = np.linspace(float(an["grid_min_cm1"]), float(an["grid_max_cm1"]), int(an["grid_points"]))
    eta = float(cfg["numerics"]["eta_cm1"])
    dos = phonon_dos(phonons, grid, eta)
    vw = coupling_density(couplings, phonons, grid, eta)
    write_table(out_dir / "dos.csv", {"omega_cm1": grid, "dos_per_cm1": dos.values})
    write_table(out_dir / "coupling_density.csv", {"omega_cm1": grid, "V_cm1": vw.values})
    return vw, [out_dir / "dos.csv", out_dir / "coupling_density.csv"]


def _scan_table(scan, out_path):
    write_table(out_path, {"cutoff_cm1": scan.cutoffs, "T1_s": scan.T1})
    if scan.converged_cutoff is None:
        logger.warning("no cutoff reaches within 5%% of the full T1 = %.6g s", scan.T1_full)
    else:
        logger.info("T1 within 5%% of the full value (%.6g s) from cutoff %g cm^-1",
                    scan.T1_full, scan.converged_cutoff)


def cmd_analyze(cfg: RunConfig, args) -> int:
    results_path = args.results or (cfg.output_dir / "results.csv")
    table = read_results(results_path)
    T = np.asarray(table["T_K"], dtype=float)
    T1 = np.asarray(table["T1_s"], dtype=float)
    ok = np.isfinite(T1) & (T1 > 0) & (T > 0)
    T, rates = T[ok], 1.0 / T1[ok]
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    an = cfg["analysis"]
    bath = None
    if cfg["preset"] is not None or (cfg.path("phonons") and cfg.path("couplings")):
        bath = load_bath(cfg)
    initial = None
    if an["initial_e1_cm1"] is not None and an["initial_e2_cm1"] is not None:
        initial = (float(an["initial_e1_cm1"]), float(an["initial_e2_cm1"]))
    fits = []
    if bath is not None:
        vw, files = _spectra(cfg, *bath, out_dir)
        outputs += files
        peaks = coupling_peaks(vw)
        if initial is None and peaks.size == 2:
            initial = tuple(float(p) for p in peaks)
            logger.info("initial energies from V(omega) peaks: %s cm^-1", initial)
    if T.size >= 6:
        kwargs = {"loss": an["loss"]}
        if initial is not None:
            kwargs.update(e1_init=initial[0], e2_init=initial[1])
        fits.append(TwoModeRaman(**kwargs).fit(T, rates).fit_result_)
    else:
        logger.warning("only %d temperature points: skipping the two-mode fit (needs 6)", T.size)
    if T.size >= 2:
        fits.append(PowerLaw().fit(T, rates).fit_result_)
    reports = [f.report() for f in fits]
    report_path = out_dir / "fit_report.txt"
    write_text_atomic(report_path, "\n\n".join(reports) + "\n")
    rows = [row for f in fits for row in f.rows()]
    fit_csv = out_dir / "fits.csv"
    write_table(fit_csv, {"model": [r[0] for r in rows], "parameter": [r[1] for r in rows],
                          "value": [r[2] for r in rows], "stderr": [r[3] for r in rows],
                          "unit": [r[4] for r in rows]})
    outputs += [report_path, fit_csv]
    if bath is not None and an["cutoffs_cm1"]:
        scan = cutoff_scan(build_model(cfg, *bath), float(an["scan_temperature_K"]), an["cutoffs_cm1"])
        _scan_table(scan, out_dir / "cutoff_scan.csv")
        outputs.append(out_dir / "cutoff_scan.csv")
    print("\n\n".join(reports))
    write_manifest(out_dir / "manifest_analyze.json", "analyze", cfg.data, outputs,
                   {"results": str(results_path)})
    return EXIT_OK


def cmd_scan(cfg: RunConfig, args) -> int:
    cfg.validate()
    an = cfg["analysis"]
    cutoffs = args.cutoffs or an["cutoffs_cm1"]
    if not cutoffs:
        raise ConfigError("no cutoffs given (analysis.cutoffs_cm1 or --cutoffs)")
    T = float(args.temperature if args.temperature is not None else an["scan_temperature_K"])
    scan = cutoff_scan(build_model(cfg), T, cutoffs)
    out = cfg.output_dir / "cutoff_scan.csv"
    _scan_table(scan, out)
    write_manifest(cfg.output_dir / "manifest_scan.json", "scan", cfg.data, [out],
                   {"T1_full_s": scan.T1_full, "converged_cutoff_cm1": scan.converged_cutoff})
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    cfg.validate(needed=("training_data", "geometry"))
    geometry = read_xyz(cfg.require_path("geometry"))
    X, Y = load_training_csv(cfg.require_path("training_data"))
    if X.shape[1] != 3 * geometry.n_atoms:
        raise ConfigError(f"training data has {X.shape[1]} displacement columns, geometry needs "
                          f"{3 * geometry.n_atoms}")
    tr = cfg["training"]
    n_train = tr["n_train"] if tr["n_train"] is not None else int(round(0.8 * X.shape[0]))
    n_val = tr["n_val"] if tr["n_val"] is not None else X.shape[0] - n_train
    surrogate = DTensorSurrogate(
        reference=geometry, hidden_layer_sizes=tuple(tr["hidden_layer_sizes"]),
        l2_lambda=float(tr["l2_lambda"]), learning_rate=float(tr["learning_rate"]),
        batch_size=int(tr["batch_size"]), max_epochs=int(tr["max_epochs"]),
        patience=tr["patience"], random_state=int(cfg["seed"]), n_jobs=int(tr["n_jobs"]))
    surrogate.fit(X, Y, n_train, n_val)
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / "surrogate.txt"
    tmp = out_dir / ".surrogate.txt.tmp"
    save_surrogate(tmp, surrogate)
    tmp.replace(model_path)
    report = out_dir / "training_report.csv"
    reps = surrogate.reports_
    write_table(report, {"component": ["xx", "yy", "zz", "xy", "xz", "yz"],
                         "train_rmse_cm1": [r.train_rmse for r in reps],
                         "validation_rmse_cm1": [r.validation_rmse for r in reps],
                         "epochs": [r.epochs for r in reps]})
    for name, r in zip(("xx", "yy", "zz", "xy", "xz", "yz"), reps):
        logger.info("D%s: train RMSE %.3e, validation RMSE %.3e cm^-1 after %d epochs",
                    name, r.train_rmse, r.validation_rmse, r.epochs)
    write_manifest(out_dir / "manifest_train.json", "train", cfg.data, [model_path, report])
    return EXIT_OK


COMMANDS = {"couple": cmd_couple, "relax": cmd_relax, "analyze": cmd_analyze, "train": cmd_train,
            "scan": cmd_scan}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spinphonon", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"couple": "compute spin-phonon coupling coefficients",
             "relax": "T1 / T2 temperature sweep",
             "analyze": "fit temperature laws, write spectra and cutoff scans",
             "train": "train the D-tensor surrogate",
             "scan": "phonon-energy cutoff scan at one temperature"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a configuration key (repeatable)")
        p.add_argument("--output-dir", help="override paths.output_dir")
        if name == "analyze":
            p.add_argument("--results", help="results CSV (default: <output_dir>/results.csv)")
        if name == "scan":
            p.add_argument("--temperature", type=float, help="temperature in K")
            p.add_argument("--cutoffs", type=float, nargs="+", help="cutoffs in cm^-1")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    try:
        overrides = list(args.set)
        if args.output_dir:
            overrides.append(f"paths.output_dir={args.output_dir}")
        cfg = RunConfig.load(args.config, overrides)
        if getattr(args, "results", None):
            from pathlib import Path

            args.results = Path(args.results)
            if not args.results.exists():
                raise FileNotFoundError(f"results file not found: {args.results}")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](cfg, args)
    except NUMERIC_ERRORS as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        # ConfigError, PhononFormatError, malformed tables and missing files
        logger.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
