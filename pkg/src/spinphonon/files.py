"""Result tables, geometry files, run manifests and atomic file output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import platform
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .coupling import Geometry

RESULT_COLUMNS = ("T_K", "T1_s", "T2_s", "T2star_s", "rate_1ph", "rate_R2_2ph", "rate_R4_2ph",
                  "eta_cm1", "cutoff_cm1")
_MECHANISM_COLUMNS = {"R2_1ph": "rate_1ph", "R2_2ph": "rate_R2_2ph", "R4_2ph": "rate_R4_2ph"}


@contextmanager
def atomic_write(path, mode="w"):
    """Write to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, newline="" if "b" not in mode else None) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text: str) -> None:
    with atomic_write(path) as fh:
        fh.write(text)


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def _parse(text: str):
    return None if text == "" else float(text)


def results_table(results) -> dict:
    """Column arrays for a list of :class:`RelaxationResult`; disabled mechanisms are NaN."""
    table = {c: [] for c in RESULT_COLUMNS}
    for r in results:
        table["T_K"].append(r.temperature)
        table["T1_s"].append(r.T1)
        table["T2_s"].append(r.T2)
        table["T2star_s"].append(r.T2_star)
        for mech, col in _MECHANISM_COLUMNS.items():
            table[col].append(r.mechanism_rates.get(mech, math.nan))
        table["eta_cm1"].append(r.eta)
        table["cutoff_cm1"].append(r.cutoff)
    return table


def write_table(path, table: dict, columns=None) -> None:
    columns = list(table) if columns is None else list(columns)
    n = len(table[columns[0]])
    with atomic_write(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for k in range(n):
            writer.writerow([_fmt(table[c][k]) if not isinstance(table[c][k], str) else table[c][k]
                             for c in columns])


def read_table(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        table = {c: [] for c in header}
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: row has {len(row)} fields, header has {len(header)}")
            for c, v in zip(header, row):
                try:
                    table[c].append(_parse(v))
                except ValueError:
                    table[c].append(v)
    return table


def write_results(path, results) -> None:
    write_table(path, results_table(results), RESULT_COLUMNS)


def read_results(path) -> dict:
    table = read_table(path)
    missing = [c for c in ("T_K", "T1_s") if c not in table]
    if missing:
        raise ValueError(f"{path}: missing result columns {missing}")
    return table


def read_xyz(path) -> Geometry:
    lines = Path(path).read_text().splitlines()
    try:
        n = int(lines[0].split()[0])
    except (IndexError, ValueError):
        raise ValueError(f"{path}:1: expected the atom count") from None
    labels, coords = [], []
    for k, line in enumerate(lines[2:2 + n], start=3):
        parts = line.split()
        if len(parts) < 4:
            raise ValueError(f"{path}:{k}: expected 'label x y z'")
        labels.append(parts[0])
        coords.append([float(v) for v in parts[1:4]])
    if len(coords) != n:
        raise ValueError(f"{path}: expected {n} atoms, found {len(coords)}")
    return Geometry(np.array(coords), labels)


def write_xyz(path, geom: Geometry, comment="") -> None:
    labels = geom.labels or ("X",) * geom.n_atoms
    out = [str(geom.n_atoms), comment]
    out += [f"{lab} {x:.17g} {y:.17g} {z:.17g}" for lab, (x, y, z) in zip(labels, geom.coordinates)]
    Path(path).write_text("\n".join(out) + "\n")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def software_versions() -> dict:
    import scipy
    import sklearn

    from . import __version__

    return {"spinphonon": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def write_manifest(path, command: str, config: dict, outputs=(), extra=None) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": config_hash(config),
        "seed": config.get("seed"),
        "threads": int(os.environ.get("SPINPHONON_NUM_THREADS", "1")),
        "versions": software_versions(),
        "outputs": {str(p): file_sha256(p) for p in outputs if Path(p).exists()},
    }
    if extra:
        manifest.update(extra)
    buf = io.StringIO()
    json.dump(manifest, buf, indent=2, sort_keys=True, default=str)
    write_text_atomic(path, buf.getvalue() + "\n")
    return manifest
