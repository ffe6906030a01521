"""Report emission: CSV tables, JSON summaries, and run manifests.

Numbers are formatted with shortest-roundtrip repr, so identical
doubles give identical bytes; all report content is a pure function of
(config, seed), which is what makes re-runs byte-identical.
"""

import csv
import io
import json
import os
import platform
import sys
import time

import numpy as np

from .errors import InputError, OutputError


def _format_value(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    """Write a CSV table with deterministic float formatting."""
    if not rows:
        raise InputError("refusing to write an empty report")
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_format_value(x) for x in row])
    except OSError as e:
        raise OutputError("cannot write report %s: %s" % (path, e))


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.bool_,)):
        return bool(x)
    raise TypeError("not JSON serializable: %r" % (x,))


def write_json(path, payload):
    if not payload:
        raise InputError("refusing to write an empty report")
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
    except OSError as e:
        raise OutputError("cannot write report %s: %s" % (path, e))


def versions():
    import scipy

    from . import __version__
    from ._backend import HAVE_NUMBA, backend_name

    out = {
        "package": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "backend": backend_name(),
    }
    if HAVE_NUMBA:
        import numba

        out["numba"] = numba.__version__
    return out


def write_manifest(path, experiment, config, started, outputs):
    """Run manifest: everything needed to regenerate the bundle."""
    payload = {
        "experiment": experiment,
        "config": {k: _format_value(v) for k, v in sorted(config.items())},
        "command": " ".join(sys.argv),
        "versions": versions(),
        "wall_time_s": round(time.time() - started, 3),
        "outputs": sorted(os.path.basename(p) for p in outputs),
    }
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as e:
        raise OutputError("cannot write manifest %s: %s" % (path, e))
    return payload


def moment_rows(report):
    """Flatten a MomentReport into the fixed 6-column layout."""
    rows = []
    for r in report.rows:
        rows.append([r.n, r.statistic, r.estimate, r.se, r.oracle, r.z])
    return rows


def moment_json(report):
    """JSON mirror of the CSV with the |z| < 3 verdict per row."""
    rows = []
    all_ok = True
    for r in report.rows:
        ok = bool(abs(r.z) < 3.0) if np.isfinite(r.z) else None
        if ok is False:
            all_ok = False
        rows.append(
            {
                "n": r.n,
                "statistic": r.statistic,
                "estimate": r.estimate,
                "se": r.se,
                "oracle": None if not np.isfinite(r.oracle) else r.oracle,
                "z": None if not np.isfinite(r.z) else r.z,
                "pass": ok,
            }
        )
    return {"replicas": report.replicas, "rows": rows, "all_pass": all_ok}


def render_table(header, rows):
    """Small fixed-width text table for terminal summaries."""
    buf = io.StringIO()
    cols = [len(h) for h in header]
    text_rows = [[_format_value(x) for x in row] for row in rows]
    for row in text_rows:
        for j, x in enumerate(row):
            cols[j] = max(cols[j], len(x))
    fmt = "  ".join("%%-%ds" % c for c in cols)
    buf.write(fmt % tuple(header) + "\n")
    for row in text_rows:
        buf.write(fmt % tuple(row) + "\n")
    return buf.getvalue()
