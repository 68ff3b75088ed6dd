"""Aggregation of per-case result records into ``mean (std)`` tables."""
import csv
import io
import json
from collections import defaultdict

import numpy as np

from ._io import atomic_write_text


def read_results(paths):
    """All records from JSON-lines result files; duplicate cases are rejected."""
    recs, seen = [], set()
    for p in paths:
        with open(p) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    r = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{p}:{lineno}: {exc}") from exc
                try:
                    key = (r["variant"], r["direction"], r["n_xi"], r["seed"], r["case"])
                except (KeyError, TypeError) as exc:
                    raise ValueError(f"{p}:{lineno}: not a result record (missing {exc})") from exc
                if key in seen:
                    raise ValueError(f"{p}:{lineno}: duplicate record {key}")
                seen.add(key)
                recs.append(r)
    return recs


def aggregate(records, metric, scale=1.0):
    """``{(n_xi, variant): (mean, std, count)}`` over every (seed, case) record.

    Standard deviations use ddof = 0, so a single case gives std 0.
    """
    groups = defaultdict(list)
    for r in records:
        groups[(r["n_xi"], r["variant"])].append(scale * r[metric])
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()}


def format_cell(mean, std, digits=3):
    return f"{mean:.{digits}f} ({std:.{digits}f})"


def render(table, digits=3):
    rows = sorted({k[0] for k in table})
    cols = sorted({k[1] for k in table})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_xi", *cols])
    for n in rows:
        w.writerow([n, *(format_cell(*table[(n, c)][:2], digits) if (n, c) in table else "" for c in cols)])
    return buf.getvalue()


def write_table(path, table, digits=3):
    atomic_write_text(path, render(table, digits))
