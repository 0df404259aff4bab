"""Timing of the two scatter blurs on both kernel backends."""
from __future__ import annotations

import csv
import time

import numpy as np

from . import _kernels
from .bokeh import scatter_blur_brute, scatter_blur_gradient

METHODS = {"brute": scatter_blur_brute, "gradient": scatter_blur_gradient}


def available_backends():
    out = {}
    if _kernels.compiled is not None:
        out["cython"] = _kernels.compiled
    out["python"] = _kernels.python
    return out


def _time(fn, repetitions):
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def bench_blur(sizes=(512,), radii=(4, 8, 16, 32), repetitions=3, backends=None,
               methods=("brute", "gradient"), seed=0):
    """Median wall time (ms) of each blur on a random RGBA layer with a
    constant radius. Returns rows of dicts with keys size, radius, method,
    backend, ms. A plain array copy is reported as method ``copy``."""
    rng = np.random.default_rng(seed)
    pool = available_backends()
    names = list(pool) if backends is None else list(backends)
    rows = []
    for size in sizes:
        layer = rng.uniform(size=(size, size, 4))
        rows.append({"size": size, "radius": 0, "method": "copy", "backend": "numpy",
                     "ms": _time(layer.copy, repetitions)})
        for name in names:
            if name not in pool:
                raise ValueError(f"backend {name!r} is not available")
            for r in radii:
                rad = np.full((size, size), float(r))
                for m in methods:
                    fn = METHODS[m]
                    ms = _time(lambda: fn(layer, rad, backend=pool[name]), repetitions)
                    rows.append({"size": size, "radius": r, "method": m, "backend": name, "ms": ms})
    return rows


def loglog_slope(rows, method, backend, key="radius", size=None):
    """Least-squares slope of log(ms) against log(key)."""
    sel = [r for r in rows if r["method"] == method and r["backend"] == backend
           and r[key] > 0 and (size is None or r["size"] == size)]
    if len(sel) < 2:
        raise ValueError("need at least two points")
    x = np.log([r[key] for r in sel])
    y = np.log([r["ms"] for r in sel])
    return float(np.polyfit(x, y, 1)[0])


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["size", "radius", "method", "backend", "ms"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "ms": f"{r['ms']:.3f}"})
