"""Ensemble statistics over flow responses and facies realizations."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .flowsim import ProductionRecord, breakthrough_time

VAR_FLOOR = 1e-12


@dataclass
class MomentMaps:
    """Per-cell population moments; kurtosis is non-excess (Gaussian -> 3)."""

    mean: np.ndarray
    variance: np.ndarray
    skewness: np.ndarray
    kurtosis: np.ndarray
    n: int

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean, "variance": self.variance,
                "skewness": self.skewness, "kurtosis": self.kurtosis}


def moment_maps(snapshots) -> MomentMaps:
    x = np.asarray(snapshots, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected (n, ny, nx) snapshots, got {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two snapshots")
    mu = x.mean(axis=0)
    d = x - mu
    m2 = (d ** 2).mean(axis=0)
    m3 = (d ** 3).mean(axis=0)
    m4 = (d ** 4).mean(axis=0)
    live = m2 >= VAR_FLOOR
    safe = np.where(live, m2, 1.0)
    skew = np.where(live, m3 / safe ** 1.5, 0.0)
    kurt = np.where(live, m4 / safe ** 2, 0.0)
    return MomentMaps(mu, m2, skew, kurt, n)


def point_histogram(values, bins: int = 25, lo: float = 0.0, hi: float = 1.0):
    """Counts of ``values`` over ``bins`` equal bins on [lo, hi]; returns (counts, edges)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("no values")
    return np.histogram(values, bins=bins, range=(lo, hi))


def max_variance_cell(maps: MomentMaps | np.ndarray) -> tuple[int, int]:
    var = maps.variance if isinstance(maps, MomentMaps) else np.asarray(maps)
    # np.argmax returns the first maximum in row-major order
    return tuple(int(k) for k in np.unravel_index(np.argmax(var), var.shape))


def random_cells(shape: tuple[int, int], count: int = 10, seed=None) -> list[tuple[int, int]]:
    rng = np.random.default_rng(seed)
    flat = rng.choice(shape[0] * shape[1], size=count, replace=False)
    return [tuple(int(v) for v in np.unravel_index(k, shape)) for k in flat]


@dataclass
class ProductionStats:
    times: np.ndarray
    pvi: np.ndarray
    producers: list[str]
    mean: np.ndarray          # (n_t, n_producers)
    variance: np.ndarray
    breakthrough: list[list[float | None]]   # per producer, per record
    bins: np.ndarray
    counts: np.ndarray        # (n_producers, n_bins)
    none_counts: np.ndarray   # records never reaching the threshold


def production_stats(records: list[ProductionRecord], bins: int | np.ndarray = 20,
                     threshold: float = 0.01) -> ProductionStats:
    if not records:
        raise ValueError("no records")
    ref = records[0]
    for r in records[1:]:
        if r.times.shape != ref.times.shape or not np.array_equal(r.times, ref.times):
            raise ValueError("records do not share a time grid")
        if r.producers != ref.producers:
            raise ValueError("records have different producers")
    cuts = np.stack([r.watercut for r in records])
    bt = [breakthrough_time(r, threshold) for r in records]
    per_producer = [[b[k] for b in bt] for k in range(len(ref.producers))]
    if np.isscalar(bins):
        edges = np.linspace(0.0, float(np.nanmax(ref.pvi)), int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=np.float64)
    counts = np.zeros((len(ref.producers), len(edges) - 1), dtype=int)
    none = np.zeros(len(ref.producers), dtype=int)
    for k, vals in enumerate(per_producer):
        hit = [v for v in vals if v is not None]
        none[k] = len(vals) - len(hit)
        counts[k] = np.histogram(hit, bins=edges)[0]
    return ProductionStats(ref.times, ref.pvi, list(ref.producers), cuts.mean(axis=0),
                           cuts.var(axis=0), per_producer, edges, counts, none)


@dataclass
class S2Curve:
    lags: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    direction: str
    per_realization: np.ndarray   # (n, n_lags)


def _s2_axis(x: np.ndarray, r: int, axis: int) -> np.ndarray:
    """Per-realization fraction of in-grid pairs at lag ``r`` along ``axis`` both in phase."""
    if r == 0:
        return x.mean(axis=(1, 2))
    n = x.shape[axis]
    a = np.take(x, np.arange(0, n - r), axis=axis)
    b = np.take(x, np.arange(r, n), axis=axis)
    return (a * b).mean(axis=(1, 2))


def two_point_probability(rasters, max_lag: int, direction: str = "axial") -> S2Curve:
    """S2(r) = P[x and x + r e both channel], over axial directions."""
    x = np.asarray(rasters, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    ny, nx = x.shape[1:]
    extent = {"x": nx, "y": ny, "axial": min(nx, ny)}[direction]
    if max_lag >= extent:
        raise ValueError(f"max lag {max_lag} must be below grid extent {extent}")
    lags = np.arange(max_lag + 1)
    per = np.zeros((x.shape[0], lags.size))
    for k, r in enumerate(lags):
        if direction == "x":
            per[:, k] = _s2_axis(x, r, 2)
        elif direction == "y":
            per[:, k] = _s2_axis(x, r, 1)
        else:
            per[:, k] = 0.5 * (_s2_axis(x, r, 2) + _s2_axis(x, r, 1))
    return S2Curve(lags, per.mean(axis=0), per.std(axis=0), direction, per)


# ---------------------------------------------------------------- export

def write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
                              for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_pgm(path, raster: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary PGM render, linearly scaled between lo and hi."""
    a = np.asarray(raster, dtype=np.float64)
    lo = float(np.nanmin(a)) if lo is None else lo
    hi = float(np.nanmax(a)) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    img = np.clip(np.round((a - lo) * scale), 0, 255).astype(np.uint8)
    ny, nx = img.shape
    Path(path).write_bytes(f"P5\n{nx} {ny}\n255\n".encode() + img.tobytes())
