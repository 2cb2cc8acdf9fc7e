"""Facies realizations: file formats, scaling, a procedural channel sampler,
point conditioning audits and a PCA baseline parametrization."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRID_MAGIC = b"GGRD"
SET_MAGIC = b"GSET"
FORMAT_VERSION = 1
MAX_EXTENT = 1 << 16

# Conditioning points used for the channelized benchmark: 13 channel, 3 background.
PAPER_CONDITIONING = [
    (12, 12, 1), (12, 25, 1), (12, 38, 1), (12, 51, 1),
    (25, 12, 1), (25, 25, 1), (25, 38, 0), (25, 51, 0),
    (38, 12, 1), (38, 25, 0), (38, 38, 1), (38, 51, 1),
    (51, 12, 1), (51, 25, 1), (51, 38, 1), (51, 51, 1),
]


class FormatError(ValueError):
    pass


@dataclass
class RealizationSet:
    """A stack of 2-D facies rasters, shape (count, ny, nx).

    ``domain`` is one of ``"gan"`` (values in [-1, 1]), ``"unit"`` ([0, 1]) or
    ``"binary"`` ({0, 1} after thresholding).
    """

    values: np.ndarray
    domain: str = "unit"
    conditioning: "ConditioningTable | None" = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.ndim != 3:
            raise ValueError(f"expected (count, ny, nx), got {self.values.shape}")
        if self.domain not in ("gan", "unit", "binary"):
            raise ValueError(f"unknown domain {self.domain!r}")

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, idx) -> np.ndarray:
        return self.values[idx]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]


# ---------------------------------------------------------------- file formats

def save_grid(raster: np.ndarray, path) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise FormatError(f"a grid file holds one 2-D raster, got shape {raster.shape}")
    ny, nx = raster.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<III", FORMAT_VERSION, ny, nx))
        fh.write(np.ascontiguousarray(raster, dtype="<f4").tobytes())


def load_grid(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FormatError("short read: missing grid header")
    magic = buf[:4]
    if magic == SET_MAGIC:
        raise FormatError("file holds a realization set, not a single grid")
    if magic != GRID_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    version, ny, nx = struct.unpack("<III", buf[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported grid version {version}")
    if ny > MAX_EXTENT or nx > MAX_EXTENT or ny == 0 or nx == 0:
        raise FormatError(f"implausible grid extents {ny}x{nx}")
    body = buf[16:]
    if len(body) != 4 * ny * nx:
        raise FormatError(f"short read: expected {4 * ny * nx} data bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(ny, nx).astype(np.float64)


def save_set(rs: RealizationSet | np.ndarray, path) -> None:
    values = rs.values if isinstance(rs, RealizationSet) else np.asarray(rs)
    count, ny, nx = values.shape
    with open(path, "wb") as fh:
        fh.write(SET_MAGIC + struct.pack("<IIII", FORMAT_VERSION, count, ny, nx))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_set(path, domain: str = "unit") -> RealizationSet:
    buf = Path(path).read_bytes()
    if len(buf) < 20:
        raise FormatError("short read: missing set header")
    if buf[:4] != SET_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}")
    version, count, ny, nx = struct.unpack("<IIII", buf[4:20])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported set version {version}")
    if ny > MAX_EXTENT or nx > MAX_EXTENT or ny == 0 or nx == 0:
        raise FormatError(f"implausible grid extents {ny}x{nx}")
    body = buf[20:]
    if len(body) != 4 * count * ny * nx:
        raise FormatError("short read: truncated realization data")
    values = np.frombuffer(body, dtype="<f4").reshape(count, ny, nx).astype(np.float64)
    return RealizationSet(values, domain=domain)


# ---------------------------------------------------------------- conditioning

@dataclass
class ConditioningTable:
    points: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.points = [(int(i), int(j), int(f)) for i, j, f in self.points]
        seen = set()
        for i, j, f in self.points:
            if f not in (0, 1):
                raise ValueError(f"facies must be 0 or 1, got {f} at ({i},{j})")
            if (i, j) in seen:
                raise ValueError(f"duplicate conditioning cell ({i},{j})")
            seen.add((i, j))

    def __len__(self) -> int:
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def check_grid(self, ny: int, nx: int) -> None:
        for i, j, _ in self.points:
            if not (0 <= i < ny and 0 <= j < nx):
                raise IndexError(f"conditioning point ({i},{j}) outside {ny}x{nx} grid")

    def honored(self, raster: np.ndarray) -> bool:
        return all(raster[i, j] == f for i, j, f in self.points)

    @classmethod
    def paper_default(cls) -> "ConditioningTable":
        return cls(PAPER_CONDITIONING)

    @classmethod
    def load(cls, path) -> "ConditioningTable":
        points = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected 'i j facies', got {line!r}")
            points.append(tuple(int(p) for p in parts))
        return cls(points)

    def save(self, path) -> None:
        lines = ["# i j facies"] + [f"{i} {j} {f}" for i, j, f in self.points]
        Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- scaling

def rescale_unit(x):
    """Map the generator's tanh range [-1, 1] onto [0, 1]."""
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def rescale_gan(x):
    return 2.0 * np.asarray(x, dtype=np.float64) - 1.0


def threshold(x, t: float = 0.5) -> np.ndarray:
    # ties go to channel
    return (np.asarray(x) >= t).astype(np.float64)


def to_permeability(binary, logk0: float = 0.0, logk1: float = 1.0) -> np.ndarray:
    binary = np.asarray(binary, dtype=np.float64)
    return np.exp(logk0 + binary * (logk1 - logk0))


# ---------------------------------------------------------------- procedural sampler

@dataclass
class ChannelParams:
    """Channel geometry, lengths expressed as fractions of the grid extent.

    thickness and amplitude scale with ny, wavelength with nx.
    """

    n_channels: tuple[int, int] = (3, 5)
    thickness: tuple[float, float] = (0.06, 0.10)
    amplitude: tuple[float, float] = (0.04, 0.12)
    wavelength: tuple[float, float] = (0.5, 1.5)

    def expected_fraction(self) -> float:
        """Channel coverage ignoring overlaps between bands."""
        mean_n = 0.5 * (self.n_channels[0] + self.n_channels[1])
        return min(1.0, mean_n * 0.5 * (self.thickness[0] + self.thickness[1]))


def sample_channels(ny: int, nx: int, params: ChannelParams | None = None, seed=None) -> np.ndarray:
    """Binary raster with meandering left-to-right sinusoidal channels.

    Each channel is a band ``|y - c(x)| < w/2`` around the centerline
    ``c(x) = y0 + A sin(2 pi x / lambda + phase)``; the centerline offset is
    drawn so the band stays inside the grid.
    """
    if ny < 8 or nx < 8:
        raise ValueError(f"grid {ny}x{nx} too small for channel sampling (min 8x8)")
    p = params or ChannelParams()
    rng = np.random.default_rng(seed)
    out = np.zeros((ny, nx))
    yc = np.arange(ny) + 0.5
    xc = np.arange(nx) + 0.5
    count = rng.integers(p.n_channels[0], p.n_channels[1] + 1)
    for _ in range(count):
        w = rng.uniform(*p.thickness) * ny
        amp = rng.uniform(*p.amplitude) * ny
        lam = rng.uniform(*p.wavelength) * nx
        phase = rng.uniform(0, 2 * np.pi)
        margin = min(amp + w / 2, ny / 2)
        y0 = rng.uniform(margin, ny - margin)
        if w <= 0:
            continue
        center = y0 + amp * np.sin(2 * np.pi * xc / lam + phase)
        out[np.abs(yc[:, None] - center[None, :]) < w / 2] = 1.0
    return out


def sample_channel_set(count: int, ny: int, nx: int, params: ChannelParams | None = None,
                       seed=None, table: ConditioningTable | None = None,
                       max_tries: int = 100_000) -> RealizationSet:
    """Draw ``count`` rasters, rejection-sampling against ``table`` when given."""
    if count < 1:
        raise ValueError("count must be >= 1")
    ss = np.random.SeedSequence(seed)
    rng = np.random.default_rng(ss)
    if table is not None:
        table.check_grid(ny, nx)
    rasters = []
    tries = 0
    while len(rasters) < count:
        if tries >= max_tries:
            raise RejectionBudgetExhausted(len(rasters), count, tries)
        tries += 1
        r = sample_channels(ny, nx, params, rng)
        if table is None or table.honored(r):
            rasters.append(r)
    return RealizationSet(np.stack(rasters), domain="binary", conditioning=table)


class RejectionBudgetExhausted(RuntimeError):
    def __init__(self, achieved: int, requested: int, tries: int):
        super().__init__(f"rejection budget exhausted after {tries} draws: "
                         f"{achieved} of {requested} realizations honor the conditioning")
        self.achieved = achieved
        self.requested = requested


# ---------------------------------------------------------------- conditioning audit

@dataclass
class AuditReport:
    """Mismatch statistics of a realization set against a conditioning table.

    ``distances[r, p]`` is 0 when realization ``r`` honors point ``p``;
    otherwise the Chebyshev distance to the nearest cell of the required
    facies (``inf`` if that facies is absent from the raster).
    """

    table: ConditioningTable
    distances: np.ndarray

    @property
    def mismatch(self) -> np.ndarray:
        return self.distances > 0

    @property
    def point_rates(self) -> np.ndarray:
        """Percentage of realizations mismatching each point."""
        return 100.0 * self.mismatch.mean(axis=0)

    @property
    def realization_counts(self) -> np.ndarray:
        return self.mismatch.sum(axis=1)

    def tolerance_table(self, max_tolerance: int = 4, max_count: int = 3) -> np.ndarray:
        """Percentage of realizations with >= c mismatches surviving tolerance k.

        Row k counts points whose misplacement exceeds k cells (row 0 is the
        exact check); column c-1 holds "c or more" mismatches.
        """
        n = self.distances.shape[0]
        rows = []
        for k in range(max_tolerance + 1):
            counts = (self.distances > k).sum(axis=1)
            rows.append([100.0 * np.count_nonzero(counts >= c) / n for c in range(1, max_count + 1)])
        return np.array(rows)


def misplacement_distance(raster: np.ndarray, i: int, j: int, facies: int) -> float:
    if raster[i, j] == facies:
        return 0.0
    ii, jj = np.nonzero(raster == facies)
    if ii.size == 0:
        return math.inf
    return float(np.max(np.abs(np.stack([ii - i, jj - j])), axis=0).min())


def audit_conditioning(rs: RealizationSet | np.ndarray, table: ConditioningTable) -> AuditReport:
    values = rs.values if isinstance(rs, RealizationSet) else np.asarray(rs)
    table.check_grid(*values.shape[1:])
    dist = np.zeros((values.shape[0], len(table)))
    for r, raster in enumerate(values):
        for p, (i, j, f) in enumerate(table):
            dist[r, p] = misplacement_distance(raster, i, j, f)
    return AuditReport(table, dist)


# ---------------------------------------------------------------- PCA baseline

@dataclass
class PcaModel:
    mean: np.ndarray            # (ny, nx)
    eigenvalues: np.ndarray     # all, descending
    components: np.ndarray      # (n_components, ny, nx), orthonormal when flattened
    k: int

    def sample(self, n: int, seed=None, xi: np.ndarray | None = None) -> RealizationSet:
        return pca_sample(self, n, seed, xi)


def pca_fit(data: RealizationSet | np.ndarray, energy: float = 0.75) -> PcaModel:
    """Fit mean and covariance eigenpairs; keep the smallest k reaching ``energy``."""
    values = data.values if isinstance(data, RealizationSet) else np.asarray(data, dtype=np.float64)
    if not 0 < energy <= 1:
        raise ValueError("energy must be in (0, 1]")
    n, ny, nx = values.shape
    if n < 2:
        raise ValueError("need at least two realizations")
    flat = values.reshape(n, -1)
    mu = flat.mean(axis=0)
    _, s, vt = np.linalg.svd(flat - mu, full_matrices=False)
    lam = s ** 2 / n
    tol = lam.max() * max(flat.shape) * np.finfo(float).eps if lam.size else 0.0
    rank = int(np.count_nonzero(lam > tol))
    lam = np.where(lam > tol, lam, 0.0)
    total = lam.sum()
    if total == 0:
        k = 0
    else:
        frac = np.cumsum(lam) / total
        k = int(np.searchsorted(frac, energy * (1 - 1e-12)) + 1)
        k = min(k, rank)
    return PcaModel(mu.reshape(ny, nx), lam, vt.reshape(-1, ny, nx), k)


def pca_sample(model: PcaModel, n: int, seed=None, xi: np.ndarray | None = None) -> RealizationSet:
    k = model.k
    if xi is None:
        xi = np.random.default_rng(seed).standard_normal((n, k))
    xi = np.asarray(xi, dtype=np.float64).reshape(n, k)
    basis = model.components[:k].reshape(k, -1) * np.sqrt(model.eigenvalues[:k])[:, None]
    flat = model.mean.reshape(1, -1) + xi @ basis
    return RealizationSet(flat.reshape(n, *model.mean.shape), domain="unit")


def pca_reconstruct(model: PcaModel, data: np.ndarray, k: int) -> np.ndarray:
    flat = np.asarray(data, dtype=np.float64).reshape(len(data), -1) - model.mean.reshape(1, -1)
    basis = model.components[:k].reshape(k, -1)
    return (model.mean.reshape(1, -1) + (flat @ basis.T) @ basis).reshape(np.shape(data))
