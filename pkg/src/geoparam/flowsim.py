"""Incompressible Darcy flow with explicit upwind water transport on the unit square.

Cells are indexed ``(i, j)`` with ``i`` the row (y direction) and ``j`` the
column (x direction). Face fluxes are volumetric rates, positive in the +x
(resp. +i) direction:

* ``fx`` has shape (ny, nx + 1); ``fx[:, 0]`` and ``fx[:, nx]`` are the
  left and right boundary faces.
* ``fy`` has shape (ny + 1, nx); rows 0 and ny are boundary faces.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geodata import save_grid

UNIFORM = "uniform-flow"
QUARTER_FIVE = "quarter-five"
WELLS = "wells"
KINDS = (UNIFORM, QUARTER_FIVE, WELLS)


class ConvergenceError(RuntimeError):
    pass


class SaturationBreach(RuntimeError):
    pass


@dataclass
class Well:
    i: int
    j: int
    rate: float
    name: str = ""


@dataclass
class FlowScenario:
    """Boundary/well specification plus time controls.

    ``rate`` is the total boundary throughput for uniform flow and the
    injector/producer magnitude for the quarter-five spot; explicit ``wells``
    are used for kind ``"wells"``.
    """

    kind: str = UNIFORM
    wells: list[Well] = field(default_factory=list)
    porosity: float = 0.2
    t_end: float = 0.4
    snapshots: tuple[float, ...] = (0.1,)
    rate: float = 1.0
    n_report: int = 200
    cfl: float = 0.9
    cg_tol: float = 1e-10
    injected_saturation: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not 0 < self.porosity <= 1:
            raise ValueError("porosity must lie in (0, 1]")
        self.snapshots = tuple(float(t) for t in self.snapshots)
        self.wells = [w if isinstance(w, Well) else Well(*w) for w in self.wells]

    def sources(self, ny: int, nx: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (cell source q, left boundary influx, right boundary outflux)."""
        q = np.zeros((ny, nx))
        left = np.zeros(ny)
        right = np.zeros(ny)
        if self.kind == UNIFORM:
            left[:] = self.rate / ny
            right[:] = self.rate / ny
        elif self.kind == QUARTER_FIVE:
            q[0, 0] += self.rate
            q[ny - 1, nx - 1] -= self.rate
        else:
            for w in self.wells:
                if not (0 <= w.i < ny and 0 <= w.j < nx):
                    raise ValueError(f"well at ({w.i},{w.j}) outside {ny}x{nx} grid")
                q[w.i, w.j] += w.rate
        net = q.sum() + left.sum() - right.sum()
        if abs(net) > 1e-12 * max(1.0, np.abs(q).sum() + left.sum()):
            raise ValueError(f"scenario is not balanced: net source {net:g}")
        return q, left, right

    def producers(self, ny: int, nx: int) -> list[tuple[str, tuple[int, int] | None]]:
        if self.kind == UNIFORM:
            return [("outflow", None)]
        if self.kind == QUARTER_FIVE:
            return [("producer_0", (ny - 1, nx - 1))]
        return [(w.name or f"producer_{k}", (w.i, w.j))
                for k, w in enumerate(x for x in self.wells if x.rate < 0)]

    def injection_rate(self, ny: int = 1, nx: int = 1) -> float:
        if self.kind == UNIFORM:
            return self.rate
        if self.kind == QUARTER_FIVE:
            return self.rate
        return sum(w.rate for w in self.wells if w.rate > 0)

    # -------------------------------------------------------- text format

    @classmethod
    def parse(cls, text: str) -> "FlowScenario":
        kw: dict = {}
        wells = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, val = (s.strip() for s in line.split("=", 1))
                if key == "kind":
                    kw[key] = val
                elif key == "snapshots":
                    kw[key] = tuple(float(v) for v in val.replace(",", " ").split())
                elif key in ("n_report",):
                    kw[key] = int(val)
                elif key in ("porosity", "t_end", "rate", "cfl", "cg_tol", "injected_saturation"):
                    kw[key] = float(val)
                else:
                    raise ValueError(f"line {lineno}: unknown scenario key {key!r}")
                continue
            parts = line.split()
            if parts[0] == "well":
                parts = parts[1:]
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 'cell_i cell_j rate', got {raw!r}")
            wells.append(Well(int(parts[0]), int(parts[1]), float(parts[2])))
        if wells:
            kw.setdefault("kind", WELLS)
        return cls(wells=wells, **kw)

    @classmethod
    def load(cls, path) -> "FlowScenario":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        lines = [f"kind = {self.kind}", f"porosity = {self.porosity!r}", f"t_end = {self.t_end!r}",
                 "snapshots = " + " ".join(repr(t) for t in self.snapshots),
                 f"rate = {self.rate!r}", f"n_report = {self.n_report}"]
        lines += [f"{w.i} {w.j} {w.rate!r}" for w in self.wells]
        return "\n".join(lines) + "\n"


def uniform_flow(**kw) -> FlowScenario:
    return FlowScenario(kind=UNIFORM, **kw)


def quarter_five(**kw) -> FlowScenario:
    return FlowScenario(kind=QUARTER_FIVE, **kw)


# relative (row, col) positions of one injector and five producers
HISTORY_MATCH_LAYOUT = [
    (0.5, 0.1, 1.0),
    (0.1, 0.5, -0.2), (0.9, 0.5, -0.2),
    (0.1, 0.9, -0.2), (0.5, 0.9, -0.2), (0.9, 0.9, -0.2),
]


def five_producer_wells(ny: int, nx: int, **kw) -> FlowScenario:
    """One unit-rate injector and five producers at rate -0.2."""
    wells = []
    for k, (ry, rx, rate) in enumerate(HISTORY_MATCH_LAYOUT):
        name = "injector" if rate > 0 else f"producer_{k - 1}"
        wells.append(Well(min(ny - 1, int(ry * ny)), min(nx - 1, int(rx * nx)), rate, name))
    return FlowScenario(kind=WELLS, wells=wells, **kw)


# ---------------------------------------------------------------- pressure

@dataclass
class PressureSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    tx: np.ndarray          # (ny, nx-1) transmissibilities of interior x-faces
    ty: np.ndarray          # (ny-1, nx)
    q: np.ndarray           # (ny, nx) well sources
    left: np.ndarray
    right: np.ndarray
    pinned: int = 0


@dataclass
class FlowField:
    pressure: np.ndarray    # (ny, nx)
    fx: np.ndarray          # (ny, nx+1)
    fy: np.ndarray          # (ny+1, nx)
    q: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    def mass_balance(self) -> np.ndarray:
        """Per-cell net outflow minus source; zero for a converged solve."""
        return (self.fx[:, 1:] - self.fx[:, :-1]) + (self.fy[1:] - self.fy[:-1]) - self.q


def harmonic_mean(a, b):
    return 2.0 * a * b / (a + b)


def assemble_pressure(perm: np.ndarray, scenario: FlowScenario) -> PressureSystem:
    """Two-point flux discretization of -div(a grad p) = q on the unit square."""
    a = np.asarray(perm, dtype=np.float64)
    if np.any(~np.isfinite(a)) or np.any(a <= 0):
        raise ValueError("permeability must be positive and finite")
    ny, nx = a.shape
    dx, dy = 1.0 / nx, 1.0 / ny
    tx = harmonic_mean(a[:, :-1], a[:, 1:]) * dy / dx
    ty = harmonic_mean(a[:-1, :], a[1:, :]) * dx / dy
    q, left, right = scenario.sources(ny, nx)

    idx = np.arange(ny * nx).reshape(ny, nx)
    diag = np.zeros((ny, nx))
    diag[:, :-1] += tx
    diag[:, 1:] += tx
    diag[:-1, :] += ty
    diag[1:, :] += ty
    rows = [idx[:, :-1].ravel(), idx[:, 1:].ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel()]
    cols = [idx[:, 1:].ravel(), idx[:, :-1].ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel()]
    vals = [-tx.ravel(), -tx.ravel(), -ty.ravel(), -ty.ravel()]
    rhs = q.copy()
    rhs[:, 0] += left
    rhs[:, -1] -= right
    rhs = rhs.ravel()

    pinned = 0
    r = np.concatenate(rows + [idx.ravel()])
    c = np.concatenate(cols + [idx.ravel()])
    v = np.concatenate(vals + [diag.ravel()])
    keep = (r != pinned) & (c != pinned)
    r, c, v = r[keep], c[keep], v[keep]
    r = np.append(r, pinned)
    c = np.append(c, pinned)
    v = np.append(v, 1.0)
    rhs[pinned] = 0.0
    A = sp.csr_matrix((v, (r, c)), shape=(ny * nx, ny * nx))
    A.sum_duplicates()
    return PressureSystem(A, rhs, tx, ty, q, left, right, pinned)


def solve_pressure(system: PressureSystem, tol: float = 1e-10, max_iter: int | None = None) -> FlowField:
    """Jacobi-preconditioned CG solve followed by face flux reconstruction."""
    A, b = system.matrix, system.rhs
    n = b.size
    ny, nx = system.q.shape
    max_iter = max_iter or 10 * n
    bnorm = np.linalg.norm(b)
    iters = 0
    if bnorm == 0:
        p = np.zeros(n)
    else:
        def count(_):
            nonlocal iters
            iters += 1

        M = sp.diags(1.0 / A.diagonal())
        p, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=max_iter, M=M, callback=count)
        if info != 0:
            res = np.linalg.norm(b - A @ p) / bnorm
            raise ConvergenceError(f"CG did not converge in {max_iter} iterations "
                                   f"(relative residual {res:.3e})")
    residual = float(np.linalg.norm(b - A @ p) / bnorm) if bnorm else 0.0
    p = p.reshape(ny, nx)
    fx = np.zeros((ny, nx + 1))
    fy = np.zeros((ny + 1, nx))
    fx[:, 1:-1] = system.tx * (p[:, :-1] - p[:, 1:])
    fy[1:-1, :] = system.ty * (p[:-1, :] - p[1:, :])
    fx[:, 0] = system.left
    fx[:, -1] = system.right
    return FlowField(p, fx, fy, system.q, iters, residual)


def solve_flow(perm: np.ndarray, scenario: FlowScenario) -> FlowField:
    return solve_pressure(assemble_pressure(perm, scenario), tol=scenario.cg_tol)


# ---------------------------------------------------------------- transport

@dataclass
class TransportState:
    s: np.ndarray
    t: float = 0.0
    water_in: float = 0.0
    water_out: float = 0.0


def stable_dt(flow: FlowField, porosity: float, cfl: float = 0.9) -> float:
    """Largest substep keeping every cell's outflow within ``cfl`` of its pore volume."""
    ny, nx = flow.pressure.shape
    cell = 1.0 / (ny * nx)
    out = (np.maximum(flow.fx[:, 1:], 0) + np.maximum(-flow.fx[:, :-1], 0)
           + np.maximum(flow.fy[1:], 0) + np.maximum(-flow.fy[:-1], 0)
           + np.maximum(-flow.q, 0))
    peak = out.max()
    return math.inf if peak == 0 else cfl * porosity * cell / peak


class UpwindOperator:
    """Linear form of one upwind transport step for a fixed flux field.

    The water balance of every cell is ``inflow - M @ s``: ``inflow`` collects
    injected water (boundary inflow and injector wells) and ``M`` carries the
    saturation-weighted face fluxes and producer sinks.
    """

    def __init__(self, flow: FlowField, s_in: float = 1.0):
        fx, fy, q = flow.fx, flow.fy, flow.q
        ny, nx = q.shape
        n = ny * nx
        idx = np.arange(n).reshape(ny, nx)
        rows, cols, vals = [], [], []

        def couple(f, up, down):
            # flux f > 0 carries water from cell ``up`` into cell ``down``
            f, up, down = f.ravel(), up.ravel(), down.ravel()
            rows.extend([up, down])
            cols.extend([up, up])
            vals.extend([f, -f])

        fxi, fyi = fx[:, 1:-1], fy[1:-1, :]
        pos, neg = np.maximum(fxi, 0), np.minimum(fxi, 0)
        couple(pos, idx[:, :-1], idx[:, 1:])
        couple(-neg, idx[:, 1:], idx[:, :-1])
        pos, neg = np.maximum(fyi, 0), np.minimum(fyi, 0)
        couple(pos, idx[:-1, :], idx[1:, :])
        couple(-neg, idx[1:, :], idx[:-1, :])

        # boundary outflow and producers remove water at the resident saturation
        out = np.zeros((ny, nx))
        out[:, -1] += np.maximum(fx[:, -1], 0)
        out[:, 0] += np.maximum(-fx[:, 0], 0)
        out[-1, :] += np.maximum(fy[-1], 0)
        out[0, :] += np.maximum(-fy[0], 0)
        out += np.maximum(-q, 0)
        rows.append(idx.ravel())
        cols.append(idx.ravel())
        vals.append(out.ravel())
        self.matrix = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                    shape=(n, n))
        inflow = np.zeros((ny, nx))
        inflow[:, 0] += np.maximum(fx[:, 0], 0)
        inflow[:, -1] += np.maximum(-fx[:, -1], 0)
        inflow[0, :] += np.maximum(fy[0], 0)
        inflow[-1, :] += np.maximum(-fy[-1], 0)
        inflow += np.maximum(q, 0)
        self.inflow = s_in * inflow.ravel()
        self.outflow = out.ravel()
        self.water_in_rate = float(self.inflow.sum())
        self.shape = (ny, nx)

    def step(self, s: np.ndarray, dt: float, pore: float) -> tuple[np.ndarray, float, float]:
        """Advance flat saturation ``s``; returns (s, water injected, water produced)."""
        s_new = s + (dt / pore) * (self.inflow - self.matrix @ s)
        return s_new, self.water_in_rate * dt, float(self.outflow @ s) * dt


def advance_saturation(state: TransportState, flow: FlowField, scenario: FlowScenario,
                       dt: float, op: UpwindOperator | None = None) -> TransportState:
    """March ``state`` forward by ``dt``, substepping to respect the CFL bound."""
    ny, nx = state.s.shape
    op = op or UpwindOperator(flow, scenario.injected_saturation)
    pore = scenario.porosity / (ny * nx)
    dt_max = stable_dt(flow, scenario.porosity, scenario.cfl)
    n_sub = 1 if not math.isfinite(dt_max) else max(1, math.ceil(dt / dt_max * (1 - 1e-12)))
    h = dt / n_sub
    s = state.s.ravel()
    w_in, w_out = state.water_in, state.water_out
    for _ in range(n_sub):
        s, a, b = op.step(s, h, pore)
        w_in += a
        w_out += b
    if s.min() < -1e-10:
        raise SaturationBreach(f"negative saturation {s.min():.3e} at t={state.t + dt:g}")
    return TransportState(s.reshape(ny, nx), state.t + dt, w_in, w_out)


# ---------------------------------------------------------------- driver

@dataclass
class ProductionRecord:
    times: np.ndarray                    # (n_t,)
    pvi: np.ndarray                      # (n_t,)
    producers: list[str]
    watercut: np.ndarray                 # (n_t, n_producers)
    rates: np.ndarray                    # (n_producers,) total fluid rate
    snapshots: dict[float, np.ndarray] = field(default_factory=dict)
    water_in: np.ndarray | None = None   # cumulative, (n_t,)
    water_out: np.ndarray | None = None
    water_stored: np.ndarray | None = None

    def window(self, t_max: float) -> "ProductionRecord":
        keep = self.times <= t_max + 1e-12
        return ProductionRecord(self.times[keep], self.pvi[keep], self.producers,
                                self.watercut[keep], self.rates, {})

    def to_csv(self, path) -> None:
        header = ["time", "pvi"] + [f"{p}_watercut" for p in self.producers]
        rows = [",".join(header)]
        for k, t in enumerate(self.times):
            rows.append(",".join([repr(float(t)), repr(float(self.pvi[k]))]
                                 + [repr(float(v)) for v in self.watercut[k]]))
        Path(path).write_text("\n".join(rows) + "\n")

    def save_snapshots(self, prefix) -> list[Path]:
        paths = []
        for t, s in sorted(self.snapshots.items()):
            p = Path(f"{prefix}_t{t:.4f}.ggrd")
            save_grid(s, p)
            paths.append(p)
        return paths


def pvi(t, scenario: FlowScenario, ny: int = 1, nx: int = 1):
    """Pore volumes injected by time ``t`` on the unit square."""
    rate = scenario.injection_rate(ny, nx)
    if rate <= 0:
        raise ValueError("PVI undefined without injection")
    return np.asarray(t) * rate / (scenario.porosity * 1.0)


def report_times(scenario: FlowScenario) -> np.ndarray:
    base = np.linspace(0.0, scenario.t_end, scenario.n_report + 1)
    snaps = [t for t in scenario.snapshots if 0 <= t <= scenario.t_end]
    return np.unique(np.concatenate([base, snaps]))


def _watercuts(s, flow: FlowField, producers) -> np.ndarray:
    out = []
    for _, cell in producers:
        if cell is None:
            f = flow.fx[:, -1]
            total = f.sum()
            out.append(float((f * s[:, -1]).sum() / total) if total > 0 else 0.0)
        else:
            out.append(float(s[cell]) if flow.q[cell] < 0 else 0.0)
    return np.array(out)


def simulate(perm: np.ndarray, scenario: FlowScenario, flow: FlowField | None = None) -> ProductionRecord:
    """Solve pressure once, then march saturation to ``scenario.t_end``."""
    perm = np.asarray(perm, dtype=np.float64)
    ny, nx = perm.shape
    flow = flow or solve_flow(perm, scenario)
    producers = scenario.producers(ny, nx)
    times = report_times(scenario)
    rates = np.array([flow.fx[:, -1].sum() if cell is None else -flow.q[cell] for _, cell in producers])
    state = TransportState(np.zeros((ny, nx)))
    cuts = np.zeros((len(times), len(producers)))
    w_in = np.zeros(len(times))
    w_out = np.zeros(len(times))
    stored = np.zeros(len(times))
    snaps = {}
    snap_set = set(scenario.snapshots)
    pore = scenario.porosity / (ny * nx)
    op = UpwindOperator(flow, scenario.injected_saturation)
    for k, t in enumerate(times):
        if k > 0:
            state = advance_saturation(state, flow, scenario, t - times[k - 1], op)
        cuts[k] = _watercuts(state.s, flow, producers)
        w_in[k], w_out[k] = state.water_in, state.water_out
        stored[k] = pore * state.s.sum()
        if t in snap_set:
            snaps[float(t)] = state.s.copy()
    rate = scenario.injection_rate(ny, nx)
    pv = pvi(times, scenario) if rate > 0 else np.full(len(times), np.nan)
    return ProductionRecord(times, pv, [n for n, _ in producers], cuts, rates, snaps, w_in, w_out, stored)


def breakthrough_time(record: ProductionRecord, threshold: float = 0.01, use_pvi: bool = True):
    """First crossing of ``threshold`` per producer, linearly interpolated; None if never."""
    t = record.pvi if use_pvi else record.times
    out = []
    for k in range(record.watercut.shape[1]):
        out.append(crossing_time(t, record.watercut[:, k], threshold))
    return out


def crossing_time(t, values, threshold: float = 0.01):
    t = np.asarray(t, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if len(t) < 2:
        raise ValueError("need at least two samples")
    above = np.nonzero(v >= threshold)[0]
    if above.size == 0:
        return None
    k = above[0]
    if k == 0:
        return float(t[0])
    v0, v1 = v[k - 1], v[k]
    return float(t[k - 1] + (threshold - v0) / (v1 - v0) * (t[k] - t[k - 1]))
