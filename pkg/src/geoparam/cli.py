"""Command-line entry point: ``geoparam <command> [options]``.

Every command writes into its ``--out`` directory, together with a
``manifest.json`` that records the resolved configuration and SHA-256
checksums of all outputs. ``geoparam replay <manifest> --out DIR`` re-runs a
command and compares checksums.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import flowsim, gan, geodata, gradcheck, nes, uqstats
from .flowsim import FlowScenario

logger = logging.getLogger("geoparam")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


def _threads() -> int:
    raw = os.environ.get("GEOPARAM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"GEOPARAM_THREADS must be an integer, got {raw!r}")


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, argv: list[str], config: dict, inputs: list,
                   timings: dict) -> dict:
    outputs = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            outputs[str(p.relative_to(out))] = sha256(p)
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {str(p): sha256(Path(p)) for p in inputs if p and Path(p).is_file()},
        "outputs": outputs,
        "timings": timings,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------- helpers

def _load_realizations(args, n_default: int | None = None) -> geodata.RealizationSet:
    """Facies rasters in the unit domain, from a generator checkpoint or a set file."""
    if getattr(args, "gen", None):
        G = gan.load_checkpoint(args.gen)
        if not isinstance(G, gan.Generator):
            raise ConfigError(f"{args.gen} is not a generator checkpoint")
        rs = gan.generate(G, args.n or n_default, seed=args.seed)
        return geodata.RealizationSet(geodata.rescale_unit(rs.values), domain="unit")
    if getattr(args, "data", None):
        rs = geodata.load_set(args.data, domain=args.domain)
        values = rs.values if args.domain != "gan" else geodata.rescale_unit(rs.values)
        if args.n:
            values = values[: args.n]
        return geodata.RealizationSet(values, domain="unit")
    raise ConfigError("one of --gen or --data is required")


def _scenario(spec: str, **overrides) -> FlowScenario:
    if spec == flowsim.UNIFORM:
        sc = flowsim.uniform_flow()
    elif spec == flowsim.QUARTER_FIVE:
        sc = flowsim.quarter_five()
    else:
        sc = FlowScenario.load(spec)
    for k, v in overrides.items():
        if v is not None:
            setattr(sc, k, v)
    return sc


def _simulate_one(payload):
    perm, scenario = payload
    return flowsim.simulate(perm, scenario)


def simulate_ensemble(perms, scenario: FlowScenario, workers: int = 1) -> list:
    """Simulate every permeability field; results ordered by realization index."""
    jobs = [(p, scenario) for p in perms]
    if workers <= 1:
        return [_simulate_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_simulate_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _save_raster(out: Path, stem: str, raster: np.ndarray, lo=None, hi=None) -> None:
    geodata.save_grid(raster, out / f"{stem}.ggrd")
    uqstats.write_pgm(out / f"{stem}.pgm", raster, lo, hi)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, out: Path) -> list:
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    table = geodata.ConditioningTable.load(args.conditioning) if args.conditioning else None
    params = geodata.ChannelParams()
    rs = geodata.sample_channel_set(args.count, args.size, args.size, params, seed=args.seed,
                                    table=table, max_tries=args.max_tries)
    geodata.save_set(rs, out / "realizations.gset")
    uqstats.write_pgm(out / "first.pgm", rs.values[0], 0.0, 1.0)
    return [args.conditioning]


def cmd_train(args, out: Path) -> list:
    data = geodata.load_set(args.data, domain=args.domain)
    values = data.values if args.domain == "gan" else geodata.rescale_gan(data.values)
    data = geodata.RealizationSet(values, domain="gan")
    val = None
    if args.val:
        v = geodata.load_set(args.val, domain=args.domain)
        val = geodata.RealizationSet(v.values if args.domain == "gan" else geodata.rescale_gan(v.values), "gan")
    cfg = gan.TrainConfig(n_d=args.n_d, batch=args.batch, clip=args.clip, lr=args.lr,
                          iterations=args.iters, n_z=args.n_z, seed=args.seed, mode=args.mode,
                          preset=args.preset, slope=args.slope, bias=args.bias, val_every=args.val_every,
                          checkpoint_every=args.checkpoint_every,
                          checkpoint_dir=str(out / "checkpoints") if args.checkpoint_every else None)
    size = gan.PRESETS[args.preset]["size"]
    if data.shape != (size, size):
        raise ConfigError(f"preset {args.preset} expects {size}x{size} rasters, data is {data.shape}")
    log_path = out / "train_log.csv"
    log_path.write_text("iteration,wasserstein,loss_g,validation,checkpoint\n")
    fh = open(log_path, "a")

    def on_iteration(rec):
        fh.write(f"{rec.iteration},{rec.wasserstein!r},{rec.loss_g!r},"
                 f"{'' if rec.validation is None else repr(rec.validation)},{rec.checkpoint or ''}\n")
        fh.flush()

    try:
        G, D, log = gan.train(cfg, data, val, on_iteration=on_iteration)
    finally:
        fh.close()
    gan.save_checkpoint(G, out / "generator.gwts")
    gan.save_checkpoint(D, out / "critic.gwts")
    if val is not None:
        flags = gan.divergence_flags(log)
        uqstats.write_csv(out / "divergence.csv", ["iteration", "flag"],
                          [(r.iteration, int(f)) for r, f in
                           zip([r for r in log.records if r.validation is not None], flags)])
    return [args.data, args.val]


def cmd_uq(args, out: Path) -> list:
    rs = _load_realizations(args)
    facies = geodata.threshold(rs.values)
    perms = geodata.to_permeability(facies, args.logk0, args.logk1)
    scenario = _scenario(args.scenario, t_end=args.t_end, porosity=args.porosity)
    t_snap = args.snapshot_pvi * scenario.porosity / scenario.injection_rate()
    scenario.snapshots = (t_snap,)
    records = simulate_ensemble(perms, scenario, _threads())
    snaps = np.stack([r.snapshots[t_snap] for r in records])

    maps = uqstats.moment_maps(snaps)
    for name, m in maps.as_dict().items():
        _save_raster(out, f"saturation_{name}", m)
    summary = [(name, float(m.min()), float(m.mean()), float(m.max())) for name, m in maps.as_dict().items()]
    uqstats.write_csv(out / "moments_summary.csv", ["statistic", "min", "mean", "max"],
                      summary + [("kurtosis_convention", "non-excess", "", ""), ("n", maps.n, "", "")])

    cell = uqstats.max_variance_cell(maps)
    counts, edges = uqstats.point_histogram(snaps[:, cell[0], cell[1]], args.bins)
    uqstats.write_csv(out / "saturation_histogram.csv", ["bin_lo", "bin_hi", "count", "cell_i", "cell_j"],
                      [(edges[k], edges[k + 1], int(c), cell[0], cell[1]) for k, c in enumerate(counts)])

    cells = uqstats.random_cells(facies.shape[1:], 10, seed=args.seed)
    rows = []
    for i, j in cells:
        c, e = uqstats.point_histogram(rs.values[:, i, j], args.bins)
        rows += [(i, j, e[k], e[k + 1], int(v)) for k, v in enumerate(c)]
    uqstats.write_csv(out / "facies_histograms.csv", ["cell_i", "cell_j", "bin_lo", "bin_hi", "count"], rows)

    stats = uqstats.production_stats(records)
    header = ["time", "pvi"] + [f"{p}_{s}" for p in stats.producers for s in ("mean", "variance")]
    uqstats.write_csv(out / "production_stats.csv", header,
                      [[stats.times[k], stats.pvi[k]] + [v for p in range(len(stats.producers))
                                                         for v in (stats.mean[k, p], stats.variance[k, p])]
                       for k in range(len(stats.times))])
    bt_rows = []
    for p, name in enumerate(stats.producers):
        bt_rows += [(name, stats.bins[k], stats.bins[k + 1], int(c)) for k, c in enumerate(stats.counts[p])]
        bt_rows.append((name, "none", "none", int(stats.none_counts[p])))
    uqstats.write_csv(out / "breakthrough_histogram.csv", ["producer", "pvi_lo", "pvi_hi", "count"], bt_rows)

    max_lag = min(args.max_lag, min(facies.shape[1:]) - 1)
    s2 = uqstats.two_point_probability(facies, max_lag)
    uqstats.write_csv(out / "two_point.csv", ["lag", "mean", "std"],
                      [(int(r), s2.mean[k], s2.std[k]) for k, r in enumerate(s2.lags)])
    return [args.gen, args.data, args.scenario]


def cmd_audit(args, out: Path) -> list:
    table = geodata.ConditioningTable.load(args.table) if args.table else geodata.ConditioningTable.paper_default()
    rs = _load_realizations(args)
    report = geodata.audit_conditioning(geodata.threshold(rs.values), table)
    write_audit(report, out)
    return [args.gen, args.data, args.table]


def write_audit(report: geodata.AuditReport, out: Path) -> None:
    uqstats.write_csv(out / "point_mismatch.csv", ["i", "j", "facies", "mismatch_percent"],
                      [(i, j, f, report.point_rates[k]) for k, (i, j, f) in enumerate(report.table)])
    tol = report.tolerance_table()
    names = ["exact"] + [f"{k} cell{'s' if k > 1 else ''} away" for k in range(1, tol.shape[0])]
    uqstats.write_csv(out / "realization_mismatch.csv", ["tolerance", "one_or_more", "two_or_more", "three_or_more"],
                      [(names[k], *tol[k]) for k in range(tol.shape[0])])
    uqstats.write_csv(out / "per_realization.csv", ["realization", "mismatches", "max_misplacement"],
                      [(r, int(c), float(report.distances[r].max()) if report.distances.shape[1] else 0.0)
                       for r, c in enumerate(report.realization_counts)])


def cmd_invert(args, out: Path) -> list:
    G = gan.load_checkpoint(args.gen)
    if not isinstance(G, gan.Generator):
        raise ConfigError(f"{args.gen} is not a generator checkpoint")
    seeds = [args.seed + k for k in range(args.restarts)]
    target = Path(args.target)
    if args.mode == "image":
        raster = geodata.load_grid(target)
        if args.target_domain == "unit":
            raster = geodata.rescale_gan(raster)
        results = nes.image_match(raster, G, args.restarts, seeds, args.generations)
    else:
        n = G.output_size(1)
        scenario = _scenario(args.scenario, t_end=args.t_end) if args.scenario else \
            flowsim.five_producer_wells(n, n, t_end=args.t_end)
        problem = nes.InverseProblem(G, scenario, sigma=args.sigma, observed_pvi=args.observed_pvi)
        if target.suffix == ".csv":
            obs = _read_record_csv(target)
            problem.d_obs = _observed_from_csv(obs, problem)
        else:
            raster = geodata.load_grid(target)
            facies = raster if args.target_domain == "unit" else geodata.rescale_unit(raster)
            perm = geodata.to_permeability(geodata.threshold(facies), *problem.log_perm)
            true_rec = flowsim.simulate(perm, scenario)
            true_rec.to_csv(out / "target_record.csv")
            problem.d_obs = problem.observe(flowsim.simulate(perm, problem.observation_scenario))
        results = nes.history_match(problem, args.restarts, seeds, args.generations)
    write_inversion(results, out, args.mode)
    return [args.gen, args.target, args.scenario]


def _read_record_csv(path: Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def _observed_from_csv(table: np.ndarray, problem: nes.InverseProblem) -> np.ndarray:
    # columns: time, pvi, watercut per producer; resampled onto the observation grid
    t_grid = flowsim.report_times(problem.observation_scenario)
    cols = [np.interp(t_grid, table[:, 0], table[:, c]) for c in range(2, table.shape[1])]
    return np.stack(cols, axis=1).ravel()


def write_inversion(results: list, out: Path, mode: str) -> None:
    rows = []
    for k, res in enumerate(results):
        rows += [(k, g, v) for g, v in enumerate(res.trace)]
        np.savetxt(out / f"z_restart{k}.txt", res.z, fmt="%.17g")
        _save_raster(out, f"match_restart{k}", geodata.rescale_unit(res.raster), 0.0, 1.0)
        if res.record is not None:
            res.record.to_csv(out / f"predicted_restart{k}.csv")
    uqstats.write_csv(out / "fitness_traces.csv", ["restart", "generation", "best_fitness"], rows)
    uqstats.write_csv(out / "summary.csv", ["restart", "seed", "fitness", "misfit_initial", "misfit_final"],
                      [(k, r.seed, r.fitness, r.misfit_initial, r.misfit_final) for k, r in enumerate(results)])


def cmd_upscale(args, out: Path) -> list:
    G = gan.load_checkpoint(args.gen)
    if not isinstance(G, gan.Generator):
        raise ConfigError(f"{args.gen} is not a generator checkpoint")
    raster = gan.generate_expanded(G, args.ny, args.nx, seed=args.seed)
    _save_raster(out, "upscaled", geodata.rescale_unit(raster), 0.0, 1.0)
    return [args.gen]


def cmd_gradcheck(args, out: Path) -> list:
    results = gradcheck.run_suite(args.cases, seed=args.seed)
    rng = np.random.default_rng(args.seed)
    adj = [gradcheck.adjoint_error(rng, k, s, p) for k in (1, 2, 3, 4) for s in (1, 2, 3) for p in range(k)]
    rows = [(r.name, "x".join(map(str, r.shape)), r.max_rel_error, int(r.passed)) for r in results]
    rows += [("adjoint", "", e, int(e < 1e-10)) for e in adj]
    uqstats.write_csv(out / "gradcheck.csv", ["op", "shape", "max_rel_error", "passed"], rows)
    failed = [r for r in rows if not r[3]]
    for r in failed:
        logger.error("gradcheck failed: %s %s rel err %.3e", *r[:3])
    if failed:
        raise FloatingPointError(f"{len(failed)} gradient checks failed")
    return []


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "uq": cmd_uq, "audit": cmd_audit,
    "invert": cmd_invert, "upscale": cmd_upscale, "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geoparam", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="key = value file supplying defaults for any flag")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=0):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=seed)
        return sp

    g = common(sub.add_parser("gen-data", help="sample procedural channel realizations"))
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--conditioning", help="conditioning table (i j facies per line)")
    g.add_argument("--max-tries", type=int, default=200_000)

    t = common(sub.add_parser("train", help="train a generator/critic pair"))
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--domain", choices=["unit", "binary", "gan"], default="binary",
                   help="value domain of the input set files")
    t.add_argument("--mode", choices=["wgan", "gan"], default="wgan")
    t.add_argument("--iters", type=int, default=20000)
    t.add_argument("--preset", choices=sorted(gan.PRESETS), default="paper")
    t.add_argument("--n-z", type=int, default=30)
    t.add_argument("--n-d", type=int, default=5)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--clip", type=float, default=0.01)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--slope", type=float, default=0.01, help="critic leaky-ReLU slope")
    t.add_argument("--bias", action="store_true", help="give every layer a bias")
    t.add_argument("--val-every", type=int, default=10)
    t.add_argument("--checkpoint-every", type=int, default=0)

    def source(sp):
        sp.add_argument("--gen", help="generator checkpoint")
        sp.add_argument("--data", help="realization set instead of a generator")
        sp.add_argument("--domain", choices=["unit", "binary", "gan"], default="binary")
        sp.add_argument("--n", type=int, default=0)

    u = common(sub.add_parser("uq", help="flow uncertainty quantification over an ensemble"))
    source(u)
    u.add_argument("--scenario", default=flowsim.UNIFORM,
                   help="uniform-flow, quarter-five or a scenario file")
    u.add_argument("--snapshot-pvi", type=float, default=0.5)
    u.add_argument("--t-end", type=float)
    u.add_argument("--porosity", type=float)
    u.add_argument("--logk0", type=float, default=0.0)
    u.add_argument("--logk1", type=float, default=1.0)
    u.add_argument("--bins", type=int, default=25)
    u.add_argument("--max-lag", type=int, default=20)

    a = common(sub.add_parser("audit", help="conditioning mismatch tables"))
    source(a)
    a.add_argument("--table", help="conditioning table; defaults to the 16-point benchmark table")

    i = common(sub.add_parser("invert", help="history or image matching with NES"))
    i.add_argument("--gen", required=True)
    i.add_argument("--target", required=True, help="GGRD raster or production CSV")
    i.add_argument("--target-domain", choices=["unit", "gan"], default="unit")
    i.add_argument("--mode", choices=["history", "image"], default="history")
    i.add_argument("--restarts", type=int, default=3)
    i.add_argument("--generations", type=int, default=300)
    i.add_argument("--scenario", help="scenario file; defaults to one injector and five producers")
    i.add_argument("--t-end", type=float, default=0.2)
    i.add_argument("--observed-pvi", type=float, default=0.5)
    i.add_argument("--sigma", type=float, default=0.01)

    s = common(sub.add_parser("upscale", help="generate from an expanded latent array"))
    s.add_argument("--gen", required=True)
    s.add_argument("--nx", type=int, default=5)
    s.add_argument("--ny", type=int, default=5)

    c = common(sub.add_parser("gradcheck", help="finite-difference checks of every layer op"))
    c.add_argument("--cases", type=int, default=20)

    r = sub.add_parser("replay", help="re-run a command from its manifest and compare checksums")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)
    return p


def read_config(path) -> dict:
    cfg = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        cfg[k.replace("-", "_")] = v
    return cfg


def _flag_value(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    pre_parser = argparse.ArgumentParser(add_help=False)
    pre_parser.add_argument("--config")
    pre, _ = pre_parser.parse_known_args(argv)
    if pre.config:
        cfg = read_config(pre.config)
        # apply file values as subparser defaults, typed by each action
        for action in parser._subparsers._group_actions:
            for sp in action.choices.values():
                known = {a.dest: a for a in sp._actions}
                defaults = {}
                for k, v in cfg.items():
                    if k in known:
                        a = known[k]
                        defaults[k] = _flag_value(v) if isinstance(a, argparse._StoreTrueAction) else (
                            a.type(v) if a.type else v)
                        a.required = False
                sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def run(argv: list[str]) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    except (ConfigError, ValueError) as exc:
        print(f"geoparam: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "replay":
        return replay(args.manifest, args.out)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        with _thread_limit():
            inputs = COMMANDS[args.command](args, out)
        config = {k: v for k, v in vars(args).items() if k not in ("out", "verbose", "config")}
        write_manifest(out, args.command, argv, config, inputs or [],
                       {"wall_seconds": round(time.perf_counter() - t0, 3)})
    except (ConfigError, ValueError, KeyError, IndexError) as exc:
        if isinstance(exc, (geodata.FormatError, gan.CheckpointError)):
            print(f"geoparam: I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"geoparam: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ArithmeticError, flowsim.ConvergenceError, flowsim.SaturationBreach,
            geodata.RejectionBudgetExhausted) as exc:
        if isinstance(exc, gan.TrainingDiverged):
            (out / "diverged.json").write_text(json.dumps(exc.record, indent=2, default=float) + "\n")
        print(f"geoparam: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"geoparam: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


@contextlib.contextmanager
def _thread_limit():
    """Cap BLAS/OpenMP pools at GEOPARAM_THREADS for the duration of a command."""
    with threadpool_limits(limits=_threads()):
        yield


def replay(manifest_path, out) -> int:
    """Re-run the command recorded in ``manifest_path`` into ``out``; 0 when checksums agree."""
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"geoparam: cannot read manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    argv = list(manifest["argv"])
    idx = argv.index("--out")
    argv[idx + 1] = str(out)
    code = run(argv)
    if code != EXIT_OK:
        return code
    fresh = json.loads((Path(out) / MANIFEST).read_text())["outputs"]
    if fresh != manifest["outputs"]:
        diff = sorted(set(fresh.items()) ^ set(manifest["outputs"].items()))
        print(f"geoparam: replay checksums differ: {diff}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(sys.argv[1:] if argv is None else list(argv)))


if __name__ == "__main__":
    main()
