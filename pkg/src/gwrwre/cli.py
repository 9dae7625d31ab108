"""Command line experiment runner.

``gwrwre <subcommand> --config run.toml [--seed N] [--threads N] [--out DIR]``

Subcommands write one CSV each (``simulate.csv``, ``ray.csv``, ``ldp.csv``
plus ``ldp_variational.csv``, ``classify.csv``, ``phase_diagram.csv``) and
update ``manifest.json`` in the output directory.  Results depend on the
config and the seed only, never on the thread count.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from . import rng as rng_mod
from .config import ConfigError, ExperimentConfig, example_config, grid_values, load, with_value
from .criteria import (
    RegimeReport,
    ScopeError,
    classify_constant_threshold,
    classify_iid,
    classify_markov,
    classify_reinforced,
    green_branching_test,
)
from .csvio import write_csv
from .environment import (
    EnvState,
    FiniteMatrixKernel,
    IIDKernel,
    MinorizationReport,
    beta_measure,
    check_assumption1,
    log_transform,
)
from .gw_tree import extinction_probability
from .ldp import inf_cgf_01, make_cgf, variational_solve
from .parallel import map_replicas
from .ray_analysis import annealed_hit_prob, rate_estimate
from .walk import ALIVE, RETURNED, escape_trials

SUBCOMMANDS = ("simulate", "ray", "ldp", "classify", "phase-diagram")

# stream tags for the subcommands that draw outside the replica streams
_RAY_STREAM = 11
_LDP_STREAM = 12
_GREEN_STREAM = 13


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    version: str
    files: Dict[str, List[str]] = field(default_factory=dict)
    wall_clock: Dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _meta(cfg: ExperimentConfig, subcommand: str, **extra) -> dict:
    meta = {"subcommand": subcommand, "version": __version__, "config_hash": cfg.hash(),
            "seed": cfg.seed, "config": cfg.echo()}
    meta.update(extra)
    return meta


def _reinforced_params(cfg: ExperimentConfig):
    return None if cfg.reinforcement is None else cfg.reinforcement.params()


# ---------------------------------------------------------------------------
# subcommands


def run_simulate(cfg: ExperimentConfig, out: Path) -> List[Path]:
    kernel = cfg.build_kernel(matrix_form=False)
    root = cfg.root_state(kernel, cfg.simulate.root)
    outcomes = escape_trials(cfg.law(), kernel, cfg.simulate.horizon, cfg.simulate.replicas, cfg.seed,
                             root_state=root, reinforced=_reinforced_params(cfg), workers=cfg.threads)
    rows = [(i, o.kind, o.depth, o.steps) for i, o in enumerate(outcomes)]
    n = len(rows)
    summary = {k: sum(o.kind == k for o in outcomes) / n for k in (RETURNED, ALIVE)}
    cols = [("replica", "int"), ("outcome", "str"), ("depth", "int"), ("steps", "int")]
    path = write_csv(out / "simulate.csv", cols, rows, _meta(cfg, "simulate", fractions=summary))
    print(f"simulate: {n} replicas, returned {summary[RETURNED]:.4f}, alive {summary[ALIVE]:.4f}")
    return [path]


def _ray_start(cfg: ExperimentConfig, kernel, gen):
    """Start law for ray estimates: the root for i.i.d. weights, else ``beta_eps`` from ``x_star``."""
    if isinstance(kernel, IIDKernel):
        return EnvState(1.0)
    spec = cfg.ray.x_star or cfg.classify.x_star
    if spec is None:
        raise ConfigError("ray.x_star: required for non-i.i.d. kernels")
    ell = cfg.ray.ell
    if ell is None:
        if isinstance(kernel, FiniteMatrixKernel):
            ell = check_assumption1(kernel).ell or 1
        elif cfg.classify.minorization is not None:
            ell = cfg.classify.minorization[0]
        else:
            raise ConfigError("ray.ell: required for sampler kernels without classify.minorization")
    return beta_measure(kernel, cfg.ray.eps, spec.resolve(kernel), ell, gen)


def run_ray(cfg: ExperimentConfig, out: Path) -> List[Path]:
    kernel = cfg.build_kernel(matrix_form=False)
    start = _ray_start(cfg, kernel, rng_mod.keyed_rng(cfg.seed, _RAY_STREAM, (0,)))
    rows = []
    for n in sorted(set(cfg.ray.n)):
        p, se = annealed_hit_prob(kernel, start, n, cfg.ray.replicas,
                                  rng_mod.keyed_rng(cfg.seed, _RAY_STREAM, (1, n)), cfg.ray.method)
        est = rate_estimate(kernel, start, n, cfg.ray.replicas,
                            rng_mod.keyed_rng(cfg.seed, _RAY_STREAM, (2, n)), cfg.ray.method)
        rows.append((n, p, se, est.value, est.stderr, est.annealed_rate))
        print(f"ray: n={n} estimate={p:.6g} (se {se:.2g}) rate={est.value:.6g}")
    cols = [("n", "int"), ("estimate", "float"), ("stderr", "float"), ("rate", "float"),
            ("rate_stderr", "float"), ("annealed_rate", "float")]
    return [write_csv(out / "ray.csv", cols, rows, _meta(cfg, "ray"))]


def run_ldp(cfg: ExperimentConfig, out: Path) -> List[Path]:
    kernel = cfg.build_kernel(matrix_form=True)
    k_ln = log_transform(kernel)
    kw = {}
    if not isinstance(kernel, (IIDKernel, FiniteMatrixKernel)):
        spec = cfg.ldp.start or cfg.root
        start = EnvState(1.0) if spec is None else spec.resolve(kernel)
        kw = dict(start=_log_state(start), n=cfg.ldp.n, replicas=cfg.ldp.replicas)
    lams = grid_values(cfg.ldp.lambdas)
    rows = []
    for i, lam in enumerate(lams):
        if kw:
            kw["rng"] = rng_mod.keyed_rng(cfg.seed, _LDP_STREAM, (i,))
        fn = make_cgf(k_ln, **kw)
        rows.append((float(lam), fn(lam), fn.method))
    cols = [("lambda", "float"), ("cgf", "float"), ("method", "str")]
    files = [write_csv(out / "ldp.csv", cols, rows, _meta(cfg, "ldp"))]
    vcols = [("k_pieces", "int"), ("value", "float"), ("infimum", "float"), ("argmin", "float"),
             ("gap", "float"), ("restarts", "int"), ("status", "str")]
    if kw:
        # sampled CGFs are too noisy and too slow for the path optimizer
        vrow = (cfg.ldp.k_pieces, None, None, None, None, 0, "skipped-empirical")
    else:
        fn = make_cgf(k_ln)
        res = variational_solve(fn, k_pieces=cfg.ldp.k_pieces, rng=rng_mod.keyed_rng(cfg.seed, _LDP_STREAM, (-1,)))
        inf_val, _ = inf_cgf_01(fn)
        status = "ok" if res.within else "gap-out-of-tolerance"
        vrow = (cfg.ldp.k_pieces, res.value, inf_val, res.argmin, inf_val - res.value, res.restarts, status)
        print(f"ldp: variational value {res.value:.9g}, inf over [0,1] {inf_val:.9g}")
    files.append(write_csv(out / "ldp_variational.csv", vcols, [vrow], _meta(cfg, "ldp")))
    return files


def _log_state(state: EnvState) -> EnvState:
    return EnvState(math.log(state.weight), state.aux, state.threshold)


def classify_config(cfg: ExperimentConfig) -> RegimeReport:
    """Dispatch to the criterion that matches the config."""
    c = cfg.classify
    kernel = cfg.build_kernel(matrix_form=True)
    b = cfg.branching_number()
    crit = c.criterion
    if crit == "auto":
        if cfg.reinforcement is not None:
            crit = "reinforced"
        elif isinstance(kernel, IIDKernel):
            crit = "iid"
        else:
            crit = "markov"
    if crit == "iid":
        if not isinstance(kernel, IIDKernel):
            raise ConfigError("classify.criterion: 'iid' needs an i.i.d. kernel")
        return classify_iid(kernel, b, c.tol)
    if crit == "markov":
        minor = None if c.minorization is None else MinorizationReport.asserted(*c.minorization)
        root = cfg.root_state(kernel)
        start = None if root is None else _log_state(root)
        return classify_markov(kernel, b, c.truncation_windows(), c.eta_pairs(), c.tol, minor, start)
    if cfg.reinforcement is None:
        raise ConfigError(f"classify.criterion: '{crit}' needs a [reinforcement] section")
    params = cfg.reinforcement.params()
    if crit == "reinforced":
        uppers = None if c.windows is None else [w.upper for w in c.truncation_windows()]
        try:
            report = classify_reinforced(kernel, b, params, c.eta_pairs(), uppers, c.tol)
        except ScopeError:
            if cfg.reinforcement.constant_threshold is None:
                raise
            report = None
        if report is not None and (report.verdict != "Indeterminate" or cfg.reinforcement.constant_threshold is None):
            return report
        crit = "constant-threshold"
    thr = cfg.reinforcement.constant_threshold
    if thr is None:
        raise ConfigError("classify.criterion: 'constant-threshold' needs a numeric threshold")
    return classify_constant_threshold(kernel, b, params.L, thr, c.tol, c.n_terms)


def run_classify(cfg: ExperimentConfig, out: Path) -> List[Path]:
    report = classify_config(cfg)
    print(report.text())
    cols = [("criterion", "str"), ("verdict", "str"), ("margin", "float"), ("inputs", "str")]
    row = [report.criterion, report.verdict, report.margin, json.dumps(_jsonable(report.inputs), sort_keys=True)]
    if cfg.classify.green:
        kernel = cfg.build_kernel(matrix_form=True)
        law = cfg.law()
        x_star = None if cfg.classify.x_star is None else cfg.classify.x_star.resolve(kernel)
        minor = None if cfg.classify.minorization is None else MinorizationReport.asserted(*cfg.classify.minorization)
        g = green_branching_test(kernel, cfg.branching_number(), 1.0 - extinction_probability(law),
                                 cfg.classify.green_n_max, cfg.classify.green_replicas,
                                 rng_mod.keyed_rng(cfg.seed, _GREEN_STREAM), eps=cfg.classify.eps,
                                 minorization=minor, x_star=x_star)
        cols += [("green_n_star", "int"), ("green_product", "float"), ("green_stderr", "float"),
                 ("green_discount", "float")]
        row += [g.n_star, g.product, g.stderr, g.discount]
        print(f"green test: n* = {g.n_star}, product {g.product:.6g}")
    return [write_csv(out / "classify.csv", cols, [row], _meta(cfg, "classify"))]


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else str(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def _phase_point(cfg: ExperimentConfig, assignments):
    try:
        point = cfg
        for path, value in assignments:
            point = with_value(point, path, value)
        r = classify_config(point)
        return r.margin, r.verdict, r.criterion
    except (ScopeError, ConfigError, ValueError) as err:
        return math.nan, "OutOfScope", type(err).__name__


def run_phase_diagram(cfg: ExperimentConfig, out: Path) -> List[Path]:
    pd = cfg.phase_diagram
    if pd is None:
        raise ConfigError("phase_diagram: section is required for this subcommand")
    xs = pd.x.points()
    ys = pd.y.points() if pd.y is not None else [None]
    grid = [(x, y) for y in ys for x in xs]

    def task(i):
        x, y = grid[i]
        assign = [(pd.x.path, x)] + ([(pd.y.path, y)] if y is not None else [])
        return _phase_point(cfg, assign)

    results = map_replicas(task, len(grid), cfg.threads)
    cols = [(pd.x.path, "float")]
    if pd.y is not None:
        cols.append((pd.y.path, "float"))
    cols += [("margin", "float"), ("verdict", "str"), ("criterion", "str")]
    rows = []
    for (x, y), (margin, verdict, crit) in zip(grid, results):
        rows.append(((x,) if y is None else (x, y)) + (margin, verdict, crit))
    print(f"phase-diagram: {len(rows)} points")
    return [write_csv(out / "phase_diagram.csv", cols, rows, _meta(cfg, "phase-diagram"))]


_RUNNERS = {"simulate": run_simulate, "ray": run_ray, "ldp": run_ldp, "classify": run_classify,
            "phase-diagram": run_phase_diagram}


def _update_manifest(out: Path, manifest: RunManifest) -> RunManifest:
    path = out / "manifest.json"
    if path.exists():
        try:
            old = json.loads(path.read_text())
        except (OSError, ValueError):
            old = None
        if old and old.get("config_hash") == manifest.config_hash and old.get("seed") == manifest.seed:
            files = dict(old.get("files", {}))
            clock = dict(old.get("wall_clock", {}))
            files.update(manifest.files)
            clock.update(manifest.wall_clock)
            manifest = RunManifest(manifest.config_hash, manifest.seed, manifest.version, files, clock)
    path.write_text(manifest.to_json())
    return manifest


def run(subcommand: str, cfg: ExperimentConfig, out_dir: Optional[str] = None) -> RunManifest:
    """Run one subcommand and record it in ``manifest.json``."""
    if subcommand not in _RUNNERS:
        raise ValueError(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    files = _RUNNERS[subcommand](cfg, out)
    elapsed = time.perf_counter() - t0
    manifest = RunManifest(cfg.hash(), cfg.seed, __version__, {subcommand: [p.name for p in files]},
                           {subcommand: round(elapsed, 6)})
    return _update_manifest(out, manifest)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gwrwre", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", metavar="PATH", help="TOML experiment config")
        src.add_argument("--example", metavar="TEXT", help='built-in example, e.g. "iid a=1, b=2"')
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--threads", type=int, help="worker processes (results do not depend on it)")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config) if args.config else example_config(args.example)
        update = {}
        if args.seed is not None:
            update["seed"] = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads: must be at least 1")
            update["threads"] = args.threads
        if update:
            cfg = cfg.model_copy(update=update)
        manifest = run(args.subcommand, cfg, args.out)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except ValueError as err:
        # model-level refusals: criterion out of scope, assumption not met
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    print(f"wrote {', '.join(manifest.files[args.subcommand])} (config {manifest.config_hash[:12]}, seed {manifest.seed})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
