"""Command-line front end: ``d2dbotnet {network,equilibrium,optimize,simulate}``.

Every command reads an optional JSON config, applies command-line
overrides, echoes the effective config to ``<out>/config.json`` and writes
its data files under ``<out>``.  Rates are in 1/s, lengths in km and
intensities in devices/km^2 throughout.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import abm, equilibrium, network, optimizer
from .dynamics import PatchingPolicy, ThreatParams

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


@dataclass
class NetworkSection:
    lam: float = 300.0
    r: float = 0.1
    rho: float = 0.95
    p: float = 0.7
    epsilon: float = 1e-5
    k_max: int | None = None
    region: list = field(default_factory=lambda: [3.3, 3.3])
    boundary_mode: str = "torus"
    sample_graph: bool = False
    locations: str | None = None
    location_r: float = 0.14


@dataclass
class ThreatSection:
    gamma_b: float = 0.001
    gamma_c: float = 0.001
    beta: float = 0.002


@dataclass
class TargetsSection:
    tau_b_tilde: float = 0.7
    tau_bi: float = 0.2


@dataclass
class WeightsSection:
    a: float = 0.2
    b: float = 10.0


@dataclass
class SolverSection:
    alpha0: float = 0.05
    tol: float = 1e-8
    max_iter: int = 50_000
    patience: int = 10
    cost_weighting: str = optimizer.PER_CLASS


@dataclass
class EquilibriumSection:
    method: str = "exact"
    mu_grid: list = field(default_factory=lambda: [0.0, 0.0066, 34])
    curve_degrees: list = field(default_factory=lambda: [5, 15])


@dataclass
class SweepSection:
    gamma_b: list = field(default_factory=lambda: [0.0005, 0.001, 0.0015, 0.002, 0.0025])
    gamma_c: list = field(default_factory=lambda: [0.0005, 0.001, 0.0015, 0.002, 0.0025])
    tau_b_tilde: list = field(default_factory=lambda: [0.6, 0.7, 0.8, 0.9])
    tau_bi: list = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2])


@dataclass
class AbmSection:
    targets: list = field(default_factory=lambda: [0.7, 0.8, 0.9])
    n_seeds: int = 1
    phase1_end: float | None = None
    t_end: float | None = None
    record_stride: float = 50.0
    initial_infected: str = "uniform"
    seed_fraction: float = 0.01
    seed_degree: int = 2
    informed_share: float = 0.0
    static_vulnerable: bool = False
    record_events: bool = False
    snapshot_times: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    network: NetworkSection = field(default_factory=NetworkSection)
    threat: ThreatSection = field(default_factory=ThreatSection)
    targets: TargetsSection = field(default_factory=TargetsSection)
    weights: WeightsSection = field(default_factory=WeightsSection)
    eta: float = 100.0
    solver: SolverSection = field(default_factory=SolverSection)
    equilibrium: EquilibriumSection = field(default_factory=EquilibriumSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    abm: AbmSection = field(default_factory=AbmSection)
    output_dir: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        return _build(cls, doc, "")

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        """Parameters only; the output location does not change any result."""
        doc = self.to_dict()
        del doc["output_dir"]
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    # typed views
    def net(self) -> network.NetworkParams:
        n = self.network
        return network.NetworkParams(n.lam, n.r, n.rho, n.p)

    def threat_params(self) -> ThreatParams:
        return ThreatParams(**asdict(self.threat))

    def defender_targets(self) -> optimizer.DefenderTargets:
        return optimizer.DefenderTargets(**asdict(self.targets))

    def solve_kw(self) -> dict:
        s = self.solver
        return dict(weight_a=self.weights.a, weight_b=self.weights.b, eta=self.eta,
                    alpha0=s.alpha0, tol=s.tol, max_iter=s.max_iter, patience=s.patience,
                    cost_weighting=s.cost_weighting)


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kw = {}
    for name, value in doc.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, f"{where}{name}.")
        else:
            kw[name] = value
    return cls(**kw)


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ExperimentConfig.from_dict(doc)


def validate(cfg: ExperimentConfig) -> None:
    """Build every typed sub-config once so bad values fail early."""
    try:
        cfg.net()
        cfg.threat_params()
        cfg.defender_targets()
        if not 0 < cfg.network.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {cfg.network.epsilon}")
        if cfg.network.boundary_mode not in network.BOUNDARY_MODES:
            raise ValueError(f"boundary_mode must be one of {network.BOUNDARY_MODES}")
        if cfg.solver.cost_weighting not in optimizer.COST_WEIGHTINGS:
            raise ValueError(f"cost_weighting must be one of {optimizer.COST_WEIGHTINGS}")
        if cfg.equilibrium.method not in METHODS:
            raise ValueError(f"method must be one of {tuple(METHODS)}")
        if not cfg.eta > 0:
            raise ValueError("eta must be > 0")
        if cfg.solver.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if cfg.abm.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        for t in cfg.abm.targets:
            optimizer.DefenderTargets(t, cfg.targets.tau_bi)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


class Emitter:
    """Writes files under the output directory with a shared metadata header."""

    def __init__(self, cfg: ExperimentConfig, command: str):
        self.root = Path(cfg.output_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.command = command

    def header(self, **extra) -> str:
        parts = [f"# d2dbotnet {__version__}", f"command={self.command}", f"params={self.cfg.digest()}"]
        parts += [f"{k}={v}" for k, v in extra.items()]
        return " ".join(parts)

    def path(self, name: str) -> Path:
        return self.root / name

    def echo_config(self) -> None:
        self.path("config.json").write_text(json.dumps(self.cfg.to_dict(), indent=1, sort_keys=True) + "\n")

    def json(self, name: str, doc: dict) -> None:
        self.path(name).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _distribution(cfg: ExperimentConfig) -> network.DegreeDistribution:
    return network.poisson_degree_distribution(cfg.net(), cfg.network.epsilon, cfg.network.k_max)


def _location_graph(cfg: ExperimentConfig):
    return network.ingest_locations(cfg.network.locations, cfg.network.location_r)


def cmd_network(cfg: ExperimentConfig, out: Emitter) -> int:
    if cfg.network.locations:
        g = _location_graph(cfg)
        dist = network.empirical_degree_distribution(g)
        g.to_json(out.path("graph.json"))
        dist.to_csv(out.path("degree_distribution.csv"),
                    out.header(source="locations", n_nodes=g.n, mean_degree=repr(dist.mean_degree),
                               k_max=dist.k_max))
        return EXIT_OK
    dist = _distribution(cfg)
    dist.to_csv(out.path("degree_distribution.csv"),
                out.header(source="poisson", mean_degree=repr(dist.mean_degree), k_max=dist.k_max,
                           epsilon=cfg.network.epsilon, tail=repr(dist.epsilon_tail)))
    if cfg.network.sample_graph:
        g = network.sample_ppp_graph(cfg.net(), cfg.network.region, seed=cfg.seed,
                                     boundary_mode=cfg.network.boundary_mode)
        g.to_json(out.path("graph.json"))
    return EXIT_OK


METHODS = {
    "exact": lambda pol, net, th, d, eta: equilibrium.exact_equilibrium(pol, net, th, d),
    "fo": lambda pol, net, th, d, eta: equilibrium.first_order_equilibrium(pol, net, th, d),
    "lse": lambda pol, net, th, d, eta: equilibrium.lse_equilibrium(pol, net, th, d, eta),
}


def _mu_grid(spec) -> np.ndarray:
    if len(spec) != 3:
        raise ConfigError("mu_grid must be [start, stop, num]")
    start, stop, num = spec
    if int(num) < 1 or start < 0 or stop < start:
        raise ConfigError("mu_grid needs 0 <= start <= stop and num >= 1")
    return np.linspace(float(start), float(stop), int(num))


def cmd_equilibrium(cfg: ExperimentConfig, out: Emitter) -> int:
    net, th, dist = cfg.net(), cfg.threat_params(), _distribution(cfg)
    grid = _mu_grid(cfg.equilibrium.mu_grid)
    pol0 = PatchingPolicy(np.zeros(dist.k_max), cfg.weights.a, cfg.weights.b)
    table = equilibrium.compare_approximations(pol0, net, th, dist, grid, cfg.eta)
    equilibrium.write_table(out.path("theta_comparison.csv"), table, out.header(eta=cfg.eta))
    method = cfg.equilibrium.method
    solver = METHODS[method]
    degrees = [int(k) for k in cfg.equilibrium.curve_degrees]
    for k in degrees:
        if not 1 <= k <= dist.k_max:
            raise ConfigError(f"curve degree {k} outside 1..{dist.k_max}")
    rows = []
    for mu in grid:
        res = solver(PatchingPolicy.uniform(mu, dist.k_max), net, th, dist, cfg.eta)
        for k in range(1, dist.k_max + 1):
            rows.append((mu, k, res.b_tilde_star[k - 1], res.b_i_star[k - 1]))
    curves = np.array(rows, dtype=[("mu", float), ("k", np.int64), ("b_tilde_star", float), ("b_i_star", float)])
    equilibrium.write_table(out.path(f"equilibrium_{method}.csv"), curves, out.header(method=method))
    sel = np.isin(curves["k"], degrees)
    equilibrium.write_table(out.path(f"curves_{method}.csv"), curves[sel],
                            out.header(method=method, degrees="/".join(map(str, degrees))))
    return EXIT_OK


def cmd_optimize(cfg: ExperimentConfig, out: Emitter, sweep: str | None = None) -> int:
    net, th, dist = cfg.net(), cfg.threat_params(), _distribution(cfg)
    kw = cfg.solve_kw()
    if sweep:
        tg = cfg.defender_targets()
        taus = cfg.sweep.tau_b_tilde if sweep == "gamma_b" else cfg.sweep.tau_bi
        table = optimizer.sweep_cost(sweep, getattr(cfg.sweep, sweep), taus, tg, net, th, dist, **kw)
        optimizer.write_sweep(out.path(f"sweep_{sweep}.csv"), table, out.header(sweep=sweep))
        return EXIT_OK if table["converged"].all() else EXIT_NONCONVERGED
    rep = optimizer.solve(cfg.defender_targets(), net, th, dist, **kw)
    rep.to_json(out.path("report.json"))
    rep.policy_to_csv(out.path("policy.csv"), dist, out.header(converged=rep.converged))
    rep.trace_to_csv(out.path("trace.csv"), out.header(converged=rep.converged))
    return EXIT_OK if rep.converged else EXIT_NONCONVERGED


def cmd_simulate(cfg: ExperimentConfig, out: Emitter) -> int:
    net, th = cfg.net(), cfg.threat_params()
    a = cfg.abm
    graph = _location_graph(cfg) if cfg.network.locations else None
    seeds = [cfg.seed + i for i in range(a.n_seeds)]
    sim_kw = dict(initial_infected=a.initial_infected, seed_fraction=a.seed_fraction,
                  seed_degree=a.seed_degree, informed_share=a.informed_share,
                  static_vulnerable=a.static_vulnerable, record_events=a.record_events)
    summary = {"experiments": []}
    status = EXIT_OK
    for tau in a.targets:
        tg = optimizer.DefenderTargets(float(tau), cfg.targets.tau_bi)
        res = abm.two_phase_experiment(net, th, tg, region=tuple(cfg.network.region), seeds=seeds,
                                       graph=graph, phase1_end=a.phase1_end, t_end=a.t_end,
                                       record_stride=a.record_stride, solve_kw=cfg.solve_kw(), **sim_kw)
        if not res.report.converged:
            status = EXIT_NONCONVERGED
        summary["experiments"].append(res.to_dict())
        for o in res.outcomes:
            stem = f"tau{tau:g}_seed{o.seed}"
            o.trace.to_csv(out.path(f"trace_{stem}.csv"), out.header(tau_b_tilde=tau, seed=o.seed))
            if a.record_events:
                o.trace.events_to_gzip(out.path(f"events_{stem}.csv.gz"))
            for t in a.snapshot_times:
                g = graph if graph is not None else network.sample_ppp_graph(net, cfg.network.region, seed=o.seed)
                sc = abm.SimConfig(g, net, th, res.report.policy, res.phase1_end, res.t_end, o.seed,
                                   a.record_stride, **{**sim_kw, "record_events": False})
                abm.write_snapshot(out.path(f"snapshot_{stem}_t{t:g}.csv"), abm.snapshot(sc, float(t)),
                                   out.header(tau_b_tilde=tau, seed=o.seed, t=t))
    out.json("summary.json", summary)
    return status


def _csv_floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--lam", type=float, help="device intensity (devices/km^2)")
    common.add_argument("--r", type=float, help="communication range (km)")

    ap = argparse.ArgumentParser(prog="d2dbotnet", parents=[common],
                                 description="Botnet equilibria and optimal patching for D2D IoT networks.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("network", parents=[common], help="degree distribution and sampled graphs")
    p.add_argument("--ingest", help="location CSV (x,y in km or lon,lat in degrees)")
    p.add_argument("--sample-graph", action="store_true", help="also write a sampled PPP graph")

    p = sub.add_parser("equilibrium", parents=[common], help="equilibrium tables and curves")
    p.add_argument("--method", choices=sorted(METHODS))
    p.add_argument("--mu-grid", type=_csv_floats, help="start,stop,num")

    p = sub.add_parser("optimize", parents=[common], help="optimal patching policy")
    p.add_argument("--tau-b-tilde", type=float)
    p.add_argument("--tau-bi", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--cost-weighting", choices=optimizer.COST_WEIGHTINGS)
    p.add_argument("--sweep", choices=("gamma_b", "gamma_c"), help="cost table over a threat-rate grid")

    p = sub.add_parser("simulate", parents=[common], help="two-phase agent-based experiment")
    p.add_argument("--targets", type=_csv_floats, help="comma-separated un-compromised targets")
    p.add_argument("--n-seeds", type=int)
    p.add_argument("--ingest", help="location CSV; uses the ingested graph")
    return ap


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    g = lambda name: getattr(args, name, None)
    if g("seed") is not None:
        cfg.seed = args.seed
    if g("out") is not None:
        cfg.output_dir = args.out
    if g("lam") is not None:
        cfg.network.lam = args.lam
    if g("r") is not None:
        cfg.network.r = args.r
    if g("ingest") is not None:
        cfg.network.locations = args.ingest
    if g("sample_graph"):
        cfg.network.sample_graph = True
    if g("method") is not None:
        cfg.equilibrium.method = args.method
    if g("mu_grid") is not None:
        cfg.equilibrium.mu_grid = args.mu_grid
    if g("tau_b_tilde") is not None:
        cfg.targets.tau_b_tilde = args.tau_b_tilde
    if g("tau_bi") is not None:
        cfg.targets.tau_bi = args.tau_bi
    if g("max_iter") is not None:
        cfg.solver.max_iter = args.max_iter
    if g("cost_weighting") is not None:
        cfg.solver.cost_weighting = args.cost_weighting
    if g("targets") is not None:
        cfg.abm.targets = args.targets
    if g("n_seeds") is not None:
        cfg.abm.n_seeds = args.n_seeds
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(getattr(args, "config", None)), args)
        validate(cfg)
        out = Emitter(cfg, args.command)
        out.echo_config()
        if args.command == "network":
            return cmd_network(cfg, out)
        if args.command == "equilibrium":
            return cmd_equilibrium(cfg, out)
        if args.command == "optimize":
            return cmd_optimize(cfg, out, args.sweep)
        return cmd_simulate(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except equilibrium.ConvergenceError as exc:
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (network.LocationParseError, network.DegenerateInputError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
