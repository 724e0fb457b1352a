"""Minimum-disruption patching policy by Lagrangian dual decomposition.

The defender minimises patching cost subject to a floor on the average
un-compromised proportion and a ceiling on the average informed-bot
proportion.  Relaxing both constraints splits the problem into one scalar
minimisation per degree plus a projected subgradient ascent on the two
multipliers.

Cost weighting.  ``"expected"`` charges every degree class by its share
``pi_k`` of the population, so ``pi_k`` drops out of each per-degree
argmin.  ``"per_class"`` (the default) charges each degree class the same
weight ``w_k mu_k^2`` regardless of how common it is, which makes the
policy follow the degree profile.  Constraints are always pi-weighted.

Units.  Patching rates are searched as ``x = mu / mu_bound`` where
``mu_bound = rho * gamma_b * p * E[K]``, and costs are measured in units
of ``mu_bound**2`` (times ``k_max**2`` for per-class costs).  The
multipliers ``zeta`` and ``xi`` live in those normalised units, which
keeps one step-size schedule usable across parameter sets.
``OptimizationReport.multiplier_scale`` converts them back.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .dynamics import PatchingPolicy, ThreatParams
from .equilibrium import (
    exact_equilibrium,
    ConvergenceError,
    patching_rate_bound,
    smoothed_populations,
)
from .network import DegreeDistribution, NetworkParams

GRID_POINTS = 512
UPPER_FACTOR = 1.05
PER_CLASS = "per_class"
EXPECTED = "expected"
COST_WEIGHTINGS = (PER_CLASS, EXPECTED)
TRACE_COLUMNS = ("iter", "zeta", "xi", "grad_zeta", "grad_xi", "dual_value", "avg_b_tilde", "avg_bi")


@dataclass(frozen=True)
class DefenderTargets:
    tau_b_tilde: float
    tau_bi: float

    def __post_init__(self):
        for name in ("tau_b_tilde", "tau_bi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass
class DualState:
    zeta: float = 1.0
    xi: float = 1.0
    iteration: int = 0
    dual_value: float = float("nan")

    def __post_init__(self):
        if self.zeta < 0 or self.xi < 0:
            raise ValueError("multipliers must be nonnegative")


@dataclass
class OptimizationReport:
    """Outcome of :func:`solve`.

    ``primal_cost`` is the objective the solver minimised (per-class sum or
    pi-weighted, see ``cost_weighting``); ``expected_cost`` is always the
    pi-weighted total.  ``avg_*`` use the smoothed equilibria the solver
    optimises over, ``exact_avg_*`` the self-consistent fixed point at the
    returned policy.  Multipliers are normalised; multiply by
    ``multiplier_scale`` for the unnormalised problem.
    """

    policy: PatchingPolicy
    dual: DualState
    primal_cost: float
    expected_cost: float
    avg_b_tilde: float
    avg_bi: float
    exact_avg_b_tilde: float
    exact_avg_bi: float
    constraint_pruned: bool
    converged: bool
    feasible: bool
    slackness_zeta: float
    slackness_xi: float
    best_dual_value: float
    mu_bound: float
    multiplier_scale: float
    cost_weighting: str
    targets: DefenderTargets
    trace: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "policy": {"mu": [float(v) for v in self.policy.mu],
                       "weight_a": self.policy.weight_a, "weight_b": self.policy.weight_b},
            "dual": asdict(self.dual),
            "zeta_native": self.dual.zeta * self.multiplier_scale,
            "xi_native": self.dual.xi * self.multiplier_scale,
            "primal_cost": self.primal_cost,
            "expected_cost": self.expected_cost,
            "avg_b_tilde": self.avg_b_tilde,
            "avg_bi": self.avg_bi,
            "exact_avg_b_tilde": self.exact_avg_b_tilde,
            "exact_avg_bi": self.exact_avg_bi,
            "constraint_pruned": self.constraint_pruned,
            "converged": self.converged,
            "feasible": self.feasible,
            "slackness_zeta": self.slackness_zeta,
            "slackness_xi": self.slackness_xi,
            "best_dual_value": self.best_dual_value,
            "mu_bound": self.mu_bound,
            "multiplier_scale": self.multiplier_scale,
            "cost_weighting": self.cost_weighting,
            "targets": asdict(self.targets),
            "iterations": self.dual.iteration,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    def trace_to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            cols = [self.trace[c] for c in TRACE_COLUMNS]
            for row in zip(*cols):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])

    def policy_to_csv(self, path, dist: DegreeDistribution, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "mu_star", "pi_k", "w_k"])
            for k, mu in zip(dist.degrees, self.policy.mu):
                w.writerow([int(k), repr(float(mu)), repr(float(dist.pi[k])),
                            repr(float(cost_weight(k, self.policy.weight_a, self.policy.weight_b)))])


def cost_weight(k, a: float = 0.2, b: float = 10.0):
    """Logistic disruption weight ``1 / (1 + exp(-a (k - b)))``."""
    out = 1.0 / (1.0 + np.exp(-a * (np.asarray(k, dtype=float) - b)))
    return float(out) if np.ndim(out) == 0 else out


def patching_cost(mu, k, a: float = 0.2, b: float = 10.0):
    """Quadratic disruption cost ``w_k mu^2``."""
    return cost_weight(k, a, b) * np.asarray(mu, dtype=float) ** 2


def pruning_threshold(net: NetworkParams, threat: ThreatParams, dist: DegreeDistribution) -> float:
    """Un-compromised target above which the informed-bot constraint cannot bind."""
    m = dist.mean_degree
    den = m * net.p * (net.rho * threat.gamma_b + threat.gamma_c)
    if den == 0:
        return 0.0
    return max((m * net.p * threat.gamma_c - threat.beta) / den, 0.0)


def informed_constraint_redundant(net: NetworkParams, threat: ThreatParams,
                                  dist: DegreeDistribution, targets: DefenderTargets) -> bool:
    """True when the un-compromised target alone already forces informed bots to zero."""
    return targets.tau_b_tilde >= pruning_threshold(net, threat, dist)


# -- per-degree subproblem ------------------------------------------------

@njit(cache=True)
def _smoothed_point(mu, k, rho, gb, gc, p, beta, mean_degree, eta):
    bound = rho * gb * p * mean_degree
    x = mu / bound
    d = abs(1.0 - x)
    tb = min(1.0, x) - math.log1p(math.exp(-eta * d)) / eta
    y = 1.0 - (mu * gc + rho * gb * (beta + mu)) / (mean_degree * rho * p * gb * gc)
    ti = max(0.0, y) + math.log1p(math.exp(-eta * abs(y))) / eta
    ks1 = k * rho * gb * p * (1.0 - tb)
    den1 = mu + ks1
    if den1 > 0:
        bt = mu / den1
        first = k * ks1 * rho * gc / den1
    else:
        bt = 1.0
        first = 0.0
    second = ti / (beta + mu + k * rho * gc + ti)
    return bt, first * second


@njit(cache=True)
def _objective(x, j, zeta, xi, use_bi, cw, q, ks, prm):
    bt, bi = _smoothed_point(x * prm[7], ks[j], prm[0], prm[1], prm[2], prm[3], prm[4], prm[5], prm[6])
    f = cw[j] * x * x - zeta * q[j] * bt
    if use_bi:
        f += xi * q[j] * bi
    return f, bt, bi


@njit(cache=True)
def _inner_all(zeta, xi, use_bi, grid, bt_tab, bi_tab, cw, q, ks, prm, n_golden):
    n_k = ks.size
    n_g = grid.size
    xs = np.empty(n_k)
    bts = np.empty(n_k)
    bis = np.empty(n_k)
    fs = np.empty(n_k)
    r = (math.sqrt(5.0) - 1.0) / 2.0
    for j in range(n_k):
        best = np.inf
        idx = 0
        for g in range(n_g):
            f = cw[j] * grid[g] * grid[g] - zeta * q[j] * bt_tab[j, g]
            if use_bi:
                f += xi * q[j] * bi_tab[j, g]
            if f < best:
                best = f
                idx = g
        lo = grid[max(idx - 1, 0)]
        hi = grid[min(idx + 1, n_g - 1)]
        c = hi - r * (hi - lo)
        d = lo + r * (hi - lo)
        fc = _objective(c, j, zeta, xi, use_bi, cw, q, ks, prm)[0]
        fd = _objective(d, j, zeta, xi, use_bi, cw, q, ks, prm)[0]
        for _ in range(n_golden):
            if fc <= fd:
                hi = d
                d = c
                fd = fc
                c = hi - r * (hi - lo)
                fc = _objective(c, j, zeta, xi, use_bi, cw, q, ks, prm)[0]
            else:
                lo = c
                c = d
                fc = fd
                d = lo + r * (hi - lo)
                fd = _objective(d, j, zeta, xi, use_bi, cw, q, ks, prm)[0]
        xm = 0.5 * (lo + hi)
        fm, btm, bim = _objective(xm, j, zeta, xi, use_bi, cw, q, ks, prm)
        if fm < best:
            xs[j] = xm
            fs[j] = fm
            bts[j] = btm
            bis[j] = bim
        else:
            xs[j] = grid[idx]
            fs[j] = best
            bts[j] = bt_tab[j, idx]
            bis[j] = bi_tab[j, idx]
    return xs, bts, bis, fs


class InnerProblem:
    """All per-degree subproblems for one parameter set.

    Holds the search grid and tabulated smoothed equilibria so each dual
    iteration only pays for the golden-section refinement.
    """

    def __init__(self, net: NetworkParams, threat: ThreatParams, dist: DegreeDistribution,
                 weight_a: float = 0.2, weight_b: float = 10.0, eta: float = 100.0,
                 cost_weighting: str = PER_CLASS, grid_points: int = GRID_POINTS,
                 golden_iters: int = 48):
        if cost_weighting not in COST_WEIGHTINGS:
            raise ValueError(f"cost_weighting must be one of {COST_WEIGHTINGS}")
        self.net, self.threat, self.dist = net, threat, dist
        self.weight_a, self.weight_b, self.eta = weight_a, weight_b, eta
        self.cost_weighting = cost_weighting
        self.bound = patching_rate_bound(net, threat, dist)
        if not self.bound > 0:
            raise ValueError("patching problem is degenerate: rho * gamma_b * p * E[K] == 0")
        self.ks = dist.degrees.astype(float)
        self.q = dist.pk / dist.pk.sum()
        self.w = cost_weight(self.ks, weight_a, weight_b)
        if cost_weighting == EXPECTED:
            self.cw = self.w * self.q
        else:
            # dividing by k_max**2 only rescales the multipliers; it keeps the
            # ascent well conditioned for aggressive targets
            self.cw = self.w / self.ks.size**2
        # objective in native units = multiplier_scale * normalised objective
        self.multiplier_scale = self.bound**2 * (1.0 if cost_weighting == EXPECTED else self.ks.size**2)
        self.grid = np.linspace(0.0, UPPER_FACTOR, grid_points)
        bt, bi = smoothed_populations(self.grid[None, :] * self.bound, self.ks[:, None],
                                      net, threat, dist.mean_degree, eta)
        self.bt_tab = np.ascontiguousarray(bt)
        self.bi_tab = np.ascontiguousarray(bi)
        self.prm = np.array([net.rho, threat.gamma_b, threat.gamma_c, net.p, threat.beta,
                             dist.mean_degree, eta, self.bound])
        self.golden_iters = golden_iters

    def solve(self, zeta: float, xi: float, pruned: bool):
        """Minimisers ``x`` plus smoothed ``B~``, ``BI`` and objective values per degree."""
        return _inner_all(float(zeta), float(xi), not pruned, self.grid, self.bt_tab, self.bi_tab,
                          self.cw, self.q, self.ks, self.prm, self.golden_iters)

    def objective(self, x, zeta, xi, pruned):
        """Vectorised objective on an arbitrary ``(n_k, n)`` grid of normalised rates."""
        x = np.asarray(x, dtype=float)
        bt, bi = smoothed_populations(x * self.bound, self.ks[:, None], self.net, self.threat,
                                      self.dist.mean_degree, self.eta)
        f = self.cw[:, None] * x**2 - zeta * self.q[:, None] * bt
        if not pruned:
            f = f + xi * self.q[:, None] * bi
        return f


def inner_minimize(k: int, zeta: float, xi: float, weight_a: float, weight_b: float,
                   net: NetworkParams, threat: ThreatParams, dist: DegreeDistribution,
                   eta: float = 100.0, pruned: bool = True,
                   cost_weighting: str = PER_CLASS) -> float:
    """Optimal patching rate (1/s) of degree ``k`` for the given multipliers."""
    if zeta < 0 or xi < 0:
        raise ValueError("multipliers must be nonnegative")
    if not 1 <= k <= dist.k_max:
        raise ValueError(f"degree {k} outside 1..{dist.k_max}")
    prob = InnerProblem(net, threat, dist, weight_a, weight_b, eta, cost_weighting)
    xs = prob.solve(zeta, xi, pruned)[0]
    return float(xs[k - 1] * prob.bound)


def dual_update(dual: DualState, avg_b_tilde: float, avg_bi: float, targets: DefenderTargets,
                alpha: float, pruned: bool) -> DualState:
    """One projected subgradient ascent step on the dual function.

    ``avg_b_tilde`` and ``avg_bi`` are the pi-weighted equilibria at the
    current inner minimisers.
    """
    grad_zeta = targets.tau_b_tilde - avg_b_tilde
    grad_xi = avg_bi - targets.tau_bi
    zeta = max(dual.zeta + alpha * grad_zeta, 0.0)
    xi = 0.0 if pruned else max(dual.xi + alpha * grad_xi, 0.0)
    return DualState(zeta, xi, dual.iteration + 1, dual.dual_value)


def _trivial_report(targets, net, threat, dist, weight_a, weight_b, cost_weighting):
    k_max = dist.k_max
    pol = PatchingPolicy(np.zeros(k_max), weight_a, weight_b)
    empty = {c: np.zeros(0) for c in TRACE_COLUMNS}
    return OptimizationReport(pol, DualState(0.0, 0.0, 0, 0.0), 0.0, 0.0, 1.0, 0.0, 1.0, 0.0,
                              True, True, True, 0.0, 0.0, 0.0, 0.0, 0.0, cost_weighting, targets, empty)


def solve(targets: DefenderTargets, net: NetworkParams, threat: ThreatParams,
          dist: DegreeDistribution, weight_a: float = 0.2, weight_b: float = 10.0,
          eta: float = 100.0, alpha0: float = 0.05, tol: float = 1e-8,
          max_iter: int = 50_000, patience: int = 10, feas_tol: float = 1e-3,
          cost_weighting: str = PER_CLASS, zeta0: float = 1.0, xi0: float = 1.0,
          force_unpruned: bool = False) -> OptimizationReport:
    """Dual decomposition with diminishing steps ``alpha0 / sqrt(i + 1)``.

    Stops once the multipliers move by less than ``tol`` (summed) for
    ``patience`` consecutive iterations while the smoothed constraints hold
    within ``feas_tol``.  Otherwise the report comes back with
    ``converged=False`` and the full trace.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if patching_rate_bound(net, threat, dist) == 0:
        return _trivial_report(targets, net, threat, dist, weight_a, weight_b, cost_weighting)
    prob = InnerProblem(net, threat, dist, weight_a, weight_b, eta, cost_weighting)
    pruned = informed_constraint_redundant(net, threat, dist, targets) and not force_unpruned
    q = prob.q
    dual = DualState(zeta0, 0.0 if pruned else xi0)
    trace = np.zeros((max_iter, len(TRACE_COLUMNS)))
    best = -math.inf
    quiet = 0
    converged = False
    n = 0
    for i in range(max_iter):
        xs, bts, bis, fs = prob.solve(dual.zeta, dual.xi, pruned)
        avg_bt, avg_bi = float(q @ bts), float(q @ bis)
        g = float(fs.sum()) + dual.zeta * targets.tau_b_tilde - (0.0 if pruned else dual.xi * targets.tau_bi)
        best = max(best, g)
        dual.dual_value = g
        trace[i] = (i, dual.zeta, dual.xi, targets.tau_b_tilde - avg_bt,
                    avg_bi - targets.tau_bi, g, avg_bt, avg_bi)
        n = i + 1
        new = dual_update(dual, avg_bt, avg_bi, targets, alpha0 / math.sqrt(i + 1), pruned)
        step = abs(new.zeta - dual.zeta) + abs(new.xi - dual.xi)
        feasible = avg_bt >= targets.tau_b_tilde - feas_tol and avg_bi <= targets.tau_bi + feas_tol
        quiet = quiet + 1 if step < tol else 0
        if quiet >= patience and feasible:
            converged = True
            break
        dual = new

    xs, bts, bis, fs = prob.solve(dual.zeta, dual.xi, pruned)
    mu = xs * prob.bound
    policy = PatchingPolicy(mu, weight_a, weight_b)
    avg_bt, avg_bi = float(q @ bts), float(q @ bis)
    per_degree = patching_cost(mu, prob.ks, weight_a, weight_b)
    expected = float(q @ per_degree)
    primal = expected if cost_weighting == EXPECTED else float(per_degree.sum())
    try:
        ex = exact_equilibrium(policy, net, threat, dist)
        ex_bt, ex_bi = ex.averages(dist)
    except ConvergenceError:
        ex_bt = ex_bi = float("nan")
    feasible = avg_bt >= targets.tau_b_tilde - feas_tol and avg_bi <= targets.tau_bi + feas_tol
    trace = trace[:n]
    return OptimizationReport(
        policy=policy,
        dual=DualState(dual.zeta, dual.xi, n, dual.dual_value),
        primal_cost=primal,
        expected_cost=expected,
        avg_b_tilde=avg_bt,
        avg_bi=avg_bi,
        exact_avg_b_tilde=ex_bt,
        exact_avg_bi=ex_bi,
        constraint_pruned=pruned,
        converged=converged,
        feasible=feasible,
        slackness_zeta=dual.zeta * abs(targets.tau_b_tilde - avg_bt),
        slackness_xi=dual.xi * abs(avg_bi - targets.tau_bi),
        best_dual_value=best,
        mu_bound=prob.bound,
        multiplier_scale=prob.multiplier_scale,
        cost_weighting=cost_weighting,
        targets=targets,
        trace={c: trace[:, j] for j, c in enumerate(TRACE_COLUMNS)},
    )


SWEEP_COLUMNS = ("parameter", "value", "tau_b_tilde", "tau_bi", "expected_cost",
                 "primal_cost", "converged", "feasible")


def sweep_cost(parameter: str, values, target_values, base_targets: DefenderTargets,
               net: NetworkParams, threat: ThreatParams, dist: DegreeDistribution,
               **solve_kw) -> np.ndarray:
    """Total patching cost over a grid of a threat rate and one target.

    ``parameter="gamma_b"`` pairs with varying ``tau_b_tilde``;
    ``parameter="gamma_c"`` pairs with varying ``tau_bi``.
    """
    if parameter not in ("gamma_b", "gamma_c"):
        raise ValueError("parameter must be 'gamma_b' or 'gamma_c'")
    rows = []
    for tau in target_values:
        if parameter == "gamma_b":
            tg = DefenderTargets(tau, base_targets.tau_bi)
        else:
            tg = DefenderTargets(base_targets.tau_b_tilde, tau)
        for v in values:
            th = ThreatParams(**{**asdict(threat), parameter: float(v)})
            rep = solve(tg, net, th, dist, **solve_kw)
            rows.append((parameter, float(v), tg.tau_b_tilde, tg.tau_bi, rep.expected_cost,
                         rep.primal_cost, rep.converged, rep.feasible))
    dtype = [("parameter", "U8"), ("value", float), ("tau_b_tilde", float), ("tau_bi", float),
             ("expected_cost", float), ("primal_cost", float), ("converged", bool), ("feasible", bool)]
    return np.array(rows, dtype=dtype)


def write_sweep(path, table: np.ndarray, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in table:
            w.writerow([row[0]] + [repr(float(row[c])) for c in SWEEP_COLUMNS[1:6]]
                       + [int(row["converged"]), int(row["feasible"])])
