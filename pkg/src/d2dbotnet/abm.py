"""Agent-based simulation of botnet spread and patching on a spatial graph.

Each node carries one of three tags.  The process is simulated exactly in
continuous time: every node owns an exponential clock whose rate is its
total outgoing hazard, kept in an indexed min-heap, and redrawn whenever
the hazard changes (memorylessness makes redrawing exact).
"""

from __future__ import annotations

import csv
import gzip
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Sequence

import numpy as np
from numba import njit

from .dynamics import PatchingPolicy, ThreatParams
from .network import (NetworkParams, SpatialGraph, empirical_degree_distribution,
                      poisson_degree_distribution, sample_ppp_graph)
from .optimizer import DefenderTargets, OptimizationReport, solve


class NodeState(IntEnum):
    UNCOMPROMISED = 0
    BOT_UNINFORMED = 1
    BOT_INFORMED = 2


SEEDING_RULES = ("uniform", "degree")


@dataclass
class SimConfig:
    """One stochastic run.

    ``initial_infected`` is ``"uniform"`` (a random ``seed_fraction`` of all
    nodes), ``"degree"`` (a random ``seed_fraction`` of all nodes drawn from
    those with degree ``seed_degree``) or an explicit sequence of node ids.
    ``informed_share`` of the seeded bots start informed.  With
    ``static_vulnerable`` a fixed random ``p`` share of nodes is susceptible
    and the infection hazard drops the factor ``p``.
    """

    graph: SpatialGraph
    net: NetworkParams
    threat: ThreatParams
    policy: PatchingPolicy
    phase1_end: float = 1e4
    t_end: float = 2e4
    seed: int = 0
    record_stride: float = 50.0
    initial_infected: str | Sequence[int] = "uniform"
    seed_fraction: float = 0.01
    seed_degree: int = 2
    informed_share: float = 0.0
    static_vulnerable: bool = False
    record_events: bool = False

    def __post_init__(self):
        if self.graph.n == 0:
            raise ValueError("graph has no nodes")
        if not 0.0 <= self.phase1_end <= self.t_end:
            raise ValueError("need 0 <= phase1_end <= t_end")
        if not self.record_stride > 0:
            raise ValueError("record_stride must be > 0")
        if not 0.0 <= self.seed_fraction <= 1.0 or not 0.0 <= self.informed_share <= 1.0:
            raise ValueError("seed_fraction and informed_share must lie in [0, 1]")
        if isinstance(self.initial_infected, str) and self.initial_infected not in SEEDING_RULES:
            raise ValueError(f"initial_infected must be one of {SEEDING_RULES} or a node list")


@dataclass
class SimTrace:
    t: np.ndarray
    counts: np.ndarray
    n: int
    final_state: np.ndarray
    initial_state: np.ndarray
    events: np.ndarray | None = field(default=None, repr=False)

    @property
    def frac_uncompromised(self) -> np.ndarray:
        return self.counts[:, 0] / self.n

    @property
    def frac_bot_uninformed(self) -> np.ndarray:
        return self.counts[:, 1] / self.n

    @property
    def frac_bot_informed(self) -> np.ndarray:
        return self.counts[:, 2] / self.n

    @property
    def samples(self) -> np.ndarray:
        """Rows ``(t, frac_uncompromised, frac_bot_uninformed, frac_bot_informed)``."""
        return np.column_stack([self.t, self.counts / self.n])

    def time_average(self, t0: float, t1: float | None = None) -> float:
        """Mean un-compromised fraction over samples with ``t0 <= t <= t1``."""
        t1 = self.t[-1] if t1 is None else t1
        sel = (self.t >= t0) & (self.t <= t1)
        if not sel.any():
            raise ValueError("no samples in the averaging window")
        return float(self.frac_uncompromised[sel].mean())

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "frac_uncompromised", "frac_bot_uninformed", "frac_bot_informed"])
            for row in self.samples:
                w.writerow([repr(float(v)) for v in row])

    def events_to_gzip(self, path) -> None:
        if self.events is None:
            raise ValueError("run was not configured with record_events=True")
        # fixed mtime and empty name keep the archive byte-identical
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as gz:
            gz.write(b"t,node,from_state,to_state\n")
            for t, node, a, b in self.events:
                gz.write(f"{float(t)!r},{int(node)},{NodeState(a).name},{NodeState(b).name}\n".encode())


# -- indexed binary min-heap over node clocks -----------------------------

@njit(cache=True)
def _sift_up(heap, pos, key, h):
    node = heap[h]
    k = key[node]
    while h > 0:
        parent = (h - 1) >> 1
        pn = heap[parent]
        if key[pn] <= k:
            break
        heap[h] = pn
        pos[pn] = h
        h = parent
    heap[h] = node
    pos[node] = h


@njit(cache=True)
def _sift_down(heap, pos, key, h):
    n = heap.size
    node = heap[h]
    k = key[node]
    while True:
        c = 2 * h + 1
        if c >= n:
            break
        if c + 1 < n and key[heap[c + 1]] < key[heap[c]]:
            c += 1
        cn = heap[c]
        if key[cn] >= k:
            break
        heap[h] = cn
        pos[cn] = h
        h = c
    heap[h] = node
    pos[node] = h


@njit(cache=True)
def _set_key(heap, pos, key, node, value):
    old = key[node]
    key[node] = value
    if value < old:
        _sift_up(heap, pos, key, pos[node])
    elif value > old:
        _sift_down(heap, pos, key, pos[node])


@njit(cache=True)
def _hazard(i, state, nbot, ninf, vuln, mu, a_inf, a_cmd, beta, patch_on):
    s = state[i]
    if s == 0:
        return a_inf * nbot[i] if vuln[i] else 0.0
    h = a_cmd * ninf[i] if s == 1 else beta
    if patch_on:
        h += mu[i]
    return h


@njit(cache=True)
def _draw(t, h):
    if h <= 0.0:
        return np.inf
    return t + np.random.exponential(1.0 / h)


@njit(cache=True)
def _simulate(indptr, indices, state, vuln, mu, a_inf, a_cmd, beta, phase1_end, t_end,
              sample_times, seed, log_events):
    np.random.seed(seed)
    n = state.size
    nbot = np.zeros(n, np.int64)
    ninf = np.zeros(n, np.int64)
    counts = np.zeros(3, np.int64)
    for i in range(n):
        counts[state[i]] += 1
        if state[i] != 0:
            for e in range(indptr[i], indptr[i + 1]):
                nbot[indices[e]] += 1
                if state[i] == 2:
                    ninf[indices[e]] += 1
    patch_on = phase1_end <= 0.0
    key = np.empty(n)
    for i in range(n):
        key[i] = _draw(0.0, _hazard(i, state, nbot, ninf, vuln, mu, a_inf, a_cmd, beta, patch_on))
    heap = np.argsort(key, kind="mergesort").astype(np.int64)
    pos = np.empty(n, np.int64)
    for h in range(n):
        pos[heap[h]] = h

    n_samp = sample_times.size
    samples = np.zeros((n_samp, 3), np.int64)
    si = 0
    cap = 1024 if log_events else 1
    ev_t = np.empty(cap)
    ev_i = np.empty((cap, 3), np.int64)
    n_ev = 0
    t = 0.0
    while True:
        nxt = key[heap[0]] if n > 0 else np.inf
        if not patch_on and phase1_end < nxt and phase1_end <= t_end:
            while si < n_samp and sample_times[si] < phase1_end:
                samples[si] = counts
                si += 1
            t = phase1_end
            patch_on = True
            for i in range(n):
                key[i] = _draw(t, _hazard(i, state, nbot, ninf, vuln, mu, a_inf, a_cmd, beta, True))
            heap = np.argsort(key, kind="mergesort").astype(np.int64)
            for h in range(n):
                pos[heap[h]] = h
            continue
        if nxt > t_end:
            break
        while si < n_samp and sample_times[si] < nxt:
            samples[si] = counts
            si += 1
        i = heap[0]
        t = nxt
        old = state[i]
        if old == 0:
            new = 1
        else:
            h = _hazard(i, state, nbot, ninf, vuln, mu, a_inf, a_cmd, beta, patch_on)
            u = np.random.random() * h
            if old == 1:
                new = 2 if u < a_cmd * ninf[i] else 0
            else:
                new = 1 if u < beta else 0
        state[i] = new
        counts[old] -= 1
        counts[new] += 1
        bot_changed = (old == 0) or (new == 0)
        inf_changed = (old == 2) or (new == 2)
        dbot = 1 if old == 0 else (-1 if new == 0 else 0)
        dinf = 1 if new == 2 else (-1 if old == 2 else 0)
        for e in range(indptr[i], indptr[i + 1]):
            j = indices[e]
            nbot[j] += dbot
            ninf[j] += dinf
            sj = state[j]
            if (bot_changed and sj == 0) or (inf_changed and sj == 1):
                _set_key(heap, pos, key, j,
                         _draw(t, _hazard(j, state, nbot, ninf, vuln, mu, a_inf, a_cmd, beta, patch_on)))
        _set_key(heap, pos, key, i,
                 _draw(t, _hazard(i, state, nbot, ninf, vuln, mu, a_inf, a_cmd, beta, patch_on)))
        if log_events:
            if n_ev == cap:
                cap *= 2
                t2 = np.empty(cap)
                i2 = np.empty((cap, 3), np.int64)
                t2[:n_ev] = ev_t[:n_ev]
                i2[:n_ev] = ev_i[:n_ev]
                ev_t, ev_i = t2, i2
            ev_t[n_ev] = t
            ev_i[n_ev, 0] = i
            ev_i[n_ev, 1] = old
            ev_i[n_ev, 2] = new
            n_ev += 1
    while si < n_samp:
        samples[si] = counts
        si += 1
    return samples, ev_t[:n_ev], ev_i[:n_ev]


EVENT_DTYPE = [("t", float), ("node", np.int64), ("from_state", np.int8), ("to_state", np.int8)]


def node_rates(graph: SpatialGraph, policy: PatchingPolicy) -> np.ndarray:
    """Patching rate of every node from its degree."""
    deg = graph.degrees()
    if policy.mu.size == 0:
        return np.zeros(graph.n)
    idx = np.clip(deg, 1, policy.mu.size) - 1
    return np.where(deg > 0, policy.mu[idx], 0.0)


def initial_state(config: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    """Seeded node tags and susceptibility mask (deterministic in ``config.seed``)."""
    rng = np.random.default_rng([config.seed, 1])
    n = config.graph.n
    rule = config.initial_infected
    if isinstance(rule, str):
        n_seed = int(round(config.seed_fraction * n))
        if rule == "uniform":
            pool = np.arange(n)
        else:
            pool = np.flatnonzero(config.graph.degrees() == config.seed_degree)
        seeds = np.sort(rng.choice(pool, size=min(n_seed, pool.size), replace=False))
    else:
        seeds = np.unique(np.asarray(rule, dtype=np.int64))
        if seeds.size and (seeds[0] < 0 or seeds[-1] >= n):
            raise ValueError("seed node id out of range")
    state = np.zeros(n, np.int8)
    n_inf = int(round(config.informed_share * seeds.size))
    state[seeds] = NodeState.BOT_UNINFORMED
    state[seeds[rng.permutation(seeds.size)[:n_inf]]] = NodeState.BOT_INFORMED
    if config.static_vulnerable:
        vuln = rng.random(n) < config.net.p
        vuln[seeds] = True
    else:
        vuln = np.ones(n, dtype=bool)
    return state, vuln


def _execute(config: SimConfig, t_end: float, times: np.ndarray):
    g = config.graph
    state, vuln = initial_state(config)
    s0 = state.copy()
    indptr, indices = g.csr()
    a_inf = config.net.rho * config.threat.gamma_b
    if not config.static_vulnerable:
        a_inf *= config.net.p
    a_cmd = config.net.rho * config.threat.gamma_c
    samples, ev_t, ev_i = _simulate(indptr, indices, state, vuln, node_rates(g, config.policy),
                                    a_inf, a_cmd, config.threat.beta, float(config.phase1_end),
                                    float(t_end), times, int(config.seed) % (2**32),
                                    bool(config.record_events))
    return s0, state, samples, ev_t, ev_i


def run(config: SimConfig) -> SimTrace:
    """Simulate one realisation; identical configs give identical traces."""
    n_samp = int(np.floor(config.t_end / config.record_stride + 1e-9)) + 1
    times = np.arange(n_samp) * config.record_stride
    s0, state, samples, ev_t, ev_i = _execute(config, config.t_end, times)
    events = None
    if config.record_events:
        events = np.empty(ev_t.size, dtype=EVENT_DTYPE)
        events["t"] = ev_t
        events["node"] = ev_i[:, 0]
        events["from_state"] = ev_i[:, 1]
        events["to_state"] = ev_i[:, 2]
    return SimTrace(times, samples, config.graph.n, state, s0, events)


SNAPSHOT_COLUMNS = ("node", "x", "y", "state")


def snapshot(config: SimConfig, t: float) -> np.ndarray:
    """Per-node ``(node, x, y, state)`` at time ``t`` along the run ``config`` describes.

    The sample path up to ``t`` is the same one :func:`run` produces.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    _, state, _, _, _ = _execute(replace(config, record_events=False), float(t), np.zeros(0))
    out = np.empty(config.graph.n, dtype=[("node", np.int64), ("x", float), ("y", float), ("state", np.int8)])
    out["node"] = np.arange(config.graph.n)
    out["x"] = config.graph.positions[:, 0]
    out["y"] = config.graph.positions[:, 1]
    out["state"] = state
    return out


def write_snapshot(path, snap: np.ndarray, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SNAPSHOT_COLUMNS)
        for row in snap:
            w.writerow([int(row["node"]), repr(float(row["x"])), repr(float(row["y"])),
                        NodeState(int(row["state"])).name])


@dataclass
class SeedOutcome:
    seed: int
    n_nodes: int
    phase1_final: float
    time_average: float
    trace: SimTrace = field(repr=False)


@dataclass
class ExperimentSummary:
    targets: DefenderTargets
    report: OptimizationReport = field(repr=False)
    phase1_end: float
    t_end: float
    outcomes: list

    @property
    def mean(self) -> float:
        return float(np.mean([o.time_average for o in self.outcomes]))

    @property
    def std(self) -> float:
        return float(np.std([o.time_average for o in self.outcomes]))

    def to_dict(self) -> dict:
        return {
            "tau_b_tilde": self.targets.tau_b_tilde,
            "tau_bi": self.targets.tau_bi,
            "phase1_end": self.phase1_end,
            "t_end": self.t_end,
            "optimizer_converged": self.report.converged,
            "predicted_avg_b_tilde": self.report.avg_b_tilde,
            "predicted_exact_avg_b_tilde": self.report.exact_avg_b_tilde,
            "mean_time_average": self.mean,
            "std_time_average": self.std,
            "seeds": [{"seed": o.seed, "n_nodes": o.n_nodes, "phase1_final": o.phase1_final,
                       "time_average": o.time_average} for o in self.outcomes],
        }


PPP_PHASE1_END = 1e4
LOCATION_PHASE1_END = 2.5e4


def two_phase_experiment(net: NetworkParams, threat: ThreatParams, targets: DefenderTargets,
                         region=(3.3, 3.3), seeds: Sequence[int] = tuple(range(10)),
                         graph: SpatialGraph | None = None, phase1_end: float | None = None,
                         t_end: float | None = None, record_stride: float = 50.0,
                         solve_kw: dict | None = None, **sim_kw) -> ExperimentSummary:
    """Unpatched spread until ``phase1_end``, then the optimised policy.

    Without ``graph`` every seed draws its own PPP torus deployment on
    ``region`` and the policy is optimised for the Poisson degree model.
    A supplied graph (e.g. ingested locations) is shared by all seeds and
    the policy is optimised for its empirical degree distribution.  The
    reported time average covers the last half of the patching phase.
    """
    if graph is None:
        dist = poisson_degree_distribution(net)
        p1 = PPP_PHASE1_END if phase1_end is None else phase1_end
    else:
        dist = empirical_degree_distribution(graph)
        p1 = LOCATION_PHASE1_END if phase1_end is None else phase1_end
    t_end = 2.0 * p1 if t_end is None else t_end
    report = solve(targets, net, threat, dist, **(solve_kw or {}))
    window = p1 + 0.5 * (t_end - p1)
    outcomes = []
    for s in seeds:
        g = graph if graph is not None else sample_ppp_graph(net, region, seed=s)
        cfg = SimConfig(g, net, threat, report.policy, phase1_end=p1, t_end=t_end, seed=s,
                        record_stride=record_stride, **sim_kw)
        tr = run(cfg)
        before = tr.t <= p1
        outcomes.append(SeedOutcome(s, g.n, float(tr.frac_uncompromised[before][-1]),
                                    tr.time_average(window, t_end), tr))
    return ExperimentSummary(targets, report, p1, t_end, outcomes)
