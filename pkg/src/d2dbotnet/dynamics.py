"""Degree-based mean-field dynamics of malware infection and command spread.

For every degree ``k`` three proportions are tracked: un-compromised
devices ``b_tilde``, bots without control commands ``b_i_tilde`` and
informed bots ``b_i``.  Only ``b_tilde`` and ``b_i`` are integrated; the
un-informed share follows from ``b_tilde + b_i_tilde + b_i = 1``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .network import DegreeDistribution, NetworkParams


@dataclass(frozen=True)
class ThreatParams:
    """Botnet rates (all in 1/s)."""

    gamma_b: float = 0.001
    gamma_c: float = 0.001
    beta: float = 0.002

    def __post_init__(self):
        for name in ("gamma_b", "gamma_c", "beta"):
            v = getattr(self, name)
            if not v >= 0:
                raise ValueError(f"{name} must be >= 0, got {v}")


@dataclass
class PatchingPolicy:
    """Patching rates ``mu[k-1]`` for degrees ``k = 1..k_max``.

    ``weight_a`` and ``weight_b`` parametrise the logistic cost weights.
    """

    mu: np.ndarray
    weight_a: float = 0.2
    weight_b: float = 10.0

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float).reshape(-1)
        if np.any(~np.isfinite(self.mu)) or np.any(self.mu < 0):
            raise ValueError("patching rates must be finite and >= 0")

    @classmethod
    def uniform(cls, rate: float, k_max: int, **kw) -> "PatchingPolicy":
        return cls(np.full(k_max, float(rate)), **kw)

    def rate(self, k: int) -> float:
        """Rate for degree ``k``; 0 for isolated devices, last entry above ``k_max``."""
        if k <= 0:
            return 0.0
        return float(self.mu[min(k, self.mu.size) - 1])


@dataclass
class PopulationState:
    b_tilde: np.ndarray
    b_i_tilde: np.ndarray
    b_i: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.b_tilde = np.asarray(self.b_tilde, dtype=float)
        self.b_i_tilde = np.asarray(self.b_i_tilde, dtype=float)
        self.b_i = np.asarray(self.b_i, dtype=float)

    @classmethod
    def from_reduced(cls, b_tilde, b_i, t: float = 0.0) -> "PopulationState":
        b_tilde = np.asarray(b_tilde, dtype=float)
        b_i = np.asarray(b_i, dtype=float)
        return cls(b_tilde, 1.0 - b_tilde - b_i, b_i, t)

    @classmethod
    def seeded(cls, k_max: int, bot_fraction: float = 0.01, informed_share: float = 0.5):
        """Bots placed uniformly across degrees, ``informed_share`` of them informed."""
        if not 0.0 <= bot_fraction <= 1.0 or not 0.0 <= informed_share <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")
        b_i = np.full(k_max, bot_fraction * informed_share)
        return cls.from_reduced(np.full(k_max, 1.0 - bot_fraction), b_i)

    def closure_error(self) -> float:
        return float(np.max(np.abs(self.b_tilde + self.b_i_tilde + self.b_i - 1.0)))

    def average(self, dist: DegreeDistribution) -> tuple[float, float, float]:
        """pi-weighted averages over degrees ``1..k_max``, renormalised."""
        w = dist.pk / dist.pk.sum()
        return float(w @ self.b_tilde), float(w @ self.b_i_tilde), float(w @ self.b_i)


def _link_weights(dist: DegreeDistribution) -> np.ndarray:
    kp = dist.degrees * dist.pk
    norm = kp.sum()
    if norm <= 0:
        raise ValueError("degree distribution has zero mean degree")
    return kp / norm


def link_prob(values: np.ndarray, dist: DegreeDistribution) -> float:
    """Probability that a random link endpoint has the given per-degree property."""
    return float(min(max(_link_weights(dist) @ values, 0.0), 1.0))


def link_prob_uncompromised(state: PopulationState, dist: DegreeDistribution) -> float:
    return link_prob(state.b_tilde, dist)


def link_prob_informed(state: PopulationState, dist: DegreeDistribution) -> float:
    return link_prob(state.b_i, dist)


def sigma1(theta_b_tilde: float, net: NetworkParams, threat: ThreatParams) -> float:
    """Per-link infection hazard factor."""
    return net.rho * threat.gamma_b * net.p * (1.0 - theta_b_tilde)


def sigma2(theta_bi: float, net: NetworkParams, threat: ThreatParams) -> float:
    """Per-link command-reception hazard factor."""
    return net.rho * threat.gamma_c * theta_bi


class _System:
    """Pre-resolved vectors for fast repeated right-hand-side evaluation."""

    def __init__(self, policy, net, threat, dist):
        k_max = dist.k_max
        if policy.mu.size != k_max:
            raise ValueError(f"policy covers {policy.mu.size} degrees, distribution {k_max}")
        self.k = dist.degrees.astype(float)
        self.mu = policy.mu
        self.w = _link_weights(dist)
        self.c1 = net.rho * threat.gamma_b * net.p
        self.c2 = net.rho * threat.gamma_c
        self.beta = threat.beta

    def __call__(self, bt, bi):
        theta_bt = min(max(self.w @ bt, 0.0), 1.0)
        theta_bi = min(max(self.w @ bi, 0.0), 1.0)
        ks1 = self.k * self.c1 * (1.0 - theta_bt)
        ks2 = self.k * self.c2 * theta_bi
        dbt = self.mu - (self.mu + ks1) * bt
        dbi = ks2 - (self.mu + self.beta + ks2) * bi - ks2 * bt
        return dbt, dbi


def rhs(state: PopulationState, policy: PatchingPolicy, net: NetworkParams,
        threat: ThreatParams, dist: DegreeDistribution):
    """Time derivatives ``(d b_tilde, d b_i_tilde, d b_i)`` per degree."""
    dbt, dbi = _System(policy, net, threat, dist)(state.b_tilde, state.b_i)
    return dbt, -(dbt + dbi), dbi


def _reclose(bt, bi):
    np.clip(bt, 0.0, 1.0, out=bt)
    np.clip(bi, 0.0, 1.0, out=bi)
    over = bt + bi - 1.0
    np.subtract(bi, np.maximum(over, 0.0), out=bi)
    np.clip(bi, 0.0, 1.0, out=bi)


class Trajectory(Sequence):
    """Sampled ODE solution; indexable as a sequence of :class:`PopulationState`."""

    def __init__(self, t, b_tilde, b_i):
        self.t = np.asarray(t)
        self.b_tilde = np.asarray(b_tilde)
        self.b_i = np.asarray(b_i)

    @property
    def b_i_tilde(self) -> np.ndarray:
        return 1.0 - self.b_tilde - self.b_i

    def __len__(self):
        return self.t.size

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Trajectory(self.t[i], self.b_tilde[i], self.b_i[i])
        return PopulationState.from_reduced(self.b_tilde[i].copy(), self.b_i[i].copy(), float(self.t[i]))

    def __iter__(self) -> Iterator[PopulationState]:
        for i in range(len(self)):
            yield self[i]

    @property
    def final(self) -> PopulationState:
        return self[-1]

    def averages(self, dist: DegreeDistribution):
        """pi-weighted ``(avg_b_tilde, avg_b_i)`` at every sample."""
        w = dist.pk / dist.pk.sum()
        return self.b_tilde @ w, self.b_i @ w

    def to_csv(self, path, header: str | None = None) -> None:
        """Long format: one row per (sample, degree)."""
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "k", "b_tilde", "b_i_tilde", "b_i"])
            bit = self.b_i_tilde
            for n, t in enumerate(self.t):
                for j in range(self.b_tilde.shape[1]):
                    w.writerow([repr(float(t)), j + 1, repr(float(self.b_tilde[n, j])),
                                repr(float(bit[n, j])), repr(float(self.b_i[n, j]))])

    def aggregate_to_csv(self, path, dist: DegreeDistribution, header: str | None = None) -> None:
        avg_bt, avg_bi = self.averages(dist)
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(header + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "avg_b_tilde", "avg_b_i"])
            for t, a, b in zip(self.t, avg_bt, avg_bi):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])


def _check_initial(initial: PopulationState, k_max: int):
    if initial.b_tilde.shape != (k_max,) or initial.b_i.shape != (k_max,):
        raise ValueError(f"state must cover degrees 1..{k_max}")
    if initial.closure_error() > 1e-9:
        raise ValueError("initial state violates b_tilde + b_i_tilde + b_i = 1")


def _rk4_step(f, bt, bi, dt):
    a1, c1 = f(bt, bi)
    a2, c2 = f(bt + 0.5 * dt * a1, bi + 0.5 * dt * c1)
    a3, c3 = f(bt + 0.5 * dt * a2, bi + 0.5 * dt * c2)
    a4, c4 = f(bt + dt * a3, bi + dt * c3)
    bt = bt + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
    bi = bi + dt / 6.0 * (c1 + 2 * c2 + 2 * c3 + c4)
    return bt, bi


def integrate(initial: PopulationState, policy: PatchingPolicy, net: NetworkParams,
              threat: ThreatParams, dist: DegreeDistribution, t_end: float,
              dt: float = 1.0, stride: int = 1) -> Trajectory:
    """Fixed-step classical RK4 from ``initial.t`` to ``initial.t + t_end``.

    Every ``stride``-th step is emitted, plus the final state.  States are
    clamped into the unit box after each step.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if t_end < 0:
        raise ValueError("t_end must be >= 0")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _check_initial(initial, dist.k_max)
    f = _System(policy, net, threat, dist)
    n_steps = int(np.ceil(t_end / dt - 1e-9))
    bt, bi = initial.b_tilde.copy(), initial.b_i.copy()
    ts, bts, bis = [initial.t], [bt.copy()], [bi.copy()]
    t0 = initial.t
    for n in range(1, n_steps + 1):
        h = min(dt, t_end - (n - 1) * dt)
        bt, bi = _rk4_step(f, bt, bi, h)
        _reclose(bt, bi)
        if n % stride == 0 or n == n_steps:
            ts.append(t0 + min(n * dt, t_end))
            bts.append(bt.copy())
            bis.append(bi.copy())
    return Trajectory(np.array(ts), np.array(bts), np.array(bis))


def steady_state(initial: PopulationState, policy: PatchingPolicy, net: NetworkParams,
                 threat: ThreatParams, dist: DegreeDistribution, dt: float = 10.0,
                 tol: float = 1e-13, t_max: float = 1e8) -> PopulationState:
    """Integrate until the largest derivative falls below ``tol`` (1/s).

    Raises ``RuntimeError`` when ``t_max`` is reached first.
    """
    _check_initial(initial, dist.k_max)
    f = _System(policy, net, threat, dist)
    bt, bi = initial.b_tilde.copy(), initial.b_i.copy()
    t = initial.t
    check_every = 100
    n = 0
    while t < t_max:
        bt, bi = _rk4_step(f, bt, bi, dt)
        _reclose(bt, bi)
        t += dt
        n += 1
        if n % check_every == 0:
            dbt, dbi = f(bt, bi)
            if max(np.max(np.abs(dbt)), np.max(np.abs(dbi))) < tol:
                return PopulationState.from_reduced(bt, bi, t)
    raise RuntimeError(f"no steady state reached by t={t_max}")
