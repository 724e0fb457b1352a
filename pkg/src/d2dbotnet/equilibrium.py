"""Equilibrium populations of the mean-field botnet dynamics.

Three routes are provided:

* ``exact_equilibrium`` solves the self-consistent link-probability
  equations by damped fixed-point iteration;
* ``first_order_theta`` is the closed-form first-order approximation with
  hard ``min``/``max`` clamps;
* ``lse_theta`` / ``smoothed_equilibrium`` replace the clamps by
  log-sum-exp soft versions with sharpness ``eta`` so the result is smooth
  in the patching rate.

The closed forms take the patching rate of the degree under study; with a
heterogeneous policy the link probability therefore becomes per-degree.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .dynamics import PatchingPolicy, ThreatParams, _link_weights
from .network import DegreeDistribution, NetworkParams

EXACT = "exact_fixed_point"
FIRST_ORDER = "first_order"
LSE = "lse_smoothed"


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class DegenerateThreatError(ZeroDivisionError):
    pass


@dataclass
class EquilibriumResult:
    b_tilde_star: np.ndarray
    b_i_star: np.ndarray
    theta_b_tilde_star: float
    theta_bi_star: float
    method: str = EXACT
    eta: float | None = None
    iterations: int = 0
    residual: float = 0.0

    @property
    def b_i_tilde_star(self) -> np.ndarray:
        return 1.0 - self.b_tilde_star - self.b_i_star

    def averages(self, dist: DegreeDistribution) -> tuple[float, float]:
        w = dist.pk / dist.pk.sum()
        return float(w @ self.b_tilde_star), float(w @ self.b_i_star)


def _populations(mu, k, ks1, ks2, beta):
    den1 = mu + ks1
    with np.errstate(invalid="ignore", divide="ignore"):
        bt = np.where(den1 > 0, mu / np.where(den1 > 0, den1, 1.0), 1.0)
        den2 = den1 * (beta + mu + ks2)
        bi = np.where(den2 > 0, ks1 * ks2 / np.where(den2 > 0, den2, 1.0), 0.0)
    return bt, bi


def equilibrium_populations(mu, theta_b_tilde, theta_bi, net: NetworkParams,
                            threat: ThreatParams, k):
    """Per-degree equilibria for given link probabilities.

    ``B~_k = mu_k / (mu_k + k s1)`` and
    ``BI_k = k^2 s1 s2 / ((mu_k + k s1)(beta + mu_k + k s2))``.
    """
    k = np.asarray(k, dtype=float)
    mu = np.asarray(mu, dtype=float)
    ks1 = k * net.rho * threat.gamma_b * net.p * (1.0 - theta_b_tilde)
    ks2 = k * net.rho * threat.gamma_c * theta_bi
    return _populations(mu, k, ks1, ks2, threat.beta)


def exact_equilibrium(policy: PatchingPolicy, net: NetworkParams, threat: ThreatParams,
                      dist: DegreeDistribution, tol: float = 1e-10, max_iter: int = 100_000,
                      damping: float = 0.5) -> EquilibriumResult:
    """Self-consistent equilibrium by damped iteration on the link probabilities.

    Iteration starts from ``theta_b_tilde = 0`` and ``theta_bi = 1`` so it
    settles on the endemic solution rather than the trivial malware-free or
    command-free ones whenever the endemic one exists.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    k = dist.degrees.astype(float)
    mu = policy.mu
    if mu.size != k.size:
        raise ValueError(f"policy covers {mu.size} degrees, distribution {k.size}")
    w = _link_weights(dist)
    c1 = net.rho * threat.gamma_b * net.p
    c2 = net.rho * threat.gamma_c
    th_b, th_i = 0.0, 1.0
    res = math.inf
    for it in range(1, max_iter + 1):
        bt, bi = _populations(mu, k, k * c1 * (1.0 - th_b), k * c2 * th_i, threat.beta)
        new_b = min(max(float(w @ bt), 0.0), 1.0)
        new_i = min(max(float(w @ bi), 0.0), 1.0)
        res = max(abs(new_b - th_b), abs(new_i - th_i))
        if res < tol:
            return EquilibriumResult(bt, bi, new_b, new_i, EXACT, iterations=it, residual=res)
        th_b += damping * (new_b - th_b)
        th_i += damping * (new_i - th_i)
    raise ConvergenceError("fixed-point iteration did not converge", res)


def patching_rate_bound(net: NetworkParams, threat: ThreatParams, dist: DegreeDistribution) -> float:
    """Patching rate above which the first-order un-compromised link probability is 1."""
    return net.rho * threat.gamma_b * net.p * dist.mean_degree


def max_refresh_rate(net: NetworkParams, threat: ThreatParams, dist: DegreeDistribution) -> float:
    """Largest refresh rate that still admits an informed-bot population."""
    return net.p * threat.gamma_c * dist.mean_degree


def eradication_rate(net: NetworkParams, threat: ThreatParams, dist: DegreeDistribution) -> float:
    """Patching rate that drives the first-order informed-link probability to 0."""
    rg = net.rho * threat.gamma_b
    den = threat.gamma_c + rg
    if den == 0:
        return 0.0
    return max((rg * threat.gamma_c * net.p * dist.mean_degree - rg * threat.beta) / den, 0.0)


def _fo_args(mu, net, threat, mean_degree):
    bound = net.rho * threat.gamma_b * net.p * mean_degree
    den_i = mean_degree * net.rho * net.p * threat.gamma_b * threat.gamma_c
    if bound == 0 or den_i == 0:
        raise DegenerateThreatError("rho * gamma_b * p * E[K] (and gamma_c) must be nonzero")
    mu = np.asarray(mu, dtype=float)
    x = mu / bound
    y = 1.0 - (mu * threat.gamma_c + net.rho * threat.gamma_b * (threat.beta + mu)) / den_i
    return x, y


def first_order_theta_mu(mu, net: NetworkParams, threat: ThreatParams, mean_degree: float):
    """Vectorised first-order link probabilities for patching rate(s) ``mu``."""
    x, y = _fo_args(mu, net, threat, mean_degree)
    return np.minimum(x, 1.0), np.maximum(y, 0.0)


def soft_min(a, b, eta):
    """Log-sum-exp soft minimum, never above ``min(a, b)``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.minimum(a, b) - np.log1p(np.exp(-eta * np.abs(a - b))) / eta


def soft_max(a, b, eta):
    """Log-sum-exp soft maximum, never below ``max(a, b)``."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.maximum(a, b) + np.log1p(np.exp(-eta * np.abs(a - b))) / eta


def lse_theta_mu(mu, net: NetworkParams, threat: ThreatParams, mean_degree: float, eta: float):
    if not eta > 0:
        raise ValueError("eta must be > 0")
    x, y = _fo_args(mu, net, threat, mean_degree)
    return soft_min(1.0, x, eta), soft_max(0.0, y, eta)


def _check_k(policy, k):
    if not 1 <= k <= policy.mu.size:
        raise ValueError(f"degree {k} outside 1..{policy.mu.size}")
    return policy.mu[k - 1]


def first_order_theta(policy: PatchingPolicy, net: NetworkParams, threat: ThreatParams,
                      dist: DegreeDistribution, k: int) -> tuple[float, float]:
    mu = _check_k(policy, k)
    tb, ti = first_order_theta_mu(mu, net, threat, dist.mean_degree)
    return float(tb), float(ti)


def lse_theta(policy: PatchingPolicy, net: NetworkParams, threat: ThreatParams,
              dist: DegreeDistribution, k: int, eta: float = 100.0) -> tuple[float, float]:
    mu = _check_k(policy, k)
    tb, ti = lse_theta_mu(mu, net, threat, dist.mean_degree, eta)
    return float(tb), float(ti)


def smoothed_populations(mu, k, net: NetworkParams, threat: ThreatParams,
                         mean_degree: float, eta: float = 100.0):
    """Closed-form smoothed equilibria ``(B~_k, BI_k)``, vectorised over ``mu`` and ``k``.

    The informed-bot expression keeps the printed second-factor denominator
    ``beta + mu + k rho gamma_c + theta_bi``.
    """
    k = np.asarray(k, dtype=float)
    mu = np.asarray(mu, dtype=float)
    tb, ti = lse_theta_mu(mu, net, threat, mean_degree, eta)
    ks1 = k * net.rho * threat.gamma_b * net.p * (1.0 - tb)
    kc = k * net.rho * threat.gamma_c
    den1 = mu + ks1
    with np.errstate(invalid="ignore", divide="ignore"):
        bt = np.where(den1 > 0, mu / np.where(den1 > 0, den1, 1.0), 1.0)
        first = np.where(den1 > 0, k * ks1 * net.rho * threat.gamma_c / np.where(den1 > 0, den1, 1.0), 0.0)
    second = ti / (threat.beta + mu + kc + ti)
    return bt, first * second


def smoothed_equilibrium(policy: PatchingPolicy, net: NetworkParams, threat: ThreatParams,
                         dist: DegreeDistribution, k: int, eta: float = 100.0) -> tuple[float, float]:
    mu = _check_k(policy, k)
    bt, bi = smoothed_populations(mu, k, net, threat, dist.mean_degree, eta)
    return float(bt), float(bi)


def clamped_populations(mu, k, net: NetworkParams, threat: ThreatParams, mean_degree: float):
    """Equilibria with the hard-clamped first-order link probabilities substituted."""
    tb, ti = first_order_theta_mu(mu, net, threat, mean_degree)
    return equilibrium_populations(mu, tb, ti, net, threat, k)


def first_order_equilibrium(policy, net, threat, dist) -> EquilibriumResult:
    """Per-degree populations with each degree's own first-order link probabilities."""
    k = dist.degrees
    tb, ti = first_order_theta_mu(policy.mu, net, threat, dist.mean_degree)
    bt, bi = equilibrium_populations(policy.mu, tb, ti, net, threat, k)
    w = _link_weights(dist)
    return EquilibriumResult(bt, bi, float(w @ tb), float(w @ ti), FIRST_ORDER)


def lse_equilibrium(policy, net, threat, dist, eta: float = 100.0) -> EquilibriumResult:
    k = dist.degrees
    tb, ti = lse_theta_mu(policy.mu, net, threat, dist.mean_degree, eta)
    bt, bi = smoothed_populations(policy.mu, k, net, threat, dist.mean_degree, eta)
    w = _link_weights(dist)
    return EquilibriumResult(bt, bi, float(w @ tb), float(w @ ti), LSE, eta=eta)


COMPARISON_COLUMNS = ("mu", "theta_bt_exact", "theta_bt_fo", "theta_bt_lse",
                      "theta_bi_exact", "theta_bi_fo", "theta_bi_lse")


def compare_approximations(policy: PatchingPolicy | None, net: NetworkParams, threat: ThreatParams,
                           dist: DegreeDistribution, mu_grid, eta: float = 100.0) -> np.ndarray:
    """Link probabilities from all three methods for uniform policies ``mu`` on a grid.

    Returns a structured array with the ``COMPARISON_COLUMNS`` fields.
    ``policy`` only contributes its weight parameters.
    """
    mu_grid = np.asarray(mu_grid, dtype=float)
    out = np.zeros(mu_grid.size, dtype=[(c, float) for c in COMPARISON_COLUMNS])
    wa = policy.weight_a if policy is not None else 0.2
    wb = policy.weight_b if policy is not None else 10.0
    for n, mu in enumerate(mu_grid):
        pol = PatchingPolicy.uniform(mu, dist.k_max, weight_a=wa, weight_b=wb)
        ex = exact_equilibrium(pol, net, threat, dist)
        fo = first_order_theta_mu(mu, net, threat, dist.mean_degree)
        ls = lse_theta_mu(mu, net, threat, dist.mean_degree, eta)
        out[n] = (mu, ex.theta_b_tilde_star, fo[0], ls[0], ex.theta_bi_star, fo[1], ls[1])
    return out


def write_table(path, table: np.ndarray, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.dtype.names)
        for row in table:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
