import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2dbotnet.dynamics import PatchingPolicy, PopulationState, ThreatParams, steady_state
from d2dbotnet.equilibrium import (
    COMPARISON_COLUMNS,
    ConvergenceError,
    DegenerateThreatError,
    clamped_populations,
    compare_approximations,
    equilibrium_populations,
    eradication_rate,
    exact_equilibrium,
    first_order_theta,
    first_order_theta_mu,
    lse_theta,
    lse_theta_mu,
    max_refresh_rate,
    patching_rate_bound,
    smoothed_equilibrium,
    smoothed_populations,
    soft_max,
    soft_min,
    write_table,
)
from d2dbotnet.network import NetworkParams, poisson_degree_distribution

mpmath.mp.dps = 40
MP_MEAN = mpmath.mpf(300) * mpmath.pi * mpmath.mpf("0.1") ** 2
RHO, GB, GC, P, BETA = (mpmath.mpf(v) for v in ("0.95", "0.001", "0.001", "0.7", "0.002"))


def mp_fixed_point(mu, dist):
    """Independent high-precision root of the link-probability equations."""
    ks = list(range(1, dist.k_max + 1))
    pis = [mpmath.exp(-MP_MEAN) * MP_MEAN**k / mpmath.factorial(k) for k in ks]
    norm = sum(k * p for k, p in zip(ks, pis))

    def pops(tb, ti):
        out = []
        for k, m in zip(ks, mu):
            s1 = RHO * GB * P * (1 - tb)
            s2 = RHO * GC * ti
            bt = m / (m + k * s1)
            bi = k * k * s1 * s2 / ((m + k * s1) * (BETA + m + k * s2))
            out.append((bt, bi))
        return out

    def f(tb, ti):
        ps = pops(tb, ti)
        return [sum(k * p * b for k, p, (b, _) in zip(ks, pis, ps)) / norm - tb,
                sum(k * p * b for k, p, (_, b) in zip(ks, pis, ps)) / norm - ti]

    tb, ti = mpmath.findroot(f, (mpmath.mpf("0.2"), mpmath.mpf("0.5")))
    return tb, ti, pops(tb, ti)


def test_exact_matches_high_precision_root(net, threat, dist):
    mu = [mpmath.mpf("0.001")] * dist.k_max
    tb, ti, ps = mp_fixed_point(mu, dist)
    res = exact_equilibrium(PatchingPolicy.uniform(0.001, dist.k_max), net, threat, dist, tol=1e-13)
    assert res.theta_b_tilde_star == pytest.approx(float(tb), abs=1e-11)
    assert res.theta_bi_star == pytest.approx(float(ti), abs=1e-11)
    assert np.allclose(res.b_tilde_star, [float(b) for b, _ in ps], atol=1e-11)
    assert np.allclose(res.b_i_star, [float(b) for _, b in ps], atol=1e-11)


def test_exact_matches_ode_long_run(net, threat, dist):
    pol = PatchingPolicy.uniform(0.001, dist.k_max)
    ex = exact_equilibrium(pol, net, threat, dist)
    ss = steady_state(PopulationState.seeded(dist.k_max), pol, net, threat, dist)
    assert np.max(np.abs(ex.b_tilde_star - ss.b_tilde)) < 1e-5
    assert np.max(np.abs(ex.b_i_star - ss.b_i)) < 1e-5


def test_residual_within_tolerance(net, threat, dist):
    pol = PatchingPolicy.uniform(0.003, dist.k_max)
    res = exact_equilibrium(pol, net, threat, dist, tol=1e-10)
    assert res.residual < 1e-10
    bt, bi = equilibrium_populations(pol.mu, res.theta_b_tilde_star, res.theta_bi_star, net, threat, dist.degrees)
    w = dist.degrees * dist.pk / np.sum(dist.degrees * dist.pk)
    assert abs(w @ bt - res.theta_b_tilde_star) < 1e-9
    assert abs(w @ bi - res.theta_bi_star) < 1e-9


def test_no_patching_means_full_compromise(net, threat, dist):
    res = exact_equilibrium(PatchingPolicy.uniform(0.0, dist.k_max), net, threat, dist)
    assert np.all(res.b_tilde_star == 0.0)
    assert res.theta_b_tilde_star == 0.0


def test_no_malware(net, dist):
    res = exact_equilibrium(PatchingPolicy.uniform(0.001, dist.k_max), net, ThreatParams(gamma_b=0.0), dist)
    assert np.all(res.b_tilde_star == 1.0)
    assert np.all(res.b_i_star == 0.0)
    assert res.theta_b_tilde_star == 1.0


def test_trivial_fixed_points_are_fixed(net, threat, dist):
    mu = np.full(dist.k_max, 0.002)
    bt, bi = equilibrium_populations(mu, 1.0, 0.3, net, threat, dist.degrees)
    assert np.all(bt == 1.0) and np.all(bi == 0.0)
    bt, bi = equilibrium_populations(mu, 0.4, 0.0, net, threat, dist.degrees)
    assert np.all(bi == 0.0)


def test_non_convergence_reports_residual(net, threat, dist):
    with pytest.raises(ConvergenceError) as err:
        exact_equilibrium(PatchingPolicy.uniform(0.001, dist.k_max), net, threat, dist, max_iter=2)
    assert err.value.residual > 0


def test_populations_in_unit_interval(net, threat, dist):
    rng = np.random.default_rng(5)
    for _ in range(10):
        pol = PatchingPolicy(rng.uniform(0, 0.01, dist.k_max))
        r = exact_equilibrium(pol, net, threat, dist)
        for v in (r.b_tilde_star, r.b_i_star, r.b_i_tilde_star):
            assert np.all(v >= -1e-15) and np.all(v <= 1 + 1e-15)
        assert 0 <= r.theta_b_tilde_star <= 1 and 0 <= r.theta_bi_star <= 1


def test_rate_bounds_against_mpmath(net, threat, dist):
    assert patching_rate_bound(net, threat, dist) == pytest.approx(float(RHO * GB * P * MP_MEAN), rel=1e-13)
    assert max_refresh_rate(net, threat, dist) == pytest.approx(float(P * GC * MP_MEAN), rel=1e-13)
    ref = (RHO * GB * GC * P * MP_MEAN - RHO * GB * BETA) / (GC + RHO * GB)
    assert eradication_rate(net, threat, dist) == pytest.approx(float(ref), rel=1e-12)


def test_rate_bound_edge_cases(net, threat, dist):
    assert patching_rate_bound(net, ThreatParams(gamma_b=0.0), dist) == 0.0
    assert max_refresh_rate(NetworkParams(300, 0.1, p=0.0), threat, dist) == 0.0
    d2 = poisson_degree_distribution(NetworkParams(600, 0.1))
    assert patching_rate_bound(NetworkParams(600, 0.1), threat, d2) == pytest.approx(
        2 * patching_rate_bound(net, threat, dist), rel=1e-14)
    # at the refresh-rate boundary the eradication rate is zero
    beta = net.p * threat.gamma_c * dist.mean_degree
    assert eradication_rate(net, ThreatParams(beta=beta), dist) == pytest.approx(0.0, abs=1e-18)
    assert eradication_rate(net, ThreatParams(beta=2 * beta), dist) == 0.0


def test_eradication_below_bound_and_zeroes_informed_link(net, threat, dist):
    hat = eradication_rate(net, threat, dist)
    assert hat < patching_rate_bound(net, threat, dist)
    assert first_order_theta_mu(hat, net, threat, dist.mean_degree)[1] == pytest.approx(0.0, abs=1e-12)


def test_first_order_examples(net, threat, dist):
    pol = PatchingPolicy.uniform(0.001, dist.k_max)
    tb, ti = first_order_theta(pol, net, threat, dist, 5)
    ref = 1 - (mpmath.mpf("1e-6") + RHO * GB * (BETA + GB)) / (MP_MEAN * RHO * P * GB * GC)
    assert ti == pytest.approx(float(ref), rel=1e-12)
    assert ti == pytest.approx(0.3857, abs=1e-4)
    assert first_order_theta(PatchingPolicy.uniform(0.0, 25), net, threat, dist, 3)[0] == 0.0
    bound = patching_rate_bound(net, threat, dist)
    assert first_order_theta(PatchingPolicy.uniform(bound, 25), net, threat, dist, 3)[0] == 1.0
    with pytest.raises(ValueError):
        first_order_theta(pol, net, threat, dist, 26)


def test_degenerate_threat_raises(net, dist):
    with pytest.raises(DegenerateThreatError):
        first_order_theta(PatchingPolicy.uniform(0.001, 25), net, ThreatParams(gamma_b=0.0), dist, 3)


def test_first_order_monotone(net, threat, dist):
    mu = np.linspace(0, 0.01, 500)
    tb, ti = first_order_theta_mu(mu, net, threat, dist.mean_degree)
    assert np.all(np.diff(tb) >= 0) and np.all(np.diff(ti) <= 0)
    assert np.all(tb[mu >= patching_rate_bound(net, threat, dist)] == 1.0)
    assert np.all(ti[mu >= eradication_rate(net, threat, dist)] == 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.sampled_from([1.0, 10.0, 100.0, 1000.0]))
def test_soft_min_max_bounds(a, b, eta):
    lo, hi = soft_min(a, b, eta), soft_max(a, b, eta)
    slack = 4 * np.spacing(max(abs(a), abs(b), 1.0))
    assert lo <= min(a, b) and min(a, b) - lo <= math.log(2) / eta + slack
    assert hi >= max(a, b) and hi - max(a, b) <= math.log(2) / eta + slack


def test_soft_min_matches_log_sum_exp():
    for a, b, eta in [(0.3, 1.0, 10.0), (1.0, 1.0, 100.0), (2.0, -1.0, 3.0)]:
        ref = -mpmath.log(mpmath.exp(-eta * mpmath.mpf(a)) + mpmath.exp(-eta * mpmath.mpf(b))) / eta
        assert float(soft_min(a, b, eta)) == pytest.approx(float(ref), abs=1e-15)
        ref = mpmath.log(mpmath.exp(eta * mpmath.mpf(a)) + mpmath.exp(eta * mpmath.mpf(b))) / eta
        assert float(soft_max(a, b, eta)) == pytest.approx(float(ref), abs=1e-15)


def test_soft_forms_do_not_overflow():
    assert np.isfinite(soft_min(0.0, 1e6, 1000.0))
    assert np.isfinite(soft_max(-1e6, 1e6, 1000.0))


def test_lse_at_clamp_point_differs_by_ln2_over_eta(net, threat, dist):
    bound = patching_rate_bound(net, threat, dist)
    tb, _ = lse_theta_mu(bound, net, threat, dist.mean_degree, 100.0)
    assert 1.0 - tb == pytest.approx(math.log(2) / 100, rel=1e-12)


def test_lse_converges_to_clamped(net, threat, dist):
    mu = np.linspace(0, 2 * patching_rate_bound(net, threat, dist), 301)
    fo = np.array(first_order_theta_mu(mu, net, threat, dist.mean_degree))
    for eta in (10.0, 100.0, 1000.0, 1e4):
        gap = np.max(np.abs(np.array(lse_theta_mu(mu, net, threat, dist.mean_degree, eta)) - fo))
        assert gap <= math.log(2) / eta + 1e-15


def test_lse_theta_per_degree(net, threat, dist):
    pol = PatchingPolicy(np.linspace(0, 0.006, 25))
    tb, ti = lse_theta(pol, net, threat, dist, 10, eta=100.0)
    ref = lse_theta_mu(pol.mu[9], net, threat, dist.mean_degree, 100.0)
    assert (tb, ti) == (float(ref[0]), float(ref[1]))
    with pytest.raises(ValueError):
        lse_theta(pol, net, threat, dist, 3, eta=0.0)


def test_smoothed_examples(net, threat, dist):
    bound = patching_rate_bound(net, threat, dist)
    pol = PatchingPolicy.uniform(10 * bound, dist.k_max)
    bt, bi = smoothed_equilibrium(pol, net, threat, dist, 7)
    assert bt > 1 - 1e-3
    bt, _ = smoothed_equilibrium(PatchingPolicy.uniform(0.0, 25), net, threat, dist, 7)
    assert bt == 0.0


def test_smoothed_literal_informed_form(net, threat, dist):
    mu, k, eta = 0.0015, 8, 100.0
    tb, ti = lse_theta_mu(mu, net, threat, dist.mean_degree, eta)
    c1 = k * net.rho * threat.gamma_b * net.p * (1 - tb)
    first = k * c1 * net.rho * threat.gamma_c / (mu + c1)
    second = ti / (threat.beta + mu + k * net.rho * threat.gamma_c + ti)
    assert smoothed_populations(mu, k, net, threat, dist.mean_degree, eta)[1] == pytest.approx(first * second, rel=1e-13)


def test_smoothed_increasing_in_mu(net, threat, dist):
    mu = np.linspace(0, patching_rate_bound(net, threat, dist), 400)
    for k in range(1, 26):
        bt, _ = smoothed_populations(mu, k, net, threat, dist.mean_degree, 100.0)
        assert np.all(np.diff(bt) > 0)


def test_smoothed_curves_shape(net, threat, dist):
    bound = patching_rate_bound(net, threat, dist)
    mu = np.linspace(0, 1.2 * bound, 600)
    for k in (5, 15):
        bt, bi = smoothed_populations(mu, k, net, threat, dist.mean_degree, 100.0)
        assert bt[0] == 0.0 and bt[-1] > 0.99
        assert np.all(np.diff(bi) <= 1e-15)
        # informed bots vanish at a smaller rate than full un-compromise
        assert mu[np.argmax(bi < 1e-6)] < mu[np.argmax(bt > 0.99)]


def test_clamped_curvature_closed_form(net, threat, dist):
    """Second derivative of the clamped un-compromised equilibrium against mpmath."""
    bound = patching_rate_bound(net, threat, dist)
    m = dist.mean_degree
    for k in (3, 9, 10, 20):
        for frac in (0.2, 0.5, 0.8):
            def f(mu):
                x = mu / bound
                return mu / (mu + k * net.rho * threat.gamma_b * net.p * (1 - x))
            d2 = mpmath.diff(lambda v: f(v), mpmath.mpf(frac * bound), 2)
            a = 1 - k / m
            b = k * net.rho * threat.gamma_b * net.p
            assert float(d2) == pytest.approx(-2 * a * b / (a * frac * bound + b) ** 3, rel=1e-8)
            assert float(clamped_populations(frac * bound, k, net, threat, m)[0]) == pytest.approx(
                float(f(frac * bound)), rel=1e-13)


def test_compare_table(net, threat, dist, tmp_path):
    grid = np.linspace(0, 0.006, 13)
    table = compare_approximations(None, net, threat, dist, grid, 100.0)
    assert table.dtype.names == COMPARISON_COLUMNS
    assert table["theta_bt_exact"][0] == 0.0 and table["theta_bt_fo"][0] == 0.0
    assert abs(table["theta_bt_lse"][0]) < 1e-40
    assert np.all(np.diff(table["theta_bt_exact"]) >= 0)
    assert np.all(np.diff(table["theta_bt_fo"]) >= 0)
    write_table(tmp_path / "c.csv", table, "# meta")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "# meta" and lines[1] == ",".join(COMPARISON_COLUMNS) and len(lines) == 15
