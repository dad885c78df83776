# test_exact_oracle.py
import math
import tracemalloc

import numpy as np
import pytest
from scipy import integrate, stats

from cluster_laws import make_cluster_law, censored_law, capped_pmf, sample_y_given_tau
from exact_oracle import (
    NU_UPPER_BOUND, OracleError, LatticePmf, OracleChecker, cycle_lattice, censored_delay_lattice,
    finite_cycle_lattice, finite_delay_lattice, renewal_mass, quad_p_j, marginal_density_x,
    marginal_tail_x, marginal_cdf_x, finite_level_theta, conditional_cluster_law,
    conditional_law_distance, stationarity_identity, write_oracle_csv, y_given_tau_density,
)

TEST_LAWS = {
    "delta:1": "delta:1",
    "delta:3": "delta:3",
    "geometric:0.5": "geometric:0.5",
    "g1=g5=0.5": {1: 0.5, 5: 0.5},
    "zeta:1.5": "zeta:1.5",
}


@pytest.fixture(scope="module", params=list(TEST_LAWS))
def law(request):
    return censored_law(make_cluster_law(TEST_LAWS[request.param]))


def test_closed_form_p_matches_quadrature(law):
    for j in range(1, 51):
        assert abs(law.p(j) - quad_p_j(law.base, j)) < 1e-10


def test_cycle_law_sum_and_nu(law):
    assert abs(float(np.sum(law.p_table)) - 1.0) < 1e-10
    assert law.nu <= NU_UPPER_BOUND


def test_nu_approaches_upper_bound_only_for_heavy_tails():
    nus = [censored_law(make_cluster_law(f"zeta:{s}")).nu for s in (3.0, 2.0, 1.5, 1.1, 1.01)]
    assert nus == sorted(nus)
    assert nus[-1] < NU_UPPER_BOUND
    assert NU_UPPER_BOUND - nus[-1] < 0.2
    assert NU_UPPER_BOUND == pytest.approx(1.5819767068693265)


def test_lattice_convolution():
    a = LatticePmf(np.array([0.5, 0.5]), 0.0)
    b = a.convolve(a, 3)
    # 和为 2, 3, 4 的概率 0.25, 0.5, 0.25；4 被截断进尾部界
    assert b.masses.tolist() == [0.0, 0.25, 0.5]
    assert b.tail_bound == pytest.approx(0.25)
    assert LatticePmf.from_function(lambda k: 0.5 ** k, 10, 0.5 ** 10).total == pytest.approx(1 - 0.5 ** 10)


def test_renewal_mass_bernoulli():
    # 几何周期的更新质量 U(k) = p
    G = make_cluster_law("geometric:0.5")
    U = renewal_mass(finite_cycle_lattice(G, 100), 100)
    assert np.allclose(U, 0.5, atol=1e-12)


@pytest.mark.parametrize("descriptor", ["delta:1", "delta:3", "geometric:0.5"])
def test_delayed_renewal_finite_is_flat(descriptor):
    G = make_cluster_law(descriptor)
    K = 200
    U = renewal_mass(finite_cycle_lattice(G, K), K, finite_delay_lattice(G, K))
    assert np.max(np.abs(U - 1.0 / G.mean)) < 1e-9


def test_delayed_renewal_censored_is_flat(law):
    K = 200
    U = renewal_mass(cycle_lattice(law, K), K, censored_delay_lattice(law, K))
    assert np.max(np.abs(U - 1.0 / law.nu)) < 1e-9


def test_renewal_mass_uncertified_tail():
    short = LatticePmf(np.array([0.5]), 0.5)
    with pytest.raises(OracleError):
        renewal_mass(short, 10)


def test_marginal_density_and_tail(law):
    total = sum(integrate.quad(lambda v: marginal_density_x(law, v), m - 1, m)[0] for m in range(1, 60))
    assert total == pytest.approx(1.0, abs=1e-10)

    u = 2.5
    tail, _ = integrate.quad(lambda v: marginal_density_x(law, v), u, 3.0)
    rest = sum(integrate.quad(lambda v: marginal_density_x(law, v), m - 1, m)[0] for m in range(4, 60))
    assert marginal_tail_x(law, u) == pytest.approx(tail + rest, abs=1e-10)
    assert marginal_cdf_x(law, u) == pytest.approx(1.0 - tail - rest, abs=1e-10)
    assert marginal_tail_x(law, 0.0) == 1.0

    grid = np.linspace(0.0, 20.0, 101)
    assert np.all(np.diff(marginal_cdf_x(law, grid)) >= -1e-15)


def test_finite_level_theta():
    assert finite_level_theta(censored_law(make_cluster_law("delta:1")), 7.0) == pytest.approx(1.0)
    law = censored_law(make_cluster_law("zeta:1.5"))
    thetas = [finite_level_theta(law, u) for u in (5.0, 10.0, 15.0)]
    assert thetas == sorted(thetas, reverse=True)
    assert 0.0 < thetas[-1] < 1.0


def test_conditional_cluster_law():
    law = censored_law(make_cluster_law("zeta:1.5"))
    G = law.base
    u = 10.0
    js = np.arange(1, 71)
    cond = np.asarray(conditional_cluster_law(law, u, js))
    assert float(np.sum(cond)) == pytest.approx(1.0, abs=1e-12)
    # j <= u 时与 g_j 完全相同
    assert np.max(np.abs(cond[:10] - G.pmf(js[:10]))) < 1e-15

    distance = conditional_law_distance(law, u)
    assert distance["bound"] == pytest.approx(G.tail(11))
    assert distance["sup"] <= distance["bound"]
    assert distance["tv"] <= distance["bound"]


def test_stationarity_identity(law):
    lhs, rhs, error = stationarity_identity(law, 7, 3)
    assert lhs.shape == rhs.shape == (300,)
    assert error < 1e-8


def test_oracle_checker_all_rows_pass(law):
    rows = OracleChecker(law.base).run()
    names = {row["check"] for row in rows}
    assert {"p_closed_vs_quad", "p_sum", "nu_series", "nu_upper_bound", "stationarity_identity",
            "delayed_renewal_censored", "conditional_sup_bound", "mixture_density_norm",
            "mixture_vs_capped", "marginalization"} <= names
    failing = [row for row in rows if not row["pass"]]
    assert failing == []
    assert ("delayed_renewal_finite" in names) == law.base.finite_mean


def test_write_oracle_csv(tmp_path):
    rows = OracleChecker(make_cluster_law("delta:1"), levels=(5.0,)).run()
    out = write_oracle_csv(rows, str(tmp_path / "oracle.csv"))
    lines = open(out, encoding="utf-8").read().splitlines()
    assert lines[0] == "check,param,lhs,rhs,abs_error,tolerance,pass"
    assert len(lines) == len(rows) + 1
    assert all(line.endswith(",true") for line in lines[1:])


def test_marginal_cdf_memory_is_bounded():
    # 10^6 个点按 N×60 展开需要约 2.4GB
    law = censored_law(make_cluster_law("zeta:1.5"))
    x = np.random.default_rng(0).exponential(1.0, 10 ** 6)
    tracemalloc.start()
    cdf = marginal_cdf_x(law, x)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert cdf.shape == x.shape
    assert peak < 256 * 1024 * 1024


def test_marginal_tail_matches_direct_series():
    law = censored_law(make_cluster_law("geometric:0.5"))
    u = np.array([0.3, 1.0, 2.5, 2.7, 7.2])
    c = np.ceil(u)
    direct = []
    for ui, ci in zip(u, c):
        ms = np.arange(ci + 1, ci + 61)
        rest = sum(law.base.truncated_mean(int(m)) * math.exp(-(m - ui)) * math.expm1(1.0) for m in ms)
        direct.append(math.exp(-ui) * (law.base.truncated_mean(int(ci)) * -math.expm1(ui - ci) + rest) / law.nu)
    assert np.allclose(marginal_tail_x(law, u), direct, rtol=1e-12, atol=0.0)


def test_y_given_tau_density(law):
    for j in range(1, 8):
        if law.p(j) <= 0:
            continue
        total = (integrate.quad(lambda v: y_given_tau_density(law, j, v), j - 1, j)[0]
                 + integrate.quad(lambda v: y_given_tau_density(law, j, v), j, np.inf)[0])
        assert total == pytest.approx(1.0, abs=1e-10)
        v = np.linspace(j - 1.0, j + 10.0, 221)[1:]
        target = capped_pmf(law.base, j, v) * np.exp(-v)
        assert np.max(np.abs(law.p(j) * y_given_tau_density(law, j, v) - target)) < 1e-12


def test_y_given_tau_density_matches_sampler():
    law = censored_law(make_cluster_law("geometric:0.5"))
    j, N = 3, 50000
    y = sample_y_given_tau(law, j, np.random.default_rng(1), size=N)
    edges = [j - 1.0, j - 0.5, j, j + 1.0, j + 2.0, np.inf]
    observed = np.bincount(np.searchsorted(edges, y, side="left") - 1, minlength=5)
    expected = np.array([integrate.quad(lambda v: y_given_tau_density(law, j, v), a, b)[0]
                         for a, b in zip(edges[:-1], edges[1:])])
    assert expected.sum() == pytest.approx(1.0, abs=1e-10)
    assert stats.chisquare(observed, expected * N / expected.sum()).pvalue > 0.001


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
