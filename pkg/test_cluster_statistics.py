# test_cluster_statistics.py
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cluster_laws import make_cluster_law, sample_zeta
from exceedance_extractor import ClusterRecord
from path_generator import FINITE_MEAN, PathStream, build_path_finite
from cluster_statistics import (
    InsufficientDataError, EmpiricalPmf, empirical_pmf, tv_distance, sup_distance, chi_square_gof,
    dispersion_index, ks_exponential_gaps, windowed_gap_cdf, ks_marginal, block_counts, theta_from_blocks,
    extremal_index_blocks, maxima_check, shift_invariance_tv, write_pmf_csv,
)

GEOMETRIC = make_cluster_law("geometric:0.5")


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_empirical_pmf():
    records = [ClusterRecord(0, 1, 1.0, "cycle"), ClusterRecord(5, 1, 1.0, "cycle"), ClusterRecord(9, 2, 1.0, "cycle")]
    pmf = empirical_pmf(records)
    assert pmf.total == 3
    assert pmf.probability(1) == pytest.approx(2 / 3)
    assert pmf.probabilities().tolist() == pytest.approx([2 / 3, 1 / 3])
    assert pmf.std_errors()[0] == pytest.approx(math.sqrt(2 / 9 / 3))
    assert empirical_pmf([3, 3]).as_dict() == {3: 1.0}

    with pytest.raises(InsufficientDataError):
        empirical_pmf([])


def test_empirical_pmf_merge_is_associative():
    a, b, c = empirical_pmf([1, 2]), empirical_pmf([2, 2, 5]), empirical_pmf([1])
    left = a.merge(b).merge(c)
    right = a.merge(b.merge(c))
    assert left == right
    assert left.counts == {1: 2, 2: 3, 5: 1}


def test_tv_distance_examples():
    assert tv_distance({1: 0.75, 2: 0.25}, GEOMETRIC) == pytest.approx(0.25)
    # G 作为 pmf 与 G 自身
    as_table = {k: float(p) for k, p in enumerate(GEOMETRIC.table, 1)}
    assert tv_distance(as_table, GEOMETRIC) == pytest.approx(0.0, abs=1e-12)
    delta1 = make_cluster_law("delta:1")
    assert tv_distance(empirical_pmf([1] * 50), delta1) == 0.0


def test_tv_includes_tail_beyond_support():
    # 经验分布只在 {1}，G 的尾部质量全部计入
    assert tv_distance(empirical_pmf([1, 1]), GEOMETRIC) == pytest.approx(0.5)


def test_sup_distance():
    assert sup_distance({1: 0.75, 2: 0.25}, GEOMETRIC) == pytest.approx(0.25)
    assert sup_distance(empirical_pmf([1, 2]), {1: 0.5, 2: 0.5}) == 0.0


pmf_strategy = st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=1, max_size=8).map(
    lambda w: {k: x / sum(w) for k, x in enumerate(w, 1)})


@settings(max_examples=60, deadline=None)
@given(pmf_strategy, pmf_strategy, pmf_strategy)
def test_tv_is_a_metric(p, q, r):
    d = tv_distance(p, q)
    assert 0.0 <= d <= 1.0 + 1e-12
    assert d == pytest.approx(tv_distance(q, p), abs=1e-12)
    assert tv_distance(p, p) == pytest.approx(0.0, abs=1e-12)
    assert d <= tv_distance(p, r) + tv_distance(r, q) + 1e-12
    assert sup_distance(p, q) <= 2 * d + 1e-12


def test_chi_square_matching_law():
    sizes = sample_zeta(GEOMETRIC, _rng(1), 20000)
    result = chi_square_gof(empirical_pmf(sizes.tolist()), GEOMETRIC)
    assert result.cells >= 2
    assert result.dof == result.cells - 1
    assert result.p_value > 0.001


def test_chi_square_detects_mismatch():
    sizes = sample_zeta(make_cluster_law("geometric:0.3"), _rng(2), 20000)
    result = chi_square_gof(empirical_pmf(sizes.tolist()), GEOMETRIC)
    assert result.p_value < 1e-6


def test_chi_square_degenerate():
    with pytest.raises(InsufficientDataError):
        chi_square_gof(empirical_pmf([1] * 100), make_cluster_law("delta:1"))


def test_dispersion_index():
    counts = _rng(3).poisson(5.0, 5000)
    assert 0.9 <= dispersion_index(counts.tolist()) <= 1.1
    # 复合泊松：每个簇大小为 2
    assert dispersion_index((2 * _rng(4).poisson(5.0, 5000)).tolist()) == pytest.approx(2.0, rel=0.1)
    with pytest.raises(InsufficientDataError):
        dispersion_index([1] * 10)
    with pytest.raises(InsufficientDataError):
        dispersion_index([0] * 50)


def test_ks_exponential_gaps():
    rng = _rng(5)
    starts = [np.sort(rng.integers(0, 10 ** 9, 20)) for _ in range(100)]
    stat, p = ks_exponential_gaps(starts, 10 ** 9)
    assert p > 0.001

    regular = [np.arange(0, 1000, 10) for _ in range(5)]
    _, p = ks_exponential_gaps(regular, 1000)
    assert p < 1e-6

    with pytest.raises(InsufficientDataError):
        ks_exponential_gaps([np.arange(10)], 10)


def test_windowed_gap_cdf():
    s = np.linspace(0.0, 1.0, 101)
    cdf = windowed_gap_cdf(s, 5.0)
    assert cdf[0] == 0.0
    assert cdf[-1] == pytest.approx(1.0)
    assert np.all(np.diff(cdf) > 0)
    # 窗口很长时趋于 Exp(rate)
    assert windowed_gap_cdf(0.001, 1e4) == pytest.approx(1.0 - math.exp(-10.0), rel=1e-3)


def test_ks_gaps_with_window_correction():
    # 每个窗口约 5 个泊松点：窗口截断让合并间距偏离指数分布
    rng = _rng(13)
    n = 10 ** 6
    starts = [np.sort(rng.integers(0, n, k)) for k in rng.poisson(5.0, 20000)]
    rate = float(np.mean([len(s) for s in starts]))
    stat_window, p_window = ks_exponential_gaps(starts, n, rate=rate)
    stat_plain, _ = ks_exponential_gaps(starts, n)
    assert p_window > 0.001
    assert stat_window < stat_plain

    with pytest.raises(InsufficientDataError):
        ks_exponential_gaps(starts, n, rate=0.0)


def test_ks_marginal():
    x = _rng(6).exponential(1.0, 20000)
    stat, p = ks_marginal(x, lambda v: 1.0 - np.exp(-v))
    assert stat < 0.02
    with pytest.raises(InsufficientDataError):
        ks_marginal(np.array([]), lambda v: v)


def test_extremal_index_iid():
    x = _rng(7).exponential(1.0, 10 ** 6)
    estimate = extremal_index_blocks(x, math.log(1000), 1000)
    assert abs(estimate.theta - 1.0) < 0.1
    assert estimate.blocks == 1000
    assert estimate.replications == 1


def test_extremal_index_pairs():
    # 每个值重复两次：簇大小恒为 2，θ = 1/2
    x = np.repeat(_rng(8).exponential(1.0, 500000), 2)
    estimate = extremal_index_blocks(x, math.log(1000), 1000)
    assert abs(estimate.theta - 0.5) < 0.06


def test_extremal_index_errors():
    x = _rng(9).exponential(1.0, 10000)
    with pytest.raises(InsufficientDataError):
        extremal_index_blocks(x, 100.0, 100)
    with pytest.raises(InsufficientDataError):
        extremal_index_blocks(x, -1.0, 100)
    with pytest.raises(InsufficientDataError):
        extremal_index_blocks(x, 1.0, 20000)


def test_block_counts_chunk_invariant():
    n = 100000
    path = build_path_finite(GEOMETRIC, n, _rng(10), chunk_cycles=500)
    stream = PathStream(GEOMETRIC, FINITE_MEAN, n, _rng(10), chunk_cycles=500)
    assert block_counts(path, 4.0, 317) == block_counts(stream, 4.0, 317)

    merged = block_counts(path.x[:50000], 4.0, 100).merge(block_counts(path.x[50000:], 4.0, 100))
    assert merged.replications == 2
    assert merged.blocks == 1000
    assert theta_from_blocks(merged, 4.0).replications == 2


def test_maxima_check():
    rng = _rng(11)
    n, R = 1000, 3000
    maxima = rng.exponential(1.0, (R, n)).max(axis=1)
    check = maxima_check(maxima, math.log(n), 1.0, 1.0)
    assert check.replications == R
    assert check.predicted == pytest.approx(math.exp(-1.0))
    assert abs(check.bias) < 0.01 + 4 * check.standard_error
    with pytest.raises(InsufficientDataError):
        maxima_check([], 1.0, 1.0, 1.0)


def test_shift_invariance():
    rng = _rng(12)
    iid = rng.exponential(1.0, (100000, 4))
    assert shift_invariance_tv(iid, 2, 5) < 0.02

    trend = iid * np.array([1.0, 1.0, 3.0, 3.0])
    assert shift_invariance_tv(trend, 2, 5) > 0.3
    with pytest.raises(ValueError):
        shift_invariance_tv(iid, 3, 5)


def test_write_pmf_csv(tmp_path):
    out = write_pmf_csv(empirical_pmf([1, 1, 2, 4]), GEOMETRIC, str(tmp_path / "pmf.csv"))
    lines = open(out, encoding="utf-8").read().splitlines()
    assert lines[0] == "size,empirical,target"
    assert lines[1] == "1,0.5,0.5"
    assert len(lines) == 5


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
