# test_exceedance_extractor.py
import math

import numpy as np
import pytest

from cluster_laws import make_cluster_law, censored_law
from exact_oracle import marginal_tail_x
from path_generator import FINITE_MEAN, CENSORED, RegenerativePath, PathStream, build_path, build_path_finite
from exceedance_extractor import (
    CLUSTER_RATE, TAIL_RATE, FIXED_LEVEL, LevelError, LevelSchedule, ClusterRecord,
    resolve_level, clusters_by_cycle, clusters_by_runs, regular_clusters, count_process,
    cluster_count_process, write_clusters_csv, write_counts_csv,
)

GEOMETRIC = make_cluster_law("geometric:0.5")
ZETA = make_cluster_law("zeta:1.5")


def _hand_path():
    # 周期 [0,2) [2,5) [5,6) [6,10)，n = 9，最后一个周期不完整
    tau = np.array([2, 3, 1, 4])
    y = np.array([5.0, 0.1, 7.0, 8.0])
    return RegenerativePath(FINITE_MEAN, tau, y, np.cumsum(tau), 9)


def test_clusters_by_cycle():
    records = clusters_by_cycle(_hand_path(), 1.0)
    assert [(c.start, c.size, c.cycle_index, c.delayed) for c in records] == [(0, 2, 0, True), (5, 1, 2, False)]
    assert all(c.method == "cycle" and c.level == 1.0 for c in records)

    regular = regular_clusters(records)
    assert [(c.start, c.size) for c in regular] == [(5, 1)]


def test_clusters_by_cycle_no_exceedance():
    assert clusters_by_cycle(_hand_path(), 100.0) == []


def test_clusters_by_runs_hand_example():
    x = np.array([0, 5, 5, 0, 0, 5, 0, 5], dtype=float)
    runs1 = clusters_by_runs(x, 1.0, 1)
    assert [(c.start, c.size) for c in runs1] == [(1, 2), (5, 1), (7, 1)]
    assert runs1[0].method == "runs(1)"

    runs2 = clusters_by_runs(x, 1.0, 2)
    assert [(c.start, c.size) for c in runs2] == [(1, 2), (5, 2)]

    assert clusters_by_runs(x, 10.0, 1) == []
    with pytest.raises(ValueError):
        clusters_by_runs(x, 1.0, 0)


def test_runs_total_size_equals_exceedances():
    path = build_path(GEOMETRIC, FINITE_MEAN, 20000, np.random.default_rng(1))
    records = clusters_by_runs(path, 2.0, 3)
    assert sum(c.size for c in records) == int(np.sum(path.x > 2.0))
    starts = [c.start for c in records]
    assert starts == sorted(starts)


@pytest.mark.parametrize("construction,law", [(FINITE_MEAN, GEOMETRIC), (CENSORED, censored_law(ZETA))])
def test_runs_agree_with_cycle_clusters_at_high_level(construction, law):
    # 高水平下相邻两个周期同时超越的概率约 e^{-u}，游程簇与周期簇几乎一一对应
    n, u = 400000, 6.0
    path = build_path(law, construction, n, np.random.default_rng(5))
    cycle = {(c.start, c.size) for c in regular_clusters(clusters_by_cycle(path, u))}
    runs = {(c.start, c.size) for c in clusters_by_runs(path, u, 1)}
    assert len(cycle) > 200
    assert len(cycle & runs) / len(cycle) > 0.97
    sizes_cycle = sorted(size for _, size in cycle)
    sizes_runs = sorted(size for _, size in runs)
    assert abs(np.mean(sizes_cycle) - np.mean(sizes_runs)) < 0.1 * np.mean(sizes_cycle)


def test_runs_are_chunk_invariant():
    n = 30000
    path = build_path_finite(GEOMETRIC, n, np.random.default_rng(2), chunk_cycles=64)
    stream = PathStream(GEOMETRIC, FINITE_MEAN, n, np.random.default_rng(2), chunk_cycles=64)
    assert clusters_by_runs(stream, 1.5, 2) == clusters_by_runs(path, 1.5, 2)


def test_cycle_clusters_from_stream():
    n = 30000
    law = censored_law(ZETA)
    path = build_path(law, CENSORED, n, np.random.default_rng(3))
    stream = PathStream(law, CENSORED, n, np.random.default_rng(3))
    assert clusters_by_cycle(stream, 3.0) == clusters_by_cycle(path, 3.0)


def test_resolve_level_cluster_rate():
    u = resolve_level(10 ** 6, LevelSchedule(CLUSTER_RATE, 5.0), GEOMETRIC, FINITE_MEAN)
    assert u == pytest.approx(math.log(10 ** 6 / (2.0 * 5.0)))

    law = censored_law(ZETA)
    u = resolve_level(10 ** 6, LevelSchedule(CLUSTER_RATE, 5.0), ZETA, CENSORED)
    assert u == pytest.approx(math.log(10 ** 6 / (law.nu * 5.0)))


def test_resolve_level_tail_rate():
    n = 10 ** 6
    u = resolve_level(n, LevelSchedule(TAIL_RATE, 1.0), GEOMETRIC, FINITE_MEAN)
    assert u == pytest.approx(math.log(n))

    law = censored_law(ZETA)
    u = resolve_level(n, LevelSchedule(TAIL_RATE, 2.0), law, CENSORED)
    assert n * marginal_tail_x(law, u) == pytest.approx(2.0, rel=1e-9)


def test_resolve_level_monotone_in_n():
    schedule = LevelSchedule(TAIL_RATE, 1.0)
    levels = [resolve_level(n, schedule, ZETA, CENSORED) for n in (10 ** 3, 10 ** 4, 10 ** 5, 10 ** 6)]
    assert levels == sorted(levels)


def test_resolve_level_fixed_and_errors():
    assert resolve_level(10, LevelSchedule(FIXED_LEVEL, 10.0), ZETA, CENSORED) == 10.0
    with pytest.raises(LevelError):
        resolve_level(5, LevelSchedule(CLUSTER_RATE, 5.0), GEOMETRIC, FINITE_MEAN)
    with pytest.raises(LevelError):
        resolve_level(10, LevelSchedule(TAIL_RATE, 20.0), GEOMETRIC, FINITE_MEAN)
    with pytest.raises(LevelError):
        resolve_level(10, LevelSchedule(FIXED_LEVEL, -1.0), GEOMETRIC, FINITE_MEAN)
    with pytest.raises(LevelError):
        resolve_level(10, LevelSchedule("bogus", 1.0), GEOMETRIC, FINITE_MEAN)


def test_count_process():
    x = np.zeros(10)
    x[[0, 4, 9]] = 5.0
    process = count_process(x, 1.0, 2)
    assert process.counts.tolist() == [2, 1]
    assert process.total == 3
    assert count_process(x, 1.0, 10).counts.tolist() == [1, 0, 0, 0, 1, 0, 0, 0, 0, 1]


def test_count_process_stream_matches_path():
    n = 20000
    path = build_path_finite(GEOMETRIC, n, np.random.default_rng(4), chunk_cycles=100)
    stream = PathStream(GEOMETRIC, FINITE_MEAN, n, np.random.default_rng(4), chunk_cycles=100)
    a = count_process(path, 2.5, 7)
    b = count_process(stream, 2.5, 7)
    assert a.counts.tolist() == b.counts.tolist()
    assert a.total == int(np.sum(path.x > 2.5))


def test_cluster_count_process():
    records = [ClusterRecord(0, 1, 1.0, "runs(1)"), ClusterRecord(49, 2, 1.0, "runs(1)"),
               ClusterRecord(50, 1, 1.0, "runs(1)")]
    process = cluster_count_process(records, 100, 2, 1.0)
    assert process.counts.tolist() == [2, 1]
    assert cluster_count_process([], 100, 3, 1.0).counts.tolist() == [0, 0, 0]


def test_write_csvs(tmp_path):
    records = clusters_by_cycle(_hand_path(), 1.0)
    out = write_clusters_csv([(0, c) for c in records], str(tmp_path / "clusters.csv"))
    lines = open(out, encoding="utf-8").read().splitlines()
    assert lines[0] == "rep,method,start,size,level"
    assert lines[1] == "0,cycle,0,2,1.0"

    process = count_process(np.array([5.0, 0.0, 5.0]), 1.0, 3)
    out = write_counts_csv([(3, process)], str(tmp_path / "counts.csv"))
    lines = open(out, encoding="utf-8").read().splitlines()
    assert lines == ["rep,window,count", "3,0,1", "3,1,0", "3,2,1"]


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
