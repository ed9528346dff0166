import math

import numpy as np
import pytest

from percolation_lab.common import ParameterError, CriticalityError, BracketError
from percolation_lab.kernel import KernelSpec, build_kernel
from percolation_lab.percolation import (ClusterTrace, EstimatorTable, build_bond_sampler, grow_cluster,
                                         estimate_two_point_transform, estimate_susceptibility, slope_statistic,
                                         find_pc, with_origin_probe, write_two_point_csv)
from percolation_lab.sampling import replica_rng
from percolation_lab.spectral import fourier_transform


def synthetic_table(z, replicas=10, p=0.5):
    """A table whose every replica saw exactly z[n] at time n."""
    z = np.asarray(z, dtype=float)
    table = EstimatorTable([[0.0]], z.size - 1, p)
    table.counts[:] = replicas
    table.sum_re[0] = replicas * z
    table.sumsq_re[0] = replicas * z ** 2
    table.replicas = replicas
    return table


def test_sampler_parameter_range(box_kernel):
    with pytest.raises(ParameterError):
        build_bond_sampler(box_kernel, -0.1)
    with pytest.raises(ParameterError):
        build_bond_sampler(box_kernel, 3.5)
    sampler = build_bond_sampler(box_kernel, 0.6)
    assert sampler.occupation_probabilities() == pytest.approx(0.6 * box_kernel.masses, abs=1e-12)
    assert sampler.total_intensity >= 0.6


def test_bond_marginals():
    kernel = build_kernel(KernelSpec(d=1, alpha=1.0, L=2, R=64, tail_tol=0.5))
    sampler = build_bond_sampler(kernel, 0.8)
    trials = 100_000
    parents = (np.arange(trials, dtype=np.int64) * 1000)[:, None]
    children = sampler.children(replica_rng(5, 0), parents)[:, 0]
    offsets = children - np.round(children / 1000).astype(np.int64) * 1000
    counts = np.bincount(offsets + kernel.R, minlength=2 * kernel.R + 1)
    expected = sampler.occupation_probabilities()
    for (site,), q in zip(kernel.sites.tolist(), expected):
        frequency = counts[site + kernel.R] / trials
        assert abs(frequency - q) <= 4.5 * math.sqrt(q * (1 - q) / trials), f'site {site}: {frequency} vs {q}'


def test_no_growth_at_p_zero(box_kernel):
    sampler = build_bond_sampler(box_kernel, 0.0)
    trace = grow_cluster(sampler, 10, replica_rng(0, 0))
    assert trace.died_at == 1
    assert trace.sizes == [1, 0]
    assert not trace.truncated


def test_site_cap_truncates(box_kernel):
    sampler = build_bond_sampler(box_kernel, 2.9)
    trace = grow_cluster(sampler, 50, replica_rng(3, 0), site_cap=5)
    assert trace.truncated
    assert len(trace.fronts) == trace.truncated_at
    assert max(trace.sizes) <= 5


def test_probes_start_at_origin():
    with pytest.raises(ParameterError):
        EstimatorTable([[1.0]], 3, 0.5)
    assert with_origin_probe([[0.5], [0.0], [1.0]], 1) == [[0.0], [0.5], [1.0]]
    assert with_origin_probe([], 2) == [[0.0, 0.0]]


def test_truncated_replica_only_counts_earlier_times():
    table = EstimatorTable([[0.0]], 4, 0.5)
    table.add(ClusterTrace([np.zeros((1, 1), dtype=np.int64), np.array([[1]])], truncated_at=2))
    assert table.counts.tolist() == [1, 1, 0, 0, 0]
    assert table.truncated == 1
    assert table.valid_until == 1
    assert table.first_truncated_at == 2
    table.add(ClusterTrace([np.zeros((1, 1), dtype=np.int64)], truncated_at=1))
    assert table.first_truncated_at == 1
    assert table.counts.tolist() == [2, 1, 0, 0, 0]
    merged = EstimatorTable([[0.0]], 4, 0.5).merge(table)
    assert merged.first_truncated_at == 1
    assert EstimatorTable.from_json(table.to_json()).first_truncated_at == 1
    assert EstimatorTable([[0.0]], 4, 0.5).first_truncated_at is None


def test_first_generation_moments(box_kernel):
    p = 0.6
    table = estimate_two_point_transform(box_kernel, p, 6, [[1.0], [2.5]], 4000, seed=17)
    re, im = table.mean()
    err_re, err_im = table.stderr()
    assert abs(re[0, 1] - p) <= 4 * err_re[0, 1]
    assert abs(re[1, 1] - p * fourier_transform(box_kernel, [1.0])) <= 4 * err_re[1, 1]
    for n in range(7):
        assert re[0, n] <= p ** n + 4 * np.nan_to_num(err_re[0, n]) + 1e-12
        for k in (1, 2):
            assert abs(re[k, n]) <= re[0, n] + 4 * np.nan_to_num(err_re[k, n]) + 1e-12
            assert abs(im[k, n]) <= 5 * np.nan_to_num(err_im[k, n]) + 1e-12
    assert re[0, 0] == 1.0


def test_estimates_are_reproducible(box_kernel):
    first = estimate_two_point_transform(box_kernel, 0.9, 8, [[0.7]], 64, seed=99, block_size=16)
    again = estimate_two_point_transform(box_kernel, 0.9, 8, [[0.7]], 64, seed=99, block_size=16)
    assert np.array_equal(first.sum_re, again.sum_re)
    assert np.array_equal(first.sum_im, again.sum_im)
    assert first.blocks == [0, 1, 2, 3]


def test_estimates_do_not_depend_on_workers(box_kernel):
    serial = estimate_two_point_transform(box_kernel, 0.9, 8, [[0.7]], 64, seed=4, block_size=16)
    parallel = estimate_two_point_transform(box_kernel, 0.9, 8, [[0.7]], 64, seed=4, block_size=16, workers=2)
    assert np.array_equal(serial.sum_re, parallel.sum_re)
    assert np.array_equal(serial.counts, parallel.counts)


def test_block_split_does_not_change_replicas(box_kernel):
    whole = estimate_two_point_transform(box_kernel, 1.2, 10, [[0.3]], 64, seed=8, block_size=64)
    split = estimate_two_point_transform(box_kernel, 1.2, 10, [[0.3]], 64, seed=8, block_size=16)
    assert np.array_equal(whole.counts, split.counts)
    assert np.allclose(whole.sum_re, split.sum_re, rtol=1e-12, atol=1e-12)
    assert np.allclose(whole.sumsq_im, split.sumsq_im, rtol=1e-12, atol=1e-12)


def test_table_json_round_trip(box_kernel):
    table = estimate_two_point_transform(box_kernel, 0.9, 5, [[0.7]], 32, seed=1)
    restored = EstimatorTable.from_json(table.to_json())
    assert np.array_equal(restored.sum_re, table.sum_re)
    assert np.array_equal(restored.counts, table.counts)
    assert restored.p == table.p
    assert restored.blocks == table.blocks


def test_two_point_csv(tmp_path, box_kernel):
    table = estimate_two_point_transform(box_kernel, 0.9, 3, [[0.7]], 16, seed=1)
    path = tmp_path / 'two_point.csv'
    write_two_point_csv(table, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == 'k_index,n,mean_re,mean_im,stderr,replicas'
    assert len(lines) == 1 + 2 * 4


def test_susceptibility_of_geometric_sequence():
    table = synthetic_table(0.5 ** np.arange(11))
    estimate = estimate_susceptibility(table, window=(5, 10))
    assert estimate.ratio == pytest.approx(0.5)
    assert estimate.chi == pytest.approx(2.0, abs=1e-12)
    assert estimate.rate == pytest.approx(2.0)


def test_susceptibility_without_bonds(box_kernel):
    table = estimate_two_point_transform(box_kernel, 0.0, 5, [], 20, seed=0)
    assert estimate_susceptibility(table).chi == 1.0


def test_susceptibility_refuses_critical_tail():
    with pytest.raises(CriticalityError) as info:
        estimate_susceptibility(synthetic_table(np.ones(11)))
    assert info.value.ratio == pytest.approx(1.0)


def test_slope_statistic():
    statistic = slope_statistic(synthetic_table(0.9 ** np.arange(11)))
    assert statistic.source == 'window'
    assert statistic.slope == pytest.approx(math.log(0.9), abs=1e-9)
    assert statistic.window == (5, 10)


def test_slope_statistic_falls_back_to_first_step():
    z = np.zeros(11)
    z[0], z[1] = 1.0, 0.3
    statistic = slope_statistic(synthetic_table(z))
    assert statistic.source == 'one_step'
    assert statistic.slope == pytest.approx(math.log(0.3))


def test_find_pc_rejects_bracket_without_sign_change(box_kernel):
    with pytest.raises(BracketError) as info:
        find_pc(box_kernel, (0.1, 0.2), replicas=50, n_max=8, seed=3)
    assert info.value.slope_high < 0


@pytest.mark.slow
def test_find_pc_bisects_to_a_crossing(box_kernel):
    steps = []
    result = find_pc(box_kernel, (0.5, 2.9), replicas=200, n_max=32, seed=12, max_steps=6, on_step=steps.append)
    assert 0.5 < result.p_c < 2.9
    assert result.bracket[1] - result.bracket[0] <= 2.4 / 2 ** 6 + 1e-12
    assert len(result.trajectory) == 8
    assert len(steps) == 8

    resumed = find_pc(box_kernel, (0.5, 2.9), replicas=200, n_max=32, seed=12, max_steps=6, known_steps=steps,
                      on_step=pytest.fail)
    assert resumed.p_c == result.p_c
