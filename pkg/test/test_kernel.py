import csv
import json
import math
import os

import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from percolation_lab.common import KernelTruncationError, KernelResourceError
from percolation_lab.kernel import (KernelSpec, build_kernel, kernel_moment, sample_step, dump_kernel,
                                    power_law_tail_weight)
from percolation_lab.sampling import replica_rng
from percolation_lab.spectral import fourier_transform


def test_masses_sum_to_one():
    kernel = build_kernel(KernelSpec(d=2, alpha=1.5, L=2, R=40, tail_tol=0.05))
    assert abs(math.fsum(kernel.masses.tolist()) - 1.0) < 1e-12
    assert np.all(kernel.masses > 0)


def test_origin_mass_matches_infinite_volume_value():
    kernel = build_kernel(KernelSpec(d=1, alpha=1.0, L=1, R=5000))
    expected = 1.0 / (1.0 + math.pi ** 2 / 3.0)
    assert abs(kernel.origin_mass - expected) <= kernel.tail_mass, \
        f'D(0)={kernel.origin_mass} is further than the tail bound {kernel.tail_mass} from {expected}'


def test_power_law_is_exactly_symmetric():
    kernel = build_kernel(KernelSpec(d=2, alpha=0.8, L=3, R=20, tail_tol=0.9))
    dense = kernel.dense()
    assert np.array_equal(dense, dense[::-1, :])
    assert np.array_equal(dense, dense[:, ::-1])
    assert np.array_equal(dense, dense.T)


def test_uniform_box_profiles(box_kernel, pair_kernel):
    assert box_kernel.support_size == 3
    assert box_kernel.masses == pytest.approx([1 / 3] * 3)
    assert pair_kernel.sites.ravel().tolist() == [-1, 1]
    assert pair_kernel.masses.tolist() == [0.5, 0.5]
    assert pair_kernel.origin_mass == 0.0
    assert box_kernel.stable_index == 2.0
    assert not box_kernel.log_corrected
    assert box_kernel.tail_mass == 0.0


def test_spec_validation():
    with pytest.raises(ValidationError):
        KernelSpec(d=1, alpha=1.0, L=4, R=2)
    with pytest.raises(ValidationError):
        KernelSpec(d=1, alpha=1.0, L=1, R=4, exclude_origin=True)
    with pytest.raises(ValidationError):
        KernelSpec(d=0, alpha=1.0, L=1, R=4)


def test_truncation_error_names_minimal_radius():
    spec = KernelSpec(d=1, alpha=1.5, L=1, R=10, tail_tol=1e-3)
    with pytest.raises(KernelTruncationError) as info:
        build_kernel(spec)
    assert info.value.minimal_R > 10
    assert info.value.tail_mass > 1e-3
    kernel = build_kernel(spec.model_copy(update={'R': info.value.minimal_R}))
    assert kernel.tail_mass <= 1e-3


def test_tail_weight_decreases_with_radius():
    weights = [power_law_tail_weight(2, 1.0, 2, r) for r in (10, 20, 40)]
    assert weights[0] > weights[1] > weights[2]


def test_resource_budget(monkeypatch):
    spec = KernelSpec(d=2, alpha=1.0, L=1, R=50, tail_tol=0.9)
    with pytest.raises(KernelResourceError):
        build_kernel(spec, max_support=100)
    monkeypatch.setenv('PERCOLATION_LAB_MAX_SUPPORT', '1000')
    with pytest.raises(KernelResourceError):
        build_kernel(spec)


def test_moment_convergence_diagnostic():
    kernel = build_kernel(KernelSpec(d=1, alpha=1.5, L=1, R=4096, tail_tol=0.01))
    convergent = kernel_moment(kernel, 1.0)
    assert convergent.status == 'convergent'
    assert convergent.predicted_convergent
    divergent = kernel_moment(kernel, 2.0)
    assert divergent.status == 'divergent'
    assert not divergent.predicted_convergent
    assert divergent.growth_exponent > 0.3


def test_sample_step_frequencies(box_kernel):
    draws = sample_step(box_kernel, replica_rng(7, 0), size=30000)
    assert draws.shape == (30000, 1)
    for site in (-1, 0, 1):
        frequency = float(np.mean(draws[:, 0] == site))
        assert abs(frequency - 1 / 3) < 0.015, f'site {site} drawn with frequency {frequency}'
    assert sample_step(box_kernel, replica_rng(7, 1)).shape == (1,)


def test_power_law_draws_match_masses():
    kernel = build_kernel(KernelSpec(d=1, alpha=1.5, L=4, R=1024, tail_tol=0.01))
    n = 10 ** 6
    draws = sample_step(kernel, replica_rng(3, 0), size=n)[:, 0]
    dense = kernel.dense()
    counts = np.bincount(draws + kernel.R, minlength=dense.size)
    top = np.argsort(dense)[::-1][:100]
    observed = np.append(counts[top], n - counts[top].sum())
    expected = n * np.append(dense[top], 1.0 - dense[top].sum())
    assert stats.chisquare(observed, expected).pvalue > 1e-4

    displacement = np.abs(draws).astype(float)
    exact = float(np.sum(kernel.masses * kernel.norms))
    assert abs(displacement.mean() - exact) < 5 * displacement.std() / math.sqrt(n)
    for k in (0.3, 1.0):
        empirical = float(np.mean(np.cos(k * draws)))
        assert abs(empirical - fourier_transform(kernel, [k])) < 5 / math.sqrt(n)


def test_dump_kernel(tmp_path, box_kernel):
    csv_path, json_path = dump_kernel(box_kernel, str(tmp_path))
    with open(csv_path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ['x1', 'mass']
    assert [int(row[0]) for row in rows[1:]] == [-1, 0, 1]
    assert math.fsum(float(row[1]) for row in rows[1:]) == pytest.approx(1.0, abs=1e-12)
    with open(json_path) as f:
        sidecar = json.load(f)
    assert sidecar['support_size'] == 3
    assert sidecar['lambda'] == 1.0
    assert os.path.basename(json_path) == 'kernel.json'
