import numpy as np
import pytest

from percolation_lab.common import EnumerationCapError
from percolation_lab.enumeration import (BondSystem, exact_enumeration_two_point, verify_expansion_step,
                                         generation_sizes_exact)
from percolation_lab.kernel import KernelSpec, build_kernel
from percolation_lab.percolation import estimate_two_point_transform, estimate_susceptibility

# D uniform on {-1, 0, 1} at p = 0.6: every bond is open with probability 0.2


def test_bond_system_size(box_kernel):
    system = BondSystem(box_kernel, 0.6, 2)
    assert system.bond_count == 12
    assert len(system.vertices) == 9
    assert system.probabilities == pytest.approx([0.2] * 12)


def test_two_point_function_by_enumeration(box_kernel):
    phi = exact_enumeration_two_point(box_kernel, 0.6, 2)
    assert phi.value([0], 0) == pytest.approx(1.0, abs=1e-12)
    for x in (-1, 0, 1):
        assert phi.value([x], 1) == pytest.approx(0.2, abs=1e-12)
    assert phi.value([0], 2) == pytest.approx(1 - 0.96 ** 3, abs=1e-12)
    assert phi.value([1], 2) == pytest.approx(0.0784, abs=1e-12)
    assert phi.value([-1], 2) == pytest.approx(0.0784, abs=1e-12)
    assert phi.value([2], 2) == pytest.approx(0.04, abs=1e-12)
    assert phi.value([3], 2) == 0.0
    assert phi.total(2) == pytest.approx(0.352064, abs=1e-12)


def test_two_point_function_increases_with_p(box_kernel):
    low = exact_enumeration_two_point(box_kernel, 0.4, 2).as_dict()
    high = exact_enumeration_two_point(box_kernel, 0.9, 2).as_dict()
    assert all(high[vertex] >= low[vertex] - 1e-12 for vertex in low)
    assert high[((0,), 2)] > low[((0,), 2)]


def test_expansion_identity(box_kernel):
    check = verify_expansion_step(box_kernel, 0.6, 2)
    assert check.residual <= 1e-12
    assert check.pi0.value([0], 0) == pytest.approx(1.0, abs=1e-12)
    for x in (-1, 0, 1):
        assert check.pi0.value([x], 1) == 0.0
    assert check.pi0.value([0], 2) == pytest.approx(3 * 0.04 ** 2 * 0.96 + 0.04 ** 3, abs=1e-12)
    assert check.pi0.value([1], 2) == pytest.approx(0.0016, abs=1e-12)
    assert check.pi0.value([2], 2) == 0.0
    assert check.phi.value([0], 2) == pytest.approx(0.115264, abs=1e-12)


def test_expansion_identity_on_asymmetric_support(pair_kernel):
    assert verify_expansion_step(pair_kernel, 1.5, 2).residual <= 1e-12


def test_transfer_operator_matches_enumeration(box_kernel):
    phi = exact_enumeration_two_point(box_kernel, 0.6, 2)
    fronts = generation_sizes_exact(box_kernel, 0.6, 2)
    for site, value in fronts.two_point().items():
        assert value == pytest.approx(phi.value(list(site), 2), abs=1e-12)
    assert fronts.mean_size() == pytest.approx(0.352064, abs=1e-12)
    assert sum(fronts.size_distribution().values()) == pytest.approx(1.0, abs=1e-12)


def test_transfer_operator_at_three_steps(box_kernel):
    fronts = generation_sizes_exact(box_kernel, 0.6, 3)
    assert sum(fronts.size_distribution().values()) == pytest.approx(1.0, abs=1e-12)
    assert sum(fronts.two_point().values()) == pytest.approx(fronts.mean_size(), abs=1e-12)
    assert fronts.mean_size() <= 0.6 ** 3


def test_monte_carlo_agrees_with_exact_values(box_kernel):
    exact = [generation_sizes_exact(box_kernel, 0.6, n).mean_size() for n in range(4)]
    table = estimate_two_point_transform(box_kernel, 0.6, 3, [], 20000, seed=2024)
    z, err = table.z0()
    for n in range(1, 4):
        assert abs(z[n] - exact[n]) <= 4 * err[n], f'n={n}: {z[n]} vs {exact[n]}'


def test_enumeration_caps(box_kernel):
    with pytest.raises(EnumerationCapError):
        exact_enumeration_two_point(box_kernel, 0.6, 3)
    with pytest.raises(EnumerationCapError):
        exact_enumeration_two_point(box_kernel, 0.6, 4)
    with pytest.raises(EnumerationCapError):
        exact_enumeration_two_point(box_kernel, 0.6, 2, work_cap=1000)
    wide = build_kernel(KernelSpec(d=1, alpha=2.0, L=2, R=2, profile='uniform_box'))
    with pytest.raises(EnumerationCapError):
        generation_sizes_exact(wide, 0.6, 1)


def test_susceptibility_estimate_agrees_with_exact_values(box_kernel):
    exact = [generation_sizes_exact(box_kernel, 0.6, n).mean_size() for n in range(4)]
    ratio = (exact[2] + exact[3]) / (exact[1] + exact[2])
    chi = sum(exact) + exact[3] * ratio / (1.0 - ratio)
    table = estimate_two_point_transform(box_kernel, 0.6, 3, [], 20000, seed=2024)
    estimate = estimate_susceptibility(table)
    assert estimate.window == (1, 3)
    assert estimate.ratio == pytest.approx(ratio, abs=4 * estimate.ratio_stderr)
    assert abs(estimate.chi - chi) <= 4 * estimate.stderr
