import math

import numpy as np
import pytest

from percolation_lab.analysis import (GrowthSeries, fit_growth, window_sensitivity, growth_series, compute_kn,
                                      random_walk_shape, fit_limit_shape, SweepPoint, SweepSettings, sweep_point,
                                      exponent_fits, sandwich_check)
from percolation_lab.common import FitError, DomainError, ParameterError
from percolation_lab.kernel import KernelSpec, build_kernel
from percolation_lab.percolation import estimate_two_point_transform, write_two_point_csv
from percolation_lab.spectral import spectral_asymptotics


def exact_series(rate, eta, prefactor, last=40):
    n = np.arange(last + 1)
    z = prefactor * rate ** -n.astype(float) * n.astype(float) ** eta
    return GrowthSeries(n=n.tolist(), z=z.tolist(), err=[0.0] * n.size)


def test_growth_fit_recovers_exact_rate():
    fit = fit_growth(exact_series(1.05, 0.0, 1.3))
    assert fit.rate == pytest.approx(1.05, rel=1e-8)
    assert fit.eta == pytest.approx(0.0, abs=1e-8)
    assert fit.prefactor == pytest.approx(1.3, rel=1e-8)
    assert fit.window == (20, 40)
    assert fit.points == 21


def test_growth_fit_recovers_polynomial_correction():
    fit = fit_growth(exact_series(1.02, 0.3, 0.8))
    assert fit.eta == pytest.approx(0.3, abs=0.02)
    assert fit.rate == pytest.approx(1.02, rel=1e-6)


def test_growth_fit_is_idempotent():
    fit = fit_growth(exact_series(1.1, 0.5, 2.0))
    n = np.arange(1, 41)
    refit = fit_growth(GrowthSeries(n=n.tolist(), z=fit.model(n).tolist(), err=[0.0] * n.size))
    assert refit.rate == pytest.approx(fit.rate, rel=1e-10)
    assert refit.eta == pytest.approx(fit.eta, abs=1e-8)


def test_growth_fit_needs_enough_points():
    with pytest.raises(FitError):
        fit_growth(exact_series(1.05, 0.0, 1.0, last=10))


def test_window_sensitivity_of_exact_series():
    sensitivity = window_sensitivity(exact_series(1.05, 0.2, 1.0, last=60))
    assert abs(sensitivity.rate_shift) < 1e-8
    assert abs(sensitivity.eta_shift) < 1e-6


def test_growth_series_from_csv(tmp_path, box_kernel):
    table = estimate_two_point_transform(box_kernel, 0.9, 6, [[0.5]], 40, seed=6)
    path = tmp_path / 'two_point.csv'
    write_two_point_csv(table, str(path))
    from_csv = growth_series(str(path))
    from_table = growth_series(table)
    assert from_csv.n == from_table.n
    assert from_csv.z == pytest.approx(from_table.z, abs=1e-15)


def test_rescaled_wavevectors(box_kernel):
    fit = spectral_asymptotics(box_kernel)
    assert compute_kn(box_kernel, [1.0], 40, fit) / compute_kn(box_kernel, [1.0], 10, fit) == pytest.approx([0.5])
    assert compute_kn(box_kernel, [0.0], 10, fit) == pytest.approx([0.0])
    assert compute_kn(box_kernel, [1.0], 3, fit) == pytest.approx([1.0], rel=1e-3)


def test_rescaled_wavevectors_need_two_steps_at_alpha_two():
    kernel = build_kernel(KernelSpec(d=1, alpha=2.0, L=1, R=2000))
    fit = spectral_asymptotics(kernel)
    assert fit.log_corrected
    with pytest.raises(DomainError):
        compute_kn(kernel, [1.0], 1, fit)
    assert compute_kn(kernel, [1.0], 2, fit)[0] > 0


def test_random_walk_shape(box_kernel):
    shape = random_walk_shape(box_kernel, [0.5, 1.0, 1.5], [16, 64, 256, 1024])
    assert shape.c_hat == pytest.approx(1.0, abs=0.05)
    assert shape.c_by_n[1024] == pytest.approx(1.0, abs=1e-3)
    assert shape.monotone
    assert shape.in_band
    assert shape.n0 == 16
    assert all(row.model_ratio is not None for row in shape.rows)


@pytest.mark.slow
def test_percolation_limit_shape_rows(box_kernel):
    shape = fit_limit_shape(box_kernel, 1.0, [0.5, 1.0], [4, 8], replicas=2000, seed=21)
    for n in (4, 8):
        rows = [row for row in shape.rows if row.n == n]
        assert [row.absk for row in rows] == [0.0, 0.5, 1.0]
        assert rows[0].ratio == 1.0
        for row in rows[1:]:
            assert row.ratio <= 1.0 + 3 * row.err
    assert math.isfinite(shape.c_hat)


def test_sweep_point_far_below_criticality(box_kernel):
    point = sweep_point(box_kernel, 0.3, SweepSettings(n_max=10, replicas=500, seed=5))
    assert point.subcritical
    assert 1.0 < point.chi < 1.6


def test_exponent_fits_on_mean_field_data():
    p_c = 1.2
    sweep = [SweepPoint(p=p, chi=1.0 / (p_c - p), rate=1.0 + (p_c - p)) for p in (0.2, 0.5, 0.8, 0.95, 1.0, 1.1)]
    fit = exponent_fits(sweep, p_c)
    assert fit.gamma == pytest.approx(1.0, abs=1e-9)
    assert fit.tau == pytest.approx(1.0, abs=1e-9)
    assert fit.points == 6
    assert fit.diagnostics == []

    with_uncertainty = exponent_fits(sweep + [SweepPoint(p=1.15, subcritical=False)], p_c, p_c_uncertainty=0.01)
    assert with_uncertainty.gamma_stderr > fit.gamma_stderr
    assert with_uncertainty.diagnostics[0].kind == 'excluded'


def test_exponent_fits_need_range_and_points():
    p_c = 1.2
    narrow = [SweepPoint(p=p, chi=1.0 / (p_c - p)) for p in (1.0, 1.02, 1.04, 1.06, 1.08)]
    with pytest.raises(FitError):
        exponent_fits(narrow, p_c)
    with pytest.raises(FitError):
        exponent_fits(narrow[:4], p_c)


def test_sandwich_check():
    assert sandwich_check(SweepPoint(p=0.5, chi=2.0, rate=2.0)).holds
    assert not sandwich_check(SweepPoint(p=0.5, chi=1.0, rate=2.0)).holds
    with pytest.raises(ParameterError):
        sandwich_check(SweepPoint(p=0.5, subcritical=False))
