"""
Fits of the growth rate, the rescaled limit shape and the mean-field exponents.
"""
import csv
import logging
import math
from typing import Optional

import numpy as np
from pydantic import Field

from percolation_lab.common import LabModel, ResultModel, FitError, CriticalityError, ParameterError
from percolation_lab.diagnostics import Diagnostic, DiagnosticItem
from percolation_lab.kernel import StepKernel
from percolation_lab.percolation import (EstimatorTable, estimate_two_point_transform, estimate_susceptibility,
                                         DEFAULT_SITE_CAP)
from percolation_lab.spectral import SpectralFit, spectral_asymptotics, scaled_wavevector, fourier_transform
from percolation_lab.util import weighted_least_squares

logger = logging.getLogger(__name__)

MIN_GROWTH_POINTS = 8


class GrowthSeries(ResultModel):
    """Z(0; n) with standard errors, for n = 0..N."""
    n: list[int]
    z: list[float]
    err: list[float]


def growth_series(source: EstimatorTable | str) -> GrowthSeries:
    """
    :param source: an EstimatorTable, or the path of a two_point.csv written by the simulate experiment
    """
    if isinstance(source, EstimatorTable):
        z, err = source.z0()
        last = source.valid_until
        return GrowthSeries(n=list(range(last + 1)), z=z[:last + 1].tolist(),
                            err=np.nan_to_num(err[:last + 1]).tolist())
    rows = []
    with open(source, newline='') as f:
        for row in csv.DictReader(f):
            if int(row['k_index']) == 0:
                rows.append((int(row['n']), float(row['mean_re']), float(row['stderr'])))
    rows.sort()
    return GrowthSeries(n=[r[0] for r in rows], z=[r[1] for r in rows], err=[r[2] for r in rows])


class GrowthFit(ResultModel):
    """
    log Z(0; n) = -n log m + eta log n + log C1 over the window.
    """
    rate: float
    """m_p"""
    rate_stderr: float
    eta: float
    eta_stderr: float
    prefactor: float
    """C1"""
    prefactor_stderr: float
    residual_norm: float
    window: tuple[int, int]
    points: int
    expected_residual_decay: Optional[float] = None
    """epsilon, the decay exponent of the relative corrections to the fitted form"""

    def model(self, n):
        n = np.asarray(n, dtype=float)
        return self.prefactor * self.rate ** -n * n ** self.eta


def fit_growth(source: GrowthSeries | EstimatorTable, window: tuple[int, int] | None = None,
               epsilon: float | None = None) -> GrowthFit:
    """
    Weighted regression of log Z(0; n) on (-n, log n, 1).
    :param window: inclusive range of n; the last half of the available n by default
    :raises FitError: with fewer than 8 usable points or a singular design
    """
    series = source if isinstance(source, GrowthSeries) else growth_series(source)
    n = np.asarray(series.n)
    z = np.asarray(series.z)
    err = np.asarray(series.err)
    last = int(n.max())
    first, stop = window or (max(1, last // 2), last)
    usable = (n >= max(first, 1)) & (n <= stop) & (z > 0)
    if usable.sum() < MIN_GROWTH_POINTS:
        raise FitError(f'growth fit needs at least {MIN_GROWTH_POINTS} positive points in ({first}, {stop}), got '
                       f'{int(usable.sum())}')
    n, z, err = n[usable].astype(float), z[usable], err[usable]
    design = np.column_stack([-n, np.log(n), np.ones(n.size)])
    weights = None if np.any(~(err > 0)) else (z / err) ** 2
    try:
        coef, stderr, residual = weighted_least_squares(design, np.log(z), weights)
    except np.linalg.LinAlgError as e:
        raise FitError(f'singular growth design on window ({first}, {stop})') from e
    rate, prefactor = math.exp(coef[0]), math.exp(coef[2])
    return GrowthFit(
        rate=rate,
        rate_stderr=rate * float(stderr[0]),
        eta=float(coef[1]),
        eta_stderr=float(stderr[1]),
        prefactor=prefactor,
        prefactor_stderr=prefactor * float(stderr[2]),
        residual_norm=residual,
        window=(first, stop),
        points=int(n.size),
        expected_residual_decay=epsilon,
    )


class WindowSensitivity(ResultModel):
    half: GrowthFit
    third: GrowthFit
    rate_shift: float
    eta_shift: float


def window_sensitivity(source: GrowthSeries | EstimatorTable) -> WindowSensitivity:
    """Refits on the last third of n and reports how far the parameters move."""
    series = source if isinstance(source, GrowthSeries) else growth_series(source)
    last = max(series.n)
    half = fit_growth(series)
    third = fit_growth(series, window=(max(1, (2 * last) // 3), last))
    return WindowSensitivity(half=half, third=third, rate_shift=third.rate - half.rate, eta_shift=third.eta - half.eta)


def compute_kn(kernel: StepKernel, k, n: int, fit: SpectralFit | None = None) -> np.ndarray:
    """
    The probe k rescaled to time n, with v from the spectral fit.
    :raises DomainError: for n = 1 when alpha = 2
    """
    fit = fit or spectral_asymptotics(kernel)
    return scaled_wavevector(k, n, fit.v_alpha, kernel.stable_index, kernel.log_corrected)


def _probe_vectors(kernel: StepKernel, k_list) -> np.ndarray:
    """Scalars are taken as magnitudes along the first axis."""
    k_list = np.asarray(k_list, dtype=float)
    if k_list.ndim <= 1:
        out = np.zeros((k_list.size, kernel.d))
        out[:, 0] = k_list.ravel()
        return out
    return k_list.reshape(-1, kernel.d)


class ShapeRow(ResultModel):
    n: int
    absk: float
    absk_n: float
    ratio: float
    """Z(k_n; n) / Z(0; n)"""
    err: float
    excluded: bool = False
    """ratio consistent with zero"""
    model_ratio: Optional[float] = None


class ShapeFit(ResultModel):
    rows: list[ShapeRow]
    c_hat: float
    """C in exp(-C |k|^(alpha ^ 2)), fitted over all n"""
    c_stderr: float
    c_by_n: dict[int, float]
    stable_index: float
    monotone: bool
    """ratios non-increasing in |k| at every n, within 3 sigma"""
    band: tuple[float, float]
    in_band: bool
    n0: Optional[int] = None
    """first n from which |C_n - 1| decreases monotonically (exact surrogate only)"""
    diagnostics: list[Diagnostic] = []


def _fit_constant(rows: list[ShapeRow], index: float) -> tuple[float, float]:
    usable = [row for row in rows if not row.excluded and row.absk > 0]
    if not usable:
        raise FitError('no usable probes for the limit-shape fit')
    x = np.array([row.absk ** index for row in usable])
    y = np.array([-math.log(row.ratio) for row in usable])
    sigma = np.array([row.err / row.ratio for row in usable])
    weights = None if np.any(~(sigma > 0)) else 1.0 / sigma ** 2
    coef, stderr, _ = weighted_least_squares(x[:, None], y, weights)
    return float(coef[0]), float(stderr[0])


def _monotone(rows: list[ShapeRow]) -> bool:
    for n in sorted({row.n for row in rows}):
        ordered = sorted((row for row in rows if row.n == n), key=lambda row: row.absk)
        for before, after in zip(ordered, ordered[1:]):
            if after.ratio > before.ratio + 3.0 * math.hypot(before.err, after.err):
                return False
    return True


def _assemble_shape(rows: list[ShapeRow], index: float, band: tuple[float, float]) -> ShapeFit:
    c_hat, c_err = _fit_constant(rows, index)
    c_by_n = {}
    for n in sorted({row.n for row in rows}):
        try:
            c_by_n[n] = _fit_constant([row for row in rows if row.n == n], index)[0]
        except FitError:
            continue
    for row in rows:
        row.model_ratio = math.exp(-c_hat * row.absk ** index)
    fit = ShapeFit(rows=rows, c_hat=c_hat, c_stderr=c_err, c_by_n=c_by_n, stable_index=index,
                   monotone=_monotone([row for row in rows if not row.excluded]), band=band,
                   in_band=band[0] <= c_hat <= band[1])
    excluded = [row for row in rows if row.excluded]
    if excluded:
        fit.diagnostics.append(Diagnostic(
            title='probes at the noise floor were excluded', kind='excluded', source='fit_limit_shape',
            items=[DiagnosticItem(name=f'n={row.n}', value=row.absk) for row in excluded],
        ))
    return fit


def fit_limit_shape(kernel: StepKernel, p: float, k_list, n_list, replicas: int, seed: int,
                    fit: SpectralFit | None = None, band: tuple[float, float] = (0.5, 2.0),
                    site_cap: int = DEFAULT_SITE_CAP, workers: int = 1) -> ShapeFit:
    """
    Simulates Z(k_n; n) / Z(0; n) for every probe and n (one simulation per n, since k_n depends on n) and fits
    the exponential limit shape.
    """
    fit = fit or spectral_asymptotics(kernel)
    probes = _probe_vectors(kernel, k_list)
    index = kernel.stable_index
    rows = []
    for n in n_list:
        scaled = np.array([scaled_wavevector(k, n, fit.v_alpha, index, kernel.log_corrected) for k in probes])
        table = estimate_two_point_transform(kernel, p, n, scaled, replicas, seed, site_cap=site_cap,
                                             workers=workers)
        re, _ = table.mean()
        err, _ = table.stderr()
        z0, z0_err = re[0, n], err[0, n]
        if not z0 > 0:
            logger.warning('no cluster survived to n=%s; skipping it', n)
            continue
        rows.append(ShapeRow(n=n, absk=0.0, absk_n=0.0, ratio=1.0, err=0.0))
        # probes equal to zero are dropped from the table, so walk the nonzero ones in order
        nonzero = [(k, k_n) for k, k_n in zip(probes, scaled) if np.any(k_n)]
        for column, (k, k_n) in enumerate(nonzero, start=1):
            ratio = float(re[column, n] / z0)
            ratio_err = math.hypot(err[column, n], ratio * z0_err) / z0
            if not np.isfinite(ratio_err):
                ratio_err = math.inf
            rows.append(ShapeRow(n=n, absk=float(np.linalg.norm(k)), absk_n=float(np.linalg.norm(k_n)),
                                 ratio=ratio, err=ratio_err, excluded=not ratio - 3.0 * ratio_err > 0))
    return _assemble_shape(rows, index, band)


def random_walk_shape(kernel: StepKernel, k_list, n_list, fit: SpectralFit | None = None,
                      band: tuple[float, float] = (0.5, 2.0)) -> ShapeFit:
    """
    The limit-shape fit on the exact surrogate Z(k; n) = D^(k)^n, with no Monte Carlo noise.
    """
    fit = fit or spectral_asymptotics(kernel)
    probes = _probe_vectors(kernel, k_list)
    index = kernel.stable_index
    rows = []
    for n in n_list:
        for k in probes:
            k_n = scaled_wavevector(k, n, fit.v_alpha, index, kernel.log_corrected)
            rows.append(ShapeRow(n=n, absk=float(np.linalg.norm(k)), absk_n=float(np.linalg.norm(k_n)),
                                 ratio=fourier_transform(kernel, k_n) ** n, err=0.0))
    shape = _assemble_shape(rows, index, band)
    deviations = [(n, abs(c - 1.0)) for n, c in sorted(shape.c_by_n.items())]
    for start in range(len(deviations)):
        tail = [deviation for _, deviation in deviations[start:]]
        if all(a >= b for a, b in zip(tail, tail[1:])):
            shape.n0 = deviations[start][0]
            break
    return shape


class SweepPoint(ResultModel):
    p: float
    chi: Optional[float] = None
    chi_stderr: Optional[float] = None
    rate: Optional[float] = None
    """m_p from the tail ratio"""
    rate_stderr: Optional[float] = None
    subcritical: bool = True
    truncated: int = 0


class SweepSettings(LabModel):
    n_max: int = Field(ge=2)
    replicas: int = Field(gt=0)
    seed: int = Field(ge=0, lt=2 ** 64)
    margin: float = Field(default=0.02, gt=0, lt=1)
    site_cap: int = Field(default=DEFAULT_SITE_CAP, gt=0)
    workers: int = Field(default=1, ge=1)


def sweep_point(kernel: StepKernel, p: float, settings: SweepSettings) -> SweepPoint:
    """chi and m_p at one p; a point whose tail ratio is not below 1 - margin is marked not subcritical."""
    table = estimate_two_point_transform(kernel, p, settings.n_max, [], settings.replicas, settings.seed,
                                         site_cap=settings.site_cap, workers=settings.workers)
    try:
        estimate = estimate_susceptibility(table, margin=settings.margin)
    except CriticalityError as e:
        logger.warning('p=%s is not subcritical: %s', p, e.message)
        return SweepPoint(p=p, subcritical=False, truncated=table.truncated)
    return SweepPoint(p=p, chi=estimate.chi, chi_stderr=estimate.stderr, rate=estimate.rate,
                      rate_stderr=estimate.rate_stderr, truncated=table.truncated)


class ExponentFit(ResultModel):
    gamma: float
    gamma_stderr: float
    tau: Optional[float] = None
    tau_stderr: Optional[float] = None
    p_c: float
    points: int
    diagnostics: list[Diagnostic] = []


def _power_slope(distance, values, errors) -> tuple[float, float]:
    x = np.log(distance)
    y = np.log(values)
    sigma = np.asarray(errors, dtype=float) / values
    weights = None if np.any(~(sigma > 0)) else 1.0 / sigma ** 2
    coef, stderr, _ = weighted_least_squares(np.column_stack([x, np.ones(x.size)]), y, weights)
    return float(coef[0]), float(stderr[0])


def exponent_fits(sweep: list[SweepPoint], p_c: float, p_c_uncertainty: float = 0.0) -> ExponentFit:
    """
    gamma = -d log chi / d log(p_c - p) and tau = d log(m_p - 1) / d log(p_c - p). The uncertainty of p_c enters
    by refitting at p_c +- its standard error.
    :raises FitError: with fewer than 5 subcritical points or a range of (p_c - p) / p_c below a factor 4
    """
    diagnostics = []
    usable = [point for point in sweep if point.subcritical and point.chi is not None and point.p < p_c]
    excluded = [point for point in sweep if point not in usable]
    if excluded:
        logger.warning('excluding %s sweep points that are not subcritical', len(excluded))
        diagnostics.append(Diagnostic(title='sweep points excluded as not subcritical', kind='excluded',
                                      source='exponent_fits',
                                      items=[DiagnosticItem(name='p', values=[point.p for point in excluded])]))
    if len(usable) < 5:
        raise FitError(f'exponent fits need at least 5 subcritical points, got {len(usable)}')
    distance = np.array([p_c - point.p for point in usable])
    if distance.max() / distance.min() < 4.0:
        raise FitError('the sweep must span at least a factor 4 in (p_c - p) / p_c')

    def fit_at(critical):
        gaps = np.array([critical - point.p for point in usable])
        if np.any(gaps <= 0):
            raise ParameterError(f'p_c={critical} is not above every sweep point')
        chi = np.array([point.chi for point in usable])
        chi_err = np.array([point.chi_stderr or 0.0 for point in usable])
        slope, slope_err = _power_slope(gaps, chi, chi_err)
        result = [-slope, slope_err]
        with_rate = [(gap, point) for gap, point in zip(gaps, usable) if point.rate is not None and point.rate > 1]
        if len(with_rate) >= 2:
            tau, tau_err = _power_slope([gap for gap, _ in with_rate], np.array([pt.rate - 1 for _, pt in with_rate]),
                                        [pt.rate_stderr or 0.0 for _, pt in with_rate])
            result += [tau, tau_err]
        else:
            result += [None, None]
        return result

    gamma, gamma_err, tau, tau_err = fit_at(p_c)
    if p_c_uncertainty > 0:
        shifts = [fit_at(p_c + sign * p_c_uncertainty) for sign in (-1, 1)
                  if all(p_c + sign * p_c_uncertainty > point.p for point in usable)]
        if shifts:
            gamma_err = math.hypot(gamma_err, max(abs(s[0] - gamma) for s in shifts))
            if tau is not None and all(s[2] is not None for s in shifts):
                tau_err = math.hypot(tau_err, max(abs(s[2] - tau) for s in shifts))
    return ExponentFit(gamma=gamma, gamma_stderr=gamma_err, tau=tau, tau_stderr=tau_err, p_c=p_c,
                       points=len(usable), diagnostics=diagnostics)


class SandwichCheck(ResultModel):
    p: float
    lower: float
    """m_p / chi"""
    upper: float
    """m_p - 1"""
    sigma: float
    holds: bool


def sandwich_check(point: SweepPoint) -> SandwichCheck:
    """Checks m_p / chi <= m_p - 1 within three propagated standard errors."""
    if point.chi is None or point.rate is None:
        raise ParameterError(f'sweep point at p={point.p} has no subcritical estimate')
    m, chi = point.rate, point.chi
    m_err, chi_err = point.rate_stderr or 0.0, point.chi_stderr or 0.0
    sigma = m_err / chi + m * chi_err / chi ** 2 + m_err
    return SandwichCheck(p=point.p, lower=m / chi, upper=m - 1.0, sigma=sigma,
                         holds=m / chi <= m - 1.0 + 3.0 * sigma)
