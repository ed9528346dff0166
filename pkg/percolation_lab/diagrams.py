"""
Bubble, triangle and critical-point correction series of the random walk, each computed twice: as a time-domain
series of torus return probabilities and as a dual-grid integral.

Both methods drop the zero mode of the torus, whose weight M^-d is the torus floor of every D^{*n}(o), and put the
same analytic integral over the k=0 cell in its place. Their difference is the summation error of the series; the
distance to the infinite-volume value is measured against the grid of half the size.
"""
import logging
import math
from typing import Callable, Literal, Optional

import numpy as np
from scipy import integrate, special

from percolation_lab.common import ResultModel, DivergenceError
from percolation_lab.diagnostics import Diagnostic, DiagnosticItem, divergence_diagnostic
from percolation_lab.kernel import StepKernel
from percolation_lab.spectral import TorusGrid, SpectralFit, default_grid, dual_spectrum
from percolation_lab.util import compensated_sum, log_log_slope

logger = logging.getLogger(__name__)

DEGENERACY_GAP = 1e-12
MAX_SERIES_TERMS = 100_000
MIN_SERIES_TERMS = 16
SERIES_RTOL = 1e-9
"""the series stops once the bound on its remainder is below this fraction of the partial sum"""
RESOLVED_RTOL = 1e-3
"""a value whose remainder bound exceeds this fraction of it is reported as unresolved"""

DiagramName = Literal['bubble', 'triangle', 'pc_correction']


class DiagramValue(ResultModel):
    name: DiagramName
    status: Literal['converged', 'divergent', 'degenerate', 'unresolved']
    method_a: Optional[float] = None
    """time-domain series of the zero-mode-free torus returns with a geometric tail, plus the k=0 cell integral"""
    method_b: Optional[float] = None
    """midpoint rule on the dual grid plus the k=0 cell integral"""
    discrepancy: Optional[float] = None
    """|A - B| / |B|"""
    tolerance: Optional[float] = None
    """discretisation + |cell_contribution| + series_bound"""
    discretisation: Optional[float] = None
    """|B(M) - B(M/2)|"""
    series_bound: Optional[float] = None
    """bound on the error of the extrapolated series remainder"""
    terms_used: int = 0
    tail_ratio: Optional[float] = None
    """ratio of the last two series terms, used for the geometric tail"""
    tail_exponent: Optional[float] = None
    """s in the fitted decay n^-s of the torus returns (divergent series)"""
    growth_exponent: Optional[float] = None
    """exponent of the partial sums' growth implied by s; positive when the series diverges"""
    cell_contribution: Optional[float] = None
    diagnostic: Optional[Diagnostic] = None


class DiagramReport(ResultModel):
    M: int
    stable_index: float
    bubble: DiagramValue
    triangle: DiagramValue
    pc_correction: DiagramValue

    def values(self) -> list[DiagramValue]:
        return [self.bubble, self.triangle, self.pc_correction]


def convergence_regime(d: int, stable_index: float) -> dict[str, bool]:
    """The bubble and the correction series need d > alpha ^ 2, the triangle d > 2 (alpha ^ 2)."""
    return {
        'bubble': d > stable_index,
        'triangle': d > 2 * stable_index,
        'pc_correction': d > stable_index,
    }


def origin_returns(dhat: np.ndarray, floor_factor: float, max_terms: int) -> np.ndarray:
    """
    t_n = D^{*n}(o) on the torus for n = 0, 1, ... until t_n drops below floor_factor * M^-d.
    """
    floor = floor_factor / dhat.size
    terms = [1.0]
    power = np.ones_like(dhat)
    for n in range(1, max_terms + 1):
        power *= dhat
        t = float(power.mean())
        terms.append(t)
        if n >= 2 and t < floor:
            break
    return np.asarray(terms)


def _fit_tail(terms: np.ndarray) -> tuple[float, float, int]:
    """
    Fits t_n ~ C n^-s over the last decade of terms; returns (s, C, last n), with s = nan when the positive terms
    do not span a decade of n.
    """
    last = terms.size - 1
    first = max(2, last // 10)
    ns = np.arange(first, last + 1)
    ts = terms[first:last + 1]
    positive = ts > 0
    if positive.sum() < 4 or ns[positive][-1] < 10 * ns[positive][0]:
        return math.nan, 0.0, last
    slope, intercept = log_log_slope(ns[positive], ts[positive])
    return -slope, math.exp(intercept), last


def _zeta_tail(s: float, start: float) -> float:
    """sum_{m >= start} m^-s for s > 1 and integer start >= 1."""
    return float(special.zeta(s, start))


def series_values(terms: np.ndarray) -> dict[str, dict]:
    """
    Partial sums of the three diagrams over the origin returns and their growth exponents; a 'value' with a
    power-law tail beyond the last term is added only when the fitted exponent makes the tail summable.
    """
    s, c, last = _fit_tail(terms)
    bubble = compensated_sum(terms[2:])
    triangle = compensated_sum((np.arange(terms.size) - 1)[2:] * terms[2:])
    even = terms[4::2]
    pc = 0.5 * compensated_sum(even)
    out = {
        'bubble': {'partial': np.cumsum(terms[2:]), 'growth': 1.0 - s},
        'triangle': {'partial': np.cumsum((np.arange(terms.size) - 1)[2:] * terms[2:]), 'growth': 2.0 - s},
        'pc_correction': {'partial': 0.5 * np.cumsum(even), 'growth': 1.0 - s},
    }
    if s > 1:
        out['bubble']['value'] = bubble + c * _zeta_tail(s, last + 1)
        out['pc_correction']['value'] = pc + 0.5 * c * 2.0 ** -s * _zeta_tail(s, last // 2 + 1)
    if s > 2:
        tail = c * (_zeta_tail(s - 1, last + 1) - _zeta_tail(s, last + 1))
        out['triangle']['value'] = triangle + tail
    for entry in out.values():
        entry['s'] = s
    return out


def _geometric_tails(last: float, ratio: float, n: int) -> dict[str, float]:
    """Remainders of the three diagrams when u_{n+j} = last * ratio^j exactly."""
    if ratio == 0.0 or last == 0.0:
        return {'bubble': 0.0, 'triangle': 0.0, 'pc_correction': 0.0}
    geometric = ratio / (1.0 - ratio)
    even = (ratio ** 2 if n % 2 == 0 else ratio) / (1.0 - ratio ** 2)
    return {
        'bubble': last * geometric,
        'triangle': last * ((n - 1) * geometric + ratio / (1.0 - ratio) ** 2),
        'pc_correction': 0.5 * last * even,
    }


class TimeDomainSeries(ResultModel):
    values: dict[str, float]
    """series sums with the geometric tail, cell term not included"""
    bounds: dict[str, float]
    terms_used: int
    tail_ratio: float
    spectral_radius: float
    """largest |D^(k)| over the nonzero dual wavevectors"""


def zero_mode_series(dhat: np.ndarray, max_terms: int = MAX_SERIES_TERMS) -> TimeDomainSeries:
    """
    Sums u_n = D^{*n}(o) - M^-d, the torus returns without the zero mode, into the three diagrams.

    |u_m| <= a_n rho^(m-n) for m > n, with a_n the mean of |D^|^n and rho the largest |D^| off k = 0, bounds the
    remainder after n terms. The remainder itself is estimated as geometric with the ratio of the last two terms,
    clipped to rho, so the reported bound is twice the bound on the remainder.
    """
    modes = dhat.copy()
    modes[(0,) * dhat.ndim] = 0.0
    rho = float(np.abs(modes).max())
    power = modes.copy()
    weights = {'bubble': lambda m: 1.0, 'triangle': lambda m: m - 1.0,
               'pc_correction': lambda m: 0.5 if m % 2 == 0 and m >= 4 else 0.0}
    partial = {name: [] for name in weights}
    u = [0.0, float(power.mean())]
    running = 0.0
    n = 1
    while n < max_terms:
        n += 1
        power *= modes
        u.append(float(power.mean()))
        running += u[n]
        for name, weight in weights.items():
            partial[name].append(weight(n) * u[n])
        if n < MIN_SERIES_TERMS:
            continue
        bounds = _geometric_tails(float(np.abs(power).mean()), rho, n)
        scale = max(abs(running), np.finfo(float).tiny)
        if max(bounds.values()) <= SERIES_RTOL * scale:
            break
    a = float(np.abs(power).mean())
    bounds = _geometric_tails(a, rho, n)
    ratio = u[n] / u[n - 1] if u[n - 1] != 0 else 0.0
    ratio = float(np.clip(ratio, -rho, rho))
    tails = _geometric_tails(u[n], ratio, n)
    values = {name: compensated_sum(terms) + tails[name] for name, terms in partial.items()}
    return TimeDomainSeries(values=values, bounds={name: 2.0 * bound for name, bound in bounds.items()},
                            terms_used=n, tail_ratio=ratio, spectral_radius=rho)


def _local_coefficient(dhat: np.ndarray, grid: TorusGrid, stable_index: float, log_corrected: bool) -> float:
    """v from the smallest nonzero dual wavevector along the first axis."""
    k1 = 2.0 * math.pi / grid.M
    gap = 1.0 - dhat[(1,) + (0,) * (grid.d - 1)]
    scale = k1 ** stable_index * (math.log(1.0 / k1) if log_corrected else 1.0)
    return float(gap / scale)


def _cell_integral(d: int, M: int, integrand: Callable[[float], float]) -> float:
    """
    Integral of a radial integrand over the ball with the volume of one dual cell, normalized by (2 pi)^-d.
    """
    unit_ball = math.pi ** (d / 2.0) / special.gamma(d / 2.0 + 1.0)
    radius = (2.0 * math.pi / M) / unit_ball ** (1.0 / d)
    sphere = 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)
    value, _ = integrate.quad(lambda r: r ** (d - 1) * integrand(r), 0.0, radius, limit=200)
    return float(sphere * value / (2.0 * math.pi) ** d)


INTEGRANDS = {
    'bubble': (lambda x: x ** 2 / (1.0 - x), lambda m: 1.0 / m),
    'triangle': (lambda x: x ** 2 / (1.0 - x) ** 2, lambda m: 1.0 / m ** 2),
    'pc_correction': (lambda x: 0.5 * x ** 4 / (1.0 - x ** 2), lambda m: 0.25 / m),
}


def _grid_sum(name: DiagramName, dhat: np.ndarray, volume: int) -> float:
    on_grid, _ = INTEGRANDS[name]
    with np.errstate(divide='ignore', invalid='ignore'):
        values = on_grid(dhat)
    values[(0,) * dhat.ndim] = 0.0
    return compensated_sum(values) / volume


def _is_degenerate(dhat: np.ndarray) -> bool:
    nonzero = np.abs(dhat).copy()
    nonzero[(0,) * dhat.ndim] = 0.0
    return bool(nonzero.max() >= 1.0 - DEGENERACY_GAP)


def _divergent(name: DiagramName, terms: np.ndarray, series: dict) -> DiagramValue:
    entry = series[name]
    partial = entry['partial']
    step = max(1, partial.size // 50)
    return DiagramValue(name=name, status='divergent', terms_used=terms.size - 1, tail_exponent=entry['s'],
                        growth_exponent=entry['growth'],
                        diagnostic=divergence_diagnostic(name, partial[::step], entry['growth'],
                                                         source='diagram_values'))


def diagram_values(kernel: StepKernel, N_terms: int | None = None, grid: TorusGrid | None = None,
                   fit: SpectralFit | None = None, floor_factor: float = 100.0) -> DiagramReport:
    """
    Computes the bubble sum_{n>=2} D^{*n}(o), the triangle sum_{n>=2} (n-1) D^{*n}(o) and the correction
    (1/2) sum_{n>=2} D^{*2n}(o), each as a time-domain series (method A) and as a dual-grid integral (method B).
    A value is 'converged' only when both methods are finite and the series remainder is resolved; otherwise it is
    'unresolved' and carries a diagnostic.
    :param N_terms: cap on the number of series terms; the series otherwise runs until its remainder bound is
        below SERIES_RTOL of the partial sum
    :param grid: torus for both methods; the smallest power of two holding the kernel by default
    :param fit: spectral fit providing v for the k=0 cell; estimated from the first dual node otherwise
    :param floor_factor: divergent series are followed until D^{*n}(o) < floor_factor * M^-d
    """
    grid = grid or default_grid(kernel)
    dhat = dual_spectrum(kernel, grid).values
    index, log_corrected = kernel.stable_index, kernel.log_corrected
    regime = convergence_regime(kernel.d, index)

    if _is_degenerate(dhat):
        logger.warning('|D^| reaches 1 away from k=0; the diagrams have a second pole')
        diagnostic = Diagnostic(title='|D^(k)| = 1 at a nonzero dual wavevector', kind='degenerate',
                                source='diagram_values',
                                items=[DiagnosticItem(name='max_abs_dhat_off_origin',
                                                      value=float(np.sort(np.abs(dhat).ravel())[-2]))])
        degenerate = {name: DiagramValue(name=name, status='degenerate', diagnostic=diagnostic) for name in regime}
        return DiagramReport(M=grid.M, stable_index=index, **degenerate)

    max_terms = N_terms or MAX_SERIES_TERMS
    results = {}
    if not all(regime.values()):
        terms = origin_returns(dhat, floor_factor, max_terms)
        series = series_values(terms)
        for name, convergent in regime.items():
            if not convergent:
                results[name] = _divergent(name, terms, series)
    if len(results) == len(regime):
        return DiagramReport(M=grid.M, stable_index=index, **results)

    v = fit.v_alpha if fit is not None else _local_coefficient(dhat, grid, index, log_corrected)

    def small_k(r):
        return v * r ** index * (math.log(1.0 / r) if log_corrected else 1.0)

    time_domain = zero_mode_series(dhat, max_terms)
    logger.info('diagram series used %s terms on M=%s, spectral radius %.6f off k=0', time_domain.terms_used,
                grid.M, time_domain.spectral_radius)
    coarse = dhat[(slice(None, None, 2),) * grid.d] if grid.M >= 4 else None

    for name in regime:
        if name in results:
            continue
        _, near_zero = INTEGRANDS[name]
        cell = _cell_integral(grid.d, grid.M, lambda r: near_zero(small_k(r)))
        method_a = time_domain.values[name] + cell
        method_b = _grid_sum(name, dhat, grid.volume) + cell
        discretisation = None
        if coarse is not None:
            coarse_cell = _cell_integral(grid.d, grid.M // 2, lambda r: near_zero(small_k(r)))
            discretisation = abs(method_b - _grid_sum(name, coarse, coarse.size) - coarse_cell)
        bound = time_domain.bounds[name]
        value = DiagramValue(name=name, status='converged', method_a=method_a, method_b=method_b,
                             discretisation=discretisation, series_bound=bound, cell_contribution=cell,
                             terms_used=time_domain.terms_used, tail_ratio=time_domain.tail_ratio)
        finite = math.isfinite(method_a) and math.isfinite(method_b)
        if finite:
            value.tolerance = (discretisation or 0.0) + abs(cell) + bound
            value.discrepancy = abs(method_a - method_b) / abs(method_b) if method_b else None
        if not finite or not bound <= RESOLVED_RTOL * abs(method_a):
            value.status = 'unresolved'
            value.diagnostic = Diagnostic(
                title=f'{name} is not resolved on M={grid.M}', kind='unresolved', source='diagram_values',
                items=[DiagnosticItem(name='method_a', value=method_a),
                       DiagnosticItem(name='method_b', value=method_b),
                       DiagnosticItem(name='series_bound', value=bound),
                       DiagnosticItem(name='terms_used', value=time_domain.terms_used)])
            logger.warning('%s unresolved on M=%s: series bound %.3g after %s terms', name, grid.M, bound,
                           time_domain.terms_used)
        results[name] = value
    return DiagramReport(M=grid.M, stable_index=index, **results)


class RefinementReport(ResultModel):
    coarse: DiagramReport
    fine: DiagramReport
    gap_ratios: dict[str, Optional[float]]
    """discretisation estimate on the 2M grid divided by the one on the M grid"""


def diagram_refinement(kernel: StepKernel, grid: TorusGrid | None = None, N_terms: int | None = None,
                       fit: SpectralFit | None = None) -> RefinementReport:
    """Repeats diagram_values on a grid twice as fine and reports how the discretisation estimate shrinks."""
    grid = grid or default_grid(kernel)
    coarse = diagram_values(kernel, N_terms=N_terms, grid=grid, fit=fit)
    fine = diagram_values(kernel, N_terms=N_terms, grid=TorusGrid(d=grid.d, M=2 * grid.M), fit=fit)
    ratios = {}
    for before, after in zip(coarse.values(), fine.values()):
        if before.status != 'converged' or after.status != 'converged' or not before.discretisation:
            ratios[before.name] = None
            continue
        ratios[before.name] = after.discretisation / before.discretisation
    return RefinementReport(coarse=coarse, fine=fine, gap_ratios=ratios)


class PcPrediction(ResultModel):
    value: float
    """1 + correction"""
    correction: float
    uncertainty: float
    """correction^2, the order of the omitted remainder"""
    method_b_value: float
    diagrams: DiagramReport


def pc_prediction(kernel: StepKernel, report: DiagramReport | None = None, **diagram_kwargs) -> PcPrediction:
    """
    The critical point to first order in the correction series: p_c = 1 + (1/2) sum_{n>=2} D^{*2n}(o) + O(lambda^2).
    :param report: a diagram_values result to reuse
    :raises DivergenceError: below the upper critical dimension, or when the correction is not converged
    """
    index = kernel.stable_index
    if kernel.d <= 2 * index:
        raise DivergenceError(f'the critical-point expansion needs d > 2 (alpha ^ 2); got d={kernel.d}, '
                              f'alpha ^ 2={index}')
    report = report or diagram_values(kernel, **diagram_kwargs)
    correction = report.pc_correction
    if correction.status != 'converged' or not math.isfinite(correction.method_a):
        raise DivergenceError(f'the correction series is {correction.status}')
    return PcPrediction(
        value=1.0 + correction.method_a,
        correction=correction.method_a,
        uncertainty=correction.method_a ** 2,
        method_b_value=1.0 + correction.method_b,
        diagrams=report,
    )
