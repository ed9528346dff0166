"""
Fourier and convolution numerics for the step distribution.

Wavevectors are numpy arrays of shape (d,) or (m, d). Grids follow numpy's FFT layout: the origin sits at index 0 and
the dual wavevectors are 2*pi*fftfreq(M).
"""
import logging
import math
from typing import Literal, Optional

import numpy as np
from pydantic import Field, field_validator
from scipy import optimize

from percolation_lab.common import LabModel, ResultModel, ParameterError, PoleError, DomainError
from percolation_lab.diagnostics import Diagnostic, DiagnosticItem
from percolation_lab.kernel import StepKernel, max_support_budget
from percolation_lab.util import compensated_sum, weighted_least_squares, log_log_slope

logger = logging.getLogger(__name__)

IMAGINARY_TOLERANCE = 1e-10


class TorusGrid(LabModel):
    """The periodized box {-M/2, ..., M/2 - 1}^d and its dual wavevectors (2 pi / M) * {-M/2, ..., M/2 - 1}^d."""
    d: int = Field(ge=1)
    M: int = Field(ge=2)

    @field_validator('M')
    @classmethod
    def validate_even(cls, v):
        if v % 2:
            raise ValueError('M must be even')
        return v

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.M,) * self.d

    @property
    def volume(self) -> int:
        return self.M ** self.d

    def axis_wavevectors(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.M)

    def wavevector_at(self, index) -> np.ndarray:
        axis = self.axis_wavevectors()
        return axis[np.asarray(index)]

    def embed(self, kernel: StepKernel) -> np.ndarray:
        """Places D on the torus, site x at index x mod M."""
        if kernel.d != self.d:
            raise ParameterError(f'grid dimension {self.d} does not match kernel dimension {kernel.d}')
        if self.M < 2 * kernel.R + 2:
            raise ParameterError(f'M={self.M} is below 2R+2={2 * kernel.R + 2}; the kernel would wrap onto itself')
        out = np.zeros(self.shape)
        out[tuple((kernel.sites % self.M).T)] = kernel.masses
        return out


def default_grid(kernel: StepKernel, reach: int = 1) -> TorusGrid:
    """
    Smallest power-of-two torus holding reach steps of the kernel without wrap-around, capped by the support budget.
    """
    needed = max(2 * kernel.R * reach + 2, 2 * kernel.R + 2)
    m = 2
    while m < needed:
        m *= 2
    budget = max_support_budget()
    while m ** kernel.d > budget and m // 2 >= 2 * kernel.R + 2:
        m //= 2
    return TorusGrid(d=kernel.d, M=m)


class SpectralField:
    """
    Values of D^, D^{*n} or a Green's function on a torus grid.

    Attributes:
        grid: the TorusGrid
        values: real array of shape grid.shape in FFT layout
        role: one of 'dhat', 'convolution', 'greens'
        n: the convolution power (1 for D^ and D itself)
        wrap_mass: upper bound on the mass of the unperiodized field lying outside the box
        status: 'ok', or 'wrapped' when wrap_mass exceeds the threshold
        imaginary_residue: largest discarded imaginary part
    """

    def __init__(self, grid: TorusGrid, values: np.ndarray, role: Literal['dhat', 'convolution', 'greens'], n: int = 1,
                 wrap_mass: float = 0.0, status: Literal['ok', 'wrapped'] = 'ok', imaginary_residue: float = 0.0):
        self.grid = grid
        self.values = values
        self.role = role
        self.n = n
        self.wrap_mass = wrap_mass
        self.status = status
        self.imaginary_residue = imaginary_residue

    @property
    def origin(self) -> float:
        return float(self.values[(0,) * self.grid.d])

    @property
    def sup_norm(self) -> float:
        return float(self.values.max())

    @property
    def total(self) -> float:
        return compensated_sum(self.values)

    def at(self, site) -> float:
        return float(self.values[tuple(np.atleast_1d(site) % self.grid.M)])


def fourier_transform(kernel: StepKernel, k) -> float:
    """
    D^(k) = sum_x cos(k.x) D(x); the sine part vanishes by symmetry.
    """
    k = np.asarray(k, dtype=float).reshape(kernel.d)
    return compensated_sum(np.cos(kernel.sites @ k) * kernel.masses)


BLOCK_ELEMENTS = 1 << 22
"""largest number of phases k.x held in memory at once by the many-wavevector transforms"""


def _blocked_sum(kernel: StepKernel, ks, term, chunk: int) -> np.ndarray:
    """sum_x D(x) term(k.x) for each row of ks, over blocks of at most chunk wavevectors and BLOCK_ELEMENTS phases."""
    ks = np.atleast_2d(np.asarray(ks, dtype=float))
    out = np.zeros(ks.shape[0])
    chunk = max(1, min(chunk, ks.shape[0]))
    sites_per_block = max(1, BLOCK_ELEMENTS // chunk)
    for first_site in range(0, kernel.support_size, sites_per_block):
        sites = kernel.sites[first_site:first_site + sites_per_block]
        masses = kernel.masses[first_site:first_site + sites_per_block]
        for start in range(0, ks.shape[0], chunk):
            block = ks[start:start + chunk]
            out[start:start + chunk] += masses @ term(sites @ block.T)
    return out


def fourier_transform_many(kernel: StepKernel, ks, chunk: int = 64) -> np.ndarray:
    return _blocked_sum(kernel, ks, np.cos, chunk)


def one_minus_fourier_many(kernel: StepKernel, ks, chunk: int = 64) -> np.ndarray:
    """1 - D^(k) as sum_x D(x) 2 sin^2(k.x / 2), accurate where D^ is close to 1."""
    return _blocked_sum(kernel, ks, lambda phase: 2.0 * np.sin(0.5 * phase) ** 2, chunk)


def dual_spectrum(kernel: StepKernel, grid: TorusGrid) -> SpectralField:
    """D^ sampled at every dual wavevector of the grid."""
    transformed = np.fft.fftn(grid.embed(kernel))
    residue = float(np.abs(transformed.imag).max())
    if residue > IMAGINARY_TOLERANCE:
        logger.warning('D^ has imaginary parts up to %.3g; the kernel is not symmetric on this grid', residue)
    return SpectralField(grid, transformed.real, 'dhat', imaginary_residue=residue)


def wrap_mass_bound(kernel: StepKernel, n: int, grid: TorusGrid) -> float:
    """
    Bound on the mass of D^{*n} outside the box: the walk leaves it only if some step has |x|_inf >= M / (2n).
    """
    return min(1.0, n * kernel.mass_beyond(grid.M / (2.0 * n)))


def convolution_power(kernel: StepKernel, n: int, grid: TorusGrid, wrap_threshold: float = 1e-12,
                      spectrum: SpectralField | None = None) -> SpectralField:
    """
    D^{*n} by the n-th power of D^ on the dual grid and an inverse transform.
    :param wrap_threshold: above this wrap-mass bound the field is marked 'wrapped'
    :param spectrum: a precomputed dual_spectrum for the same kernel and grid
    """
    if n < 1:
        raise ParameterError(f'convolution power must be positive, got {n}')
    dhat = spectrum.values if spectrum is not None else dual_spectrum(kernel, grid).values
    inverse = np.fft.ifftn(dhat ** n)
    wrap = wrap_mass_bound(kernel, n, grid)
    status = 'wrapped' if wrap > wrap_threshold else 'ok'
    if status == 'wrapped':
        logger.debug('D^{*%s} on M=%s may wrap: mass bound %.3g', n, grid.M, wrap)
    return SpectralField(grid, inverse.real, 'convolution', n=n, wrap_mass=wrap, status=status,
                         imaginary_residue=float(np.abs(inverse.imag).max()))


FLOOR_SHARE_LIMIT = 0.25
"""rows whose torus floor M^-d exceeds this fraction of the sup norm are left out of the variation"""


class HeatKernelRow(ResultModel):
    n: int
    sup_norm: float
    scaled: float
    """sup_norm * n^(d / (alpha ^ 2)) / lambda"""
    wrap_mass: float
    floor_share: float
    """M^-d / sup_norm; near 1 once the walk has spread over the whole torus"""


class HeatKernelReport(ResultModel):
    exponent: float
    """d / (alpha ^ 2)"""
    c_hat: float
    """largest scaled value over the rows below the floor limit"""
    variation: float
    """max / min of the scaled column over n >= window_start, floor-dominated rows excluded"""
    window_start: int
    M: int
    rows: list[HeatKernelRow]
    floor_limit: float = FLOOR_SHARE_LIMIT
    diagnostics: list[Diagnostic] = []


def heat_kernel_bound_report(kernel: StepKernel, n_max: int, grid: TorusGrid | None = None,
                             n_values: list[int] | None = None, window_start: int = 4,
                             wrap_threshold: float = 1e-6) -> HeatKernelReport:
    """
    Tabulates ||D^{*n}||_inf together with the scaled column whose boundedness in n is the claim under test.
    Rows where the torus floor M^-d is a sizeable share of the sup norm measure the torus, not Z^d; they stay in
    the table but not in c_hat or the variation, and a 'floor' diagnostic names them.
    :param n_values: the n to tabulate; all of 1..n_max by default
    """
    grid = grid or default_grid(kernel, reach=n_max)
    wanted = sorted(set(n_values or range(1, n_max + 1)))
    if wanted[0] < 1 or wanted[-1] > n_max:
        raise ParameterError(f'n values must lie in [1, {n_max}]')
    exponent = kernel.d / kernel.stable_index
    floor = 1.0 / grid.volume
    dhat = dual_spectrum(kernel, grid).values
    power = np.ones_like(dhat)
    rows = []
    wanted_set = set(wanted)
    for n in range(1, n_max + 1):
        power *= dhat
        if n not in wanted_set:
            continue
        sup = float(np.fft.ifftn(power).real.max())
        rows.append(HeatKernelRow(n=n, sup_norm=sup, scaled=sup * n ** exponent / kernel.lam,
                                  wrap_mass=wrap_mass_bound(kernel, n, grid), floor_share=floor / sup))
    resolved = [row for row in rows if row.floor_share <= FLOOR_SHARE_LIMIT]
    window = [row.scaled for row in resolved if row.n >= window_start] or [row.scaled for row in resolved]
    report = HeatKernelReport(
        exponent=exponent,
        c_hat=max(window) if window else math.nan,
        variation=max(window) / min(window) if window else math.nan,
        window_start=window_start,
        M=grid.M,
        rows=rows,
    )
    floored = [row for row in rows if row.floor_share > FLOOR_SHARE_LIMIT]
    if floored:
        logger.warning('D^{*n} reaches the torus floor on M=%s from n=%s on; those rows are excluded', grid.M,
                       floored[0].n)
        report.diagnostics.append(Diagnostic(
            title='convolution powers reach the torus floor',
            kind='floor',
            source='heat_kernel_bound_report',
            items=[DiagnosticItem(name='first_floor_n', value=floored[0].n),
                   DiagnosticItem(name='excluded_rows', value=len(floored)),
                   DiagnosticItem(name='largest_floor_share', value=max(row.floor_share for row in floored))],
        ))
    wrapped = [row for row in rows if row.wrap_mass > wrap_threshold]
    if wrapped:
        report.diagnostics.append(Diagnostic(
            title='convolution powers may wrap around the torus',
            kind='wrap',
            source='heat_kernel_bound_report',
            items=[DiagnosticItem(name='first_wrapped_n', value=wrapped[0].n),
                   DiagnosticItem(name='largest_wrap_bound', value=max(row.wrap_mass for row in wrapped))],
        ))
    return report


class SpectralFit(ResultModel):
    """
    Small-|k| behaviour of 1 - D^(k) along the first axis.
    """
    exponent: float
    """exponent of the leading-plus-correction model fit; estimates alpha ^ 2"""
    exponent_stderr: float
    raw_exponent: float
    """plain log-log slope over the window"""
    v_alpha: float
    """leading coefficient with the exponent fixed at alpha ^ 2 (times log(1/|k|) when alpha = 2)"""
    correction_coefficient: float
    stable_index: float
    log_corrected: bool
    window: tuple[float, float]
    power_residual: float
    """rms residual of the pure power law in log space"""
    log_residual: float
    """rms residual of the |k|^2 log(1/|k|) law in log space"""
    k: list[float]
    one_minus_dhat: list[float]

    def leading_term(self, absk):
        absk = np.asarray(absk, dtype=float)
        value = self.v_alpha * absk ** self.stable_index
        if self.log_corrected:
            value = value * np.log(1.0 / absk)
        return value


def spectral_asymptotics(kernel: StepKernel, k_window: tuple[float, float] | None = None, points: int = 24,
                         truncation_factor: float = 10.0) -> SpectralFit:
    """
    Fits 1 - D^(k) for |k| in a window below (ell L)^-1.
    :param k_window: (low, high); one decade starting a decade below (ell L)^-1 by default
    :param truncation_factor: for truncated kernels |k| is kept above truncation_factor / R, where the missing tail
        starts to bend the spectrum into the Gaussian class
    """
    edge = 1.0 / (kernel.spec.ell * kernel.spec.L)
    low, high = k_window or (0.01 * edge, 0.1 * edge)
    if kernel.tail_mass > 0:
        low = max(low, truncation_factor / kernel.R)
    if not 0 < low < high <= edge:
        raise ParameterError(f'spectral window ({low:.3g}, {high:.3g}) is empty or outside (0, {edge:.3g}]; '
                             f'the truncation radius R={kernel.R} is too small for L={kernel.spec.L}')
    absk = np.geomspace(low, high, points)
    direction = np.zeros(kernel.d)
    direction[0] = 1.0
    y = one_minus_fourier_many(kernel, absk[:, None] * direction)
    if np.any(y <= 0):
        raise ParameterError('1 - D^(k) vanishes inside the window')

    index = kernel.stable_index
    correction = kernel.correction_exponent
    log_factor = np.log(1.0 / absk) if kernel.log_corrected else np.ones_like(absk)

    raw_slope, raw_intercept = log_log_slope(absk, y / log_factor)
    power_slope, power_intercept = log_log_slope(absk, y)
    power_residual = float(np.sqrt(np.mean((np.log(y) - power_intercept - power_slope * np.log(absk)) ** 2)))
    log_y = np.log(y / np.log(1.0 / absk))
    log_slope, log_intercept = np.polyfit(np.log(absk), log_y, 1)
    log_residual = float(np.sqrt(np.mean((log_y - log_intercept - log_slope * np.log(absk)) ** 2)))

    design = np.column_stack([absk ** index * log_factor, absk ** correction])
    (v_alpha, b), _, _ = weighted_least_squares(design, y, 1.0 / y ** 2)

    def model(k, v, s, c):
        return v * k ** s * (np.log(1.0 / k) if kernel.log_corrected else 1.0) + c * k ** correction

    try:
        popt, pcov = optimize.curve_fit(model, absk, y, p0=(math.exp(raw_intercept), raw_slope, 0.0), sigma=y,
                                        maxfev=20000)
        exponent, exponent_err = float(popt[1]), float(np.sqrt(max(pcov[1, 1], 0.0)))
    except (RuntimeError, optimize.OptimizeWarning):
        logger.warning('corrected spectral model did not converge; reporting the raw slope')
        exponent, exponent_err = raw_slope, float('nan')
    if not np.isfinite(exponent_err):
        exponent_err = abs(exponent - raw_slope)

    return SpectralFit(
        exponent=exponent,
        exponent_stderr=exponent_err,
        raw_exponent=raw_slope,
        v_alpha=float(v_alpha),
        correction_coefficient=float(b),
        stable_index=index,
        log_corrected=kernel.log_corrected,
        window=(float(low), float(high)),
        power_residual=power_residual,
        log_residual=log_residual,
        k=absk.tolist(),
        one_minus_dhat=y.tolist(),
    )


class ShellDecomposition(ResultModel):
    absk: float
    s1: float
    """|x| < ell L"""
    s2: float
    """ell L <= |x| < pi / (2|k|)"""
    s3: float
    """|x| >= pi / (2|k|)"""
    one_minus_dhat: float
    partition_residual: float
    ratio1: Optional[float] = None
    """s1 / (L|k|)^2"""
    ratio2: Optional[float] = None
    """s2 / (L|k|)^(alpha ^ 2), with the log factor when alpha = 2"""
    ratio3: Optional[float] = None
    """s3 / (L|k|)^alpha"""


def shell_decomposition(kernel: StepKernel, k) -> ShellDecomposition:
    """
    Splits 1 - D^(k) = sum_x D(x)(1 - cos k.x) over the three shells of the small-k estimate.
    """
    k = np.asarray(k, dtype=float).reshape(kernel.d)
    absk = float(np.linalg.norm(k))
    inner = kernel.spec.ell * kernel.spec.L
    if absk > 1.0 / inner:
        raise ParameterError(f'|k|={absk:.3g} is above (ell L)^-1={1.0 / inner:.3g}')
    phase = kernel.sites @ k
    terms = kernel.masses * 2.0 * np.sin(0.5 * phase) ** 2
    outer = math.pi / (2.0 * absk) if absk > 0 else math.inf
    norms = kernel.norms
    s1 = compensated_sum(terms[norms < inner])
    s2 = compensated_sum(terms[(norms >= inner) & (norms < outer)])
    s3 = compensated_sum(terms[norms >= outer])
    one_minus = 1.0 - compensated_sum(np.cos(phase) * kernel.masses)
    result = ShellDecomposition(absk=absk, s1=s1, s2=s2, s3=s3, one_minus_dhat=one_minus,
                                partition_residual=abs(s1 + s2 + s3 - one_minus))
    if absk > 0:
        scaled = kernel.spec.L * absk
        middle = scaled ** kernel.stable_index
        if kernel.log_corrected:
            middle *= math.log(math.pi / (2.0 * scaled))
        result.ratio1 = s1 / scaled ** 2
        result.ratio2 = s2 / middle if middle > 0 else None
        result.ratio3 = s3 / scaled ** kernel.spec.alpha
    return result


class ShellSweep(ResultModel):
    rows: list[ShellDecomposition]
    variation1: float
    variation2: float
    variation3: float
    """max / min of each ratio over the sweep (ratios that vanish identically are skipped and reported as 1)"""


def _variation(values) -> float:
    values = [v for v in values if v is not None and v > 0]
    return max(values) / min(values) if values else 1.0


def shell_sweep(kernel: StepKernel, k_values=None, points: int = 11) -> ShellSweep:
    """Shell ratios along the first axis, over the decade below (ell L)^-1 by default."""
    if k_values is None:
        edge = 1.0 / (kernel.spec.ell * kernel.spec.L)
        k_values = np.geomspace(0.1 * edge, edge, points)
    rows = []
    for absk in np.asarray(k_values, dtype=float):
        k = np.zeros(kernel.d)
        k[0] = absk
        rows.append(shell_decomposition(kernel, k))
    return ShellSweep(
        rows=rows,
        variation1=_variation([row.ratio1 for row in rows]),
        variation2=_variation([row.ratio2 for row in rows]),
        variation3=_variation([row.ratio3 for row in rows]),
    )


def greens_function(kernel: StepKernel, mu: complex, k) -> complex:
    """
    The random-walk Green's function 1 / (1 - mu D^(k)).
    """
    dhat = fourier_transform(kernel, k)
    if abs(mu * dhat) >= 1.0:
        raise PoleError(f'|mu D^(k)| = {abs(mu * dhat):.6g} >= 1 at k={np.asarray(k).tolist()}', k=k, mu=mu)
    return 1.0 / (1.0 - mu * dhat)


def greens_series(kernel: StepKernel, mu: complex, k, terms: int) -> tuple[complex, float]:
    """
    Truncated geometric series sum_{n <= terms} (mu D^(k))^n with the bound on the omitted tail.
    """
    ratio = mu * fourier_transform(kernel, k)
    if abs(ratio) >= 1.0:
        raise PoleError(f'|mu D^(k)| = {abs(ratio):.6g} >= 1', k=k, mu=mu)
    partial = sum(ratio ** n for n in range(terms + 1))
    return complex(partial), abs(ratio) ** (terms + 1) / (1.0 - abs(ratio))


DEFAULT_MU_SET = tuple(
    radius * complex(math.cos(theta), math.sin(theta))
    for radius in (0.5, 0.9, 0.99)
    for theta in (0.0, 0.1, -0.1, 1.0, -1.0)
)


class InfraredScan(ResultModel):
    c_hat: float
    mu_at_max: complex
    k_at_max: list[float]
    M: int
    points: int


def infrared_scan(kernel: StepKernel, mu_set=DEFAULT_MU_SET, grid: TorusGrid | None = None) -> InfraredScan:
    """
    c^ = max |G_mu(k)| ((1 - |mu|) + |arg mu| + 1 - D^(k)) over the rates in mu_set and the dual grid.
    """
    grid = grid or default_grid(kernel)
    dhat = dual_spectrum(kernel, grid).values
    best, best_mu, best_index = -math.inf, 0j, (0,) * grid.d
    for mu in mu_set:
        mu = complex(mu)
        magnitude = np.abs(mu * dhat)
        if magnitude.max() >= 1.0:
            index = np.unravel_index(int(np.argmax(magnitude)), dhat.shape)
            k = grid.wavevector_at(index)
            raise PoleError(f'|mu D^(k)| >= 1 for mu={mu} at k={k.tolist()}', k=k, mu=mu)
        weight = (1.0 - abs(mu)) + abs(math.atan2(mu.imag, mu.real)) + (1.0 - dhat)
        values = weight / np.abs(1.0 - mu * dhat)
        index = np.unravel_index(int(np.argmax(values)), values.shape)
        if values[index] > best:
            best, best_mu, best_index = float(values[index]), mu, index
    return InfraredScan(c_hat=best, mu_at_max=best_mu, k_at_max=grid.wavevector_at(best_index).tolist(), M=grid.M,
                        points=len(mu_set) * grid.volume)


def scaled_wavevector(k, n: int, v_alpha: float, stable_index: float, log_corrected: bool) -> np.ndarray:
    """
    k_n = k (v n)^(-1 / (alpha ^ 2)), or k (v n log sqrt n)^(-1/2) when alpha = 2.
    """
    k = np.asarray(k, dtype=float)
    if n < 1:
        raise DomainError(f'n must be positive, got {n}')
    if log_corrected:
        if n < 2:
            raise DomainError('the alpha = 2 scaling needs n >= 2 (log sqrt n vanishes at n = 1)')
        return k * (v_alpha * n * math.log(math.sqrt(n))) ** -0.5
    return k * (v_alpha * n) ** (-1.0 / stable_index)


class LimitShapeRow(ResultModel):
    n: int
    absk_n: float
    value: float
    """D^(k_n)^n"""
    error: float
    """|value - exp(-|k|^(alpha ^ 2))|"""


class LimitShapeOracle(ResultModel):
    absk: float
    target: float
    rows: list[LimitShapeRow]
    rate: Optional[float] = None
    """slope of log error against log n, when the errors allow a fit"""


def rw_limit_shape_oracle(kernel: StepKernel, k, n_list, fit: SpectralFit) -> LimitShapeOracle:
    """
    The random walk's exact normalized two-point transform D^(k_n)^n against its stable limit.
    """
    k = np.asarray(k, dtype=float).reshape(kernel.d)
    absk = float(np.linalg.norm(k))
    target = math.exp(-absk ** kernel.stable_index)
    rows = []
    for n in n_list:
        k_n = scaled_wavevector(k, int(n), fit.v_alpha, kernel.stable_index, kernel.log_corrected)
        value = fourier_transform(kernel, k_n) ** int(n)
        rows.append(LimitShapeRow(n=int(n), absk_n=float(np.linalg.norm(k_n)), value=value,
                                  error=abs(value - target)))
    oracle = LimitShapeOracle(absk=absk, target=target, rows=rows)
    usable = [row for row in rows if row.error > 0]
    if len(usable) >= 2:
        oracle.rate, _ = log_log_slope([row.n for row in usable], [row.error for row in usable])
    return oracle
