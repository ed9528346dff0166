"""
Monte Carlo growth of oriented-percolation clusters and the estimators built on it.

Bonds ((x, n), (y, n+1)) are occupied independently with probability pD(y - x). Children of a parent are drawn by
Poissonization: a Poisson(Lambda) number of points placed with probabilities mu_y / Lambda, mu_y = -log(1 - pD(y)),
occupy exactly the sites that receive at least one point, which has the independent Bernoulli(pD(y)) law.
"""
import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from typing import Callable, Literal, Optional

import numpy as np
from pydantic import Field

from percolation_lab.common import (LabModel, ResultModel, ParameterError, CriticalityError, BracketError,
                                    FitError)
from percolation_lab.diagnostics import Diagnostic, DiagnosticItem
from percolation_lab.kernel import KernelSpec, StepKernel, build_kernel
from percolation_lab.sampling import AliasTable, replica_rng
from percolation_lab.util import weighted_least_squares

logger = logging.getLogger(__name__)

DEFAULT_SITE_CAP = 1_000_000


class BondFieldSampler:
    """
    Attributes:
        kernel: the step distribution
        p: the percolation parameter
        intensities: mu_y = -log(1 - pD(y)) per support site
        total_intensity: Lambda = sum of the intensities
        table: alias table over mu / Lambda, None when p = 0
    """

    def __init__(self, kernel: StepKernel, p: float):
        self.kernel = kernel
        self.p = p
        self.intensities = -np.log1p(-p * kernel.masses)
        self.total_intensity = float(self.intensities.sum())
        self.table = AliasTable(self.intensities) if self.total_intensity > 0 else None

    def occupation_probabilities(self) -> np.ndarray:
        """1 - exp(-mu_y), which equals pD(y)."""
        return -np.expm1(-self.intensities)

    def children(self, rng: np.random.Generator, parents: np.ndarray) -> np.ndarray:
        """
        Occupied children of every parent, shifted to absolute sites and de-duplicated.
        :param parents: (m, d) integer sites
        :return: (m', d) distinct child sites in lexicographic order
        """
        d = self.kernel.d
        if self.table is None or parents.shape[0] == 0:
            return np.empty((0, d), dtype=np.int64)
        counts = rng.poisson(self.total_intensity, parents.shape[0])
        total = int(counts.sum())
        if total == 0:
            return np.empty((0, d), dtype=np.int64)
        steps = self.kernel.sites[self.table.sample(rng, total)]
        return np.unique(np.repeat(parents, counts, axis=0) + steps, axis=0)


def build_bond_sampler(kernel: StepKernel, p: float) -> BondFieldSampler:
    """
    :raises ParameterError: unless 0 <= p < 1 / ||D||_inf
    """
    limit = 1.0 / kernel.sup_norm
    if not 0.0 <= p < limit:
        raise ParameterError(f'p={p} must lie in [0, 1/||D||_inf) = [0, {limit:.6g})')
    return BondFieldSampler(kernel, p)


class ClusterTrace:
    """
    The fronts C_0 = {o}, C_1, ... of one cluster.

    Attributes:
        fronts: list of (m_t, d) site arrays; the last one is empty when the cluster died
        died_at: the first time with an empty front, or None
        truncated_at: the time whose front exceeded the site cap, or None; fronts stop before it
    """

    def __init__(self, fronts: list[np.ndarray], died_at: Optional[int] = None, truncated_at: Optional[int] = None):
        self.fronts = fronts
        self.died_at = died_at
        self.truncated_at = truncated_at

    @property
    def truncated(self) -> bool:
        return self.truncated_at is not None

    @property
    def sizes(self) -> list[int]:
        return [int(front.shape[0]) for front in self.fronts]


def grow_cluster(sampler: BondFieldSampler, n_max: int, rng: np.random.Generator,
                 site_cap: int = DEFAULT_SITE_CAP) -> ClusterTrace:
    """
    Grows the cluster of (o, 0) until it dies, reaches time n_max, or a front exceeds site_cap sites.
    """
    if site_cap <= 0:
        raise ParameterError('site_cap must be positive')
    front = np.zeros((1, sampler.kernel.d), dtype=np.int64)
    fronts = [front]
    for t in range(1, n_max + 1):
        front = sampler.children(rng, front)
        if front.shape[0] > site_cap:
            return ClusterTrace(fronts, truncated_at=t)
        fronts.append(front)
        if front.shape[0] == 0:
            return ClusterTrace(fronts, died_at=t)
    return ClusterTrace(fronts)


def _earliest(a: Optional[int], b: Optional[int]) -> Optional[int]:
    return b if a is None else a if b is None else min(a, b)


class EstimatorTable:
    """
    Running sums for Z_p(k; n) = E sum_{x in C_n} exp(i k.x).

    Attributes:
        probes: (K, d) wavevectors, probes[0] = 0
        n_max: last time recorded
        counts: (n_max + 1,) replicas contributing at each n
        sum_re, sumsq_re, sum_im, sumsq_im: (K, n_max + 1) sums of the per-replica cosine and sine statistics and
            of their squares
        replicas: replicas attempted
        truncated: replicas stopped by the site cap
        first_truncated_at: earliest time at which a replica was stopped; from this time on the estimates average only
            over replicas that stayed under the cap, so they are biased low
        blocks: indices of the replica blocks accumulated
    """

    def __init__(self, probes, n_max: int, p: float, seed: int = 0):
        probes = np.atleast_2d(np.asarray(probes, dtype=float))
        if probes.shape[0] == 0 or np.any(probes[0] != 0):
            raise ParameterError('the first probe must be k = 0')
        self.probes = probes
        self.n_max = n_max
        self.p = p
        self.seed = seed
        shape = (probes.shape[0], n_max + 1)
        self.counts = np.zeros(n_max + 1, dtype=np.int64)
        self.sum_re = np.zeros(shape)
        self.sumsq_re = np.zeros(shape)
        self.sum_im = np.zeros(shape)
        self.sumsq_im = np.zeros(shape)
        self.replicas = 0
        self.truncated = 0
        self.first_truncated_at: Optional[int] = None
        self.blocks: list[int] = []

    def add(self, trace: ClusterTrace):
        """
        Adds one replica. A truncated replica contributes its exact fronts before the truncation time and is left
        out of that time and every later one.
        """
        self.replicas += 1
        usable = self.n_max + 1 if trace.truncated_at is None else min(trace.truncated_at, self.n_max + 1)
        if trace.truncated:
            self.truncated += 1
            self.first_truncated_at = _earliest(self.first_truncated_at, trace.truncated_at)
        self.counts[:usable] += 1
        for t, front in enumerate(trace.fronts[:usable]):
            if front.shape[0] == 0:
                break
            phase = front @ self.probes.T
            re = np.cos(phase).sum(axis=0)
            im = np.sin(phase).sum(axis=0)
            self.sum_re[:, t] += re
            self.sumsq_re[:, t] += re * re
            self.sum_im[:, t] += im
            self.sumsq_im[:, t] += im * im

    def merge(self, other: 'EstimatorTable') -> 'EstimatorTable':
        """A new table holding both tables' replicas."""
        if (self.n_max != other.n_max or self.p != other.p or self.probes.shape != other.probes.shape
                or np.any(self.probes != other.probes)):
            raise ParameterError('only tables with the same p, n_max and probes can be merged')
        out = EstimatorTable(self.probes, self.n_max, self.p, self.seed)
        out.counts = self.counts + other.counts
        out.sum_re = self.sum_re + other.sum_re
        out.sumsq_re = self.sumsq_re + other.sumsq_re
        out.sum_im = self.sum_im + other.sum_im
        out.sumsq_im = self.sumsq_im + other.sumsq_im
        out.replicas = self.replicas + other.replicas
        out.truncated = self.truncated + other.truncated
        out.first_truncated_at = _earliest(self.first_truncated_at, other.first_truncated_at)
        out.blocks = sorted(self.blocks + other.blocks)
        return out

    @property
    def valid_until(self) -> int:
        """Last n with at least one contributing replica."""
        live = np.flatnonzero(self.counts > 0)
        return int(live[-1]) if live.size else -1

    def _mean_and_error(self, total, squares):
        with np.errstate(divide='ignore', invalid='ignore'):
            counts = self.counts.astype(float)
            mean = total / counts
            variance = (squares / counts - mean ** 2) * counts / (counts - 1)
            stderr = np.sqrt(np.clip(variance, 0.0, None) / counts)
        mean[:, self.counts == 0] = np.nan
        stderr[:, self.counts < 2] = np.nan
        return mean, stderr

    def mean(self) -> tuple[np.ndarray, np.ndarray]:
        """(real part, imaginary part) of the estimate, NaN where no replica contributes."""
        re, _ = self._mean_and_error(self.sum_re, self.sumsq_re)
        im, _ = self._mean_and_error(self.sum_im, self.sumsq_im)
        return re, im

    def stderr(self) -> tuple[np.ndarray, np.ndarray]:
        _, re = self._mean_and_error(self.sum_re, self.sumsq_re)
        _, im = self._mean_and_error(self.sum_im, self.sumsq_im)
        return re, im

    def z0(self) -> tuple[np.ndarray, np.ndarray]:
        """Z(0; n) and its standard error."""
        return self.mean()[0][0], self.stderr()[0][0]

    def to_record(self) -> 'EstimatorTableRecord':
        return EstimatorTableRecord(
            probes=self.probes.tolist(), n_max=self.n_max, p=self.p, seed=self.seed, counts=self.counts.tolist(),
            sum_re=self.sum_re.tolist(), sumsq_re=self.sumsq_re.tolist(), sum_im=self.sum_im.tolist(),
            sumsq_im=self.sumsq_im.tolist(), replicas=self.replicas, truncated=self.truncated, blocks=self.blocks,
            first_truncated_at=self.first_truncated_at,
        )

    @classmethod
    def from_record(cls, record: 'EstimatorTableRecord') -> 'EstimatorTable':
        table = cls(record.probes, record.n_max, record.p, record.seed)
        table.counts = np.asarray(record.counts, dtype=np.int64)
        table.sum_re = np.asarray(record.sum_re, dtype=float)
        table.sumsq_re = np.asarray(record.sumsq_re, dtype=float)
        table.sum_im = np.asarray(record.sum_im, dtype=float)
        table.sumsq_im = np.asarray(record.sumsq_im, dtype=float)
        table.replicas = record.replicas
        table.truncated = record.truncated
        table.first_truncated_at = record.first_truncated_at
        table.blocks = list(record.blocks)
        return table

    def to_json(self) -> str:
        return self.to_record().model_dump_json()

    @classmethod
    def from_json(cls, text: str) -> 'EstimatorTable':
        return cls.from_record(EstimatorTableRecord.model_validate_json(text))


class EstimatorTableRecord(ResultModel):
    """JSON form of an EstimatorTable."""
    probes: list[list[float]]
    n_max: int
    p: float
    seed: int
    counts: list[int]
    sum_re: list[list[float]]
    sumsq_re: list[list[float]]
    sum_im: list[list[float]]
    sumsq_im: list[list[float]]
    replicas: int
    truncated: int
    blocks: list[int]
    first_truncated_at: Optional[int] = None


class SimulationSettings(LabModel):
    """What a worker needs to run a block of replicas."""
    kernel: KernelSpec
    p: float = Field(ge=0)
    n_max: int = Field(ge=1)
    probes: list[list[float]]
    seed: int = Field(ge=0, lt=2 ** 64)
    site_cap: int = Field(default=DEFAULT_SITE_CAP, gt=0)
    block_size: int = Field(default=256, gt=0)


@lru_cache(maxsize=4)
def _cached_sampler(spec: KernelSpec, p: float) -> BondFieldSampler:
    return build_bond_sampler(build_kernel(spec), p)


def simulate_block(settings: SimulationSettings, block: int, replicas: int) -> EstimatorTable:
    """
    Runs replicas block * block_size, ..., block * block_size + replicas - 1, each on its own stream.
    """
    sampler = _cached_sampler(settings.kernel, settings.p)
    table = EstimatorTable(settings.probes, settings.n_max, settings.p, settings.seed)
    first = block * settings.block_size
    for replica in range(first, first + replicas):
        trace = grow_cluster(sampler, settings.n_max, replica_rng(settings.seed, replica), settings.site_cap)
        table.add(trace)
    table.blocks = [block]
    return table


def with_origin_probe(probes, d: int) -> list[list[float]]:
    """Puts k = 0 first, adding it when absent."""
    rows = np.asarray(probes, dtype=float).reshape(-1, d)
    return [[0.0] * d] + [k.tolist() for k in rows if np.any(k)]


def estimate_two_point_transform(kernel: StepKernel, p: float, n_max: int, probes, replicas: int, seed: int,
                                 site_cap: int = DEFAULT_SITE_CAP, block_size: int = 256, workers: int = 1,
                                 completed: dict[int, EstimatorTable] | None = None,
                                 on_block: Callable[[int, EstimatorTable], None] | None = None) -> EstimatorTable:
    """
    Estimates Z_p(k; n) for every probe and n <= n_max from independent replicas.
    :param probes: wavevectors; k = 0 is always estimated as the first probe
    :param workers: process count; the result does not depend on it
    :param completed: blocks already computed (for resuming), keyed by block index
    :param on_block: called with each newly finished block, in block order
    """
    build_bond_sampler(kernel, p)
    settings = SimulationSettings(kernel=kernel.spec, p=p, n_max=n_max, probes=with_origin_probe(probes, kernel.d),
                                  seed=seed, site_cap=site_cap, block_size=block_size)
    sizes = [min(block_size, replicas - start) for start in range(0, replicas, block_size)]
    completed = dict(completed or {})
    pending = [block for block in range(len(sizes)) if block not in completed]
    logger.info('simulating %s replicas at p=%s in %s blocks (%s already done)', replicas, p, len(sizes),
                len(sizes) - len(pending))

    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {block: pool.submit(simulate_block, settings, block, sizes[block]) for block in pending}
            for block in pending:
                completed[block] = futures[block].result()
                if on_block:
                    on_block(block, completed[block])
    else:
        for block in pending:
            completed[block] = simulate_block(settings, block, sizes[block])
            if on_block:
                on_block(block, completed[block])

    table = EstimatorTable(settings.probes, n_max, p, seed)
    for block in range(len(sizes)):
        table = table.merge(completed[block])
    if table.truncated:
        logger.warning('%s of %s replicas hit the site cap of %s', table.truncated, table.replicas, site_cap)
    return table


def write_two_point_csv(table: EstimatorTable, path: str):
    """Columns k_index,n,mean_re,mean_im,stderr,replicas; rows without replicas are omitted."""
    re, im = table.mean()
    err, _ = table.stderr()
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['k_index', 'n', 'mean_re', 'mean_im', 'stderr', 'replicas'])
        for k in range(table.probes.shape[0]):
            for n in range(table.n_max + 1):
                if table.counts[n] == 0:
                    continue
                writer.writerow([k, n, repr(float(re[k, n])), repr(float(im[k, n])),
                                 repr(float(np.nan_to_num(err[k, n]))), int(table.counts[n])])


class SusceptibilityEstimate(ResultModel):
    chi: float
    stderr: float
    ratio: Optional[float] = None
    """fitted tail ratio Z(0; n+1) / Z(0; n) over the window"""
    ratio_stderr: Optional[float] = None
    tail: float = 0.0
    """extrapolated contribution beyond the last time"""
    last_n: int
    window: Optional[tuple[int, int]] = None

    @property
    def rate(self) -> Optional[float]:
        """m_p estimated as the inverse tail ratio."""
        return 1.0 / self.ratio if self.ratio else None

    @property
    def rate_stderr(self) -> Optional[float]:
        return self.ratio_stderr / self.ratio ** 2 if self.ratio else None


def estimate_susceptibility(table: EstimatorTable, window: tuple[int, int] | None = None,
                            margin: float = 0.02) -> SusceptibilityEstimate:
    """
    chi = sum_{n <= N} Z(0; n) + Z(0; N) r / (1 - r), r fitted as a ratio of window sums.
    :param window: (first, last) times whose ratios enter r; the last half of the valid times by default
    :param margin: r >= 1 - margin is treated as critical
    :raises CriticalityError: when the tail ratio is not safely below 1
    """
    z, err = table.z0()
    err = np.nan_to_num(err)
    last = table.valid_until
    if table.p == 0 or last < 1:
        return SusceptibilityEstimate(chi=1.0, stderr=0.0, last_n=max(last, 0))
    head = float(np.sum(z[:last + 1]))
    head_err = float(np.sum(err[:last + 1]))
    if z[last] == 0:
        return SusceptibilityEstimate(chi=head, stderr=head_err, last_n=last)
    first, stop = window or (max(1, last // 2), last)
    first, stop = max(first, 0), min(stop, last)
    if stop - first < 1:
        raise ParameterError(f'tail window ({first}, {stop}) needs at least two times')
    numerator, denominator = float(np.sum(z[first + 1:stop + 1])), float(np.sum(z[first:stop]))
    ratio = numerator / denominator
    ratio_err = ratio * (float(np.sum(err[first + 1:stop + 1])) / numerator
                         + float(np.sum(err[first:stop])) / denominator) if numerator > 0 else 0.0
    if ratio >= 1.0 - margin:
        raise CriticalityError(f'tail ratio {ratio:.4f} is at or above 1 - margin = {1 - margin}; p looks critical '
                               f'or supercritical', ratio=ratio)
    tail = z[last] * ratio / (1.0 - ratio)
    tail_err = err[last] * ratio / (1.0 - ratio) + z[last] * ratio_err / (1.0 - ratio) ** 2
    return SusceptibilityEstimate(chi=head + float(tail), stderr=head_err + float(tail_err), ratio=ratio,
                                  ratio_stderr=ratio_err, tail=float(tail), last_n=last, window=(first, stop))


class SlopeStatistic(ResultModel):
    slope: float
    stderr: float
    window: tuple[int, int]
    source: Literal['window', 'one_step']
    """one_step when no cluster survived into the window and log Z(0; 1) stands in"""


def slope_statistic(table: EstimatorTable, window: tuple[int, int] | None = None) -> SlopeStatistic:
    """
    Inverse-variance weighted slope of log Z(0; n) against n over the window, the last half of n by default.
    """
    z, err = table.z0()
    first, stop = window or (table.n_max // 2, table.n_max)
    ns = np.arange(first, stop + 1)
    ns = ns[(ns <= table.valid_until)]
    ns = ns[z[ns] > 0]
    if ns.size >= 2:
        sigma = err[ns] / z[ns]
        weights = None if np.any(~(sigma > 0)) else 1.0 / sigma ** 2
        try:
            coef, stderr, _ = weighted_least_squares(np.column_stack([ns, np.ones(ns.size)]), np.log(z[ns]), weights)
        except np.linalg.LinAlgError as e:
            raise FitError(f'slope fit failed on window ({first}, {stop})') from e
        return SlopeStatistic(slope=float(coef[0]), stderr=float(stderr[0]), window=(first, stop), source='window')
    if z[1] > 0:
        return SlopeStatistic(slope=float(math.log(z[1])), stderr=float(np.nan_to_num(err[1]) / z[1]),
                              window=(first, stop), source='one_step')
    return SlopeStatistic(slope=-math.log(table.replicas + 1), stderr=0.0, window=(first, stop), source='one_step')


class PcSearchStep(ResultModel):
    p: float
    slope: float
    stderr: float
    truncated: int


class PcSearchResult(ResultModel):
    p_c: float
    uncertainty: float
    bracket: tuple[float, float]
    trajectory: list[PcSearchStep]
    diagnostics: list[Diagnostic] = []


def find_pc(kernel: StepKernel, bracket: tuple[float, float], replicas: int, n_max: int, seed: int,
            window: tuple[int, int] | None = None, max_steps: int = 12, tolerance: float = 1e-4,
            site_cap: int = DEFAULT_SITE_CAP, workers: int = 1,
            on_step: Callable[[PcSearchStep], None] | None = None,
            known_steps: list[PcSearchStep] | None = None) -> PcSearchResult:
    """
    Bisects on the sign of the growth slope of log Z(0; n). Every p uses the same seed, so the slopes at nearby p
    come from coupled clusters.
    :param replicas: Monte Carlo budget per evaluated p
    :param known_steps: previously evaluated points, reused instead of re-simulating (resume)
    :raises BracketError: when the slopes at the bracket ends do not change sign
    """
    known = {step.p: step for step in (known_steps or [])}
    trajectory: list[PcSearchStep] = []

    def evaluate(p: float) -> PcSearchStep:
        if p in known:
            step = known[p]
        else:
            table = estimate_two_point_transform(kernel, p, n_max, [], replicas, seed, site_cap=site_cap,
                                                 workers=workers)
            statistic = slope_statistic(table, window)
            step = PcSearchStep(p=p, slope=statistic.slope, stderr=statistic.stderr, truncated=table.truncated)
            if on_step:
                on_step(step)
        trajectory.append(step)
        logger.info('p=%.6f slope=%.5f +- %.5f', step.p, step.slope, step.stderr)
        return step

    low, high = evaluate(bracket[0]), evaluate(bracket[1])
    if not (low.slope < 0 < high.slope):
        raise BracketError(f'slopes {low.slope:.4g} at p={low.p} and {high.slope:.4g} at p={high.p} do not change '
                           f'sign', slope_low=low.slope, slope_high=high.slope)
    for _ in range(max_steps):
        if high.p - low.p < tolerance:
            break
        middle = evaluate(0.5 * (low.p + high.p))
        if middle.slope < 0:
            low = middle
        else:
            high = middle

    gradient = (high.slope - low.slope) / (high.p - low.p)
    p_c = low.p - low.slope / gradient
    spread = max(low.stderr, high.stderr)
    uncertainty = spread / abs(gradient) + 0.5 * (high.p - low.p)
    result = PcSearchResult(p_c=p_c, uncertainty=uncertainty, bracket=(low.p, high.p), trajectory=trajectory)
    if p_c < 1.0 - 3.0 * uncertainty:
        logger.warning('p_c estimate %.5f is below 1 by more than 3 sigma', p_c)
        result.diagnostics.append(Diagnostic(
            title='critical point estimate below 1', kind='consistency', source='find_pc',
            items=[DiagnosticItem(name='p_c', value=p_c), DiagnosticItem(name='uncertainty', value=uncertainty)],
        ))
    truncated = sum(step.truncated for step in trajectory)
    if truncated:
        result.diagnostics.append(Diagnostic(
            title='replicas stopped by the site cap during the search', kind='truncation', source='find_pc',
            items=[DiagnosticItem(name='truncated_replicas', value=truncated)],
        ))
    return result
