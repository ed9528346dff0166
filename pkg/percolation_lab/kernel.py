"""
The long-range step distribution D: construction, truncation, moments and exact sampling.
"""
import csv
import json
import logging
import math
import os
from functools import cached_property
from typing import Literal

import numpy as np
from pydantic import Field, model_validator
from scipy import special

from percolation_lab.common import (LabModel, ResultModel, KernelTruncationError, KernelResourceError,
                                    ParameterError)
from percolation_lab.sampling import AliasTable
from percolation_lab.util import compensated_sum

logger = logging.getLogger(__name__)

DEFAULT_MAX_SUPPORT = 20_000_000


class KernelSpec(LabModel):
    """
    Parameters of the step distribution D(x) = h(x/L) / sum_y h(y/L), truncated to the box |x|_inf <= R.
    """
    d: int = Field(ge=1)
    """spatial dimension"""
    alpha: float = Field(gt=0)
    """tail index of the power-law profile"""
    L: int = Field(ge=1)
    """spread-out scale"""
    R: int = Field(ge=1)
    """truncation radius in lattice units (sup norm)"""
    profile: Literal['power_law', 'uniform_box'] = 'power_law'
    """power_law is h(x) ~ (|x| v 1)^(-d-alpha); uniform_box is the indicator of |x|_inf <= L, for hand-checkable tests"""
    tail_tol: float = Field(default=1e-4, gt=0, lt=1)
    """maximum allowed truncated tail mass"""
    exclude_origin: bool = False
    """uniform_box only: drop the origin from the support"""

    @property
    def ell(self) -> int:
        """Regularity radius of the profile; both profiles are exact beyond |x| = L."""
        return 1

    @model_validator(mode='after')
    def check_radius(self):
        if self.R < self.ell * self.L:
            raise ValueError(f'R={self.R} must be at least ell*L={self.ell * self.L}')
        if self.exclude_origin and self.profile != 'uniform_box':
            raise ValueError('exclude_origin only applies to the uniform_box profile')
        return self


class StepKernel:
    """
    The truncated, renormalized D with its sampling table. Immutable after construction.

    Attributes:
        spec: the KernelSpec it was built from
        sites: (S, d) integer array of support sites in lexicographic order
        masses: (S,) probabilities, strictly positive, summing to 1
        lam: lambda = L^-d
        tail_mass: analytic upper bound on the mass discarded by truncation (0 for finite profiles)
    """

    def __init__(self, spec: KernelSpec, sites: np.ndarray, masses: np.ndarray, tail_mass: float):
        self.spec = spec
        self.sites = sites
        self.masses = masses
        self.tail_mass = tail_mass
        self.lam = float(spec.L) ** (-spec.d)
        self.sites.setflags(write=False)
        self.masses.setflags(write=False)

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def R(self) -> int:
        return self.spec.R

    @property
    def support_size(self) -> int:
        return int(self.masses.size)

    @property
    def stable_index(self) -> float:
        """alpha ^ 2; finite-range profiles are in the Gaussian class."""
        if self.spec.profile == 'uniform_box':
            return 2.0
        return min(self.spec.alpha, 2.0)

    @property
    def log_corrected(self) -> bool:
        return self.spec.profile == 'power_law' and self.spec.alpha == 2.0

    @property
    def correction_exponent(self) -> float:
        """Exponent of the first correction to the leading small-k behaviour of 1 - D^(k)."""
        if self.spec.profile == 'uniform_box':
            return 4.0
        alpha = self.spec.alpha
        if alpha < 2.0:
            return 2.0
        if alpha == 2.0:
            return 2.0
        return min(alpha, 4.0)

    @cached_property
    def sup_norm(self) -> float:
        return float(self.masses.max())

    @cached_property
    def origin_mass(self) -> float:
        hit = np.flatnonzero(~self.sites.any(axis=1))
        return float(self.masses[hit[0]]) if hit.size else 0.0

    @cached_property
    def norms(self) -> np.ndarray:
        """Euclidean length of each support site."""
        return np.sqrt((self.sites.astype(float) ** 2).sum(axis=1))

    @cached_property
    def sup_norms(self) -> np.ndarray:
        return np.abs(self.sites).max(axis=1)

    @cached_property
    def sampler(self) -> AliasTable:
        return AliasTable(self.masses)

    def mass_beyond(self, radius: float) -> float:
        """Mass of the sites with |x|_inf >= radius."""
        return compensated_sum(self.masses[self.sup_norms >= radius])

    def dense(self) -> np.ndarray:
        """D on the box {-R..R}^d as a d-dimensional array, origin at index R along each axis."""
        out = np.zeros((2 * self.R + 1,) * self.d)
        out[tuple((self.sites + self.R).T)] = self.masses
        return out

    def mass_at(self, site) -> float:
        site = np.asarray(site, dtype=np.int64)
        if np.abs(site).max(initial=0) > self.R:
            return 0.0
        hit = np.flatnonzero((self.sites == site).all(axis=1))
        return float(self.masses[hit[0]]) if hit.size else 0.0

    def __repr__(self):
        return f'StepKernel({self.spec!r}, support={self.support_size}, tail_mass={self.tail_mass:.3g})'


def max_support_budget() -> int:
    return int(os.environ.get('PERCOLATION_LAB_MAX_SUPPORT') or DEFAULT_MAX_SUPPORT)


def power_law_tail_weight(d: int, alpha: float, L: int, R: int) -> float:
    """
    Upper bound on sum over |x|_inf > R of (|x|/L)^(-d-alpha), by comparing each site with the unit cube around it
    and integrating |y|^(-d-alpha) over |y| >= R + 1 - sqrt(d)/2.
    """
    rho = R + 1.0
    half_diagonal = math.sqrt(d) / 2.0
    if rho <= half_diagonal:
        return math.inf
    sphere = 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)
    stretch = (1.0 + half_diagonal / rho) ** (d + alpha)
    return float(L) ** (d + alpha) * stretch * sphere * (rho - half_diagonal) ** (-alpha) / alpha


def _minimal_radius(spec: KernelSpec, weight_total: float) -> int:
    def satisfied(radius):
        tail = power_law_tail_weight(spec.d, spec.alpha, spec.L, radius)
        return tail / (weight_total + tail) <= spec.tail_tol

    high = spec.R
    while not satisfied(high):
        high *= 2
        if high > 2 ** 62:
            return high
    low = max(spec.R, high // 2)
    while low < high:
        mid = (low + high) // 2
        if satisfied(mid):
            high = mid
        else:
            low = mid + 1
    return high


def build_kernel(spec: KernelSpec, max_support: int | None = None) -> StepKernel:
    """
    Builds the truncated kernel.
    :param spec: the kernel parameters
    :param max_support: memory budget in sites; defaults to PERCOLATION_LAB_MAX_SUPPORT or 2*10^7
    :return: the StepKernel, masses renormalized over |x|_inf <= R
    """
    budget = max_support or max_support_budget()
    box_sites = (2 * spec.R + 1) ** spec.d
    if box_sites > budget:
        raise KernelResourceError(f'support of {box_sites} sites for R={spec.R}, d={spec.d} exceeds the budget of '
                                  f'{budget} sites')

    axis = np.arange(-spec.R, spec.R + 1, dtype=np.int64)
    sites = np.stack(np.meshgrid(*([axis] * spec.d), indexing='ij'), axis=-1).reshape(-1, spec.d)
    if spec.profile == 'power_law':
        # sums of squared integers are exact, so the weights are exactly symmetric
        radius = np.sqrt((sites.astype(float) ** 2).sum(axis=1)) / spec.L
        weights = np.maximum(radius, 1.0) ** (-(spec.d + spec.alpha))
    else:
        weights = (np.abs(sites).max(axis=1) <= spec.L).astype(float)
        if spec.exclude_origin:
            weights[~sites.any(axis=1)] = 0.0
    keep = weights > 0
    sites, weights = sites[keep], weights[keep]
    if sites.shape[0] == 0:
        raise ParameterError('kernel support is empty')

    weight_total = compensated_sum(weights)
    tail_mass = 0.0
    if spec.profile == 'power_law':
        tail_weight = power_law_tail_weight(spec.d, spec.alpha, spec.L, spec.R)
        tail_mass = tail_weight / (weight_total + tail_weight)
        if tail_mass > spec.tail_tol:
            minimal = _minimal_radius(spec, weight_total)
            raise KernelTruncationError(f'truncated tail mass bound {tail_mass:.3g} exceeds tail_tol={spec.tail_tol}; '
                                        f'R >= {minimal} is needed', tail_mass=tail_mass, minimal_R=minimal)
    masses = weights / weight_total
    logger.debug('built kernel d=%s alpha=%s L=%s R=%s with %s sites, tail mass <= %.3g', spec.d, spec.alpha,
                 spec.L, spec.R, masses.size, tail_mass)
    return StepKernel(spec, sites, masses, tail_mass)


class MomentResult(ResultModel):
    r: float
    value: float
    doubled_value: float
    """the same moment with the truncation radius doubled"""
    change: float
    status: Literal['convergent', 'divergent']
    predicted_convergent: bool
    """r < alpha (always true for finite-range profiles)"""
    growth_exponent: float
    """log2 of the ratio under doubling; tends to r - alpha for divergent moments and to 0 for convergent ones"""


def _moment(kernel: StepKernel, r: float) -> float:
    return compensated_sum(np.power(kernel.norms, r) * kernel.masses)


def kernel_moment(kernel: StepKernel, r: float, max_support: int | None = None) -> MomentResult:
    """
    sum |x|^r D(x) over the truncated support, with a convergence diagnostic obtained by doubling R.
    """
    if r < 0:
        raise ParameterError(f'moment order must be non-negative, got {r}')
    value = _moment(kernel, r)
    doubled_spec = kernel.spec.model_copy(update={'R': 2 * kernel.R})
    doubled_value = _moment(build_kernel(doubled_spec, max_support=max_support), r)
    change = abs(doubled_value - value)
    growth = math.log2(doubled_value / value) if value > 0 and doubled_value > 0 else 0.0
    predicted = kernel.spec.profile == 'uniform_box' or r < kernel.spec.alpha
    return MomentResult(
        r=r,
        value=value,
        doubled_value=doubled_value,
        change=change,
        status='convergent' if change < kernel.spec.tail_tol else 'divergent',
        predicted_convergent=predicted,
        growth_exponent=growth,
    )


def sample_step(kernel: StepKernel, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """
    Draws sites distributed exactly as the truncated D.
    :return: one site of shape (d,) when size is None, otherwise an array of shape (size, d)
    """
    count = 1 if size is None else int(size)
    picks = kernel.sites[kernel.sampler.sample(rng, count)]
    return picks[0] if size is None else picks


def dump_kernel(kernel: StepKernel, directory: str) -> tuple[str, str]:
    """
    Writes kernel.csv (x1..xd,mass in lexicographic order) and the kernel.json sidecar.
    :return: the two paths written
    """
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, 'kernel.csv')
    json_path = os.path.join(directory, 'kernel.json')
    with open(csv_path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow([f'x{i + 1}' for i in range(kernel.d)] + ['mass'])
        for site, mass in zip(kernel.sites.tolist(), kernel.masses.tolist()):
            writer.writerow([*site, repr(mass)])
    with open(json_path, 'w') as f:
        json.dump({
            'spec': kernel.spec.model_dump(),
            'ell': kernel.spec.ell,
            'lambda': kernel.lam,
            'tail_mass': kernel.tail_mass,
            'support_size': kernel.support_size,
            'sup_norm': kernel.sup_norm,
        }, f, indent=2)
    return csv_path, json_path
