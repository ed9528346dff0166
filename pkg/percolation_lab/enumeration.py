"""
Exact oracles on tiny instances: brute force over bond configurations, and a transfer operator over occupied
fronts.
"""
import itertools
import logging

import numpy as np

from percolation_lab.common import ResultModel, EnumerationCapError
from percolation_lab.kernel import StepKernel
from percolation_lab.percolation import build_bond_sampler

logger = logging.getLogger(__name__)

MAX_SUPPORT = 3
MAX_TIME = 3
DEFAULT_WORK_CAP = 200_000_000
CHUNK = 1 << 14

Vertex = tuple[tuple[int, ...], int]


class BondSystem:
    """
    Space-time vertices reachable from (o, 0) up to time n and the bonds between them, in time order.

    Attributes:
        vertices: list of (site, time)
        index: vertex -> position in vertices
        tails, heads: vertex index of each bond's ends
        probabilities: pD of each bond
    """

    def __init__(self, kernel: StepKernel, p: float, n: int):
        origin = (0,) * kernel.d
        self.vertices: list[Vertex] = [(origin, 0)]
        self.index: dict[Vertex, int] = {(origin, 0): 0}
        tails, heads, probabilities = [], [], []
        layer = [origin]
        for t in range(n):
            following = []
            for x in layer:
                for y, mass in zip(kernel.sites.tolist(), kernel.masses.tolist()):
                    child = tuple(a + b for a, b in zip(x, y))
                    if (child, t + 1) not in self.index:
                        self.index[(child, t + 1)] = len(self.vertices)
                        self.vertices.append((child, t + 1))
                        following.append(child)
                    tails.append(self.index[(x, t)])
                    heads.append(self.index[(child, t + 1)])
                    probabilities.append(p * mass)
            layer = following
        self.tails = np.asarray(tails, dtype=np.int64)
        self.heads = np.asarray(heads, dtype=np.int64)
        self.probabilities = np.asarray(probabilities)

    @property
    def bond_count(self) -> int:
        return int(self.tails.size)

    def configurations(self, work_cap: int):
        """Yields (occupied, probability) chunks covering every configuration of the bond set."""
        bonds = self.bond_count
        work = (1 << bonds) * max(bonds, 1)
        if work > work_cap:
            raise EnumerationCapError(f'enumerating 2^{bonds} configurations of {bonds} bonds needs {work} units of '
                                      f'work, above the cap of {work_cap}')
        shifts = np.arange(bonds, dtype=np.int64)
        for start in range(0, 1 << bonds, CHUNK):
            codes = np.arange(start, min(start + CHUNK, 1 << bonds), dtype=np.int64)
            occupied = ((codes[:, None] >> shifts) & 1).astype(bool)
            weight = np.where(occupied, self.probabilities, 1.0 - self.probabilities).prod(axis=1)
            yield occupied, weight

    def reach(self, occupied: np.ndarray, source: int = 0, removed: int | None = None) -> np.ndarray:
        """(configs, vertices) reachability from source along occupied bonds, optionally ignoring one bond."""
        out = np.zeros((occupied.shape[0], len(self.vertices)), dtype=bool)
        out[:, source] = True
        for b in range(self.bond_count):
            if b == removed:
                continue
            out[:, self.heads[b]] |= out[:, self.tails[b]] & occupied[:, b]
        return out


def _check_instance(kernel: StepKernel, n: int):
    if kernel.support_size > MAX_SUPPORT:
        raise EnumerationCapError(f'exact enumeration needs a support of at most {MAX_SUPPORT} sites, got '
                                  f'{kernel.support_size}')
    if not 0 <= n <= MAX_TIME:
        raise EnumerationCapError(f'exact enumeration is limited to n <= {MAX_TIME}, got {n}')


class ExactEntry(ResultModel):
    site: list[int]
    n: int
    value: float


class ExactTable(ResultModel):
    """Exact values of a space-time function on the vertices reachable from (o, 0)."""
    entries: list[ExactEntry]

    def value(self, site, n: int) -> float:
        site = list(np.atleast_1d(site).tolist())
        for entry in self.entries:
            if entry.n == n and entry.site == site:
                return entry.value
        return 0.0

    def total(self, n: int) -> float:
        return sum(entry.value for entry in self.entries if entry.n == n)

    def as_dict(self) -> dict[Vertex, float]:
        return {(tuple(entry.site), entry.n): entry.value for entry in self.entries}


def _table(system: BondSystem, values: np.ndarray) -> ExactTable:
    return ExactTable(entries=[ExactEntry(site=list(site), n=t, value=float(value))
                               for (site, t), value in zip(system.vertices, values)])


def exact_enumeration_two_point(kernel: StepKernel, p: float, n_small: int,
                                work_cap: int = DEFAULT_WORK_CAP) -> ExactTable:
    """
    phi_p(x, t) for t <= n_small by summing the probability of every bond configuration in which (o, 0) reaches
    (x, t).
    :raises EnumerationCapError: when the instance is too large to enumerate
    """
    _check_instance(kernel, n_small)
    build_bond_sampler(kernel, p)
    system = BondSystem(kernel, p, n_small)
    logger.debug('enumerating %s bonds over %s vertices', system.bond_count, len(system.vertices))
    phi = np.zeros(len(system.vertices))
    for occupied, weight in system.configurations(work_cap):
        phi += weight @ system.reach(occupied)
    return _table(system, phi)


class ExpansionCheck(ResultModel):
    residual: float
    """max |phi - pi0 - pi0 * q * phi + R1| over the reachable vertices"""
    phi: ExactTable
    pi0: ExactTable
    """probability of two bond-disjoint occupied paths from (o, 0)"""
    r1: ExactTable
    convolution: ExactTable
    """(pi0 * q_p * phi)(x, n)"""


def verify_expansion_step(kernel: StepKernel, p: float, n_small: int,
                          work_cap: int = DEFAULT_WORK_CAP) -> ExpansionCheck:
    """
    Checks phi = pi0 + pi0 * q_p * phi - R1 on every reachable vertex, where R1 collects the occupied bonds b with
    (o,0) doubly connected to the bottom of b, b's top connected to (x,n), and (x,n) still reached when b is removed.
    """
    _check_instance(kernel, n_small)
    build_bond_sampler(kernel, p)
    system = BondSystem(kernel, p, n_small)
    vertex_count, bonds = len(system.vertices), system.bond_count
    if (1 << bonds) * bonds * (bonds + vertex_count) > work_cap:
        raise EnumerationCapError(f'expansion check over {bonds} bonds exceeds the work cap of {work_cap}')
    phi = np.zeros(vertex_count)
    pi0 = np.zeros(vertex_count)
    r1 = np.zeros(vertex_count)
    for occupied, weight in system.configurations(work_cap):
        connected = system.reach(occupied)
        without = [system.reach(occupied, removed=b) for b in range(bonds)]
        double = connected.copy()
        for reached in without:
            double &= reached
        double[:, 0] = True
        from_vertex = {}
        for b in range(bonds):
            head = int(system.heads[b])
            if head not in from_vertex:
                from_vertex[head] = system.reach(occupied, source=head)
            hits = (occupied[:, b] & double[:, system.tails[b]])[:, None] & from_vertex[head] & without[b]
            r1 += weight @ hits
        phi += weight @ connected
        pi0 += weight @ double

    phi_of = {vertex: phi[i] for i, vertex in enumerate(system.vertices)}
    convolution = np.zeros(vertex_count)
    masses = {tuple(site): mass for site, mass in zip(kernel.sites.tolist(), kernel.masses.tolist())}
    for target, (x, n) in enumerate(system.vertices):
        total = 0.0
        for source, (y, t) in enumerate(system.vertices):
            if t >= n or pi0[source] == 0.0:
                continue
            for z, mass in masses.items():
                shifted = tuple(a - b - c for a, b, c in zip(x, y, z))
                total += pi0[source] * p * mass * phi_of.get((shifted, n - t - 1), 0.0)
        convolution[target] = total
    residual = float(np.abs(phi - pi0 - convolution + r1).max())
    return ExpansionCheck(residual=residual, phi=_table(system, phi), pi0=_table(system, pi0),
                          r1=_table(system, r1), convolution=_table(system, convolution))


class FrontDistribution(ResultModel):
    n: int
    states: list[tuple[list[list[int]], float]]
    """(sorted sites of C_n, probability)"""

    def two_point(self) -> dict[tuple[int, ...], float]:
        """phi_p(x, n) = P(x in C_n)."""
        out: dict[tuple[int, ...], float] = {}
        for sites, probability in self.states:
            for site in sites:
                out[tuple(site)] = out.get(tuple(site), 0.0) + probability
        return out

    def mean_size(self) -> float:
        """Z_p(0; n) = E |C_n|."""
        return sum(len(sites) * probability for sites, probability in self.states)

    def size_distribution(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for sites, probability in self.states:
            out[len(sites)] = out.get(len(sites), 0.0) + probability
        return out


def generation_sizes_exact(kernel: StepKernel, p: float, n: int, work_cap: int = DEFAULT_WORK_CAP) -> FrontDistribution:
    """
    The exact law of C_n from the Markov chain of fronts: given C_t, each candidate child y is occupied independently
    with probability 1 - prod_{x in C_t} (1 - pD(y - x)).
    """
    _check_instance(kernel, n)
    build_bond_sampler(kernel, p)
    steps = [(tuple(site), p * mass) for site, mass in zip(kernel.sites.tolist(), kernel.masses.tolist())]
    distribution: dict[tuple, float] = {((0,) * kernel.d,): 1.0}
    work = 0
    for _ in range(n):
        following: dict[tuple, float] = {}
        for front, probability in distribution.items():
            survive: dict[tuple, float] = {}
            for x in front:
                for y, q in steps:
                    child = tuple(a + b for a, b in zip(x, y))
                    survive[child] = survive.get(child, 1.0) * (1.0 - q)
            children = sorted(survive)
            work += 1 << len(children)
            if work > work_cap:
                raise EnumerationCapError(f'transfer operator work exceeds the cap of {work_cap}')
            for pattern in itertools.product((False, True), repeat=len(children)):
                weight = probability
                for child, occupied in zip(children, pattern):
                    weight *= (1.0 - survive[child]) if occupied else survive[child]
                state = tuple(child for child, occupied in zip(children, pattern) if occupied)
                following[state] = following.get(state, 0.0) + weight
        distribution = following
    return FrontDistribution(n=n, states=[([list(site) for site in state], probability)
                                          for state, probability in sorted(distribution.items())])
