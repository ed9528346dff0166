"""
Vose alias tables and the replica random-stream contract.

Every replica r of a run with seed s draws from its own Philox stream keyed by (s, r), so a replica's randomness
does not depend on which worker ran it or on how replicas were split into blocks.
"""
import numpy as np

from percolation_lab.common import ParameterError


class AliasTable:
    """
    Constant-time sampler for a finite distribution (Vose's alias method).

    Attributes:
        probabilities: acceptance probability of each column
        alias: the outcome used when a column rejects
    """

    def __init__(self, weights):
        weights = np.asarray(weights, dtype=float)
        if weights.ndim != 1 or weights.size == 0:
            raise ParameterError('alias table needs a non-empty 1-d weight vector')
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ParameterError('alias table weights must be finite and non-negative')
        total = weights.sum()
        if total <= 0:
            raise ParameterError('alias table weights sum to zero')
        n = weights.size
        scaled = (weights / total * n).tolist()
        probabilities = [1.0] * n
        alias = list(range(n))
        small = [i for i, q in enumerate(scaled) if q < 1.0]
        large = [i for i, q in enumerate(scaled) if q >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            probabilities[s] = scaled[s]
            alias[s] = g
            # better numerical accuracy than scaled[g] - (1 - scaled[s])
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            if scaled[g] < 1.0:
                small.append(g)
            else:
                large.append(g)
        # leftovers are 1 up to rounding
        self.probabilities = np.asarray(probabilities)
        self.alias = np.asarray(alias, dtype=np.int64)
        self.size = n

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draws count outcome indices."""
        if count == 0:
            return np.empty(0, dtype=np.int64)
        columns = rng.integers(0, self.size, size=count)
        accept = rng.random(count) < self.probabilities[columns]
        return np.where(accept, columns, self.alias[columns])

    def outcome_probabilities(self) -> np.ndarray:
        """The distribution the table actually samples, reconstructed from its columns."""
        out = self.probabilities.copy()
        np.add.at(out, self.alias, 1.0 - self.probabilities)
        return out / self.size


def replica_rng(seed: int, replica: int) -> np.random.Generator:
    """
    The random stream owned by one replica.
    :param seed: the run seed, a 64-bit integer
    :param replica: the replica index within the run
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replica),))
    return np.random.Generator(np.random.Philox(sequence))


def stream_rng(seed: int, *labels: int) -> np.random.Generator:
    """A stream for non-replica purposes (probe draws, bootstrap of scans), keyed away from replica streams."""
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(2**32, *[int(label) for label in labels]))
    return np.random.Generator(np.random.Philox(sequence))
