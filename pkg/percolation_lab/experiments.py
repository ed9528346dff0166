import hashlib
import json
from typing import Any, Callable, Literal, Optional

from pydantic import Field, model_validator

from percolation_lab.common import LabModel, ConfigError
from percolation_lab.kernel import KernelSpec
from percolation_lab.util import flexible_decorator

SCHEMA_VERSION = 1

Subcommand = Literal['kernel', 'spectral', 'pc-formula', 'simulate', 'pc-search', 'analyze', 'oracle-check',
                     'emit-plot']


class ReportSection(LabModel):
    moments: list[float] = Field(default_factory=lambda: [1.0])
    """orders r of the moments sum |x|^r D(x) to report"""
    dump: bool = True
    """write kernel.csv and kernel.json"""


class GridSection(LabModel):
    """
    Attributes:
        M: torus side; the smallest power of two holding the kernel (or heat_n_max steps of it) by default
        heat_n_max: last n of the heat-kernel table
        heat_n_values: the n tabulated; every n up to heat_n_max by default
        k_low: lower edge of the spectral window; one decade below the default upper edge when unset
        k_high: upper edge of the spectral window, 0.1 / (ell L) when unset
        points: wavevectors in the spectral window
        terms: cap on the diagram series length
        refine: also compute the diagrams on a twice finer grid
    """
    M: Optional[int] = Field(default=None, ge=2)
    heat_n_max: int = Field(default=512, ge=1)
    heat_n_values: Optional[list[int]] = None
    k_low: Optional[float] = Field(default=None, gt=0)
    k_high: Optional[float] = Field(default=None, gt=0)
    points: int = Field(default=24, ge=4)
    terms: Optional[int] = Field(default=None, ge=2)
    refine: bool = False


class SimulationSection(LabModel):
    p: float = Field(ge=0)
    n_max: int = Field(ge=1)
    replicas: int = Field(gt=0)
    probes: list[list[float]] = Field(default_factory=list)
    """wavevectors besides k = 0"""
    site_cap: int = Field(default=1_000_000, gt=0)
    block_size: int = Field(default=256, gt=0)
    workers: int = Field(default=1, ge=1)


class SearchSection(LabModel):
    bracket: tuple[float, float]
    replicas: int = Field(gt=0)
    n_max: int = Field(ge=4)
    window: Optional[tuple[int, int]] = None
    max_steps: int = Field(default=12, ge=0)
    tolerance: float = Field(default=1e-4, gt=0)
    site_cap: int = Field(default=1_000_000, gt=0)
    workers: int = Field(default=1, ge=1)

    @model_validator(mode='after')
    def check_bracket(self):
        if not 0 <= self.bracket[0] < self.bracket[1]:
            raise ValueError('bracket must be an increasing pair of non-negative p values')
        return self


class SweepSection(LabModel):
    p_values: list[float] = Field(min_length=1)
    n_max: int = Field(ge=2)
    replicas: int = Field(gt=0)
    margin: float = Field(default=0.02, gt=0, lt=1)
    site_cap: int = Field(default=1_000_000, gt=0)
    workers: int = Field(default=1, ge=1)


class ShapeSection(LabModel):
    p: float = Field(default=1.0, ge=0)
    k_values: list[float] = Field(default_factory=lambda: [0.5, 1.0, 1.5])
    """probe magnitudes along the first axis"""
    n_values: list[int] = Field(min_length=1)
    replicas: int = Field(default=1000, gt=0)
    band: tuple[float, float] = (0.5, 2.0)
    surrogate: bool = False
    """use the exact random-walk surrogate instead of Monte Carlo"""
    site_cap: int = Field(default=1_000_000, gt=0)
    workers: int = Field(default=1, ge=1)


class OracleSection(LabModel):
    p: float = Field(ge=0)
    n_small: int = Field(default=2, ge=1, le=3)
    transfer_n: int = Field(default=3, ge=1, le=3)
    """time of the transfer-operator comparison"""
    mc_replicas: int = Field(default=20_000, ge=0)


class AnalysisSection(LabModel):
    mode: Literal['growth', 'sweep', 'limit-shape']
    source: Optional[str] = None
    """growth mode: a simulate run directory, an estimator_table.json or a two_point.csv"""
    window: Optional[tuple[int, int]] = None
    epsilon: Optional[float] = Field(default=None, gt=0, lt=1)
    p_c: Optional[float] = None
    p_c_uncertainty: float = Field(default=0.0, ge=0)


class PlotSection(LabModel):
    run_dir: str
    tag: str


class ExperimentConfig(LabModel):
    schema_version: Literal[1] = SCHEMA_VERSION
    subcommand: Subcommand
    kernel: Optional[KernelSpec] = None
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    output_dir: Optional[str] = None
    """excluded from the digest, so a moved run keeps its identity"""
    report: Optional[ReportSection] = None
    grid: Optional[GridSection] = None
    simulation: Optional[SimulationSection] = None
    search: Optional[SearchSection] = None
    sweep: Optional[SweepSection] = None
    shape: Optional[ShapeSection] = None
    oracle: Optional[OracleSection] = None
    analysis: Optional[AnalysisSection] = None
    plot: Optional[PlotSection] = None

    def to_text(self) -> str:
        return self.model_dump_json(indent=2)

    @classmethod
    def from_text(cls, text: str) -> 'ExperimentConfig':
        return cls.model_validate_json(text)

    def canonical(self) -> str:
        return json.dumps(self.model_dump(mode='json', exclude={'output_dir'}), sort_keys=True, separators=(',', ':'))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, overrides: dict[str, Any]) -> 'ExperimentConfig':
        """
        Applies dotted-path overrides such as {'simulation.p': 0.9}; missing sections are created.
        """
        return ExperimentConfig.model_validate(apply_overrides(self.model_dump(mode='json'), overrides))


class ExperimentOutput(LabModel):
    """
    What an experiment hands back to the runner; result files are written through the run context.

    Attributes:
        headline: the few numbers worth printing and putting in the summary
        narrative: markdown appended to the summary
    """
    headline: dict[str, Any] = Field(default_factory=dict)
    narrative: Optional[str] = None


class ExperimentSpec(LabModel):
    name: Subcommand
    description: Optional[str] = None
    requires: list[str] = Field(default_factory=list)
    """config sections (or 'kernel') that must be present"""


class Experiment:
    def __init__(self, fn: Callable[..., ExperimentOutput], spec: ExperimentSpec):
        self.fn = fn
        self.spec = spec

    def __call__(self, *args, **kwargs):
        return self.fn(*args, **kwargs)

    def check_config(self, config: ExperimentConfig):
        if config.subcommand != self.spec.name:
            raise ConfigError(f'config is for {config.subcommand!r}, not {self.spec.name!r}')
        missing = [section for section in self.spec.requires if getattr(config, section) is None]
        if missing:
            raise ConfigError(f'{self.spec.name} needs the config sections: {", ".join(missing)}')


EXPERIMENTS: dict[str, Experiment] = {}


@flexible_decorator
def experiment(fn: Callable[..., ExperimentOutput], name: str = None, requires: list[str] | None = None,
               description: str | None = None):
    """
    Registers a function as the implementation of a subcommand.
    :param name: the subcommand; defaults to the function name with underscores turned into dashes
    :param requires: config sections that must be present
    :param description: shown in the CLI help
    :return: the function wrapped in an Experiment, still callable as before
    """
    description = description or (fn.__doc__ or '').strip() or None
    spec = ExperimentSpec(name=name or fn.__name__.replace('_', '-'), description=description, requires=requires or [])
    wrapped = Experiment(fn, spec)
    EXPERIMENTS[spec.name] = wrapped
    return wrapped


def get_experiment(name: str) -> Experiment:
    # importing commands fills the registry
    from percolation_lab import commands  # noqa: F401
    try:
        return EXPERIMENTS[name]
    except KeyError:
        raise ConfigError(f'unknown subcommand {name!r}; valid: {", ".join(sorted(EXPERIMENTS))}')


def apply_overrides(data: dict, overrides: dict[str, Any]) -> dict:
    """Sets dotted paths such as 'simulation.p' in a nested dict, creating missing levels."""
    for path, value in overrides.items():
        *parents, leaf = path.split('.')
        node = data
        for key in parents:
            if node.get(key) is None:
                node[key] = {}
            node = node[key]
        node[leaf] = value
    return data
