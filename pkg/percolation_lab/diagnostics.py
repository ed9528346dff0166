from typing import Literal, Optional

from pydantic import BaseModel


class DiagnosticItem(BaseModel):
    name: str
    value: Optional[float] = None
    detail: Optional[str] = None
    values: Optional[list[float]] = None


class Diagnostic(BaseModel):
    title: str
    kind: Literal['divergence', 'degenerate', 'wrap', 'truncation', 'fit', 'excluded', 'consistency', 'unresolved', 'floor']
    items: list[DiagnosticItem] = []
    source: Optional[str] = None


def divergence_diagnostic(name: str, partial_sums, growth_exponent: float, source: str | None = None) -> Diagnostic:
    """
    Describes a series that was not summed because its terms do not decay fast enough.
    :param name: the diagram or series name
    :param partial_sums: partial sums of the series up to the last usable term
    :param growth_exponent: fitted exponent of the partial sums' growth; positive means divergent
    """
    return Diagnostic(
        title=f'{name} diverges',
        kind='divergence',
        source=source,
        items=[
            DiagnosticItem(name='growth_exponent', value=float(growth_exponent)),
            DiagnosticItem(name='partial_sums', values=[float(s) for s in partial_sums]),
        ],
    )
