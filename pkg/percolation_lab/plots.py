"""
Plot-ready CSV tables extracted from finished runs.
"""
import csv
import json
import math
import os
from typing import Callable

from percolation_lab.common import PlotTagError, ConfigError

FigureRows = Callable[[str], list[list]]

FIGURES: dict[str, tuple[list[str], FigureRows, str]] = {}


def figure(tag: str, columns: list[str], source: str):
    """Registers the row builder of a figure tag; source is the result file it reads."""
    def register(fn: FigureRows) -> FigureRows:
        FIGURES[tag] = (columns, fn, source)
        return fn
    return register


def _load(run_dir: str, name: str) -> dict:
    path = os.path.join(run_dir, name)
    if not os.path.exists(path):
        raise ConfigError(f'{run_dir} has no {name}; run the matching subcommand first')
    with open(path) as f:
        return json.load(f)


@figure('limit-shape', ['absk', 'ratio', 'err', 'model_ratio'], 'limit_shape.json')
def limit_shape_rows(run_dir: str) -> list[list]:
    """Ratios at the largest simulated n against exp(-C |k|^(alpha ^ 2))."""
    rows = _load(run_dir, 'limit_shape.json')['rows']
    last = max(row['n'] for row in rows)
    return [[row['absk'], row['ratio'], row['err'], row['model_ratio']]
            for row in sorted(rows, key=lambda row: row['absk']) if row['n'] == last]


@figure('growth', ['n', 'z0', 'err', 'fit'], 'growth_fit.json')
def growth_rows(run_dir: str) -> list[list]:
    data = _load(run_dir, 'growth_fit.json')
    fit, series = data['fit'], data['series']
    out = []
    for n, z, err in zip(series['n'], series['z'], series['err']):
        model = fit['prefactor'] * fit['rate'] ** -n * n ** fit['eta'] if n > 0 else None
        out.append([n, z, err, model])
    return out


@figure('spectral', ['absk', 'one_minus_dhat', 'powerlaw_fit'], 'spectral.json')
def spectral_rows(run_dir: str) -> list[list]:
    fit = _load(run_dir, 'spectral.json')
    index, v = fit['stable_index'], fit['v_alpha']
    out = []
    for k, y in zip(fit['k'], fit['one_minus_dhat']):
        model = v * k ** index * (math.log(1.0 / k) if fit['log_corrected'] else 1.0)
        out.append([k, y, model])
    return out


@figure('heat-kernel', ['n', 'sup_norm', 'scaled', 'wrap_mass', 'floor_share'], 'heat_kernel.json')
def heat_kernel_rows(run_dir: str) -> list[list]:
    return [[row['n'], row['sup_norm'], row['scaled'], row['wrap_mass'], row['floor_share']]
            for row in _load(run_dir, 'heat_kernel.json')['rows']]


@figure('pc-search', ['p', 'slope', 'stderr'], 'pc_search.json')
def pc_search_rows(run_dir: str) -> list[list]:
    return [[step['p'], step['slope'], step['stderr']] for step in _load(run_dir, 'pc_search.json')['trajectory']]


def emit_plot_data(run_dir: str, tag: str, out_path: str) -> str:
    """
    Writes the plot table of a figure tag for a complete run.
    :raises PlotTagError: for an unknown tag, listing the valid ones
    """
    from percolation_lab.runs import RunRecord, RunStatus
    if tag not in FIGURES:
        valid = sorted(FIGURES)
        raise PlotTagError(f'unknown figure tag {tag!r}; valid tags: {", ".join(valid)}', valid_tags=valid)
    record = RunRecord.load(run_dir)
    if record.status != RunStatus.complete:
        raise ConfigError(f'run in {run_dir} is {record.status.value}, not complete')
    columns, rows, _ = FIGURES[tag]
    with open(out_path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows(run_dir):
            writer.writerow(['' if value is None else repr(value) if isinstance(value, float) else value
                             for value in row])
    print(f'wrote {tag} plot data to {out_path}')
    return out_path
