"""
The subcommands. Each takes a RunContext, writes its result files through it and returns an ExperimentOutput.
"""
import json
import logging
import os

from percolation_lab.analysis import (growth_series, fit_growth, window_sensitivity, fit_limit_shape,
                                      random_walk_shape, sweep_point, exponent_fits, sandwich_check, SweepPoint,
                                      SweepSettings)
from percolation_lab.common import ParameterError, FitError, ConfigError, CriticalityError
from percolation_lab.diagnostics import Diagnostic, DiagnosticItem
from percolation_lab.diagrams import diagram_values, diagram_refinement, pc_prediction
from percolation_lab.enumeration import exact_enumeration_two_point, verify_expansion_step, generation_sizes_exact
from percolation_lab.experiments import experiment, ExperimentOutput, ReportSection, GridSection
from percolation_lab.kernel import dump_kernel, kernel_moment
from percolation_lab.percolation import (EstimatorTable, EstimatorTableRecord, PcSearchStep,
                                         estimate_two_point_transform, estimate_susceptibility, find_pc,
                                         write_two_point_csv)
from percolation_lab.plots import emit_plot_data
from percolation_lab.runs import RunContext
from percolation_lab.spectral import (TorusGrid, default_grid, spectral_asymptotics, heat_kernel_bound_report,
                                      shell_sweep, infrared_scan)

logger = logging.getLogger(__name__)


def _truncation_diagnostic(context: RunContext, table: EstimatorTable, source: str):
    if not table.truncated:
        return
    context.truncated = True
    context.add_diagnostics([Diagnostic(
        title='replicas stopped by the site cap', kind='truncation', source=source,
        items=[DiagnosticItem(name='truncated', value=table.truncated),
               DiagnosticItem(name='replicas', value=table.replicas),
               DiagnosticItem(name='first_truncated_n', value=table.first_truncated_at)],
    )])


def _spectral_window(context: RunContext, grid: GridSection):
    if grid.k_low is None and grid.k_high is None:
        return None
    spec = context.config.kernel
    high = grid.k_high or 0.1 / (spec.ell * spec.L)
    return grid.k_low or high / 10.0, high


def _heat_n_values(n_max: int) -> list[int]:
    values = {1, n_max}
    step = 1.0
    while step <= n_max:
        values.add(int(round(step)))
        step *= 2 ** 0.5
    return sorted(values)


@experiment(requires=['kernel'])
def kernel(context: RunContext) -> ExperimentOutput:
    """Builds the step distribution, writes it out and reports its moments."""
    step_kernel = context.kernel
    report = context.config.report or ReportSection()
    if report.dump:
        dump_kernel(step_kernel, context.output_dir)
    with context.step('moments'):
        moments = [kernel_moment(step_kernel, r) for r in report.moments]
    context.write_json('moments.json', {'moments': [moment.model_dump(mode='json') for moment in moments]})
    return ExperimentOutput(headline={
        'support_size': step_kernel.support_size,
        'tail_mass_bound': step_kernel.tail_mass,
        'sup_norm': step_kernel.sup_norm,
        'origin_mass': step_kernel.origin_mass,
        **{f'moment_{moment.r:g}': f'{moment.value:.6g} ({moment.status})' for moment in moments},
    })


@experiment(requires=['kernel'])
def spectral(context: RunContext) -> ExperimentOutput:
    """Small-k spectrum, heat-kernel table, shell decomposition and infrared scan of the random walk."""
    step_kernel = context.kernel
    grid = context.config.grid or GridSection()
    with context.step('spectral fit'):
        fit = spectral_asymptotics(step_kernel, _spectral_window(context, grid), grid.points)
    context.write_json('spectral.json', fit)
    context.write_csv('spectrum.csv', ['k', 'value'], zip(fit.k, fit.one_minus_dhat))

    torus = TorusGrid(d=step_kernel.d, M=grid.M) if grid.M else default_grid(step_kernel, reach=grid.heat_n_max)
    with context.step('heat kernel'):
        heat = heat_kernel_bound_report(step_kernel, grid.heat_n_max, torus,
                                        grid.heat_n_values or _heat_n_values(grid.heat_n_max))
    context.write_json('heat_kernel.json', heat)
    context.write_csv('heat_kernel.csv', ['n', 'value'], [(row.n, row.sup_norm) for row in heat.rows])
    context.add_diagnostics(heat.diagnostics)

    with context.step('shells'):
        shells = shell_sweep(step_kernel)
    context.write_json('shells.json', shells)
    with context.step('infrared scan'):
        scan = infrared_scan(step_kernel, grid=TorusGrid(d=step_kernel.d, M=grid.M) if grid.M else None)
    context.write_json('infrared.json', scan)
    return ExperimentOutput(headline={
        'exponent': fit.exponent,
        'exponent_stderr': fit.exponent_stderr,
        'stable_index': fit.stable_index,
        'v_alpha': fit.v_alpha,
        'heat_kernel_c_hat': heat.c_hat,
        'heat_kernel_variation': heat.variation,
        'shell_variation': max(shells.variation1, shells.variation2, shells.variation3),
        'infrared_c_hat': scan.c_hat,
    })


@experiment(name='pc-formula', requires=['kernel'])
def pc_formula(context: RunContext) -> ExperimentOutput:
    """Bubble, triangle and correction series by both methods, and the first-order critical point."""
    step_kernel = context.kernel
    grid = context.config.grid or GridSection()
    try:
        fit = spectral_asymptotics(step_kernel)
    except ParameterError as e:
        logger.warning('no spectral window for this kernel (%s); the k=0 cell uses the first dual node', e.message)
        fit = None
    torus = TorusGrid(d=step_kernel.d, M=grid.M) if grid.M else None
    with context.step('diagrams'):
        if grid.refine:
            refinement = diagram_refinement(step_kernel, torus, grid.terms, fit)
            context.write_json('refinement.json', refinement)
            report = refinement.coarse
        else:
            report = diagram_values(step_kernel, N_terms=grid.terms, grid=torus, fit=fit)
    context.write_json('diagrams.json', report)
    context.add_diagnostics([value.diagnostic for value in report.values() if value.diagnostic])
    headline = {}
    for value in report.values():
        headline[f'{value.name}_a'] = value.method_a if value.status == 'converged' else value.status
        headline[f'{value.name}_b'] = value.method_b if value.status == 'converged' else value.status
        if value.discrepancy is not None:
            headline[f'{value.name}_discrepancy'] = value.discrepancy
    prediction = pc_prediction(step_kernel, report)
    context.write_json('pc_prediction.json', prediction.model_dump(mode='json', exclude={'diagrams'}))
    headline['pc_prediction'] = prediction.value
    headline['pc_uncertainty'] = prediction.uncertainty
    return ExperimentOutput(headline=headline)


@experiment(requires=['kernel', 'simulation'])
def simulate(context: RunContext) -> ExperimentOutput:
    """Monte Carlo estimate of the two-point transform at the configured probes."""
    settings = context.config.simulation
    checkpoint = context.checkpoint('blocks')
    completed = {entry['block']: EstimatorTable.from_record(EstimatorTableRecord.model_validate(entry['table']))
                 for entry in checkpoint.load()}

    def save(block, table):
        checkpoint.append({'block': block, 'table': table.to_record().model_dump(mode='json')})

    with context.step('simulation'):
        table = estimate_two_point_transform(context.kernel, settings.p, settings.n_max, settings.probes,
                                             settings.replicas, context.config.seed, site_cap=settings.site_cap,
                                             block_size=settings.block_size, workers=settings.workers,
                                             completed=completed, on_block=save)
    context.write_json('estimator_table.json', table.to_record())
    write_two_point_csv(table, context.path('two_point.csv'))
    _truncation_diagnostic(context, table, 'simulate')
    z, err = table.z0()
    headline = {'replicas': table.replicas, 'truncated': table.truncated, 'z0_last': float(z[table.valid_until]),
                'z0_last_stderr': float(err[table.valid_until])}
    try:
        chi = estimate_susceptibility(table)
        headline.update(chi=chi.chi, chi_stderr=chi.stderr)
    except (CriticalityError, ParameterError) as e:
        headline['chi'] = f'not extrapolated: {e.message}'
    return ExperimentOutput(headline=headline)


@experiment(name='pc-search', requires=['kernel', 'search'])
def pc_search(context: RunContext) -> ExperimentOutput:
    """Bisection for the critical point on the growth slope of Z(0; n)."""
    search = context.config.search
    checkpoint = context.checkpoint('steps')
    known = [PcSearchStep.model_validate(entry) for entry in checkpoint.load()]
    with context.step('search'):
        result = find_pc(context.kernel, search.bracket, search.replicas, search.n_max, context.config.seed,
                         window=search.window, max_steps=search.max_steps, tolerance=search.tolerance,
                         site_cap=search.site_cap, workers=search.workers,
                         on_step=lambda step: checkpoint.append(step.model_dump(mode='json')), known_steps=known)
    context.write_json('pc_search.json', result)
    context.write_csv('pc_search.csv', ['p', 'slope', 'stderr'],
                      [(step.p, step.slope, step.stderr) for step in result.trajectory])
    context.add_diagnostics(result.diagnostics)
    return ExperimentOutput(headline={'p_c': result.p_c, 'uncertainty': result.uncertainty,
                                      'steps': len(result.trajectory)})


def _growth_source(source: str):
    if os.path.isdir(source):
        table_path = os.path.join(source, 'estimator_table.json')
        source = table_path if os.path.exists(table_path) else os.path.join(source, 'two_point.csv')
    if not os.path.exists(source):
        raise ConfigError(f'growth source {source} does not exist')
    if source.endswith('.json'):
        with open(source) as f:
            return EstimatorTable.from_record(EstimatorTableRecord.model_validate(json.load(f)))
    return source


def _analyze_growth(context: RunContext) -> ExperimentOutput:
    settings = context.config.analysis
    if not settings.source:
        raise ConfigError('growth analysis needs analysis.source')
    series = growth_series(_growth_source(settings.source))
    fit = fit_growth(series, settings.window, settings.epsilon)
    payload = {'series': series.model_dump(mode='json'), 'fit': fit.model_dump(mode='json')}
    try:
        payload['sensitivity'] = window_sensitivity(series).model_dump(mode='json')
    except FitError as e:
        context.add_diagnostics([Diagnostic(title='window sensitivity not available', kind='fit',
                                            source='analyze', items=[DiagnosticItem(name='reason', detail=e.message)])])
    context.write_json('growth_fit.json', payload)
    context.write_csv('growth.csv', ['x', 'y', 'yerr', 'model'],
                      [(n, z, err, float(fit.model(n)) if n > 0 else '') for n, z, err in
                       zip(series.n, series.z, series.err)])
    return ExperimentOutput(headline={'rate': fit.rate, 'rate_stderr': fit.rate_stderr, 'eta': fit.eta,
                                      'eta_stderr': fit.eta_stderr, 'prefactor': fit.prefactor})


def _analyze_sweep(context: RunContext) -> ExperimentOutput:
    settings, sweep = context.config.analysis, context.config.sweep
    if sweep is None or context.config.kernel is None:
        raise ConfigError('sweep analysis needs the kernel and sweep sections')
    checkpoint = context.checkpoint('sweep')
    points = {point.p: point for point in (SweepPoint.model_validate(entry) for entry in checkpoint.load())}
    run_settings = SweepSettings(n_max=sweep.n_max, replicas=sweep.replicas, seed=context.config.seed,
                                 margin=sweep.margin, site_cap=sweep.site_cap, workers=sweep.workers)
    with context.step('sweep'):
        for p in sweep.p_values:
            if p in points:
                continue
            logger.info('sweep point p=%s', p)
            points[p] = sweep_point(context.kernel, p, run_settings)
            checkpoint.append(points[p].model_dump(mode='json'))
    ordered = [points[p] for p in sweep.p_values]
    if any(point.truncated for point in ordered):
        context.truncated = True
    payload = {'points': [point.model_dump(mode='json') for point in ordered]}
    headline = {'points': len(ordered), 'subcritical': sum(point.subcritical for point in ordered)}
    fit = None
    if settings.p_c is not None:
        try:
            fit = exponent_fits(ordered, settings.p_c, settings.p_c_uncertainty)
            payload['exponents'] = fit.model_dump(mode='json')
            context.add_diagnostics(fit.diagnostics)
            headline.update(gamma=fit.gamma, gamma_stderr=fit.gamma_stderr, tau=fit.tau, tau_stderr=fit.tau_stderr)
        except FitError as e:
            context.add_diagnostics([Diagnostic(title='exponent fit failed', kind='fit', source='analyze',
                                                items=[DiagnosticItem(name='reason', detail=e.message)])])
    checks = [sandwich_check(point) for point in ordered if point.subcritical and point.rate is not None]
    payload['sandwich'] = [check.model_dump(mode='json') for check in checks]
    headline['sandwich_holds'] = all(check.holds for check in checks)
    context.write_json('sweep.json', payload)

    def model(point):
        if fit is None or point.p >= fit.p_c or point.chi is None:
            return ''
        anchor = min((pt for pt in ordered if pt.chi is not None and pt.p < fit.p_c), key=lambda pt: pt.p)
        return anchor.chi * ((fit.p_c - point.p) / (fit.p_c - anchor.p)) ** -fit.gamma

    context.write_csv('sweep.csv', ['x', 'y', 'yerr', 'model'],
                      [(point.p, point.chi if point.chi is not None else '',
                        point.chi_stderr if point.chi_stderr is not None else '', model(point)) for point in ordered])
    return ExperimentOutput(headline=headline)


def _analyze_limit_shape(context: RunContext) -> ExperimentOutput:
    shape = context.config.shape
    if shape is None or context.config.kernel is None:
        raise ConfigError('limit-shape analysis needs the kernel and shape sections')
    with context.step('limit shape'):
        if shape.surrogate:
            result = random_walk_shape(context.kernel, shape.k_values, shape.n_values, band=shape.band)
        else:
            result = fit_limit_shape(context.kernel, shape.p, shape.k_values, shape.n_values, shape.replicas,
                                     context.config.seed, band=shape.band, site_cap=shape.site_cap,
                                     workers=shape.workers)
    context.write_json('limit_shape.json', result)
    context.add_diagnostics(result.diagnostics)
    context.write_csv('limit_shape.csv', ['x', 'y', 'yerr', 'model'],
                      [(row.absk, row.ratio, row.err, row.model_ratio) for row in result.rows])
    return ExperimentOutput(headline={'c_hat': result.c_hat, 'c_stderr': result.c_stderr,
                                      'monotone': result.monotone, 'in_band': result.in_band, 'n0': result.n0})


@experiment(requires=['analysis'])
def analyze(context: RunContext) -> ExperimentOutput:
    """Growth, sweep-exponent and limit-shape fits."""
    mode = context.config.analysis.mode
    if mode == 'growth':
        return _analyze_growth(context)
    if mode == 'sweep':
        return _analyze_sweep(context)
    return _analyze_limit_shape(context)


@experiment(name='oracle-check', requires=['kernel', 'oracle'])
def oracle_check(context: RunContext) -> ExperimentOutput:
    """Exact enumeration oracles on a tiny kernel, against each other and against Monte Carlo."""
    oracle = context.config.oracle
    step_kernel = context.kernel
    with context.step('enumeration'):
        exact = exact_enumeration_two_point(step_kernel, oracle.p, oracle.n_small)
        expansion = verify_expansion_step(step_kernel, oracle.p, oracle.n_small)
        transfer = [generation_sizes_exact(step_kernel, oracle.p, n) for n in range(oracle.transfer_n + 1)]
    cross_check = max(abs(exact.total(n) - transfer[n].mean_size()) for n in range(min(oracle.n_small,
                                                                                          oracle.transfer_n) + 1))
    payload = {'expansion': expansion.model_dump(mode='json'), 'exact': exact.model_dump(mode='json'),
               'transfer_mean_sizes': [front.mean_size() for front in transfer],
               'enumeration_vs_transfer': cross_check}
    headline = {'expansion_residual': expansion.residual, 'enumeration_vs_transfer': cross_check}
    if oracle.mc_replicas:
        with context.step('monte carlo'):
            table = estimate_two_point_transform(step_kernel, oracle.p, oracle.transfer_n, [], oracle.mc_replicas,
                                                 context.config.seed)
        z, err = table.z0()
        deltas = []
        for n in range(oracle.transfer_n + 1):
            exact_z = transfer[n].mean_size()
            deltas.append({'n': n, 'monte_carlo': float(z[n]), 'stderr': float(err[n]), 'exact': exact_z,
                           'z_score': float((z[n] - exact_z) / err[n]) if err[n] > 0 else 0.0})
        payload['monte_carlo'] = deltas
        headline['max_abs_z_score'] = max(abs(delta['z_score']) for delta in deltas)
    context.write_json('oracle.json', payload)
    return ExperimentOutput(headline=headline)


@experiment(name='emit-plot', requires=['plot'])
def emit_plot(context: RunContext) -> ExperimentOutput:
    """Plot-ready CSV of a finished run."""
    plot = context.config.plot
    emit_plot_data(plot.run_dir, plot.tag, context.path(f'{plot.tag}.csv'))
    return ExperimentOutput(headline={'tag': plot.tag, 'source_run': plot.run_dir})
