__all__ = [
    # kernel
    'KernelSpec',
    'StepKernel',
    'build_kernel',
    'kernel_moment',
    'sample_step',
    'dump_kernel',
    # spectral
    'TorusGrid',
    'SpectralField',
    'fourier_transform',
    'convolution_power',
    'heat_kernel_bound_report',
    'spectral_asymptotics',
    'shell_decomposition',
    'greens_function',
    'infrared_scan',
    'rw_limit_shape_oracle',
    'diagram_values',
    'pc_prediction',
    # percolation
    'BondFieldSampler',
    'ClusterTrace',
    'EstimatorTable',
    'build_bond_sampler',
    'grow_cluster',
    'estimate_two_point_transform',
    'estimate_susceptibility',
    'find_pc',
    'exact_enumeration_two_point',
    'verify_expansion_step',
    # analysis
    'GrowthFit',
    'ShapeFit',
    'fit_growth',
    'compute_kn',
    'fit_limit_shape',
    'exponent_fits',
    # runs
    'ExperimentConfig',
    'RunRecord',
    'run',
    'emit_plot_data',
    # errors
    'LabError',
    'Diagnostic',
    'DiagnosticItem',
]

from percolation_lab.common import LabError
from percolation_lab.diagnostics import Diagnostic, DiagnosticItem
from percolation_lab.kernel import KernelSpec, StepKernel, build_kernel, kernel_moment, sample_step, dump_kernel
from percolation_lab.spectral import (TorusGrid, SpectralField, fourier_transform, convolution_power,
                                      heat_kernel_bound_report, spectral_asymptotics, shell_decomposition,
                                      greens_function, infrared_scan, rw_limit_shape_oracle)
from percolation_lab.diagrams import diagram_values, pc_prediction
from percolation_lab.percolation import (BondFieldSampler, ClusterTrace, EstimatorTable, build_bond_sampler,
                                         grow_cluster, estimate_two_point_transform, estimate_susceptibility, find_pc)
from percolation_lab.enumeration import exact_enumeration_two_point, verify_expansion_step
from percolation_lab.analysis import GrowthFit, ShapeFit, fit_growth, compute_kn, fit_limit_shape, exponent_fits
from percolation_lab.experiments import ExperimentConfig
from percolation_lab.runs import RunRecord, run
from percolation_lab.plots import emit_plot_data

__version__ = '0.1.0'
