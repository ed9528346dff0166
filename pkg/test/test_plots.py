import csv

import pytest

from percolation_lab.common import PlotTagError, ConfigError
from percolation_lab.experiments import ExperimentConfig
from percolation_lab.plots import FIGURES, emit_plot_data
from percolation_lab.runs import RunStatus, run

BOX = {'d': 1, 'alpha': 2.0, 'L': 1, 'R': 1, 'profile': 'uniform_box'}


@pytest.fixture(scope='module')
def spectral_run(tmp_path_factory):
    output = tmp_path_factory.mktemp('spectral')
    record = run(ExperimentConfig(subcommand='spectral', kernel=BOX, output_dir=str(output),
                                  grid={'heat_n_max': 64}))
    assert record.status == RunStatus.complete
    return str(output)


def read_csv(path):
    with open(path, newline='') as f:
        return list(csv.reader(f))


def test_unknown_tag_lists_valid_tags(tmp_path, spectral_run):
    with pytest.raises(PlotTagError) as info:
        emit_plot_data(spectral_run, 'nope', str(tmp_path / 'out.csv'))
    assert info.value.valid_tags == ['growth', 'heat-kernel', 'limit-shape', 'pc-search', 'spectral']
    assert sorted(FIGURES) == info.value.valid_tags


def test_spectral_plot_columns(tmp_path, spectral_run, capsys):
    out = emit_plot_data(spectral_run, 'spectral', str(tmp_path / 'spectral.csv'))
    rows = read_csv(out)
    assert rows[0] == ['absk', 'one_minus_dhat', 'powerlaw_fit']
    assert len(rows) == 25
    absk, value, model = (float(v) for v in rows[1])
    assert value == pytest.approx(model, rel=1e-3)
    assert 'spectral.csv' in capsys.readouterr().out


def test_heat_kernel_plot_columns(tmp_path, spectral_run):
    rows = read_csv(emit_plot_data(spectral_run, 'heat-kernel', str(tmp_path / 'heat.csv')))
    assert rows[0] == ['n', 'sup_norm', 'scaled', 'wrap_mass', 'floor_share']
    assert rows[1][0] == '1'


def test_missing_result_file(tmp_path, spectral_run):
    with pytest.raises(ConfigError):
        emit_plot_data(spectral_run, 'pc-search', str(tmp_path / 'search.csv'))


def test_emit_plot_experiment(tmp_path, spectral_run):
    record = run(ExperimentConfig(subcommand='emit-plot', output_dir=str(tmp_path),
                                  plot={'run_dir': spectral_run, 'tag': 'spectral'}))
    assert record.status == RunStatus.complete
    assert list(record.digests()) == ['spectral.csv']


def test_plot_refuses_incomplete_run(tmp_path):
    failed = run(ExperimentConfig(subcommand='pc-formula', kernel=BOX, output_dir=str(tmp_path / 'failed')))
    assert failed.status == RunStatus.failed
    with pytest.raises(ConfigError):
        emit_plot_data(str(tmp_path / 'failed'), 'spectral', str(tmp_path / 'out.csv'))
