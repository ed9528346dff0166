import json
from typing import get_args

from percolation_lab.cli import main, build_parser
from percolation_lab.experiments import Subcommand
from percolation_lab.runs import RunRecord

BOX_FLAGS = ['--d', '1', '--alpha', '2', '--L', '1', '--R', '1', '--profile', 'uniform_box']


def test_kernel_subcommand(tmp_path, capsys):
    assert main(['kernel', *BOX_FLAGS, '--output-dir', str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert 'kernel complete' in out
    assert 'kernel.csv' in out


def test_field_level_validation_errors(tmp_path, capsys):
    code = main(['kernel', '--d', '1', '--alpha', '-1', '--L', '1', '--R', '1', '--output-dir', str(tmp_path)])
    assert code == 2
    assert 'kernel.alpha' in capsys.readouterr().err


def test_run_flag_must_apply(tmp_path, capsys):
    assert main(['kernel', *BOX_FLAGS, '--p', '0.5', '--output-dir', str(tmp_path)]) == 2
    assert '--p' in capsys.readouterr().err


def test_config_file_with_overrides(tmp_path):
    config_path = tmp_path / 'simulate.json'
    config_path.write_text(json.dumps({
        'kernel': {'d': 1, 'alpha': 2.0, 'L': 1, 'R': 1, 'profile': 'uniform_box'},
        'simulation': {'p': 0.5, 'n_max': 4, 'replicas': 8},
    }))
    out_dir = tmp_path / 'run'
    code = main(['simulate', '--config', str(config_path), '--p', '0.7', '--seed', '11',
                 '--set', 'simulation.probes=[[0.5]]', '--output-dir', str(out_dir)])
    assert code == 0
    record = RunRecord.load(str(out_dir))
    assert record.config.simulation.p == 0.7
    assert record.config.simulation.probes == [[0.5]]
    assert record.config.seed == 11


def test_numerical_failure_exit_code(tmp_path):
    assert main(['pc-formula', *BOX_FLAGS, '--output-dir', str(tmp_path)]) == 4


def test_env_file(tmp_path, monkeypatch):
    monkeypatch.setenv('PERCOLATION_LAB_MAX_SUPPORT', '1')
    monkeypatch.delenv('PERCOLATION_LAB_MAX_SUPPORT')
    env_path = tmp_path / 'lab.env'
    env_path.write_text('PERCOLATION_LAB_MAX_SUPPORT=4\n')
    code = main(['kernel', *BOX_FLAGS, '--env-file', str(env_path), '--output-dir', str(tmp_path / 'run')])
    assert code == 3


def test_parser_offers_every_subcommand():
    subparsers = next(action for action in build_parser()._actions if action.dest == 'subcommand')
    assert list(subparsers.choices) == list(get_args(Subcommand))
