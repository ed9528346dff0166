import json
import os

import pytest

from percolation_lab import percolation
from percolation_lab.experiments import ExperimentConfig
from percolation_lab.runs import Checkpoint, RunRecord, RunStatus, run, reproduce

BOX = {'d': 1, 'alpha': 2.0, 'L': 1, 'R': 1, 'profile': 'uniform_box'}
SIMULATION = {'p': 0.9, 'n_max': 8, 'replicas': 64, 'block_size': 16, 'probes': [[0.5]]}


class Interrupted(Exception):
    pass


def config(subcommand, **sections) -> ExperimentConfig:
    return ExperimentConfig.model_validate({'subcommand': subcommand, 'kernel': BOX, 'seed': 7, **sections})


def test_kernel_run_writes_record_and_manifest(tmp_path):
    record = run(config('kernel', output_dir=str(tmp_path)))
    assert record.status == RunStatus.complete
    assert record.exit_code == 0
    assert [entry.path for entry in record.manifest] == ['kernel.csv', 'kernel.json', 'moments.json']
    assert os.path.exists(tmp_path / 'summary.md')
    assert RunRecord.load(str(tmp_path)).digests() == record.digests()
    with open(tmp_path / 'moments.json') as f:
        assert json.load(f)['config_digest'] == record.config_digest
    summary = (tmp_path / 'summary.md').read_text()
    assert '**complete**' in summary
    assert record.config_digest in summary


def test_runs_are_reproducible(tmp_path):
    first = run(config('simulate', simulation=SIMULATION, output_dir=str(tmp_path / 'first')))
    second = run(config('simulate', simulation=SIMULATION, output_dir=str(tmp_path / 'second')))
    assert first.digests() == second.digests()
    assert set(first.digests()) == {'estimator_table.json', 'two_point.csv'}
    assert all(reproduce(first, str(tmp_path / 'third')).values())


def test_default_run_directory(tmp_path, monkeypatch):
    monkeypatch.setenv('PERCOLATION_LAB_OUTPUT_ROOT', str(tmp_path))
    kernel_config = config('kernel')
    record = run(kernel_config)
    assert record.output_dir == os.path.join(str(tmp_path), f'kernel-{kernel_config.digest()[:12]}')


def test_labignore_excludes_files(tmp_path):
    tmp_path.joinpath('.labignore').write_text('kernel.csv\n')
    record = run(config('kernel', output_dir=str(tmp_path)))
    assert [entry.path for entry in record.manifest] == ['kernel.json', 'moments.json']


def test_interrupted_simulation_resumes(tmp_path, monkeypatch):
    straight = run(config('simulate', simulation=SIMULATION, output_dir=str(tmp_path / 'straight')))

    calls = []
    original = percolation.simulate_block

    def flaky(*args):
        calls.append(args[1])
        if len(calls) == 3:
            raise Interrupted()
        return original(*args)

    monkeypatch.setattr(percolation, 'simulate_block', flaky)
    resumed_config = config('simulate', simulation=SIMULATION, output_dir=str(tmp_path / 'resumed'))
    with pytest.raises(Interrupted):
        run(resumed_config)
    checkpoint = Checkpoint(str(tmp_path / 'resumed' / '.checkpoints' / 'blocks.jsonl'), resumed_config.digest())
    assert [entry['block'] for entry in checkpoint.load()] == [0, 1]

    monkeypatch.undo()
    resumed = run(resumed_config)
    assert resumed.digests() == straight.digests()


def test_checkpoint_from_other_config_is_discarded(tmp_path):
    path = str(tmp_path / 'steps.jsonl')
    Checkpoint(path, 'a').append({'x': 1})
    Checkpoint(path, 'a').append({'x': 2})
    assert Checkpoint(path, 'a').load() == [{'x': 1}, {'x': 2}]
    with open(path, 'a') as f:
        f.write('{"x": 3')
    assert Checkpoint(path, 'a').load() == [{'x': 1}, {'x': 2}]
    assert Checkpoint(path, 'b').load() == []
    assert not os.path.exists(path)


def test_parameter_error_fails_with_config_exit_code(tmp_path):
    record = run(config('simulate', simulation={**SIMULATION, 'p': 3.5}, output_dir=str(tmp_path)))
    assert record.status == RunStatus.failed
    assert record.exit_code == 2
    assert 'p=3.5' in record.error


def test_site_cap_truncates_run(tmp_path):
    simulation = {'p': 2.9, 'n_max': 10, 'replicas': 16, 'site_cap': 2}
    record = run(config('simulate', simulation=simulation, output_dir=str(tmp_path)))
    assert record.status == RunStatus.truncated
    assert record.exit_code == 3
    assert record.diagnostics[0].kind == 'truncation'


def test_divergent_expansion_fails_with_numerical_exit_code(tmp_path):
    record = run(config('pc-formula', output_dir=str(tmp_path)))
    assert record.status == RunStatus.failed
    assert record.exit_code == 4
    assert 'diagrams.json' in record.digests()


def test_oracle_check_run(tmp_path):
    record = run(config('oracle-check', oracle={'p': 0.6, 'mc_replicas': 2000}, output_dir=str(tmp_path)))
    assert record.status == RunStatus.complete
    assert record.headline['expansion_residual'] <= 1e-12
    assert record.headline['enumeration_vs_transfer'] <= 1e-12
    assert record.headline['max_abs_z_score'] < 5


def test_growth_analysis_of_simulation(tmp_path):
    simulation = {'p': 1.0, 'n_max': 20, 'replicas': 2000}
    simulated = run(config('simulate', simulation=simulation, output_dir=str(tmp_path / 'sim')))
    analysis = {'mode': 'growth', 'source': simulated.output_dir}
    record = run(config('analyze', analysis=analysis, output_dir=str(tmp_path / 'growth')))
    assert record.status == RunStatus.complete
    assert record.headline['rate'] > 0
    assert set(record.digests()) == {'growth_fit.json', 'growth.csv'}


def test_surrogate_limit_shape_analysis(tmp_path):
    shape = {'n_values': [16, 64, 256], 'surrogate': True}
    record = run(config('analyze', analysis={'mode': 'limit-shape'}, shape=shape, output_dir=str(tmp_path)))
    assert record.status == RunStatus.complete
    assert record.headline['in_band']
    assert record.headline['monotone']
