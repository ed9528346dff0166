import os

from percolation_lab.runs import RunStatus
from percolation_lab.testing import ExperimentTestContext

BOX_KERNEL = {'subcommand': 'kernel', 'kernel': {'d': 1, 'alpha': 2.0, 'L': 1, 'R': 1, 'profile': 'uniform_box'}}

# doubling R for the moment diagnostic needs 5 sites


def test_harness(tmp_path):
    with ExperimentTestContext(str(tmp_path), {'PERCOLATION_LAB_MAX_SUPPORT': '4'}) as ctx:
        record = ctx.run(BOX_KERNEL)
        assert os.environ['PERCOLATION_LAB_MAX_SUPPORT'] == '4'
    assert record.status == RunStatus.truncated
    assert record.exit_code == 3
    assert record.output_dir == os.path.join(str(tmp_path), 'kernel')
    assert 'PERCOLATION_LAB_MAX_SUPPORT' not in os.environ


def test_harness_file(tmp_path):
    env_path = os.path.join(os.path.dirname(__file__), 'test.env')
    with ExperimentTestContext(str(tmp_path), env_file=env_path) as ctx:
        record = ctx.run(BOX_KERNEL, name='from_file')
    assert record.exit_code == 3


def test_harness_file_override(tmp_path):
    env_path = os.path.join(os.path.dirname(__file__), 'test.env')
    with ExperimentTestContext(str(tmp_path), env_values={'PERCOLATION_LAB_MAX_SUPPORT': '1000'},
                               env_file=env_path) as ctx:
        record = ctx.run(BOX_KERNEL)
    assert record.status == RunStatus.complete
    assert record.headline['support_size'] == 3
