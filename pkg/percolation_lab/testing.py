import os

from dotenv import dotenv_values

from percolation_lab.experiments import ExperimentConfig
from percolation_lab.runs import RunRecord, run


class ExperimentTestContext:
    """
    This is a context manager to make it simpler to run experiments in tests.
    """

    def __init__(self, output_dir: str, env_values: dict | None = None, env_file: str | None = None):
        """
        :param output_dir: directory under which each run gets its own folder
        :param env_values: values to set in the environment
        :param env_file: file from which to load environment variables
        """
        self.output_dir = output_dir
        self._initial_env = os.environ.copy()
        self._settings = _load_settings(env_values, env_file)

    def __enter__(self):
        for k, v in self._settings.items():
            if v:
                os.environ[k] = v
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        os.environ.clear()
        os.environ.update(self._initial_env)

    def run(self, config: ExperimentConfig | dict, name: str | None = None) -> RunRecord:
        """
        Runs a config in-process.
        :param config: an ExperimentConfig or its dict form
        :param name: folder for the run inside output_dir; the subcommand by default
        """
        if isinstance(config, dict):
            config = ExperimentConfig.model_validate(config)
        target = os.path.join(self.output_dir, name or config.subcommand)
        return run(config.model_copy(update={'output_dir': target}))


def _load_settings(env_values, env_file) -> dict:
    if not env_values:
        env_values = {}
    if not env_file:
        return env_values
    env_from_file = dotenv_values(env_file)
    return env_from_file | env_values
