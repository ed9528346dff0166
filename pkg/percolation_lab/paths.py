import os

DEFAULT_OUTPUT_ROOT = 'runs'


def output_root() -> str:
    """
    Where runs go when their config names no output directory: PERCOLATION_LAB_OUTPUT_ROOT, or runs/ under the
    working directory.
    """
    return os.environ.get('PERCOLATION_LAB_OUTPUT_ROOT') or DEFAULT_OUTPUT_ROOT


def run_directory(subcommand: str, digest: str, output_dir: str | None = None) -> str:
    """
    :param output_dir: an explicit directory from the config, used as-is
    :return: output_dir, or <output root>/<subcommand>-<first 12 digest characters>
    """
    if output_dir:
        return output_dir
    return os.path.join(output_root(), f'{subcommand}-{digest[:12]}')


def template_path(filename: str) -> str:
    """Path of a template shipped inside the package."""
    return os.path.join(os.path.dirname(__file__), 'templates', filename)


def log_level() -> str:
    return (os.environ.get('PERCOLATION_LAB_LOG_LEVEL') or 'INFO').upper()
