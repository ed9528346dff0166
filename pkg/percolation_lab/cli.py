import argparse
import json
import logging
import os
import sys
from typing import get_args

from dotenv import dotenv_values
from pydantic import ValidationError

from percolation_lab.common import LabError
from percolation_lab.experiments import (ExperimentConfig, SimulationSection, SearchSection, SweepSection,
                                         ShapeSection, OracleSection, Subcommand, apply_overrides)
from percolation_lab.paths import log_level
from percolation_lab.runs import run, EXIT_CONFIG

logger = logging.getLogger(__name__)

SUBCOMMANDS = list(get_args(Subcommand))

KERNEL_FLAGS = {'d': int, 'alpha': float, 'L': int, 'R': int, 'profile': str, 'tail_tol': float}
RUN_FLAGS = {'p': float, 'n_max': int, 'replicas': int, 'site_cap': int, 'workers': int}

SECTION_MODELS = {
    'simulation': SimulationSection,
    'search': SearchSection,
    'sweep': SweepSection,
    'shape': ShapeSection,
    'oracle': OracleSection,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='percolation-lab', description='long-range oriented percolation lab')
    subparsers = parser.add_subparsers(dest='subcommand', required=True)
    for name in SUBCOMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument('--config', type=str, help='JSON config file; flags override it')
        sub.add_argument('--seed', type=int)
        sub.add_argument('--output-dir', type=str)
        sub.add_argument('--log-level', type=str)
        sub.add_argument('--env-file', type=str, help='a .env file with PERCOLATION_LAB_* settings')
        sub.add_argument('--set', action='append', default=[], metavar='SECTION.FIELD=JSON',
                         help='override any config field')
        for flag, kind in KERNEL_FLAGS.items():
            sub.add_argument(f'--{flag.replace("_", "-")}', dest=f'kernel_{flag}', type=kind)
        for flag, kind in RUN_FLAGS.items():
            sub.add_argument(f'--{flag.replace("_", "-")}', dest=f'run_{flag}', type=kind)
        if name == 'analyze':
            sub.add_argument('--mode', choices=['growth', 'sweep', 'limit-shape'])
            sub.add_argument('--source', type=str)
        if name == 'emit-plot':
            sub.add_argument('--run-dir', type=str)
            sub.add_argument('--tag', type=str)
    return parser


def _run_section(subcommand: str, data: dict) -> str | None:
    """The section the generic run flags (--p, --n-max, ...) apply to."""
    if subcommand == 'analyze':
        mode = (data.get('analysis') or {}).get('mode')
        return {'sweep': 'sweep', 'limit-shape': 'shape'}.get(mode)
    return {'simulate': 'simulation', 'pc-search': 'search', 'oracle-check': 'oracle'}.get(subcommand)


def _parse_override(text: str) -> tuple[str, object]:
    if '=' not in text:
        raise ValueError(f'--set expects SECTION.FIELD=JSON, got {text!r}')
    path, raw = text.split('=', 1)
    try:
        return path.strip(), json.loads(raw)
    except json.JSONDecodeError:
        return path.strip(), raw


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config:
        with open(args.config) as f:
            data = json.load(f)
    data['subcommand'] = args.subcommand
    overrides = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.output_dir:
        overrides['output_dir'] = args.output_dir
    for flag in KERNEL_FLAGS:
        value = getattr(args, f'kernel_{flag}')
        if value is not None:
            overrides[f'kernel.{flag}'] = value
    if getattr(args, 'mode', None):
        overrides['analysis.mode'] = args.mode
    if getattr(args, 'source', None):
        overrides['analysis.source'] = args.source
    if getattr(args, 'run_dir', None):
        overrides['plot.run_dir'] = args.run_dir
    if getattr(args, 'tag', None):
        overrides['plot.tag'] = args.tag
    apply_overrides(data, overrides)

    section = _run_section(args.subcommand, data)
    run_overrides = {}
    for flag in RUN_FLAGS:
        value = getattr(args, f'run_{flag}')
        if value is None:
            continue
        if section is None or flag not in SECTION_MODELS[section].model_fields:
            raise ValueError(f'--{flag.replace("_", "-")} does not apply to {args.subcommand}')
        run_overrides[f'{section}.{flag}'] = value
    apply_overrides(data, run_overrides)
    apply_overrides(data, dict(_parse_override(text) for text in args.set))
    return ExperimentConfig.model_validate(data)


def _load_env_file(path: str):
    for key, value in dotenv_values(path).items():
        if value and key not in os.environ:
            os.environ[key] = value


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.env_file:
        _load_env_file(args.env_file)
    logging.basicConfig(level=(args.log_level or log_level()).upper(),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        config = build_config(args)
    except ValidationError as e:
        for error in e.errors():
            location = '.'.join(str(part) for part in error['loc'])
            print(f'config error at {location}: {error["msg"]}', file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as e:
        print(f'config error: {e}', file=sys.stderr)
        return EXIT_CONFIG
    try:
        record = run(config)
    except LabError as e:
        print(f'error: {e.message}', file=sys.stderr)
        return e.exit_code
    print(f'{record.subcommand} {record.status.value}: results in {record.output_dir}')
    for entry in record.manifest:
        print(f'  {entry.sha256[:16]}  {entry.path}')
    if record.error:
        print(f'error: {record.error}', file=sys.stderr)
    return record.exit_code


def entry():
    sys.exit(main())
