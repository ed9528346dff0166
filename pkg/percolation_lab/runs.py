"""
Running an experiment: output directory, result files, checkpoints, the manifest of digests and the RunRecord.
"""
import csv
import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from enum import Enum
from functools import cached_property
from typing import Any, Optional

import pathspec
from pydantic import BaseModel

from percolation_lab.common import ResultModel, LabError, ResourceCapError, ConfigError
from percolation_lab.diagnostics import Diagnostic
from percolation_lab.experiments import ExperimentConfig, get_experiment
from percolation_lab.kernel import StepKernel, build_kernel
from percolation_lab.paths import run_directory

logger = logging.getLogger(__name__)

RECORD_FILE = 'run_record.json'
SUMMARY_FILE = 'summary.md'
CHECKPOINT_DIR = '.checkpoints'
IGNORE_FILE = '.labignore'
ALWAYS_EXCLUDED = [RECORD_FILE, SUMMARY_FILE, f'{CHECKPOINT_DIR}/', IGNORE_FILE]


class RunStatus(Enum):
    complete = 'complete'
    truncated = 'truncated'
    failed = 'failed'


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RESOURCE = 3
EXIT_NUMERICAL = 4


class ManifestEntry(ResultModel):
    path: str
    sha256: str
    size: int


class RunRecord(ResultModel):
    """
    Everything needed to re-execute a run and check its results.

    Attributes:
        config: the validated configuration the run executed
        manifest: digests of the result files, sorted by path
        timings: seconds spent in each named step
        headline: the experiment's headline numbers
    """
    schema_version: int = 1
    subcommand: str
    config: ExperimentConfig
    config_digest: str
    version: str
    output_dir: str
    started_at: datetime
    wall_seconds: float
    timings: dict[str, float] = {}
    manifest: list[ManifestEntry] = []
    status: RunStatus
    exit_code: int
    headline: dict[str, Any] = {}
    diagnostics: list[Diagnostic] = []
    error: Optional[str] = None

    @classmethod
    def load(cls, run_dir: str) -> 'RunRecord':
        path = os.path.join(run_dir, RECORD_FILE)
        if not os.path.exists(path):
            raise ConfigError(f'{run_dir} holds no {RECORD_FILE}')
        with open(path) as f:
            return cls.model_validate_json(f.read())

    def digests(self) -> dict[str, str]:
        return {entry.path: entry.sha256 for entry in self.manifest}


class Checkpoint:
    """
    An append-only JSON-lines file of completed work units. The first line names the config digest; a file written
    under another config is discarded.
    """

    def __init__(self, path: str, digest: str):
        self.path = path
        self.digest = digest

    def load(self) -> list[dict]:
        if not os.path.exists(self.path):
            return []
        with open(self.path) as f:
            lines = [line for line in f.read().splitlines() if line.strip()]
        if not lines or json.loads(lines[0]).get('config_digest') != self.digest:
            logger.warning('discarding checkpoint %s written under another config', self.path)
            os.remove(self.path)
            return []
        entries = []
        for line in lines[1:]:
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError:
                # a line cut short by an interruption
                break
        return entries

    def append(self, entry: dict):
        os.makedirs(os.path.dirname(self.path), exist_ok=True)
        fresh = not os.path.exists(self.path)
        with open(self.path, 'a') as f:
            if fresh:
                f.write(json.dumps({'config_digest': self.digest}) + '\n')
            f.write(json.dumps(entry) + '\n')
            f.flush()


class RunContext:
    """
    Handed to every experiment. Result files are written through it so that they carry the config digest.

    Attributes:
        config: the validated config
        output_dir: the run directory
        digest: the config digest
        diagnostics: numerical diagnostics collected during the run
        truncated: set by experiments when a site cap stopped replicas
    """

    def __init__(self, config: ExperimentConfig, output_dir: str):
        self.config = config
        self.output_dir = output_dir
        self.digest = config.digest()
        self.diagnostics: list[Diagnostic] = []
        self.timings: dict[str, float] = {}
        self.truncated = False

    @cached_property
    def kernel(self) -> StepKernel:
        if self.config.kernel is None:
            raise ConfigError(f'{self.config.subcommand} needs a kernel section')
        with self.step('kernel'):
            return build_kernel(self.config.kernel)

    @contextmanager
    def step(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - start

    def path(self, name: str) -> str:
        return os.path.join(self.output_dir, name)

    def write_json(self, name: str, payload: BaseModel | dict) -> str:
        data = payload.model_dump(mode='json') if isinstance(payload, BaseModel) else payload
        path = self.path(name)
        with open(path, 'w') as f:
            json.dump({'config_digest': self.digest, **data}, f, indent=2)
        return path

    def write_csv(self, name: str, header: list[str], rows) -> str:
        path = self.path(name)
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([repr(value) if isinstance(value, float) else value for value in row])
        return path

    def checkpoint(self, stream: str) -> Checkpoint:
        return Checkpoint(os.path.join(self.output_dir, CHECKPOINT_DIR, f'{stream}.jsonl'), self.digest)

    def add_diagnostics(self, diagnostics: list[Diagnostic]):
        self.diagnostics.extend(diagnostics)


def _ignore_spec(output_dir: str) -> pathspec.GitIgnoreSpec:
    lines = list(ALWAYS_EXCLUDED)
    ignore_path = os.path.join(output_dir, IGNORE_FILE)
    if os.path.exists(ignore_path):
        with open(ignore_path) as f:
            lines += f.readlines()
    return pathspec.GitIgnoreSpec.from_lines(lines)


def build_manifest(output_dir: str) -> list[ManifestEntry]:
    """SHA-256 digests of the run's result files; .labignore patterns and run bookkeeping are left out."""
    entries = []
    for relative in sorted(_ignore_spec(output_dir).match_tree_files(output_dir, negate=True)):
        digest = hashlib.sha256()
        with open(os.path.join(output_dir, relative), 'rb') as f:
            for chunk in iter(lambda: f.read(1 << 20), b''):
                digest.update(chunk)
        entries.append(ManifestEntry(path=relative.replace(os.sep, '/'), sha256=digest.hexdigest(),
                                     size=os.path.getsize(os.path.join(output_dir, relative))))
    return entries


def run(config: ExperimentConfig) -> RunRecord:
    """
    Executes the config's subcommand and writes the RunRecord, summary.md and the result files. Work recorded in
    checkpoints by an interrupted run with the same config is reused.
    """
    from percolation_lab import __version__
    from percolation_lab.reports import write_summary

    experiment = get_experiment(config.subcommand)
    experiment.check_config(config)
    output_dir = run_directory(config.subcommand, config.digest(), config.output_dir)
    os.makedirs(output_dir, exist_ok=True)
    context = RunContext(config, output_dir)
    started_at = datetime.now(timezone.utc)
    start = time.perf_counter()
    logger.info('running %s into %s', config.subcommand, output_dir)

    headline, narrative, error = {}, None, None
    try:
        output = experiment(context)
        headline, narrative = output.headline, output.narrative
        status = RunStatus.truncated if context.truncated else RunStatus.complete
        exit_code = EXIT_RESOURCE if context.truncated else EXIT_OK
    except ResourceCapError as e:
        logger.error('%s stopped at a resource cap: %s', config.subcommand, e.message)
        status, exit_code, error = RunStatus.truncated, e.exit_code, e.message
    except LabError as e:
        logger.error('%s failed: %s', config.subcommand, e.message)
        status, exit_code, error = RunStatus.failed, e.exit_code, e.message

    record = RunRecord(
        subcommand=config.subcommand,
        config=config,
        config_digest=context.digest,
        version=__version__,
        output_dir=output_dir,
        started_at=started_at,
        wall_seconds=time.perf_counter() - start,
        timings=context.timings,
        manifest=build_manifest(output_dir),
        status=status,
        exit_code=exit_code,
        headline=headline,
        diagnostics=context.diagnostics,
        error=error,
    )
    write_summary(record, narrative, os.path.join(output_dir, SUMMARY_FILE))
    with open(os.path.join(output_dir, RECORD_FILE), 'w') as f:
        f.write(record.model_dump_json(indent=2))
    return record


def reproduce(record: RunRecord, output_dir: str) -> dict[str, bool]:
    """
    Re-executes a recorded run into output_dir.
    :return: for every file of the original manifest, whether the new digest matches
    """
    rerun = run(record.config.model_copy(update={'output_dir': output_dir}))
    fresh = rerun.digests()
    return {path: fresh.get(path) == digest for path, digest in record.digests().items()}
