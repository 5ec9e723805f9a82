"""Running a cross product of experiment configs and seeds, and the comparison table."""
from __future__ import annotations

import copy
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from ..evalstat import ResultTable, build_result_table, read_results_csv, write_results_csv
from .config import ConfigError, ExperimentConfig, output_root
from .pipelines import FAILURE_MARKER, run_experiment

log = logging.getLogger(__name__)
SUITE_FILE = "suite.toml"


@dataclass(frozen=True)
class SuiteConfig:
    name: str
    experiments: tuple
    baseline: str
    n_seeds: int = 5

    def __post_init__(self):
        names = [e.name for e in self.experiments]
        if len(set(names)) != len(names):
            raise ConfigError(f"experiment names must be unique, got {names}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")
        base = [e for e in self.experiments if e.name == self.baseline]
        if not base:
            raise ConfigError(f"suite has no baseline experiment named {self.baseline!r}")
        if base[0].regime != "control":
            raise ConfigError("the baseline must be a control run (IL without RepL)")

    @property
    def suite_dir(self) -> Path:
        p = Path(self.name)
        return p if p.is_absolute() else output_root() / p

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        d = dict(d)
        unknown = set(d) - {"name", "baseline", "n_seeds", "defaults", "experiments"}
        if unknown:
            raise ConfigError(f"unknown suite keys {sorted(unknown)}")
        defaults = d.get("defaults", {})
        exps = []
        for raw in d.get("experiments", []):
            exps.append(ExperimentConfig.from_dict(_merge(defaults, raw)))
        if not exps:
            raise ConfigError("suite lists no experiments")
        baseline = d.get("baseline")
        if baseline is None:
            controls = [e.name for e in exps if e.regime == "control"]
            if not controls:
                raise ConfigError("suite needs a control (no RepL) experiment as its baseline")
            baseline = controls[0]
        return cls(d.get("name", "suite"), tuple(exps), baseline, d.get("n_seeds", 5))

    def to_dict(self) -> dict:
        return {"name": self.name, "baseline": self.baseline, "n_seeds": self.n_seeds,
                "experiments": [e.to_dict() for e in self.experiments]}

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(tomli_w.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SuiteConfig":
        return cls.from_dict(tomllib.loads(Path(path).read_text()))


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class SuiteResult:
    table: ResultTable
    records: list
    failures: list = field(default_factory=list)  # (experiment name, seed, error text)
    n_runs: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures


def _task_names(cfg: ExperimentConfig) -> list:
    return [cfg.task_name if s == "train" else f"{cfg.task_name}-test" for s in cfg.eval.splits]


def run_dir_for(suite_dir: Path, exp: ExperimentConfig, seed: int) -> Path:
    return suite_dir / exp.name / f"seed{seed}"


def run_suite(suite: SuiteConfig, n_seeds: Optional[int] = None,
              experiments: Optional[Sequence[ExperimentConfig]] = None) -> SuiteResult:
    """Run every experiment under seeds ``0..n_seeds-1``; a crashed run leaves its cell missing."""
    if n_seeds is not None:
        suite = replace(suite, n_seeds=n_seeds)
    n_seeds = suite.n_seeds
    experiments = suite.experiments if experiments is None else experiments
    suite_dir = suite.suite_dir
    suite.save(suite_dir / SUITE_FILE)
    records, failures, n_runs = [], [], 0
    for exp in experiments:
        exp_records, crashed = [], False
        for seed in range(n_seeds):
            cfg = exp.with_seed(seed, str(run_dir_for(suite_dir, exp, seed).resolve()))
            n_runs += 1
            log.info("running %s seed %d", exp.name, seed)
            try:
                exp_records.extend(run_experiment(cfg).results)
            except Exception as exc:  # the suite carries on; the marker file has the traceback
                log.error("%s seed %d failed: %s", exp.name, seed, exc)
                failures.append((exp.name, seed, f"{type(exc).__name__}: {exc}"))
                crashed = True
        if not crashed:
            records.extend(exp_records)
    write_results_csv(suite_dir / "results.csv", records)
    table = make_table(records, suite.baseline, _expected(suite, experiments))
    table.write(suite_dir)
    return SuiteResult(table, records, failures, n_runs)


def _expected(suite: SuiteConfig, experiments) -> list:
    return [(t, e.name) for e in experiments for t in _task_names(e)]


def make_table(records, baseline: str, expected) -> ResultTable:
    """Like :func:`build_result_table`, but a task whose baseline is missing gets an all-missing row."""
    have_base = {r.task for r in records if r.algorithm == baseline}
    kept = [r for r in records if r.task in have_base]
    table = build_result_table(kept, baseline, [(t, a) for t, a in expected if t in have_base])
    for task, alg in expected:
        if task not in have_base:
            if task not in table.tasks:
                table.tasks.append(task)
            if alg not in table.algorithms:
                table.algorithms.append(alg)
            table.cells[(task, alg)] = None
    for task in table.tasks:
        for alg in table.algorithms:
            table.cells.setdefault((task, alg), None)
    return table


def collect_suite_records(suite: SuiteConfig, suite_dir: Optional[Path] = None) -> tuple:
    """Re-read per-run results.csv files; runs with a failure marker or no results count as missing."""
    suite_dir = suite.suite_dir if suite_dir is None else Path(suite_dir)
    records, missing = [], []
    for exp in suite.experiments:
        exp_records, crashed = [], False
        for seed in range(suite.n_seeds):
            d = run_dir_for(suite_dir, exp, seed)
            if (d / FAILURE_MARKER).exists() or not (d / "results.csv").exists():
                crashed = True
                missing.append((exp.name, seed))
                continue
            exp_records.extend(read_results_csv(d / "results.csv"))
        if not crashed:
            records.extend(exp_records)
    return records, missing


def report_suite(suite_dir) -> tuple:
    """Rebuild table.md/table.csv from the run directories under a suite directory.

    Returns ``(table, missing runs)``.
    """
    suite_dir = Path(suite_dir)
    if not (suite_dir / SUITE_FILE).exists():
        raise FileNotFoundError(f"{suite_dir} has no {SUITE_FILE}; is it a suite output directory?")
    suite = SuiteConfig.load(suite_dir / SUITE_FILE)
    records, missing = collect_suite_records(suite, suite_dir)
    table = make_table(records, suite.baseline, _expected(suite, suite.experiments))
    table.write(suite_dir)
    return table, missing
