"""Experiment files, replication sweeps, CSV output and summary aggregation."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .gep import GepProblem, load_instance
from .mdp import ContractError
from .oracle import backward_induction, build_tree, percent_gap, simulate_policy
from .qlearn import RunConfig, extract_policy, run

log = logging.getLogger(__name__)

SWEEP_AXES = ("sampler", "epsilon", "epsilon_pairs", "iterations", "samples", "reeval_every")
_RUN_KEYS = {f.name for f in fields(RunConfig)}
_TOP_KEYS = {"dataset", "run", "oracle", "sweep", "replications", "base_seed"}


class ConfigError(ValueError):
    """Bad experiment file; the message carries ``path:line`` when known."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path, self.line = path, line
        where = path or "<config>"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class OracleSettings:
    grid_step: float = 0.5
    shares_step: float = 0.25


@dataclass(frozen=True)
class ExperimentSpec:
    run: RunConfig = field(default_factory=RunConfig)
    dataset: str | None = None
    oracle: OracleSettings = field(default_factory=OracleSettings)
    sweep: dict = field(default_factory=dict)
    replications: int = 1
    base_seed: int = 0

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "run": self.run.to_dict(),
                "oracle": {"grid_step": self.oracle.grid_step,
                           "shares_step": self.oracle.shares_step},
                "sweep": self.sweep, "replications": self.replications,
                "base_seed": self.base_seed}

    def cells(self) -> list[dict]:
        """Override dicts, one per sweep cell, in axis order."""
        axes = [(name, self.sweep[name]) for name in SWEEP_AXES if name in self.sweep]
        out = []
        for combo in itertools.product(*(vals for _, vals in axes)):
            cell = {}
            for (name, _), value in zip(axes, combo):
                if name == "epsilon_pairs":
                    cell["epsilon_initial"], cell["epsilon_final"] = value
                else:
                    cell[name] = value
            out.append(cell)
        return out


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_experiment(text: str, source: str | None = None, overrides: dict | None = None) -> ExperimentSpec:
    """Parse a JSON experiment file; ``overrides`` (flag values) win over file values."""
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, source, exc.lineno) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", source, 1)
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key '{key}'", source, _line_of(text, key))
    run_raw = raw.get("run", {})
    if not isinstance(run_raw, dict):
        raise ConfigError("'run' must be an object", source, _line_of(text, "run"))
    for key in run_raw:
        if key not in _RUN_KEYS:
            raise ConfigError(f"unknown run setting '{key}'", source, _line_of(text, key))
    merged = dict(run_raw)
    overrides = dict(overrides or {})
    dataset = overrides.pop("dataset", None) or raw.get("dataset")
    replications = overrides.pop("replications", None) or raw.get("replications", 1)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = RunConfig(**merged)
    except (ContractError, TypeError) as exc:
        raise ConfigError(str(exc), source) from None
    oracle_raw = raw.get("oracle", {})
    try:
        oracle = OracleSettings(**oracle_raw)
    except TypeError as exc:
        raise ConfigError(f"bad oracle settings: {exc}", source, _line_of(text, "oracle")) from None
    sweep = raw.get("sweep", {})
    if not isinstance(sweep, dict):
        raise ConfigError("'sweep' must be an object", source, _line_of(text, "sweep"))
    for name, values in sweep.items():
        if name not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis '{name}'", source, _line_of(text, name))
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep axis '{name}' must be a non-empty list", source,
                              _line_of(text, name))
    if not isinstance(replications, int) or replications < 1:
        raise ConfigError("replications must be an integer >= 1", source, _line_of(text, "replications"))
    base_seed = raw.get("base_seed", 0)
    if not isinstance(base_seed, int):
        raise ConfigError("base_seed must be an integer", source, _line_of(text, "base_seed"))
    return ExperimentSpec(config, dataset, oracle, sweep, replications, base_seed)


def load_experiment(path: str | Path | None, overrides: dict | None = None) -> ExperimentSpec:
    if path is None:
        return parse_experiment("", None, overrides)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_experiment(text, str(path), overrides)


# --- CSV output ------------------------------------------------------------

def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: list[str], rows, config) -> Path:
    """Header row preceded by a ``#`` line with tool version and config hash."""
    buf = io.StringIO()
    buf.write(f"# adpqis {__version__} config_sha256={config_hash(config)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        return [], []
    return rows[0], rows[1:]


# --- sweeps ------------------------------------------------------------------

SUMMARY_HEADER = ["cell", "algorithm", "parameters", "replication", "seed", "status",
                  "percent_gap", "policy_cost", "stage1_shares"]
TIMING_HEADER = ["cell", "replication", "sampling_s", "evaluation_s", "other_s"]


@dataclass
class SummaryRow:
    cell: int
    algorithm: str
    parameters: str
    replication: int
    seed: int
    status: str = "ok"
    percent_gap: float = math.nan
    policy_cost: float = math.nan
    stage1_shares: str = ""
    timing: dict = field(default_factory=dict)

    def csv_row(self) -> list:
        return [self.cell, self.algorithm, self.parameters, self.replication, self.seed,
                self.status, self.percent_gap, self.policy_cost, self.stage1_shares]


def _run_job(job) -> SummaryRow:
    cell_id, rep, seed, cell, config, dataset, oracle, oracle_cost = job
    params = json.dumps(cell, sort_keys=True)
    row = SummaryRow(cell_id, config.sampler, params, rep, seed)
    try:
        instance = load_instance(dataset)
        problem = GepProblem(instance)
        result = run(problem, config)
        policy = extract_policy(result.approximations, config.resolution, config.refine_steps)
        tree = build_tree(instance, oracle.grid_step)
        cost = simulate_policy(instance, tree, policy)
        row.policy_cost = cost
        row.percent_gap = percent_gap(cost, oracle_cost)
        row.stage1_shares = " ".join(repr(float(x)) for x in policy(1, problem.initial_state()))
        row.timing = result.report.timing
    except Exception as exc:  # recorded per row; the sweep continues
        row.status = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    return row


def sweep_jobs(spec: ExperimentSpec, oracle_cost: float) -> list:
    jobs = []
    for cell_id, cell in enumerate(spec.cells()):
        for rep in range(spec.replications):
            seed = spec.base_seed + rep
            try:
                config = replace(spec.run, **cell, seed=seed)
            except ContractError as exc:
                jobs.append((cell_id, rep, seed, cell, exc))
                continue
            jobs.append((cell_id, rep, seed, cell, config, spec.dataset, spec.oracle, oracle_cost))
    return jobs


def run_sweep(spec: ExperimentSpec, jobs: int = 1) -> tuple[float, list[SummaryRow]]:
    """Every cell x replication; rows come back sorted by (cell, replication)."""
    instance = load_instance(spec.dataset)
    tree = build_tree(instance, spec.oracle.grid_step)
    oracle_cost = backward_induction(instance, tree, spec.oracle.shares_step).cost
    todo = sweep_jobs(spec, oracle_cost)
    rows: list[SummaryRow] = []
    runnable = []
    for job in todo:
        if isinstance(job[4], Exception):
            cell_id, rep, seed, cell, exc = job
            algo = cell.get("sampler", spec.run.sampler)
            rows.append(SummaryRow(cell_id, algo, json.dumps(cell, sort_keys=True), rep, seed,
                                   status=f"error: {exc}"))
        else:
            runnable.append(job)
    if jobs > 1 and len(runnable) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows.extend(pool.map(_run_job, runnable))
    else:
        rows.extend(_run_job(j) for j in runnable)
    rows.sort(key=lambda r: (r.cell, r.replication))
    return oracle_cost, rows


# --- aggregation ---------------------------------------------------------------

AGGREGATE_HEADER = ["cell", "algorithm", "parameters", "n", "min", "p05", "q25", "median",
                    "q75", "p95", "max"]


@dataclass(frozen=True)
class CellStats:
    n: int
    min: float
    p05: float
    q25: float
    median: float
    q75: float
    p95: float
    max: float

    @property
    def iqr(self) -> float:
        return self.q75 - self.q25


def describe(values) -> CellStats:
    """Min/max, quartiles, 5-95 whiskers and median (mean of the middle pair if even)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    p05, q25, med, q75, p95 = np.percentile(v, [5, 25, 50, 75, 95])
    return CellStats(int(v.size), float(v.min()), float(p05), float(q25), float(med), float(q75),
                     float(p95), float(v.max()))


def aggregate(header: list[str], rows: list[list[str]]):
    """Group ok rows by cell. Returns ``(stats rows, malformed count)``."""
    need = ("cell", "algorithm", "parameters", "status", "percent_gap")
    if any(h not in header for h in need):
        raise ValueError(f"summary is missing columns: {[h for h in need if h not in header]}")
    idx = {h: header.index(h) for h in need}
    groups: dict[int, tuple[str, str, list[float]]] = {}
    malformed = 0
    for row in rows:
        try:
            if len(row) != len(header):
                raise ValueError
            if row[idx["status"]] != "ok":
                continue
            cell = int(row[idx["cell"]])
            gap = float(row[idx["percent_gap"]])
            if not math.isfinite(gap):
                raise ValueError
        except ValueError:
            malformed += 1
            continue
        algo, params = row[idx["algorithm"]], row[idx["parameters"]]
        groups.setdefault(cell, (algo, params, []))[2].append(gap)
    out = []
    for cell in sorted(groups):
        algo, params, gaps = groups[cell]
        out.append((cell, algo, params, describe(gaps)))
    return out, malformed
