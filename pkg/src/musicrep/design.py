"""Sequential experimental design over (strategy, source subset) cells.

The run pool crosses the five multi-source strategies with every source
subset of size 2..7 (1,230 cells). Runs are generated in three phases:
single-source cells replicated, all-source cells replicated, then a greedy
sequence that at each step first minimizes design unbalance and then the
maximum absolute aliasing between main effects, breaking remaining ties at
random.

Aliasing between two effects is measured as the absolute Pearson
correlation between their model-matrix columns (strategy deviation
contrasts, +/-1 source indicators, source count as a centered covariate);
columns of the same factor are not compared against each other.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import SOURCES, SSR, STRATEGIES

PHASE3_POOL_SIZE = 1230
ALIAS_TIE_DECIMALS = 9

DESIGN_HEADER = ["run_id", "strategy"] + list(SOURCES) + ["n", "phase", "seed"]


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentalRun:
    strategy: str
    flags: tuple

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise DesignError(f"unknown strategy {self.strategy!r}")
        flags = tuple(int(f) for f in self.flags)
        if len(flags) != len(SOURCES) or any(f not in (0, 1) for f in flags):
            raise DesignError("flags must be 8 binary source indicators")
        object.__setattr__(self, "flags", flags)
        n = sum(flags)
        if self.strategy == SSR and n != 1:
            raise DesignError("ss-r runs include exactly one source")
        if self.strategy != SSR and not 2 <= n <= 8:
            raise DesignError("multi-source runs include 2..8 sources")

    @property
    def n(self) -> int:
        return sum(self.flags)

    @property
    def sources(self) -> tuple:
        return tuple(s for s, f in zip(SOURCES, self.flags) if f)


def run_from_sources(strategy: str, sources) -> ExperimentalRun:
    wanted = set(sources)
    return ExperimentalRun(strategy=strategy, flags=tuple(int(s in wanted) for s in SOURCES))


def phase1_runs() -> list:
    return [run_from_sources(SSR, (source,)) for source in SOURCES]


def phase2_runs() -> list:
    return [run_from_sources(strategy, SOURCES) for strategy in STRATEGIES[1:]]


def enumerate_pool() -> list:
    """All 1,230 phase-3 cells: 5 strategies x source subsets of size 2..7."""
    pool = []
    for strategy in STRATEGIES[1:]:
        for size in range(2, 8):
            for combo in itertools.combinations(SOURCES, size):
                pool.append(run_from_sources(strategy, combo))
    return pool


# Factor level tables: strategy levels, two levels per source flag, n in 1..8.
_FACTORS = [("strategy", list(STRATEGIES))] + [
    (source, [0, 1]) for source in SOURCES
] + [("n", list(range(1, 9)))]

_LEVEL_SLICES = {}
_TOTAL_LEVELS = 0
for _name, _levels in _FACTORS:
    _LEVEL_SLICES[_name] = slice(_TOTAL_LEVELS, _TOTAL_LEVELS + len(_levels))
    _TOTAL_LEVELS += len(_levels)


def _level_vector(run: ExperimentalRun) -> np.ndarray:
    vec = np.zeros(_TOTAL_LEVELS, dtype=np.int32)
    vec[_LEVEL_SLICES["strategy"].start + STRATEGIES.index(run.strategy)] = 1
    for source, flag in zip(SOURCES, run.flags):
        vec[_LEVEL_SLICES[source].start + flag] = 1
    vec[_LEVEL_SLICES["n"].start + run.n - 1] = 1
    return vec


def _level_counts(runs) -> np.ndarray:
    counts = np.zeros(_TOTAL_LEVELS, dtype=np.int64)
    for run in runs:
        counts += _level_vector(run)
    return counts


def unbalance(design, pool=None, per_factor: bool = False):
    """Maximum spread in observation counts across the levels of any factor.

    Levels exhausted in `pool` (no remaining run carries them) are ignored,
    matching the sequential setting where they can no longer be evened out.
    With pool=None all levels count.
    """
    counts = _level_counts(design)
    active = np.ones(_TOTAL_LEVELS, dtype=bool)
    if pool is not None:
        active = _level_counts(pool) > 0
    spreads = {}
    for name, _levels in _FACTORS:
        sl = _LEVEL_SLICES[name]
        mask = active[sl]
        if not mask.any():
            spreads[name] = 0
            continue
        values = counts[sl][mask]
        spreads[name] = int(values.max() - values.min())
    if per_factor:
        return spreads
    return max(spreads.values()) if spreads else 0


def _strategy_contrasts(strategy: str, coding_levels) -> list:
    # Deviation (sum-to-zero) coding with the last level as reference.
    reference = coding_levels[-1]
    row = []
    for level in coding_levels[:-1]:
        if strategy == level:
            row.append(1.0)
        elif strategy == reference:
            row.append(-1.0)
        else:
            row.append(0.0)
    return row


def model_columns(design, ssr_mode: str = "include"):
    """Raw main-effect columns and their factor group labels.

    ssr_mode="include" codes strategy over all six levels using every run;
    "exclude" drops ss-r runs and codes over the five multi-source levels.
    """
    if ssr_mode not in ("include", "exclude"):
        raise DesignError("ssr_mode must be 'include' or 'exclude'")
    runs = list(design)
    coding_levels = list(STRATEGIES)
    if ssr_mode == "exclude":
        runs = [r for r in runs if r.strategy != SSR]
        coding_levels = [s for s in STRATEGIES if s != SSR]
    if len(runs) < 2:
        raise DesignError("need at least two runs for an alias computation")
    columns, groups = [], []
    for run in runs:
        row = _strategy_contrasts(run.strategy, coding_levels)
        row.extend(2.0 * f - 1.0 for f in run.flags)
        row.append(float(run.n))
        columns.append(row)
    labels = [f"strategy[{level}]" for level in coding_levels[:-1]] + list(SOURCES) + ["n"]
    groups = ["strategy"] * (len(coding_levels) - 1) + list(SOURCES) + ["n"]
    return np.array(columns), labels, groups


@dataclass
class AliasResult:
    matrix: np.ndarray
    labels: list
    groups: list
    max_alias: float
    dropped: list = field(default_factory=list)


def alias_from_columns(columns: np.ndarray, labels, groups) -> AliasResult:
    """Absolute correlation between effect columns; same-factor pairs and
    constant (dropped) columns are excluded from the max."""
    columns = np.asarray(columns, dtype=np.float64)
    if columns.ndim != 2 or columns.shape[0] < 2:
        raise DesignError("need a (runs, effects) matrix with >= 2 runs")
    centered = columns - columns.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    constant = norms <= 1e-12
    dropped = [labels[i] for i in np.flatnonzero(constant)]
    safe = np.where(constant, 1.0, norms)
    corr = np.abs((centered / safe).T @ (centered / safe))
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, 0.0)
    cross = _cross_factor_mask(groups)
    max_alias = float(corr[cross].max()) if cross.any() else 0.0
    return AliasResult(matrix=corr, labels=list(labels), groups=list(groups), max_alias=max_alias, dropped=dropped)


def alias_matrix(design, ssr_mode: str = "include") -> AliasResult:
    columns, labels, groups = model_columns(design, ssr_mode=ssr_mode)
    return alias_from_columns(columns, labels, groups)


@dataclass
class DesignState:
    executed: list
    pool: list

    def __post_init__(self) -> None:
        if len(set(self.pool)) != len(self.pool):
            raise DesignError("pool contains duplicate cells")


def _cross_factor_mask(groups) -> np.ndarray:
    k = len(groups)
    mask = np.zeros((k, k), dtype=bool)
    for i in range(k):
        for j in range(i + 1, k):
            if groups[i] != groups[j]:
                mask[i, j] = True
    return mask


def _max_alias_with_candidate(base_columns, candidate_row, cross_mask) -> float:
    columns = np.vstack([base_columns, candidate_row])
    centered = columns - columns.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    constant = norms <= 1e-12
    safe = np.where(constant, 1.0, norms)
    corr = np.abs((centered / safe).T @ (centered / safe))
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    return float(corr[cross_mask].max()) if cross_mask.any() else 0.0


def next_run(state: DesignState, rng) -> ExperimentalRun:
    """Greedy Algorithm: min-unbalance candidates, then min-alias, then random."""
    if not state.pool:
        raise DesignError("experimental pool is exhausted")
    pool_counts = _level_counts(state.pool)
    base_counts = _level_counts(state.executed)
    onehots = np.stack([_level_vector(run) for run in state.pool])
    augmented = base_counts[None, :] + onehots
    # A level is exhausted for a candidate once the pool minus that candidate
    # no longer contains it.
    active = (pool_counts[None, :] - onehots) > 0

    high_sentinel = np.int64(2**62)
    factor_spreads = np.zeros((len(state.pool), len(_FACTORS)), dtype=np.int64)
    for f_idx, (name, _levels) in enumerate(_FACTORS):
        sl = _LEVEL_SLICES[name]
        act = active[:, sl]
        vals = augmented[:, sl]
        hi = np.where(act, vals, np.int64(-1)).max(axis=1)
        lo = np.where(act, vals, high_sentinel).min(axis=1)
        factor_spreads[:, f_idx] = np.where(act.any(axis=1), hi - lo, 0)
    unbalances = factor_spreads.max(axis=1)
    best_unbalance = int(unbalances.min())
    candidate_idx = np.flatnonzero(unbalances == best_unbalance)

    # Alias-minimizing subset among the balance-optimal candidates.
    all_columns, _labels, groups = model_columns(state.executed + state.pool, ssr_mode="include")
    base_columns = all_columns[: len(state.executed)]
    pool_columns = all_columns[len(state.executed) :]
    cross_mask = _cross_factor_mask(groups)
    alias_scores = np.array(
        [
            round(_max_alias_with_candidate(base_columns, pool_columns[i], cross_mask), ALIAS_TIE_DECIMALS)
            for i in candidate_idx
        ]
    )
    best_alias = alias_scores.min()
    tied = candidate_idx[np.flatnonzero(alias_scores == best_alias)]
    chosen_idx = int(tied[int(rng.integers(len(tied)))])
    chosen = state.pool[chosen_idx]

    check = unbalance(state.executed + [chosen], pool=[r for i, r in enumerate(state.pool) if i != chosen_idx])
    if check > best_unbalance:
        raise DesignError("greedy step exceeded the pool-minimum unbalance")

    state.pool.pop(chosen_idx)
    state.executed.append(chosen)
    return chosen


@dataclass(frozen=True)
class DesignRow:
    run_id: int
    run: ExperimentalRun
    phase: int
    seed: int


def _run_seed(master_seed: int, run_id: int) -> int:
    return int(np.random.SeedSequence([master_seed, run_id]).generate_state(1)[0])


def generate_full_design(
    phase1_reps: int = 6,
    phase2_reps: int = 5,
    budget: int = 352,
    seed: int = 0,
) -> list:
    """Three-phase design table; defaults reproduce the 48 + 25 + 352 layout."""
    if budget < 0 or budget > PHASE3_POOL_SIZE:
        raise DesignError(f"budget must be in 0..{PHASE3_POOL_SIZE}")
    rows = []
    run_id = 0
    for _ in range(phase1_reps):
        for run in phase1_runs():
            run_id += 1
            rows.append(DesignRow(run_id=run_id, run=run, phase=1, seed=_run_seed(seed, run_id)))
    for _ in range(phase2_reps):
        for run in phase2_runs():
            run_id += 1
            rows.append(DesignRow(run_id=run_id, run=run, phase=2, seed=_run_seed(seed, run_id)))
    state = DesignState(executed=[row.run for row in rows], pool=enumerate_pool())
    rng = np.random.default_rng(seed)
    for _ in range(budget):
        run = next_run(state, rng)
        run_id += 1
        rows.append(DesignRow(run_id=run_id, run=run, phase=3, seed=_run_seed(seed, run_id)))
    return rows


def write_design_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DESIGN_HEADER)
        for row in rows:
            writer.writerow(
                [row.run_id, row.run.strategy, *row.run.flags, row.run.n, row.phase, row.seed]
            )


def load_design_csv(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing design file: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != DESIGN_HEADER:
            raise DesignError(f"{path}: unexpected design header {header}")
        for record in reader:
            run = ExperimentalRun(strategy=record[1], flags=tuple(int(v) for v in record[2:10]))
            if int(record[10]) != run.n:
                raise DesignError(f"{path}: inconsistent n for run {record[0]}")
            rows.append(
                DesignRow(run_id=int(record[0]), run=run, phase=int(record[11]), seed=int(record[12]))
            )
    return rows
