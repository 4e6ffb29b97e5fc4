"""Post-hoc analysis of evaluation records.

Scores are standardized within each target dataset (population mean/sd), so
dataset difficulty drops out and effects are comparable on one scale. Two
least-squares summaries are fitted on the standardized scores:

  * a strategy model with one intercept per strategy plus per-strategy
    slopes in n* (n* = 0 for single-source runs, n - 2 otherwise), and
  * a size model on r* (network size coded 0, 0.2, ..., 1), n*, and their
    interaction.

Uncertainty comes from a seeded nonparametric bootstrap that resamples
records within each dataset (2,000 resamples, percentile intervals). This
deliberately replaces full multilevel-model estimation: per-dataset
centering absorbs the dataset effects that a hierarchical fit would model
as random intercepts, and the report says so.

Per-source variance components use the method-of-moments one-way estimator
on each source's presence flag, reported as percent of that decomposition's
total variance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .arch import SOURCES, SSR, STRATEGIES

BOOTSTRAP_RESAMPLES = 2000
R_STAR = {strategy: i / (len(STRATEGIES) - 1) for i, strategy in enumerate(STRATEGIES)}


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class EvaluationRecord:
    run_id: int
    strategy: str
    flags: tuple
    dataset: str
    score: float
    standardized: float = None

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise AnalysisError(f"unknown strategy {self.strategy!r}")
        object.__setattr__(self, "flags", tuple(int(f) for f in self.flags))

    @property
    def n(self) -> int:
        return sum(self.flags)

    @property
    def n_star(self) -> int:
        return 0 if self.strategy == SSR else self.n - 2


def standardize(records) -> list:
    """Within-dataset z-scores (population sd); the dataset effect becomes 0."""
    records = list(records)
    by_dataset = {}
    for rec in records:
        by_dataset.setdefault(rec.dataset, []).append(rec)
    out = []
    for dataset, group in by_dataset.items():
        if len(group) < 2:
            raise AnalysisError(f"dataset {dataset!r} has fewer than 2 records")
        values = np.array([r.score for r in group], dtype=np.float64)
        sd = values.std()
        if sd == 0.0:
            raise AnalysisError(f"dataset {dataset!r} has zero score variance")
        mean = values.mean()
        out.extend(replace(r, standardized=float((r.score - mean) / sd)) for r in group)
    order = {id(r): i for i, r in enumerate(records)}
    out.sort(key=lambda r: order.get(id(r), 0))
    # Restore input order by (dataset grouping loses it otherwise).
    by_key = {}
    for rec in out:
        by_key.setdefault((rec.run_id, rec.dataset, rec.score), []).append(rec)
    restored = []
    for rec in records:
        restored.append(by_key[(rec.run_id, rec.dataset, rec.score)].pop(0))
    return restored


def _require_standardized(records):
    records = list(records)
    if not records:
        raise AnalysisError("no records")
    if any(r.standardized is None for r in records):
        raise AnalysisError("records must be standardized first")
    return records


@dataclass
class LinearFitResult:
    terms: list
    estimates: dict
    intervals: dict
    n_records: int
    resamples: int
    seed: int


def _check_full_rank(matrix, terms):
    rank = np.linalg.matrix_rank(matrix)
    if rank == matrix.shape[1]:
        return
    aliased = []
    kept = []
    for j in range(matrix.shape[1]):
        trial = matrix[:, kept + [j]]
        if np.linalg.matrix_rank(trial) > len(kept):
            kept.append(j)
        else:
            aliased.append(terms[j])
    raise AnalysisError(f"rank-deficient model matrix; aliased columns: {aliased}")


def _bootstrap_fit(matrix, response, datasets, terms, resamples, seed):
    estimates, *_ = np.linalg.lstsq(matrix, response, rcond=None)
    rng = np.random.default_rng(seed)
    groups = {}
    for idx, dataset in enumerate(datasets):
        groups.setdefault(dataset, []).append(idx)
    group_indices = [np.array(v) for v in groups.values()]
    draws = np.empty((resamples, matrix.shape[1]))
    for b in range(resamples):
        picks = np.concatenate(
            [idx[rng.integers(0, idx.size, size=idx.size)] for idx in group_indices]
        )
        beta, *_ = np.linalg.lstsq(matrix[picks], response[picks], rcond=None)
        draws[b] = beta
    lo = np.percentile(draws, 2.5, axis=0)
    hi = np.percentile(draws, 97.5, axis=0)
    return LinearFitResult(
        terms=list(terms),
        estimates={t: float(e) for t, e in zip(terms, estimates)},
        intervals={t: (float(a), float(b)) for t, a, b in zip(terms, lo, hi)},
        n_records=matrix.shape[0],
        resamples=resamples,
        seed=seed,
    )


def fit_strategy_model(records, resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> LinearFitResult:
    """Per-strategy intercepts and per-strategy n* slopes on y*."""
    records = _require_standardized(records)
    present = [s for s in STRATEGIES if any(r.strategy == s for r in records)]
    if len(present) < 2:
        raise AnalysisError("need at least two strategies")
    sloped = [
        s for s in present if len({r.n_star for r in records if r.strategy == s}) > 1
    ]
    terms = [f"intercept[{s}]" for s in present] + [f"slope[{s}]" for s in sloped]
    rows = []
    for rec in records:
        row = [1.0 if rec.strategy == s else 0.0 for s in present]
        row += [float(rec.n_star) if rec.strategy == s else 0.0 for s in sloped]
        rows.append(row)
    matrix = np.array(rows)
    response = np.array([r.standardized for r in records])
    _check_full_rank(matrix, terms)
    return _bootstrap_fit(matrix, response, [r.dataset for r in records], terms, resamples, seed)


def fit_size_model(records, resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> LinearFitResult:
    """Overall intercept plus r*, n* and r*n* effects on y*."""
    records = _require_standardized(records)
    terms = ["intercept", "r_star", "n_star", "r_star:n_star"]
    matrix = np.array(
        [
            [1.0, R_STAR[r.strategy], float(r.n_star), R_STAR[r.strategy] * r.n_star]
            for r in records
        ]
    )
    response = np.array([r.standardized for r in records])
    _check_full_rank(matrix, terms)
    return _bootstrap_fit(matrix, response, [r.dataset for r in records], terms, resamples, seed)


@dataclass
class VarianceComponent:
    dataset: str
    source: str
    percent: float  # None when the flag never varies in the records
    largest: bool = False


def variance_components(records) -> list:
    """Method-of-moments one-way variance component per source, per dataset,
    over multi-source records, as percent of component-plus-residual."""
    usable = [r for r in records if r.strategy != SSR]
    if not usable:
        raise AnalysisError("no multi-source records")
    by_dataset = {}
    for rec in usable:
        by_dataset.setdefault(rec.dataset, []).append(rec)
    out = []
    for dataset in sorted(by_dataset):
        group = by_dataset[dataset]
        values = np.array(
            [r.standardized if r.standardized is not None else r.score for r in group]
        )
        components = {}
        for s_idx, source in enumerate(SOURCES):
            flags = np.array([r.flags[s_idx] for r in group])
            percent = None
            if 0 < flags.sum() < flags.size:
                n1, n0 = int(flags.sum()), int(flags.size - flags.sum())
                total = flags.size
                m1, m0 = values[flags == 1].mean(), values[flags == 0].mean()
                grand = values.mean()
                msa = n1 * (m1 - grand) ** 2 + n0 * (m0 - grand) ** 2  # a - 1 = 1
                sse = ((values[flags == 1] - m1) ** 2).sum() + ((values[flags == 0] - m0) ** 2).sum()
                if total - 2 > 0:
                    mse = sse / (total - 2)
                    n_eff = (total - (n1**2 + n0**2) / total)  # / (a - 1) = 1
                    sigma_a = max(0.0, (msa - mse) / n_eff)
                    denom = sigma_a + mse
                    percent = 100.0 * sigma_a / denom if denom > 0 else 0.0
            components[source] = percent
        defined = {s: p for s, p in components.items() if p is not None}
        top = max(defined, key=defined.get) if defined else None
        for source in SOURCES:
            out.append(
                VarianceComponent(
                    dataset=dataset,
                    source=source,
                    percent=components[source],
                    largest=(source == top and components[source] is not None),
                )
            )
    return out


def ssr_performance_component_correlation(records, components) -> float:
    """Pearson correlation between each source's mean single-source score and
    its variance component, across (dataset, source) pairs."""
    records = _require_standardized(records)
    ssr_scores = {}
    for rec in records:
        if rec.strategy != SSR:
            continue
        source = SOURCES[rec.flags.index(1)]
        ssr_scores.setdefault((rec.dataset, source), []).append(rec.standardized)
    xs, ys = [], []
    for comp in components:
        key = (comp.dataset, comp.source)
        if comp.percent is None or key not in ssr_scores:
            continue
        xs.append(float(np.mean(ssr_scores[key])))
        ys.append(comp.percent)
    if len(xs) < 2:
        return float("nan")
    xs, ys = np.array(xs), np.array(ys)
    if xs.std() == 0 or ys.std() == 0:
        return float("nan")
    return float(np.corrcoef(xs, ys)[0, 1])


def write_fit_csv(path, fit: LinearFitResult) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["term", "estimate", "ci_low", "ci_high"])
        for term in fit.terms:
            lo, hi = fit.intervals[term]
            writer.writerow([term, repr(fit.estimates[term]), repr(lo), repr(hi)])


def write_components_csv(path, components) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "source", "percent", "largest"])
        for comp in components:
            writer.writerow(
                [
                    comp.dataset,
                    comp.source,
                    "" if comp.percent is None else repr(comp.percent),
                    int(comp.largest),
                ]
            )


def score_by_n_table(records) -> list:
    """(strategy, n, mean y*, sd y*, count) rows for plotting."""
    records = _require_standardized(records)
    table = {}
    for rec in records:
        table.setdefault((rec.strategy, rec.n), []).append(rec.standardized)
    rows = []
    for (strategy, n), values in sorted(table.items()):
        arr = np.array(values)
        rows.append((strategy, n, float(arr.mean()), float(arr.std()), len(values)))
    return rows
