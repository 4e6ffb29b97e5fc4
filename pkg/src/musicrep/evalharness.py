"""Transfer evaluation: aggregated features, probes, recommender, metrics.

Representation quality is always measured through simple downstream models
with hyperparameters held fixed across every run: a two-hidden-layer MLP for
classification/regression and a confidence-weighted matrix factorization
with a content projection for cold-start recommendation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.neural_network import MLPClassifier, MLPRegressor

from . import tensorio

SLICE_FRAMES = 216
PROBE_HIDDEN = (256, 256)
PROBE_ITERS = 200
NDCG_K = 500

PROBE_CONFIG = {
    "hidden": "256x256",
    "activation": "relu",
    "optimizer": "adam",
    "iterations": PROBE_ITERS,
    "batch": "full",
}


class EvalError(ValueError):
    pass


def probe_config_hash() -> str:
    return tensorio.hash_config(PROBE_CONFIG)


def slice_spectrogram(values, slice_frames: int = SLICE_FRAMES) -> np.ndarray:
    """Non-overlapping fixed-length slices; a trailing partial is discarded."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise EvalError("expected a (channels, frames, bands) tensor")
    n = values.shape[1] // slice_frames
    if n < 1:
        raise EvalError(f"audio shorter than one {slice_frames}-frame slice")
    parts = [values[:, i * slice_frames : (i + 1) * slice_frames, :] for i in range(n)]
    return np.stack(parts)


def extract_aggregate(represent, values, slice_frames: int = SLICE_FRAMES) -> np.ndarray:
    """Per-slice representations summarized as [means, standard deviations]."""
    slices = slice_spectrogram(values, slice_frames)
    reps = np.asarray(represent(slices), dtype=np.float64)
    if reps.ndim != 2 or reps.shape[0] != slices.shape[0]:
        raise EvalError("representation function must map (n, c, t, f) to (n, d)")
    return np.concatenate([reps.mean(axis=0), reps.std(axis=0)])


def mlp_probe(train_x, train_y, test_x, task: str, seed: int = 0):
    """Fixed-hyperparameter MLP probe; returns predictions for `test_x`."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    if task == "classification":
        classes = np.unique(train_y)
        if classes.size < 2:
            raise EvalError("classification probe needs at least two classes")
        model = MLPClassifier(
            hidden_layer_sizes=PROBE_HIDDEN,
            activation="relu",
            solver="adam",
            max_iter=PROBE_ITERS,
            batch_size=len(train_x),
            random_state=seed,
        )
    elif task == "regression":
        model = MLPRegressor(
            hidden_layer_sizes=PROBE_HIDDEN,
            activation="relu",
            solver="adam",
            max_iter=PROBE_ITERS,
            batch_size=len(train_x),
            random_state=seed,
        )
    else:
        raise EvalError(f"unknown probe task {task!r}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=ConvergenceWarning)
        model.fit(train_x, np.asarray(train_y))
    return model.predict(test_x)


def accuracy(predictions, truth) -> float:
    predictions = np.asarray(predictions)
    truth = np.asarray(truth)
    if predictions.shape != truth.shape:
        raise EvalError("prediction/truth length mismatch")
    return float(np.mean(predictions == truth))


def r_squared(predictions, truth) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predictions.shape != truth.shape:
        raise EvalError("prediction/truth length mismatch")
    ss_tot = float(((truth - truth.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise EvalError("coefficient of determination undefined for constant truth")
    ss_res = float(((truth - predictions) ** 2).sum())
    return 1.0 - ss_res / ss_tot


@dataclass
class InteractionMatrix:
    """User-by-item play counts with derived preference/confidence views."""

    counts: np.ndarray
    alpha: float = 0.1

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.float64)
        if counts.ndim != 2 or np.any(counts < 0):
            raise EvalError("interaction counts must be a non-negative matrix")
        self.counts = counts

    @property
    def preference(self) -> np.ndarray:
        return (self.counts > 0).astype(np.float64)

    @property
    def confidence(self) -> np.ndarray:
        return 1.0 + self.alpha * self.counts


@dataclass(frozen=True)
class AlsConfig:
    alpha: float = 0.1
    lam_v: float = 1e-5
    lam_u: float = 1e-5
    lam_w: float = 0.1
    rank: int = 50
    iters: int = 15
    seed: int = 0


@dataclass
class AlsResult:
    user_factors: np.ndarray
    item_factors: np.ndarray
    projection: np.ndarray
    objective_path: np.ndarray = field(repr=False, default=None)


def als_objective(interactions: InteractionMatrix, features, user_f, item_f, projection, cfg: AlsConfig) -> float:
    p = interactions.preference
    c = interactions.confidence
    resid = p - user_f @ item_f.T
    content = item_f - features @ projection
    return float(
        (c * resid**2).sum()
        + 0.5 * cfg.lam_v * (content**2).sum()
        + 0.5 * cfg.lam_u * (user_f**2).sum()
        + 0.5 * cfg.lam_w * (projection**2).sum()
    )


def _ridge_rows(factors, confidence, preference, lam, prior=None):
    """Solve the per-row weighted least squares of one ALS half-step."""
    n, rank = confidence.shape[0], factors.shape[1]
    out = np.empty((n, rank))
    base = factors.T @ factors
    eye = lam * np.eye(rank)
    for row in range(n):
        c = confidence[row]
        extra = (factors * (c - 1.0)[:, None]).T @ factors
        a = base + extra + eye
        b = factors.T @ (c * preference[row])
        if prior is not None:
            b = b + lam * prior[row]
        out[row] = np.linalg.solve(a, b)
    return out


def als_fit(interactions: InteractionMatrix, features, cfg: AlsConfig = AlsConfig()) -> AlsResult:
    """Alternating closed-form updates of user factors, item factors and the
    content projection; the objective is non-increasing per sweep."""
    counts = interactions.counts
    n_users, n_items = counts.shape
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != n_items:
        raise EvalError("feature rows must match item count")
    if cfg.rank > min(n_users, n_items):
        raise EvalError(f"rank {cfg.rank} exceeds min(users, items)")
    if interactions.alpha != cfg.alpha:
        interactions = InteractionMatrix(counts=counts, alpha=cfg.alpha)

    rng = np.random.default_rng(cfg.seed)
    user_f = 0.01 * rng.normal(size=(n_users, cfg.rank))
    item_f = 0.01 * rng.normal(size=(n_items, cfg.rank))
    projection = np.zeros((features.shape[1], cfg.rank))

    p = interactions.preference
    c = interactions.confidence
    gram = features.T @ features
    eye_w = (cfg.lam_w / cfg.lam_v) * np.eye(features.shape[1]) if cfg.lam_v > 0 else None

    path = [als_objective(interactions, features, user_f, item_f, projection, cfg)]
    for _ in range(cfg.iters):
        user_f = _ridge_rows(item_f, c, p, 0.5 * cfg.lam_u)
        prior = features @ projection
        item_f = _ridge_rows(user_f, c.T, p.T, 0.5 * cfg.lam_v, prior=prior)
        if cfg.lam_v > 0:
            projection = np.linalg.solve(gram + eye_w, features.T @ item_f)
        path.append(als_objective(interactions, features, user_f, item_f, projection, cfg))
    return AlsResult(
        user_factors=user_f,
        item_factors=item_f,
        projection=projection,
        objective_path=np.array(path),
    )


def ndcg_at_k(ranking, relevant, k: int = NDCG_K):
    """Binary-relevance nDCG over a ranked item list.

    Returns None when `relevant` is empty (score undefined for that user).
    """
    if k < 1:
        raise EvalError("k must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return None
    dcg = 0.0
    for rank, item in enumerate(ranking[:k], start=1):
        if item in relevant:
            dcg += 1.0 / np.log2(rank + 1)
    ideal = sum(1.0 / np.log2(r + 1) for r in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


@dataclass
class ColdStartResult:
    mean_ndcg: float
    user_scores: dict
    skipped_users: int
    excluded_users: int
    held_out_items: np.ndarray


def cold_start_eval(
    interactions: InteractionMatrix,
    features,
    cfg: AlsConfig = AlsConfig(),
    holdout_fraction: float = 0.2,
    seed: int = 0,
    k: int = NDCG_K,
) -> ColdStartResult:
    """Outer-matrix evaluation: hold out items entirely, fit on the rest,
    then rank the full catalog (held-out plus re-inserted training items)
    by the content-projected scores U (XW)^T, so unseen items compete with
    seen ones in a single scale space."""
    if not 0.0 < holdout_fraction < 1.0:
        raise EvalError("holdout fraction must be in (0, 1)")
    counts = interactions.counts
    n_users, n_items = counts.shape
    features = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n_held = max(1, int(round(holdout_fraction * n_items)))
    held = np.sort(rng.choice(n_items, size=n_held, replace=False))
    held_mask = np.zeros(n_items, dtype=bool)
    held_mask[held] = True

    train = InteractionMatrix(counts=counts[:, ~held_mask], alpha=cfg.alpha)
    model = als_fit(train, features[~held_mask], cfg)
    projected = features @ model.projection
    scores = model.user_factors @ projected.T

    user_scores = {}
    skipped = excluded = 0
    for user in range(n_users):
        if train.counts[user].sum() == 0:
            skipped += 1
            continue
        relevant = set(np.flatnonzero((counts[user] > 0) & held_mask).tolist())
        # Random tie-break: shuffle item order, then stable-sort by score.
        order = rng.permutation(n_items)
        ranked = order[np.argsort(-scores[user, order], kind="stable")]
        value = ndcg_at_k(ranked.tolist(), relevant, k)
        if value is None:
            excluded += 1
            continue
        user_scores[user] = value
    if not user_scores:
        raise EvalError("no user had held-out liked items to score")
    return ColdStartResult(
        mean_ndcg=float(np.mean(list(user_scores.values()))),
        user_scores=user_scores,
        skipped_users=skipped,
        excluded_users=excluded,
        held_out_items=held,
    )


def random_ranking_ndcg(interactions: InteractionMatrix, holdout_fraction=0.2, seed=0, k=NDCG_K, draws=200) -> np.ndarray:
    """Null distribution of mean nDCG under uniformly random rankings, using
    the same holdout split construction as cold_start_eval."""
    counts = interactions.counts
    n_users, n_items = counts.shape
    rng = np.random.default_rng(seed)
    n_held = max(1, int(round(holdout_fraction * n_items)))
    held = np.sort(rng.choice(n_items, size=n_held, replace=False))
    held_mask = np.zeros(n_items, dtype=bool)
    held_mask[held] = True
    values = []
    for _ in range(draws):
        user_values = []
        for user in range(n_users):
            if counts[user, ~held_mask].sum() == 0:
                continue
            relevant = set(np.flatnonzero((counts[user] > 0) & held_mask).tolist())
            if not relevant:
                continue
            ranked = rng.permutation(n_items).tolist()
            user_values.append(ndcg_at_k(ranked, relevant, k))
        values.append(float(np.mean(user_values)))
    return np.array(values)
