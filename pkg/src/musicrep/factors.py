"""Label factorization: raw annotation matrices to k-dim probability vectors.

Count-valued sources go through pLSA (EM over document/topic/term tables);
scalar sources go through a 1-d Gaussian mixture whose posterior
responsibilities become the factor vector. Both fits run a fixed number of
EM iterations with no early stopping so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

PROB_ATOL = 1e-9
GMM_VAR_FLOOR_SCALE = 1e-6
DEFAULT_ITERS = 200
FOLD_IN_ITERS = 200


class FactorError(ValueError):
    pass


@dataclass
class LabelMatrix:
    """Sparse non-negative item-by-term count matrix with id maps."""

    counts: scipy.sparse.csr_matrix
    item_ids: list
    term_ids: list

    def __post_init__(self) -> None:
        self.counts = scipy.sparse.csr_matrix(self.counts, dtype=np.float64)
        if self.counts.nnz and self.counts.min() < 0:
            raise FactorError("counts must be non-negative")
        if self.counts.shape[0] != len(self.item_ids):
            raise FactorError("item id map does not match row count")
        if self.counts.shape[1] != len(self.term_ids):
            raise FactorError("term id map does not match column count")

    @classmethod
    def from_triplets(cls, triplets, item_ids=None, term_ids=None) -> "LabelMatrix":
        """Build from (item_id, term_id, count) triplets."""
        triplets = list(triplets)
        if item_ids is None:
            item_ids = sorted({t[0] for t in triplets})
        if term_ids is None:
            term_ids = sorted({t[1] for t in triplets})
        item_index = {v: i for i, v in enumerate(item_ids)}
        term_index = {v: i for i, v in enumerate(term_ids)}
        rows = [item_index[t[0]] for t in triplets]
        cols = [term_index[t[1]] for t in triplets]
        vals = [float(t[2]) for t in triplets]
        counts = scipy.sparse.coo_matrix(
            (vals, (rows, cols)), shape=(len(item_ids), len(term_ids))
        ).tocsr()
        counts.sum_duplicates()
        return cls(counts=counts, item_ids=list(item_ids), term_ids=list(term_ids))

    def drop_empty_rows(self) -> "LabelMatrix":
        keep = np.flatnonzero(np.asarray(self.counts.sum(axis=1)).ravel() > 0)
        return LabelMatrix(
            counts=self.counts[keep],
            item_ids=[self.item_ids[i] for i in keep],
            term_ids=list(self.term_ids),
        )

    @property
    def shape(self):
        return self.counts.shape


@dataclass
class PlsaModel:
    topic_given_doc: np.ndarray  # (docs, k), rows sum to 1
    term_given_topic: np.ndarray  # (k, terms), rows sum to 1
    k: int
    log_likelihood: float
    log_likelihood_path: np.ndarray = field(repr=False, default=None)
    term_ids: list = field(default_factory=list)


@dataclass
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: float
    log_likelihood_path: np.ndarray = field(repr=False, default=None)

    @property
    def k(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class FactorDistribution:
    """A k-vector probability distribution over latent factors."""

    probs: np.ndarray
    source: str = ""

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 1:
            raise FactorError("factor distribution must be a vector")
        if np.any(probs < -PROB_ATOL):
            raise FactorError("factor distribution has negative entries")
        if abs(probs.sum() - 1.0) > PROB_ATOL:
            raise FactorError("factor distribution does not sum to 1")
        object.__setattr__(self, "probs", probs)


def tfidf(matrix: LabelMatrix) -> LabelMatrix:
    """tf * log(N / df) reweighting; terms present in every row get weight 0."""
    counts = matrix.counts
    if counts.shape[0] == 0 or counts.shape[1] == 0:
        raise FactorError("empty matrix")
    n_docs = counts.shape[0]
    df = np.asarray((counts > 0).sum(axis=0)).ravel()
    idf = np.zeros(counts.shape[1])
    seen = df > 0
    idf[seen] = np.log(n_docs / df[seen])
    weighted = counts.multiply(idf[None, :]).tocsr()
    return LabelMatrix(counts=weighted, item_ids=list(matrix.item_ids), term_ids=list(matrix.term_ids))


def _normalize_rows(table: np.ndarray) -> np.ndarray:
    return table / table.sum(axis=1, keepdims=True)


def plsa_fit(matrix: LabelMatrix, k: int, iters: int = DEFAULT_ITERS, seed: int = 0) -> PlsaModel:
    """EM fit of the topic model; log-likelihood is non-decreasing per step."""
    counts = matrix.counts
    n_docs, n_terms = counts.shape
    if k < 1:
        raise FactorError("k must be >= 1")
    if k > n_terms:
        raise FactorError(f"k={k} exceeds vocabulary size {n_terms}")
    row_totals = np.asarray(counts.sum(axis=1)).ravel()
    if np.any(row_totals == 0):
        raise FactorError("matrix has an all-zero row; filter before fitting")
    if iters < 1:
        raise FactorError("iters must be >= 1")

    rng = np.random.default_rng(seed)
    topic_doc = _normalize_rows(rng.uniform(0.1, 1.0, size=(n_docs, k)))
    term_topic = _normalize_rows(rng.uniform(0.1, 1.0, size=(k, n_terms)))

    coo = counts.tocoo()
    d_idx, w_idx, n_dw = coo.row, coo.col, coo.data
    ll_path = np.empty(iters)
    for it in range(iters):
        # E-step over nonzeros: responsibilities q(z | d, w).
        contrib = topic_doc[d_idx] * term_topic[:, w_idx].T  # (nnz, k)
        denom = contrib.sum(axis=1)
        ll_path[it] = float(np.dot(n_dw, np.log(denom)))
        resp = contrib / denom[:, None]
        weighted = resp * n_dw[:, None]
        # M-step.
        new_topic_doc = np.zeros_like(topic_doc)
        np.add.at(new_topic_doc, d_idx, weighted)
        new_term_topic = np.zeros_like(term_topic.T)
        np.add.at(new_term_topic, w_idx, weighted)
        topic_doc = new_topic_doc / row_totals[:, None]
        term_topic = _normalize_rows(new_term_topic.T)

    contrib = topic_doc[d_idx] * term_topic[:, w_idx].T
    final_ll = float(np.dot(n_dw, np.log(contrib.sum(axis=1))))
    return PlsaModel(
        topic_given_doc=topic_doc,
        term_given_topic=term_topic,
        k=k,
        log_likelihood=final_ll,
        log_likelihood_path=np.append(ll_path, final_ll),
        term_ids=list(matrix.term_ids),
    )


def plsa_infer(model: PlsaModel, row, iters: int = FOLD_IN_ITERS, source: str = "") -> FactorDistribution:
    """Fold-in EM for one unseen row with the term tables frozen."""
    if scipy.sparse.issparse(row):
        row = np.asarray(row.todense()).ravel()
    row = np.asarray(row, dtype=np.float64).ravel()
    if row.size != model.term_given_topic.shape[1]:
        raise FactorError("row length does not match model vocabulary")
    if row.sum() <= 0:
        raise FactorError("cannot infer factors for an all-zero row")
    w_idx = np.flatnonzero(row)
    n_w = row[w_idx]
    term_topic = model.term_given_topic[:, w_idx]  # (k, nnz)
    theta = np.full(model.k, 1.0 / model.k)
    for _ in range(iters):
        contrib = theta[:, None] * term_topic  # (k, nnz)
        resp = contrib / contrib.sum(axis=0, keepdims=True)
        theta = (resp * n_w[None, :]).sum(axis=1)
        theta /= theta.sum()
    return FactorDistribution(probs=theta, source=source)


def gmm_fit(values, k: int, iters: int = DEFAULT_ITERS, seed: int = 0) -> GmmModel:
    """EM fit of a 1-d Gaussian mixture.

    Initialization is deterministic (means at evenly spaced quantiles,
    shared sample variance, uniform weights); `seed` is accepted for
    interface symmetry with `plsa_fit`.
    """
    del seed
    values = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(values)):
        raise FactorError("values must be finite")
    if k < 1:
        raise FactorError("k must be >= 1")
    if values.size < k:
        raise FactorError(f"need at least {k} values to fit {k} components")
    if iters < 1:
        raise FactorError("iters must be >= 1")

    sample_var = float(values.var())
    var_floor = max(GMM_VAR_FLOOR_SCALE * sample_var, 1e-12)
    quantiles = (np.arange(k) + 0.5) / k
    means = np.quantile(values, quantiles)
    variances = np.full(k, max(sample_var, var_floor))
    weights = np.full(k, 1.0 / k)

    ll_path = np.empty(iters)
    for it in range(iters):
        log_pdf = (
            -0.5 * np.log(2.0 * np.pi * variances)[None, :]
            - 0.5 * (values[:, None] - means[None, :]) ** 2 / variances[None, :]
        )
        log_joint = log_pdf + np.log(weights)[None, :]
        shift = log_joint.max(axis=1, keepdims=True)
        joint = np.exp(log_joint - shift)
        total = joint.sum(axis=1)
        ll_path[it] = float(np.sum(np.log(total) + shift.ravel()))
        resp = joint / total[:, None]
        mass = resp.sum(axis=0)
        occupied = mass > 0
        weights = mass / values.size
        # Empty components keep their previous mean and variance.
        means = np.where(occupied, (resp * values[:, None]).sum(axis=0) / np.where(occupied, mass, 1.0), means)
        variances = np.where(
            occupied,
            (resp * (values[:, None] - means[None, :]) ** 2).sum(axis=0) / np.where(occupied, mass, 1.0),
            variances,
        )
        variances = np.maximum(variances, var_floor)

    log_pdf = (
        -0.5 * np.log(2.0 * np.pi * variances)[None, :]
        - 0.5 * (values[:, None] - means[None, :]) ** 2 / variances[None, :]
    )
    log_joint = log_pdf + np.log(np.maximum(weights, 1e-300))[None, :]
    shift = log_joint.max(axis=1, keepdims=True)
    final_ll = float(np.sum(np.log(np.exp(log_joint - shift).sum(axis=1)) + shift.ravel()))
    return GmmModel(
        weights=weights,
        means=means,
        variances=variances,
        log_likelihood=final_ll,
        log_likelihood_path=np.append(ll_path, final_ll),
    )


def gmm_posterior(model: GmmModel, value: float, source: str = "") -> FactorDistribution:
    """Component responsibilities P(component | value)."""
    if not np.isfinite(value):
        raise FactorError("value must be finite")
    log_pdf = (
        -0.5 * np.log(2.0 * np.pi * model.variances)
        - 0.5 * (value - model.means) ** 2 / model.variances
    )
    log_joint = log_pdf + np.log(np.maximum(model.weights, 1e-300))
    joint = np.exp(log_joint - log_joint.max())
    return FactorDistribution(probs=joint / joint.sum(), source=source)


def gmm_posterior_batch(model: GmmModel, values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    log_pdf = (
        -0.5 * np.log(2.0 * np.pi * model.variances)[None, :]
        - 0.5 * (values[:, None] - model.means[None, :]) ** 2 / model.variances[None, :]
    )
    log_joint = log_pdf + np.log(np.maximum(model.weights, 1e-300))[None, :]
    joint = np.exp(log_joint - log_joint.max(axis=1, keepdims=True))
    return joint / joint.sum(axis=1, keepdims=True)
