import numpy as np
import pytest
import scipy.sparse

from musicrep import factors


def matrix_from_dense(dense, items=None, terms=None):
    dense = np.asarray(dense, dtype=float)
    items = items or [f"i{r}" for r in range(dense.shape[0])]
    terms = terms or [f"t{c}" for c in range(dense.shape[1])]
    return factors.LabelMatrix(scipy.sparse.csr_matrix(dense), items, terms)


class TestTfidf:
    def test_ubiquitous_term_zeroed(self):
        m = matrix_from_dense([[1, 2], [3, 0], [2, 1]])
        out = factors.tfidf(m).counts.toarray()
        np.testing.assert_allclose(out[:, 0], 0.0)

    def test_single_doc_single_term(self):
        out = factors.tfidf(matrix_from_dense([[3]])).counts.toarray()
        assert out[0, 0] == 0.0

    def test_matches_hand_computed_table(self):
        m = matrix_from_dense([[2, 0, 1], [0, 1, 1], [1, 0, 1]])
        out = factors.tfidf(m).counts.toarray()
        idf = [np.log(3 / 2), np.log(3 / 1), np.log(3 / 3)]
        expected = np.array(
            [[2 * idf[0], 0, 0], [0, 1 * idf[1], 0], [1 * idf[0], 0, 0]]
        )
        np.testing.assert_allclose(out, expected)

    def test_empty_matrix_errors(self):
        with pytest.raises(factors.FactorError, match="empty"):
            factors.tfidf(
                factors.LabelMatrix(scipy.sparse.csr_matrix((0, 0)), [], [])
            )


class TestPlsaFit:
    def test_k1_degenerate(self):
        m = matrix_from_dense([[2, 1, 0], [0, 3, 1]])
        model = factors.plsa_fit(m, k=1, iters=20, seed=0)
        np.testing.assert_allclose(model.topic_given_doc, 1.0)
        totals = np.array([2, 4, 1], dtype=float)
        np.testing.assert_allclose(model.term_given_topic[0], totals / totals.sum(), atol=1e-12)

    def test_disjoint_blocks_separate(self):
        block = np.zeros((8, 10))
        block[:4, :5] = np.random.default_rng(0).integers(1, 6, size=(4, 5))
        block[4:, 5:] = np.random.default_rng(1).integers(1, 6, size=(4, 5))
        model = factors.plsa_fit(matrix_from_dense(block), k=2, iters=300, seed=3)
        top = model.topic_given_doc.argmax(axis=1)
        assert len(set(top[:4])) == 1 and len(set(top[4:])) == 1
        assert top[0] != top[4]
        assert np.all(model.topic_given_doc.max(axis=1) > 0.99)

    def test_rows_sum_to_one_k50(self):
        rng = np.random.default_rng(7)
        dense = rng.poisson(1.0, size=(60, 80)) + (rng.random((60, 80)) < 0.02)
        dense[dense.sum(axis=1) == 0, 0] = 1
        model = factors.plsa_fit(matrix_from_dense(dense), k=50, iters=30, seed=0)
        np.testing.assert_allclose(model.topic_given_doc.sum(axis=1), 1.0, atol=1e-9)
        np.testing.assert_allclose(model.term_given_topic.sum(axis=1), 1.0, atol=1e-9)

    def test_monotone_log_likelihood_many_seeds(self):
        rng = np.random.default_rng(11)
        for trial in range(100):
            dense = rng.poisson(0.8, size=(6, 8))
            dense[dense.sum(axis=1) == 0, 0] = 1
            model = factors.plsa_fit(matrix_from_dense(dense), k=3, iters=25, seed=trial)
            diffs = np.diff(model.log_likelihood_path)
            assert diffs.min() >= -1e-9

    def test_bit_reproducible(self):
        m = matrix_from_dense(np.random.default_rng(5).poisson(1.0, (10, 12)) + 1)
        a = factors.plsa_fit(m, k=4, iters=40, seed=123)
        b = factors.plsa_fit(m, k=4, iters=40, seed=123)
        assert np.array_equal(a.topic_given_doc, b.topic_given_doc)
        assert np.array_equal(a.term_given_topic, b.term_given_topic)

    def test_error_cases(self):
        m = matrix_from_dense([[1, 0], [0, 1]])
        with pytest.raises(factors.FactorError, match="exceeds vocabulary"):
            factors.plsa_fit(m, k=3)
        with pytest.raises(factors.FactorError, match="all-zero row"):
            factors.plsa_fit(matrix_from_dense([[1, 1], [0, 0]]), k=1)


class TestPlsaInfer:
    def test_training_row_maps_near_training_distribution(self):
        rng = np.random.default_rng(2)
        dense = rng.poisson(2.0, size=(12, 15)) + 1
        m = matrix_from_dense(dense)
        model = factors.plsa_fit(m, k=3, iters=400, seed=0)
        for doc in (0, 5, 11):
            inferred = factors.plsa_infer(model, dense[doc])
            l1 = np.abs(inferred.probs - model.topic_given_doc[doc]).sum()
            assert l1 < 0.05

    def test_planted_topic_row_concentrates(self):
        block = np.zeros((8, 10))
        block[:4, :5] = 3
        block[4:, 5:] = 3
        model = factors.plsa_fit(matrix_from_dense(block), k=2, iters=200, seed=1)
        row = np.zeros(10)
        row[:5] = 2.0
        inferred = factors.plsa_infer(model, row)
        planted = model.topic_given_doc[0].argmax()
        assert inferred.probs[planted] > 0.9

    def test_uniform_row_k1(self):
        m = matrix_from_dense([[1, 2, 1]])
        model = factors.plsa_fit(m, k=1, iters=10, seed=0)
        out = factors.plsa_infer(model, np.ones(3))
        np.testing.assert_allclose(out.probs, [1.0])

    def test_zero_row_errors(self):
        m = matrix_from_dense([[1, 2, 1]])
        model = factors.plsa_fit(m, k=1, iters=5, seed=0)
        with pytest.raises(factors.FactorError, match="all-zero"):
            factors.plsa_infer(model, np.zeros(3))


class TestGmm:
    def test_k1_matches_sample_moments(self):
        rng = np.random.default_rng(4)
        values = rng.normal(3.0, 2.0, size=200)
        model = factors.gmm_fit(values, k=1, iters=5)
        assert model.means[0] == pytest.approx(values.mean())
        assert model.variances[0] == pytest.approx(values.var())
        np.testing.assert_allclose(model.weights, [1.0])

    def test_two_separated_clusters_recovered(self):
        rng = np.random.default_rng(9)
        values = np.concatenate([rng.normal(0.0, 0.5, 300), rng.normal(20.0, 0.5, 300)])
        model = factors.gmm_fit(values, k=2, iters=100)
        means = np.sort(model.means)
        assert abs(means[0] - 0.0) < 0.05 * 20
        assert abs(means[1] - 20.0) < 0.05 * 20

    def test_k50_weights_sum_to_one(self):
        rng = np.random.default_rng(10)
        bpm = rng.uniform(60, 180, size=500)
        model = factors.gmm_fit(bpm, k=50, iters=40)
        assert model.k == 50
        assert model.weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(model.variances > 0)

    def test_monotone_log_likelihood_many_seeds(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            values = rng.normal(size=30) * rng.uniform(0.5, 3) + rng.uniform(-5, 5)
            model = factors.gmm_fit(values, k=3, iters=25)
            assert np.diff(model.log_likelihood_path).min() >= -1e-9

    def test_too_few_values(self):
        with pytest.raises(factors.FactorError, match="at least"):
            factors.gmm_fit([1.0, 2.0], k=3)


class TestGmmPosterior:
    def model(self):
        return factors.GmmModel(
            weights=np.array([0.5, 0.5]),
            means=np.array([0.0, 10.0]),
            variances=np.array([1.0, 1.0]),
            log_likelihood=0.0,
        )

    def test_value_at_isolated_mean(self):
        post = factors.gmm_posterior(self.model(), 0.0)
        assert post.probs[0] > 0.99

    def test_k1_trivial(self):
        model = factors.GmmModel(
            weights=np.array([1.0]), means=np.array([2.0]), variances=np.array([1.0]), log_likelihood=0.0
        )
        np.testing.assert_allclose(factors.gmm_posterior(model, 5.0).probs, [1.0])

    def test_midpoint_symmetry(self):
        post = factors.gmm_posterior(self.model(), 5.0)
        np.testing.assert_allclose(post.probs, [0.5, 0.5], atol=1e-9)

    def test_batch_matches_scalar(self):
        model = self.model()
        values = np.array([-1.0, 3.0, 12.0])
        batch = factors.gmm_posterior_batch(model, values)
        for i, v in enumerate(values):
            np.testing.assert_allclose(batch[i], factors.gmm_posterior(model, v).probs)


class TestFactorDistribution:
    def test_validates_probability_vector(self):
        with pytest.raises(factors.FactorError):
            factors.FactorDistribution(np.array([0.5, 0.6]))
        with pytest.raises(factors.FactorError):
            factors.FactorDistribution(np.array([1.2, -0.2]))
        ok = factors.FactorDistribution(np.array([0.25, 0.75]), source="tag")
        assert ok.source == "tag"

    def test_label_matrix_triplets_and_filtering(self):
        m = factors.LabelMatrix.from_triplets(
            [("a", "x", 1), ("a", "y", 2), ("b", "y", 1)], item_ids=["a", "b", "c"]
        )
        assert m.shape == (3, 2)
        filtered = m.drop_empty_rows()
        assert filtered.item_ids == ["a", "b"]
        assert filtered.shape == (2, 2)
