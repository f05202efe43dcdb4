import math

import numpy as np
import pytest
from scipy import integrate, special, stats

from foldkit.bayes import (
    PosteriorChain,
    bayes_factor,
    flat_log_prior,
    plr,
    posterior_bayes_factor,
    sample_posterior,
)
from foldkit.likelihood import FixedHypothesis, LikelihoodMachine, TemplateHypothesis
from foldkit.response import ResponseMatrixSet


def unit_set(toys=1):
    return ResponseMatrixSet(np.ones((toys, 1, 1)), sim_truth_counts=np.array([1e6]))


def batch_se(x, n_batches=50):
    """Standard error of the mean from batch means (accounts for autocorrelation)."""
    means = np.array([b.mean() for b in np.array_split(x, n_batches)])
    return means.std(ddof=1) / math.sqrt(n_batches)


@pytest.fixture(scope="module")
def gamma_chain():
    lm = LikelihoodMachine([4], unit_set())
    hyp = TemplateHypothesis([[1.0]])
    return lm, hyp, sample_posterior(lm, hyp, flat_log_prior(hyp), 100_000, 2000, 2.5, 11)


class TestSampler:
    def test_gamma_mean(self, gamma_chain):
        _, _, chain = gamma_chain
        x = chain.thetas[:, 0]
        assert abs(x.mean() - 5.0) < 3 * batch_se(x)

    def test_gamma_ks(self, gamma_chain):
        _, _, chain = gamma_chain
        thin = chain.thetas[::25, 0]
        assert stats.kstest(thin, stats.gamma(5).cdf).pvalue > 0.01

    def test_chain_properties(self, gamma_chain):
        _, hyp, chain = gamma_chain
        assert len(chain) == 100_000
        assert 0 < chain.acceptance_rate < 1
        assert np.all(np.isfinite(chain.log_post))
        assert np.all(chain.thetas >= 0)
        assert np.all(chain.toys == 0)
        first, second = chain.split_half_means()
        assert abs(first[0] - second[0]) < 0.2

    def test_deterministic(self):
        lm = LikelihoodMachine([4], unit_set())
        hyp = TemplateHypothesis([[1.0]])
        a = sample_posterior(lm, hyp, flat_log_prior(hyp), 500, 50, 1.0, 3)
        b = sample_posterior(lm, hyp, flat_log_prior(hyp), 500, 50, 1.0, 3)
        assert a.thetas.tobytes() == b.thetas.tobytes() and np.array_equal(a.toys, b.toys)

    def test_identical_toys_uniform_index(self):
        lm = LikelihoodMachine([4], unit_set(toys=4))
        hyp = TemplateHypothesis([[1.0]])
        chain = sample_posterior(lm, hyp, flat_log_prior(hyp), 20_000, 100, 2.0, 5)
        counts = np.bincount(chain.toys, minlength=4)
        expect = 20_000 / 4
        assert np.all(np.abs(counts - expect) < 3 * math.sqrt(expect * 0.75))

    def test_tuning(self):
        lm = LikelihoodMachine([50], unit_set())
        hyp = TemplateHypothesis([[1.0]])
        chain = sample_posterior(lm, hyp, flat_log_prior(hyp), 5000, 500, 0.01, 2, tune=True)
        assert 0.1 < chain.acceptance_rate < 0.6

    def test_bad_inputs(self):
        lm = LikelihoodMachine([4], unit_set())
        hyp = TemplateHypothesis([[1.0]])
        with pytest.raises(ValueError):
            sample_posterior(lm, hyp, flat_log_prior(hyp), 10, 0, 0.0, 1)
        with pytest.raises(ValueError):
            sample_posterior(lm, hyp, lambda th: -math.inf, 10, 0, 1.0, 1)


def point_prior(value):
    return lambda rng, n: np.full((n, 1), value)


class TestBayesFactor:
    def test_point_priors(self):
        lm = LikelihoodMachine([4], unit_set())
        hyp = TemplateHypothesis([[1.0]])
        res = bayes_factor(lm, hyp, point_prior(3.0), hyp, point_prior(6.0), 1000, 0)
        expected = lm.log_likelihood([3.0]) - lm.log_likelihood([6.0])
        assert res.log_bayes_factor == pytest.approx(expected, abs=1e-12)
        assert bayes_factor(lm, hyp, point_prior(3.0), hyp, point_prior(6.0), 1000, 0, prior_odds=2).posterior_odds == (
            pytest.approx(2 * math.exp(expected))
        )

    def test_same_everything(self):
        lm = LikelihoodMachine([4], unit_set())
        hyp = TemplateHypothesis([[1.0]])
        prior = lambda rng, n: rng.uniform(0, 10, (n, 1))  # noqa: E731
        assert bayes_factor(lm, hyp, prior, hyp, prior, 2000, 4).bayes_factor == 1.0

    def test_quadrature(self):
        # flat prior on [0, L] against the point mu = 4
        n, lam = 4, 12.0
        lm = LikelihoodMachine([n], unit_set())
        hyp = TemplateHypothesis([[1.0]])
        uniform = lambda rng, k: rng.uniform(0, lam, (k, 1))  # noqa: E731
        res = bayes_factor(lm, hyp, uniform, hyp, point_prior(4.0), 100_000, 8)
        evidence = integrate.quad(lambda m: stats.poisson.pmf(n, m), 0, lam)[0] / lam
        assert res.bayes_factor == pytest.approx(evidence / stats.poisson.pmf(n, 4.0), rel=0.02)

    def test_too_few_draws(self):
        lm = LikelihoodMachine([4], unit_set())
        hyp = TemplateHypothesis([[1.0]])
        with pytest.raises(ValueError):
            bayes_factor(lm, hyp, point_prior(1.0), hyp, point_prior(1.0), 999, 0)

    def test_zero_likelihood(self):
        ms = ResponseMatrixSet(np.ones((1, 1, 1)))
        lm = LikelihoodMachine([4], ms)
        hyp = TemplateHypothesis([[1.0]])
        with pytest.raises(ValueError):
            bayes_factor(lm, hyp, point_prior(0.0), hyp, point_prior(1.0), 1000, 0)


class TestPosteriorBayesFactor:
    def test_identical(self, gamma_chain):
        lm, hyp, chain = gamma_chain
        assert posterior_bayes_factor(lm, chain, hyp, chain, hyp) == 1.0

    def test_conjugate(self, gamma_chain):
        # posterior mean of L(theta) under Gamma(n+1): int p(n|t)^2 dt / int p(n|t) dt
        lm, hyp, chain = gamma_chain
        n = 4
        closed = special.gamma(2 * n + 1) / 2 ** (2 * n + 1) / math.factorial(n) ** 2
        point = PosteriorChain(np.full((1000, 1), 4.0), np.zeros(1000, dtype=int), np.zeros(1000), 1.0, 0)
        ratio = posterior_bayes_factor(lm, chain, hyp, point, hyp)
        assert ratio == pytest.approx(closed / stats.poisson.pmf(n, 4.0), rel=0.02)

    def test_thinning(self, gamma_chain):
        lm, hyp, chain = gamma_chain
        point = PosteriorChain(np.full((10, 1), 4.0), np.zeros(10, dtype=int), np.zeros(10), 1.0, 0)
        full = posterior_bayes_factor(lm, chain, hyp, point, hyp)
        half = posterior_bayes_factor(lm, chain.thinned(2), hyp, point, hyp)
        assert half == pytest.approx(full, rel=0.03)

    def test_empty(self, gamma_chain):
        lm, hyp, chain = gamma_chain
        empty = PosteriorChain(np.zeros((0, 1)), np.zeros(0, dtype=int), np.zeros(0), 0.0, 0)
        with pytest.raises(ValueError):
            posterior_bayes_factor(lm, empty, hyp, chain, hyp)


class TestPLR:
    def test_same_chain(self, gamma_chain):
        lm, hyp, chain = gamma_chain
        assert plr(lm, chain, hyp, chain, hyp, 1.0) == 1.0

    def test_zeta_zero(self, gamma_chain):
        lm, hyp, chain = gamma_chain
        assert plr(lm, chain, hyp, chain, hyp, 0.0) == 0.0

    def test_point_hypotheses(self):
        lm = LikelihoodMachine([4], unit_set())
        h0, h1 = FixedHypothesis([2.0]), FixedHypothesis([4.0])
        c = PosteriorChain(np.zeros((5, 0)), np.zeros(5, dtype=int), np.zeros(5), 1.0, 0)
        ratio = stats.poisson.pmf(4, 2.0) / stats.poisson.pmf(4, 4.0)
        assert plr(lm, c, h0, c, h1, ratio * 1.001) == 1.0
        assert plr(lm, c, h0, c, h1, ratio * 0.999) == 0.0

    def test_pairs_to_shorter_chain(self, gamma_chain):
        lm, hyp, chain = gamma_chain
        short = PosteriorChain(chain.thetas[:10], chain.toys[:10], chain.log_post[:10], 1.0, 0)
        value = plr(lm, chain, hyp, short, hyp, 1.0)
        assert 0 <= value <= 1
        empty = PosteriorChain(np.zeros((0, 1)), np.zeros(0, dtype=int), np.zeros(0), 0.0, 0)
        with pytest.raises(ValueError):
            plr(lm, chain, hyp, empty, hyp, 1.0)
