"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``CRITERION n: PASS|FAIL ...`` line (visible even
with output capture on) and then asserts. Run with::

    pytest tests/test_acceptance.py -v

or ``python tests/test_acceptance.py``.
"""

import bisect
import math
import time

import mpmath
import numpy as np
import pytest
from scipy import stats

from foldkit import io
from foldkit.bayes import flat_log_prior, sample_posterior
from foldkit.binning import Binning
from foldkit.cli import main as cli_main
from foldkit.compat import matrix_compatibility
from foldkit.likelihood import (
    FitConfig,
    LikelihoodMachine,
    TemplateHypothesis,
    log_mean_exp,
    max_log_likelihood,
    poisson_log_likelihood,
)
from foldkit.mockexp import (
    MODEL_A,
    MODEL_B,
    apply_detector,
    default_binnings,
    generate_truth,
    truth_x_only_binning,
)
from foldkit.pvalues import confidence_scan, generate_toy_data, likelihood_p_value, max_likelihood_p_value
from foldkit.response import ResponseBuilder, ResponseMatrixSet

INF = math.inf
FAST = FitConfig(starts=1, replica_starts=0)


@pytest.fixture
def report(capsys):
    def _report(number, ok, detail, t0):
        with capsys.disabled():
            status = "PASS" if ok else "FAIL"
            print(f"\nCRITERION {number}: {status} ({detail}; {time.time() - t0:.1f}s)")
        assert ok, detail

    return _report


def fill(reco, truth, events):
    b = ResponseBuilder(reco, truth)
    return b.fill_arrays({v: events[v] for v in truth.variables}, {v: events[v] for v in reco.variables})


def unit_set():
    return ResponseMatrixSet(np.ones((1, 1, 1)), sim_truth_counts=np.array([1e6]))


# -- 1 -------------------------------------------------------------------------


def _hand_params(events, reco_edges, truth_edges, n_reco, n_truth, alpha_prior):
    """Posterior parameters by direct counting over python tuples."""
    n_j = [0] * n_truth
    n_ij = [[0] * n_truth for _ in range(n_reco)]
    for tx, rx in events:
        j = bisect.bisect_right(truth_edges, tx) - 1
        if not 0 <= j < n_truth:
            continue
        n_j[j] += 1
        if rx is None:
            continue
        i = bisect.bisect_right(reco_edges, rx) - 1
        if 0 <= i < n_reco:
            n_ij[i][j] += 1
    out = []
    for j in range(n_truth):
        sel = sum(n_ij[i][j] for i in range(n_reco))
        out.append((1 + sel, 1 + n_j[j] - sel, [alpha_prior + n_ij[i][j] for i in range(n_reco)]))
    return out


def test_criterion_1_conjugate_exactness(report):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    bad = 0
    for case in range(20):
        n_reco, n_truth = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        reco_edges = sorted(rng.choice(np.arange(-5, 6), n_reco + 1, replace=False).astype(float).tolist())
        truth_edges = sorted(rng.choice(np.arange(-5, 6), n_truth + 1, replace=False).astype(float).tolist())
        n = int(rng.integers(0, 40))
        tx = rng.integers(-6, 7, n) + 0.5
        rx = np.where(rng.random(n) < 0.7, rng.integers(-6, 7, n) + 0.5, np.nan)
        reco = Binning(("rx",), (tuple(reco_edges),))
        truth = Binning(("tx",), (tuple(truth_edges),))
        b = ResponseBuilder(reco, truth).fill_arrays({"tx": tx}, {"rx": rx})
        events = [(float(t), None if math.isnan(r) else float(r)) for t, r in zip(tx, rx)]
        expect = _hand_params(events, reco_edges, truth_edges, n_reco, n_truth, b.alpha_prior)
        assert b.alpha_prior == min(1.0, 3.0 / n_reco)
        for j, (bs, bd, alpha) in enumerate(expect):
            got = b.posterior_params(0, j)
            if got[0] != bs or got[1] != bd or got[2].tolist() != alpha:
                bad += 1
    report(1, bad == 0, f"{bad} mismatching truth bins over 20 random builders", t0)


# -- 2 -------------------------------------------------------------------------


def test_criterion_2_likelihood_oracle(report):
    t0 = time.time()
    rng = np.random.default_rng(7)
    mpmath.mp.dps = 40
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(0, 51))
        nu = float(rng.uniform(1e-6, 50))
        exact = n * mpmath.log(mpmath.mpf(nu)) - mpmath.mpf(nu) - mpmath.loggamma(n + 1)
        worst = max(worst, abs(poisson_log_likelihood([n], [nu]) - float(exact)))
    worst_lme = 0.0
    for size in range(1, 101):
        values = rng.uniform(-200, 0, size)
        direct = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in values) / size)
        worst_lme = max(worst_lme, abs(float(log_mean_exp(values)) - float(direct)))
    ok = worst < 1e-9 and worst_lme < 1e-9
    report(2, ok, f"max |error| pmf {worst:.1e}, log-mean-exp {worst_lme:.1e}", t0)


# -- 3 -------------------------------------------------------------------------


def test_criterion_3_pvalue_calibration(report):
    t0 = time.time()
    rng = np.random.default_rng(3)
    ms = ResponseMatrixSet(rng.uniform(0.1, 1.0, (1, 5, 3)), np.full(3, 1e6))
    mu = np.array([40.0, 25.0, 30.0])
    datasets = generate_toy_data(ms, mu, 500, 31337)
    ps = np.array([likelihood_p_value(LikelihoodMachine(d, ms), mu, 999, 1000 + k).p for k, d in enumerate(datasets)])
    ks = stats.kstest(ps, "uniform").pvalue
    elapsed = time.time() - t0
    report(3, ks > 0.01 and elapsed <= 180, f"KS p = {ks:.3f} over 500 data sets x 999 replicas", t0)


# -- 4 -------------------------------------------------------------------------

ALPHA_1SIGMA = 1 - 0.682689492137086


def neyman_lr_interval(n_obs, alpha, step=0.01, lo=0.01, hi=12.0):
    """Brute-force likelihood-ratio ordered Neyman belt for a Poisson mean."""
    ns = np.arange(0, 200)
    best = stats.poisson.logpmf(ns, np.maximum(ns, 1e-300))
    accepted = []
    for mu in np.arange(lo, hi + step / 2, step):
        logpmf = stats.poisson.logpmf(ns, mu)
        lr = logpmf - best
        p = np.exp(logpmf[lr <= lr[n_obs] + 1e-12]).sum()
        if p >= alpha:
            accepted.append(mu)
    return min(accepted), max(accepted)


def test_criterion_4_poisson_interval(report):
    t0 = time.time()
    lo, hi = neyman_lr_interval(4, ALPHA_1SIGMA)
    step = 0.01
    window = np.arange(-5, 6) * step
    grid = sorted(set(np.round(np.concatenate([[1.0, 1.5, 3.0, 4.0, 5.0, 6.0, 8.0, 9.0], lo + window, hi + window]), 6)))
    lm = LikelihoodMachine([4], unit_set())
    hyp = TemplateHypothesis([[1.0]])
    rows = confidence_scan(lm, hyp, 0, grid, 10_000, 4, FAST)
    accepted = [r.value for r in rows if r.p_value >= ALPHA_1SIGMA]
    s_lo, s_hi = min(accepted), max(accepted)
    contiguous = all(r.p_value >= ALPHA_1SIGMA for r in rows if s_lo <= r.value <= s_hi)
    near = abs(s_lo - lo) <= step + 1e-9 and abs(s_hi - hi) <= step + 1e-9
    inside = 2.086 <= s_lo and s_hi <= 7.163
    detail = (
        f"scan [{s_lo:.2f}, {s_hi:.2f}], Neyman oracle [{lo:.2f}, {hi:.2f}], "
        f"inside [2.086, 7.163]: {inside}"
    )
    report(4, near and contiguous and inside, detail, t0)


# -- 5 -------------------------------------------------------------------------


def coarse_binnings():
    reco = Binning(("reco_x",), ((-INF, -1.0, 0.0, 1.0, INF),))
    truth = Binning(("true_x", "true_y"), ((-INF, -0.5, 0.5, INF), (-INF, 0.0, INF)))
    return reco, truth


def test_criterion_5_mahalanobis_chi2_limit(report):
    t0 = time.time()
    reco, truth = coarse_binnings()
    good, ks_first = 0, None
    for s in range(10):
        ev = apply_detector(generate_truth(MODEL_B, 200_000, 10 + s), 500 + s)
        even = {k: v[0::2] for k, v in ev.items()}
        odd = {k: v[1::2] for k, v in ev.items()}
        rep = matrix_compatibility(fill(reco, truth, even), fill(reco, truth, odd), 10_000, s)
        if ks_first is None:
            ks_first = stats.kstest(rep.sample_d_sq, stats.chi2(rep.dof).cdf).pvalue
        good += rep.c_chi2 > 0.05
    ok = ks_first > 0.01 and good >= 9
    report(5, ok, f"KS p = {ks_first:.3f}; c_chi2 > 0.05 in {good}/10 seeds", t0)


# -- 6 -------------------------------------------------------------------------


def test_criterion_6_model_dependence(report):
    t0 = time.time()
    reco, truth = default_binnings()
    x_only = truth_x_only_binning()
    low, high = 0, 0
    cs_x, cs_xy = [], []
    for s in range(10):
        a = apply_detector(generate_truth(MODEL_A, 100_000, 2 * s), 1000 + s)
        b = apply_detector(generate_truth(MODEL_B, 100_000, 2 * s + 1), 2000 + s)
        c_x = matrix_compatibility(fill(reco, x_only, a), fill(reco, x_only, b), 5000, s).c_chi2
        c_xy = matrix_compatibility(fill(reco, truth, a), fill(reco, truth, b), 5000, s).c_chi2
        cs_x.append(c_x)
        cs_xy.append(c_xy)
        low += c_x < 0.003
        high += c_xy > 0.05
    ok = low >= 8 and high >= 8 and time.time() - t0 <= 300
    detail = f"x only: C < 0.003 in {low}/10 (max {max(cs_x):.1e}); x,y: C > 0.05 in {high}/10 (min {min(cs_xy):.2f})"
    report(6, ok, detail, t0)


# -- 7 -------------------------------------------------------------------------


def test_criterion_7_efficiency_split(report):
    t0 = time.time()
    n = 100_000
    expect_a = 0.9 * stats.norm.cdf(0.2 / math.sqrt(2))
    expect_b = 0.45
    frac = {}
    for name, model, seeds in (("A", MODEL_A, (71, 72)), ("B", MODEL_B, (73, 74))):
        ev = apply_detector(generate_truth(model, n, seeds[0]), seeds[1])
        frac[name] = float(np.mean(~np.isnan(ev["reco_x"])))
    ok_a = abs(frac["A"] - expect_a) < 3 * math.sqrt(expect_a * (1 - expect_a) / n)
    ok_b = abs(frac["B"] - expect_b) < 3 * math.sqrt(expect_b * (1 - expect_b) / n)
    detail = f"A {frac['A']:.4f} (expect {expect_a:.4f}), B {frac['B']:.4f} (expect {expect_b:.4f})"
    report(7, ok_a and ok_b, detail, t0)


# -- 8 and 9 share the example-analysis setup -----------------------------------


@pytest.fixture(scope="module")
def example_setup():
    reco, truth = default_binnings()
    a = apply_detector(generate_truth(MODEL_A, 100_000, 101), 102)
    b = apply_detector(generate_truth(MODEL_B, 100_000, 103), 104)
    builder = fill(reco, truth, a)
    builder += fill(reco, truth, b)
    ms = builder.sample_toy_matrices(50, 105)

    def template(ev):
        h = np.bincount(truth.bin_indices(ev), minlength=truth.n_bins).astype(float)
        return ms.reduce(h / h.sum())

    return reco, ms, TemplateHypothesis([template(a)]), TemplateHypothesis([template(b)])


def test_criterion_8_example_analysis(report, example_setup):
    t0 = time.time()
    reco, ms, hyp_a, hyp_b = example_setup
    b_ok, a_below, ratios = 0, 0, []
    for s in range(10):
        d = apply_detector(generate_truth(MODEL_B, 2000, 200 + s), 300 + s)
        idx = reco.bin_indices(d)
        lm = LikelihoodMachine(np.bincount(idx[idx >= 0], minlength=reco.n_bins), ms)
        p_a = max_likelihood_p_value(lm, hyp_a, 200, s, FAST).p
        p_b = max_likelihood_p_value(lm, hyp_b, 200, s, FAST).p
        b_ok += p_b > 0.01
        a_below += p_a < p_b
        fit_a = max_log_likelihood(lm, hyp_a, seed=s)
        fit_b = max_log_likelihood(lm, hyp_b, seed=s)
        ratios.append(fit_a.theta[0] / fit_b.theta[0])
    expect = 0.45 / (0.9 * stats.norm.cdf(0.2 / math.sqrt(2)))
    ratio = float(np.median(ratios))
    ok = b_ok >= 9 and a_below >= 7 and abs(ratio / expect - 1) <= 0.10 and time.time() - t0 <= 600
    detail = f"p_B > 0.01 in {b_ok}/10, p_A < p_B in {a_below}/10, median theta_A/theta_B {ratio:.3f} vs {expect:.3f}"
    report(8, ok, detail, t0)


def test_criterion_9_coverage(report, example_setup):
    t0 = time.time()
    _, ms, _, hyp_b = example_setup
    theta_true = 2000.0
    pseudo = generate_toy_data(ms, hyp_b.translate([theta_true]), 200, 999)
    covered = 0
    for k, d in enumerate(pseudo):
        # a one-point scan: the 90% interval covers theta_true iff p(theta_true) >= 0.1
        row = confidence_scan(LikelihoodMachine(d, ms), hyp_b, 0, [theta_true], 200, 5000 + k, FAST)[0]
        covered += row.status == "ok" and row.p_value >= 0.1
    frac = covered / 200
    ok = 0.85 <= frac <= 0.95 and time.time() - t0 <= 600
    report(9, ok, f"coverage {frac:.3f} over 200 pseudo-experiments", t0)


# -- 10 ------------------------------------------------------------------------


def test_criterion_10_mcmc_oracle(report):
    t0 = time.time()
    n = 4
    lm = LikelihoodMachine([n], unit_set())
    hyp = TemplateHypothesis([[1.0]])
    chain = sample_posterior(lm, hyp, flat_log_prior(hyp), 100_000, 2000, 2.5, 10)
    x = chain.thetas[:, 0]
    batches = np.array_split(x, 50)
    se_mean = np.std([b.mean() for b in batches], ddof=1) / math.sqrt(50)
    se_var = np.std([b.var() for b in batches], ddof=1) / math.sqrt(50)
    target = stats.gamma(n + 1)
    ok_mean = abs(x.mean() - target.mean()) < 3 * se_mean
    ok_var = abs(x.var() - target.var()) < 3 * se_var
    ks = stats.kstest(x[::25], target.cdf).pvalue
    detail = f"mean {x.mean():.3f} (SE {se_mean:.3f}), var {x.var():.3f} (SE {se_var:.3f}), KS p {ks:.3f}"
    report(10, ok_mean and ok_var and ks > 0.01, detail, t0)


# -- 11 ------------------------------------------------------------------------


def test_criterion_11_cli_determinism(report, tmp_path):
    t0 = time.time()
    d = tmp_path
    reco, truth = default_binnings()
    io.write_binning(d / "reco.yml", reco)
    io.write_binning(d / "truth.yml", truth)
    io.write_binning(d / "truth-x.yml", truth_x_only_binning())
    for model, seed, n in (("A", 1, 4000), ("B", 2, 4000), ("B", 3, 500)):
        assert cli_main(["mock", "--model", model, "--n", str(n), "--seed", str(seed), "--out", str(d / f"{model}{seed}.csv")]) == 0
    bundle = d / "bundle"
    bundle.mkdir()
    io.write_binning(bundle / "reco-binning.yml", reco)
    io.write_binning(bundle / "truth-binning.yml", truth)
    setup = [
        ["build", "--reco-binning", d / "reco.yml", "--truth-binning", d / "truth.yml", "--events", d / "A1.csv",
         d / "B2.csv", "--stat-toys", 4, "--seed", 5, "--out", bundle / "response.json"],
        ["histogram", "--binning", d / "reco.yml", "--events", d / "B3.csv", "--out", bundle / "data.json"],
        ["histogram", "--binning", d / "truth.yml", "--events", d / "B2.csv", "--out", d / "tB.json"],
    ]
    for argv in setup:
        assert cli_main([str(a) for a in argv]) == 0
    b = bundle
    commands = {
        "mock": ["mock", "--model", "A", "--n", 300, "--seed", 4, "--out"],
        "build": ["build", "--reco-binning", d / "reco.yml", "--truth-binning", d / "truth.yml", "--events",
                  d / "A1.csv", "--stat-toys", 3, "--seed", 3, "--out"],
        "histogram": ["histogram", "--binning", d / "reco.yml", "--events", d / "B3.csv", "--out"],
        "compat": ["compat", "--a", d / "A1.csv", "--b", d / "B2.csv", "--reco-binning", d / "reco.yml",
                   "--truth-binning", d / "truth-x.yml", "--samples", 200, "--seed", 2, "--out"],
        "loglik": ["loglik", "--bundle", b, "--truth", d / "tB.json", "--mode", "profile", "--out"],
        "fit": ["fit", "--bundle", b, "--templates", d / "tB.json", "--seed", 2, "--out"],
        "pvalue": ["pvalue", "--bundle", b, "--templates", d / "tB.json", "--replicas", 100, "--threads", 3,
                   "--seed", 2, "--out"],
        "scan": ["scan", "--bundle", b, "--templates", d / "tB.json", "--grid", "0.1:0.13:3", "--replicas", 100,
                 "--seed", 2, "--out"],
        "posterior": ["posterior", "--bundle", b, "--templates", d / "tB.json", "--samples", 300, "--burn", 20,
                      "--step", 0.01, "--seed", 2, "--out"],
    }
    differing = []
    for name, argv in commands.items():
        outs = [d / f"out-{name}-{k}" for k in range(2)]
        for out in outs:
            assert cli_main([str(a) for a in argv + [out]]) == 0, name
        if outs[0].read_bytes() != outs[1].read_bytes():
            differing.append(name)
    detail = f"{len(commands) - len(differing)}/{len(commands)} commands byte-identical"
    if differing:
        detail += f", differing: {differing}"
    report(11, not differing, detail, t0)


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(pytest.main([__file__, "-v"]))
