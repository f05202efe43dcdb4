"""Command line interface.

Exit codes: 0 success, 1 data or validation failure, 2 usage error.
Every stochastic command takes an explicit ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import bayes, compat, io, likelihood, mockexp, pvalues
from .binning import BinningError
from .response import ResponseBuilder

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2


class DataError(Exception):
    """Bad input data; reported with exit code 1."""


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _grid(text: str):
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError("grid must look like lo:hi:n") from None
    if n < 1 or hi < lo:
        raise argparse.ArgumentTypeError("grid needs n >= 1 and lo <= hi")
    return np.linspace(lo, hi, n)


# -- shared helpers -----------------------------------------------------------


def _dump_json(path: Optional[str], obj):
    text = json.dumps(obj, indent=2) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _truth_vector(path, ms) -> np.ndarray:
    vec = io.read_histogram(path)
    d = ms.truth_bins_filled.size
    if vec.size == d:
        return vec
    if vec.size == ms.n_truth_total:
        try:
            return ms.reduce(vec)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
    raise DataError(f"{path}: expected {d} (filled) or {ms.n_truth_total} (all) truth bins, got {vec.size}")


def _machine(args):
    bundle = io.load_bundle(args.bundle)
    problems = io.validate_bundle(bundle)
    if problems:
        raise DataError("inconsistent bundle: " + "; ".join(problems))
    lm = likelihood.LikelihoodMachine(bundle.data, bundle.matrix_set, mode=args.mode)
    return bundle, lm


def _background(bundle) -> Optional[np.ndarray]:
    if bundle.background_templates is None:
        return None
    return np.atleast_2d(bundle.background_templates).sum(axis=0)


def _template_hypothesis(args, bundle, lm):
    if not args.templates:
        raise DataError("need --templates")
    templates = np.array([_truth_vector(p, lm.matrices) for p in args.templates])
    return likelihood.TemplateHypothesis(templates, fixed=_background(bundle))


def _simple_truth(args, bundle, lm):
    mu = _truth_vector(args.truth, lm.matrices)
    bg = _background(bundle)
    return mu if bg is None else mu + bg


def _fit_config(args) -> likelihood.FitConfig:
    return likelihood.FitConfig(starts=args.starts)


def _builder_from_files(reco, truth, paths, sys_toys: Optional[int] = None) -> ResponseBuilder:
    builder = None
    for path in paths:
        cols = io.read_event_columns(path, tuple(truth.variables) + tuple(reco.variables))
        tw = io.toy_weight_matrix(cols)
        n_sys = sys_toys or (1 if tw is None else tw.shape[1])
        if builder is None:
            builder = ResponseBuilder(reco, truth, n_sys_toys=n_sys)
        builder.fill_arrays(
            {v: cols[v] for v in truth.variables},
            {v: cols[v] for v in reco.variables},
            weight=cols.get("weight"),
            toy_weights=tw,
        )
    return builder


# -- subcommands --------------------------------------------------------------


def cmd_mock(args):
    model = mockexp.MODELS[args.model]
    truth_seed, det_seed = np.random.SeedSequence(args.seed).spawn(2)
    events = mockexp.apply_detector(mockexp.generate_truth(model, args.n, truth_seed), det_seed)
    events["weight"] = np.ones(args.n)
    io.write_events_csv(args.out, events, ["true_x", "true_y", "reco_x", "weight"])


def cmd_build(args):
    reco, truth = io.read_binning(args.reco_binning), io.read_binning(args.truth_binning)
    builder = _builder_from_files(reco, truth, args.events)
    ms = builder.sample_toy_matrices(args.stat_toys, args.seed, mc_stat=not args.no_mc_stat)
    io.write_matrix_set(args.out, ms)


def cmd_histogram(args):
    binning = io.read_binning(args.binning)
    cols = io.read_event_columns(args.events, binning.variables)
    idx = binning.bin_indices(cols)
    weight = cols.get("weight", np.ones(idx.size))
    hist = np.bincount(idx[idx >= 0], weights=weight[idx >= 0], minlength=binning.n_bins)
    io.write_histogram(args.out, hist)


def cmd_validate(args):
    problems = io.validate_bundle(io.load_bundle(args.bundle))
    for p in problems:
        print(p)
    if problems:
        raise DataError(f"{len(problems)} problem(s) found")
    print("bundle is consistent")


def cmd_compat(args):
    reco_a, truth_a = io.read_binning(args.reco_binning), io.read_binning(args.truth_binning)
    reco_b = io.read_binning(args.b_reco_binning) if args.b_reco_binning else reco_a
    truth_b = io.read_binning(args.b_truth_binning) if args.b_truth_binning else truth_a
    a = _builder_from_files(reco_a, truth_a, [args.a], sys_toys=1)
    b = _builder_from_files(reco_b, truth_b, [args.b], sys_toys=1)
    report = compat.matrix_compatibility(a, b, args.samples, args.seed)
    _dump_json(args.out, report.to_dict())
    if args.hist:
        with open(args.hist, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["low", "high", "sampled_fraction", "chi2_expectation"])
            for row in compat.histogram_table(report, args.hist_bins):
                w.writerow([repr(v) for v in row])


def cmd_loglik(args):
    bundle, lm = _machine(args)
    mu = _simple_truth(args, bundle, lm)
    _dump_json(args.out, {"log_likelihood": lm.log_likelihood(mu), "mode": lm.mode})


def cmd_fit(args):
    bundle, lm = _machine(args)
    hyp = _template_hypothesis(args, bundle, lm)
    fit = likelihood.max_log_likelihood(lm, hyp, seed=args.seed, config=_fit_config(args))
    mu = hyp.translate(fit.theta)
    _dump_json(
        args.out,
        {"log_likelihood": fit.log_likelihood, "theta": [float(v) for v in fit.theta], "mode": lm.mode, "seed": args.seed},
    )
    if args.table:
        nu = lm.matrices.fold(mu)
        with open(args.table, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["reco_bin", "data", "prediction_mean", "prediction_std"])
            for i in range(lm.matrices.n_reco):
                w.writerow([i, repr(float(lm.data[i])), repr(float(nu[:, i].mean())), repr(float(nu[:, i].std()))])


def cmd_pvalue(args):
    bundle, lm = _machine(args)
    if args.truth:
        mu = _simple_truth(args, bundle, lm)
        result = pvalues.likelihood_p_value(lm, mu, args.replicas, args.seed)
    else:
        hyp = _template_hypothesis(args, bundle, lm)
        result = pvalues.max_likelihood_p_value(
            lm, hyp, args.replicas, args.seed, _fit_config(args), threads=args.threads
        )
    _dump_json(args.out, result.to_dict())


def cmd_scan(args):
    bundle, lm = _machine(args)
    hyp = _template_hypothesis(args, bundle, lm)
    if not 0 <= args.param < hyp.dim:
        raise DataError(f"--param must be in [0, {hyp.dim})")
    rows = pvalues.confidence_scan(
        lm, hyp, args.param, args.grid, args.replicas, args.seed, _fit_config(args), threads=args.threads
    )
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "p_value", "fit_logl", "status"])
        for r in rows:
            w.writerow([repr(r.value), repr(r.p_value), repr(r.fit_logl), r.status])
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_posterior(args):
    bundle, lm = _machine(args)
    hyp = _template_hypothesis(args, bundle, lm)
    chain = bayes.sample_posterior(
        lm, hyp, bayes.flat_log_prior(hyp), args.samples, args.burn, args.step, args.seed, tune=args.tune
    )
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step"] + [f"theta_{k}" for k in range(hyp.dim)] + ["toy_index", "log_post"])
        for s in range(len(chain)):
            w.writerow([s] + [repr(float(v)) for v in chain.thetas[s]] + [int(chain.toys[s]), repr(float(chain.log_post[s]))])
    finally:
        if fh is not sys.stdout:
            fh.close()
    print(f"acceptance rate {chain.acceptance_rate:.3f}", file=sys.stderr)


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foldkit", description="Forward-folding likelihood toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mock", help="generate mock events")
    p.add_argument("--model", choices=sorted(mockexp.MODELS), required=True)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mock)

    p = sub.add_parser("build", help="build a response matrix set from event files")
    p.add_argument("--reco-binning", required=True)
    p.add_argument("--truth-binning", required=True)
    p.add_argument("--events", nargs="+", required=True)
    p.add_argument("--stat-toys", type=_positive_int, required=True)
    p.add_argument("--no-mc-stat", action="store_true", help="use posterior-mean matrices only")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("histogram", help="bin event data into a histogram")
    p.add_argument("--binning", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_histogram)

    p = sub.add_parser("validate", help="check a publication bundle")
    p.add_argument("--bundle", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("compat", help="compatibility of two response matrices")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--reco-binning", required=True)
    p.add_argument("--truth-binning", required=True)
    p.add_argument("--b-reco-binning", help="reco binning for --b (default: same as --a)")
    p.add_argument("--b-truth-binning", help="truth binning for --b (default: same as --a)")
    p.add_argument("--samples", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.add_argument("--hist", help="CSV histogram of the sampled distances")
    p.add_argument("--hist-bins", type=_positive_int, default=50)
    p.set_defaults(func=cmd_compat)

    def analysis(name, helptext, func, truth=False, templates=False, stochastic=False):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--bundle", required=True)
        p.add_argument("--mode", choices=likelihood.MODES, default="marginal")
        p.add_argument("--out")
        if truth:
            p.add_argument("--truth", required=not templates)
        if templates:
            p.add_argument("--templates", nargs="+")
            p.add_argument("--starts", type=_positive_int, default=3)
        if stochastic:
            p.add_argument("--seed", type=int, required=True)
        p.set_defaults(func=func)
        return p

    analysis("loglik", "log-likelihood of a truth vector", cmd_loglik, truth=True)
    p = analysis("fit", "maximum-likelihood template fit", cmd_fit, templates=True, stochastic=True)
    p.add_argument("--table", help="CSV of predicted vs observed reco counts")
    for name, helptext, func, extra in (
        ("pvalue", "toy Monte Carlo p-value", cmd_pvalue, True),
        ("scan", "confidence scan of one template weight", cmd_scan, False),
    ):
        p = analysis(name, helptext, func, truth=extra, templates=True, stochastic=True)
        p.add_argument("--replicas", type=_positive_int, default=1000)
        p.add_argument("--threads", type=_positive_int, default=1)
        if name == "scan":
            p.add_argument("--param", type=int, default=0)
            p.add_argument("--grid", type=_grid, required=True)
    p = analysis("posterior", "MCMC posterior of template weights", cmd_posterior, templates=True, stochastic=True)
    p.add_argument("--samples", type=_positive_int, default=10000)
    p.add_argument("--burn", type=int, default=1000)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--tune", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if getattr(args, "command", None) == "pvalue" and not (args.truth or args.templates):
        print("foldkit pvalue: need --truth or --templates", file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except (DataError, io.FormatError, BinningError, likelihood.HypothesisError, pvalues.UntestableError,
            pvalues.FitError, ValueError, OSError) as exc:
        print(f"foldkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
