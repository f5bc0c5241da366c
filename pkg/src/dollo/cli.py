"""
Command-line interface.

    dollo simulate   scenario on a known tree -> matrix.csv + truth.json
    dollo infer      matrix + calibrations -> trace.tsv
    dollo summarize  trace -> clade support / age tables, consensus tree
    dollo ppc        trace + matrix -> predictive check report
    dollo two-leaf   pair counts -> distance estimate and posterior curve
    dollo diagnose   trace -> autocorrelation / ESS report

Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (clade_mrca_mean_age, clade_support, frequency_spectrum,
                       majority_consensus, posterior_predictive, singleton_counts)
from .io import (ParseError, parse_calibrations, parse_trait_matrix, write_manifest,
                 write_trait_matrix, write_truth)
from .likelihood import DataError, ObservationModel, two_leaf_mle, two_leaf_posterior_logpdf
from .mcmc import (ChainTrace, ConfigurationError, ModelConfig, Schedule, Tuning, diagnostics,
                   run_chain)
from .priors import PriorConfig
from .simulate import ScenarioError, scenario_from_code, simulate
from .tree import CalibrationSet, DatedTree, TreeError

log = logging.getLogger("dollo")

VALIDATION_ERRORS = (ParseError, DataError, TreeError, ConfigurationError, ScenarioError, ValueError)


def _outdir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _read_tree(arg: str) -> DatedTree:
    p = Path(arg)
    text = p.read_text(encoding="utf-8").strip() if p.exists() else arg
    return DatedTree.from_newick(text)


def cmd_simulate(args) -> int:
    tree = _read_tree(args.tree)
    obs = ObservationModel.parse(args.obs) if args.obs else None
    sc = scenario_from_code(args.scenario, tree, args.mu, args.seed, class_ratio=args.class_ratio,
                            meaning_classes=args.classes, obs=obs)
    result = simulate(sc)
    out = _outdir(args.out)
    write_trait_matrix(result.data, out / "matrix.csv")
    write_truth(result, out / "truth.json")
    write_manifest(out, "simulate", vars(args) | {"func": None},
                   [args.tree] if Path(args.tree).exists() else [], args.seed)
    print(f"{args.scenario}: {result.data.n_traits} traits on {tree.n_leaves} taxa -> {out}")
    return 0


def cmd_infer(args) -> int:
    data = parse_trait_matrix(args.data)
    if args.calibrations:
        cal = parse_calibrations(args.calibrations, data.taxa)
    else:
        cal = CalibrationSet()
    if not cal.has_upper_bound and args.mu is None and not args.allow_uncalibrated:
        log.error("no upper-bounded calibration: the time scale is unidentified and the "
                  "posterior may be improper; pass --allow-uncalibrated to run anyway")
        return 1
    model = ModelConfig(obs=args.obs, mu=args.mu)
    fit = data.thin(model.obs)
    if fit.n_traits < data.n_traits:
        log.info("%d traits below the %s threshold discarded", data.n_traits - fit.n_traits,
                 model.obs.name)
    data = fit
    prior = PriorConfig(kind=args.prior, T=args.T)
    schedule = Schedule(args.iterations, args.burn_in, args.thin)
    tuning = Tuning(root_window=args.root_window, mu_window=args.mu_window)
    weights = json.loads(args.weights) if args.weights else None
    trace = run_chain(data, cal, model, prior, schedule, args.seed, weights=weights, tuning=tuning,
                      progress=lambda it: log.info("iteration %d", it))
    out = _outdir(args.out)
    trace.write_tsv(out / "trace.tsv")
    write_manifest(out, "infer", vars(args) | {"func": None},
                   [args.data, args.calibrations], args.seed)
    rates = ", ".join(f"{k} {v:.2f}" for k, v in trace.acceptance_rates().items())
    print(f"recorded {len(trace)} states -> {out / 'trace.tsv'} (acceptance: {rates})")
    return 0


def _read_clades(path, taxa):
    if not path:
        return []
    return parse_calibrations(path, taxa).clades


def cmd_summarize(args) -> int:
    trace = ChainTrace.read_tsv(args.trace)
    if not len(trace):
        raise ConfigurationError("trace has no recorded states")
    taxa = trace.trees[0].names
    clades = _read_clades(args.clades, taxa)
    cons = majority_consensus(trace, args.threshold)
    rows = []
    for c in clades:
        p, se = clade_support(trace, c.taxa)
        age = clade_mrca_mean_age(trace, c.taxa)
        rows.append((c.name, p, se, age["mean"], age["se"], age["q025"], age["q975"]))
    for m in cons.clades():
        members = cons.taxa_of(m)
        if len(members) == len(taxa):
            name = "root"
        else:
            name = "+".join(sorted(members))
        age = clade_mrca_mean_age(trace, members)
        rows.append((name, cons.support[m], clade_support(trace, members)[1],
                     age["mean"], age["se"], age["q025"], age["q975"]))
    out = _outdir(args.out)
    header = "clade\tsupport\tsupport_se\tmean_age\tage_se\tage_q025\tage_q975"
    with open(out / "clades.tsv", "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(f"{r[0]}\t{r[1]:.6g}\t{r[2]:.3g}\t{r[3]:.6g}\t{r[4]:.3g}\t{r[5]:.6g}\t{r[6]:.6g}\n")
    width = max([len(r[0]) for r in rows] + [5])
    text = [f"{'clade':<{width}}  support        mean age (95% interval)"]
    for r in rows:
        text.append(f"{r[0]:<{width}}  {r[1]:6.3f}+/-{r[2]:.3f}  {r[3]:8.0f} ({r[5]:.0f}-{r[6]:.0f})")
    (out / "clades.txt").write_text("\n".join(text) + "\n", encoding="utf-8")
    (out / "consensus.nwk").write_text(cons.to_newick() + "\n", encoding="utf-8")
    write_manifest(out, "summarize", vars(args) | {"func": None}, [args.trace, args.clades])
    print("\n".join(text))
    return 0


def cmd_ppc(args) -> int:
    trace = ChainTrace.read_tsv(args.trace)
    data = parse_trait_matrix(args.data)
    obs = ObservationModel.parse(args.obs) if args.obs else ObservationModel[trace.meta.get("obs", "NOUNIQUE")]
    fit_data = data.thin(obs)
    report = posterior_predictive(trace, fit_data, obs, args.reps, args.seed)
    # singletons are compared against the full (unthinned) input
    report.singletons = singleton_counts(data)
    report.spectrum = frequency_spectrum(data)
    out = _outdir(args.out)
    (out / "ppc.tsv").write_text(report.to_tsv(), encoding="utf-8")
    (out / "ppc.txt").write_text(report.to_text(), encoding="utf-8")
    write_manifest(out, "ppc", vars(args) | {"func": None}, [args.trace, args.data], args.seed)
    print(report.to_text(), end="")
    flags = report.spectrum_flags()
    print(f"occupancy bins outside +/-2 sd: {flags.tolist() if flags.size else 'none'}")
    return 0


def cmd_two_leaf(args) -> int:
    mle = two_leaf_mle(args.n1, args.n2, args.n12, args.mu)
    print(f"{mle:.4f}" if math.isfinite(mle) else "inf")
    if args.out:
        top = args.max_len or (4 * mle if math.isfinite(mle) and mle > 0 else 10 / args.mu)
        grid = np.linspace(top / args.points, top, args.points)
        logp = np.array([two_leaf_posterior_logpdf(g, args.mu, args.n1, args.n2, args.n12) for g in grid])
        dens = np.exp(logp - logp.max())
        dens /= np.trapezoid(dens, grid)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(f"# mle: {float(mle)!r}\n")
            fh.write("length\tlog_density\tdensity\n")
            for g, lp, d in zip(grid, logp, dens):
                fh.write(f"{float(g)!r}\t{float(lp)!r}\t{float(d)!r}\n")
    return 0


def cmd_diagnose(args) -> int:
    trace = ChainTrace.read_tsv(args.trace)
    rep = diagnostics(trace)
    lines = ["series\tn\tmean\tsd\tiact\tess\treliable"]
    for name in ("mu", "t_root", "log_prior", "log_lkd"):
        e = rep[name]
        if e["degenerate"]:
            lines.append(f"{name}\t{e['n']}\tnan\tnan\tnan\tnan\tdegenerate")
        else:
            lines.append(f"{name}\t{e['n']}\t{e['mean']:.6g}\t{e['sd']:.6g}\t{e['iact']:.3f}"
                         f"\t{e['ess']:.1f}\t{'yes' if e['reliable'] else 'no'}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    for k, v in sorted(rep["acceptance"].items()):
        print(f"acceptance {k}: {v:.3f}")
    if args.out:
        out = _outdir(args.out)
        (out / "diagnostics.tsv").write_text(text, encoding="utf-8")
        with open(out / "acf.tsv", "w", encoding="utf-8") as fh:
            fh.write("lag\t" + "\t".join(("mu", "t_root", "log_prior", "log_lkd")) + "\n")
            acfs = [rep[k].get("acf") or [] for k in ("mu", "t_root", "log_prior", "log_lkd")]
            for lag in range(max(len(a) for a in acfs)):
                vals = [f"{a[lag]:.6g}" if lag < len(a) else "nan" for a in acfs]
                fh.write(f"{lag}\t" + "\t".join(vals) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dollo", description=__doc__.split("\n\n")[0].strip())
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate trait data under a scenario code")
    s.add_argument("--tree", required=True, help="Newick file or string, branch lengths in years")
    s.add_argument("--scenario", default="S/T/U200", help="S/X/Y code, e.g. S/G0.2/U200, S/MH50/U200")
    s.add_argument("--mu", type=float, required=True, help="death rate per year")
    s.add_argument("--class-ratio", type=float, default=1.4, help="lambda_k/mu_k for C<K> codes")
    s.add_argument("--classes", type=int, default=None, help="meaning classes for MH codes")
    s.add_argument("--obs", choices=["NOABSENT", "NOUNIQUE"], default=None)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("infer", help="sample the posterior of tree and death rate")
    s.add_argument("--data", required=True)
    s.add_argument("--calibrations", default=None)
    s.add_argument("--allow-uncalibrated", action="store_true")
    s.add_argument("--obs", choices=["NOABSENT", "NOUNIQUE"], default="NOUNIQUE")
    s.add_argument("--prior", choices=["uniform-root", "branching"], default="uniform-root")
    s.add_argument("--T", type=float, default=16000.0, help="upper limit on root age (years)")
    s.add_argument("--mu", type=float, default=None, help="fix the death rate")
    s.add_argument("--iterations", type=int, default=200_000)
    s.add_argument("--burn-in", type=int, default=None)
    s.add_argument("--thin", type=int, default=None)
    s.add_argument("--root-window", type=float, default=Tuning.root_window)
    s.add_argument("--mu-window", type=float, default=Tuning.mu_window)
    s.add_argument("--weights", default=None, help='JSON move weights, e.g. {"node_age": 1}')
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("summarize", help="clade support, clade ages, consensus tree")
    s.add_argument("--trace", required=True)
    s.add_argument("--clades", default=None, help="clade file (calibration format, bounds ignored)")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_summarize)

    s = sub.add_parser("ppc", help="posterior predictive singleton and frequency-spectrum checks")
    s.add_argument("--trace", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--obs", choices=["NOABSENT", "NOUNIQUE"], default=None,
                   help="observation model of the fit (default: from the trace)")
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ppc)

    s = sub.add_parser("two-leaf", help="two-taxon distance estimate and posterior curve")
    s.add_argument("--n1", type=int, required=True)
    s.add_argument("--n2", type=int, required=True)
    s.add_argument("--n12", type=int, required=True)
    s.add_argument("--mu", type=float, required=True)
    s.add_argument("--points", type=int, default=400)
    s.add_argument("--max-len", type=float, default=None)
    s.add_argument("--out", default=None, help="write the posterior curve TSV here")
    s.set_defaults(func=cmd_two_leaf)

    s = sub.add_parser("diagnose", help="autocorrelation and effective sample sizes")
    s.add_argument("--trace", required=True)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        log.error("%s", e)
        return 1
    except Exception as e:  # noqa: BLE001
        log.exception("runtime failure: %s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
