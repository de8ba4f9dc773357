"""Command-line interface: ``gpcausal fit | simulate | oracle``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure
(including a failed verification check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .estimands import summarize_ate, summarize_subjects
from .io import DataError, RunManifest, SpecError, ingest_csv, read_kv, write_table
from .kernels import NotPositiveDefiniteError
from .mcmc import McmcConfig, McmcError, PosteriorDraws, run_chains
from .model import SCALARS, HyperPriorConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("gpcausal")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'a,b', got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two numbers, got {text!r}") from None


def _assignment(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gpcausal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit the GP model to a CSV file")
    f.add_argument("--input", "-i", help="CSV file with a header row")
    f.add_argument("--outcome", help="outcome column")
    f.add_argument("--treatment", help="treatment column (0/1)")
    f.add_argument("--covariates", help="comma-separated covariate columns (default: all others)")
    f.add_argument("--key", help="optional column used to order the per-subject table (e.g. a propensity score)")
    f.add_argument("--outcome-type", choices=("continuous", "binary"), default="continuous")
    f.add_argument("--chains", type=int, default=4)
    f.add_argument("--burnin", type=int, default=10_000)
    f.add_argument("--kept", type=int, default=20_000, help="post-burn-in iterations per chain")
    f.add_argument("--thin", type=int, default=80)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--no-adapt", action="store_true", help="keep proposal scales fixed during burn-in")
    f.add_argument("--conjugate-sigma2", action="store_true", help="Gibbs update for sigma2 instead of MH")
    f.add_argument("--collapse-delta", action="store_true",
                   help="update l_delta and eta_delta with the treatment-effect surface integrated out")
    f.add_argument("--sigma2-beta", type=float, help="prior variance of the mean coefficients")
    f.add_argument("--prior", action="append", type=_assignment, default=[], metavar="NAME=A,B",
                   help=f"hyperprior override; NAME in {', '.join(SCALARS)} (repeatable)")
    f.add_argument("--proposal-sd", action="append", type=_assignment, default=[], metavar="NAME=TAU",
                   help="initial MH proposal scale (repeatable)")
    f.add_argument("--level", type=float, default=0.95, help="credible level")
    f.add_argument("--workers", type=int, help="worker processes (default: $GPCAUSAL_WORKERS or 1)")
    f.add_argument("--manifest", help="rerun exactly the settings recorded in this manifest")
    f.add_argument("--out", "-o", required=True, help="output directory")

    s = sub.add_parser("simulate", help="run a simulation scenario from a key = value spec file")
    s.add_argument("spec", help="scenario spec file")
    s.add_argument("--out", "-o", required=True, help="output directory")
    s.add_argument("--workers", type=int)

    o = sub.add_parser("oracle", help="run the verification suite")
    o.add_argument("--only", action="append", help="run only this check (repeatable)")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--geweke-sweeps", type=int, default=50_000)
    return p


# --------------------------------------------------------------------------
# fit


def _fit_settings(args) -> dict:
    if args.manifest:
        m = RunManifest.read(args.manifest)
        if m.command != "fit":
            raise SpecError(f"{args.manifest} is a {m.command!r} manifest, not a fit manifest")
        return m.settings
    missing = [flag for flag, v in (("--input", args.input), ("--outcome", args.outcome),
                                    ("--treatment", args.treatment)) if not v]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    hyper = HyperPriorConfig().to_dict()
    if args.sigma2_beta is not None:
        hyper["sigma2_beta"] = args.sigma2_beta
    for name, value in args.prior:
        if name not in SCALARS:
            raise UsageError(f"unknown prior {name!r}; choose from {', '.join(SCALARS)}")
        try:
            hyper[name] = list(_pair(value))
        except argparse.ArgumentTypeError as exc:
            raise UsageError(str(exc)) from None
    for name, value in args.proposal_sd:
        if name not in SCALARS:
            raise UsageError(f"unknown parameter {name!r}; choose from {', '.join(SCALARS)}")
        try:
            hyper["proposal_sd"][name] = float(value)
        except ValueError:
            raise UsageError(f"proposal scale for {name} must be a number") from None
    covariates = [c.strip() for c in args.covariates.split(",")] if args.covariates else None
    return {
        "input": os.path.abspath(args.input),
        "outcome": args.outcome,
        "treatment": args.treatment,
        "covariates": covariates,
        "key": args.key,
        "outcome_type": args.outcome_type,
        "level": args.level,
        "hyper": hyper,
        "mcmc": {
            "n_burnin": args.burnin,
            "n_kept_iterations": args.kept,
            "thin": args.thin,
            "n_chains": args.chains,
            "adapt": not args.no_adapt,
            "seed": args.seed,
            "conjugate_sigma2": args.conjugate_sigma2,
            "collapse_delta": args.collapse_delta,
        },
    }


def _draw_rows(draws: PosteriorDraws):
    binary = draws.mode == "binary"
    header = ["chain", "iteration"] + (["p1", "p0", "rd"] if binary else ["psi"]) + list(SCALARS)
    rows = []
    for j in range(len(draws)):
        head = [int(draws.chain[j]), int(draws.iteration[j])]
        est = [draws.p1[j], draws.p0[j], draws.psi[j]] if binary else [draws.psi[j]]
        rows.append(head + est + [draws.hyper[k][j] for k in SCALARS])
    return header, rows


def cmd_fit(args) -> int:
    settings = _fit_settings(args)
    try:
        hp = HyperPriorConfig.from_dict(settings["hyper"])
        mc = dict(settings["mcmc"])
        config = McmcConfig(**mc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid settings: {exc}") from None
    t0 = time.perf_counter()
    ing = ingest_csv(settings["input"], settings["outcome"], settings["treatment"],
                     settings["covariates"], kind=settings["outcome_type"], key=settings.get("key"))
    expected = settings.get("input_sha256")
    if expected and expected != ing.sha256:
        log.warning("input file digest differs from the manifest; draws will not match the original run")
    settings = dict(settings, covariates=list(ing.standardization.columns), input_sha256=ing.sha256)

    chains = run_chains(ing.dataset, hp, config, mode=settings["outcome_type"], workers=args.workers)
    draws = PosteriorDraws.pool([c.draws for c in chains])
    summary = summarize_ate(draws, level=settings["level"])
    subjects = summarize_subjects(draws, key=ing.key)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header, rows = _draw_rows(draws)
    write_table(out / "draws.csv", header, rows)
    write_table(
        out / "summary.csv",
        ["estimand", "estimate", "sd", "ci_low", "ci_high", "median", "level", "n_draws"],
        [["risk_difference" if draws.mode == "binary" else "ate", summary.estimate, summary.sd,
          summary.ci_low, summary.ci_high, summary.median, settings["level"], summary.n_draws]],
    )
    key_col = subjects.key if subjects.key is not None else [""] * len(subjects.index)
    write_table(
        out / "subjects.csv",
        ["subject", "key", "delta_mean", "delta_sd", "scale"],
        [[int(i), k, m, s, "latent" if subjects.latent_scale else "outcome"]
         for i, k, m, s in zip(subjects.index, key_col, subjects.mean, subjects.sd)],
    )
    manifest = RunManifest(
        command="fit",
        version=__version__,
        settings=settings,
        input={"path": settings["input"], "sha256": ing.sha256, "n": ing.dataset.n},
        standardization=ing.standardization.to_dict(),
        chains=[c.diagnostics() for c in chains],
        timing={"total_seconds": time.perf_counter() - t0,
                "python": platform.python_version(), "numpy": np.__version__},
        outputs={"draws": "draws.csv", "summary": "summary.csv", "subjects": "subjects.csv"},
    )
    manifest.write(out / "manifest.json")
    for c in chains:
        lo, hi = config.accept_band
        off = {k: round(v, 3) for k, v in c.acceptance.items() if not lo <= v <= hi}
        if off:
            log.warning("chain %d: acceptance outside [%g, %g]: %s", c.chain_id, lo, hi, off)
    print(f"{'risk difference' if draws.mode == 'binary' else 'ATE'} {summary.estimate:.4f} "
          f"(sd {summary.sd:.4f}, {int(settings['level'] * 100)}% CI [{summary.ci_low:.4f}, {summary.ci_high:.4f}]) "
          f"from {summary.n_draws} draws; outputs in {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    from .simulation import run_replications, scenario_from_kv

    spec = scenario_from_kv(read_kv(args.spec))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(k, rows):
        log.info("replication %d/%d done", k, spec.n_replications)

    workers = args.workers
    report = run_replications(spec, workers=workers, progress=progress if not workers or workers <= 1 else None)
    header, body = report.table()
    write_table(out / "report.csv", header, body)
    write_table(
        out / "replications.csv",
        ["method", "k", "truth", "estimate", "sd", "ci_low", "ci_high", "covered", "failed", "error"],
        [[r.method, r.k, r.truth, r.estimate, r.sd, r.ci_low, r.ci_high, r.covered, r.failed, r.error]
         for r in report.rows],
    )
    RunManifest(
        command="simulate",
        version=__version__,
        settings=spec.to_dict(),
        input={"spec": os.path.abspath(args.spec)},
        timing={"total_seconds": report.wall_time},
        outputs={"report": "report.csv", "replications": "replications.csv"},
    ).write(out / "manifest.json")
    print(",".join(header))
    for row in body:
        print(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    if not report.valid:
        print("report invalid: more than 2% of replications failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


# --------------------------------------------------------------------------
# oracle


def cmd_oracle(args) -> int:
    from .oracle import CHECKS, run_checks

    only = args.only
    if only:
        bad = [n for n in only if n not in CHECKS]
        if bad:
            raise UsageError(f"unknown check(s) {', '.join(bad)}; choose from {', '.join(CHECKS)}")
    results = run_checks(only=only, seed=args.seed, geweke_sweeps=args.geweke_sweeps)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<13} {r.seconds:8.2f}s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "oracle": cmd_oracle}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"gpcausal {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return EXIT_DATA
    except (McmcError, NotPositiveDefiniteError, FloatingPointError) as exc:
        print(f"gpcausal {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # remaining validation failures come from the data (e.g. Dataset invariants)
        print(json.dumps({"error": "data_error", "message": str(exc)}), file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
