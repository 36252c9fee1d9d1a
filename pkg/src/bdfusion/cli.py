"""Command-line front end.

Every command accepts ``--config FILE`` (YAML or JSON) whose keys are the
long flag names; explicit flags override file values. The fully resolved
configuration is written next to the outputs as ``config.json``.

Exit codes: 0 success, 2 convergence warning suppressed by
``--allow-nonconverged``, 3 R-hat above threshold, 4 usage or config error,
5 I/O error, 6 identification error, 7 model-fitting error, 8 other
estimation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import corrections, estimands
from .errors import (BDFError, CellSparsityError, IdentificationError, PriorError, SamplerError,
                     SeparationError, SingularInformationError, StructuralError)
from .io import ensure_dir, read_csv, write_csv
from .mle import fit_external_models
from .model import ModelSpec
from .posterior import SamplerConfig, sample_posterior
from .prior import GaussianPrior, build_prior
from .simulation import (DeltaFlags, GenerativeCoefficients, ScenarioConfig, generate_dataset,
                         run_study)

EXIT_OK, EXIT_SUPPRESSED, EXIT_RHAT, EXIT_USAGE, EXIT_IO, EXIT_IDENT, EXIT_FIT, EXIT_ESTIMATE = 0, 2, 3, 4, 5, 6, 7, 8
RHAT_THRESHOLD = 1.1

log = logging.getLogger("bdfusion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(s):
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "y", "on"):
        return True
    if v in ("0", "false", "no", "n", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {s!r}")


def _add_spec(p):
    p.add_argument("--interaction", type=_bool, default=False, help="include the a*m term in the Y model")
    p.add_argument("--exposure-induced", type=_bool, default=True, help="U depends on A")
    p.add_argument("--structure", choices=("mediation", "tvc"), default="mediation")


def _add_sampler(p):
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--leapfrog-steps", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="bdfusion", description="Bayesian data fusion for unmeasured confounding")
    root.add_argument("-v", "--verbose", action="store_true")
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a main/external dataset pair")
    p.add_argument("--config")
    p.add_argument("--n1", type=int, default=1000)
    p.add_argument("--n2", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta-ua", type=_bool, default=True)
    p.add_argument("--delta-yam", type=_bool, default=False)
    p.add_argument("--transportable", type=_bool, default=True)
    p.add_argument("--out", default=".")

    p = sub.add_parser("fit-prior", help="fit external-data models and write prior.json")
    p.add_argument("--config")
    p.add_argument("--external", required=False)
    _add_spec(p)
    p.add_argument("--inflate-sigma", type=float, default=None)
    p.add_argument("--out", default="prior.json")

    p = sub.add_parser("estimate", help="sample the posterior and estimate a contrast")
    p.add_argument("--config")
    p.add_argument("--main")
    p.add_argument("--prior")
    p.add_argument("--estimand", choices=tuple(estimands.ESTIMATORS), default="rNDE")
    p.add_argument("--method", choices=("sim", "cf"), default="cf")
    p.add_argument("--levels", type=int, nargs="+", default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_sampler(p)
    p.add_argument("--allow-nonconverged", action="store_true")
    p.add_argument("--out", default=".")

    p = sub.add_parser("correct", help="naive estimate or a frequentist bias correction")
    p.add_argument("--config")
    p.add_argument("--main")
    p.add_argument("--external")
    p.add_argument("--method", choices=("naive", "dg", "ix"), default="naive")
    p.add_argument("--n-boot", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    _add_spec(p)
    p.add_argument("--out", default=".")

    p = sub.add_parser("study", help="run a simulation study grid")
    p.add_argument("--config")
    p.add_argument("--out", default=".")
    p.add_argument("--replicates", type=int, default=None, help="override every scenario's replicate count")
    p.add_argument("--per-replicate", type=_bool, default=True)
    return root


def _load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    doc = yaml.safe_load(text) if not str(path).endswith(".json") else json.loads(text)
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a mapping")
    return doc


def _sub_parser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse(argv):
    """Parse ``argv`` with config-file defaults; returns (namespace, subcommand parser)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = _sub_parser(parser, args.command)
    if getattr(args, "config", None) and args.command != "study":
        doc = _load_config(args.config)
        dests = {a.dest: a for a in sub._actions if a.option_strings}
        defaults = {}
        for key, val in doc.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in dests or dest == "config":
                raise UsageError(f"unknown config key {key!r}")
            act = dests[dest]
            if act.type is not None and val is not None:
                val = [act.type(v) for v in val] if isinstance(val, list) else act.type(val)
            defaults[dest] = val
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args, sub


def _resolved(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("config", "verbose"):
            continue
        out[k.replace("_", "-")] = v
    return out


def _write_config(args, outdir, extra=None):
    doc = _resolved(args)
    if extra:
        doc.update(extra)
    (Path(outdir) / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_")) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m for m in missing)}")


# ------------------------------------------------------------------ commands


def cmd_simulate(args) -> int:
    out = ensure_dir(args.out)
    flags = DeltaFlags(args.delta_ua, args.delta_yam)
    coef = GenerativeCoefficients()
    n2 = args.n2 if args.n2 is not None else max(1, args.n1 // 10)
    ss = np.random.SeedSequence(args.seed)
    s_main, s_ext = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    main = generate_dataset(args.n1, coef, flags, s_main, keep_u=False)
    ext_coef = coef if args.transportable else coef.with_confounding(0.0)
    external = generate_dataset(n2, ext_coef, flags, s_ext, keep_u=True)
    write_csv(main, out / "main.csv")
    write_csv(external, out / "external.csv")
    _write_config(args, out, {"n2": n2})
    print(f"wrote {main.n} main rows and {external.n} external rows to {out}")
    return EXIT_OK


def cmd_fit_prior(args) -> int:
    _require(args, "external")
    external = read_csv(args.external)
    spec = ModelSpec(z_dim=external.z_dim, include_am_interaction=args.interaction,
                     u_exposure_induced=args.exposure_induced, structure=args.structure)
    fits = fit_external_models(external, spec)
    prior = build_prior(fits, spec, sigma=args.inflate_sigma)
    out = Path(args.out)
    ensure_dir(out.parent if str(out.parent) else ".")
    prior.save(out)
    _write_config(args, out.parent)
    print(f"{'coefficient':<14}{'estimate':>12}{'std.err':>12}")
    for role in ("U", "M", "Y"):
        f = fits[role]
        for name, est, se in zip(spec.coef_names(role), f.estimate, f.se):
            print(f"{name:<14}{est:>12.4f}{se:>12.4f}")
    print(f"prior written to {out}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    _require(args, "main", "prior")
    main = read_csv(args.main)
    prior = GaussianPrior.load(args.prior)
    spec = prior.spec
    if spec.z_dim != main.z_dim:
        raise UsageError(f"prior expects {spec.z_dim} covariates, main data has {main.z_dim}")
    estimands.check_identification(args.estimand, spec)
    out = ensure_dir(args.out)
    cfg = SamplerConfig(chains=args.chains, iters=args.iters, warmup=args.warmup, seed=args.seed,
                        leapfrog_steps=args.leapfrog_steps)
    draws = sample_posterior(main.drop_u(), spec, prior, cfg)
    draws.to_csv(out / "draws.csv")
    fn = estimands.ESTIMATORS[args.estimand]
    kw = {"levels": tuple(args.levels)} if args.levels else {}
    res = fn(draws, main, spec, seed=args.seed, method=args.method, **kw)
    rhat = draws.rhat
    doc = res.to_dict()
    doc["rhat"] = None if rhat is None else dict(zip(draws.names, map(float, rhat)))
    doc["max_rhat"] = draws.max_rhat()
    doc["divergences"] = [int(d) for d in draws.divergences]
    doc["warnings"] = list(draws.warnings)
    (out / "result.json").write_text(json.dumps(doc, indent=2) + "\n")
    _write_config(args, out)
    print(f"{res.kind} ({res.method}): {res.point:.4f}  95% CrI [{res.ci_low:.4f}, {res.ci_high:.4f}]")
    mr = draws.max_rhat()
    if mr is None:
        print("R-hat: not available with a single chain")
        return EXIT_OK
    print(f"max R-hat: {mr:.4f}")
    if mr > RHAT_THRESHOLD:
        if args.allow_nonconverged:
            print(f"warning: R-hat above {RHAT_THRESHOLD}; continuing as requested", file=sys.stderr)
            return EXIT_SUPPRESSED
        print(f"error: R-hat above {RHAT_THRESHOLD}; rerun longer or pass --allow-nonconverged", file=sys.stderr)
        return EXIT_RHAT
    return EXIT_OK


def cmd_correct(args) -> int:
    _require(args, "main")
    main = read_csv(args.main)
    spec = ModelSpec(z_dim=main.z_dim, include_am_interaction=args.interaction,
                     u_exposure_induced=args.exposure_induced, structure=args.structure)
    if args.method == "naive":
        res = corrections.naive_rnde(main, spec, args.n_boot, args.seed)
    else:
        _require(args, "external")
        external = read_csv(args.external)
        fn = corrections.dg_correction if args.method == "dg" else corrections.ix_correction
        res = fn(main, external, spec, args.n_boot, args.seed)
    out = ensure_dir(args.out)
    res.to_json(out / "result.json")
    _write_config(args, out)
    print(f"{res.method}: {res.point:.4f}  95% CI [{res.ci_low:.4f}, {res.ci_high:.4f}]  (n_boot={res.n_boot})")
    return EXIT_OK


_SCENARIO_KEYS = set(ScenarioConfig.__dataclass_fields__)


def study_configs(doc: dict, replicates=None) -> list[ScenarioConfig]:
    """Scenario list from a study config: top-level keys are defaults for every scenario."""
    doc = {k.replace("-", "_"): v for k, v in doc.items()}
    scenarios = doc.pop("scenarios", [{}])
    out = []
    for sc in scenarios:
        merged = dict(doc)
        merged.update({k.replace("-", "_"): v for k, v in sc.items()})
        bad = set(merged) - _SCENARIO_KEYS
        if bad:
            raise UsageError(f"unknown study config key(s): {sorted(bad)}")
        if replicates is not None:
            merged["replicates"] = replicates
        if "methods" in merged:
            merged["methods"] = tuple(merged["methods"])
        out.append(ScenarioConfig(**merged))
    return out


def cmd_study(args) -> int:
    doc = _load_config(args.config) if args.config else {}
    configs = study_configs(doc, args.replicates)
    out = ensure_dir(args.out)
    report = run_study(configs)
    report.write(out, per_replicate=args.per_replicate)
    resolved = {"scenarios": [{k.replace("_", "-"): (list(v) if isinstance(v, tuple) else v)
                               for k, v in vars(c).items()} for c in configs]}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    for s in report.summaries:
        print(f"{s.scenario:<40} {s.method:<8} bias {s.mean_bias:+.4f}  coverage {s.coverage:5.1f}%  "
              f"width {s.mean_width:.4f}  failed {s.n_failed}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit-prior": cmd_fit_prior,
    "estimate": cmd_estimate,
    "correct": cmd_correct,
    "study": cmd_study,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args, _ = parse(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except IdentificationError as exc:
        print(f"identification error: {exc}", file=sys.stderr)
        return EXIT_IDENT
    except (SeparationError, SingularInformationError, PriorError, CellSparsityError, StructuralError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (SamplerError, BDFError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATE


if __name__ == "__main__":
    sys.exit(main())
