"""Command-line front end.

Subcommands::

    sample        draw realisations with one of the samplers
    cov-error     Monte-Carlo maximal covariance error over a parameter sweep
    min-embed     smallest circulant-embedding factor per (nu, ell)
    spde-compare  finite-element DNA against Neumann oversampling

Exit codes: 0 success, 1 usage error, 2 numerically infeasible request.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .covariance import CovarianceModel
from .fem import FEMSampler, neumann_sampler
from .output import write_csv, write_grid_csv, write_manifest, write_pgm
from .periodisation import (DNA, PERIODIC, SpectrumTable, embedding_size, minimal_embedding)
from .sampler import (CESampler, CirculantEmbedding, DNASampler, FieldRealisation,
                      NegativeSpectrum, PeriodicSampler, RngStream, all_masks, sample_ce,
                      sample_dna, sample_periodic, write_fields)
from .stats import empirical_max_cov_error, marginal_variance_profile, matern_bounds

log = logging.getLogger("grfdna")

METHODS = ("periodic", "ce", "dna", "spde-dna", "spde-neumann")
EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- parsing helpers -------------------------------------------------------

def _floats(text, name):
    try:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--{name}: expected comma-separated numbers, got {text!r}")
    if not vals:
        raise UsageError(f"--{name}: empty list")
    return vals


def _ints(text, name):
    vals = _floats(text, name)
    if any(v != int(v) for v in vals):
        raise UsageError(f"--{name}: expected integers, got {text!r}")
    return [int(v) for v in vals]


def _positive(value, name, integer=False, minimum=None):
    if value is None:
        raise UsageError(f"--{name} is required")
    if integer and value != int(value):
        raise UsageError(f"--{name} must be an integer")
    lo = 0 if minimum is None else minimum
    if (minimum is None and not value > 0) or (minimum is not None and value < minimum):
        raise UsageError(f"--{name} must be {'positive' if minimum is None else f'>= {lo}'} (got {value})")
    return int(value) if integer else float(value)


def _models(args):
    fams = [f.strip().lower() for f in args.model.split(",") if f.strip()]
    nus = _floats(args.nu, "nu")
    ells = _floats(args.ell, "ell")
    models = []
    for fam in fams:
        if fam not in ("matern", "gaussian", "cauchy"):
            raise UsageError(f"--model: unknown family {fam!r}")
        for ell in ells:
            if fam == "matern":
                for nu in nus:
                    if not nu > 0:
                        raise UsageError("--nu must be positive")
                    models.append(CovarianceModel.matern(nu, _positive(ell, "ell")))
            else:
                models.append(CovarianceModel(fam, _positive(ell, "ell")))
    if not models:
        raise UsageError("--model: nothing to run")
    return models


def _single_model(args):
    models = _models(args)
    if len(models) != 1:
        raise UsageError("this command takes a single model (one family, nu and ell)")
    return models[0]


def _common(p):
    p.add_argument("--config", help="file of key=value lines; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="output directory (default $GRF_OUT_DIR or current directory)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="grfdna", description="Gaussian random field sampling and error studies")
    parser.add_argument("--version", action="version", version=f"grfdna {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("sample", help="draw realisations")
    _common(p)
    p.add_argument("--method", default="dna")
    p.add_argument("--model", default="matern")
    p.add_argument("--nu", default="1.0")
    p.add_argument("--ell", default="0.1")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--n", type=int, default=256, help="modes per axis (dna/periodic) or grid points (ce)")
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--tau", type=int, default=1, help="circulant-embedding domain factor")
    p.add_argument("--mesh", type=int, default=32, help="finite-element cells per unit length")
    p.add_argument("--extension", type=float, default=1.0, help="domain extension for spde-neumann")

    p = sub.add_parser("cov-error", help="maximal covariance error sweep")
    _common(p)
    p.add_argument("--method", default="dna")
    p.add_argument("--model", default="matern,gaussian,cauchy")
    p.add_argument("--nu", default="0.5,2,8")
    p.add_argument("--ell", default="0.025,0.05,0.1,0.2")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--n", type=int, default=1500)
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--count", type=int, default=100000)
    p.add_argument("--batches", type=int, default=40)
    p.add_argument("--tau", type=int, default=1)
    p.add_argument("--bounds", action="store_true", help="add analytic bound columns (Matern)")

    p = sub.add_parser("min-embed", help="minimal circulant-embedding factor")
    _common(p)
    p.add_argument("--model", default="matern")
    p.add_argument("--nu", default="0.5,1,2,4,8")
    p.add_argument("--ell", default="0.025,0.05,0.1,0.2")
    p.add_argument("--n", type=int, default=1500, help="grid points per axis on [0, 1]")
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--max-factor", type=int, default=256)

    p = sub.add_parser("spde-compare", help="finite-element DNA vs Neumann oversampling")
    _common(p)
    p.add_argument("--nu", default="1")
    p.add_argument("--ell", default="0.25")
    p.add_argument("--alpha", "--extension", dest="alpha", default="1,2")
    p.add_argument("--mesh", default="16,32", help="cells per unit length, comma-separated")
    p.add_argument("--count", type=int, default=50000)
    p.add_argument("--batches", type=int, default=2)
    p.add_argument("--heatmap-count", type=int, default=10000)
    return parser


def _read_config(path):
    out = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}")
    with fh:
        for num, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{num}: expected key=value")
            out[key.strip().lstrip("-").replace("-", "_")] = val.strip()
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required (sample, cov-error, min-embed, spde-compare)")
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        conf = _read_config(args.config)
        unknown = sorted(set(conf) - set(actions))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for k, v in conf.items():
            act = actions[k]
            if act.const is True and act.nargs == 0:
                defaults[k] = v.lower() in ("1", "true", "yes", "on")
            elif act.type is not None:
                try:
                    defaults[k] = act.type(v)
                except ValueError:
                    raise UsageError(f"config key {k}: bad value {v!r}")
            else:
                defaults[k] = v
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


def _outdir(args):
    out = args.out or os.environ.get("GRF_OUT_DIR") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _manifest(args, extra):
    items = {"program": "grfdna", "version": __version__, "command": args.command}
    items.update({k: v for k, v in sorted(vars(args).items()) if k not in ("command", "verbose")})
    items.update(extra)
    return items


# --- commands ----------------------------------------------------------------

def _parallel_map(func, items, threads):
    with threadpool_limits(1):
        if threads <= 1:
            return [func(i) for i in items]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(func, items))


def cmd_sample(args):
    method = args.method
    if method not in METHODS:
        raise UsageError(f"--method must be one of {', '.join(METHODS)}")
    count = _positive(args.count, "count", integer=True)
    d = args.d
    if d not in (1, 2, 3):
        raise UsageError("--d must be 1, 2 or 3")
    out = _outdir(args)
    seed = args.seed
    extra = {}

    if method in ("spde-dna", "spde-neumann"):
        if _floats(args.nu, "nu") != [1.0]:
            raise UsageError("spde methods need --nu 1 (operator power beta = 1 in d = 2)")
        if d != 2:
            raise UsageError("spde methods are two-dimensional (--d 2)")
        ell = _positive(_floats(args.ell, "ell")[0], "ell")
        m = _positive(args.mesh, "mesh", integer=True)
        if method == "spde-dna":
            sampler = FEMSampler(ell, m, args.alpha)
        else:
            sampler = neumann_sampler(ell, m, _positive(args.extension, "extension", minimum=1.0))
        vals = _parallel_map(lambda k: sampler.draw(RngStream(seed, k), 1)[0], range(count), args.threads)
        fields = [FieldRealisation(v, 1.0, m, 1.0 / m, seed, k) for k, v in enumerate(vals)]
        coords = sampler.coords()
        extra["grid"] = f"{m + 1}x{m + 1} on [0,1]^2"
    else:
        model = _single_model(args)
        n = _positive(args.n, "n", integer=True)
        alpha = _positive(args.alpha, "alpha", minimum=1.0)
        if method == "dna":
            table = SpectrumTable.build(model, alpha, n, d, DNA)
            fields = _parallel_map(lambda k: sample_dna(table, RngStream(seed, k)), range(count), args.threads)
            for k, f in enumerate(fields):
                f.stream = k
        elif method == "periodic":
            table = SpectrumTable.build(model, alpha, n, d, PERIODIC)
            pairs = _parallel_map(lambda k: sample_periodic(table, RngStream(seed, k)),
                                  range((count + 1) // 2), args.threads)
            fields = [f for pair in pairs for f in pair][:count]
        else:
            tau = _positive(args.tau, "tau", integer=True)
            if n < 2:
                raise UsageError("--n must be >= 2 for ce")
            try:
                CirculantEmbedding(model, n, d, tau)
            except NegativeSpectrum as exc:
                print(f"error: {exc}", file=sys.stderr)
                print("hint: run `grfdna min-embed` (minimal_embedding) to find a working --tau",
                      file=sys.stderr)
                return EXIT_INFEASIBLE
            pairs = _parallel_map(lambda k: sample_ce(model, n, RngStream(seed, k), tau, d),
                                  range((count + 1) // 2), args.threads)
            fields = [f for pair in pairs for f in pair][:count]
            extra["fft_length"] = embedding_size(n, tau)
        shape = fields[0].values.shape
        axes = np.meshgrid(*[np.arange(s) * fields[0].spacing for s in shape], indexing="ij")
        coords = np.column_stack([a.ravel() for a in axes])
        extra["model"] = model.label()

    files = ["realisations.bin"]
    write_fields(os.path.join(out, "realisations.bin"), fields)
    if fields[0].dim <= 2:
        write_grid_csv(os.path.join(out, "realisations.csv"), coords,
                       np.array([f.values.ravel() for f in fields]))
        files.append("realisations.csv")
    extra.update(count_written=len(fields), streams=[f.stream for f in fields], outputs=files)
    write_manifest(os.path.join(out, "manifest.txt"), _manifest(args, extra))
    return EXIT_OK


COV_COLUMNS = ["method", "family", "nu", "ell", "alpha", "n", "d", "N", "batches", "seed",
               "max_error", "batch_sd", "std_error", "pooled_error"]
BOUND_COLUMNS = ["periodisation_bound", "truncation_bound"]


def _cov_sampler(method, model, args):
    d = args.d
    if method == "dna":
        return DNASampler(SpectrumTable.build(model, args.alpha, args.n, d, DNA))
    if method == "periodic":
        return PeriodicSampler(SpectrumTable.build(model, args.alpha, args.n, d, PERIODIC))
    if method == "ce":
        return CESampler(CirculantEmbedding(model, args.n, d, args.tau))
    raise UsageError("cov-error supports --method dna, periodic or ce")


def cmd_cov_error(args):
    N = _positive(args.count, "count", integer=True)
    batches = _positive(args.batches, "batches", integer=True)
    if N % batches:
        raise UsageError("--count must be divisible by --batches")
    _positive(args.n, "n", integer=True)
    _positive(args.alpha, "alpha", minimum=1.0)
    if args.d not in (1, 2, 3):
        raise UsageError("--d must be 1, 2 or 3")
    models = _models(args)
    if args.d > 1 and any(m.family != "matern" for m in models):
        raise UsageError("gaussian and cauchy models are one-dimensional")
    out = _outdir(args)
    rows = []
    for model in models:
        try:
            sampler = _cov_sampler(args.method, model, args)
        except NegativeSpectrum as exc:
            print(f"error: {model.label()}: {exc}", file=sys.stderr)
            return EXIT_INFEASIBLE
        rep = empirical_max_cov_error(sampler, model, N, batches, args.seed, threads=args.threads)
        row = dict(method=args.method, family=model.family, nu=model.nu, ell=model.ell,
                   alpha=args.alpha, n=args.n, d=args.d, N=N, batches=batches, seed=args.seed,
                   max_error=rep.max_error, batch_sd=rep.batch_sd, std_error=rep.std_error,
                   pooled_error=rep.pooled_error)
        if args.bounds:
            pb, tb = matern_bounds(model, args.alpha, args.n, args.d)
            row.update(periodisation_bound=pb, truncation_bound=tb)
        log.info("%s max_error=%.4g batch_sd=%.3g", model.label(), rep.max_error, rep.batch_sd)
        rows.append(row)
    cols = COV_COLUMNS + (BOUND_COLUMNS if args.bounds else [])
    write_csv(os.path.join(out, "cov_error.csv"), cols, rows)

    # wide layout: one row per ell, one error/sd column pair per model
    labels = []
    for r in rows:
        lab = r["family"] if r["nu"] is None else f"matern_nu{r['nu']:g}"
        r["_label"] = lab
        if lab not in labels:
            labels.append(lab)
    wide_cols = ["ell"] + [c for lab in labels for c in (lab, lab + "_sd")]
    wide = {}
    for r in rows:
        w = wide.setdefault(r["ell"], {"ell": r["ell"]})
        w[r["_label"]] = r["max_error"]
        w[r["_label"] + "_sd"] = r["batch_sd"]
    write_csv(os.path.join(out, "cov_error_table.csv"), wide_cols, [wide[k] for k in sorted(wide)])
    write_manifest(os.path.join(out, "manifest.txt"),
                   _manifest(args, {"outputs": ["cov_error.csv", "cov_error_table.csv"]}))
    return EXIT_OK


def cmd_min_embed(args):
    n = _positive(args.n, "n", integer=True, minimum=2)
    maxf = _positive(args.max_factor, "max-factor", integer=True, minimum=1)
    if args.d not in (1, 2, 3):
        raise UsageError("--d must be 1, 2 or 3")
    models = _models(args)
    out = _outdir(args)
    rows = _parallel_map(lambda mdl: (mdl, minimal_embedding(mdl, n, maxf, args.d)), models, args.threads)
    table = []
    for mdl, tau in rows:
        table.append(dict(family=mdl.family, nu=mdl.nu, ell=mdl.ell, n_grid=n, d=args.d,
                          max_factor=maxf, tau="NotFound" if tau is None else tau,
                          fft_length="" if tau is None else embedding_size(n, tau)))
    write_csv(os.path.join(out, "min_embed.csv"),
              ["family", "nu", "ell", "n_grid", "d", "max_factor", "tau", "fft_length"], table)
    write_manifest(os.path.join(out, "manifest.txt"), _manifest(args, {"outputs": ["min_embed.csv"]}))
    return EXIT_OK


class _ProfileSampler:
    """Stacks the four single-mask fields and their DNA average as channels."""

    def __init__(self, fem):
        self.fem = fem
        self.shape = (5,) + fem.shape

    def draw(self, rng, count):
        comps = self.fem.components(rng, count)
        return np.stack(comps + [self.fem.weight * sum(comps)], axis=1)


def cmd_spde_compare(args):
    if _floats(args.nu, "nu") != [1.0]:
        raise UsageError("spde-compare supports only --nu 1 (operator power beta = 1 in d = 2)")
    ell = _positive(_floats(args.ell, "ell")[0], "ell")
    alphas = _floats(args.alpha, "alpha")
    if any(a < 1 for a in alphas):
        raise UsageError("--alpha values must be >= 1")
    meshes = _ints(args.mesh, "mesh")
    if any(m < 2 for m in meshes):
        raise UsageError("--mesh values must be >= 2")
    N = _positive(args.count, "count", integer=True)
    batches = _positive(args.batches, "batches", integer=True)
    if N % batches:
        raise UsageError("--count must be divisible by --batches")
    out = _outdir(args)
    model = CovarianceModel.matern(1.0, ell)
    rows = []
    for alpha in alphas:
        for m in meshes:
            for method in ("spde-dna", "spde-neumann"):
                if method == "spde-dna":
                    s = FEMSampler(ell, m, alpha)
                else:
                    s = neumann_sampler(ell, m, alpha)
                rep = empirical_max_cov_error(s, model, N, batches, args.seed, threads=args.threads)
                rows.append(dict(method=method, alpha=alpha, m=m, h=1.0 / m, nu=1.0, ell=ell, N=N,
                                 batches=batches, seed=args.seed, max_error=rep.max_error,
                                 batch_sd=rep.batch_sd, std_error=rep.std_error,
                                 pooled_error=rep.pooled_error))
                log.info("%s alpha=%g m=%d max_error=%.4g", method, alpha, m, rep.max_error)
    write_csv(os.path.join(out, "spde_compare.csv"),
              ["method", "alpha", "m", "h", "nu", "ell", "N", "batches", "seed", "max_error",
               "batch_sd", "std_error", "pooled_error"], rows)

    files = ["spde_compare.csv"]
    hm = args.heatmap_count
    if hm > 0:
        hm = hm - hm % 40 if hm >= 40 else hm
        groups = 40 if hm % 40 == 0 else 1
        fem = FEMSampler(ell, meshes[0], 1.0)
        var, _ = marginal_variance_profile(_ProfileSampler(fem), hm, args.seed, groups, args.threads)
        names = [f"mask{mk}" for mk in all_masks(2)] + ["dna"]
        vmax = max(2.0, float(var.max()))
        coords = fem.coords()
        for name, v in zip(names, var):
            write_pgm(os.path.join(out, f"variance_{name}.pgm"), v, 0.0, vmax)
            write_grid_csv(os.path.join(out, f"variance_{name}.csv"), coords, v.ravel())
            files += [f"variance_{name}.pgm", f"variance_{name}.csv"]
    write_manifest(os.path.join(out, "manifest.txt"), _manifest(args, {"outputs": files}))
    return EXIT_OK


COMMANDS = {"sample": cmd_sample, "cov-error": cmd_cov_error, "min-embed": cmd_min_embed,
            "spde-compare": cmd_spde_compare}


def main(argv=None):
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s %(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"grfdna: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
