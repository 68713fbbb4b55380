"""Command-line front end: ``snbclust {fit,path,simulate,benchmark,evaluate}``.

Settings resolve as command-line flags, then a ``key=value`` manifest
(``--manifest``), then built-in defaults. Exit codes: 0 success, 1 other
failure, 2 parse/input errors, 3 validation errors, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, io
from .baselines import fit_sgclust, fit_skmeans, gap_statistic_s
from .benchmark import (
    METHODS,
    BenchmarkConfig,
    run_benchmark,
    write_failures,
    write_replicates,
    write_summary,
)
from .counts import load_counts, normalize, read_id_values, write_counts
from .errors import ParseError, SnbClustError, ValidationError
from .fused import FusedConfig, fit_fused, write_groups
from .metrics import adjusted_rand_index, fisher_enrichment, read_gene_sets, roc_auc, write_enrichment
from .mixture import FitConfig, fit, map_labels, selected_genes
from .nb import fit_null_means
from .selection import run_lambda_path, sgclust_path, snbclust_path, write_path
from .simulate import SimulationConfig, config_record, generate, write_truth

log = logging.getLogger("snbclust")

FIT_METHODS = ("snbclust", "snbclust-fused", "sgclust", "skmeans")

DEFAULTS = {
    "counts": None,
    "method": "snbclust",
    "k": 3,
    "lambda": 0.0,
    "lambda_grid": None,
    "s_grid": None,
    "scheme": "sim1",
    "gamma": None,
    "alpha": None,
    "lib_bounds": None,
    "replicates": 5,
    "seed": 0,
    "threads": 1,
    "out": ".",
    "gene_sets": None,
    "truth": None,
    "size_factors": None,
    "dispersions": None,
    "labels": None,
    "genes": None,
    "gene_truth": None,
    "restarts": 10,
    "methods": ",".join(METHODS),
    "gamma_mcp": 3.0,
    "rho": 1.0,
    "n_perm": 10,
}

OPTIONS = {
    "counts": (str, "counts matrix (TSV/CSV: gene ids in the first column, sample ids in the header); "
               "'demo' for the bundled Simulation-1 dataset with its known size factors"),
    "method": (str, "snbclust, snbclust-fused, sgclust or skmeans"),
    "k": (int, "number of clusters"),
    "lambda": (float, "penalty weight"),
    "lambda_grid": (str, "comma-separated increasing lambda values (path)"),
    "s_grid": (str, "comma-separated sparse K-means bounds; several values trigger the gap statistic"),
    "scheme": (str, "simulation scheme: sim1, sim2 or sim3"),
    "gamma": (str, "effect-size location; comma-separated list for benchmarks"),
    "alpha": (str, "module correlation (sim3); comma-separated list for benchmarks"),
    "lib_bounds": (str, "library-scale bounds LB,UB; separate several pairs with ';'"),
    "replicates": (int, "replicates per benchmark cell"),
    "seed": (int, "random seed"),
    "threads": (int, "worker processes for benchmark replicates"),
    "out": (str, "output directory"),
    "gene_sets": (str, "gene-set file: name<TAB>id1,id2,..."),
    "truth": (str, "sample truth CSV (sample_id,label)"),
    "size_factors": (str, "override size factors (id,value CSV)"),
    "dispersions": (str, "override dispersions (id,value CSV)"),
    "labels": (str, "predicted labels CSV (evaluate)"),
    "genes": (str, "per-gene CSV with score/selected columns (evaluate)"),
    "gene_truth": (str, "gene truth CSV (gene_id,informative) (evaluate)"),
    "restarts": (int, "EM restarts"),
    "methods": (str, "comma-separated methods for benchmark"),
    "gamma_mcp": (float, "MCP concavity for snbclust-fused"),
    "rho": (float, "ADMM augmented-Lagrangian weight for snbclust-fused"),
    "n_perm": (int, "gap-statistic permutations"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snbclust", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("fit", "path", "simulate", "benchmark", "evaluate"):
        sp = sub.add_parser(name)
        sp.add_argument("--manifest", help="key=value file of settings")
        sp.add_argument("--print-config", action="store_true", help="print resolved settings and exit")
        for key, (typ, help_) in OPTIONS.items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None, help=help_)
    return p


def resolve(args) -> dict:
    """Merge flags over the manifest over defaults."""
    cfg = dict(DEFAULTS)
    if args.manifest:
        for key, value in io.read_key_values(args.manifest).items():
            key = key.replace("-", "_")
            if key not in OPTIONS:
                raise ValidationError(f"unknown manifest key {key!r}")
            cfg[key] = _coerce(key, value)
    for key in OPTIONS:
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    cfg["command"] = args.command
    return cfg


def _coerce(key, value):
    typ = OPTIONS[key][0]
    if value in ("", "none", "None"):
        return None
    try:
        return typ(value)
    except ValueError:
        raise ValidationError(f"manifest value for {key!r} is not a valid {typ.__name__}") from None


def _floats(text, what):
    if text is None:
        return None
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"{what} must be comma-separated numbers") from None


def _lib_bounds(text):
    if text is None:
        return [None]
    out = []
    for part in str(text).split(";"):
        vals = _floats(part, "lib-bounds")
        if len(vals) != 2:
            raise ValidationError("lib-bounds needs LB,UB")
        out.append(tuple(vals))
    return out


def _outdir(cfg) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {out}: {exc}") from None
    return out


def _require(cfg, key):
    if cfg[key] is None:
        raise ValidationError(f"--{key.replace('_', '-')} is required for {cfg['command']}")
    return cfg[key]


def _load(cfg):
    counts, sf = _require(cfg, "counts"), cfg["size_factors"]
    if counts == "demo":
        counts = data.path(data.DEMO_COUNTS)
        sf = sf or data.path(data.DEMO_SIZE_FACTORS)
    m = load_counts(counts)
    s = read_id_values(sf, m.sample_ids) if sf else None
    phi = read_id_values(cfg["dispersions"], m.gene_ids) if cfg["dispersions"] else None
    prof = normalize(m, size_factors=s, dispersions=phi)
    return m, prof


def _fit_config(cfg) -> FitConfig:
    return FitConfig(K=int(cfg["k"]), lam=float(cfg["lambda"]), n_restarts=int(cfg["restarts"]),
                     seed=int(cfg["seed"]))


def _write_mixture(out, m, f, method, extra=None):
    io.write_labels(out / "labels.csv", m.sample_ids, map_labels(f), f.responsibilities)
    io.write_beta(out / "parameters.csv", m.gene_ids, f.beta, f.beta_star)
    score = np.max(np.abs(f.beta - f.beta_star[:, None]), axis=1)
    if f.groups is not None:
        score = np.ptp(f.beta, axis=1)
        write_groups(f, m.gene_ids, out / "groups.csv")
    io.write_gene_table(out / "genes.csv", m.gene_ids, {"score": score, "selected": selected_genes(f)})
    meta = {"pi": f.pi, **(extra or {})}
    io.write_metadata(out / "run.txt", io.fit_metadata(f, method, meta))


def _write_gaussian(out, m, f, method, extra=None):
    io.write_labels(out / "labels.csv", m.sample_ids, map_labels(f.responsibilities), f.responsibilities)
    cols = {"sigma2": f.sigma2, **{f"mu_{k + 1}": f.mu[:, k] for k in range(f.K)}}
    io.write_gene_table(out / "parameters.csv", m.gene_ids, cols)
    io.write_gene_table(out / "genes.csv", m.gene_ids,
                        {"score": np.max(np.abs(f.mu), axis=1), "selected": np.any(f.mu != 0, axis=1)})
    rec = {"method": method, "K": f.K, "lambda": float(f.lam), "iterations": f.n_iter,
           "converged": bool(f.converged), "penalized_loglik": float(f.penalized_loglik),
           "loglik": float(f.loglik), "n_zero": f.n_zero, "pi": f.pi, **(extra or {})}
    io.write_metadata(out / "run.txt", rec)


def cmd_fit(cfg) -> int:
    method = cfg["method"]
    if method not in FIT_METHODS:
        raise ValidationError(f"unknown method {method!r}")
    m, prof = _load(cfg)
    out = _outdir(cfg)
    K = int(cfg["k"])
    if K > m.n_samples:
        raise ValidationError(f"K={K} exceeds the number of samples n={m.n_samples}")
    fcfg = _fit_config(cfg)
    if method == "snbclust":
        f = fit(m, prof, fit_null_means(m, prof), fcfg)
        _write_mixture(out, m, f, method, {"seed": cfg["seed"]})
    elif method == "snbclust-fused":
        fz = FusedConfig(lam=float(cfg["lambda"]), gamma_mcp=float(cfg["gamma_mcp"]),
                         rho_admm=float(cfg["rho"]))
        f = fit_fused(m, prof, fcfg, fz, beta_star=fit_null_means(m, prof))
        _write_mixture(out, m, f, method, {"gamma_mcp": fz.gamma_mcp, "rho_admm": fz.rho_admm})
    elif method == "sgclust":
        f = fit_sgclust(prof.log_cpm, K, float(cfg["lambda"]), fcfg)
        _write_gaussian(out, m, f, method, {"seed": cfg["seed"]})
    else:
        x = prof.log_cpm
        grid = _floats(cfg["s_grid"], "s-grid")
        rng = np.random.default_rng(int(cfg["seed"]))
        gap = None
        if grid is not None and len(grid) == 1:
            s = grid[0]
        else:
            gap = gap_statistic_s(x, K, s_grid=grid, n_perm=int(cfg["n_perm"]), seed=int(cfg["seed"]))
            s = gap.chosen_s
        f = fit_skmeans(x, K, s, rng=rng)
        io.write_labels(out / "labels.csv", m.sample_ids, f.labels)
        io.write_gene_table(out / "parameters.csv", m.gene_ids, {"weight": f.weights, "bcss": f.bcss})
        io.write_gene_table(out / "genes.csv", m.gene_ids, {"score": f.weights, "selected": f.weights > 0})
        rec = {"method": method, "K": K, "s": float(s), "seed": cfg["seed"], "iterations": f.n_iter,
               "objective": float(f.objective)}
        if gap is not None:
            rec.update(s_grid=gap.s_grid, gap=gap.gaps)
        io.write_metadata(out / "run.txt", rec)
    return 0


def cmd_path(cfg) -> int:
    method = cfg["method"]
    if method not in ("snbclust", "sgclust"):
        raise ValidationError("path supports the snbclust and sgclust methods")
    m, prof = _load(cfg)
    out = _outdir(cfg)
    fcfg = _fit_config(cfg)
    if fcfg.K > m.n_samples:
        raise ValidationError(f"K={fcfg.K} exceeds the number of samples n={m.n_samples}")
    grid = _floats(cfg["lambda_grid"], "lambda-grid")
    if method == "snbclust":
        gm = fit_null_means(m, prof)
        if grid is None:
            res = snbclust_path(m, prof, gm, fcfg)
        else:
            res = run_lambda_path(m, prof, gm, fcfg.K, grid, fcfg)
        write_path(res, out / "path.csv")
        _write_mixture(out, m, res.chosen, method, {"chosen_index": res.chosen_index})
    else:
        res = sgclust_path(prof.log_cpm, fcfg.K, fcfg, lambdas=grid)
        write_path(res, out / "path.csv")
        _write_gaussian(out, m, res.chosen, method, {"chosen_index": res.chosen_index})
    return 0


def _sim_config(cfg, gamma=None, alpha=None, lb=None) -> SimulationConfig:
    kw = dict(scheme=cfg["scheme"], seed=int(cfg["seed"]))
    if gamma is not None:
        kw["gamma"] = gamma
    if alpha is not None:
        kw["alpha"] = alpha
    if lb is not None:
        kw["lib_bounds"] = lb
    return SimulationConfig(**kw)


def cmd_simulate(cfg) -> int:
    gammas = _floats(cfg["gamma"], "gamma") or [None]
    alphas = _floats(cfg["alpha"], "alpha") or [None]
    lbs = _lib_bounds(cfg["lib_bounds"])
    if len(gammas) * len(alphas) * len(lbs) != 1:
        raise ValidationError("simulate takes a single gamma, alpha and lib-bounds")
    sim = _sim_config(cfg, gammas[0], alphas[0], lbs[0])
    ds = generate(sim)
    out = _outdir(cfg)
    write_counts(ds.counts, out / "counts.tsv")
    write_truth(ds, out / "truth_samples.csv", out / "truth_genes.csv")
    io.write_metadata(out / "simulation.txt", config_record(sim))
    return 0


def cmd_benchmark(cfg) -> int:
    gammas = tuple(_floats(cfg["gamma"], "gamma") or [None])
    alphas = tuple(_floats(cfg["alpha"], "alpha") or [0.0])
    methods = tuple(m.strip() for m in str(cfg["methods"]).split(",") if m.strip())
    bc = BenchmarkConfig(
        scheme=cfg["scheme"], gammas=gammas, alphas=alphas, lib_bounds=tuple(_lib_bounds(cfg["lib_bounds"])),
        replicates=int(cfg["replicates"]), methods=methods, seed=int(cfg["seed"]),
        n_restarts=int(cfg["restarts"]), gap_n_perm=int(cfg["n_perm"]), threads=int(cfg["threads"]),
    )
    for cell in bc.cells():  # fail fast on invalid scheme parameters
        _sim_config(cfg, cell[0], cell[1] if bc.scheme == "sim3" else None, cell[2])
    out = _outdir(cfg)
    res = run_benchmark(bc)
    write_replicates(res, out / "replicates.csv")
    write_summary(res, out / "summary.csv")
    write_failures(res, out / "failures.csv")
    if res.too_many_failures:
        print(f"error: {res.failure_rate:.0%} of method runs failed", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(cfg) -> int:
    out = _outdir(cfg)
    row = {}
    if cfg["labels"] or cfg["truth"]:
        ids_p, pred = io.read_labels(_require(cfg, "labels"))
        ids_t, truth = io.read_labels(_require(cfg, "truth"))
        index = {s: i for i, s in enumerate(ids_t)}
        missing = [s for s in ids_p if s not in index]
        if missing or len(ids_p) != len(ids_t):
            raise ValidationError("label files cover different samples")
        row["ARI"] = adjusted_rand_index(pred, truth[[index[s] for s in ids_p]])
    genes = None
    if cfg["genes"]:
        gids, scores = io.read_gene_scores(cfg["genes"], "score")
        _, sel = io.read_gene_scores(cfg["genes"], "selected")
        genes = (gids, scores, sel.astype(bool))
    if cfg["gene_truth"]:
        if genes is None:
            raise ValidationError("--genes is required with --gene-truth")
        tids, informative = io.read_gene_truth(cfg["gene_truth"])
        index = {g: j for j, g in enumerate(genes[0])}
        if set(tids) != set(index):
            raise ValidationError("gene truth and gene scores cover different genes")
        order = [index[g] for g in tids]
        row["AUC"] = roc_auc(genes[1][order], informative)
        row["n_selected"] = int(genes[2].sum())
    if cfg["gene_sets"]:
        if genes is None:
            raise ValidationError("--genes is required with --gene-sets")
        sets = read_gene_sets(cfg["gene_sets"], genes[0])
        write_enrichment(fisher_enrichment(genes[2], sets), out / "enrichment.csv")
    if not row and not cfg["gene_sets"]:
        raise ValidationError("nothing to evaluate: give --labels/--truth, --genes/--gene-truth or --gene-sets")
    if row:
        with open(out / "evaluation.csv", "w", encoding="utf-8") as fh:
            fh.write(",".join(row) + "\n")
            fh.write(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row.values()) + "\n")
    return 0


COMMANDS = {"fit": cmd_fit, "path": cmd_path, "simulate": cmd_simulate,
            "benchmark": cmd_benchmark, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.print_config:
            for key in ["command", *OPTIONS]:
                value = cfg[key]
                print(f"{key}={'' if value is None else value}")
            return 0
        return COMMANDS[args.command](cfg)
    except SnbClustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ParseError.exit_code


if __name__ == "__main__":
    sys.exit(main())
