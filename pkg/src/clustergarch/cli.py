"""Command-line entry point: ``clustergarch <subcommand> [options]``.

Subcommands: estimate, filter, simulate, evaluate, density, report. Machine
readable outputs are JSON (shortest round-trip floats) and CSV (17
significant digits); human tables use 4 significant digits.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import corrparam as cp
from . import dcc
from . import distributions as dk
from . import dynamics as dy
from . import estimation as es
from . import matrixkit as mk
from . import panel as pn
from . import scores as sc
from .errors import ClusterGarchError, InvalidSpec

QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


# ----------------------------------------------------------------- plumbing


def _load_panel(args, cfg: pn.RunConfig):
    panel = pn.ingest(args.input)
    if args.sectors:
        panel = panel.with_sectors(pn.read_sectors(args.sectors))
    block = cfg.block_spec(panel)
    if block is None and panel.sectors is not None:
        panel, block = panel.grouped()
    if cfg.structure == "block" and cfg.model == "score" and block is None:
        raise InvalidSpec("block structure needs block_sizes in the config or a --sectors file")
    if cfg.distribution == dk.CANONICAL and block is None:
        raise InvalidSpec("CanonicalBlockT needs block_sizes or --sectors")
    return panel, block


def _standardize(panel: pn.ReturnPanel, cfg: pn.RunConfig):
    if not cfg.egarch:
        return panel.returns, None
    fits = [es.fit_egarch(panel.returns[:, j], standard_errors=False) for j in range(panel.n)]
    z = np.column_stack([f.z for f in fits])
    info = [{"ticker": t, **{k: float(v) for k, v in vars(f.params).items()}, "loglik": f.loglik}
            for t, f in zip(panel.tickers, fits)]
    return z, info


def _standardize_split(train: pn.ReturnPanel, test: pn.ReturnPanel, cfg: pn.RunConfig):
    """EGARCH fitted on the training window only, then run through both windows."""
    if not cfg.egarch:
        return train.returns, test.returns
    if test is train:
        z, _ = _standardize(train, cfg)
        return z, z
    full = np.vstack([train.returns, test.returns])
    t0 = train.T
    z = np.empty_like(full)
    for j in range(train.n):
        r = train.returns[:, j]
        fit = es.fit_egarch(r, standard_errors=False)
        z[:, j] = es.egarch_filter(full[:, j], fit.params, h1=float(np.var(r)), r0=float(np.mean(r)))[0]
    return z[:t0], z[t0:]


def _summary(values) -> list[float]:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return [float("nan")] * len(QUANTILES)
    return [float(v) for v in np.quantile(values, QUANTILES, method="linear")]


def _sig(v, digits=4) -> str:
    if v is None:
        return "-"
    return "nan" if not np.isfinite(v) else format(float(v), f".{digits}g")


def _params_from_config(cfg: pn.RunConfig, kind: sc.ModelKind, n: int):
    """VarParams and dofs from the ``params`` config entry."""
    p = cfg.params
    if "report" in p:
        rep = pn.load_json(p["report"])
        return dy.VarParams(rep["mu"], rep["beta"], rep["alpha"]), tuple(rep["dofs"])
    d = kind.state_dim(n)
    if "mu" in p:
        mu = np.asarray(p["mu"], dtype=float)
    elif "rho" in p and kind.is_block:
        mu = cp.eta_of_block(cp.factors_from_rho(np.asarray(p["rho"], dtype=float), kind.block))[kind.block.free_mask]
    elif "corr" in p and not kind.is_block:
        mu = cp.gamma_of_corr(np.asarray(p["corr"], dtype=float))
    else:
        raise InvalidSpec("params needs one of report, mu, rho (block) or corr (general)")
    beta = np.broadcast_to(np.asarray(p.get("beta", 0.97), dtype=float), (d,))
    alpha = np.broadcast_to(np.asarray(p.get("alpha", 0.04), dtype=float), (d,))
    return dy.VarParams(mu, beta, alpha), kind.distribution.dofs


def _fit_score(z, kind, cfg: pn.RunConfig, args):
    opt = cfg.optimizer
    return es.fit_correlation(z, kind, targeting=cfg.targeting, scalar=cfg.scalar, estimate_dofs=cfg.estimate_dofs,
                              n_starts=opt.n_starts, jitter=opt.jitter, explore_iter=opt.explore_iter,
                              seed=_seed(args, cfg), maxiter=opt.maxiter, gtol=opt.gtol,
                              standard_errors=cfg.standard_errors, threads=args.threads)


def _seed(args, cfg) -> int:
    return cfg.seed if args.seed is None else args.seed


def _score_report(fit: es.EstimationResult, panel, block, z, egarch_info) -> dict:
    kind = fit.fitted_kind
    out = dy.run_filter(z, kind, fit.params)
    loglik = out.loglik_total
    rep = {
        "model": "score",
        "structure": kind.structure,
        "distribution": kind.distribution.tag,
        "partition": list(kind.distribution.partition) if kind.distribution.partition else None,
        "block_sizes": list(block.sizes) if block is not None else None,
        "tickers": list(panel.tickers),
        "sectors": list(panel.sectors) if panel.sectors is not None else None,
        "T": int(z.shape[0]),
        "n": int(z.shape[1]),
        "targeting": fit.layout.targeting,
        "scalar": fit.layout.scalar,
        "loglik": loglik,
        "param_count": fit.param_count,
        "aic": es.aic(loglik, fit.param_count),
        "bic": es.bic(loglik, fit.param_count, z.shape[0]),
        "mu": fit.params.mu.tolist(),
        "beta": fit.params.beta.tolist(),
        "alpha": fit.params.alpha.tolist(),
        "dofs": list(fit.dofs),
        "parameters": {
            "names": fit.names,
            "values": fit.theta.tolist(),
            "standard_errors": None if fit.standard_errors is None else fit.standard_errors.tolist(),
        },
        "converged": fit.converged,
        "message": fit.message,
        "iterations": fit.iterations,
        "egarch": egarch_info,
        "loglik_marginal": None,
        "loglik_copula": None,
    }
    return rep


def _add_decomposition(rep: dict, z, kind, out: dy.FilterOutput) -> None:
    dec = es.decompose_loglik(z, kind, out)
    rep["loglik_marginal"] = dec.marginal
    rep["loglik_copula"] = dec.copula
    rep["decomposition_failures"] = [list(c) for c in dec.failures]


def _human(rep: dict) -> str:
    lines = [f"model        {rep['model']} / {rep.get('structure', 'general')} / {rep['distribution']}",
             f"T x n        {rep['T']} x {rep['n']}",
             f"p            {rep['param_count']}",
             f"loglik       {_sig(rep['loglik'], 8)}",
             f"loglik_m     {_sig(rep.get('loglik_marginal'), 8)}",
             f"loglik_c     {_sig(rep.get('loglik_copula'), 8)}",
             f"AIC          {_sig(rep['aic'], 8)}",
             f"BIC          {_sig(rep['bic'], 8)}"]
    if rep["model"] == "score":
        lines.append("")
        lines.append(f"{'':8}" + "".join(f"{h:>10}" for h in ("Min", "Q25", "Q50", "Q75", "Max")))
        for key in ("mu", "beta", "alpha"):
            lines.append(f"{key:8}" + "".join(f"{_sig(v):>10}" for v in _summary(rep[key])))
    else:
        for key in ("a", "b"):
            if key in rep:
                lines.append(f"{key:12} {_sig(rep[key])}")
    if rep.get("dofs"):
        lines.append("nu           " + ", ".join(_sig(v) for v in rep["dofs"]))
    lines.append(f"converged    {rep.get('converged')}")
    return "\n".join(lines) + "\n"


def _write_report(out_dir: Path, stem: str, rep: dict) -> None:
    pn.dump_json(out_dir / f"{stem}.json", rep)
    (out_dir / f"{stem}.txt").write_text(_human(rep), encoding="utf-8")


# --------------------------------------------------------------- subcommands


def cmd_estimate(args, cfg: pn.RunConfig) -> int:
    panel, block = _load_panel(args, cfg)
    z, egarch_info = _standardize(panel, cfg)
    n = panel.n
    if cfg.model == "dcc":
        kind = cfg.model_kind(block if cfg.distribution in (dk.CLUSTER, dk.CANONICAL) else None, n, "general")
        fit = dcc.dcc_fit(z, kind, cfg.dcc_variant, n_starts=cfg.optimizer.n_starts, jitter=cfg.optimizer.jitter,
                          seed=_seed(args, cfg), maxiter=cfg.optimizer.maxiter, gtol=cfg.optimizer.gtol,
                          threads=args.threads)
        rep = {"model": "dcc", "variant": fit.variant, "distribution": cfg.distribution, "T": panel.T, "n": n,
               "tickers": list(panel.tickers), "loglik": fit.loglik, "param_count": fit.param_count,
               "aic": fit.aic, "bic": fit.bic, "dofs": list(fit.dofs), "converged": fit.converged,
               "cbar": fit.params.cbar.tolist(), "alpha": fit.params.alpha.tolist(), "beta": fit.params.beta.tolist(),
               "egarch": egarch_info, "loglik_marginal": None, "loglik_copula": None}
        if fit.variant == "scalar":
            rep["a"], rep["b"] = float(fit.params.alpha[0, 0]), float(fit.params.beta[0, 0])
    else:
        kind = cfg.model_kind(block, n)
        fit = _fit_score(z, kind, cfg, args)
        rep = _score_report(fit, panel, block, z, egarch_info)
        if cfg.decompose:
            _add_decomposition(rep, z, fit.fitted_kind, dy.run_filter(z, fit.fitted_kind, fit.params))
    _write_report(args.out, "estimate", rep)
    sys.stdout.write(_human(rep))
    return 0


def _pair_series(corrs: np.ndarray, block: cp.BlockSpec):
    """Average within-block and between-block correlation for every block pair."""
    names, cols = [], []
    lab = block.labels
    for k in range(block.K):
        for l in range(k, block.K):
            rows = np.flatnonzero(lab == k)
            other = np.flatnonzero(lab == l)
            sub = corrs[:, rows][:, :, other]
            if k == l:
                if rows.size < 2:
                    continue
                iu = np.triu_indices(rows.size, 1)
                cols.append(sub[:, iu[0], iu[1]].mean(axis=1))
                names.append(f"within_{k}")
            else:
                cols.append(sub.reshape(sub.shape[0], -1).mean(axis=1))
                names.append(f"between_{k}_{l}")
    return names, np.column_stack(cols) if cols else np.zeros((corrs.shape[0], 0))


def cmd_filter(args, cfg: pn.RunConfig) -> int:
    panel, block = _load_panel(args, cfg)
    z, _ = _standardize(panel, cfg)
    kind = cfg.model_kind(block, panel.n)
    params, dofs = _params_from_config(cfg, kind, panel.n)
    kind = es.model_with_dofs(kind, dofs)
    out = dy.run_filter(z, kind, params)
    corrs = dy.correlation_path(out, kind)
    r, c = mk.lower_indices(panel.n)
    header = ["date"] + [f"{panel.tickers[i]}~{panel.tickers[j]}" for i, j in zip(r, c)]
    pn.write_csv(args.out / "corr_path.csv", header,
                 [[d, *corrs[t][r, c]] for t, d in enumerate(panel.dates)])
    if block is not None:
        names, series = _pair_series(corrs, block)
        pn.write_csv(args.out / "block_series.csv", ["date", *names],
                     [[d, *series[t]] for t, d in enumerate(panel.dates)])
    pn.dump_json(args.out / "filter.json", {"loglik": out.loglik_total, "T": out.T,
                                            "final_state": out.final_state.tolist()})
    sys.stdout.write(f"filtered {out.T} observations, loglik {_sig(out.loglik_total, 8)}\n")
    return 0


def cmd_simulate(args, cfg: pn.RunConfig) -> int:
    block = cfg.block_spec()
    if cfg.structure == "block" and block is None:
        raise InvalidSpec("simulate with a block structure needs block_sizes")
    n = block.n if block is not None else None
    if n is None:
        if "corr" not in cfg.params:
            raise InvalidSpec("general simulation needs params.corr")
        n = len(cfg.params["corr"])
    kind = cfg.model_kind(block, n)
    params, dofs = _params_from_config(cfg, kind, n)
    kind = es.model_with_dofs(kind, dofs)
    sim = dy.simulate(kind, params, cfg.simulate_T, seed=_seed(args, cfg), n=n)
    dates = tuple(np.datetime_as_string(np.datetime64("2000-01-03") + np.arange(cfg.simulate_T), unit="D"))
    tickers = tuple(f"S{j:03d}" for j in range(n))
    pn.write_wide(args.out / "panel.csv", pn.ReturnPanel(dates, tickers, sim.z))
    pn.write_csv(args.out / "true_path.csv", ["date", *(f"state_{i}" for i in range(params.d))],
                 [[d, *sim.path[t]] for t, d in enumerate(dates)])
    if block is not None:
        sectors = [f"G{k}" for k in block.labels]
        pn.write_csv(args.out / "sectors.csv", ["ticker", "sector"], [[t, s] for t, s in zip(tickers, sectors)])
    sys.stdout.write(f"simulated {cfg.simulate_T} x {n} panel\n")
    return 0


def cmd_evaluate(args, cfg: pn.RunConfig) -> int:
    panel, block = _load_panel(args, cfg)
    kind = cfg.model_kind(block, panel.n)
    if cfg.train_end is None:
        train = test = panel
    else:
        train, test = panel.split(cfg.train_end)
    z_train, z_test = _standardize_split(train, test, cfg)
    fit = _fit_score(z_train, kind, cfg, args)
    fk = fit.fitted_kind
    in_out = dy.run_filter(z_train, fk, fit.params)
    if test is train:
        test_out = in_out
    else:
        full = dy.run_filter(np.vstack([z_train, z_test]), fk, fit.params)
        t0 = z_train.shape[0]
        test_out = dy.FilterOutput(full.path[t0:], full.per_t[t0:], full.final_state)
    rep = {"distribution": fk.distribution.tag, "structure": fk.structure, "param_count": fit.param_count,
           "train": {"T": int(z_train.shape[0]), "loglik": in_out.loglik_total},
           "test": {"T": int(z_test.shape[0]), "loglik": test_out.loglik_total}}
    for part, zz, oo in (("train", z_train, in_out), ("test", z_test, test_out)):
        dec = es.decompose_loglik(zz, fk, oo)
        rep[part]["loglik_marginal"] = dec.marginal
        rep[part]["loglik_copula"] = dec.copula
    pn.dump_json(args.out / "evaluate.json", rep)
    lines = [f"{'':8}{'T':>8}{'loglik':>14}{'loglik_m':>14}{'loglik_c':>14}"]
    for part in ("train", "test"):
        r = rep[part]
        lines.append(f"{part:8}{r['T']:>8}" + "".join(f"{_sig(r[k], 8):>14}" for k in
                                                      ("loglik", "loglik_marginal", "loglik_copula")))
    text = "\n".join(lines) + "\n"
    (args.out / "evaluate.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_density(args, cfg: pn.RunConfig) -> int:
    d = cfg.density
    if "weights" in d:
        weights = np.asarray(d["weights"], dtype=float)
        dofs = np.asarray(d["dofs"], dtype=float)
    elif "corr" in d:
        c = np.asarray(d["corr"], dtype=float)
        block = cfg.block_spec()
        kind = cfg.model_kind(block, c.shape[0])
        spec = dk.convolution_spec(kind.distribution, c.shape[0], block)
        weights = dk.marginal_weights(c, spec, int(d.get("column", 0)))
        dofs = np.asarray(spec.dofs)
    else:
        raise InvalidSpec("density config needs weights and dofs, or corr")
    lo, hi, count = d.get("grid", [-6.0, 6.0, 241])
    grid = np.linspace(float(lo), float(hi), int(count))
    pdf = dk.convolution_pdf_batch(grid, np.broadcast_to(weights, (grid.size, weights.size)), dofs)
    cdf = np.array([dk.convolution_cdf(x, weights, dofs) for x in grid])
    nu_kl = dk.kl_best_t(weights, dofs)
    t_pdf = np.exp(dk.std_t_logpdf(grid, nu_kl))
    normal = np.exp(-0.5 * grid**2) / np.sqrt(2.0 * np.pi)
    pn.write_csv(args.out / "density.csv", ["z", "pdf", "cdf", "kl_t_pdf", "normal_pdf"],
                 list(zip(grid, pdf, cdf, t_pdf, normal)))
    pn.dump_json(args.out / "density.json", {"weights": weights.tolist(), "dofs": dofs.tolist(),
                                             "kl_best_dof": nu_kl})
    sys.stdout.write(f"KL-best t degrees of freedom {_sig(nu_kl)}\n")
    return 0


def cmd_report(args, cfg: pn.RunConfig | None) -> int:
    rep = pn.load_json(args.input)
    text = _human(rep)
    if args.out is not None:
        (args.out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


COMMANDS = {"estimate": cmd_estimate, "filter": cmd_filter, "simulate": cmd_simulate, "evaluate": cmd_evaluate,
            "density": cmd_density, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clustergarch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=name != "report")
        p.add_argument("--input", type=Path, required=name in ("estimate", "filter", "evaluate", "report"))
        p.add_argument("--sectors", type=Path)
        p.add_argument("--out", type=Path, default=None if name == "report" else Path("."))
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = pn.RunConfig.load(args.config) if args.config is not None else None
        if args.out is not None:
            args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except (ClusterGarchError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(f"clustergarch {args.command}: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
