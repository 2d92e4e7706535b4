"""Command-line entry point: ``letf-lab <subcommand> ...``.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
Every output file starts with a header recording the tool version, the
subcommand, a hash of the resolved configuration and the seed (``#``
comment lines in CSV files, a leading ``header`` object in JSON files).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, cond_var, dsfm, heston, market_data, msmooth, resample, strategy, var_forecast
from .config import ConfigError, RunConfig, derive_seed
from .moneyness import TTM_TOLERANCE, ScalingContext, scale_quote_set

log = logging.getLogger("letf_lab")

VALIDATION_ERRORS = (ConfigError, market_data.QuoteValidationError, FileNotFoundError, ValueError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class Header:
    subcommand: str
    config_hash: str
    seed: int | None

    def lines(self) -> list[str]:
        return [f"letf-lab {__version__}", f"subcommand={self.subcommand}", f"config_hash={self.config_hash}",
                f"seed={'' if self.seed is None else self.seed}"]

    def as_dict(self) -> dict:
        return {"tool": "letf-lab", "version": __version__, "subcommand": self.subcommand,
                "config_hash": self.config_hash, "seed": self.seed}


def _header(args, cfg: RunConfig) -> Header:
    # paths are left out so identical runs into different directories hash alike
    extra = {k: v for k, v in vars(args).items()
             if k not in ("func", "out", "out_dir", "out_ledger", "out_summary", "quotes", "funds", "config",
                          "params", "condvar", "panels", "z")}
    return Header(args.cmd_name, cfg.digest(extra), getattr(args, "seed", None))


def write_json(path, header: Header, doc: dict) -> None:
    out = {"header": header.as_dict()}
    out.update(doc)
    Path(path).write_text(json.dumps(out, indent=1, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if hasattr(o, "isoformat"):
        return o.isoformat()
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_rows(path, header: Header, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        for line in header.lines():
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


# ---------------------------------------------------------------------------
# shared loading helpers


def _scan_tickers(path) -> list[str]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(market_data._data_lines(fh))
        if "ticker" not in (reader.fieldnames or ()):
            raise market_data.QuoteValidationError("quote file missing columns ['ticker']")
        return sorted({row["ticker"].strip() for row in reader})


def load_inputs(quotes_path, funds_path=None):
    """Quotes plus fund metadata; without a fund file every ticker is treated as unlevered."""
    if funds_path is not None:
        funds = market_data.load_funds(funds_path)
    else:
        funds = {t: market_data.FundSpec(t, 1.0) for t in _scan_tickers(quotes_path)}
    return market_data.load_quotes(quotes_path, funds), funds


def filter_policy(cfg: RunConfig) -> market_data.FilterPolicy:
    return market_data.FilterPolicy((cfg["data.iv_min"], cfg["data.iv_max"]), (cfg["data.ttm_min"],
                                    cfg["data.ttm_max"]), (cfg["data.lm_min"], cfg["data.lm_max"]))


def _pick_date(quotes, when: str | None):
    dates = sorted({q.obs_date for q in quotes})
    if not dates:
        raise ValueError("no quotes")
    if when is None:
        return dates[0]
    from datetime import date

    d = date.fromisoformat(when)
    if d not in dates:
        raise ValueError(f"no quotes on {d}")
    return d


def heston_init(cfg: RunConfig) -> heston.HestonParams:
    return heston.HestonParams(cfg["heston.kappa"], cfg["heston.theta"], cfg["heston.sigma"], cfg["heston.v0"],
                               cfg["heston.rho"])


def read_params(path) -> heston.HestonParams:
    doc = json.loads(Path(path).read_text())
    p = doc.get("params", doc)
    try:
        return heston.HestonParams(p["kappa"], p["theta"], p["sigma"], p["v0"], p["rho"])
    except KeyError as exc:
        raise ValueError(f"{path}: parameter {exc.args[0]!r} missing") from None


def strategy_config(cfg: RunConfig) -> strategy.StrategyConfig:
    return strategy.StrategyConfig(
        cfg["data.source"], cfg["data.target"], window_w=cfg["strategy.window"], tau_star=cfg["strategy.tau_star"],
        L=cfg["dsfm.L"], r=cfg["data.r"], hedge_model=cfg["strategy.hedge_model"], var_order=cfg["var.order"],
        tau_tol=cfg["strategy.tau_tol"], grid_size=cfg["strategy.grid_size"], order_m=cfg["dsfm.order_m"],
        order_t=cfg["dsfm.order_t"], n_interior_m=cfg["dsfm.n_interior_m"], n_interior_t=cfg["dsfm.n_interior_t"])


def make_provider(cfg: RunConfig, seed: int):
    if cfg["condvar.provider"] == "constant":
        return strategy.ConstantVarianceProvider(cfg["condvar.variance"])
    return strategy.HestonCondVarProvider(heston_init(cfg), n_paths=cfg["condvar.paths"], n_bins=cfg["condvar.bins"],
                                          lm_range=(cfg["condvar.lm_lo"], cfg["condvar.lm_hi"]),
                                          seed=derive_seed(seed, "condvar"),
                                          steps_per_year=cfg["heston.steps_per_year"])


def market(quotes, funds, cfg: RunConfig):
    for t in (cfg["data.source"], cfg["data.target"]):
        if t not in funds:
            raise ValueError(f"fund {t!r} missing from the fund list")
    kept = market_data.apply_filter(quotes, filter_policy(cfg))
    return strategy.market_days(kept, cfg["data.source"], cfg["data.target"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_calibrate(args, cfg):
    quotes, funds = load_inputs(args.quotes, args.funds)
    ticker = args.ticker or cfg["data.source"]
    if ticker not in funds:
        raise ValueError(f"ticker {ticker!r} not in the fund list")
    quotes = market_data.apply_filter([q for q in quotes if q.ticker == ticker], filter_policy(cfg))
    day = _pick_date(quotes, args.date)
    day_quotes = [q for q in quotes if q.obs_date == day]
    r = cfg["data.r"] if args.r is None else args.r
    carry = heston.CarryTerms(r, funds[ticker].c_star)
    params, report = heston.calibrate(day_quotes, carry, heston_init(cfg), max_nfev=cfg["heston.max_nfev"])
    doc = {"ticker": ticker, "date": day, "r": r, "c_star": carry.c}
    doc.update(report.to_dict())
    write_json(args.out, _header(args, cfg), doc)
    return params


def cmd_simulate(args, cfg):
    params = read_params(args.params)
    r = cfg["data.r"] if args.r is None else args.r
    n_steps = args.steps or max(1, round(cfg["heston.steps_per_year"] * args.ttm))
    paths = heston.simulate_euler(params, heston.CarryTerms(r, args.c), args.s0, args.ttm, n_steps, args.paths,
                                  seed=derive_seed(args.seed, "heston"))
    write_rows(args.out, _header(args, cfg), ("terminal_price", "integrated_variance", "terminal_variance"),
               zip(paths.terminal_price, paths.integrated_variance, paths.terminal_variance))


def compute_condvar(params, r, c, ttm, n_paths, n_bins, lm_lo, lm_hi, steps_per_year, seed):
    carry = heston.CarryTerms(r, c)
    paths = heston.simulate_euler(params, carry, 100.0, ttm, max(1, round(steps_per_year * ttm)), n_paths,
                                  seed=seed)
    return cond_var.mc_conditional_iv(paths, 100.0, cond_var.equidistant_lm_grid(100.0, lm_lo, lm_hi, n_bins))


def _write_curve(path, header: Header, curve: cond_var.CondVarCurve) -> None:
    curve.write_csv(path, header.lines())


def cmd_condvar(args, cfg):
    params = read_params(args.params)
    r = cfg["data.r"] if args.r is None else args.r
    curve = compute_condvar(params, r, args.c, args.ttm, args.paths or cfg["condvar.paths"],
                            args.bins or cfg["condvar.bins"], cfg["condvar.lm_lo"], cfg["condvar.lm_hi"],
                            cfg["heston.steps_per_year"], derive_seed(args.seed, "condvar"))
    header = _header(args, cfg)
    _write_curve(args.out, header, curve)
    if args.analytic_check:
        carry = heston.CarryTerms(r, args.c)
        rows = []
        for lm in args.check_points:
            mc, _ = curve.lookup(lm)
            an = cond_var.analytic_conditional_iv(lm, params, carry, 100.0, args.ttm)
            rows.append({"lm": lm, "mc": float(mc), "analytic": an, "rel_diff": abs(float(mc) - an) / an})
        write_json(Path(str(args.out) + ".check.json"), header, {"points": rows})
        for row in rows:
            print(f"lm={row['lm']:+.3f}  mc={row['mc']:.6f}  analytic={row['analytic']:.6f}  "
                  f"rel={row['rel_diff']:.2%}")


def _slice(quotes, ticker, ttm):
    out = [q for q in quotes if q.ticker == ticker and abs(q.ttm - ttm) <= TTM_TOLERANCE]
    if not out:
        raise ValueError(f"no {ticker} quotes within one day of ttm={ttm}")
    return out


def cmd_scale(args, cfg):
    quotes, funds = load_inputs(args.quotes, args.funds)
    for t in (args.src, args.dst):
        if t not in funds:
            raise ValueError(f"ticker {t!r} not in the fund list")
    curve = cond_var.CondVarCurve.read_csv(args.condvar)
    r = cfg["data.r"] if args.r is None else args.r
    day = _pick_date([q for q in quotes if q.ticker == args.src], args.date)
    sl = _slice([q for q in quotes if q.obs_date == day], args.src, curve.ttm)
    ctx = ScalingContext(funds[args.src], funds[args.dst], r, curve.ttm, curve)
    pairs = scale_quote_set(sl, ctx)
    write_rows(args.out, _header(args, cfg), ("lm_source", "lm_scaled", "implied_vol"),
               [(market_data.log_moneyness(q), s, iv) for q, (s, iv) in zip(sl, pairs)])


def smile_band(x, y, cfg: RunConfig, seed: int, grid=None, h=None) -> msmooth.UniformBand:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if grid is None:
        grid = np.linspace(x.min(), x.max(), cfg["bands.grid"])
    base = msmooth.SmootherConfig(cfg["bands.kernel"], eval_grid=tuple(grid), support_trim=cfg["bands.trim"])
    if h is None:
        h = cfg["bands.h"] or None
    if h is None:
        span = float(np.ptp(x))
        h = msmooth.cv_bandwidth(x, y, base, span * np.geomspace(0.04, 0.4, 12))
    return msmooth.uniform_band(x, y, base.with_h(h), B=cfg["bands.B"], alpha=cfg["bands.alpha"], seed=seed)


def write_band(path, header: Header, band: msmooth.UniformBand) -> None:
    write_rows(path, header, ("x", "fit", "lower", "upper"), zip(band.grid, band.fit, band.lower, band.upper))


def cmd_bands(args, cfg):
    quotes, _ = load_inputs(args.quotes, args.funds)
    if args.ticker:
        quotes = [q for q in quotes if q.ticker == args.ticker]
    sl = [q for q in quotes if abs(q.ttm - args.ttm) <= TTM_TOLERANCE]
    if len(sl) < 10:
        raise ValueError(f"need at least 10 quotes within one day of ttm={args.ttm}, found {len(sl)}")
    if args.alpha is not None:
        cfg.set("bands.alpha", args.alpha)
    if args.B is not None:
        cfg.set("bands.B", args.B)
    band = smile_band([market_data.log_moneyness(q) for q in sl], [q.implied_vol for q in sl], cfg,
                      derive_seed(args.seed, "bands"), h=args.h)
    write_band(args.out, _header(args, cfg), band)


def cmd_dsfm(args, cfg):
    panels = dsfm.read_panels(args.panels)
    L = cfg["dsfm.L"] if args.L is None else args.L
    basis = dsfm.default_basis(np.concatenate([p.x_m for p in panels]), np.concatenate([p.x_t for p in panels]),
                               cfg["dsfm.order_m"], cfg["dsfm.order_t"], cfg["dsfm.n_interior_m"],
                               cfg["dsfm.n_interior_t"])
    model = dsfm.fit(panels, L, basis, tol=cfg["dsfm.tol"], max_iter=cfg["dsfm.max_iter"])
    doc = model.to_dict()
    doc["explained_variance"] = dsfm.explained_variance(model, panels)
    doc["rmse"] = dsfm.rmse(model, panels)
    write_json(args.out, _header(args, cfg), doc)
    return model


def read_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#") and line.strip()))
    if not rows:
        raise ValueError(f"{path}: empty file")
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    try:
        return np.array([[float(v) for v in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None


def var_report(z, pmax: int, lags: int, order: int | None = None) -> dict:
    sel = var_forecast.select_order(z, pmax)
    p = order or sel.p_aic
    model = var_forecast.fit_var(z, p)
    stable, moduli = var_forecast.is_stable(model)
    doc = {"model": model.to_dict(), "stable": stable, "moduli": moduli,
           "selection": {"aic": sel.p_aic, "hq": sel.p_hq, "sc": sel.p_sc, "table": sel.table}}
    if len(model.residuals) > lags > model.p:
        pm = var_forecast.portmanteau(model, lags)
        doc["portmanteau"] = {"lags": lags, "statistic": pm.statistic, "dof": pm.dof, "p_value": pm.p_value}
    return doc


def cmd_var(args, cfg):
    z = read_matrix(args.z)
    pmax = cfg["var.pmax"] if args.pmax is None else args.pmax
    write_json(args.out, _header(args, cfg), var_report(z, pmax, cfg["var.lags"], args.order))


def run_strategy(quotes, funds, cfg: RunConfig, seed: int):
    days = market(quotes, funds, cfg)
    scfg = strategy_config(cfg)
    plans = strategy.collect_plans(days, make_provider(cfg, seed), scfg, funds)
    return days, scfg, plans


def cmd_backtest(args, cfg):
    quotes, funds = load_inputs(args.quotes, args.funds)
    days, _, plans = run_strategy(quotes, funds, cfg, args.seed)
    ledger = strategy.ledger_from_plans(days, plans)
    header = _header(args, cfg)
    ledger.write_csv(args.out_ledger, header.lines())
    ledger.write_summary(args.out_summary, header.as_dict())
    return ledger


def robustness_envelope(days, plans, cfg: RunConfig, funds, seed: int):
    worlds = resample.BootstrapWorlds(days, plans, cfg["data.r"], funds[cfg["data.target"]].c_star)
    bcfg = resample.BlockBootstrapConfig(cfg["robustness.block"], cfg["robustness.iters"],
                                         derive_seed(seed, "resample"))
    paths = worlds.run(bcfg)
    original = worlds.cumulative(worlds.prices[:, 1])
    return worlds.dates, original, resample.strategy_envelope(paths)


def cmd_robustness(args, cfg):
    if args.iters is not None:
        cfg.set("robustness.iters", args.iters)
    if args.block is not None:
        cfg.set("robustness.block", args.block)
    quotes, funds = load_inputs(args.quotes, args.funds)
    days, _, plans = run_strategy(quotes, funds, cfg, args.seed)
    dates, original, env = robustness_envelope(days, plans, cfg, funds, args.seed)
    resample.write_envelope(args.out, dates, original, env, header_lines=_header(args, cfg).lines())


# ---------------------------------------------------------------------------
# demo


def fixture_path(name: str):
    return resources.files("letf_lab").joinpath("data", name)


def cmd_demo(args, cfg_arg):
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_text(
        fixture_path("demo.cfg").read_text(), "demo.cfg")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(args, cfg)
    with resources.as_file(fixture_path("demo_funds.csv")) as fp, \
            resources.as_file(fixture_path("demo_quotes.csv")) as qp:
        quotes, funds = load_inputs(qp, fp)
    seed = args.seed
    src, tgt = funds[cfg["data.source"]], funds[cfg["data.target"]]
    days = market(quotes, funds, cfg)
    scfg = strategy_config(cfg)
    t0 = scfg.window_w - 1
    day0 = days[t0]
    r = cfg["data.r"]
    ttm = cfg["scaling.ttm"]

    print("[1/7] calibrating the Heston model to the unlevered smile", file=sys.stderr)
    carry = heston.CarryTerms(r, src.c_star)
    params, report = heston.calibrate(day0.source, carry, heston_init(cfg), max_nfev=cfg["heston.max_nfev"])
    doc = {"ticker": src.ticker, "date": day0.date, "r": r, "c_star": src.c_star}
    doc.update(report.to_dict())
    write_json(out / "calibration.json", header, doc)

    print("[2/7] conditional integrated variance", file=sys.stderr)
    curve = compute_condvar(params, r, src.c_star, ttm, cfg["condvar.paths"], cfg["condvar.bins"],
                            cfg["condvar.lm_lo"], cfg["condvar.lm_hi"], cfg["heston.steps_per_year"],
                            derive_seed(seed, "condvar"))
    _write_curve(out / "condvar.csv", header, curve)

    print("[3/7] moneyness scaling and uniform bands", file=sys.stderr)
    ctx = ScalingContext(src, tgt, r, ttm, curve)
    pooled_src, pooled_tgt = [], []
    for d in days[max(0, t0 - cfg["bands.days"] + 1): t0 + 1]:
        s_sl = [q for q in d.source if abs(q.ttm - ttm) <= TTM_TOLERANCE]
        pooled_src += [(s, iv) for s, iv in scale_quote_set(s_sl, ctx)]
        pooled_tgt += [(market_data.log_moneyness(q), q.implied_vol) for q in d.target
                       if abs(q.ttm - ttm) <= TTM_TOLERANCE]
    write_rows(out / "scaled.csv", header, ("lm_scaled", "implied_vol"), pooled_src)
    xs, ys = np.array(pooled_src).T
    xt, yt = np.array(pooled_tgt).T
    lo, hi = max(xs.min(), xt.min()), min(xs.max(), xt.max())
    grid = np.linspace(lo, hi, cfg["bands.grid"])
    band_s = smile_band(xs, ys, cfg, derive_seed(seed, "bands", 0), grid)
    band_t = smile_band(xt, yt, cfg, derive_seed(seed, "bands", 1), grid)
    write_band(out / "band_scaled_source.csv", header, band_s)
    write_band(out / "band_target.csv", header, band_t)
    ov = msmooth.bands_disjoint(band_s, band_t)
    write_json(out / "band_overlap.json", header, {"disjoint": ov.disjoint, "overlap": ov.overlap,
                                                   "d_star": [band_s.d_star, band_t.d_star]})

    print("[4/7] factor model on the first window", file=sys.stderr)
    provider = make_provider(cfg, seed)
    panels, _, _ = strategy.window_panels(days[: t0 + 1], provider, scfg, funds)
    dsfm.write_panels(out / "panels.csv", panels, header.lines())
    model = dsfm.fit(panels, scfg.L, strategy.window_basis(panels, scfg), tol=cfg["dsfm.tol"],
                     max_iter=cfg["dsfm.max_iter"])
    doc = model.to_dict()
    doc["explained_variance"] = dsfm.explained_variance(model, panels)
    doc["rmse"] = dsfm.rmse(model, panels)
    write_json(out / "dsfm.json", header, doc)

    print("[5/7] VAR on the factor loadings", file=sys.stderr)
    write_json(out / "var.json", header, var_report(model.Z[:, 1:], cfg["var.pmax"], cfg["var.lags"]))

    print("[6/7] rolling backtest", file=sys.stderr)
    plans = strategy.collect_plans(days, make_provider(cfg, seed), scfg, funds)
    ledger = strategy.ledger_from_plans(days, plans)
    ledger.write_csv(out / "ledger.csv", header.lines())
    ledger.write_summary(out / "summary.json", header.as_dict())

    print("[7/7] block-bootstrap robustness", file=sys.stderr)
    dates, original, env = robustness_envelope(days, plans, cfg, funds, seed)
    resample.write_envelope(out / "robustness.csv", dates, original, env, header_lines=header.lines())
    s = ledger.summary()
    print(f"periods={s['periods']} cumulative_pnl={s['cumulative_pnl']:.4f} hit_rate={s['hit_rate']}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="letf-lab", description="Leveraged-ETF option smile toolkit")
    p.add_argument("--version", action="version", version=f"letf-lab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", metavar="subcommand", parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func, cmd_name=name)
        sp.add_argument("--config", help="section.key = value file")
        return sp

    sp = add("calibrate", cmd_calibrate, "fit Heston parameters to one day's call quotes")
    sp.add_argument("--quotes", required=True)
    sp.add_argument("--funds", required=True)
    sp.add_argument("--r", type=float)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ticker")
    sp.add_argument("--date")

    sp = add("simulate", cmd_simulate, "Euler paths of the Heston system")
    sp.add_argument("--params", required=True)
    sp.add_argument("--ttm", type=float, required=True)
    sp.add_argument("--paths", type=int, required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--s0", type=float, default=100.0)
    sp.add_argument("--r", type=float)
    sp.add_argument("--c", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("condvar", cmd_condvar, "binned conditional integrated variance")
    sp.add_argument("--params", required=True)
    sp.add_argument("--ttm", type=float, required=True)
    sp.add_argument("--paths", type=int)
    sp.add_argument("--bins", type=int)
    sp.add_argument("--r", type=float)
    sp.add_argument("--c", type=float, default=0.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--analytic-check", action="store_true")
    sp.add_argument("--check-points", type=float, nargs="+", default=[0.0])

    sp = add("scale", cmd_scale, "move one maturity slice to another fund's log-moneyness")
    sp.add_argument("--quotes", required=True)
    sp.add_argument("--funds", required=True)
    sp.add_argument("--from", dest="src", required=True)
    sp.add_argument("--to", dest="dst", required=True)
    sp.add_argument("--condvar", required=True)
    sp.add_argument("--r", type=float)
    sp.add_argument("--date")
    sp.add_argument("--out", required=True)

    sp = add("bands", cmd_bands, "robust smile fit with a bootstrap uniform band")
    sp.add_argument("--quotes", required=True)
    sp.add_argument("--funds")
    sp.add_argument("--ticker")
    sp.add_argument("--ttm", type=float, required=True)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--B", type=int)
    sp.add_argument("--h", type=float)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("dsfm", None, "dynamic semiparametric factor model")
    dsub = sp.add_subparsers(dest="action", metavar="action", parser_class=_Parser)
    fp = dsub.add_parser("fit", help="fit basis coefficients and loadings")
    fp.set_defaults(func=cmd_dsfm, cmd_name="dsfm fit")
    fp.add_argument("--config")
    fp.add_argument("--panels", required=True)
    fp.add_argument("--L", type=int)
    fp.add_argument("--out", required=True)

    sp = add("var", None, "vector autoregression of factor loadings")
    vsub = sp.add_subparsers(dest="action", metavar="action", parser_class=_Parser)
    fp = vsub.add_parser("fit", help="order selection, fit and diagnostics")
    fp.set_defaults(func=cmd_var, cmd_name="var fit")
    fp.add_argument("--config")
    fp.add_argument("--z", required=True)
    fp.add_argument("--pmax", type=int)
    fp.add_argument("--order", type=int, help="override the AIC choice")
    fp.add_argument("--out", required=True)

    sp = add("backtest", cmd_backtest, "rolling delta-hedged backtest")
    sp.add_argument("--quotes", required=True)
    sp.add_argument("--funds", required=True)
    sp.add_argument("--out-ledger", required=True)
    sp.add_argument("--out-summary", required=True)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("robustness", cmd_robustness, "block-bootstrap envelope of the cumulative P&L")
    sp.add_argument("--quotes", required=True)
    sp.add_argument("--funds", required=True)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--block", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("demo", cmd_demo, "full pipeline on the bundled synthetic fixtures")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--out-dir", default="demo_out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError(f"{parser.prog}: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config and args.func is not cmd_demo else RunConfig()
        args.func(args, cfg)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
