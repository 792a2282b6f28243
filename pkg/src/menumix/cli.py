"""Command-line front end for reproducible runs driven by a JSON config.

Subcommands: ``simulate`` (draw a panel from a design), ``identify``
(spectral recovery on a population or empirical tensor), ``estimate`` (the
full two-step pipeline per cell), ``mc`` (replication tables), ``demand``
(share-ratio GMM and elasticities), and ``check`` (rank and assumption
diagnostics).  Every command accepts ``--config cfg.json``; explicit flags
override config values and unknown config keys are rejected by name.

Exit codes: 0 success, 1 usage error (bad flags, missing files, schema
violations), 2 numerical failure during computation.

Outputs land under ``--out``: ``report.json`` carries full-precision numbers
(shortest round-trip float form), ``tables/*.csv`` hold rounded presentation
copies, and ``log.txt`` echoes the resolved config plus the build version.
When ``--out`` ends in ``.json`` (or ``.csv`` for simulate) only the primary
file is written.  Runs with the same ``--seed`` produce byte-identical
outputs.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import subprocess
import sys

import numpy as np

from . import __version__
from .demand import elasticity_mixture, elasticity_naive, fit_all_menus, read_demand_bundle
from .errors import MenumixError, ParseError
from .estimator import FitConfig, two_step_estimate
from .ingest import empirical_tensor, parse_panel_csv
from .model import DGPSpec, build_population_tensor, check_assumptions, sample_panel
from .montecarlo import run_mc, table_csv
from .spectral import SpectralOptions, estimate_rank, lin_indep_check, spectral_identify


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract wants 1 for usage errors
    def error(self, message):
        raise _UsageError(message)


def _load_config(args: argparse.Namespace, parser: _Parser) -> None:
    """Fill unset flags from the JSON config; explicit flags win."""
    if not args.config:
        return
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise _UsageError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise _UsageError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise _UsageError("config must be a JSON object")
    allowed = {a.dest for a in parser._actions} - {"help", "config"}
    for key, val in cfg.items():
        if key not in allowed:
            raise _UsageError(f"unknown config field: {key!r}")
        if getattr(args, key, None) is None or getattr(args, key) == []:
            setattr(args, key, val)


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def _json_text(obj) -> str:
    # floats go through repr, the shortest exact round-trip form
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class _OutputSink:
    """Directory layout writer; collapses to one file for *.json / *.csv outs."""

    def __init__(self, out: str | None, single_suffix: str = ".json"):
        self.out = out
        self.single = bool(out) and out.endswith(single_suffix)

    def write_report(self, obj) -> None:
        if not self.out:
            sys.stdout.write(_json_text(obj))
            return
        path = self.out if self.single else os.path.join(self.out, "report.json")
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            fh.write(_json_text(obj))

    def write_table(self, name: str, text: str) -> None:
        if not self.out or self.single:
            return
        tdir = os.path.join(self.out, "tables")
        os.makedirs(tdir, exist_ok=True)
        with open(os.path.join(tdir, name), "w") as fh:
            fh.write(text)

    def write_log(self, args: argparse.Namespace, command: str) -> None:
        if not self.out or self.single:
            return
        os.makedirs(self.out, exist_ok=True)
        resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "func", "_parser")}
        lines = [f"command: {command}", f"version: {__version__}", f"build: {_git_describe()}"]
        lines += [f"config.{k}: {v}" for k, v in resolved.items()]
        with open(os.path.join(self.out, "log.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def write_raw(self, text: str) -> None:
        if not self.out:
            sys.stdout.write(text)
            return
        path = self.out if self.single else os.path.join(self.out, "report.json")
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as fh:
            fh.write(text)


def _load_dgp(path: str) -> DGPSpec:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise _UsageError(f"cannot read DGP file: {exc}") from exc
    try:
        return DGPSpec.from_json(text, name=os.path.splitext(os.path.basename(path))[0])
    except (ValueError, json.JSONDecodeError) as exc:
        raise _UsageError(f"bad DGP file {path}: {exc}") from exc


def _load_panel(path: str):
    try:
        with open(path) as fh:
            return parse_panel_csv(fh)
    except OSError as exc:
        raise _UsageError(f"cannot read panel file: {exc}") from exc
    except ParseError as exc:
        raise _UsageError(f"bad panel file {path}: {exc}") from exc


def _round_table(rows, header: str, fmt: str = "%.6g") -> str:
    out = [header]
    for row in rows:
        out.append(",".join(fmt % v if isinstance(v, float) else str(v) for v in row))
    return "\n".join(out) + "\n"


def _estimate_json(est) -> dict:
    d = est.to_json_dict()
    d["menus_pretty"] = [str(mask) for mask in est.menus]
    return d


def _cmd_simulate(args) -> int:
    dgp = _load_dgp(args.dgp)
    T = args.T if args.T is not None else 3
    seed = args.seed if args.seed is not None else 0
    n = args.n
    if n is None:
        raise _UsageError("simulate requires --n (or config field 'n')")
    panel = sample_panel(dgp.as_model(T=int(T)), int(n), int(seed), cell_id=args.cell or "cell0")
    buf = io.StringIO()
    panel.to_csv(buf)
    if args.out and args.out.endswith(".csv"):
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w") as fh:
            fh.write(buf.getvalue())
    else:
        sink = _OutputSink(args.out)
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "panel.csv"), "w") as fh:
                fh.write(buf.getvalue())
            sink.write_log(args, "simulate")
        else:
            sys.stdout.write(buf.getvalue())
    return 0


def _tensor_from_args(args):
    if (args.panel is None) == (args.dgp is None):
        raise _UsageError("pass exactly one of --panel or --dgp")
    if args.dgp is not None:
        dgp = _load_dgp(args.dgp)
        return build_population_tensor(dgp.as_model(T=3))
    panel = _load_panel(args.panel)
    cells = panel.cells()
    cell = args.cell if args.cell is not None else cells[0]
    if cell not in cells:
        raise _UsageError(f"cell {cell!r} not present in panel (cells: {list(cells)})")
    return empirical_tensor(panel, cell)


def _cmd_identify(args) -> int:
    tensor = _tensor_from_args(args)
    tau = args.tau if args.tau is not None else 1e-3
    rank = estimate_rank(tensor, tau=float(tau))
    d_hat = int(args.d_hat) if args.d_hat is not None else rank.d_hat
    est = spectral_identify(tensor, d_hat, SpectralOptions())
    report = {
        "d_hat": d_hat,
        "rank": {
            "d_hat": rank.d_hat,
            "singular_values": rank.singular_values.tolist(),
            "tau": float(tau),
            "saturated": bool(rank.saturated),
        },
        "estimate": _estimate_json(est),
    }
    sink = _OutputSink(args.out)
    sink.write_report(report)
    sink.write_table(
        "menus.csv",
        _round_table([(str(mask), float(w)) for mask, w in zip(est.menus, est.m_hat)], "menu,weight"),
    )
    sink.write_log(args, "identify")
    return 0


def _cmd_estimate(args) -> int:
    eps = args.eps if args.eps is not None else 0.01
    tau = args.tau if args.tau is not None else 1e-3
    cfg = FitConfig(
        eps=float(eps),
        tie_F_across_t=bool(args.tie_f) if args.tie_f is not None else False,
        starts=int(args.starts) if args.starts is not None else FitConfig().starts,
        seed=int(args.seed) if args.seed is not None else FitConfig().seed,
    )
    if (args.panel is None) == (args.dgp is None):
        raise _UsageError("pass exactly one of --panel or --dgp")
    reports = {}
    if args.dgp is not None:
        dgp = _load_dgp(args.dgp)
        tensor = build_population_tensor(dgp.as_model(T=3))
        cells = [dgp.name or "population"]
        tensors = {cells[0]: tensor}
    else:
        panel = _load_panel(args.panel)
        cells = [args.cell] if args.cell is not None else list(panel.cells())
        for c in cells:
            if c not in panel.cells():
                raise _UsageError(f"cell {c!r} not present in panel (cells: {list(panel.cells())})")
        tensors = {c: empirical_tensor(panel, c) for c in cells}
    rows = []
    require = tuple(int(a) for a in (args.require or []))
    for c in cells:
        tensor = tensors[c]
        d_hat = int(args.d_hat) if args.d_hat is not None else estimate_rank(tensor, tau=float(tau)).d_hat
        two = two_step_estimate(tensor, d_hat, cfg, require=require)
        reports[c] = {
            "d_hat": two.d_hat,
            "estimate": _estimate_json(two.estimate),
            "step1_menus": [str(m) for m in two.step1_menus],
            "warnings": list(two.warnings),
        }
        for mask, w in zip(two.estimate.menus, two.estimate.m_hat):
            rows.append((c, str(mask), float(w)))
    report = reports[cells[0]] if len(cells) == 1 else {"cells": reports}
    sink = _OutputSink(args.out)
    sink.write_report(report)
    sink.write_table("menus.csv", _round_table(rows, "cell,menu,weight"))
    sink.write_log(args, "estimate")
    return 0


_TABLE_CHOICES = ("1", "2", "bias_m", "rmse_m", "bias_F", "rmse_F")


def _cmd_mc(args) -> int:
    if args.dgp is None:
        raise _UsageError("mc requires --dgp (or config field 'dgp')")
    dgp = _load_dgp(args.dgp)
    n_list = [int(v) for v in (args.n or [10000])]
    reps = int(args.reps) if args.reps is not None else 200
    seed = int(args.seed) if args.seed is not None else 0
    jobs = int(args.jobs) if args.jobs is not None else 1
    cfg = FitConfig(
        eps=float(args.eps) if args.eps is not None else 0.01,
        tie_F_across_t=dgp.tie_F_across_t,
    )
    restrict = args.restrict if args.restrict is not None else "common"
    report = run_mc(dgp, n_list, reps, cfg=cfg, seed=seed, jobs=jobs, restrict=restrict)
    tables = args.table or list(_TABLE_CHOICES)
    sink = _OutputSink(args.out)
    sink.write_report(report.to_json_dict())
    for t in tables:
        text = table_csv(report, t)
        sink.write_table(f"table_{t}.csv", text)
        if not args.out:
            sys.stdout.write(text)
    sink.write_log(args, "mc")
    return 0


def _cmd_demand(args) -> int:
    if args.bundle is None:
        raise _UsageError("demand requires --bundle (or config field 'bundle')")
    try:
        panel = read_demand_bundle(args.bundle)
    except (OSError, ParseError) as exc:
        raise _UsageError(f"bad demand bundle: {exc}") from exc
    fits = fit_all_menus(panel)
    menu_weights = None
    if args.menu_weights is not None:
        try:
            with open(args.menu_weights) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise _UsageError(f"cannot read menu weights: {exc}") from exc
        menu_weights = {}
        toks = {"|".join(str(a) for a in mask.alternatives): mask for mask in panel.menus}
        for tok, w in raw.items():
            if tok not in toks:
                raise _UsageError(f"unknown menu in weights: {tok!r}")
            menu_weights[toks[tok]] = float(w)
        missing = [t for t, mask in toks.items() if mask not in menu_weights]
        if missing:
            raise _UsageError(f"menu weights missing entries for: {missing}")
    fit_rows = []
    report_fits = {}
    for mask, res in fits.items():
        fit_rows.append((str(mask), res.beta_hat, res.beta_se, res.j_stat, res.j_dof))
        report_fits[str(mask)] = {
            "beta_hat": res.beta_hat, "beta_se": res.beta_se,
            "alpha": res.alpha, "gamma": res.gamma,
            "j_stat": res.j_stat, "j_dof": res.j_dof,
            "regularized": res.regularized, "notes": list(res.notes),
        }
    elas_rows = []
    elas_report = []
    s_mean = panel.shares.mean(axis=2)  # (d, J, Y) average over periods
    menus = list(panel.menus)
    betas = np.array([fits[m].beta_hat for m in menus])
    for j, market in enumerate(panel.markets):
        for a in range(1, panel.Y + 1):
            p = float(panel.prices[j, a - 1])
            cond = np.array([s_mean[k, j, a - 1] if m.contains(a) else 0.0 for k, m in enumerate(menus)])
            if menu_weights is not None:
                w = np.array([menu_weights[m] for m in menus])
                if cond @ w <= 0:
                    continue
                e_mix = elasticity_mixture(betas, cond, w, p)
            else:
                e_mix = None
            for k, mask in enumerate(menus):
                if not mask.contains(a):
                    continue
                e_naive = elasticity_naive(betas[k], p, float(cond[k]))
                elas_rows.append((market, a, str(mask), e_naive, e_mix if e_mix is not None else ""))
            elas_report.append({
                "market": market, "alternative": a,
                "naive_by_menu": {str(m): elasticity_naive(betas[k], p, float(cond[k]))
                                  for k, m in enumerate(menus) if m.contains(a)},
                "mixture": e_mix,
            })
    report = {"gmm": report_fits, "elasticities": elas_report,
              "menu_weights": ({str(m): w for m, w in menu_weights.items()} if menu_weights else None)}
    sink = _OutputSink(args.out)
    sink.write_report(report)
    sink.write_table("demand_beta.csv", _round_table(fit_rows, "menu,beta_hat,se,j_stat,j_dof"))
    sink.write_table("elasticities.csv", _round_table(elas_rows, "market,alternative,menu,naive,mixture"))
    sink.write_log(args, "demand")
    return 0


def _yesno(flag: bool) -> str:
    return "yes" if flag else "no"


def _cmd_check(args) -> int:
    if args.model is None:
        raise _UsageError("check requires --model (or config field 'model')")
    dgp = _load_dgp(args.model)
    K = int(args.K) if args.K is not None else 1
    eps = float(args.eps) if args.eps is not None else 0.01
    model = dgp.as_model(T=max(3, K))
    rep = lin_indep_check(model, K=K)
    assum = check_assumptions(model, eps)
    line = (
        f"nested: {_yesno(rep.nested)}; excluded-choices: {_yesno(rep.excluded_choices)}; "
        f"full rank: {_yesno(rep.full_rank)}"
    )
    sys.stdout.write(line + "\n")
    report = {
        "nested": rep.nested,
        "excluded_choices": rep.excluded_choices,
        "full_rank": rep.full_rank,
        "k_geq_y": rep.k_geq_y,
        "smallest_sv": rep.smallest_sv,
        "sv_threshold": rep.sv_threshold,
        "K": rep.K,
        "n_menus": rep.n_menus,
        "assumptions": {
            "min_supported_F": assum.min_supported_F,
            "full_support": assum.full_support,
            "eps": assum.eps,
            "eps_separated": assum.eps_separated,
            "menus_distinct": assum.menus_distinct,
            "passed": assum.passed,
        },
    }
    if args.out:
        sink = _OutputSink(args.out)
        sink.write_report(report)
        sink.write_log(args, "check")
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="menumix", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"menumix {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, helptext, fn):
        p = sub.add_parser(name, help=helptext, parents=[], add_help=True)
        p.add_argument("--config", help="JSON config file; explicit flags override its fields")
        p.add_argument("--out", help="output directory (or single .json/.csv path)")
        p.set_defaults(func=fn, _parser=p)
        return p

    p = add("simulate", "draw a synthetic panel CSV from a design file", _cmd_simulate)
    p.add_argument("--dgp", help="design JSON (Pyd, Pd, tie_F_across_t)")
    p.add_argument("--n", type=int, help="number of units")
    p.add_argument("--T", type=int, help="panel length (default 3)")
    p.add_argument("--seed", type=int, help="sampling seed (default 0)")
    p.add_argument("--cell", help="cell id stamped on every row (default cell0)")

    p = add("identify", "spectral recovery on a population or empirical tensor", _cmd_identify)
    p.add_argument("--panel", help="panel CSV to ingest")
    p.add_argument("--cell", help="cell id within the panel (default: first)")
    p.add_argument("--dgp", help="design JSON for a population tensor instead of a panel")
    p.add_argument("--d-hat", dest="d_hat", type=int, help="override the detected number of menus")
    p.add_argument("--tau", type=float, help="relative singular value cutoff (default 1e-3)")

    p = add("estimate", "two-step menu and kernel estimation per cell", _cmd_estimate)
    p.add_argument("--panel", help="panel CSV to ingest")
    p.add_argument("--cell", help="cell id (default: every cell)")
    p.add_argument("--dgp", help="design JSON for a population tensor instead of a panel")
    p.add_argument("--d-hat", dest="d_hat", type=int, help="override the detected number of menus")
    p.add_argument("--tau", type=float, help="rank cutoff (default 1e-3)")
    p.add_argument("--eps", type=float, help="trim threshold (default 0.01)")
    p.add_argument("--tie-f", dest="tie_f", type=int, choices=(0, 1), help="tie kernels across periods")
    p.add_argument("--starts", type=int, help="random restarts per fit")
    p.add_argument("--seed", type=int, help="optimizer seed")
    p.add_argument("--require", type=int, action="append",
                   help="alternative present in every menu (repeatable)")

    p = add("mc", "replication study tables for a design", _cmd_mc)
    p.add_argument("--dgp", help="design JSON")
    p.add_argument("--n", type=int, action="append", help="sample size (repeatable)")
    p.add_argument("--reps", type=int, help="replications per sample size (default 200)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--jobs", type=int, help="parallel workers (default 1)")
    p.add_argument("--eps", type=float, help="trim threshold (default 0.01)")
    p.add_argument("--restrict", choices=("common", "none"),
                   help="dictionary restriction: impose alternatives shared by all "
                        "design menus, or none (default common)")
    p.add_argument("--table", action="append", choices=_TABLE_CHOICES,
                   help="which table(s) to emit (default: all)")

    p = add("demand", "share-ratio GMM and price elasticities", _cmd_demand)
    p.add_argument("--bundle", help="directory with shares/prices/demographics/instruments/weights CSVs")
    p.add_argument("--menu-weights", dest="menu_weights",
                   help="JSON mapping menu tokens like '1|2|3' to weights for mixture elasticities")

    p = add("check", "rank and assumption diagnostics for a design", _cmd_check)
    p.add_argument("--model", help="design JSON")
    p.add_argument("--K", type=int, help="periods per group for the rank check (default 1)")
    p.add_argument("--eps", type=float, help="separation threshold (default 0.01)")

    return parser


def cmd_dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        _load_config(args, args._parser)
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MenumixError as exc:
        if isinstance(exc, ParseError):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return cmd_dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
