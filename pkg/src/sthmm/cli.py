"""Command-line interface: ``sthmm {simulate,fit,benchmark,preprocess,select-k}``.

Every command accepts ``--config FILE``, an INI file whose section named
after the command (``[fit]``, ``[select-k]``, ...) supplies option values
using the long flag names (``iters = 2000``, ``no-warm-start = yes``).
Flags given on the command line override the file.  Unknown keys are
errors.

The number of worker processes for replicate and K fan-out is read from
the ``STHMM_WORKERS`` environment variable (default 1).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diagnostics, synthdata
from .emission import Dataset, default_priors, read_observations_csv, write_observations_csv
from .graph import load_edge_list
from .latent import LatentParams
from .samplers import SamplerConfig, child_seed, fit

ENV_WORKERS = "STHMM_WORKERS"

DEFAULTS = {
    "simulate": {"scenario": "A", "replicates": 50, "seed": 0, "burn_sweeps": 500},
    "fit": {"algo": "exchange", "iters": 10_000, "burnin": 5_000, "aux": 5, "thin": 1},
    "benchmark": {"scenario": "A", "replicates": 10, "seed": 12345, "iters": 2_000,
                  "burnin": 1_000, "aux": 5, "thin": 1},
    "select-k": {"algo": "exchange", "iters": 10_000, "burnin": 5_000, "aux": 5, "thin": 10,
                 "k_min": 1, "k_max": 4},
    "preprocess": {},
}
SAMPLER_DEFAULTS = {"seed": 0, "field_thin": 1, "noisy_j": 1, "target_accept": 0.44,
                    "prior_sd": 1.0, "emission_init": "prior", "relabel": "mu"}


class CLIError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved options of one command: defaults, then config file, then flags."""

    command: str
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        vals = self.__dict__.get("values", {})
        if name in vals:
            return vals[name]
        raise AttributeError(name)

    def sampler_config(self, algorithm: str | None = None) -> SamplerConfig:
        v = self.values
        sched = None
        if v.get("aux_schedule"):
            try:
                m0, rho = (int(x) for x in str(v["aux_schedule"]).split(","))
            except ValueError:
                raise CLIError(f"aux-schedule must be 'M0,RHO', got {v['aux_schedule']!r}") from None
            sched = (m0, rho)
        try:
            return SamplerConfig(
                iterations=v["iters"], burn_in=v["burnin"], thinning=v["thin"],
                algorithm=algorithm or v.get("algo", "exchange"), aux_iterations=v["aux"],
                aux_schedule=sched, warm_start=not v.get("no_warm_start"),
                noisy_j=v["noisy_j"], target_accept=v["target_accept"],
                theta_prior_sd=v["prior_sd"], symmetric=bool(v.get("symmetric")),
                shared_time=bool(v.get("shared_time")), field_thinning=v["field_thin"],
            )
        except ValueError as e:
            raise CLIError(str(e)) from None


# --- parser -----------------------------------------------------------------


def _add_data_args(sp):
    sp.add_argument("--bundle", help="dataset bundle directory (observations, edges, optional truth)")
    sp.add_argument("--observations", help="observation CSV with columns site,time,y1..yd")
    sp.add_argument("--edges", help="edge-list file")


def _add_sampler_args(sp, with_algo=True):
    if with_algo:
        sp.add_argument("--algo", choices=["pseudo", "exchange", "noisy_exchange"])
    sp.add_argument("--iters", type=int, help="total iterations R")
    sp.add_argument("--burnin", type=int, help="iterations discarded")
    sp.add_argument("--thin", type=int, help="keep every n-th post-burn-in draw")
    sp.add_argument("--field-thin", type=int, help="keep the field every n-th stored draw")
    sp.add_argument("--aux", type=int, help="auxiliary Gibbs sweeps per exchange step")
    sp.add_argument("--aux-schedule", help="decreasing schedule 'M0,RHO': max(aux, M0 - r // RHO)")
    sp.add_argument("--noisy-j", type=int, help="auxiliary fields per noisy-exchange step")
    sp.add_argument("--no-warm-start", action="store_true", default=None,
                    help="start auxiliary chains from a uniform field")
    sp.add_argument("--symmetric", action="store_true", default=None)
    sp.add_argument("--shared-time", action="store_true", default=None)
    sp.add_argument("--target-accept", type=float)
    sp.add_argument("--prior-sd", type=float, help="prior sd of every latent parameter")
    sp.add_argument("--emission-init", choices=["prior", "moment"])
    sp.add_argument("--univariate", action="store_true", default=None,
                    help="normal / inverse-gamma priors for d = 1")
    sp.add_argument("--relabel", choices=["mu", "none"],
                    help="order states by the first mean component (default mu)")
    sp.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sthmm", description="Spatio-temporal hidden Markov models.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate scenario replicates as dataset bundles")
    s.add_argument("--scenario", choices=list(synthdata.SCENARIOS))
    s.add_argument("--replicates", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--burn-sweeps", type=int)
    s.add_argument("--out", help="output directory")

    s = sub.add_parser("fit", help="fit one model")
    _add_data_args(s)
    s.add_argument("--K", type=int, dest="K", help="number of latent states")
    _add_sampler_args(s)
    s.add_argument("--out", help="output directory")

    s = sub.add_parser("benchmark", help="pseudo-posterior vs exchange MAE over replicates")
    s.add_argument("--scenario", choices=list(synthdata.SCENARIOS))
    s.add_argument("--replicates", type=int)
    _add_sampler_args(s, with_algo=False)
    s.add_argument("--out", help="output directory")

    s = sub.add_parser("select-k", help="choose the number of states by DIC")
    _add_data_args(s)
    s.add_argument("--k-min", type=int)
    s.add_argument("--k-max", type=int)
    s.add_argument("--no-early-stop", action="store_true", default=None,
                   help="evaluate every K instead of stopping at the first DIC rise")
    _add_sampler_args(s)
    s.add_argument("--out", help="output directory")

    s = sub.add_parser("preprocess", help="levels to relative variations (percent)")
    s.add_argument("--input", help="CSV with columns site,time,<one or more level columns>")
    s.add_argument("--out", help="output observation CSV")

    for sp in sub.choices.values():
        sp.add_argument("--config", help="INI file; the section named after the command is used")
    return p


def _coerce(action, raw: str, key: str):
    if isinstance(action, argparse._StoreTrueAction):
        low = raw.strip().lower()
        if low in ("1", "yes", "true", "on"):
            return True
        if low in ("0", "no", "false", "off"):
            return False
        raise CLIError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        val = action.type(raw) if action.type else raw
    except ValueError:
        raise CLIError(f"config key {key!r}: bad value {raw!r}") from None
    if action.choices is not None and val not in action.choices:
        raise CLIError(f"config key {key!r}: {val!r} not in {list(action.choices)}")
    return val


def resolve(argv=None) -> RunConfig:
    parser = build_parser()
    ns = parser.parse_args(argv)
    cmd = ns.command
    sub = parser._subparsers._group_actions[0].choices[cmd]
    values = dict(DEFAULTS[cmd])
    if cmd not in ("simulate", "preprocess"):
        for k, v in SAMPLER_DEFAULTS.items():
            values.setdefault(k, v)
    if ns.config:
        if not Path(ns.config).is_file():
            raise CLIError(f"config file not found: {ns.config}")
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read(ns.config)
        if cp.has_section(cmd):
            by_flag = {a.option_strings[0].lstrip("-"): a for a in sub._actions
                       if a.option_strings and a.dest not in ("help", "config")}
            for key, raw in cp.items(cmd):
                if key not in by_flag:
                    raise CLIError(f"unknown key {key!r} in section [{cmd}] of {ns.config}")
                values[by_flag[key].dest] = _coerce(by_flag[key], raw, key)
    for k, v in vars(ns).items():
        if v is not None and k not in ("command", "config"):
            values[k] = v
    return RunConfig(cmd, values)


# --- helpers ----------------------------------------------------------------


def workers() -> int:
    raw = os.environ.get(ENV_WORKERS, "1")
    try:
        n = int(raw)
    except ValueError:
        raise CLIError(f"{ENV_WORKERS} must be an integer, got {raw!r}") from None
    if n < 1:
        raise CLIError(f"{ENV_WORKERS} must be >= 1")
    return n


def _pmap(fn, items):
    items = list(items)
    n = min(workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def _require(cfg: RunConfig, *keys):
    for k in keys:
        if cfg.values.get(k) is None:
            raise CLIError(f"{cfg.command}: --{k.replace('_', '-')} is required")


def _out_dir(path) -> Path:
    d = Path(path)
    if d.exists() and not d.is_dir():
        raise CLIError(f"output path exists and is not a directory: {d}")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_data(cfg: RunConfig) -> Dataset:
    v = cfg.values
    if v.get("bundle"):
        if not Path(v["bundle"]).is_dir():
            raise CLIError(f"bundle directory not found: {v['bundle']}")
        return synthdata.read_bundle(v["bundle"])
    if not v.get("observations") or not v.get("edges"):
        raise CLIError(f"{cfg.command}: give --bundle, or both --observations and --edges")
    for key in ("observations", "edges"):
        if not Path(v[key]).is_file():
            raise CLIError(f"{key} file not found: {v[key]}")
    with open(v["observations"]) as fh:
        y = read_observations_csv(fh)
    with open(v["edges"]) as fh:
        g = load_edge_list(fh)
    return Dataset(y, g)


def _priors(cfg: RunConfig, d: int):
    return default_priors(d, univariate=bool(cfg.values.get("univariate")))


def _fit_one(dataset, K, cfg: RunConfig, algorithm=None, seed=None):
    out = fit(dataset, K, cfg.sampler_config(algorithm), cfg.seed if seed is None else seed,
              _priors(cfg, dataset.d), emission_init=cfg.emission_init)
    if cfg.relabel == "mu":
        out = diagnostics.relabel_by_mu(out)
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _f(x):
    return repr(float(x))


# --- commands ---------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    _require(cfg, "out")
    if cfg.replicates < 1:
        raise CLIError("--replicates must be >= 1")
    out = _out_dir(cfg.out)
    spec = synthdata.scenario_preset(cfg.scenario, seed=cfg.seed, replicates=cfg.replicates)
    spec.burn_sweeps = cfg.burn_sweeps
    datasets = _pmap(_simulate_job, [(spec, r) for r in range(cfg.replicates)])
    for r, ds in enumerate(datasets):
        synthdata.write_bundle(ds, out / f"replicate_{r + 1:03d}")
    print(f"wrote {len(datasets)} scenario {spec.name} bundles to {out}")
    return 0


def _simulate_job(args):
    spec, r = args
    return synthdata.sample_dataset(spec, r)


def _acceptance_rows(out):
    return [[n, _f(a), _f(b), _f(np.exp(s))] for n, a, b, s in
            zip(out.theta_names, out.acceptance, out.acceptance_post, out.final_log_scale)]


def cmd_fit(cfg: RunConfig) -> int:
    _require(cfg, "K", "out")
    dataset = _load_data(cfg)
    out_dir = _out_dir(cfg.out)
    out = _fit_one(dataset, cfg.K, cfg)
    with open(out_dir / "chain.csv", "w", newline="") as fh:
        out.to_csv(fh)
    if out.fields is not None:
        with open(out_dir / "fields.csv", "w", newline="") as fh:
            out.fields_to_csv(fh)
    _write_rows(out_dir / "acceptance.csv", ["parameter", "acceptance", "acceptance_post_burnin", "final_scale"],
                _acceptance_rows(out))
    rep = diagnostics.diagnose(out, dataset)
    with open(out_dir / "report.json", "w") as fh:
        rep.to_json(fh)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        rep.to_csv(fh)
    msg = f"{out.algorithm}: {out.n_draws} draws, DIC {rep.dic:.3f}"
    if rep.misclassification is not None:
        msg += f", misclassification {rep.misclassification:.4f}"
    print(msg)
    return 0


def _benchmark_job(args):
    spec, r, cfg = args
    ds = synthdata.sample_dataset(spec, r)
    seed = child_seed(cfg.seed, r, 3)
    res = {}
    for algo in ("exchange", "pseudo"):
        out = _fit_one(ds, spec.K, cfg, algorithm=algo, seed=seed)
        res[algo] = out.theta.mean(axis=0)
        res[algo + "_names"] = out.theta_names
    return res


def cmd_benchmark(cfg: RunConfig) -> int:
    _require(cfg, "out")
    if cfg.replicates < 1:
        raise CLIError("--replicates must be >= 1")
    cfg.sampler_config("exchange")
    out_dir = _out_dir(cfg.out)
    spec = synthdata.scenario_preset(cfg.scenario, seed=cfg.seed, replicates=cfg.replicates)
    results = _pmap(_benchmark_job, [(spec, r, cfg) for r in range(cfg.replicates)])
    names = results[0]["exchange_names"]
    truth = LatentParams.from_flat(spec.K, spec.theta.flat, bool(cfg.values.get("symmetric")),
                                   bool(cfg.values.get("shared_time"))).free_vector()
    est = {a: np.array([res[a] for res in results]) for a in ("exchange", "pseudo")}
    m = {a: diagnostics.mae(est[a], truth) for a in est}
    rows = []
    for j, name in enumerate(names):
        e, p = m["exchange"][j], m["pseudo"][j]
        best = "exchange" if e < p else "pseudo" if p < e else "tie"
        rows.append([name, _f(truth[j]), _f(e), _f(p), best])
    header = ["parameter", "truth", "exchange_mae", "pseudo_mae", "best"]
    _write_rows(out_dir / "benchmark.csv", header, rows)
    _write_rows(out_dir / "estimates.csv", ["replicate", "algorithm"] + names,
                [[r + 1, a] + [_f(x) for x in est[a][r]]
                 for r in range(cfg.replicates) for a in ("exchange", "pseudo")])
    wins = sum(r[-1] == "exchange" for r in rows)
    _write_json(out_dir / "benchmark.json", {
        "scenario": spec.name, "replicates": cfg.replicates, "seed": cfg.seed,
        "iterations": cfg.iters, "burn_in": cfg.burnin, "aux_iterations": cfg.aux,
        "rows": [dict(zip(header, [r[0], float(r[1]), float(r[2]), float(r[3]), r[4]])) for r in rows],
        "exchange_wins": wins,
    })
    for r in rows:
        print(f"{r[0]:>16}  exchange {float(r[2]):.4f}  pseudo {float(r[3]):.4f}  {r[4]}")
    print(f"exchange lower on {wins} of {len(rows)} parameters")
    return 0


def _select_job(args):
    dataset, K, cfg = args
    out = _fit_one(dataset, K, cfg)
    return diagnostics.dic(out, dataset)


def select_k(dataset: Dataset, cfg: RunConfig, k_min: int, k_max: int, early_stop: bool = True):
    """DIC for K = k_min..k_max; returns ``(table, chosen_K)``.

    With ``early_stop`` the search ends at the first K whose DIC exceeds the
    previous one.  The chosen K minimises DIC over the evaluated rows.
    """
    if k_min < 1 or k_max < k_min:
        raise CLIError("need 1 <= k-min <= k-max")
    ks = range(k_min, k_max + 1)
    table = []
    if early_stop and workers() == 1:
        for K in ks:
            table.append((K, _select_job((dataset, K, cfg))))
            if len(table) > 1 and table[-1][1].dic > table[-2][1].dic:
                break
    else:
        res = _pmap(_select_job, [(dataset, K, cfg) for K in ks])
        for K, r in zip(ks, res):
            table.append((K, r))
            if early_stop and len(table) > 1 and r.dic > table[-2][1].dic:
                break
    chosen = min(table, key=lambda kr: kr[1].dic)[0]
    return table, chosen


def cmd_select_k(cfg: RunConfig) -> int:
    _require(cfg, "out")
    dataset = _load_data(cfg)
    cfg.sampler_config()
    out_dir = _out_dir(cfg.out)
    table, chosen = select_k(dataset, cfg, cfg.k_min, cfg.k_max, not cfg.values.get("no_early_stop"))
    _write_rows(out_dir / "dic.csv", ["K", "dic", "dbar", "dhat", "p_d"],
                [[K, _f(r.dic), _f(r.dbar), _f(r.dhat), _f(r.p_d)] for K, r in table])
    _write_json(out_dir / "selection.json", {
        "chosen_K": chosen,
        "evaluated": [{"K": K, **r._asdict()} for K, r in table],
    })
    for K, r in table:
        print(f"K={K}  DIC {r.dic:.3f}  pD {r.p_d:.3f}")
    print(f"chosen K = {chosen}")
    return 0


def relative_variation(levels: np.ndarray) -> np.ndarray:
    """``100 (r[:, t] - r[:, t-1]) / r[:, t-1]`` for t >= 2, shape (N, T-1, d)."""
    r = np.asarray(levels, dtype=float)
    if r.ndim == 2:
        r = r[:, :, None]
    if r.shape[1] < 2:
        raise CLIError("need at least two time points")
    den = r[:, :-1]
    bad = np.argwhere(den <= 0)
    if len(bad):
        i, t, _ = bad[0]
        raise CLIError(f"non-positive level at site {i + 1}, time {t + 1} (denominator of time {t + 2})")
    return (r[:, 1:] - den) / den * 100.0


def _read_levels(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0][:2]] != ["site", "time"] or len(rows[0]) < 3:
        raise CLIError(f"{path}: header must be site,time followed by level columns")
    data = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            data[int(row[0]), int(row[1])] = [float(x) for x in row[2:]]
        except ValueError:
            raise CLIError(f"{path}: line {lineno}: non-numeric entry") from None
    if not data:
        raise CLIError(f"{path}: no data rows")
    if min(min(k) for k in data) < 1:
        raise CLIError(f"{path}: site and time indices are 1-based")
    N = max(i for i, _ in data)
    T = max(t for _, t in data)
    r = np.full((N, T, len(rows[0]) - 2), np.nan)
    for (i, t), v in data.items():
        r[i - 1, t - 1] = v
    if np.isnan(r).any():
        raise CLIError(f"{path}: levels do not cover every (site, time)")
    return r


def cmd_preprocess(cfg: RunConfig) -> int:
    _require(cfg, "input", "out")
    if not Path(cfg.input).is_file():
        raise CLIError(f"input file not found: {cfg.input}")
    y = relative_variation(_read_levels(cfg.input))
    Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
    with open(cfg.out, "w", newline="") as fh:
        write_observations_csv(y, fh)
    print(f"wrote {y.shape[0]} sites x {y.shape[1]} times to {cfg.out}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "benchmark": cmd_benchmark,
            "select-k": cmd_select_k, "preprocess": cmd_preprocess}


def main(argv=None) -> int:
    try:
        cfg = resolve(argv)
        return COMMANDS[cfg.command](cfg)
    except SystemExit as e:
        return int(e.code or 0)
    except (CLIError, ValueError, OSError, RuntimeError) as e:
        print(f"sthmm: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
