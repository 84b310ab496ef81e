"""Command-line front end: ``adlkit <command> [options]``.

Settings resolve in order: command defaults, then ``--profile``, then the
command's section of the ``--config`` INI file, then explicit flags. The fully
resolved settings are echoed into a JSON sidecar next to the CSV outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .core import DynamicsParams, normalize_params
from .errors import AdlError, ConfigError, DataError, NumericalError
from .experiments import (
    PROFILES,
    Timer,
    blr_reference,
    blr_run,
    clt_experiment,
    galerkin_variance_table,
    half_gap_time,
    load_blr_data,
    map_estimate,
    parse_grid,
    sample_trajectory,
    spectral_gap_sweep,
    synthetic_blr_data,
    variance_sweep,
    write_csv,
    write_sidecar,
)
from .observables import DEFAULT_SWEEP_OBSERVABLES
from .potentials import BlrPosterior, build_model

log = logging.getLogger("adlkit")

COMMANDS = ("spectral-gap", "galerkin-variance", "variance-sweep", "clt", "sample", "blr")

DEFAULTS = {
    "spectral-gap": {"L": 10, "beta": 1.0, "gamma": 1.0, "epsilon": 1.0, "mode": "epsilon",
                     "grid": "log:0.01:10:25"},
    "galerkin-variance": {"L": 10, "beta": 1.0, "gamma": 1.0, "epsilon_grid": "log:1:100:9",
                          "observables": "q,p2"},
    "variance-sweep": {"potential": "double_well", "a": 1.0, "b": 1.0, "c": 0.5, "beta": 1.0,
                       "gamma": 1.0, "epsilon": 1.0, "mode": "epsilon", "epsilon_grid": "log:1e-2:10:13",
                       "gamma_grid": "log:1e-4:1e2:13", "dt": 2e-3, "steps": 100_000, "replicas": 10_000,
                       "observables": ",".join(DEFAULT_SWEEP_OBSERVABLES)},
    "clt": {"potential": "double_well", "a": 1.0, "b": 1.0, "c": 0.5, "beta": 1.0, "gamma": 1.0,
            "epsilon": 1.0, "dt": 0.1, "steps": 1000, "replicas": 500_000, "checkpoints": "10,100,1000",
            "observables": "q,q2", "bins": 50},
    "sample": {"potential": "harmonic", "a": 1.0, "b": 1.0, "c": 0.5, "beta": 1.0, "gamma": 1.0,
               "epsilon": 1.0, "integrator": "badodab", "dt": 2e-3, "steps": 1000, "thinning": 1,
               "observables": "q,p2,xi", "sigma_a": 1.0, "sigma_g": 0.0},
    "blr": {"nu": "1,10,100", "dt": 1e-2, "steps": 10_000, "replicas": 1, "minibatch": 100, "sigma_a": 0.0,
            "pca": 0, "prior_sigma2": 100.0, "coords": "0", "synthetic": False, "train_size": 2000,
            "test_size": 500, "reference_steps": 20_000, "reference_replicas": 8, "header": False},
}

# per-key types; anything not listed stays a string
INT_KEYS = {"L", "steps", "replicas", "thinning", "minibatch", "pca", "bins", "train_size", "test_size",
            "reference_steps", "reference_replicas", "threads", "seed"}
FLOAT_KEYS = {"beta", "gamma", "epsilon", "a", "b", "c", "dt", "sigma_a", "sigma_g", "prior_sigma2"}
BOOL_KEYS = {"synthetic", "header"}


def _coerce(key, value):
    try:
        if key in INT_KEYS:
            v = float(value)
            if v != int(v):
                raise ValueError("not an integer")
            return int(v)
        if key in FLOAT_KEYS:
            return float(value)
        if key in BOOL_KEYS:
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError("not a boolean")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r} ({exc})") from None
    return value


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adlkit", description="Adaptive Langevin sampling experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file; the section named after the command is read")
        p.add_argument("--profile", choices=sorted(k for k, v in PROFILES.items() if v["command"] == name))
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        _command_flags(name, p)
    return ap


def _command_flags(name, p):
    f = lambda flag, **kw: p.add_argument(flag, default=None, **kw)
    if name in ("spectral-gap", "galerkin-variance"):
        f("--L", dest="L", type=int)
    f("--beta", type=float)
    if name != "blr":
        f("--gamma", type=float)
        f("--epsilon", type=float)
    if name == "spectral-gap":
        f("--mode", choices=("epsilon", "gamma", "alpha"))
        f("--grid")
        f("--epsilon-grid", dest="grid_epsilon")
        f("--gamma-grid", dest="grid_gamma")
        f("--alpha-grid", dest="grid_alpha")
    if name == "galerkin-variance":
        f("--epsilon-grid", dest="epsilon_grid")
        f("--observables")
    if name in ("variance-sweep", "clt", "sample"):
        f("--potential", choices=("harmonic", "double_well"))
        f("--a", type=float)
        f("--b", type=float)
        f("--c", type=float)
        f("--observables")
    if name in ("variance-sweep", "clt", "sample", "blr"):
        f("--dt", type=float)
        f("--steps", type=int)
    if name in ("variance-sweep", "clt", "blr"):
        f("--replicas", type=int)
    if name == "variance-sweep":
        f("--mode", choices=("epsilon", "gamma", "both"))
        f("--epsilon-grid", dest="epsilon_grid")
        f("--gamma-grid", dest="gamma_grid")
    if name == "clt":
        f("--checkpoints")
        f("--bins", type=int)
    if name == "sample":
        f("--integrator", choices=("badodab", "odabado"))
        f("--thinning", type=int)
        f("--nu", type=float)
        f("--sigma-a", dest="sigma_a", type=float)
        f("--sigma-g", dest="sigma_g", type=float)
        f("--q0")
    if name == "blr":
        f("--train")
        f("--test")
        f("--nu")
        f("--minibatch", type=int)
        f("--pca", type=int)
        f("--sigma-a", dest="sigma_a", type=float)
        f("--prior-sigma2", dest="prior_sigma2", type=float)
        f("--coords")
        p.add_argument("--synthetic", action="store_const", const=True, default=None)
        f("--reference-steps", dest="reference_steps", type=int)
        f("--reference-replicas", dest="reference_replicas", type=int)


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS[args.command])
    if args.profile:
        cfg.update({k: v for k, v in PROFILES[args.profile].items() if k != "command"})
        cfg["profile"] = args.profile
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        cp.optionxform = str  # keep L upper case
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in ("common", args.command):
            if cp.has_section(section):
                cfg.update(dict(cp.items(section)))
    skip = {"command", "config", "profile", "verbose"}
    for k, v in vars(args).items():
        if k in skip or v is None:
            continue
        if k.startswith("grid_"):
            # --epsilon-grid etc. pick the sweep mode unless --mode was given
            cfg["grid"] = v
            if getattr(args, "mode", None) is None:
                cfg["mode"] = k[5:]
            continue
        cfg[k] = v
    cfg.setdefault("seed", 0)
    cfg.setdefault("threads", os.cpu_count() or 1)
    cfg.setdefault("out", "results")
    return {k: _coerce(k, v) for k, v in cfg.items()}


def _check_positive(cfg, *keys):
    for k in keys:
        if not cfg[k] > 0:
            raise ConfigError(f"{k} must be positive, got {cfg[k]!r}")


def _model(cfg):
    kw = {"a": cfg["a"], "b": cfg["b"], "c": cfg["c"]} if cfg["potential"] == "double_well" else {}
    return build_model(cfg["potential"], **kw)


def _observables(cfg):
    names = [s.strip() for s in str(cfg["observables"]).split(",") if s.strip()]
    if not names:
        raise ConfigError("no observables given")
    return names


# ---- commands -----------------------------------------------------------


def cmd_spectral_gap(cfg, out: Path):
    _check_positive(cfg, "L", "beta", "gamma", "epsilon")
    rows = spectral_gap_sweep(cfg["L"], cfg["beta"], cfg["mode"], cfg["grid"], cfg["gamma"], cfg["epsilon"])
    return [write_csv(out / "spectral_gap.csv", rows, ["gamma", "epsilon", "L", "beta", "spectral_gap"])]


def cmd_galerkin_variance(cfg, out: Path):
    _check_positive(cfg, "L", "beta", "gamma")
    rows = galerkin_variance_table(cfg["L"], cfg["beta"], cfg["gamma"], cfg["epsilon_grid"], _observables(cfg))
    cols = ["observable", "gamma", "epsilon", "L", "beta", "sigma2", "sigma2_inf"]
    return [write_csv(out / "galerkin_variance.csv", rows, cols)]


def cmd_variance_sweep(cfg, out: Path):
    _check_positive(cfg, "beta", "gamma", "epsilon", "dt", "steps", "replicas")
    model = _model(cfg)
    modes = ("epsilon", "gamma") if cfg["mode"] == "both" else (cfg["mode"],)
    files = []
    for mode in modes:
        rows = variance_sweep(
            model, cfg["beta"], mode, cfg[f"{mode}_grid"], cfg["dt"], cfg["steps"], cfg["replicas"],
            _observables(cfg), cfg["seed"], gamma=cfg["gamma"], epsilon=cfg["epsilon"], threads=cfg["threads"],
        )
        files.append(write_csv(out / f"variance_sweep_{mode}.csv", rows))
    return files


def cmd_clt(cfg, out: Path):
    _check_positive(cfg, "beta", "gamma", "epsilon", "dt", "steps", "replicas", "bins")
    model = _model(cfg)
    params = DynamicsParams(cfg["beta"], cfg["gamma"], cfg["epsilon"], n=model.n)
    cps = [int(x) for x in parse_grid(cfg["checkpoints"])]
    summary, dens, residuals = clt_experiment(
        model, params, cfg["dt"], cfg["steps"], cfg["replicas"], _observables(cfg), cfg["seed"],
        checkpoints=cps, bins=cfg["bins"], threads=cfg["threads"],
    )
    cols = sorted(residuals, key=lambda t: (t[0], t[1]))
    names = [f"{o}@K={k}" for o, k in cols]
    mat = np.column_stack([residuals[c] for c in cols])
    res_rows = [dict(zip(names, r), replica=i) for i, r in enumerate(mat)]
    return [
        write_csv(out / "clt_summary.csv", summary),
        write_csv(out / "clt_epdf.csv", dens),
        write_csv(out / "clt_residuals.csv", res_rows, ["replica"] + names),
    ]


def cmd_sample(cfg, out: Path):
    _check_positive(cfg, "beta", "dt", "steps", "thinning")
    model = _model(cfg)
    if cfg["integrator"] == "odabado":
        nu = float(cfg.get("nu") or cfg["epsilon"] ** 2)
        params = normalize_params(cfg["beta"], nu, cfg["sigma_a"], cfg["sigma_g"], n=model.n)
    else:
        _check_positive(cfg, "gamma", "epsilon")
        params = DynamicsParams(cfg["beta"], cfg["gamma"], cfg["epsilon"], n=model.n)
    q0 = cfg.get("q0")
    q0 = None if q0 in (None, "") else parse_grid(q0)
    rows = sample_trajectory(model, params, cfg["integrator"], cfg["dt"], cfg["steps"], cfg["thinning"],
                             _observables(cfg), cfg["seed"], q0=q0)
    return [write_csv(out / "trajectory.csv", rows)]


def cmd_blr(cfg, out: Path):
    _check_positive(cfg, "dt", "steps", "replicas", "minibatch", "prior_sigma2")
    if cfg["synthetic"]:
        train, test = synthetic_blr_data(cfg["train_size"], cfg["test_size"], seed=cfg["seed"])
    else:
        train, test = load_blr_data(cfg.get("train"), cfg.get("test"), pca=cfg["pca"] or None,
                                    header=cfg["header"])
    model = BlrPosterior(train, cfg["prior_sigma2"])
    coords = [int(x) for x in parse_grid(cfg["coords"])]
    if any(not 0 <= i < model.n for i in coords):
        raise ConfigError(f"coords must lie in [0, {model.n - 1}]")
    q0 = map_estimate(model)
    rows = blr_run(model, test, cfg["nu"], cfg["dt"], cfg["steps"], cfg["minibatch"], cfg["replicas"],
                   cfg["seed"], coords=coords, q0=q0, sigma_A=cfg["sigma_a"], threads=cfg["threads"])
    files = [write_csv(out / "blr_timeseries.csv", rows)]
    if cfg["reference_steps"] > 0:
        ref = blr_reference(model, test, q0, cfg["dt"], cfg["reference_steps"], max(2, cfg["reference_replicas"]),
                            cfg["seed"] + 1, coords, threads=cfg["threads"])
        summary = []
        for nu in parse_grid(cfg["nu"]):
            sel = [r for r in rows if r["nu"] == nu]
            t = np.array([r["T"] for r in sel])
            entry = {"nu": nu, "ref_test_likelihood": ref["test_likelihood"],
                     "final_test_likelihood": sel[-1]["test_likelihood"],
                     "half_gap_time_test_likelihood": half_gap_time(
                         t, [r["test_likelihood"] for r in sel], ref["test_likelihood"])}
            for i in coords:
                entry[f"ref_mean_q{i}"] = ref["mean"][i]
                entry[f"ref_std_q{i}"] = ref["std"][i]
                entry[f"final_mean_q{i}"] = sel[-1][f"mean_q{i}"]
            summary.append(entry)
        files.append(write_csv(out / "blr_summary.csv", summary))
    return files


HANDLERS = {
    "spectral-gap": cmd_spectral_gap,
    "galerkin-variance": cmd_galerkin_variance,
    "variance-sweep": cmd_variance_sweep,
    "clt": cmd_clt,
    "sample": cmd_sample,
    "blr": cmd_blr,
}


def run(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if cfg["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        out = Path(cfg["out"])
        with Timer() as t:
            files = HANDLERS[args.command](cfg, out)
        echo = {k: v for k, v in cfg.items() if k not in ("out", "threads")}
        echo["command"] = args.command
        write_sidecar(out / f"{args.command.replace('-', '_')}.json", echo, cfg["seed"], t.elapsed,
                      {"outputs": [f.name for f in files]})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except AdlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 1)
    for f in files:
        print(f)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
