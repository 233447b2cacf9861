"""Command-line front end: ``invasim <command> --config cfg.json --out DIR``.

Exit codes: 0 success, 1 runtime or assumption failure, 2 config error.
Every command writes its artifacts plus ``manifest.json`` into ``--out``.
"""
from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import tempfile
import time
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np

from . import branching, coupling, engine, flow, hitlaw
from . import model as _model
from .engine import PopState, StopCondition
from .errors import ConfigError, InvasimError
from .model import ModelSpec
from .rng import SeedSpec

COMMANDS = ("validate", "simulate", "couple", "flow", "vstar", "tau", "hitting", "sweep",
            "figure1", "figure2")

_POS_INT = {"type": "integer", "minimum": 1}
_ZETA_RULE = {
    "oneOf": [
        {"const": "sqrt"},
        {"type": "integer", "minimum": 1},
        {
            "type": "object",
            "properties": {"proportional": {"type": "number", "exclusiveMinimum": 0}},
            "required": ["proportional"],
            "additionalProperties": False,
        },
        {
            "type": "object",
            "properties": {
                "power": {
                    "type": "object",
                    "properties": {
                        "c": {"type": "number", "exclusiveMinimum": 0},
                        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                    "required": ["c", "alpha"],
                    "additionalProperties": False,
                }
            },
            "required": ["power"],
            "additionalProperties": False,
        },
    ]
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "description": {"type": "string"},
        "model": {
            "type": "object",
            "properties": {
                "family": {"enum": [f.value for f in _model.Family]},
                "params": {"type": "object", "additionalProperties": {"type": "number"}},
            },
            "required": ["family", "params"],
            "additionalProperties": False,
        },
        "K": {"type": "integer", "minimum": 2},
        "K_desk": {"type": "integer", "minimum": 2},
        "init": {
            "oneOf": [
                {"const": "default"},
                {
                    "type": "object",
                    "properties": {
                        "n_R": {"type": "integer", "minimum": 0},
                        "n_M": {"type": "integer", "minimum": 0},
                    },
                    "required": ["n_R", "n_M"],
                    "additionalProperties": False,
                },
            ]
        },
        "stop": {
            "type": "object",
            "properties": {
                "mutant_level": {"type": ["integer", "null"], "minimum": 1},
                "time_horizon": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "on_extinction": {"type": "boolean"},
                "event_cap": _POS_INT,
            },
            "additionalProperties": False,
        },
        "replicates": _POS_INT,
        "master_seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "decimation": _POS_INT,
        "zeta_rule": _ZETA_RULE,
        "xi_rule": _ZETA_RULE,
        "K_list": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
        "v_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "x_M0": {"type": "number", "exclusiveMinimum": 0},
        "eps_list": {
            "type": "array",
            "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            "minItems": 1,
        },
        "x0": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2},
        "t_end": {"type": "number", "exclusiveMinimum": 0},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "top_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "output_dir": {"type": "string"},
    },
    "required": ["model"],
    "additionalProperties": False,
}

_DEFAULTS = {"master_seed": 0, "replicates": 1, "init": "default", "decimation": 1}


# -- config handling ------------------------------------------------------------------


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    check_config(cfg)
    return cfg


def check_config(cfg) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc


def shipped_config(name: str) -> Path:
    """Path of a config shipped with the package (``sir_fig1`` or ``sir_fig1.json``)."""
    if not name.endswith(".json"):
        name += ".json"
    return Path(str(resources.files("invasim") / "configs" / name))


class _Run:
    """Config plus resolved objects; construction errors are config errors."""

    def __init__(self, cfg: dict, seed=None, threads=1, full_scale=False):
        self.cfg = {**_DEFAULTS, **cfg}
        if seed is not None:
            self.cfg["master_seed"] = int(seed)
        self.threads = max(1, int(threads))
        try:
            self.model = ModelSpec.from_dict(self.cfg["model"])
            self.stop = StopCondition.from_dict(self.cfg["stop"]) if "stop" in self.cfg else None
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        K = self.cfg.get("K")
        if not full_scale and "K_desk" in self.cfg:
            K = self.cfg["K_desk"]
        self.K = K
        self.seed = int(self.cfg["master_seed"])

    def need(self, *keys):
        missing = [k for k in keys if k not in self.cfg]
        if missing:
            raise ConfigError(f"config lacks {', '.join(missing)}")

    def need_K(self) -> int:
        if self.K is None:
            raise ConfigError("config lacks K")
        return int(self.K)

    def init(self) -> PopState:
        K = self.need_K()
        init = self.cfg["init"]
        if init == "default":
            return engine.default_init(self.model, K)
        return PopState(init["n_R"], init["n_M"], 0.0)


# -- output ---------------------------------------------------------------------------


class _Out:
    def __init__(self, root: Path):
        self.root = root
        self.files: list[str] = []
        root.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="\n") as fh:
                fh.write(text)
            os.replace(tmp, self.root / name)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        if name not in self.files:
            self.files.append(name)

    def json(self, name: str, obj) -> None:
        self.write(name, json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not JSON serializable: {type(o)}")


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


# -- commands -------------------------------------------------------------------------


def cmd_validate(run: _Run, out: _Out) -> int:
    report = _model.validate(run.model)
    for line in report.lines():
        print(line)
    out.json("validate.json", {"ok": report.ok, "checks": dict(report.checks),
                               "messages": dict(report.messages)})
    return 0 if report.ok else 1


def cmd_simulate(run: _Run, out: _Out) -> int:
    run.need("stop")
    K, init = run.need_K(), run.init()
    traj = engine.simulate(run.model, K, init, run.stop, run.seed,
                           decimation=run.cfg["decimation"])
    out.write("trajectory.csv", traj.to_csv())
    if run.cfg["replicates"] > 1:
        rows = engine.batch(run.model, K, init, run.stop, run.cfg["replicates"], run.seed,
                            threads=run.threads)
        out.write("summaries.csv", engine.summaries_to_csv(rows))
    print(f"outcome {traj.outcome.value} at t = {traj.t_end:.6g} after {traj.n_events} events")
    return 0


def cmd_couple(run: _Run, out: _Out) -> int:
    run.need("stop")
    K = run.need_K()
    xi, _ = hitlaw.zeta_for(run.cfg.get("xi_rule", "sqrt"), run.model, K)
    init = run.init()
    cinit = coupling.CoupledState(init.n_R, init.n_M, 0, 0)
    traj = coupling.simulate_coupled(run.model, K, run.stop, run.seed, init=cinit, xi=xi)
    stat = coupling.sup_ratio_deviation(traj, xi)
    out.write("coupled.csv", traj.to_csv())
    out.json("deviation.json", {"xi": xi, "sup_dev": stat.sup_dev,
                                "stop_reason": stat.stop_reason.value,
                                "survived_z": stat.survived_z})
    print(f"sup |n_M/z - 1| up to xi = {xi}: {stat.sup_dev:.6g}")
    return 0


def cmd_flow(run: _Run, out: _Out) -> int:
    run.need("t_end")
    d = _model.derive(run.model)
    x0 = run.cfg.get("x0", [d.x_R_star, run.cfg.get("x_M0", 1e-8)])
    sol = flow.integrate(run.model, x0, run.cfg["t_end"], tol=run.cfg.get("tol", 1e-10))
    out.write("flow.csv", sol.to_csv())
    return 0


def cmd_vstar(run: _Run, out: _Out) -> int:
    vs = flow.v_star(run.model)
    out.write("vstar.json", vs.to_json() + "\n")
    print(vs.to_json())
    return 0


def cmd_tau(run: _Run, out: _Out) -> int:
    x_M0 = run.cfg.get("x_M0", 1e-8)
    curve = flow.tau_of_v(run.model, run.cfg.get("v_grid"), x_M0=x_M0)
    out.write("tau.csv", curve.to_csv())
    print(f"max discrepancy vs x_M0/100: {curve.max_discrepancy:.3g}")
    return 0


def _hitting(run: _Run, out: _Out):
    run.need("zeta_rule")
    K = run.need_K()
    smp, params, report = hitlaw.hitting_experiment(
        run.model, K, run.cfg["zeta_rule"], run.cfg["replicates"], run.seed, threads=run.threads)
    out.write("hitting_sample.csv", smp.to_csv())
    out.write("histogram.csv", hitlaw.histogram_to_csv(hitlaw.histogram(smp, params)))
    out.json("report.json", report.to_dict())
    print(f"{report.n_survivors} hitting times, KS = {report.ks:.4f}")
    return report


def cmd_hitting(run: _Run, out: _Out) -> int:
    _hitting(run, out)
    return 0


def cmd_sweep(run: _Run, out: _Out) -> int:
    run.need("K_list")
    rows = coupling.deviation_sweep(run.model, run.cfg["K_list"], run.cfg.get("xi_rule", "sqrt"),
                                    run.cfg["replicates"], run.seed, threads=run.threads)
    out.write("sweep.csv", coupling.sweep_to_csv(rows))
    if "eps_list" in run.cfg:
        bp = branching.BranchingParams.from_derived(_model.derive(run.model))
        tail = branching.inf_martingale_tail(bp, run.cfg["eps_list"], run.cfg["replicates"],
                                             run.seed, z_cap=1000, threads=run.threads)
        out.write("tail.csv", branching.tail_to_csv(tail))
    return 0


_FIG1_SCRIPT = """\
# Figure 1: one invasion path in standard and log scale.
import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("figure1.csv")))
t = [float(r["t"]) for r in rows]
cols = {{"n_M/K": "n_M_over_K", "z/K": "z_over_K", "flow x_M": "x_M"}}
fig, axes = plt.subplots(1, 2, figsize=(11, 4))
for ax, log in zip(axes, (False, True)):
    for label, key in cols.items():
        ax.plot(t, [float(r[key]) for r in rows], label=label, lw=1)
    ax.axvline({t_xi!r}, color="grey", ls=":", lw=0.8)
    if log:
        ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.legend()
fig.tight_layout()
fig.savefig("figure1.png", dpi=150)
"""

_FIG2_SCRIPT = """\
# Figure 2: hitting-time histogram against the limit density.
import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("histogram.csv")))
left = [float(r["bin_left"]) for r in rows]
right = [float(r["bin_right"]) for r in rows]
count = [int(r["count"]) for r in rows]
dens = [float(r["theory_density_at_mid"]) for r in rows]
n = sum(count)
width = [b - a for a, b in zip(left, right)]
plt.bar(left, [c / (n * w) for c, w in zip(count, width)], width=width, align="edge",
        alpha=0.5, label="simulated")
plt.plot([(a + b) / 2 for a, b in zip(left, right)], dens, "r-", label="limit law")
plt.xlabel("hitting time")
plt.legend()
plt.savefig("figure2.png", dpi=150)
"""


def cmd_figure1(run: _Run, out: _Out) -> int:
    K = run.need_K()
    xi, _ = hitlaw.zeta_for(run.cfg.get("xi_rule", "sqrt"), run.model, K)
    top_fraction = run.cfg.get("top_fraction", 0.9)
    # first replicate of the master seed that survives to the top level
    for i in range(max(run.cfg["replicates"], 1000)):
        fig = hitlaw.figure1_run(run.model, K, SeedSpec(run.seed, i), xi=xi,
                                 top_fraction=top_fraction)
        if fig.survived:
            break
    else:
        raise InvasimError("no surviving path found")
    out.write("figure1.csv", fig.to_csv())
    out.json("figure1.json", {"replicate": i, "K": K, "xi": xi, "top": fig.top,
                              "t_xi": fig.t_xi, "t_top": fig.t_top,
                              "gap_branching": fig.gap_branching, "gap_flow": fig.gap_flow})
    out.write("plot_figure1.py", _FIG1_SCRIPT.format(t_xi=fig.t_xi))
    print(f"replicate {i}: gap vs branching {fig.gap_branching:.4f}, vs flow {fig.gap_flow:.4f}")
    return 0


def cmd_figure2(run: _Run, out: _Out) -> int:
    _hitting(run, out)
    out.write("plot_figure2.py", _FIG2_SCRIPT)
    return 0


_HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# -- entry point ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invasim", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir or .)")
    p.add_argument("--seed", type=int, default=None, help="master seed, overrides the config")
    p.add_argument("--threads", type=int, default=1, help="worker threads for replicate batches")
    p.add_argument("--full-scale", action="store_true", help="use K instead of K_desk")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        cfg = load_config(args.config)
        run = _Run(cfg, seed=args.seed, threads=args.threads, full_scale=args.full_scale)
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must fit in 64 unsigned bits")
        out = _Out(Path(args.out or run.cfg.get("output_dir", ".")))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        code = _HANDLERS[args.command](run, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InvasimError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code = 1
    echo = dict(run.cfg)
    if run.K is not None and args.full_scale:
        echo.pop("K_desk", None)
    out.json("manifest.json", {
        "command": args.command,
        "config": echo,
        "seed": run.seed,
        "K_used": run.K,
        "threads": run.threads,
        "exit_code": code,
        "versions": _versions(),
        "wall_time_s": round(time.perf_counter() - t0, 6),
        "outputs": list(out.files),
    })
    return code


if __name__ == "__main__":
    sys.exit(main())
