"""Limit law of the mutant hitting time and its comparison with simulation.

Conditionally on survival, the time for the mutant to reach ``zeta`` is
asymptotically ``log(zeta / W*) / r* + tau(v)`` with ``W* ~ Exp(r*/b*)``.
With ``s = t - log(zeta)/r* - tau(v)`` this is a Gumbel-type law::

    F(t) = exp(-(r*/b*) e^{-r* s}),   f(t) = (r*^2/b*) e^{-r* s} F(t)
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import coupling, engine, flow
from . import model as _model
from .engine import StopCondition
from .errors import EmptySample, InsufficientSurvivors
from .model import ModelSpec
from .rng import as_seed

__all__ = [
    "HitLawParams",
    "EmpiricalHittingSample",
    "HittingReport",
    "density",
    "cdf",
    "quantile",
    "sample",
    "ks_distance",
    "zeta_for",
    "hitting_experiment",
    "histogram",
    "histogram_to_csv",
    "Figure1Run",
    "figure1_run",
    "deterministic_gap",
]

MIN_SURVIVORS = 50


@dataclass(frozen=True)
class HitLawParams:
    r_star: float
    b_star: float
    zeta: float
    tau_v: float = 0.0

    def __post_init__(self):
        if not 0 < self.r_star <= self.b_star:
            raise ValueError("need 0 < r* <= b*")
        if not self.zeta >= 1:
            raise ValueError("zeta must be at least 1")

    @classmethod
    def from_model(cls, model: ModelSpec, zeta: float, tau_v: float = 0.0) -> "HitLawParams":
        d = _model.derive(model)
        return cls(d.r_star, d.b_star, float(zeta), float(tau_v))

    @property
    def rate(self) -> float:
        """Rate ``r*/b*`` of the conditional martingale limit ``W*``."""
        return self.r_star / self.b_star

    @property
    def location(self) -> float:
        return math.log(self.zeta) / self.r_star + self.tau_v

    @property
    def mode(self) -> float:
        return self.location + math.log(self.rate) / self.r_star

    @property
    def mean(self) -> float:
        return self.location + (math.log(self.rate) + np.euler_gamma) / self.r_star

    @property
    def std(self) -> float:
        return math.pi / (math.sqrt(6.0) * self.r_star)

    def shifted(self, delta: float) -> "HitLawParams":
        return HitLawParams(self.r_star, self.b_star, self.zeta, self.tau_v + delta)

    def density(self, t):
        return density(self, t)

    def cdf(self, t):
        return cdf(self, t)

    def quantile(self, p):
        return quantile(self, p)


def _s(params: HitLawParams, t):
    return np.asarray(t, dtype=float) - params.location


def density(params: HitLawParams, t):
    s = _s(params, t)
    with np.errstate(over="ignore", invalid="ignore"):
        e = params.rate * np.exp(-params.r_star * s)
        out = params.r_star * e * np.exp(-e)
    out = np.where(np.isfinite(e), out, 0.0)
    return out if out.ndim else float(out)


def cdf(params: HitLawParams, t):
    s = _s(params, t)
    with np.errstate(over="ignore"):
        out = np.exp(-params.rate * np.exp(-params.r_star * s))
    return out if out.ndim else float(out)


def quantile(params: HitLawParams, p):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie in (0, 1)")
    out = params.location - np.log(-np.log(p) / params.rate) / params.r_star
    return out if out.ndim else float(out)


def sample(params: HitLawParams, n: int, seed) -> np.ndarray:
    """``location - log(E)/r*`` with ``E ~ Exp(r*/b*)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    e = as_seed(seed).generator().exponential(1.0 / params.rate, n)
    return params.location - np.log(e) / params.r_star


@dataclass(frozen=True, eq=False)
class EmpiricalHittingSample:
    values: np.ndarray
    K: int
    zeta: int
    survival_frac: float
    replicates: np.ndarray | None = None  # replicate index of each value

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise ValueError("hitting times must be finite and nonnegative")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def to_csv(self) -> str:
        idx = self.replicates if self.replicates is not None else np.arange(len(self.values))
        buf = io.StringIO()
        buf.write("replicate,hit_time\n")
        for i, t in zip(np.asarray(idx).tolist(), self.values.tolist()):
            buf.write(f"{i},{t!r}\n")
        return buf.getvalue()


def ks_distance(smp, params: HitLawParams) -> float:
    """One-sample Kolmogorov-Smirnov statistic against the limit law."""
    values = smp.values if isinstance(smp, EmpiricalHittingSample) else np.asarray(smp, dtype=float)
    if len(values) == 0:
        raise EmptySample("no hitting times to compare")
    return float(stats.kstest(values, params.cdf).statistic)


def zeta_for(rule, model: ModelSpec, K: int) -> tuple[int, float]:
    """Threshold ``zeta`` and its macroscopic level ``v`` for a zeta rule.

    Rules: ``{"proportional": v}`` gives ``floor(v K)``; ``{"power": {"c": c,
    "alpha": a}}`` or ``"sqrt"`` give sublinear thresholds with ``v = 0``;
    a plain integer is used as is (``v = 0``).
    """
    if isinstance(rule, dict) and "proportional" in rule:
        v = float(rule["proportional"])
        vs = flow.v_star(model).numeric
        if not 0 < v <= 0.95 * vs:
            raise ValueError(f"proportional level {v} must lie in (0, 0.95 v*] = (0, {0.95 * vs:.6g}]")
        return int(math.floor(v * K)), v
    if isinstance(rule, dict) and "power" in rule:
        c, a = float(rule["power"]["c"]), float(rule["power"]["alpha"])
        if not 0 < a < 1:
            raise ValueError("power exponent must lie in (0, 1)")
        return max(1, int(math.floor(c * K**a))), 0.0
    if rule == "sqrt":
        return int(math.floor(math.sqrt(K))), 0.0
    if isinstance(rule, (int, np.integer)) and not isinstance(rule, bool):
        return int(rule), 0.0
    raise ValueError(f"unknown zeta rule {rule!r}")


@dataclass(frozen=True)
class HittingReport:
    K: int
    zeta: int
    v: float
    tau_v: float
    r_star: float
    b_star: float
    survival_frac: float
    ks: float
    n_survivors: int
    tau_discrepancy: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _tau_at(model: ModelSpec, v: float) -> tuple[float, float]:
    if v == 0:
        return 0.0, 0.0
    curve = flow.tau_of_v(model, v_grid=[v], x_M0=1e-8)
    return float(curve.tau[0]), curve.max_discrepancy


def hitting_experiment(model: ModelSpec, K: int, zeta_rule, replicates: int, seed: int,
                       threads: int = 1):
    """Simulate hitting times of ``zeta`` and fit them against the limit law.

    Every replicate that reaches ``zeta`` contributes its hitting time;
    ``survival_frac`` is the fraction flagged as surviving by the batch
    runner.  Returns ``(sample, params, report)``.
    """
    if replicates < 100:
        raise ValueError("need at least 100 replicates")
    zeta, v = zeta_for(zeta_rule, model, K)
    if zeta < 1:
        raise ValueError("threshold must be at least one individual")
    tau_v, disc = _tau_at(model, v)
    params = HitLawParams.from_model(model, zeta, tau_v)
    stop = StopCondition(mutant_level=zeta, on_extinction=True)
    rows = engine.batch(model, K, engine.default_init(model, K), stop, replicates, seed,
                        threads=threads)
    hit = [r for r in rows if r.outcome is engine.Outcome.HIT_LEVEL]
    if len(hit) < MIN_SURVIVORS:
        raise InsufficientSurvivors(f"only {len(hit)} of {replicates} replicates reached {zeta}")
    smp = EmpiricalHittingSample(
        values=np.array([r.hit_time for r in hit]), K=K, zeta=zeta,
        survival_frac=float(np.mean([r.survived for r in rows])),
        replicates=np.array([r.replicate for r in hit]),
    )
    report = HittingReport(
        K=int(K), zeta=zeta, v=v, tau_v=tau_v, r_star=params.r_star, b_star=params.b_star,
        survival_frac=smp.survival_frac, ks=ks_distance(smp, params), n_survivors=len(smp),
        tau_discrepancy=disc,
    )
    return smp, params, report


def histogram(smp: EmpiricalHittingSample, params: HitLawParams):
    """Freedman-Diaconis bins with the limit density at bin midpoints.

    Rows: ``(bin_left, bin_right, count, theory_density_at_mid)``.
    """
    edges = np.histogram_bin_edges(smp.values, bins="fd")
    counts, _ = np.histogram(smp.values, bins=edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    dens = density(params, mid)
    return [(float(a), float(b), int(c), float(f))
            for a, b, c, f in zip(edges[:-1], edges[1:], counts, dens)]


def histogram_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("bin_left,bin_right,count,theory_density_at_mid\n")
    for a, b, c, f in rows:
        buf.write(f"{a!r},{b!r},{c},{f!r}\n")
    return buf.getvalue()


# -- Figure 1 -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Figure1Run:
    """One coupled path with the flow restarted at ``T(xi)``.

    ``gap_branching`` is ``sup |n_M/z - 1|`` on ``[0, T(xi)]``;
    ``gap_flow`` is ``sup |n_M / (K x_M) - 1|`` on ``[T(xi), T(top)]`` where
    ``x`` is the flow started from the observed densities at ``T(xi)``.
    """

    traj: coupling.CoupledTrajectory
    flow: flow.FlowSolution | None
    xi: int
    top: int
    t_xi: float
    t_top: float
    gap_branching: float
    gap_flow: float

    @property
    def survived(self) -> bool:
        return math.isfinite(self.t_top)

    def curves(self) -> np.ndarray:
        """Columns ``t, n_M/K, z/K, x_M`` (``x_M`` is NaN before ``T(xi)``)."""
        t = self.traj.times
        K = self.traj.K
        x = np.full(len(t), np.nan)
        if self.flow is not None:
            m = (t >= self.t_xi) & (t <= self.t_xi + self.flow.t_end)
            x[m] = self.flow(t[m] - self.t_xi)[:, 1]
        return np.column_stack([t, self.traj.n_M / K, self.traj.z / K, x])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,n_M_over_K,z_over_K,x_M\n")
        for row in self.curves().tolist():
            buf.write(",".join(repr(v) for v in row) + "\n")
        return buf.getvalue()


def figure1_run(model: ModelSpec, K: int, seed, xi: int | None = None,
                top_fraction: float = 0.9, tol: float = 1e-10) -> Figure1Run:
    """Coupled path up to ``floor(top_fraction * v* K)`` mutants.

    ``xi`` defaults to ``floor(sqrt(K))``.  A path that dies out (or never
    reaches the top level) gets infinite ``t_top`` and NaN gaps.
    """
    xi = int(math.floor(math.sqrt(K))) if xi is None else int(xi)
    vs = flow.v_star(model).numeric
    top = int(math.floor(top_fraction * vs * K))
    if top <= xi:
        raise ValueError("top level must exceed xi")
    traj = coupling.simulate_coupled(model, K, StopCondition(mutant_level=top), seed,
                                     track="mutant", xi=xi, z_cap=1000 * top)
    n_M, z, t = traj.n_M, traj.z, traj.times
    hit_xi = np.flatnonzero(n_M >= xi)
    hit_top = np.flatnonzero(n_M >= top)
    if hit_xi.size == 0 or hit_top.size == 0:
        return Figure1Run(traj, None, xi, top, math.inf, math.inf, math.nan, math.nan)
    i_xi, i_top = hit_xi[0], hit_top[0]
    ok = z[: i_xi + 1] >= 1
    gap_b = float(np.max(np.abs(n_M[: i_xi + 1][ok] / z[: i_xi + 1][ok] - 1.0))) if ok.any() else math.nan
    t_xi, t_top = float(t[i_xi]), float(t[i_top])
    x0 = (traj.n_R[i_xi] / K, n_M[i_xi] / K)
    sol = flow.integrate(model, x0, max(t_top - t_xi, 1e-12), tol=tol)
    window = slice(i_xi, i_top + 1)
    x_M = sol(t[window] - t_xi)[:, 1]
    gap_f = float(np.max(np.abs(n_M[window] / (K * x_M) - 1.0)))
    return Figure1Run(traj, sol, xi, top, t_xi, t_top, gap_b, gap_f)


# -- deterministic phase ------------------------------------------------------------


def deterministic_gap(model: ModelSpec, K: int, n_R0: int, n_M0: int, v: float, seed,
                      tol: float = 1e-10) -> float:
    """``sup |X_M / x_M - 1|`` for ``t <= tau_M(x, v)``, ``x = (n_R0, n_M0)/K``.

    ``X`` is the scaled chain and ``x`` the flow from the same densities.
    Both the post-event value and the left limit at each event time enter
    the supremum, so it is exact for the piecewise-constant chain.
    Returns ``inf`` if the chain's mutants die out before the window ends.
    """
    x0 = (n_R0 / K, n_M0 / K)
    tau = flow.tau_m(model, x0, v, tol=tol).time
    if not math.isfinite(tau):
        raise ValueError(f"level {v} is not reached by the flow from {x0}")
    traj = engine.simulate(model, K, engine.PopState(n_R0, n_M0, 0.0),
                           StopCondition(time_horizon=tau, on_extinction=True), seed)
    if traj.outcome is engine.Outcome.EXTINCT:
        return math.inf
    sol = flow.integrate(model, x0, tau, tol=tol)
    t = traj.times
    x_M = sol(np.minimum(t, tau))[:, 1]
    X = traj.n_M / K
    gap = np.abs(X / x_M - 1.0)
    left = np.abs(X[:-1] / x_M[1:] - 1.0)
    end = abs(X[-1] / sol(tau)[1] - 1.0)
    return float(max(gap.max(), left.max(initial=0.0), end))
