"""Linear birth-death process Z with rates (b*, d*) and its martingale limit.

``W(t) = Z(t) exp(-r* t)`` converges almost surely to ``W``, which has an
atom of mass ``d*/b*`` at zero (extinction) and is otherwise exponential
with rate ``r*/b*``.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import engine
from .engine import PopState, StopCondition, Trajectory
from .rng import SeedSpec, as_seed

__all__ = [
    "BranchingParams",
    "WLaw",
    "simulate_z",
    "survival_probability",
    "w_law",
    "sample_w",
    "martingale_path",
    "estimate_w",
    "inf_martingale_tail",
    "tail_to_csv",
    "w_to_csv",
]

BD_STOICHIOMETRY = np.array([[0, 1], [0, -1]], dtype=np.int64)
BD_LABELS = ("birth", "death")


@dataclass(frozen=True)
class BranchingParams:
    b_star: float
    d_star: float

    def __post_init__(self):
        if self.d_star < 0 or not self.b_star > 0:
            raise ValueError("rates must satisfy b* > 0 and d* >= 0")
        if not self.b_star > self.d_star:
            raise ValueError("branching process must be supercritical (b* > d*)")

    @property
    def r_star(self) -> float:
        return self.b_star - self.d_star

    @property
    def array(self) -> np.ndarray:
        return np.array([self.b_star, self.d_star])

    @classmethod
    def from_derived(cls, derived) -> "BranchingParams":
        return cls(derived.b_star, derived.d_star)


@dataclass(frozen=True)
class WLaw:
    atom_mass: float
    exp_rate: float


@njit(cache=True, nogil=True)
def bd_propensities(p, n_R, n_M, K, out):
    out[0] = p[0] * n_M
    out[1] = p[1] * n_M


def simulate_z(params: BranchingParams, z0: int, stop: StopCondition, seed,
               record: bool = True, decimation: int = 1) -> Trajectory:
    """Exact path of Z from ``z0``; the count lives in the ``n_M`` column."""
    if z0 < 1:
        raise ValueError("z0 must be at least 1")
    return engine._run(bd_propensities, BD_STOICHIOMETRY, BD_LABELS, params.array, 1,
                       PopState(0, z0, 0.0), stop, seed, record=record, decimation=decimation)


def survival_probability(params: BranchingParams) -> float:
    return params.r_star / params.b_star


def w_law(params: BranchingParams) -> WLaw:
    return WLaw(atom_mass=params.d_star / params.b_star, exp_rate=params.r_star / params.b_star)


def sample_w(params: BranchingParams, seed, size: int | None = None):
    """Draw from the law of W: 0 with probability d*/b*, else Exp(r*/b*)."""
    law = w_law(params)
    rng = as_seed(seed).generator()
    n = 1 if size is None else size
    alive = rng.random(n) >= law.atom_mass
    w = np.where(alive, rng.exponential(1.0 / law.exp_rate, n), 0.0)
    return float(w[0]) if size is None else w


def martingale_path(traj: Trajectory, r_star: float) -> np.ndarray:
    """Rows ``(t, Z(t) exp(-r* t))`` at the recorded event times.

    If the run ended after its last event (time horizon), a final row at
    ``t_end`` is appended, since W keeps decreasing between jumps.
    """
    t, z = traj.times, traj.n_M
    if traj.t_end > t[-1]:
        t = np.append(t, traj.t_end)
        z = np.append(z, z[-1])
    return np.column_stack([t, z * np.exp(-r_star * t)])


@njit(cache=True, nogil=True)
def _w_run(b, d, z0, z_cap, horizon, event_cap, rng):
    """One path to extinction, ``z_cap`` or ``horizon``.

    Returns ``(code, z_end, t_end, inf_w, w_end)``; ``inf_w`` is the
    infimum of ``Z(t) exp(-r t)`` over continuous time, attained as left
    limits at jump times because W decreases between jumps.
    """
    r = b - d
    z = z0
    t = 0.0
    inf_w = float(z0)
    n = 0
    while True:
        total = (b + d) * z
        dt = -np.log1p(-rng.random()) / total
        if t + dt > horizon:
            t = horizon
            w = z * np.exp(-r * t)
            if w < inf_w:
                inf_w = w
            return 2, z, t, inf_w, w
        t += dt
        w = z * np.exp(-r * t)
        if w < inf_w:
            inf_w = w
        if rng.random() * (b + d) < b:
            z += 1
        else:
            z -= 1
        n += 1
        if z == 0:
            return 1, z, t, 0.0, 0.0
        if z >= z_cap:
            return 0, z, t, inf_w, z * np.exp(-r * t)
        if n >= event_cap:
            return 3, z, t, inf_w, z * np.exp(-r * t)


def _w_runs(params: BranchingParams, replicates, master_seed, z_cap, horizon, threads=1,
            event_cap=engine.DEFAULT_EVENT_CAP):
    b, d = params.b_star, params.d_star

    def one(i):
        return _w_run(b, d, 1, z_cap, horizon, event_cap, SeedSpec(master_seed, i).generator())

    return np.array(engine.run_replicates(one, replicates, threads), dtype=float)


def estimate_w(params: BranchingParams, replicates: int, master_seed: int,
               z_cap: int = 10_000, threads: int = 1) -> np.ndarray:
    """Per-path W estimates: ``Z e^{-r* t}`` when Z first reaches ``z_cap``, 0 if extinct."""
    out = _w_runs(params, replicates, master_seed, z_cap, math.inf, threads)
    return out[:, 4]


def inf_martingale_tail(params: BranchingParams, eps_list, replicates: int, seed: int,
                        horizon: float | None = None, z_cap: int = 10_000,
                        survival_floor: int = 10, threads: int = 1) -> list[tuple[float, float, float]]:
    """Monte-Carlo ``P(inf_t W(t) <= eps ; survival)`` per eps.

    Paths stop at ``z_cap`` (then counted as survivors) or at ``horizon``
    (default ``40 / r*``; survivors if at least ``survival_floor`` remain).
    Rows are ``(eps, probability, probability / eps**0.25)``.
    """
    if horizon is None:
        horizon = 40.0 / params.r_star
    runs = _w_runs(params, replicates, seed, z_cap, horizon, threads)
    code, z_end, inf_w = runs[:, 0], runs[:, 1], runs[:, 3]
    survived = (code == 0) | ((code == 2) & (z_end >= survival_floor))
    rows = []
    for eps in eps_list:
        if not 0 < eps <= 1:
            raise ValueError("eps must lie in (0, 1]")
        p = float(np.mean(survived & (inf_w <= eps)))
        rows.append((float(eps), p, p / eps**0.25))
    return rows


def tail_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("eps,prob,ratio\n")
    for eps, p, ratio in rows:
        buf.write(f"{eps!r},{p!r},{ratio!r}\n")
    return buf.getvalue()


def w_to_csv(w) -> str:
    """One W value per line."""
    return "".join(f"{float(v)!r}\n" for v in np.atleast_1d(w))
