"""Joint simulation of the mutant count and its branching approximation.

The two processes share their event streams through a four-component
chain ``(n_R, q, r_m, r_z)``: ``q`` individuals belong to both processes,
``r_m`` only to the mutant population and ``r_z`` only to the branching
process, so ``n_M = q + r_m`` and ``z = q + r_z``.  A q-individual gives
birth in both processes at rate ``min(b, b*)`` and the excess rate of
either side spawns an unshared individual; deaths split the same way with
``max`` (see :func:`coupled_channels`).  Each marginal is an exact sample
of its own chain.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import engine
from . import model as _model
from .engine import Outcome, StopCondition
from .model import ModelSpec
from .rng import SeedSpec, as_seed

__all__ = [
    "COUPLED_LABELS",
    "CoupledState",
    "CoupledTrajectory",
    "DeviationStat",
    "coupled_channels",
    "simulate_coupled",
    "sup_ratio_deviation",
    "deviation_sweep",
    "sweep_to_csv",
]

COUPLED_LABELS = (
    "resident_birth",
    "resident_death",
    "joint_birth",
    "mutant_only_birth",
    "branching_only_birth",
    "joint_death",
    "branching_only_death",
    "mutant_only_death",
    "r_m_birth",
    "r_m_death",
    "r_z_birth",
    "r_z_death",
)
N_CHANNELS = len(COUPLED_LABELS)

# what each stop mode watches: the mutant marginal, the branching marginal, or both
TRACK_MUTANT, TRACK_BRANCHING, TRACK_BOTH = 0, 1, 2
_TRACKS = {"mutant": TRACK_MUTANT, "branching": TRACK_BRANCHING, "both": TRACK_BOTH}

DEFAULT_Z_FLOOR = 10


@njit(cache=True, nogil=True)
def coupled_stoichiometry(shared):
    """Changes of ``(n_R, q, r_m, r_z)`` per channel.

    With a shared resident measure (SIR) every real mutant birth removes a
    resident, and there is no separate resident-death channel.
    """
    s = 1 if shared else 0
    S = np.zeros((12, 4), dtype=np.int64)
    S[0, 0] = 1
    S[1, 0] = -1
    S[2, 0] = -s
    S[2, 1] = 1
    S[3, 0] = -s
    S[3, 2] = 1
    S[4, 3] = 1
    S[5, 1] = -1
    S[6, 1] = -1
    S[6, 2] = 1
    S[7, 1] = -1
    S[7, 3] = 1
    S[8, 0] = -s
    S[8, 2] = 1
    S[9, 2] = -1
    S[10, 3] = 1
    S[11, 3] = -1
    return S


@njit(cache=True, nogil=True)
def coupled_propensities(indiv, p, shared, K, n_R, q, r_m, r_z, b_star, d_star, out):
    b_R, d_R, b, d = indiv(p, n_R / K, (q + r_m) / K)
    out[0] = n_R * b_R
    out[1] = 0.0 if shared else n_R * d_R
    out[2] = q * min(b, b_star)
    out[3] = q * max(b - b_star, 0.0)
    out[4] = q * max(b_star - b, 0.0)
    out[5] = q * min(d, d_star)
    out[6] = q * max(d_star - d, 0.0)
    out[7] = q * max(d - d_star, 0.0)
    out[8] = r_m * b
    out[9] = r_m * d
    out[10] = r_z * b_star
    out[11] = r_z * d_star


@njit(cache=True, nogil=True)
def _coupled_run(indiv, p, shared, K, b_star, d_star, n_R0, q0, rm0, rz0,
                 level_m, level_z, track, xi, horizon, stop_on_extinction, event_cap,
                 z_cap, record, rng):
    S = coupled_stoichiometry(shared)
    a = np.zeros(N_CHANNELS)
    n_R, q, rm, rz = n_R0, q0, rm0, rz0
    t = 0.0

    size = 1024 if record else 1
    rec_t = np.empty(size)
    rec_x = np.empty((size, 4), dtype=np.int64)
    rec_c = np.empty(size, dtype=np.int32)
    rec_t[0] = t
    rec_x[0, 0] = n_R
    rec_x[0, 1] = q
    rec_x[0, 2] = rm
    rec_x[0, 3] = rz
    rec_c[0] = -1
    n_rec = 1

    # per-marginal stats: first hit of the level, extinction time
    hit_m = np.nan
    hit_z = np.nan
    ext_m = np.nan
    ext_z = np.nan
    n_M = q + rm
    z = q + rz
    if level_m > 0 and n_M >= level_m:
        hit_m = 0.0
    if level_z > 0 and z >= level_z:
        hit_z = 0.0
    if n_M == 0:
        ext_m = 0.0
    if z == 0:
        ext_z = 0.0
    sup_dev = 0.0
    if z >= 1:
        sup_dev = abs(n_M / z - 1.0)
    dev_open = not (xi > 0 and n_M >= xi)
    n_events = 0
    z_capped = False
    outcome = 2  # timeout

    while True:
        # stop test on the current state
        m_done = (not np.isnan(hit_m)) or (stop_on_extinction and n_M == 0)
        z_done = (not np.isnan(hit_z)) or (stop_on_extinction and z == 0)
        if track == 0:
            if not np.isnan(hit_m):
                outcome = 0
                break
            if stop_on_extinction and (n_M == 0 or z == 0):
                outcome = 1
                break
        elif track == 1:
            if not np.isnan(hit_z):
                outcome = 0
                break
            if z_done:
                outcome = 1
                break
        else:
            if m_done and z_done:
                outcome = 0 if (not np.isnan(hit_m) and not np.isnan(hit_z)) else 1
                break

        if z_cap > 0 and z >= z_cap:
            z_capped = True
            outcome = 2
            break

        coupled_propensities(indiv, p, shared, K, n_R, q, rm, rz, b_star, d_star, a)
        total = 0.0
        for i in range(N_CHANNELS):
            total += a[i]
        if not total > 0.0:
            if horizon < np.inf:
                t = horizon
            outcome = 2 if (n_M > 0 or z > 0 or horizon < np.inf) else 1
            break
        if n_events >= event_cap:
            outcome = 3
            break
        dt = -np.log1p(-rng.random()) / total
        if t + dt > horizon:
            t = horizon
            outcome = 2
            break
        t += dt
        k = engine.pick_channel(a, N_CHANNELS, total, rng.random())
        n_R += S[k, 0]
        q += S[k, 1]
        rm += S[k, 2]
        rz += S[k, 3]
        if n_R < 0 or q < 0 or rm < 0 or rz < 0:
            raise RuntimeError("coupled event drove a component negative")
        n_events += 1
        n_M = q + rm
        z = q + rz

        if level_m > 0 and np.isnan(hit_m) and n_M >= level_m:
            hit_m = t
        if level_z > 0 and np.isnan(hit_z) and z >= level_z:
            hit_z = t
        if n_M == 0 and np.isnan(ext_m):
            ext_m = t
        if z == 0 and np.isnan(ext_z):
            ext_z = t
        if dev_open:
            if z >= 1:
                dv = abs(n_M / z - 1.0)
                if dv > sup_dev:
                    sup_dev = dv
            if xi > 0 and n_M >= xi:
                dev_open = False

        if record:
            if n_rec == rec_t.shape[0]:
                rec_t = engine._grow_f(rec_t)
                new_x = np.empty((2 * rec_x.shape[0], 4), dtype=np.int64)
                new_x[: rec_x.shape[0]] = rec_x
                rec_x = new_x
                rec_c = engine._grow_i(rec_c)
            rec_t[n_rec] = t
            rec_x[n_rec, 0] = n_R
            rec_x[n_rec, 1] = q
            rec_x[n_rec, 2] = rm
            rec_x[n_rec, 3] = rz
            rec_c[n_rec] = k
            n_rec += 1

    stats = np.array([hit_m, hit_z, ext_m, ext_z, sup_dev, float(n_events),
                      float(n_R), float(q), float(rm), float(rz), 1.0 if z_capped else 0.0])
    return outcome, t, stats, rec_t[:n_rec], rec_x[:n_rec], rec_c[:n_rec]


@dataclass(frozen=True)
class CoupledState:
    n_R: int
    q: int
    r_m: int
    r_z: int
    t: float = 0.0

    def __post_init__(self):
        if min(self.n_R, self.q, self.r_m, self.r_z) < 0:
            raise ValueError("components must be nonnegative")

    @property
    def n_M(self) -> int:
        return self.q + self.r_m

    @property
    def z(self) -> int:
        return self.q + self.r_z


@dataclass(frozen=True, eq=False)
class CoupledTrajectory:
    """Recorded joint path; ``states`` columns are ``(n_R, q, r_m, r_z)``.

    Row 0 is the initial state, each further row the state after one event.
    """

    K: int
    initial: CoupledState
    times: np.ndarray
    states: np.ndarray
    channel: np.ndarray
    outcome: Outcome
    t_end: float
    n_events: int
    mutant_hit_time: float
    branching_hit_time: float
    mutant_extinct_time: float
    branching_extinct_time: float
    online_sup_dev: float
    xi: int = 0
    z_capped: bool = False

    @property
    def n_M(self) -> np.ndarray:
        return self.states[:, 1] + self.states[:, 2]

    @property
    def z(self) -> np.ndarray:
        return self.states[:, 1] + self.states[:, 3]

    @property
    def n_R(self) -> np.ndarray:
        return self.states[:, 0]

    @property
    def events(self):
        d = np.diff(self.states, axis=0)
        return [
            (float(self.times[i + 1]), COUPLED_LABELS[self.channel[i + 1]], tuple(int(v) for v in d[i]))
            for i in range(len(d))
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,n_R,q,r_m,r_z,n_M,z\n")
        for t, (r, q, rm, rz) in zip(self.times.tolist(), self.states.tolist()):
            buf.write(f"{t!r},{r},{q},{rm},{rz},{q + rm},{q + rz}\n")
        return buf.getvalue()


def coupled_channels(model: ModelSpec, K: float, s: CoupledState, derived=None):
    """``[(label, rate, (dn_R, dq, dr_m, dr_z)), ...]`` at state ``s``."""
    d = derived or _model.derive(model)
    indiv = _model.kernels(model)[0]
    shared = model.shared_resident_measure
    a = np.zeros(N_CHANNELS)
    coupled_propensities(indiv, model.param_array, shared, float(K), s.n_R, s.q, s.r_m, s.r_z,
                         d.b_star, d.d_star, a)
    S = coupled_stoichiometry(shared)
    return [(COUPLED_LABELS[i], float(a[i]), tuple(int(v) for v in S[i])) for i in range(N_CHANNELS)]


def _coupled(model, K, init, stop, seed, track, branching_level, xi, record, derived, z_cap=0):
    indiv = _model.kernels(model)[0]
    level_m = stop.mutant_level or 0
    level_z = branching_level if branching_level is not None else level_m
    horizon = math.inf if stop.time_horizon is None else float(stop.time_horizon)
    return _coupled_run(
        indiv, model.param_array, model.shared_resident_measure, float(K),
        derived.b_star, derived.d_star, init.n_R, init.q, init.r_m, init.r_z,
        int(level_m), int(level_z or 0), _TRACKS[track], int(xi or 0), horizon,
        bool(stop.on_extinction), int(stop.event_cap), int(z_cap or 0), bool(record),
        as_seed(seed).generator(),
    )


def default_coupled_init(model: ModelSpec, K: int) -> CoupledState:
    base = engine.default_init(model, K)
    return CoupledState(base.n_R, base.n_M, 0, 0)


def simulate_coupled(model: ModelSpec, K: int, stop: StopCondition, seed, *,
                     init: CoupledState | None = None, track: str = "mutant",
                     branching_level: int | None = None, xi: int | None = None,
                     z_cap: int | None = None, record: bool = True) -> CoupledTrajectory:
    """Sample the joint chain.

    ``track`` picks which marginal the stop condition watches: ``"mutant"``
    (level and extinction of ``n_M``; the run also ends early if ``z``
    dies out), ``"branching"`` (level ``branching_level`` and extinction
    of ``z``) or ``"both"`` (run until each marginal has hit its level or
    died out).  ``xi`` bounds the window of the online deviation statistic.
    A run also ends (outcome timeout, ``z_capped`` set) once ``z`` reaches
    ``z_cap``; this guards against a mutant stuck below its level while Z
    grows without bound.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    derived = _model.derive(model)
    init = init or default_coupled_init(model, K)
    code, t_end, st, rt, rx, rc = _coupled(model, K, init, stop, seed, track, branching_level,
                                            xi, record, derived, z_cap)
    return CoupledTrajectory(
        K=K, initial=init, times=rt, states=rx, channel=rc,
        outcome=engine._OUTCOMES[code], t_end=float(t_end), n_events=int(st[5]),
        mutant_hit_time=float(st[0]), branching_hit_time=float(st[1]),
        mutant_extinct_time=float(st[2]), branching_extinct_time=float(st[3]),
        online_sup_dev=float(st[4]), xi=int(xi or 0), z_capped=bool(st[10]),
    )


@dataclass(frozen=True)
class DeviationStat:
    sup_dev: float
    stop_reason: Outcome
    survived_z: bool


def survival_proxy(z_end: int, z_hit: bool, floor: int = DEFAULT_Z_FLOOR) -> bool:
    """Stand-in for ``{W > 0}``: Z alive at the stop and either large or at its cap."""
    return z_end >= 1 and (z_end >= floor or z_hit)


def sup_ratio_deviation(traj: CoupledTrajectory, xi: int) -> DeviationStat:
    """``sup |n_M / z - 1|`` over recorded states up to the first ``n_M >= xi``.

    Only states with ``z >= 1`` enter the supremum; the ratio is constant
    between events so the event-time supremum is the continuous-time one.
    """
    n_M, z = traj.n_M, traj.z
    hit = np.flatnonzero(n_M >= xi)
    end = hit[0] + 1 if hit.size else len(n_M)
    nm, zz = n_M[:end], z[:end]
    ok = zz >= 1
    dev = float(np.max(np.abs(nm[ok] / zz[ok] - 1.0))) if ok.any() else 0.0
    survived = bool(np.all(z >= 1))
    return DeviationStat(sup_dev=dev, stop_reason=traj.outcome, survived_z=survived)


def _xi_for(rule, model, K) -> int:
    if callable(rule):
        return int(rule(K))
    if rule == "sqrt":
        return int(math.floor(math.sqrt(K)))
    if rule == "admissible":
        return _model.admissible_threshold_scale(model, K)
    if isinstance(rule, dict) and "power" in rule:
        c, alpha = rule["power"]["c"], rule["power"]["alpha"]
        return max(1, int(math.floor(c * K**alpha)))
    raise ValueError(f"unknown xi rule {rule!r}")


def deviation_sweep(model: ModelSpec, K_list, xi_rule="sqrt", replicates: int = 2000,
                    seed: int = 0, threads: int = 1, z_floor: int = DEFAULT_Z_FLOOR,
                    z_cap_factor: int = 100):
    """Per-K quantiles of the sup-ratio deviation over surviving replicates.

    Replicates stop when ``n_M`` reaches ``xi``, either marginal dies out,
    or ``z`` reaches ``z_cap_factor * xi`` (then the deviation is already
    at least ``1 - 1/z_cap_factor``).  Rows:
    ``(K, xi, replicates, survival_frac, q50, q90, q99)``.
    """
    derived = _model.derive(model)
    rows = []
    for j, K in enumerate(K_list):
        if K < 2:
            raise ValueError("K must be at least 2")
        xi = _xi_for(xi_rule, model, K)
        stop = StopCondition(mutant_level=xi, on_extinction=True)
        init = default_coupled_init(model, K)

        def one(i, K=K, xi=xi, stop=stop, init=init):
            code, t_end, st, *_ = _coupled(
                model, K, init, stop, SeedSpec(seed, (j << 40) | i), "mutant", None,
                xi, False, derived, z_cap_factor * xi)
            z_end = int(st[7] + st[9])
            return st[4], survival_proxy(z_end, bool(st[10]), z_floor)

        res = engine.run_replicates(one, replicates, threads)
        devs = np.array([r[0] for r in res])
        survived = np.array([r[1] for r in res])
        frac = float(survived.mean())
        if survived.any():
            q50, q90, q99 = (float(v) for v in np.quantile(devs[survived], [0.5, 0.9, 0.99]))
        else:
            q50 = q90 = q99 = math.nan
        rows.append((int(K), int(xi), int(replicates), frac, q50, q90, q99))
    return rows


def sweep_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write("K,xi,replicates,survival_frac,dev_q50,dev_q90,dev_q99\n")
    for K, xi, n, frac, a, b, c in rows:
        buf.write(f"{K},{xi},{n},{float(frac)!r},{float(a)!r},{float(b)!r},{float(c)!r}\n")
    return buf.getvalue()
