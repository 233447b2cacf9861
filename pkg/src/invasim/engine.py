"""Exact event-by-event simulation of the bi-type count chain.

The chain is sampled with the Gillespie direct method: an exponential
holding time at the total rate, then a channel picked with probability
proportional to its rate.  The event loop is jitted; it is generic over a
propensity function ``props(params, n_R, n_M, K, out)`` and an integer
stoichiometry table, so the branching module reuses it for the linear
birth-death process.
"""
from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numba import njit

from . import model as _model
from .model import ModelSpec
from .rng import SeedSpec, as_seed

__all__ = [
    "Outcome",
    "PopState",
    "StopCondition",
    "Trajectory",
    "RunSummary",
    "simulate",
    "default_init",
    "hitting_time",
    "resident_excursion",
    "batch",
    "summaries_to_csv",
]

DEFAULT_EVENT_CAP = 10**9
DEFAULT_SURVIVAL_FLOOR = 10

HIT, EXTINCT, TIMEOUT, CAPPED = 0, 1, 2, 3


class Outcome(str, Enum):
    HIT_LEVEL = "hit_level"
    EXTINCT = "extinct"
    TIMEOUT = "timeout"
    EVENT_CAP = "event_cap"


_OUTCOMES = (Outcome.HIT_LEVEL, Outcome.EXTINCT, Outcome.TIMEOUT, Outcome.EVENT_CAP)


@dataclass(frozen=True)
class PopState:
    n_R: int
    n_M: int
    t: float = 0.0

    def __post_init__(self):
        if self.n_R < 0 or self.n_M < 0:
            raise ValueError("counts must be nonnegative")
        if self.t < 0:
            raise ValueError("time must be nonnegative")


@dataclass(frozen=True)
class StopCondition:
    mutant_level: int | None = None
    time_horizon: float | None = None
    on_extinction: bool = True
    event_cap: int = DEFAULT_EVENT_CAP

    def __post_init__(self):
        if self.mutant_level is None and self.time_horizon is None and not self.on_extinction:
            raise ValueError("StopCondition needs a level, a horizon or on_extinction")
        if self.mutant_level is not None and self.mutant_level < 1:
            raise ValueError("mutant_level must be positive")
        if self.time_horizon is not None and not self.time_horizon > 0:
            raise ValueError("time_horizon must be positive")
        if self.event_cap < 1:
            raise ValueError("event_cap must be at least 1")

    @classmethod
    def from_dict(cls, d) -> "StopCondition":
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "mutant_level": self.mutant_level,
            "time_horizon": self.time_horizon,
            "on_extinction": self.on_extinction,
            "event_cap": self.event_cap,
        }


# -- jitted core ----------------------------------------------------------------


@njit(cache=True, nogil=True)
def _grow_f(a):
    b = np.empty(2 * a.shape[0], dtype=a.dtype)
    b[: a.shape[0]] = a
    return b


@njit(cache=True, nogil=True)
def _grow_i(a):
    b = np.empty(2 * a.shape[0], dtype=a.dtype)
    b[: a.shape[0]] = a
    return b


@njit(cache=True, nogil=True)
def pick_channel(a, n_ch, total, u):
    """Index of the channel selected by ``u`` in [0, 1) under rates ``a``."""
    target = u * total
    acc = 0.0
    last = -1
    for i in range(n_ch):
        if a[i] > 0.0:
            last = i
            acc += a[i]
            if target < acc:
                return i
    # target landed past the rounded cumulative sum
    return last


@njit(cache=True, nogil=True)
def direct_method(props, stoich, params, K, n_R0, n_M0, t0, level, horizon,
                  stop_on_extinction, event_cap, record, decimation, n_R_ref, rng):
    n_ch = stoich.shape[0]
    a = np.zeros(n_ch)
    n_R = n_R0
    n_M = n_M0
    t = t0

    size = 1024 if record else 1
    rec_t = np.empty(size)
    rec_R = np.empty(size, dtype=np.int64)
    rec_M = np.empty(size, dtype=np.int64)
    rec_c = np.empty(size, dtype=np.int32)
    rec_t[0] = t
    rec_R[0] = n_R
    rec_M[0] = n_M
    rec_c[0] = -1
    n_rec = 1

    peak = n_M
    excursion = abs(n_R - n_R_ref)
    hit_time = np.nan
    n_events = 0

    if level > 0 and n_M >= level:
        return HIT, t, n_R, n_M, t, peak, excursion, n_events, rec_t[:n_rec], rec_R[:n_rec], rec_M[:n_rec], rec_c[:n_rec]
    if stop_on_extinction and n_M == 0:
        return EXTINCT, t, n_R, n_M, hit_time, peak, excursion, n_events, rec_t[:n_rec], rec_R[:n_rec], rec_M[:n_rec], rec_c[:n_rec]

    outcome = TIMEOUT
    while True:
        props(params, n_R, n_M, K, a)
        total = 0.0
        for i in range(n_ch):
            total += a[i]
        if not total > 0.0:
            # absorbing state: nothing happens before the horizon
            if horizon < np.inf:
                t = horizon
                outcome = TIMEOUT
            elif n_M == 0:
                outcome = EXTINCT
            else:
                outcome = TIMEOUT
            break
        if n_events >= event_cap:
            outcome = CAPPED
            break
        dt = -np.log1p(-rng.random()) / total
        if t + dt > horizon:
            t = horizon
            outcome = TIMEOUT
            break
        t += dt
        k = pick_channel(a, n_ch, total, rng.random())
        n_R += stoich[k, 0]
        n_M += stoich[k, 1]
        if n_R < 0 or n_M < 0:
            raise RuntimeError("event drove a count negative")
        n_events += 1

        done = False
        if level > 0 and n_M >= level:
            hit_time = t
            outcome = HIT
            done = True
        elif stop_on_extinction and n_M == 0:
            outcome = EXTINCT
            done = True

        keep = done or decimation <= 1 or n_events % decimation == 0
        if n_M > peak:
            peak = n_M
            keep = True
        dev = abs(n_R - n_R_ref)
        if dev > excursion:
            excursion = dev
            keep = True
        if record and keep:
            if n_rec == rec_t.shape[0]:
                rec_t = _grow_f(rec_t)
                rec_R = _grow_i(rec_R)
                rec_M = _grow_i(rec_M)
                rec_c = _grow_i(rec_c)
            rec_t[n_rec] = t
            rec_R[n_rec] = n_R
            rec_M[n_rec] = n_M
            rec_c[n_rec] = k
            n_rec += 1
        if done:
            break
    return outcome, t, n_R, n_M, hit_time, peak, excursion, n_events, rec_t[:n_rec], rec_R[:n_rec], rec_M[:n_rec], rec_c[:n_rec]


# -- trajectories -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A recorded sample path.

    Row 0 of the record arrays is the initial state; every further row is
    the post-event state of one event.  With ``decimation = k > 1`` only
    every k-th event is kept, plus every event that sets a new mutant
    maximum or a new resident excursion and the terminal event, so level
    hitting times and excursions read off the record stay exact.
    """

    K: int
    initial: PopState
    times: np.ndarray
    n_R: np.ndarray
    n_M: np.ndarray
    channel: np.ndarray
    labels: tuple
    outcome: Outcome
    t_end: float
    n_events: int
    decimation: int = 1
    hit_time: float = math.nan
    peak_n_M: int = 0
    max_excursion: float = 0.0

    @property
    def final(self) -> PopState:
        return PopState(int(self.n_R[-1]), int(self.n_M[-1]), float(self.t_end))

    @property
    def events(self) -> list[tuple[float, str, int, int]]:
        """``(t, label, dn_R, dn_M)`` per recorded event (exact only when undecimated)."""
        dR = np.diff(self.n_R)
        dM = np.diff(self.n_M)
        return [
            (float(self.times[i + 1]), self.labels[self.channel[i + 1]], int(dR[i]), int(dM[i]))
            for i in range(len(dR))
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.decimation > 1:
            buf.write(f"# decimation={self.decimation}\n")
        buf.write("t,n_R,n_M\n")
        for t, r, m in zip(self.times.tolist(), self.n_R.tolist(), self.n_M.tolist()):
            buf.write(f"{t!r},{r},{m}\n")
        return buf.getvalue()


def _run(props, stoich, labels, params, K, init: PopState, stop: StopCondition, seed,
         record=True, decimation=1, n_R_ref=0.0) -> Trajectory:
    rng = as_seed(seed).generator()
    level = stop.mutant_level or 0
    horizon = math.inf if stop.time_horizon is None else float(stop.time_horizon)
    out = direct_method(
        props, stoich, params, float(K), int(init.n_R), int(init.n_M), float(init.t),
        int(level), horizon, bool(stop.on_extinction), int(stop.event_cap),
        bool(record), int(max(decimation, 1)), float(n_R_ref), rng,
    )
    code, t_end, _, _, hit, peak, exc, n_events, rt, rR, rM, rc = out
    return Trajectory(
        K=K, initial=init, times=rt, n_R=rR, n_M=rM, channel=rc, labels=tuple(labels),
        outcome=_OUTCOMES[code], t_end=float(t_end), n_events=int(n_events),
        decimation=int(max(decimation, 1)), hit_time=float(hit), peak_n_M=int(peak),
        max_excursion=float(exc),
    )


def simulate(model: ModelSpec, K: int, init: PopState, stop: StopCondition, seed,
             record: bool = True, decimation: int = 1) -> Trajectory:
    """Sample one path of the chain until the first satisfied stop condition.

    Running past ``stop.event_cap`` events ends the run with outcome
    ``EVENT_CAP`` rather than raising.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    _, props, stoich, labels = _model.kernels(model)
    x_star = _model.derive(model).x_R_star
    return _run(props, stoich, labels, model.param_array, K, init, stop, seed,
                record=record, decimation=decimation, n_R_ref=x_star * K)


def default_init(model: ModelSpec, K: int) -> PopState:
    """One mutant in a resident population at equilibrium.

    SIR keeps the population closed, ``(K - 1, 1)``; Lotka-Volterra uses
    ``round(x*_R K)`` residents.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    if model.family is _model.Family.SIR:
        return PopState(K - 1, 1, 0.0)
    x_star = _model.derive(model).x_R_star
    return PopState(max(1, int(round(x_star * K))), 1, 0.0)


def hitting_time(traj: Trajectory, level: int) -> float | None:
    """First recorded time with ``n_M >= level``; None if never reached."""
    idx = np.flatnonzero(traj.n_M >= level)
    if idx.size == 0:
        return None
    return float(traj.times[idx[0]])


def resident_excursion(traj: Trajectory, x_R_star: float) -> float:
    """``sup_t |n_R(t) - x*_R K|`` over the recorded states."""
    return float(np.max(np.abs(traj.n_R - x_R_star * traj.K)))


# -- batches ------------------------------------------------------------------------


@dataclass(frozen=True)
class RunSummary:
    replicate: int
    outcome: Outcome
    hit_time: float
    survived: bool
    peak_n_M: int
    final_n_M: int
    t_end: float


def _summarize(i, traj: Trajectory, level, floor) -> RunSummary:
    n_M = int(traj.n_M[-1])
    survived = n_M > 0 and (traj.outcome is Outcome.HIT_LEVEL or n_M >= floor)
    return RunSummary(
        replicate=i, outcome=traj.outcome, hit_time=traj.hit_time, survived=survived,
        peak_n_M=traj.peak_n_M, final_n_M=n_M, t_end=traj.t_end,
    )


def run_replicates(fn, replicates: int, threads: int = 1) -> list:
    """Evaluate ``fn(i)`` for every replicate index, results in index order."""
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    if threads <= 1:
        return [fn(i) for i in range(replicates)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(replicates), chunksize=64))


def batch(model: ModelSpec, K: int, init: PopState, stop: StopCondition, replicates: int,
          master_seed: int, threads: int = 1,
          survival_floor: int = DEFAULT_SURVIVAL_FLOOR) -> list[RunSummary]:
    """Independent replicates; replicate ``i`` uses ``SeedSpec(master_seed, i)``.

    ``survived`` is true when the run hit the mutant level, or ended with at
    least ``survival_floor`` mutants.
    """
    if K < 2:
        raise ValueError("K must be at least 2")
    _, props, stoich, labels = _model.kernels(model)
    params = model.param_array

    def one(i):
        traj = _run(props, stoich, labels, params, K, init, stop,
                    SeedSpec(master_seed, i), record=False)
        return _summarize(i, traj, stop.mutant_level, survival_floor)

    return run_replicates(one, replicates, threads)


def summaries_to_csv(rows: list[RunSummary]) -> str:
    buf = io.StringIO()
    buf.write("replicate,outcome,hit_time,survived,peak_n_M\n")
    for s in rows:
        hit = "" if math.isnan(s.hit_time) else repr(s.hit_time)
        buf.write(f"{s.replicate},{s.outcome.value},{hit},{int(s.survived)},{s.peak_n_M}\n")
    return buf.getvalue()
