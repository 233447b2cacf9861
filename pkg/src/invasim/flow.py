"""The limiting dynamical system x' = x F(x) and its level-crossing times.

Integration uses the Dormand-Prince 5(4) embedded pair with its
continuous 4th-order extension, so level crossings can be located by
bisection on the dense output.  The error norm is purely relative per
component (mutant densities span ten decades), and a step that would
produce a negative component is rejected and retried at half size.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import optimize

from . import model as _model
from .errors import NoPeak, StepFailure
from .model import ModelSpec

__all__ = [
    "FlowStatus",
    "FlowSolution",
    "HittingRecord",
    "TauCurve",
    "VStar",
    "vector_field",
    "integrate",
    "tau_m",
    "v_star",
    "tau_of_v",
]

# Dormand-Prince 5(4) tableau
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array([
    71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40,
])
# continuous extension (Hairer, Norsett & Wanner, dense output of DOPRI5)
_D = np.array([
    -12715105075 / 11282082432, 0.0, 87487479700 / 32700410799,
    -10690763975 / 1880347072, 701980252875 / 199316789632,
    -1453857185 / 822651844, 69997945 / 29380423,
])

ATOL_FACTOR = 1e-12  # absolute floor relative to tol
MAX_FACTOR, MIN_FACTOR, SAFETY = 10.0, 0.2, 0.9
STEADY_RATE = 1e-12  # |G| below this counts as a rest point
STEADY_SLACK = 1e3  # looser rest-point screen, in units of tol; confirmed by a root solve
DOMAIN_BOUND = 1e4  # densities are O(1); beyond this the flow has escaped


class FlowStatus(str, Enum):
    COMPLETED = "completed"
    PEAK_PASSED = "peak_passed"
    STEP_FAILURE = "step_failure"


def vector_field(model: ModelSpec, x) -> tuple[float, float]:
    """``(x_R F_R(x), x_M F_M(x))``."""
    F_R, F_M = _model.growth_rates(model, x)
    return x[0] * F_R, x[1] * F_M


def _field_fn(model: ModelSpec):
    indiv = _model.kernels(model)[0]
    p = model.param_array

    def G(y):
        b_R, d_R, b_M, d_M = indiv(p, y[0], y[1])
        return np.array([y[0] * (b_R - d_R), y[1] * (b_M - d_M)])

    def F(y):
        b_R, d_R, b_M, d_M = indiv(p, y[0], y[1])
        return b_R - d_R, b_M - d_M

    return G, F


@dataclass(eq=False)
class FlowSolution:
    """Dense solution: node times, node states, and per-step interpolants."""

    initial: tuple[float, float]
    t: np.ndarray
    y: np.ndarray
    coeffs: np.ndarray  # (n_steps, 5, 2) continuous-extension coefficients
    status: FlowStatus = FlowStatus.COMPLETED

    @property
    def t_end(self) -> float:
        return float(self.t[-1])

    def __call__(self, t):
        """State at time(s) ``t`` within ``[0, t_end]``."""
        scalar = np.ndim(t) == 0
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(tt < self.t[0] - 1e-12) or np.any(tt > self.t[-1] + 1e-12):
            raise ValueError("time outside the integrated window")
        if len(self.t) == 1:
            out = np.repeat(self.y[:1], len(tt), axis=0)
            return out[0] if scalar else out
        idx = np.clip(np.searchsorted(self.t, tt, side="right") - 1, 0, len(self.t) - 2)
        h = self.t[idx + 1] - self.t[idx]
        th = ((tt - self.t[idx]) / h)[:, None]
        r = self.coeffs[idx]
        th1 = 1.0 - th
        out = r[:, 0] + th * (r[:, 1] + th1 * (r[:, 2] + th * (r[:, 3] + th1 * r[:, 4])))
        out = np.maximum(out, 0.0)
        return out[0] if scalar else out

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,x_R,x_M\n")
        for t, (a, b) in zip(self.t.tolist(), self.y.tolist()):
            buf.write(f"{t!r},{a!r},{b!r}\n")
        return buf.getvalue()


def _dp_step(G, t, y, k1, h):
    k = [k1]
    for i in range(1, 7):
        yi = y + h * sum(a * kj for a, kj in zip(_A[i], k) if a != 0.0)
        k.append(G(yi))
    y_new = y + h * sum(b * kj for b, kj in zip(_B, k) if b != 0.0)
    err = h * sum(e * kj for e, kj in zip(_E, k) if e != 0.0)
    return y_new, err, k


def _dense(y0, y1, k, h):
    r1 = y0
    r2 = y1 - y0
    r3 = h * k[0] - r2
    r4 = r2 - h * k[6] - r3
    r5 = h * sum(d * kj for d, kj in zip(_D, k) if d != 0.0)
    return np.stack([r1, r2, r3, r4, r5])


def _march(model, x0, t_end, tol, stop=None, h0=None):
    """Core adaptive loop.  ``stop(t, y_prev, y, k)`` may end the march early."""
    G, F = _field_fn(model)
    y = np.array(x0, dtype=float)
    if np.any(y < 0):
        raise ValueError("initial densities must be nonnegative")
    t = 0.0
    ts, ys, cs = [0.0], [y.copy()], []
    k1 = G(y)
    atol = tol * ATOL_FACTOR
    if h0 is None:
        scale = max(float(np.max(np.abs(k1) / (np.abs(y) + atol))), 1e-3)
        h = min(0.01 / scale, t_end if math.isfinite(t_end) else 1.0)
    else:
        h = h0
    status = FlowStatus.COMPLETED
    while t < t_end:
        h = min(h, t_end - t)
        if h <= 1e-14 * (1.0 + abs(t)):
            raise StepFailure(f"step size underflow at t = {t:g}")
        y_new, err, k = _dp_step(G, t, y, k1, h)
        if np.any(y_new < 0) or not np.all(np.isfinite(y_new)):
            h *= 0.5
            continue
        sc = atol + tol * np.maximum(np.abs(y), np.abs(y_new))
        en = float(np.sqrt(np.mean((err / sc) ** 2)))
        if en > 1.0:
            h *= max(MIN_FACTOR, SAFETY * en ** -0.2)
            continue
        cs.append(_dense(y, y_new, k, h))
        t += h
        y = y_new
        k1 = k[6]
        ts.append(t)
        ys.append(y.copy())
        factor = MAX_FACTOR if en == 0 else min(MAX_FACTOR, max(MIN_FACTOR, SAFETY * en ** -0.2))
        h *= factor
        if stop is not None and stop(t, ys[-2], y, k1):
            if y[1] > 0 and F(y)[1] <= 0.0:
                status = FlowStatus.PEAK_PASSED
            break
    sol = FlowSolution(
        initial=(float(x0[0]), float(x0[1])),
        t=np.array(ts),
        y=np.array(ys),
        coeffs=np.array(cs) if cs else np.zeros((0, 5, 2)),
        status=status,
    )
    return sol, F


def _rest_point(G, y, k, tol):
    """Nearby rest point if the march is creeping into one, else None.

    Near a stable node the step size is capped by stability, so step-control
    chatter keeps ``|G|`` around ``tol`` and a fixed threshold is never met.
    """
    size = float(np.max(np.abs(k)))
    if size < STEADY_RATE:
        return y.copy()
    if size > STEADY_SLACK * tol * (1.0 + float(np.max(np.abs(y)))):
        return None
    sol = optimize.root(lambda x: np.asarray(G(x)), y, tol=1e-14)
    if not sol.success or np.max(np.abs(sol.x - y)) > 1e-3 * (1.0 + np.max(np.abs(y))):
        return None
    # the mutant must be settling, not leaving the mutant-free state
    if not sol.x[1] > 0 or sol.x[1] < y[1] * (1.0 - 1e-6):
        return None
    return sol.x


def integrate(model: ModelSpec, x0, t_end: float, tol: float = 1e-10) -> FlowSolution:
    """Solve the limiting ODE on ``[0, t_end]`` with dense output.

    Raises :class:`StepFailure` if the step size underflows.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    sol, _ = _march(model, x0, float(t_end), tol)
    return sol


def _bisect(fn, lo, hi, t_tol):
    """Root of increasing-crossing ``fn`` on [lo, hi] with fn(lo) < 0 <= fn(hi)."""
    while hi - lo > t_tol:
        mid = 0.5 * (lo + hi)
        if fn(mid) >= 0:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass(frozen=True)
class HittingRecord:
    level: float
    time: float  # math.inf when the level is never reached

    @property
    def reached(self) -> bool:
        return math.isfinite(self.time)


def _crossings(model, x0, levels, tol, t_max=1e6):
    """First times the mutant coordinate reaches each of the sorted ``levels``.

    The march stops once the largest level is reached, the mutant growth
    rate becomes nonpositive below it, or the flow settles at a rest point.
    """
    levels = np.asarray(levels, dtype=float)
    top = float(levels.max())

    def stop(t, y_prev, y, k):
        if y[1] >= top:
            return True
        if _F(y)[1] <= 0.0:
            return True
        rest = _rest_point(_G, y, k, tol)
        if rest is not None and rest[1] < top:
            return True
        if np.any(y > DOMAIN_BOUND):
            return True
        return False

    _G, _F = _field_fn(model)
    sol, _ = _march(model, x0, t_max, tol, stop=stop)
    times = np.full(len(levels), math.inf)
    ts, ym = sol.t, sol.y[:, 1]
    for j, v in enumerate(levels):
        if ym[0] >= v:
            times[j] = 0.0
            continue
        idx = np.flatnonzero(ym >= v)
        if idx.size == 0:
            continue
        i = idx[0]
        lo, hi = ts[i - 1], ts[i]
        t_tol = 1e-10 * (1.0 + hi)
        times[j] = _bisect(lambda s: sol(s)[1] - v, lo, hi, t_tol)
    return times, sol


def tau_m(model: ModelSpec, x0, v: float, tol: float = 1e-10) -> HittingRecord:
    """First time the flow's mutant coordinate equals ``v`` (``inf`` if never)."""
    if not v > 0:
        raise ValueError("level must be positive")
    if not x0[1] > 0:
        raise ValueError("initial mutant density must be positive")
    times, _ = _crossings(model, x0, [v], tol)
    return HittingRecord(float(v), float(times[0]))


@dataclass(frozen=True)
class VStar:
    numeric: float
    closed_form: float | None

    @property
    def abs_gap(self) -> float | None:
        if self.closed_form is None:
            return None
        return abs(self.numeric - self.closed_form)

    def to_json(self) -> str:
        return json.dumps(
            {"numeric": self.numeric, "closed_form": self.closed_form, "abs_gap": self.abs_gap},
            indent=2,
        )


def v_star(model: ModelSpec, x_M0: float = 1e-8, tol: float = 1e-10) -> VStar:
    """Largest mutant density reached in the increasing phase from near equilibrium.

    The flow is followed from ``(x*_R, x_M0)`` until the mutant growth rate
    drops to zero; if it instead converges to a rest point with the mutant
    still growing, the supremum is the limit value.
    """
    d = _model.derive(model)
    G, F = _field_fn(model)
    state = {}

    def stop(t, y_prev, y, k):
        if F(y)[1] <= 0.0:
            state["peak"] = True
            return True
        rest = _rest_point(G, y, k, tol)
        if rest is not None:
            state["rest"] = float(rest[1])
            return True
        if np.any(y > DOMAIN_BOUND):
            state["escaped"] = True
            return True
        return False

    sol, _ = _march(model, (d.x_R_star, x_M0), 1e6, tol, stop=stop)
    if state.get("escaped"):
        raise NoPeak("flow left the bounded domain with the mutant still growing")
    if state.get("peak"):
        lo, hi = sol.t[-2], sol.t[-1]
        t_peak = _bisect(lambda s: -F(sol(s))[1], lo, hi, 1e-12 * (1.0 + hi))
        peak = max(float(sol(t_peak)[1]), float(np.max(sol.y[:, 1])))
    elif sol.t_end >= 1e6:
        raise NoPeak("mutant density still increasing at the time limit")
    else:
        peak = max(float(np.max(sol.y[:, 1])), state.get("rest", 0.0))
    return VStar(numeric=peak, closed_form=d.v_star_closed_form)


@dataclass(frozen=True)
class TauCurve:
    v: np.ndarray
    tau: np.ndarray
    x_M0: float
    tau_check: np.ndarray  # recomputed from x_M0 / 100
    tau_quad: np.ndarray  # quadrature of the log-level integrand

    @property
    def max_discrepancy(self) -> float:
        return float(np.max(np.abs(self.tau - self.tau_check)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("v,tau,tau_check\n")
        for v, a, b in zip(self.v.tolist(), self.tau.tolist(), self.tau_check.tolist()):
            buf.write(f"{v!r},{a!r},{b!r}\n")
        return buf.getvalue()


def default_v_grid(model: ModelSpec, x_M0: float, n: int = 64) -> np.ndarray:
    vs = v_star(model).numeric
    return np.geomspace(10 * x_M0, 0.95 * vs, n)


def _tau_from(model, d, v_grid, x_M0, tol):
    times, sol = _crossings(model, (d.x_R_star, x_M0), v_grid, tol)
    return times - np.log(v_grid / x_M0) / d.r_star, sol


def _tau_quadrature(sol: FlowSolution, F, r_star, v_grid, x_M0):
    # d(log u) = F_M dt along the increasing phase, so the time shift is the
    # integral of (1/F_M - 1/r*) against log u
    ys = sol(np.linspace(0.0, sol.t_end, 20001))
    s = np.log(np.maximum(ys[:, 1], 1e-300))
    g = np.array([1.0 / F(y)[1] - 1.0 / r_star for y in ys])
    ok = np.concatenate([[True], np.diff(s) > 0])
    s, g = s[ok], g[ok]
    out = np.empty(len(v_grid))
    for j, v in enumerate(v_grid):
        lv = math.log(v)
        m = s <= lv
        ss = np.append(s[m], lv)
        gg = np.append(g[m], np.interp(lv, s, g))
        out[j] = np.trapezoid(gg, ss)
    return out


def tau_of_v(model: ModelSpec, v_grid=None, x_M0: float = 1e-8, tol: float = 1e-11) -> TauCurve:
    """Deterministic time shift ``tau(v)`` on a grid of levels below v*.

    ``tau(v) ~ tau_M((x*_R, x_M0), v) - log(v / x_M0) / r*``; the same
    quantity from ``x_M0 / 100`` is returned as ``tau_check``.
    """
    d = _model.derive(model)
    if v_grid is None:
        v_grid = default_v_grid(model, x_M0)
    v_grid = np.asarray(v_grid, dtype=float)
    if np.any(v_grid <= 0):
        raise ValueError("levels must be positive")
    tau, sol = _tau_from(model, d, v_grid, x_M0, tol)
    check, _ = _tau_from(model, d, v_grid, x_M0 / 100, tol)
    if not np.all(np.isfinite(tau)):
        bad = v_grid[~np.isfinite(tau)]
        raise NoPeak(f"levels {bad} are not reached by the flow (above v*)")
    _, F = _field_fn(model)
    quad = _tau_quadrature(sol, F, d.r_star, v_grid, x_M0)
    return TauCurve(v=v_grid, tau=tau, x_M0=x_M0, tau_check=check, tau_quad=quad)
