"""Bi-type birth-death rate models: Lotka-Volterra competition and SIR.

A model is a family tag plus named scalar parameters.  Individual rates
``b_R, d_R, b_M, d_M`` are functions of the density pair ``(x_R, x_M)``;
the chain on counts ``(n_R, n_M)`` uses ``x = n / K``.

The per-family rate code lives in small jitted functions so that the
event loops in :mod:`invasim.engine` and :mod:`invasim.coupling` can call
it without leaving nopython mode.  The Python-level API below is a thin
layer over the same functions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Callable, Mapping, NamedTuple

import numpy as np
from numba import njit

from .errors import InvasionFails, NoEquilibrium

__all__ = [
    "Family",
    "StabilityClass",
    "DensityPair",
    "ModelSpec",
    "DerivedQuantities",
    "ReactionChannel",
    "AssumptionReport",
    "rates",
    "growth_rates",
    "derive",
    "channels",
    "admissible_threshold_scale",
    "validate",
    "v_star_closed_form",
]

# below this magnitude d(F_R)/d(x_R) at the equilibrium counts as zero
ZERO_DERIVATIVE_TOL = 1e-12


class Family(str, Enum):
    LOTKA_VOLTERRA = "lotka_volterra"
    SIR = "sir"


class StabilityClass(str, Enum):
    HYPERBOLIC = "hyperbolic"
    PARTIALLY_HYPERBOLIC = "partially_hyperbolic"


PARAM_NAMES = {
    Family.LOTKA_VOLTERRA: ("b_R", "d_R", "b_M", "d_M", "c11", "c12", "c21", "c22"),
    Family.SIR: ("beta", "gamma"),
}


class DensityPair(NamedTuple):
    x_R: float
    x_M: float


@dataclass(frozen=True)
class ModelSpec:
    """A rate model: ``family`` plus its named parameters.

    Construction only checks that the parameter names match the family
    and that values are finite reals.  Positivity and the standing
    assumptions are reported by :func:`validate`, so that invalid
    parameterizations can still be inspected.
    """

    family: Family
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        try:
            family = Family(self.family)
        except ValueError:
            raise ValueError(f"unknown model family {self.family!r}") from None
        names = PARAM_NAMES[family]
        given = dict(self.params)
        missing = [n for n in names if n not in given]
        extra = [n for n in given if n not in names]
        if missing or extra:
            raise ValueError(
                f"{family.value} parameters must be exactly {names}; "
                f"missing={missing} unexpected={extra}"
            )
        values = {}
        for n in names:
            v = float(given[n])
            if not math.isfinite(v):
                raise ValueError(f"parameter {n} is not finite: {v}")
            values[n] = v
        object.__setattr__(self, "family", family)
        object.__setattr__(self, "params", MappingProxyType(values))

    def __hash__(self):
        return hash((self.family, tuple(self.params.items())))

    @classmethod
    def sir(cls, beta: float, gamma: float) -> "ModelSpec":
        return cls(Family.SIR, {"beta": beta, "gamma": gamma})

    @classmethod
    def lotka_volterra(cls, b_R, d_R, b_M, d_M, c) -> "ModelSpec":
        """``c`` is the 2x2 competition matrix ``[[c11, c12], [c21, c22]]``."""
        (c11, c12), (c21, c22) = c
        return cls(
            Family.LOTKA_VOLTERRA,
            dict(b_R=b_R, d_R=d_R, b_M=b_M, d_M=d_M, c11=c11, c12=c12, c21=c21, c22=c22),
        )

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        return cls(d["family"], d["params"])

    def to_dict(self) -> dict:
        return {"family": self.family.value, "params": dict(self.params)}

    @property
    def param_array(self) -> np.ndarray:
        return np.array([self.params[n] for n in PARAM_NAMES[self.family]], dtype=np.float64)

    @property
    def shared_resident_measure(self) -> bool:
        """True when resident deaths are the same events as mutant births (SIR)."""
        return self.family is Family.SIR


# -- jitted rate kernels --------------------------------------------------------
# parameter layouts follow PARAM_NAMES


@njit(cache=True, nogil=True)
def lv_individual_rates(p, x_R, x_M):
    b_R = p[0]
    d_R = p[1] + p[4] * x_R + p[5] * x_M
    b_M = p[2]
    d_M = p[3] + p[6] * x_R + p[7] * x_M
    return b_R, d_R, b_M, d_M


@njit(cache=True, nogil=True)
def sir_individual_rates(p, x_R, x_M):
    return 0.0, p[0] * x_M, p[0] * x_R, p[1]


@njit(cache=True, nogil=True)
def lv_propensities(p, n_R, n_M, K, out):
    b_R, d_R, b_M, d_M = lv_individual_rates(p, n_R / K, n_M / K)
    out[0] = n_R * b_R
    out[1] = n_R * d_R
    out[2] = n_M * b_M
    out[3] = n_M * d_M


@njit(cache=True, nogil=True)
def sir_propensities(p, n_R, n_M, K, out):
    out[0] = p[0] * n_R * n_M / K
    out[1] = p[1] * n_M


LV_STOICHIOMETRY = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=np.int64)
LV_LABELS = ("resident_birth", "resident_death", "mutant_birth", "mutant_death")
SIR_STOICHIOMETRY = np.array([[-1, 1], [0, -1]], dtype=np.int64)
SIR_LABELS = ("infection", "recovery")

_KERNELS = {
    Family.LOTKA_VOLTERRA: (lv_individual_rates, lv_propensities, LV_STOICHIOMETRY, LV_LABELS),
    Family.SIR: (sir_individual_rates, sir_propensities, SIR_STOICHIOMETRY, SIR_LABELS),
}


def kernels(model: ModelSpec):
    """``(individual_rates, propensities, stoichiometry, labels)`` for a model."""
    return _KERNELS[model.family]


# -- Python-level operations ----------------------------------------------------


def rates(model: ModelSpec, x) -> tuple[float, float, float, float]:
    """Individual rates ``(b_R, d_R, b_M, d_M)`` at density ``x``."""
    x_R, x_M = x
    indiv = _KERNELS[model.family][0]
    return tuple(float(v) for v in indiv(model.param_array, float(x_R), float(x_M)))


def growth_rates(model: ModelSpec, x) -> tuple[float, float]:
    b_R, d_R, b_M, d_M = rates(model, x)
    return b_R - d_R, b_M - d_M


def _d_FR_dxR(model: ModelSpec) -> float:
    # analytic derivative of F_R in x_R on the resident axis
    if model.family is Family.LOTKA_VOLTERRA:
        return -model.params["c11"]
    return 0.0


def stability_class(model: ModelSpec) -> StabilityClass:
    if abs(_d_FR_dxR(model)) < ZERO_DERIVATIVE_TOL:
        return StabilityClass.PARTIALLY_HYPERBOLIC
    return StabilityClass.HYPERBOLIC


def _resident_equilibrium(model: ModelSpec) -> float:
    p = model.params
    if model.family is Family.SIR:
        # every (x_R, 0) is an equilibrium; the whole population starts susceptible
        return 1.0
    net = p["b_R"] - p["d_R"]
    if p["c11"] <= 0 or net <= 0:
        raise NoEquilibrium(
            f"no positive resident equilibrium: b_R - d_R = {net}, c11 = {p['c11']}"
        )
    return net / p["c11"]


@dataclass(frozen=True)
class DerivedQuantities:
    x_R_star: float
    b_star: float
    d_star: float
    r_star: float
    stability_class: StabilityClass
    v_star_closed_form: float | None = None


def v_star_closed_form(model: ModelSpec) -> float | None:
    """Peak mutant density of the flow started at the resident equilibrium.

    SIR: ``1 - g + g log g`` with ``g = gamma / beta``.  Lotka-Volterra:
    the mutant-only equilibrium ``(b_M - d_M) / c22`` when residents cannot
    re-invade it, otherwise the mutant coordinate of the coexistence point.
    """
    p = model.params
    if model.family is Family.SIR:
        g = p["gamma"] / p["beta"]
        return 1.0 - g + g * math.log(g)
    if p["c22"] <= 0:
        return None
    net_R = p["b_R"] - p["d_R"]
    net_M = p["b_M"] - p["d_M"]
    x_M_alone = net_M / p["c22"]
    F_R_there = net_R - p["c12"] * x_M_alone
    if F_R_there <= 0:
        return x_M_alone
    det = p["c11"] * p["c22"] - p["c12"] * p["c21"]
    if det == 0:
        return None
    return (net_M * p["c11"] - net_R * p["c21"]) / det


def derive(model: ModelSpec) -> DerivedQuantities:
    x_star = _resident_equilibrium(model)
    _, _, b_star, d_star = rates(model, (x_star, 0.0))
    r_star = b_star - d_star
    if r_star <= 0:
        raise InvasionFails(f"invasion fitness r* = {r_star:g} is not positive")
    return DerivedQuantities(
        x_R_star=x_star,
        b_star=b_star,
        d_star=d_star,
        r_star=r_star,
        stability_class=stability_class(model),
        v_star_closed_form=v_star_closed_form(model),
    )


@dataclass(frozen=True)
class ReactionChannel:
    label: str
    stoichiometry: tuple[int, int]
    rate: Callable[[int, int, float], float]


def channels(model: ModelSpec) -> list[ReactionChannel]:
    """Event channels of the count chain; rates take ``(n_R, n_M, K)``."""

    def make(i):
        def rate(n_R, n_M, K, _i=i):
            b_R, d_R, b_M, d_M = rates(model, (n_R / K, n_M / K))
            if model.family is Family.SIR:
                return (model.params["beta"] * n_R * n_M / K, n_M * d_M)[_i]
            return (n_R * b_R, n_R * d_R, n_M * b_M, n_M * d_M)[_i]

        return rate

    _, _, stoich, labels = _KERNELS[model.family]
    return [
        ReactionChannel(label, (int(stoich[i, 0]), int(stoich[i, 1])), make(i))
        for i, label in enumerate(labels)
    ]


def admissible_threshold_scale(model: ModelSpec, K: int) -> int:
    """Largest mutant level covered by the branching comparison, ``K/log K``
    (hyperbolic) or ``K/(log K)^2`` (partially hyperbolic)."""
    if K < 2:
        raise ValueError("K must be at least 2")
    logK = math.log(K)
    if stability_class(model) is StabilityClass.HYPERBOLIC:
        n = K / logK
    else:
        n = K / logK**2
    return max(1, int(math.floor(n)))


@dataclass(frozen=True)
class AssumptionReport:
    checks: Mapping[str, bool]
    messages: Mapping[str, str]

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    @property
    def failed(self) -> list[str]:
        return [k for k, v in self.checks.items() if not v]

    def lines(self) -> list[str]:
        return [
            f"{name} {'passes' if ok else 'fails'}: {self.messages[name]}"
            for name, ok in self.checks.items()
        ]


def validate(model: ModelSpec) -> AssumptionReport:
    """Check parameter positivity and assumptions (R), (E), (I).  Never raises."""
    p = model.params
    checks, msgs = {}, {}

    if model.family is Family.LOTKA_VOLTERRA:
        bad = [n for n, v in p.items() if v < 0]
        strict = {
            "c11": p["c11"],
            "c22": p["c22"],
            "b_R - d_R": p["b_R"] - p["d_R"],
            "b_M - d_M": p["b_M"] - p["d_M"],
        }
        bad += [n for n, v in strict.items() if v <= 0]
    else:
        bad = [n for n, v in p.items() if v <= 0]
    checks["positivity"] = not bad
    msgs["positivity"] = "all parameters admissible" if not bad else f"violated by {bad}"

    checks["(R)"] = True
    msgs["(R)"] = "built-in family rates are polynomial in the densities"

    try:
        x_star = _resident_equilibrium(model)
        F_R, _ = growth_rates(model, (x_star, 0.0))
        deriv = _d_FR_dxR(model)
        e_ok = x_star > 0 and abs(F_R) <= 1e-12 and deriv <= 0
        checks["(E)"] = e_ok
        msgs["(E)"] = f"x*_R = {x_star:g}, dF_R/dx_R = {deriv:g}"
    except NoEquilibrium as exc:
        x_star = None
        checks["(E)"] = False
        msgs["(E)"] = str(exc)

    if x_star is None:
        checks["(I)"] = False
        msgs["(I)"] = "not evaluable without an equilibrium"
    else:
        _, F_M = growth_rates(model, (x_star, 0.0))
        checks["(I)"] = F_M > 0
        msgs["(I)"] = f"F_M(x*_R, 0) = {F_M:g}"
    return AssumptionReport(MappingProxyType(checks), MappingProxyType(msgs))
