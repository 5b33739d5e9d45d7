"""Bijections between natural-scale model parameters and R^k.

AR and MA blocks go through partial autocorrelations (Monahan 1984), so
every unconstrained vector maps to a stationary (invertible) polynomial and
the origin maps to the zero polynomial.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConstraintError, InputError

CYCLE_FREQUENCY_BOUNDS = (2 * math.pi / 300, 2 * math.pi / 14)

# kinds recognised in a ParameterVector; consecutive entries of the same
# polynomial kind form one block
KINDS = ("beta", "intercept", "ar", "ma", "seasonal_ar", "seasonal_ma", "variance", "frequency")


def constrain_stationary(x):
    """Map unconstrained reals to AR coefficients of a stationary polynomial
    ``1 - phi_1 B - ... - phi_p B^p``."""
    x = np.asarray(x, dtype=float)
    r = x / np.sqrt(1.0 + x * x)
    phi = np.zeros(0)
    for k, rk in enumerate(r):
        phi = np.r_[phi - rk * phi[::-1], rk] if k else np.array([rk])
    return phi


def unconstrain_stationary(phi):
    phi = np.asarray(phi, dtype=float).copy()
    p = phi.size
    r = np.empty(p)
    for k in range(p - 1, -1, -1):
        rk = phi[k]
        if not abs(rk) < 1.0:
            raise ConstraintError(f"polynomial {phi} is not stationary")
        r[k] = rk
        if k:
            head = phi[:k]
            phi = (head + rk * head[::-1]) / (1.0 - rk * rk)
    return r / np.sqrt(1.0 - r * r)


def constrain_invertible(x):
    """MA coefficients of an invertible ``1 + theta_1 B + ... + theta_q B^q``."""
    return -constrain_stationary(x)


def unconstrain_invertible(theta):
    return unconstrain_stationary(-np.asarray(theta, dtype=float))


def _logistic_to_interval(x, lo, hi):
    return lo + (hi - lo) / (1.0 + math.exp(-x))


def _interval_to_logit(v, lo, hi):
    if not lo < v < hi:
        raise ConstraintError(f"value {v} outside ({lo}, {hi})")
    u = (v - lo) / (hi - lo)
    return math.log(u) - math.log1p(-u)


def _blocks(kinds):
    start = 0
    for i in range(1, len(kinds) + 1):
        if i == len(kinds) or kinds[i] != kinds[start] or kinds[start] not in ("ar", "ma", "seasonal_ar", "seasonal_ma"):
            yield kinds[start], slice(start, i)
            start = i


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Named natural-scale parameters with their transform kinds."""

    names: tuple
    kinds: tuple
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float).copy())
        if not (len(self.names) == len(self.kinds) == self.values.size):
            raise InputError("names, kinds and values differ in length")
        unknown = set(self.kinds) - set(KINDS)
        if unknown:
            raise InputError(f"unknown parameter kinds {sorted(unknown)}")

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name):
        return self.values[self.names.index(name)]

    def get(self, name, default=None):
        return self[name] if name in self.names else default

    def select(self, kind):
        mask = np.array([k == kind for k in self.kinds], dtype=bool)
        return self.values[mask] if mask.size else np.zeros(0)

    def to_dict(self):
        return {n: float(v) for n, v in zip(self.names, self.values)}

    def to_json(self):
        return json.dumps({"names": list(self.names), "kinds": list(self.kinds),
                           "values": [float(v) for v in self.values]}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(doc["names"], doc["kinds"], doc["values"])

    def with_values(self, values):
        return ParameterVector(self.names, self.kinds, values)

    def validate(self):
        self.unconstrained()
        return self

    def unconstrained(self):
        """Forward transform to R^k; raises ConstraintError outside the domain."""
        if not np.all(np.isfinite(self.values)):
            raise InputError("parameters contain non-finite values")
        out = np.empty_like(self.values)
        for kind, sl in _blocks(self.kinds):
            v = self.values[sl]
            if kind in ("ar", "seasonal_ar"):
                out[sl] = unconstrain_stationary(v)
            elif kind in ("ma", "seasonal_ma"):
                out[sl] = unconstrain_invertible(v)
            elif kind == "variance":
                if v[0] <= 0:
                    raise ConstraintError(f"variance {self.names[sl.start]} must be positive")
                out[sl] = math.log(v[0])
            elif kind == "frequency":
                out[sl] = _interval_to_logit(v[0], *CYCLE_FREQUENCY_BOUNDS)
            else:
                out[sl] = v
        return out

    @classmethod
    def from_unconstrained(cls, names, kinds, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise InputError("unconstrained vector contains non-finite values")
        kinds = tuple(kinds)
        out = np.empty_like(x)
        for kind, sl in _blocks(kinds):
            v = x[sl]
            if kind in ("ar", "seasonal_ar"):
                out[sl] = constrain_stationary(v)
            elif kind in ("ma", "seasonal_ma"):
                out[sl] = constrain_invertible(v)
            elif kind == "variance":
                out[sl] = math.exp(v[0])
            elif kind == "frequency":
                out[sl] = _logistic_to_interval(v[0], *CYCLE_FREQUENCY_BOUNDS)
            else:
                out[sl] = v
        return cls(names, kinds, out)


def transform_parameters(params: ParameterVector) -> np.ndarray:
    """Natural scale -> unconstrained scale."""
    return params.unconstrained()


def untransform_parameters(template: ParameterVector, x) -> ParameterVector:
    """Unconstrained scale -> natural scale, reusing ``template``'s names and kinds."""
    return ParameterVector.from_unconstrained(template.names, template.kinds, x)
