"""Observation records and the array-backed :class:`Dataset`."""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class WeightedObservation:
    """An exact value ``y > 0`` seen with multiplicity ``weight > 0``."""

    y: float
    weight: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.y) and self.y > 0):
            raise DataError(f"observation must be finite and positive, got {self.y}")
        if not (math.isfinite(self.weight) and self.weight > 0):
            raise DataError(f"weight must be finite and positive, got {self.weight}")


@dataclass(frozen=True)
class CensoredObservation:
    """Knowledge that the value lies in ``(lower, upper]``.

    ``lower = 0`` is left censoring, ``upper = inf`` right censoring.
    """

    lower: float
    upper: float
    weight: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lower) and self.lower >= 0):
            raise DataError(f"lower bound must be finite and >= 0, got {self.lower}")
        if not (self.upper > self.lower):
            raise DataError(f"need lower < upper, got ({self.lower}, {self.upper}]")
        if not (math.isfinite(self.weight) and self.weight > 0):
            raise DataError(f"weight must be finite and positive, got {self.weight}")


def _floats(values):
    return np.ascontiguousarray(np.asarray(values, dtype=float).reshape(-1))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Weighted exact observations plus censored observations.

    Stored column-wise: ``y, w`` for exact values and ``lower, upper, cw``
    for censored ones.  Use :meth:`from_exact`, :meth:`from_censored` or
    :meth:`combine` rather than the raw constructor.
    """

    y: np.ndarray = field(default_factory=lambda: np.empty(0))
    w: np.ndarray = field(default_factory=lambda: np.empty(0))
    lower: np.ndarray = field(default_factory=lambda: np.empty(0))
    upper: np.ndarray = field(default_factory=lambda: np.empty(0))
    cw: np.ndarray = field(default_factory=lambda: np.empty(0))
    provenance: str = ""

    def __post_init__(self):
        for name in ("y", "w", "lower", "upper", "cw"):
            arr = _floats(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.y.shape != self.w.shape:
            raise DataError("y and w must have equal length")
        if not (self.lower.shape == self.upper.shape == self.cw.shape):
            raise DataError("lower, upper and cw must have equal length")
        if self.y.size:
            bad = np.flatnonzero(~(np.isfinite(self.y) & (self.y > 0)))
            if bad.size:
                raise DataError(f"exact observations must be finite and > 0 (indices {bad[:10].tolist()})")
            if not np.all(np.isfinite(self.w) & (self.w > 0)):
                raise DataError("weights must be finite and > 0")
        if self.lower.size:
            ok = np.isfinite(self.lower) & (self.lower >= 0) & (self.upper > self.lower)
            bad = np.flatnonzero(~ok)
            if bad.size:
                raise DataError(f"censored intervals need 0 <= lower < upper (indices {bad[:10].tolist()})")
            if not np.all(np.isfinite(self.cw) & (self.cw > 0)):
                raise DataError("censored weights must be finite and > 0")

    @classmethod
    def from_exact(cls, y, w=None, provenance=""):
        y = _floats(y)
        w = np.ones_like(y) if w is None else _floats(w)
        return cls(y=y, w=w, provenance=provenance)

    @classmethod
    def from_censored(cls, lower, upper, w=None, provenance=""):
        lower = _floats(lower)
        w = np.ones_like(lower) if w is None else _floats(w)
        return cls(lower=lower, upper=_floats(upper), cw=w, provenance=provenance)

    @classmethod
    def from_observations(cls, observations, provenance=""):
        ex = [o for o in observations if isinstance(o, WeightedObservation)]
        ce = [o for o in observations if isinstance(o, CensoredObservation)]
        return cls(y=[o.y for o in ex], w=[o.weight for o in ex],
                   lower=[o.lower for o in ce], upper=[o.upper for o in ce],
                   cw=[o.weight for o in ce], provenance=provenance)

    def combine(self, other):
        prov = "; ".join(p for p in (self.provenance, other.provenance) if p)
        return Dataset(y=np.concatenate([self.y, other.y]), w=np.concatenate([self.w, other.w]),
                       lower=np.concatenate([self.lower, other.lower]),
                       upper=np.concatenate([self.upper, other.upper]),
                       cw=np.concatenate([self.cw, other.cw]), provenance=prov)

    @property
    def exact(self):
        return [WeightedObservation(float(a), float(b)) for a, b in zip(self.y, self.w)]

    @property
    def censored(self):
        return [CensoredObservation(float(a), float(b), float(c))
                for a, b, c in zip(self.lower, self.upper, self.cw)]

    @property
    def n_exact(self):
        return self.y.size

    @property
    def n_censored(self):
        return self.lower.size

    def __len__(self):
        return self.n_exact + self.n_censored

    @property
    def total_weight(self):
        return float(self.w.sum() + self.cw.sum())

    def exact_part(self):
        return Dataset(y=self.y, w=self.w, provenance=self.provenance)

    def censored_part(self):
        return Dataset(lower=self.lower, upper=self.upper, cw=self.cw, provenance=self.provenance)

    def collapse_duplicates(self):
        """Merge repeated exact values (and identical intervals) into weights."""
        y, inv = np.unique(self.y, return_inverse=True)
        w = np.zeros(y.size)
        np.add.at(w, inv, self.w)
        if self.lower.size:
            pairs, cinv = np.unique(np.column_stack([self.lower, self.upper]), axis=0,
                                    return_inverse=True)
            cw = np.zeros(pairs.shape[0])
            np.add.at(cw, cinv.reshape(-1), self.cw)
            lower, upper = pairs[:, 0], pairs[:, 1]
        else:
            lower = upper = cw = np.empty(0)
        return Dataset(y=y, w=w, lower=lower, upper=upper, cw=cw, provenance=self.provenance)
