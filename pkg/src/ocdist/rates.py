"""
Convergence-rate measurement on error traces.

Classification rule (deterministic, a pure function of the error series):

* errors below ``FLOOR`` are the rounding regime; the usable series is
  the prefix before the first such error.
* ``r(k) = err(k+1) / err(k)`` over the usable series; at least
  ``MIN_POINTS`` errors (so ``WINDOW`` ratios) are required.
* **superlinear** when the last ``WINDOW`` ratios decrease by a factor
  ``<= 1 - DELTA`` at every step and the least-squares slope of ``log r`` over the
  tail is at most ``log(base) + MARGIN``, where ``base`` is the predicted
  envelope base (``rho`` or ``c``) or ``1 - DELTA`` when none is given.
* **sublinear** when the tail geometric-mean ratio ``c_hat`` is ``>= 1``,
  or it is ``>= 1 - DELTA`` with ratios still increasing.
* **linear(c_hat)** otherwise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

FLOOR = 1e-13
WINDOW = 8
DELTA = 0.05
MARGIN = 0.05
MIN_POINTS = WINDOW + 1


class TraceTooShort(ValueError):
    """Fewer than ``MIN_POINTS`` errors above the floor."""


@dataclass
class RateReport:
    classification: str
    c_hat: float
    slope: float
    ratios: list = field(repr=False)
    usable: int = 0
    sigma: Optional[float] = None
    rho: Optional[float] = None
    c: Optional[float] = None
    r1: Optional[float] = None
    r2: Optional[float] = None

    @property
    def kind(self):
        return self.classification.split("(")[0]

    def to_dict(self):
        return asdict(self)


def _errors_of(trace, x_star):
    """Error and disagreement series from a trace object, a column dict, or a bare array."""
    if isinstance(trace, dict):
        return np.asarray(trace["err_to_opt"], float), np.asarray(trace.get("consensus_err", []), float)
    if hasattr(trace, "rows"):
        if x_star is not None and trace.states:
            X = np.stack(trace.states)
            err = np.linalg.norm((X - np.asarray(x_star, float)).reshape(len(X), -1), axis=1)
        else:
            err = trace.column("err_to_opt")
        return err, trace.column("consensus_err")
    return np.asarray(trace, dtype=float), np.array([])


def usable_prefix(errors, floor=FLOOR):
    errors = np.asarray(errors, dtype=float)
    below = np.nonzero(~(errors >= floor))[0]  # also stops at nan
    return errors[: below[0]] if below.size else errors


def contraction_factor(values, floor=FLOOR):
    """Largest one-step ratio ``v(k+1) / v(k)`` with both terms above the floor; ``None`` if there is none."""
    v = np.asarray(values, dtype=float)
    ok = (v[:-1] >= floor) & (v[1:] >= floor)
    if not ok.any():
        return None
    return float(np.max(v[1:][ok] / v[:-1][ok]))


def envelope_constant(ratios, base, offset):
    """Smallest ``r`` with ``ratios[k] <= r * base**(k + offset)`` for all ``k``."""
    ratios = np.asarray(ratios, dtype=float)
    k = np.arange(ratios.size)
    # logs avoid underflow of base**k on long traces
    return float(np.exp(np.max(np.log(ratios) - (k + offset) * np.log(base))))


def fit_rate(trace, x_star=None, rho=None, c=None, floor=FLOOR) -> RateReport:
    """Classify the convergence of ``trace`` and measure envelope constants.

    Parameters
    ----------
    trace : ConvergenceTrace, dict of columns, or array of errors
    x_star : array_like, optional
        Recompute errors from stored states against this optimum.
    rho, c : float, optional
        Predicted envelope bases; ``r1 = max r(k) / rho^(k+1)`` and
        ``r2 = max r(k) / c^k`` are reported when given.
    """
    err, cons = _errors_of(trace, x_star)
    e = usable_prefix(err, floor)
    if e.size < MIN_POINTS:
        raise TraceTooShort(f"need {MIN_POINTS} errors above {floor:g}, got {e.size}")
    r = e[1:] / e[:-1]
    tail = r[-WINDOW:]
    logs = np.log(tail)
    slope = float(np.polyfit(np.arange(tail.size), logs, 1)[0])
    c_hat = float(np.exp(np.mean(np.log(r[-WINDOW:]))))
    base = rho if rho is not None else c
    bound = np.log(base) + MARGIN if base is not None else np.log(1.0 - DELTA)
    quotients = tail[1:] / tail[:-1]
    if np.all(quotients <= 1.0 - DELTA) and slope <= bound:
        label = "superlinear"
    elif c_hat >= 1.0 or (c_hat >= 1.0 - DELTA and slope > 0):
        label = "sublinear"
    else:
        label = f"linear({c_hat:.6g})"
    return RateReport(
        classification=label,
        c_hat=c_hat,
        slope=slope,
        ratios=[float(v) for v in r],
        usable=int(e.size),
        sigma=contraction_factor(cons, floor) if cons.size else None,
        rho=rho,
        c=c,
        r1=envelope_constant(r, rho, 1) if rho is not None else None,
        r2=envelope_constant(r, c, 0) if c is not None else None,
    )
