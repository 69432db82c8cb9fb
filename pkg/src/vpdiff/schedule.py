"""Discrete variance-preserving noise schedules.

A schedule is the per-step noising rate b(n) for n = 1..N together with
the survival product Phi(n, m) = prod_{k=m+1..n} (1 - b(k)).  Phi drives
every closed form in the package: the conditional mean coefficient is
sqrt(Phi(n, 0)), the conditional variance is 1 - Phi(n, 0), and the
temporal correlation of the forward chain between steps m and n is
sqrt(Phi(n, m)) times the state variance at m.

Three standard profiles are provided (linear, sigmoid, cosine), all with
N = 1000 by default.  The cosine profile uses the ratio-of-consecutive
form b(n) = min(1 - f(n)/f(n-1), 0.999) with
f(n) = cos^2(((n/N + 0.008)/1.008) * pi/2); an alternative algebraic
variant is available behind ``printed_form=True`` for comparison only
and is not meant to drive simulations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _as_step_array(n, N, name="n"):
    """Validate step indices and return them as an int array plus a scalar flag."""
    arr = np.asarray(n)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError(f"{name} must be integer step indices, got {n!r}")
        arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > N):
        raise ValueError(f"{name} out of range [0, {N}]: {n!r}")
    return arr, np.isscalar(n) or (hasattr(n, "ndim") and n.ndim == 0)


@dataclass
class CurveTable:
    """Mean and standard-deviation coefficients over a step grid."""

    steps: np.ndarray
    mean_coeff: np.ndarray
    std_coeff: np.ndarray

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("n,mean_coeff,std_coeff\n")
            for n, m, s in zip(self.steps, self.mean_coeff, self.std_coeff):
                fh.write(f"{int(n)},{float(m)!r},{float(s)!r}\n")


@dataclass
class Schedule:
    """A discrete noising-rate profile with cached survival products.

    Args:
        kind: profile label ("linear", "sigmoid", "cosine", ...).
        b: rate array of length N + 1; b[0] is the continuous-limit value
           at n = 0 and is never used by the chain, b[1..N] drive it.
        b1: nominal starting rate (kept for provenance in manifests).
        b2: nominal final rate.
        delta: time-step size; step n corresponds to time n * delta.
    """

    kind: str
    b: np.ndarray
    b1: float = 1e-4
    b2: float = 0.02
    delta: float = 1.0
    _P: np.ndarray = field(init=False, repr=False)
    _S: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.b.ndim != 1 or self.b.size < 3:
            raise ValueError("rate profile must be a 1-d array of length N + 1 with N >= 2")
        if np.any(self.b <= 0.0) or np.any(self.b > 0.999):
            bad = np.where((self.b <= 0.0) | (self.b > 0.999))[0]
            raise ValueError(f"rates must lie in (0, 0.999], violated at steps {bad.tolist()[:8]}")
        # P[n] = prod_{k<=n} (1 - b_k) over k = 1..n, P[0] = 1.
        self._P = np.concatenate([[1.0], np.cumprod(1.0 - self.b[1:])])
        self._S = np.concatenate([[0.0], np.cumsum(self.b[1:])])

    @property
    def N(self):
        return self.b.size - 1

    def beta_at(self, n):
        """Rate b(n) for step indices n in [0, N]."""
        arr, scalar = _as_step_array(n, self.N)
        out = self.b[arr]
        return float(out) if scalar else out

    def phi(self, n, m=0):
        """Survival product Phi(n, m) = prod_{k=m+1..n} (1 - b(k)).

        Exact semigroup: phi(n, m) * phi(m, l) == phi(n, l) holds to
        machine precision because both sides reduce to ratios of the
        same cached cumulative product.
        """
        if not isinstance(m, (int, np.integer)):
            raise ValueError(f"m must be an integer step, got {m!r}")
        if m < 0 or m > self.N:
            raise ValueError(f"m out of range [0, {self.N}]: {m}")
        arr, scalar = _as_step_array(n, self.N)
        if arr.size and arr.min() < m:
            raise ValueError(f"need m <= n, got m={m}, n={n!r}")
        out = self._P[arr] / self._P[m]
        return float(out) if scalar else out

    def phi_exponential(self, n, m=0):
        """Continuous-limit counterpart exp(-sum_{k=m+1..n} b(k)).

        Cross-check only.  Agreement with phi() should be judged on the
        exponents (log scale); the values themselves drift apart by
        roughly sum(b^2)/2, a few percent at Table-1 rates.
        """
        if m < 0 or m > self.N:
            raise ValueError(f"m out of range [0, {self.N}]: {m}")
        arr, scalar = _as_step_array(n, self.N)
        if arr.size and arr.min() < m:
            raise ValueError(f"need m <= n, got m={m}, n={n!r}")
        out = np.exp(-(self._S[arr] - self._S[m]))
        return float(out) if scalar else out

    def mean_std_curves(self, steps=None):
        """Closed-form conditional coefficients over a step grid.

        Returns a CurveTable with mean_coeff(n) = sqrt(Phi(n, 0)) and
        std_coeff(n) = sqrt(1 - Phi(n, 0)).  Defaults to the full grid
        0..N.
        """
        if steps is None:
            steps = np.arange(self.N + 1)
        arr, _ = _as_step_array(steps, self.N, name="steps")
        ph = self._P[arr]
        return CurveTable(steps=arr.copy(), mean_coeff=np.sqrt(ph), std_coeff=np.sqrt(1.0 - ph))

    def as_dict(self):
        return {
            "kind": self.kind,
            "b1": float(self.b1),
            "b2": float(self.b2),
            "N": int(self.N),
            "delta": float(self.delta),
        }


def linear_schedule(b1=1e-4, b2=0.02, N=1000, delta=1.0):
    """b(n) = (b2 - b1) * n / N + b1."""
    n = np.arange(N + 1, dtype=np.float64)
    b = (b2 - b1) * n / N + b1
    return Schedule(kind="linear", b=b, b1=b1, b2=b2, delta=delta)


def sigmoid_schedule(b1=1e-4, b2=0.02, N=1000, delta=1.0):
    """b(n) = (b2 - b1) / (1 + exp(-12 n / N + 6)) + b1."""
    n = np.arange(N + 1, dtype=np.float64)
    b = (b2 - b1) / (1.0 + np.exp(-12.0 * n / N + 6.0)) + b1
    return Schedule(kind="sigmoid", b=b, b1=b1, b2=b2, delta=delta)


def _cosine_f(n, N):
    return np.cos(((n / N + 0.008) / 1.008) * (math.pi / 2.0)) ** 2


def cosine_schedule(N=1000, delta=1.0, printed_form=False):
    """Cosine profile, ratio-of-consecutive form by default.

    b(n) = min(1 - f(n)/f(n-1), 0.999) with
    f(n) = cos^2(((n/N + 0.008)/1.008) * pi/2), and b(0) = b(1).

    With printed_form=True the algebraic variant
    b(n) = 1 - f(n)/(f(0) - f(n)) is used instead, clipped into
    (0, 0.999] so it remains constructible.  That variant does not
    produce a usable noising profile (it is flat at the clip floor for
    the first half of the range); it exists only so the two can be
    plotted side by side.
    """
    n = np.arange(N + 1, dtype=np.float64)
    f = _cosine_f(n, N)
    if printed_form:
        # the denominator vanishes at n=0; that entry is overwritten below
        with np.errstate(divide="ignore", invalid="ignore"):
            b = 1.0 - f / (f[0] - f)
        b = np.clip(b, 1e-12, 0.999)
        b[0] = b[1]
        sched = Schedule(kind="cosine-printed", b=b, b1=float(b[1]), b2=float(b[-1]), delta=delta)
        return sched
    b = np.empty(N + 1)
    b[1:] = np.minimum(1.0 - f[1:] / f[:-1], 0.999)
    b[0] = b[1]
    return Schedule(kind="cosine", b=b, b1=float(b[1]), b2=float(b[-1]), delta=delta)


_BUILDERS = {
    "linear": linear_schedule,
    "sigmoid": sigmoid_schedule,
    "cosine": lambda b1=None, b2=None, N=1000, delta=1.0: cosine_schedule(N=N, delta=delta),
}


def make_schedule(kind, b1=1e-4, b2=0.02, N=1000, delta=1.0):
    """Build one of the named profiles from plain config values."""
    if kind not in _BUILDERS:
        raise ValueError(f"unknown schedule kind {kind!r}, expected one of {sorted(_BUILDERS)}")
    if kind == "cosine":
        return cosine_schedule(N=N, delta=delta)
    return _BUILDERS[kind](b1=b1, b2=b2, N=N, delta=delta)
