"""Distributional and temporal diagnostics for chain ensembles.

The two-sample statistic is an unbiased kernel discrepancy (squared MMD)
under the cubic polynomial kernel k(u, v) = (u.v / d + 1)^3, reported
with a bootstrap standard error and never clamped at zero: small
negative values are informative, they say the two sets are closer than
the estimator's own noise floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DirectionError, SampleSizeError
from .forward import empirical_autocorr
from .series import DiagnosticSeries

_TILE = 1024


@dataclass
class KidReport:
    mmd2: float
    stderr: float
    M_x: int
    M_y: int
    n_boot: int
    boot_seed: int
    kernel: dict = field(
        default_factory=lambda: {"family": "polynomial", "degree": 3, "offset": 1.0, "scale": "1/d"}
    )

    def as_dict(self):
        return {
            "mmd2": self.mmd2,
            "stderr": self.stderr,
            "M_x": self.M_x,
            "M_y": self.M_y,
            "n_boot": self.n_boot,
            "boot_seed": self.boot_seed,
            "kernel": self.kernel,
        }


def _gram_sums(X, Y, same):
    """Sum of k(x, y) over all pairs, tiled; excludes the diagonal when same."""
    d = X.shape[1]
    total = 0.0
    for i0 in range(0, X.shape[0], _TILE):
        xi = X[i0 : i0 + _TILE]
        for j0 in range(0, Y.shape[0], _TILE):
            yj = Y[j0 : j0 + _TILE]
            K = (xi @ yj.T / d + 1.0) ** 3
            if same and i0 == j0:
                np.fill_diagonal(K, 0.0)
            total += float(K.sum())
    return total


def _mmd2(X, Y):
    mx, my = X.shape[0], Y.shape[0]
    sxx = _gram_sums(X, X, same=True) / (mx * (mx - 1))
    syy = _gram_sums(Y, Y, same=True) / (my * (my - 1))
    sxy = _gram_sums(X, Y, same=False) / (mx * my)
    return sxx + syy - 2.0 * sxy


def kid(x_feats, y_feats, n_boot=10, boot_seed=0):
    """Unbiased squared MMD between two feature sets, with bootstrap stderr.

    The two sets are put in a canonical order (by size, then content
    bytes) before anything is computed, so kid(a, b) and kid(b, a)
    return bit-identical reports.  Both sets need at least 2 rows.
    """
    X = np.ascontiguousarray(np.atleast_2d(x_feats), dtype=np.float64)
    Y = np.ascontiguousarray(np.atleast_2d(y_feats), dtype=np.float64)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature dimensions differ: {X.shape[1]} vs {Y.shape[1]}")
    if X.shape[0] < 2 or Y.shape[0] < 2:
        raise SampleSizeError("kid needs at least 2 samples per set")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ValueError("kid inputs contain non-finite entries")
    if (X.shape[0], X.tobytes()) > (Y.shape[0], Y.tobytes()):
        X, Y = Y, X
    est = _mmd2(X, Y)
    rng = np.random.default_rng(boot_seed)
    boots = np.empty(n_boot)
    for b in range(n_boot):
        bi = rng.integers(0, X.shape[0], X.shape[0])
        bj = rng.integers(0, Y.shape[0], Y.shape[0])
        boots[b] = _mmd2(X[bi], Y[bj])
    return KidReport(
        mmd2=float(est),
        stderr=float(boots.std(ddof=1)) if n_boot >= 2 else float("nan"),
        M_x=int(X.shape[0]),
        M_y=int(Y.shape[0]),
        n_boot=int(n_boot),
        boot_seed=int(boot_seed),
    )


def feature_map(samples, mode="identity", dim=None, seed=None, path=None):
    """Features for the kernel discrepancy.

    identity: samples unchanged.  random_projection: fixed seeded
    Gaussian map to `dim` coordinates scaled by 1/sqrt(dim), so squared
    distances are preserved in expectation.  external_file: load a
    precomputed feature matrix (binary sample format) with matching row
    count.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if mode == "identity":
        return X
    if mode == "random_projection":
        if dim is None or seed is None:
            raise ValueError("random_projection needs dim and seed")
        rng = np.random.default_rng(seed)
        P = rng.standard_normal((X.shape[1], dim)) / np.sqrt(dim)
        return X @ P
    if mode == "external_file":
        from . import data as data_mod

        feats = data_mod.load_binary(path)
        if feats.shape[0] != X.shape[0]:
            raise ValueError(
                f"feature file rows ({feats.shape[0]}) do not match samples ({X.shape[0]})"
            )
        return feats
    raise ValueError(f"unknown feature mode {mode!r}")


def reverse_autocorr(ensemble, anchor):
    """Anchored correlation of a reverse-run ensemble.

    Same estimator as the forward one; the direction check exists
    because feeding a forward ensemble here silently answers a different
    question.
    """
    if ensemble.direction != "reverse":
        raise DirectionError(
            f"reverse_autocorr needs a reverse ensemble, got direction {ensemble.direction!r}"
        )
    series = empirical_autocorr(ensemble, anchor)
    series.name = f"reverse_autocorr_anchor_{int(anchor)}"
    return series


def half_decay_time(curves):
    """Steps until each anchored correlation first falls through 1/2.

    Takes anchored series (each with metadata["anchor"]) and returns a
    series over anchors t of delta(t) = t - tau*, where tau* linearly
    interpolates the first crossing of 0.5 scanning down from the
    anchor.  Anchors whose curve never crosses inside the recorded
    window are censored at the full elapsed window and listed in
    metadata["censored"].
    """
    anchors = []
    deltas = []
    censored = []
    for series in curves:
        t = int(series.metadata.get("anchor", series.steps.max()))
        mask = series.steps <= t
        steps = series.steps[mask]
        vals = series.values[mask]
        order = np.argsort(steps)[::-1]
        steps = steps[order]
        vals = vals[order]
        crossing = None
        for j in range(1, steps.size):
            hi_v, lo_v = vals[j - 1], vals[j]
            if hi_v >= 0.5 > lo_v:
                frac = (hi_v - 0.5) / (hi_v - lo_v)
                crossing = steps[j - 1] + frac * (steps[j] - steps[j - 1])
                break
        anchors.append(t)
        if crossing is None:
            deltas.append(float(t - steps.min()) if steps.size else 0.0)
            censored.append(t)
        else:
            deltas.append(float(t - crossing))
    order = np.argsort(anchors)
    return DiagnosticSeries(
        name="half_decay_time",
        steps=np.asarray(anchors)[order],
        values=np.asarray(deltas)[order],
        stderr=None,
        metadata={"censored": sorted(censored)},
    )


def score_norm_curves(score_fn, ensemble):
    """Root-mean-square score norms along an ensemble's recorded steps.

    Returns {"S": ..., "M": ...}: S(n) is the RMS norm of the score at
    step n normalized to 1 at the reference step (0 for scores defined
    there, otherwise 1), and M(n) weights the squared norm by
    lambda(n) = 1 - Phi(n, 0) and normalizes at the final recorded step.
    """
    sched = ensemble.schedule
    min_step = getattr(score_fn, "min_step", 0)
    steps = [int(n) for n in ensemble.record_steps if n >= min_step]
    if not steps:
        raise ValueError("no recorded steps at or above the score's first defined step")
    e2 = {}
    for n in steps:
        x = ensemble.kept_state_at(n)
        s = score_fn(x, n)
        e2[n] = float(np.mean(np.sum(s**2, axis=1)))
    ref = min_step if min_step in e2 else min(e2)
    last = max(e2)
    steps_arr = np.asarray(steps, dtype=np.int64)
    s_vals = np.array([np.sqrt(e2[n] / e2[ref]) for n in steps])
    lam = {n: 1.0 - sched.phi(n, 0) for n in steps}
    m_den = lam[last] * e2[last]
    m_vals = np.array([np.sqrt(lam[n] * e2[n] / m_den) for n in steps])
    meta = {"reference_step": ref, "final_step": last, "schedule": sched.kind}
    return {
        "S": DiagnosticSeries("score_norm_S", steps_arr, s_vals, None, dict(meta)),
        "M": DiagnosticSeries("score_norm_M", steps_arr, m_vals, None, dict(meta)),
    }


def ks_ratio(samples, alpha=0.05):
    """Fraction of coordinates rejecting a one-sample normality test.

    Each coordinate gets a Kolmogorov statistic against N(0, 1) with the
    asymptotic p-value kolmogorov(sqrt(M) D); coordinates with p < alpha
    count as rejections.  Needs M >= 25 for the asymptotic regime.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    M, d = X.shape
    if M < 25:
        raise SampleSizeError(f"ks_ratio needs M >= 25, got {M}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    grid_hi = np.arange(1, M + 1) / M
    grid_lo = np.arange(0, M) / M
    rejections = 0
    pvals = np.empty(d)
    for j in range(d):
        cdf = special.ndtr(np.sort(X[:, j]))
        D = max(float(np.max(grid_hi - cdf)), float(np.max(cdf - grid_lo)))
        p = float(special.kolmogorov(np.sqrt(M) * D))
        pvals[j] = p
        if p < alpha:
            rejections += 1
    return {
        "ratio": rejections / d,
        "rejections": int(rejections),
        "dims": int(d),
        "M": int(M),
        "alpha": float(alpha),
        "p_values": pvals,
    }


def plateau_step(series, window=50, rel_tol=0.02):
    """Earliest recorded step where the series stops moving.

    Returns the smallest recorded n such that over [n, n + window] the
    spread (max - min) stays below rel_tol times |value at n|, or None
    if no fully covered window qualifies.  A constant stretch qualifies
    even at value zero.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    steps = series.steps
    vals = series.values
    last = steps.max()
    for i, n in enumerate(steps):
        if n + window > last:
            break
        mask = (steps >= n) & (steps <= n + window)
        seg = vals[mask]
        span = float(seg.max() - seg.min())
        base = abs(float(vals[i]))
        if span == 0.0 or (base > 0 and span / base < rel_tol):
            return int(n)
    return None
