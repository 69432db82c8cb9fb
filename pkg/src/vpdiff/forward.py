"""Forward noising chain and its closed-form temporal statistics.

One step of the chain is x_n = sqrt(1 - b_n) x_{n-1} + sqrt(b_n) z, so
the conditional law after n steps is
x_n | x_0 ~ N(sqrt(Phi(n,0)) x_0, (1 - Phi(n,0)) I) and, for data with
unit second moment, the cross-time correlations are
C_0(n) = sqrt(Phi(n,0)) against the start and C_T(n) = sqrt(Phi(N,n))
against the end of the chain.

Each sample owns an RNG stream keyed by (seed, sample index), so the
ensemble is reproducible regardless of internal chunking and any subset
of samples can be regenerated in isolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .schedule import Schedule, make_schedule
from .series import DiagnosticSeries

DIRECTIONS = ("forward", "reverse")
INIT_MODES = ("data", "noise", "uturn_state")


def seed_key(seed):
    """Normalize a seed (int or sequence of ints) for SeedSequence entropy."""
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return [int(v) for v in seed]


def sample_stream(seed, index):
    """Independent per-sample generator keyed by (seed, sample index)."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed_key(seed), spawn_key=(int(index),))
    )


def _streams(seed, M):
    return [sample_stream(seed, i) for i in range(M)]


def _check_record_steps(record_steps, N):
    steps = np.asarray(record_steps, dtype=np.int64)
    if steps.size == 0:
        raise ValueError("record_steps must name at least one step")
    if steps.min() < 0 or steps.max() > N:
        raise ValueError(f"record_steps outside [0, {N}]: {record_steps!r}")
    if np.unique(steps).size != steps.size or np.any(np.diff(steps) < 0):
        raise ValueError("record_steps must be strictly increasing and unique")
    return steps


@dataclass
class PathEnsemble:
    """States of M chain samples at a recorded subset of steps.

    values has shape (M, len(record_steps), d) and record_steps is in
    chain order for the stated direction (increasing n for forward runs,
    decreasing for reverse runs the values axis still follows
    record_steps order).
    """

    direction: str
    init_mode: str
    record_steps: np.ndarray
    values: np.ndarray
    seed: int
    schedule: Schedule
    excluded: list = field(default_factory=list)

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        self.record_steps = np.asarray(self.record_steps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[1] != self.record_steps.size:
            raise ValueError("values must have shape (M, len(record_steps), d)")

    @property
    def M(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[2]

    def state_at(self, n):
        idx = np.where(self.record_steps == n)[0]
        if idx.size == 0:
            raise ValueError(f"step {n} was not recorded (have {self.record_steps.tolist()})")
        return self.values[:, idx[0], :]

    def kept_values(self):
        """values with excluded samples dropped (reverse runs may abort rows)."""
        if not self.excluded:
            return self.values
        keep = np.setdiff1d(np.arange(self.M), np.asarray(self.excluded, dtype=np.int64))
        return self.values[keep]

    def kept_state_at(self, n):
        idx = np.where(self.record_steps == n)[0]
        if idx.size == 0:
            raise ValueError(f"step {n} was not recorded (have {self.record_steps.tolist()})")
        return self.kept_values()[:, idx[0], :]

    def save(self, basepath):
        """Write <base>.utd1 (rows are sample-major records) and <base>.json."""
        base = Path(basepath)
        M, R, d = self.values.shape
        data_mod.save_binary(self.values.reshape(M * R, d), base.with_suffix(".utd1"))
        sidecar = {
            "direction": self.direction,
            "init_mode": self.init_mode,
            "record_steps": self.record_steps.tolist(),
            "seed": seed_key(self.seed),
            "schedule": self.schedule.as_dict(),
            "M": int(M),
            "d": int(d),
            "excluded": [int(i) for i in self.excluded],
        }
        with open(base.with_suffix(".json"), "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_ensemble(basepath):
    base = Path(basepath)
    with open(base.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    flat = data_mod.load_binary(base.with_suffix(".utd1"))
    M = sidecar["M"]
    R = len(sidecar["record_steps"])
    values = flat.reshape(M, R, sidecar["d"])
    return PathEnsemble(
        direction=sidecar["direction"],
        init_mode=sidecar["init_mode"],
        record_steps=np.array(sidecar["record_steps"], dtype=np.int64),
        values=values,
        seed=sidecar["seed"],
        schedule=make_schedule(**sidecar["schedule"]),
        excluded=sidecar.get("excluded", []),
    )


def step_kernel_sample(x, n, schedule, rng):
    """One forward step n-1 -> n applied to every row of x."""
    b = schedule.beta_at(n)
    if n < 1:
        raise ValueError(f"forward steps start at n = 1, got {n}")
    z = rng.standard_normal(x.shape)
    return np.sqrt(1.0 - b) * x + np.sqrt(b) * z


def jump_sample(x0, n, schedule, rng):
    """Direct draw from the n-step conditional N(sqrt(Phi) x0, (1 - Phi) I)."""
    ph = schedule.phi(int(n), 0)
    z = rng.standard_normal(x0.shape)
    return np.sqrt(ph) * x0 + np.sqrt(1.0 - ph) * z


def simulate_chain(x0, schedule, record_steps, seed):
    """Run the chained kernel from given start states, recording chosen steps.

    This is the engine behind simulate_forward and carries no assumption
    about the start states' moments.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2:
        raise ValueError("x0 must be an M x d matrix")
    M, d = x0.shape
    N = schedule.N
    steps = _check_record_steps(record_steps, N)
    record_pos = {int(n): j for j, n in enumerate(steps)}
    values = np.empty((M, steps.size, d))
    if 0 in record_pos:
        values[:, record_pos[0], :] = x0
    streams = _streams(seed, M)
    x = x0.copy()
    # chunk the per-step noise so memory stays bounded at large M * d
    chunk = max(1, min(N, int(4_000_000 / max(1, M * d))))
    b = schedule.b
    n = 1
    while n <= N:
        hi = min(n + chunk - 1, N)
        L = hi - n + 1
        noise = np.empty((M, L, d))
        for i, st in enumerate(streams):
            noise[i] = st.standard_normal((L, d))
        for j in range(L):
            step = n + j
            x = np.sqrt(1.0 - b[step]) * x + np.sqrt(b[step]) * noise[:, j, :]
            if step in record_pos:
                values[:, record_pos[step], :] = x
        n = hi + 1
    return values


def simulate_forward(dataset, schedule, record_steps, seed, init_mode="data"):
    """Noise a dataset along the chained kernel and keep selected steps.

    The dataset must be (at least approximately) normalized: pooled mean
    within 0.05 of 0 and pooled second moment within 0.05 of 1.  Data
    with exact unit population moments passes at any M.
    """
    mean, second = dataset.pooled_moments()
    if abs(mean) > 0.05 or abs(second - 1.0) > 0.05:
        raise ValueError(
            f"dataset not normalized: pooled mean {mean:.4f}, second moment {second:.4f}; "
            "run data.normalize() first"
        )
    values = simulate_chain(dataset.samples, schedule, record_steps, seed)
    return PathEnsemble(
        direction="forward",
        init_mode=init_mode,
        record_steps=np.asarray(record_steps, dtype=np.int64),
        values=values,
        seed=seed_key(seed),
        schedule=schedule,
    )


def forward_autocorr_closed_form(schedule, steps, mode="from_zero"):
    """Closed-form chain correlations for unit-second-moment data.

    mode "from_zero": C_0(n) = sqrt(Phi(n, 0)).
    mode "from_T":    C_T(n) = sqrt(Phi(N, n)).
    """
    arr = np.asarray(steps, dtype=np.int64)
    if mode == "from_zero":
        vals = np.sqrt(schedule.phi(arr, 0))
        name = "C0_closed_form"
    elif mode == "from_T":
        vals = np.sqrt(schedule._P[schedule.N] / schedule._P[arr])
        name = "CT_closed_form"
    else:
        raise ValueError(f"mode must be 'from_zero' or 'from_T', got {mode!r}")
    return DiagnosticSeries(
        name=name,
        steps=arr,
        values=vals,
        stderr=np.zeros(arr.shape),
        metadata={"schedule": schedule.kind, "mode": mode},
    )


def empirical_autocorr(ensemble, anchor):
    """Anchored correlation estimate over the ensemble's recorded steps.

    C_hat(n) = sum_i <x_i(anchor), x_i(n)> / sum_i ||x_i(anchor)||^2,
    a ratio of sample means whose standard error comes from the delta
    method on per-sample contributions.  With M = 1 the point estimate
    is still defined but the stderr is NaN and flagged in metadata.
    """
    kept = ensemble.kept_values()
    x_a = ensemble.kept_state_at(anchor)
    M, d = x_a.shape
    b_contrib = np.einsum("md,md->m", x_a, x_a) / d
    b_mean = b_contrib.mean()
    if b_mean <= 0:
        raise ValueError("anchor states are identically zero, correlation undefined")
    values = np.empty(ensemble.record_steps.size)
    stderr = np.empty(ensemble.record_steps.size)
    for j, n in enumerate(ensemble.record_steps):
        x_n = kept[:, j, :]
        a_contrib = np.einsum("md,md->m", x_a, x_n) / d
        r = a_contrib.mean() / b_mean
        values[j] = r
        if M > 1:
            resid = a_contrib - r * b_contrib
            stderr[j] = resid.std(ddof=1) / (b_mean * np.sqrt(M))
        else:
            stderr[j] = np.nan
    return DiagnosticSeries(
        name=f"autocorr_anchor_{int(anchor)}",
        steps=ensemble.record_steps.copy(),
        values=values,
        stderr=stderr,
        metadata={
            "M": int(M),
            "anchor": int(anchor),
            "direction": ensemble.direction,
            "schedule": ensemble.schedule.kind,
            "stderr_defined": bool(M > 1),
            "estimator": "anchored_inner_product_ratio",
        },
    )
