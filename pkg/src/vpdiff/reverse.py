"""Reverse-time generation driven by a score function.

The default sampler is the explicit Euler update
x_{n-1} = x_n + b(n) (x_n / 2 + s(x_n, n)) + sqrt(b(n)) z; the step
from n = 1 to 0 uses the score at n = 1 like every other step.  An
ancestral variant x_{n-1} = (x_n + b(n) s(x_n, n)) / sqrt(1 - b(n)) +
sqrt(b(n)) z is available behind the sampler switch, and each step can
be split into k equal sub-steps of rate b(n)/k (score re-evaluated at
the current state, time index held at n).

Sampling uses the same per-sample RNG stream convention as the forward
chain: stream i is keyed by (seed, i), draws the initial state first
when starting from noise, then the step noises in traversal order.
Samples whose score or state turns non-finite are excluded and the run
fails if more than 1% of them abort.
"""

from __future__ import annotations

import numpy as np

from .errors import PropagationError
from .forward import PathEnsemble, _check_record_steps, _streams, seed_key


def _proposal(x, n, s, b, z, sampler):
    if sampler == "euler":
        return x + b * (0.5 * x + s) + np.sqrt(b) * z
    if sampler == "ancestral":
        return (x + b * s) / np.sqrt(1.0 - b) + np.sqrt(b) * z
    raise ValueError(f"sampler must be 'euler' or 'ancestral', got {sampler!r}")


def reverse_step(x, n, score_fn, schedule, rng, sampler="euler", substeps=1):
    """One reverse update n -> n-1 applied to every row of x.

    Raises PropagationError if the score comes back non-finite anywhere;
    batch-level tolerance for partial failures lives in simulate_reverse.
    """
    if n < 1 or n > schedule.N:
        raise ValueError(f"reverse steps run from N down to 1, got n = {n}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    b = schedule.beta_at(n) / substeps
    for _ in range(substeps):
        s = score_fn(x, n)
        if not np.all(np.isfinite(s)):
            raise PropagationError(f"score non-finite at step {n}", step=n)
        z = rng.standard_normal(x.shape)
        x = _proposal(x, n, s, b, z, sampler)
    return x


def simulate_reverse(
    score_fn,
    schedule,
    record_steps,
    seed,
    M=None,
    d=None,
    init_states=None,
    n_start=None,
    sampler="euler",
    substeps=1,
    abort_fraction=0.01,
):
    """Run M reverse chains and record selected steps as a PathEnsemble.

    Either provide init_states (M x d, e.g. forward-noised data for a
    turn-around run, recorded as init_mode "uturn_state") or M and d for
    a pure-noise start at n_start (default N).  record_steps must lie in
    [0, n_start]; the start state itself is recordable.

    Per-sample failures (non-finite state or score contribution) mark
    the sample excluded, NaN out its remaining records, and the run
    aborts with PropagationError if more than abort_fraction of samples
    fail.
    """
    N = schedule.N
    if n_start is None:
        n_start = N
    if not 1 <= n_start <= N:
        raise ValueError(f"n_start must lie in [1, {N}], got {n_start}")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if sampler not in ("euler", "ancestral"):
        raise ValueError(f"sampler must be 'euler' or 'ancestral', got {sampler!r}")

    steps = _check_record_steps(record_steps, N)
    if steps.max() > n_start:
        raise ValueError(f"record_steps beyond the start step {n_start}: {record_steps!r}")
    record_pos = {int(n): j for j, n in enumerate(steps)}

    if init_states is not None:
        x = np.array(init_states, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError("init_states must be an M x d matrix")
        if M is not None and M != x.shape[0]:
            raise ValueError("M disagrees with init_states row count")
        M, d = x.shape
        streams = _streams(seed, M)
        init_mode = "uturn_state"
    else:
        if M is None or d is None:
            raise ValueError("need M and d when starting from noise")
        streams = _streams(seed, M)
        x = np.empty((M, d))
        for i, st in enumerate(streams):
            x[i] = st.standard_normal(d)
        init_mode = "noise"

    values = np.full((M, steps.size, d), np.nan)
    alive = np.ones(M, dtype=bool)
    excluded = []
    first_bad_step = None
    if n_start in record_pos:
        values[:, record_pos[n_start], :] = x

    b_over = schedule.b / substeps
    chunk = max(1, min(n_start, int(4_000_000 / max(1, M * d * substeps))))
    n = n_start
    while n >= 1:
        lo = max(n - chunk + 1, 1)
        L = n - lo + 1
        noise = np.empty((M, L * substeps, d))
        for i, st in enumerate(streams):
            noise[i] = st.standard_normal((L * substeps, d))
        for j in range(L):
            step = n - j
            b = b_over[step]
            for k in range(substeps):
                s = score_fn(x, step)
                bad = ~np.all(np.isfinite(s), axis=1) & alive
                if bad.any():
                    if first_bad_step is None:
                        first_bad_step = step
                    excluded.extend(np.where(bad)[0].tolist())
                    alive &= ~bad
                    x[bad] = 0.0
                    s = np.where(np.isfinite(s), s, 0.0)
                z = noise[:, j * substeps + k, :]
                x = _proposal(x, step, s, b, z, sampler)
                bad = ~np.all(np.isfinite(x), axis=1) & alive
                if bad.any():
                    if first_bad_step is None:
                        first_bad_step = step
                    excluded.extend(np.where(bad)[0].tolist())
                    alive &= ~bad
                    x[bad] = 0.0
            if (step - 1) in record_pos:
                col = record_pos[step - 1]
                values[alive, col, :] = x[alive]
        n = lo - 1

    # rows excluded mid-run keep NaN at every step recorded after their failure
    excluded = sorted(set(excluded))
    if len(excluded) > abort_fraction * M:
        raise PropagationError(
            f"{len(excluded)} of {M} samples aborted (first failure at step {first_bad_step})",
            step=first_bad_step,
        )
    return PathEnsemble(
        direction="reverse",
        init_mode=init_mode,
        record_steps=steps,
        values=values,
        seed=seed_key(seed),
        schedule=schedule,
        excluded=excluded,
    )
