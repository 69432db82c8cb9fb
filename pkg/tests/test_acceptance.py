"""End-to-end checks of the package's headline numerical claims.

Each test pins one externally checkable behavior: closed-form moments
and correlations of the forward chain, the analytic mixture score
against direct differentiation of the log-density, the weighted
regression identity, trained-model fidelity, exact-score generation,
the forward/reverse correlation asymmetry, calibration of the KS and
KID estimators, the turn-step scan, and byte-level reproducibility of
the command line driver.  Everything is seed-pinned.  Runtime budgets
are asserted where speed is part of the contract.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import logsumexp

from vpdiff import cli, data, forward, reverse, score
from vpdiff import diagnostics as diag
from vpdiff.schedule import make_schedule
from vpdiff.uturn import scan_summary, uturn_scan

SCHEDULE_KINDS = ("linear", "sigmoid", "cosine")
GRID_20 = list(range(50, 1001, 50))


# ------------------------------------------------- forward-chain closed forms


def test_chain_moments_match_closed_form():
    """Stepwise simulation reproduces the product-form mean and variance.

    Starting the chain at the constant point 1 isolates the signal
    coefficient: the state at step n must average to sqrt(phi(n,0)) with
    variance 1 - phi(n,0), for every schedule, at Monte-Carlo accuracy.
    """
    t0 = time.monotonic()
    M, d = 10_000, 2
    tol = 4.0 / np.sqrt(M)
    for kind in SCHEDULE_KINDS:
        sched = make_schedule(kind)
        vals = forward.simulate_chain(np.ones((M, d)), sched, GRID_20, seed=11)
        for i, n in enumerate(GRID_20):
            ph = sched.phi(n, 0)
            x = vals[:, i, :]
            assert abs(float(x.mean()) - np.sqrt(ph)) < tol, (kind, n)
            assert abs(float(x.var()) - (1.0 - ph)) < tol, (kind, n)
    assert time.monotonic() - t0 < 30.0


def test_anchored_correlations_match_closed_form():
    t0 = time.monotonic()
    M = 10_000
    spec = data.symmetric_pair_gm(2, 0.9)
    tol = 5.0 / np.sqrt(M)
    for kind in SCHEDULE_KINDS:
        sched = make_schedule(kind)
        ds = data.generate(spec, M, seed=3)
        ens = forward.simulate_forward(ds, sched, [0] + GRID_20, seed=5)
        for anchor, mode in ((0, "from_zero"), (sched.N, "from_T")):
            emp = forward.empirical_autocorr(ens, anchor)
            closed = forward.forward_autocorr_closed_form(sched, ens.record_steps, mode)
            worst = float(np.max(np.abs(emp.values - closed.values)))
            assert worst < tol, (kind, mode, worst)
    assert time.monotonic() - t0 < 60.0


# ------------------------------------------------------- analytic score oracle


def _mixture_logpdf(spec, x, n, sched):
    """Log density of the noised mixture marginal, straight from the formula."""
    ph = sched.phi(n, 0)
    parts = []
    for k in range(spec.K):
        mean = np.sqrt(ph) * spec.means[k]
        var = ph * spec.variances[k] + (1.0 - ph)
        sq = np.sum((x - mean) ** 2, axis=1)
        parts.append(np.log(spec.weights[k]) - 0.5 * sq / var
                     - 0.5 * spec.d * np.log(2.0 * np.pi * var))
    return logsumexp(np.stack(parts), axis=0)


def test_mixture_score_matches_log_density_gradient():
    spec = data.GaussianMixtureSpec(
        weights=np.array([0.5, 0.3, 0.2]),
        means=np.array([[1.2, 0.0], [-0.8, 0.9], [-0.5, -1.1]]),
        variances=np.array([0.3, 0.5, 0.2]),
    )
    sched = make_schedule("linear")
    rng = np.random.default_rng(17)
    probes = 1.4 * rng.standard_normal((100, 2))
    h = 1e-6
    for n in (1, 5, 20, 50, 100, 200, 400, 600, 800, 1000):
        s = score.gm_score(spec, probes, n, sched)
        for j in range(2):
            dx = np.zeros(2)
            dx[j] = h
            fd = (_mixture_logpdf(spec, probes + dx, n, sched)
                  - _mixture_logpdf(spec, probes - dx, n, sched)) / (2.0 * h)
            rel = np.abs(fd - s[:, j]) / np.maximum(1.0, np.abs(s[:, j]))
            assert float(rel.max()) < 1e-5, (n, j, float(rel.max()))


def test_weighted_target_norm_matches_dimension():
    """The variance weight makes every step contribute d on average."""
    M, d = 100_000, 2
    spec = data.GaussianMixtureSpec(
        weights=np.array([0.5, 0.3, 0.2]),
        means=np.array([[1.2, 0.0], [-0.8, 0.9], [-0.5, -1.1]]),
        variances=np.array([0.3, 0.5, 0.2]),
    )
    rng = np.random.default_rng(23)
    x0 = spec.sample(M, rng)
    for kind in SCHEDULE_KINDS:
        sched = make_schedule(kind)
        for n in GRID_20:
            ph = sched.phi(n, 0)
            z = rng.standard_normal((M, d))
            xt = np.sqrt(ph) * x0 + np.sqrt(1.0 - ph) * z
            target = score.dsm_target(xt, x0, n, sched)
            w = (1.0 - ph) * float(np.mean(np.sum(target**2, axis=1)))
            assert abs(w / d - 1.0) < 0.05, (kind, n, w)


# --------------------------------------------------------------- trained model


def test_trained_score_reaches_oracle_fidelity():
    spec = data.symmetric_pair_gm(2, 0.9)
    ds = data.generate(spec, 8000, seed=1)
    sched = make_schedule("linear")
    model = score.MlpScoreModel(2, seed=7)
    model, _ = score.train_dsm(
        model, ds, sched, score.TrainConfig(steps=30_000, lr=3e-2, seed=7)
    )
    rel = score.weighted_score_error(model, spec, sched)
    assert rel < 0.1, rel
    check = score.finite_diff_check(model, sched)
    assert check["l2_rel"] < 1e-4, check


# --------------------------------------------------------- exact-score reverse


def test_exact_score_generation_recovers_mixture():
    t0 = time.monotonic()
    spec = data.GaussianMixtureSpec(
        weights=np.array([0.65, 0.35]),
        means=np.array([[0.7, 0.7], [-1.3, -1.3]]),
        variances=np.array([0.09, 0.09]),
    )
    sched = make_schedule("linear")
    fn = score.gm_score_fn(spec, sched)
    ens = reverse.simulate_reverse(fn, sched, [0], seed=41, M=2000, d=2)
    synth = ens.kept_state_at(0)
    ref = data.generate(spec, 2000, seed=42).samples
    rep = diag.kid(synth, ref, n_boot=20, boot_seed=0)
    assert abs(rep.mmd2) < 3.0 * rep.stderr, (rep.mmd2, rep.stderr)
    dist = np.stack([np.sum((synth - m) ** 2, axis=1) for m in spec.means])
    occupancy = float(np.mean(np.argmin(dist, axis=0) == 0))
    assert abs(occupancy - 0.65) < 0.03, occupancy
    assert time.monotonic() - t0 < 180.0


# ---------------------------------------------- reverse-run correlation deficit

WEAK_TRAIN = {"linear": (1600, 2e-2), "sigmoid": (1600, 2e-2), "cosine": (4000, 5e-3)}


@pytest.fixture(scope="module")
def wide_pair_data():
    return data.generate(data.symmetric_pair_gm(128, 0.95), 4000, seed=1)


@pytest.mark.parametrize("kind", SCHEDULE_KINDS)
def test_reverse_correlation_dips_below_forward(kind, wide_pair_data):
    """An imperfect score decorrelates the reverse run faster than the chain.

    The anchored reverse correlation must sit below the closed-form
    forward value by five standard errors over a contiguous stretch of
    steps.  The model is deliberately under-trained so the deficit is
    visible at this sample size.
    """
    steps, lr = WEAK_TRAIN[kind]
    sched = make_schedule(kind)
    model = score.MlpScoreModel(128, seed=7)
    model, _ = score.train_dsm(
        model, wide_pair_data, sched, score.TrainConfig(steps=steps, lr=lr, seed=7)
    )
    fn = model.score_fn(sched)
    grid = list(range(0, sched.N + 1, 50))
    ens = reverse.simulate_reverse(fn, sched, grid, [31], M=2000, d=128)
    rev_ct = diag.reverse_autocorr(ens, sched.N)
    closed = forward.forward_autocorr_closed_form(sched, ens.record_steps, "from_T")
    guard = np.where(rev_ct.stderr > 0, rev_ct.stderr, np.inf)
    below = rev_ct.values < closed.values - 5.0 * rev_ct.stderr
    zs = (closed.values - rev_ct.values) / guard
    band = any(bool(below[i]) and bool(below[i + 1]) for i in range(below.size - 1))
    assert band, f"no contiguous deficit band, max z = {float(np.nanmax(zs)):.2f}"


# ------------------------------------------------------- estimator calibration


def test_ks_ratio_calibrated_on_null_and_forward_terminal():
    band = 1.96 * np.sqrt(0.05 * 0.95 / 64)
    rng = np.random.default_rng(8)
    out = diag.ks_ratio(rng.standard_normal((10_000, 64)))
    assert abs(out["ratio"] - 0.05) <= band, out["ratio"]

    ds = data.generate(data.symmetric_pair_gm(64, 0.9), 10_000, seed=15)
    sched = make_schedule("linear")
    ens = forward.simulate_forward(ds, sched, [0, sched.N], seed=16)
    out = diag.ks_ratio(ens.state_at(sched.N))
    assert abs(out["ratio"] - 0.05) <= band, out["ratio"]


def test_kid_matches_brute_force_pairwise_sums():
    rng = np.random.default_rng(9)
    X = rng.standard_normal((50, 3))
    Y = rng.standard_normal((50, 3))
    rep = diag.kid(X, Y, n_boot=2, boot_seed=0)
    d = 3
    kxx = sum((X[i] @ X[j] / d + 1.0) ** 3
              for i in range(50) for j in range(50) if i != j)
    kyy = sum((Y[i] @ Y[j] / d + 1.0) ** 3
              for i in range(50) for j in range(50) if i != j)
    kxy = sum((X[i] @ Y[j] / d + 1.0) ** 3
              for i in range(50) for j in range(50))
    brute = kxx / (50 * 49) + kyy / (50 * 49) - 2.0 * kxy / (50 * 50)
    assert abs(rep.mmd2 - brute) < 1e-10


def test_kid_is_exactly_symmetric():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((60, 5))
    Y = rng.standard_normal((45, 5))
    a = diag.kid(X, Y, n_boot=5, boot_seed=3)
    b = diag.kid(Y, X, n_boot=5, boot_seed=3)
    assert a.mmd2 == b.mmd2
    assert a.stderr == b.stderr


def test_kid_null_within_three_stderr():
    for seed in (101, 202, 303):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((500, 8))
        Y = rng.standard_normal((500, 8))
        rep = diag.kid(X, Y, n_boot=20, boot_seed=seed)
        assert abs(rep.mmd2) < 3.0 * rep.stderr, (seed, rep.mmd2, rep.stderr)


# ------------------------------------------------------------- turn-step scan

# Frozen testbed for the scan: a d=128 mixture with a rare mode (weight
# 0.08) sitting roughly 33 combined-sigma from the bulk.  A model of
# this strength cannot place the right amount of mass there from a
# noise start, so the noise-initialized baseline carries a large
# missing-mode discrepancy at every turn step, while short round trips
# inherit membership from their source rows and stay near zero until
# the forward leg has erased it.  That keeps the flat region, the bend,
# and the turn-vs-noise gap simultaneously resolvable at M=2000.
UTURN_D = 128
UTURN_RARE_W = 0.08
UTURN_RARE_MEAN = 2.7
UTURN_TRAIN_STEPS = 6000
UTURN_TRAIN_LR = 2e-2


def _uturn_spec():
    w, c = UTURN_RARE_W, UTURN_RARE_MEAN
    ch = c * w / (1.0 - w)
    v = 1.0 - (w * c * c + (1.0 - w) * ch * ch)
    return data.GaussianMixtureSpec(
        weights=np.array([1.0 - w, w]),
        means=np.stack([np.full(UTURN_D, -ch), np.full(UTURN_D, c)]),
        variances=np.array([v, v]),
    )


@pytest.fixture(scope="module")
def turn_scan():
    spec = _uturn_spec()
    sched = make_schedule("linear")
    ds = data.generate(spec, 4000, seed=1)
    holdout = data.generate(spec, 2000, seed=101)
    model = score.MlpScoreModel(UTURN_D, seed=7)
    model, _ = score.train_dsm(
        model, ds, sched,
        score.TrainConfig(steps=UTURN_TRAIN_STEPS, lr=UTURN_TRAIN_LR, seed=7),
    )
    t0 = time.monotonic()
    scan = uturn_scan(ds, holdout, sched, model.score_fn(sched), M=2000, seed=123)
    elapsed = time.monotonic() - t0
    return scan, sched, elapsed


def test_turn_scan_runtime_under_ten_minutes(turn_scan):
    _, _, elapsed = turn_scan
    assert elapsed < 600.0, elapsed


def test_turn_scan_kid_non_decreasing_within_noise(turn_scan):
    scan, sched, _ = turn_scan
    summary = scan_summary(scan, sched)
    assert summary["monotone_worst_drop_z"] <= 2.0, summary


def test_turn_scan_detects_knee_in_deep_noise_region(turn_scan):
    scan, sched, _ = turn_scan
    summary = scan_summary(scan, sched)
    assert summary["knee_step"] is not None, summary
    assert summary["knee_one_minus_phi"] > 0.98, summary


def test_turn_start_beats_noise_start_at_knee(turn_scan):
    scan, sched, _ = turn_scan
    summary = scan_summary(scan, sched)
    assert summary["knee_step"] is not None, summary
    assert summary["gap_at_knee_z"] > 3.0, summary


# ------------------------------------------------------------- reproducibility


def _byte_map(run_dir):
    out = {}
    for path in sorted(Path(run_dir).rglob("*")):
        if path.is_file() and path.suffix in (".csv", ".utd1"):
            out[str(path.relative_to(run_dir))] = path.read_bytes()
    return out


def test_subcommand_reruns_are_byte_identical(tmp_path):
    """Same config, same seeds: every CSV and sample file matches exactly."""
    rng = np.random.default_rng(0)
    x_path = tmp_path / "x.utd1"
    y_path = tmp_path / "y.utd1"
    data.save_binary(rng.standard_normal((150, 3)), x_path)
    data.save_binary(rng.standard_normal((150, 3)), y_path)

    base = {
        "dataset": {"kind": "symmetric_pair", "M": 300, "dim": 2, "m0": 0.9,
                    "normalize": True},
        "schedule": {"kind": "linear", "N": 200},
        "sim": {"M": 100, "record_every": 50},
    }
    jobs = {
        "forward": {},
        "train-score": {"score": {"mode": "train", "steps": 30, "hidden": 16,
                                  "features": 4}},
        "reverse": {},
        "diagnose": {"diagnostics": {"selection": ["autocorr", "half_decay", "ks", "kid"]}},
        "uturn-scan": {"uturn": {"turn_steps": [1, 100, 200], "M": 150,
                                 "holdout_M": 150}},
        "kid": {},
    }
    for name, extra in jobs.items():
        raw = json.loads(json.dumps(base))
        for key, section in extra.items():
            raw.setdefault(key, {}).update(section)
        cfg_path = tmp_path / f"{name}.json"
        cfg_path.write_text(json.dumps(raw))
        maps = []
        for attempt in ("a", "b"):
            out_root = tmp_path / f"{name}-{attempt}"
            argv = [name, "--config", str(cfg_path), "--out", str(out_root)]
            if name == "kid":
                argv += [str(x_path), str(y_path)]
            assert cli.main(argv) == 0, name
            (run_dir,) = [p for p in out_root.iterdir() if p.is_dir()]
            maps.append(_byte_map(run_dir))
        first, second = maps
        assert first.keys() == second.keys(), name
        for rel in first:
            assert first[rel] == second[rel], (name, rel)
