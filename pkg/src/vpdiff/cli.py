"""Command line driver.

Subcommands: forward, train-score, reverse, diagnose, kid, uturn-scan,
report, selftest.  Every run reads one JSON config (all fields optional,
defaults below), applies --set dotted overrides, validates everything at
once, then writes its artifacts into a fresh timestamped directory under
--out together with a manifest carrying the config snapshot, library
versions, seeds, and sha256 hashes of every artifact.  The manifest is
written up front with status "incomplete" and finalized on success, so
interrupted runs are recognizable.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 selftest failure.

All randomness comes from config seeds; nothing is seeded from the
clock, so re-running a subcommand with the same config reproduces every
CSV byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError, VpdiffError

_SCHEDULE_KINDS = ("linear", "sigmoid", "cosine")
_DATASET_KINDS = ("symmetric_pair", "gm", "two_moons", "checkerboard", "tiny_glyphs_8x8", "csv", "binary")
_SCORE_MODES = ("analytic", "train", "checkpoint")
_SAMPLERS = ("euler", "ancestral")
_FEATURE_MODES = ("identity", "random_projection", "external_file")
_DIAG_SELECTION = ("autocorr", "half_decay", "score_norms", "ks", "kid")


@dataclass
class DatasetConfig:
    kind: str = "symmetric_pair"
    M: int = 2000
    dim: int = 2
    m0: float = 0.9
    weights: list = None
    means: list = None
    variances: list = None
    path: str = None
    jitter: float = 0.15
    normalize: bool = None  # default depends on kind


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    b1: float = 1e-4
    b2: float = 0.02
    N: int = 1000
    delta: float = 1.0


@dataclass
class ScoreConfig:
    mode: str = "analytic"
    hidden: int = 128
    features: int = 8
    activation: str = "tanh"
    steps: int = 2000
    batch: int = 128
    lr: float = 2e-2
    momentum: float = 0.9
    lr_decay: float = 0.1
    checkpoint: str = None


@dataclass
class SimConfig:
    M: int = 2000
    record_every: int = 50
    record_steps: list = None
    sampler: str = "euler"
    substeps: int = 1


@dataclass
class DiagnosticsConfig:
    selection: list = field(default_factory=lambda: list(_DIAG_SELECTION))
    alpha: float = 0.05
    anchors: list = None
    feature_mode: str = "identity"
    feature_dim: int = None
    feature_seed: int = 0
    feature_path: str = None
    kid_boot: int = 10


@dataclass
class UTurnConfig:
    turn_steps: list = None
    M: int = None
    holdout_M: int = 2000


@dataclass
class SeedsConfig:
    data: int = 1
    holdout: int = 101
    model: int = 7
    train: int = 7
    sim: int = 31
    scan: int = 123


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    uturn: UTurnConfig = field(default_factory=UTurnConfig)
    seeds: SeedsConfig = field(default_factory=SeedsConfig)
    out: str = "runs"


_SECTIONS = {
    "dataset": DatasetConfig,
    "schedule": ScheduleConfig,
    "score": ScoreConfig,
    "sim": SimConfig,
    "diagnostics": DiagnosticsConfig,
    "uturn": UTurnConfig,
    "seeds": SeedsConfig,
}


def config_from_dict(raw):
    """Build and validate an ExperimentConfig, reporting every violation."""
    violations = []
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key == "out":
            if not isinstance(value, str):
                violations.append(f"out: expected string, got {value!r}")
            else:
                cfg.out = value
            continue
        if key not in _SECTIONS:
            violations.append(f"unknown section {key!r}")
            continue
        if not isinstance(value, dict):
            violations.append(f"{key}: expected an object, got {value!r}")
            continue
        section = getattr(cfg, key)
        for k, v in value.items():
            if not hasattr(section, k):
                violations.append(f"{key}.{k}: unknown key")
            else:
                setattr(section, k, v)
    violations.extend(_validate(cfg))
    if violations:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(violations))
    return cfg


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _validate(cfg):
    v = []
    ds, sc, mo, sim, dg, ut, se = (
        cfg.dataset, cfg.schedule, cfg.score, cfg.sim, cfg.diagnostics, cfg.uturn, cfg.seeds,
    )
    if ds.kind not in _DATASET_KINDS:
        v.append(f"dataset.kind: {ds.kind!r} not in {_DATASET_KINDS}")
    if not _is_int(ds.M) or ds.M < 2:
        v.append(f"dataset.M: need integer >= 2, got {ds.M!r}")
    if ds.kind == "symmetric_pair":
        if not _is_int(ds.dim) or ds.dim < 1:
            v.append(f"dataset.dim: need integer >= 1, got {ds.dim!r}")
        if not isinstance(ds.m0, (int, float)) or not 0.0 < ds.m0 < 1.0:
            v.append(f"dataset.m0: need a value in (0, 1), got {ds.m0!r}")
    if ds.kind == "gm":
        if ds.weights is None or ds.means is None or ds.variances is None:
            v.append("dataset: gm kind needs weights, means and variances")
    if ds.kind in ("csv", "binary") and not ds.path:
        v.append("dataset.path: required for file-backed datasets")
    if sc.kind not in _SCHEDULE_KINDS:
        v.append(f"schedule.kind: {sc.kind!r} not in {_SCHEDULE_KINDS}")
    if not _is_int(sc.N) or sc.N < 2:
        v.append(f"schedule.N: need integer >= 2, got {sc.N!r}")
    for name in ("b1", "b2"):
        val = getattr(sc, name)
        if not isinstance(val, (int, float)) or not 0.0 < val <= 0.999:
            v.append(f"schedule.{name}: need a rate in (0, 0.999], got {val!r}")
    if not isinstance(sc.delta, (int, float)) or sc.delta <= 0:
        v.append(f"schedule.delta: need a positive step size, got {sc.delta!r}")
    if mo.mode not in _SCORE_MODES:
        v.append(f"score.mode: {mo.mode!r} not in {_SCORE_MODES}")
    if mo.mode == "analytic" and ds.kind not in ("symmetric_pair", "gm"):
        v.append(f"score.mode analytic needs a mixture dataset, got kind {ds.kind!r}")
    if mo.mode == "checkpoint" and not mo.checkpoint:
        v.append("score.checkpoint: required when score.mode is 'checkpoint'")
    if not _is_int(mo.hidden) or mo.hidden < 1:
        v.append(f"score.hidden: need integer >= 1, got {mo.hidden!r}")
    if not _is_int(mo.features) or mo.features < 2 or mo.features % 2:
        v.append(f"score.features: need a positive even integer, got {mo.features!r}")
    if mo.activation not in ("tanh", "linear"):
        v.append(f"score.activation: {mo.activation!r} not in ('tanh', 'linear')")
    if not _is_int(mo.steps) or mo.steps < 0:
        v.append(f"score.steps: need integer >= 0, got {mo.steps!r}")
    if not _is_int(mo.batch) or mo.batch < 1:
        v.append(f"score.batch: need integer >= 1, got {mo.batch!r}")
    if not isinstance(mo.lr, (int, float)) or mo.lr <= 0:
        v.append(f"score.lr: need a positive rate, got {mo.lr!r}")
    if not _is_int(sim.M) or sim.M < 2:
        v.append(f"sim.M: need integer >= 2, got {sim.M!r}")
    if not _is_int(sim.record_every) or sim.record_every < 1:
        v.append(f"sim.record_every: need integer >= 1, got {sim.record_every!r}")
    if sim.record_steps is not None:
        if not isinstance(sim.record_steps, list) or not all(_is_int(x) for x in sim.record_steps):
            v.append(f"sim.record_steps: need a list of integers, got {sim.record_steps!r}")
        elif any(x < 0 or x > sc.N for x in sim.record_steps if _is_int(sc.N) and _is_int(x)):
            v.append(f"sim.record_steps: entries outside [0, {sc.N}]")
    if sim.sampler not in _SAMPLERS:
        v.append(f"sim.sampler: {sim.sampler!r} not in {_SAMPLERS}")
    if not _is_int(sim.substeps) or sim.substeps < 1:
        v.append(f"sim.substeps: need integer >= 1, got {sim.substeps!r}")
    if not isinstance(dg.alpha, (int, float)) or not 0.0 < dg.alpha < 1.0:
        v.append(f"diagnostics.alpha: need a level in (0, 1), got {dg.alpha!r}")
    if not isinstance(dg.selection, list) or any(s not in _DIAG_SELECTION for s in dg.selection):
        v.append(f"diagnostics.selection: entries must come from {_DIAG_SELECTION}")
    if dg.feature_mode not in _FEATURE_MODES:
        v.append(f"diagnostics.feature_mode: {dg.feature_mode!r} not in {_FEATURE_MODES}")
    if dg.feature_mode == "random_projection" and (not _is_int(dg.feature_dim) or dg.feature_dim < 1):
        v.append("diagnostics.feature_dim: need integer >= 1 for random_projection")
    if not _is_int(dg.kid_boot) or dg.kid_boot < 2:
        v.append(f"diagnostics.kid_boot: need integer >= 2, got {dg.kid_boot!r}")
    if ut.turn_steps is not None:
        if not isinstance(ut.turn_steps, list) or not all(_is_int(x) for x in ut.turn_steps):
            v.append(f"uturn.turn_steps: need a list of integers, got {ut.turn_steps!r}")
        elif _is_int(sc.N) and any(x < 1 or x > sc.N for x in ut.turn_steps):
            v.append(f"uturn.turn_steps: entries outside [1, {sc.N}]")
    if ut.M is not None and (not _is_int(ut.M) or ut.M < 2):
        v.append(f"uturn.M: need integer >= 2 or null, got {ut.M!r}")
    if not _is_int(ut.holdout_M) or ut.holdout_M < 2:
        v.append(f"uturn.holdout_M: need integer >= 2, got {ut.holdout_M!r}")
    for name in ("data", "holdout", "model", "train", "sim", "scan"):
        val = getattr(se, name)
        if not _is_int(val) or val < 0:
            v.append(f"seeds.{name}: need a non-negative integer, got {val!r}")
    return v


def _apply_override(raw, assignment):
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {part} is not an object")
    node[parts[-1]] = value


def load_config(path, overrides):
    raw = {}
    if path:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    for assignment in overrides or []:
        _apply_override(raw, assignment)
    return config_from_dict(raw)


# ---------------------------------------------------------------- run plumbing


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions():
    import numpy
    import scipy

    from . import __version__

    return {
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "vpdiff": __version__,
    }


def _make_run_dir(base, subcommand):
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = base / f"{subcommand}-{stamp}"
    suffix = 0
    while candidate.exists():
        suffix += 1
        candidate = base / f"{subcommand}-{stamp}-{suffix}"
    candidate.mkdir()
    return candidate


def _write_manifest(run_dir, manifest):
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _finalize_manifest(run_dir, manifest, summary):
    artifacts = {}
    for path in sorted(run_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            artifacts[str(path.relative_to(run_dir))] = _sha256(path)
    manifest["artifacts"] = artifacts
    manifest["summary"] = summary
    manifest["status"] = "complete"
    _write_manifest(run_dir, manifest)


def _record_grid(sim_cfg, N):
    if sim_cfg.record_steps:
        return sorted(set(int(x) for x in sim_cfg.record_steps))
    grid = set(range(0, N + 1, sim_cfg.record_every))
    grid.add(N)
    return sorted(grid)


def _build_dataset(cfg, seed, M=None, which="data"):
    import numpy as np

    from . import data as data_mod

    ds_cfg = cfg.dataset
    M = M or ds_cfg.M
    spec = None
    if ds_cfg.kind == "symmetric_pair":
        spec = data_mod.symmetric_pair_gm(ds_cfg.dim, ds_cfg.m0)
        dataset = data_mod.generate(spec, M, seed)
    elif ds_cfg.kind == "gm":
        spec = data_mod.GaussianMixtureSpec(
            weights=np.asarray(ds_cfg.weights),
            means=np.asarray(ds_cfg.means),
            variances=np.asarray(ds_cfg.variances),
        )
        dataset = data_mod.generate(spec, M, seed)
    elif ds_cfg.kind in ("two_moons", "checkerboard", "tiny_glyphs_8x8"):
        dataset = data_mod.generate(ds_cfg.kind, M, seed)
    elif ds_cfg.kind == "csv":
        dataset = data_mod.Dataset(samples=data_mod.load_csv(ds_cfg.path), name=ds_cfg.path)
    elif ds_cfg.kind == "binary":
        dataset = data_mod.Dataset(samples=data_mod.load_binary(ds_cfg.path), name=ds_cfg.path)
    else:
        raise ConfigError(f"dataset.kind {ds_cfg.kind!r} not supported")
    do_norm = ds_cfg.normalize
    if do_norm is None:
        do_norm = ds_cfg.kind not in ("symmetric_pair", "gm")
    if do_norm:
        dataset = data_mod.normalize(dataset)
    return dataset, spec


def _build_score(cfg, dataset, spec, schedule, run_dir=None):
    from . import score as score_mod

    sc = cfg.score
    if sc.mode == "analytic":
        if spec is None:
            raise ConfigError("analytic score needs a mixture dataset spec")
        return score_mod.gm_score_fn(spec, schedule), None, None
    if sc.mode == "checkpoint":
        model = score_mod.load_checkpoint(sc.checkpoint)
        return model.score_fn(schedule), model, None
    model = score_mod.MlpScoreModel(
        dataset.d, hidden=sc.hidden, features=sc.features,
        activation=sc.activation, seed=cfg.seeds.model,
    )
    train_cfg = score_mod.TrainConfig(
        steps=sc.steps, batch=sc.batch, lr=sc.lr,
        momentum=sc.momentum, lr_decay=sc.lr_decay, seed=cfg.seeds.train,
    )
    model, trace = score_mod.train_dsm(model, dataset, schedule, train_cfg)
    if run_dir is not None:
        score_mod.save_checkpoint(model, run_dir / "checkpoint.bin")
        score_mod.save_loss_trace(trace, run_dir / "loss_trace.csv")
    return model.score_fn(schedule), model, trace


# ------------------------------------------------------------------- commands


def cmd_forward(cfg, run_dir, plots):
    from . import data as data_mod
    from .forward import empirical_autocorr, forward_autocorr_closed_form, simulate_forward
    from .schedule import make_schedule

    sched = make_schedule(**asdict(cfg.schedule))
    dataset, _ = _build_dataset(cfg, cfg.seeds.data)
    curves = sched.mean_std_curves()
    curves.to_csv(run_dir / "schedule_curves.csv")
    grid = _record_grid(cfg.sim, sched.N)
    ens = simulate_forward(dataset, sched, grid, cfg.seeds.sim)
    ens.save(run_dir / "forward_ensemble")
    data_mod.save_binary(dataset.samples, run_dir / "dataset.utd1")
    c0 = empirical_autocorr(ens, 0)
    ct = empirical_autocorr(ens, sched.N)
    c0.to_csv(run_dir / "autocorr_from_zero.csv")
    ct.to_csv(run_dir / "autocorr_from_T.csv")
    steps = ens.record_steps
    forward_autocorr_closed_form(sched, steps, "from_zero").to_csv(
        run_dir / "autocorr_from_zero_closed.csv"
    )
    forward_autocorr_closed_form(sched, steps, "from_T").to_csv(
        run_dir / "autocorr_from_T_closed.csv"
    )
    if plots:
        from .plots import plot_curve_table, plot_series

        plot_curve_table(curves, run_dir / "schedule_curves.svg", title=sched.kind)
        plot_series([c0, ct], run_dir / "autocorr.svg", title=f"{sched.kind} chain correlations")
    return {
        "schedule": sched.kind,
        "M": dataset.M,
        "d": dataset.d,
        "recorded_steps": len(grid),
        "final_mean_coeff": float(curves.mean_coeff[-1]),
    }


def cmd_train_score(cfg, run_dir, plots):
    from . import score as score_mod
    from .schedule import make_schedule

    if cfg.score.mode == "analytic":
        raise ConfigError("train-score needs score.mode 'train' (or 'checkpoint' to fine-tune)")
    sched = make_schedule(**asdict(cfg.schedule))
    dataset, spec = _build_dataset(cfg, cfg.seeds.data)
    if cfg.score.mode == "checkpoint":
        model = score_mod.load_checkpoint(cfg.score.checkpoint)
        train_cfg = score_mod.TrainConfig(
            steps=cfg.score.steps, batch=cfg.score.batch, lr=cfg.score.lr,
            momentum=cfg.score.momentum, lr_decay=cfg.score.lr_decay, seed=cfg.seeds.train,
        )
        model, trace = score_mod.train_dsm(model, dataset, sched, train_cfg)
        score_mod.save_checkpoint(model, run_dir / "checkpoint.bin")
        score_mod.save_loss_trace(trace, run_dir / "loss_trace.csv")
    else:
        _, model, trace = _build_score(cfg, dataset, spec, sched, run_dir)
    summary = {"steps": len(trace), "final_loss": trace[-1] if trace else None}
    if spec is not None:
        summary["weighted_rel_l2"] = score_mod.weighted_score_error(model, spec, sched)
    if plots and trace:
        from .series import DiagnosticSeries
        from .plots import plot_series

        import numpy as np

        loss_series = DiagnosticSeries("train_loss", np.arange(len(trace)), np.asarray(trace))
        plot_series([loss_series], run_dir / "loss_trace.svg", logy=False)
    return summary


def cmd_reverse(cfg, run_dir, plots):
    from . import data as data_mod
    from .reverse import simulate_reverse
    from .schedule import make_schedule

    sched = make_schedule(**asdict(cfg.schedule))
    dataset, spec = _build_dataset(cfg, cfg.seeds.data)
    score_fn, _, _ = _build_score(cfg, dataset, spec, sched, run_dir)
    grid = _record_grid(cfg.sim, sched.N)
    ens = simulate_reverse(
        score_fn, sched, grid, cfg.seeds.sim,
        M=cfg.sim.M, d=dataset.d, sampler=cfg.sim.sampler, substeps=cfg.sim.substeps,
    )
    ens.save(run_dir / "reverse_ensemble")
    synth = ens.kept_state_at(0)
    data_mod.save_binary(synth, run_dir / "samples.utd1")
    data_mod.save_csv(synth, run_dir / "samples.csv")
    if plots:
        from .diagnostics import reverse_autocorr
        from .plots import plot_series

        plot_series(
            [reverse_autocorr(ens, sched.N)],
            run_dir / "reverse_autocorr.svg",
            title=f"{sched.kind} reverse-run correlation",
        )
    return {
        "M": ens.M,
        "d": ens.d,
        "excluded": len(ens.excluded),
        "sampler": cfg.sim.sampler,
        "substeps": cfg.sim.substeps,
    }


def cmd_diagnose(cfg, run_dir, plots):
    import numpy as np

    from . import diagnostics as diag
    from .forward import empirical_autocorr, forward_autocorr_closed_form, simulate_forward
    from .reverse import simulate_reverse
    from .schedule import make_schedule

    sched = make_schedule(**asdict(cfg.schedule))
    dataset, spec = _build_dataset(cfg, cfg.seeds.data)
    score_fn, _, _ = _build_score(cfg, dataset, spec, sched, run_dir)
    grid = _record_grid(cfg.sim, sched.N)
    fwd = simulate_forward(dataset, sched, grid, cfg.seeds.sim)
    rev = simulate_reverse(
        score_fn, sched, grid, [cfg.seeds.sim, 1],
        M=cfg.sim.M, d=dataset.d, sampler=cfg.sim.sampler, substeps=cfg.sim.substeps,
    )
    selection = cfg.diagnostics.selection
    summary = {"schedule": sched.kind, "selection": list(selection)}
    series_for_plot = []
    if "autocorr" in selection:
        ct_emp = empirical_autocorr(fwd, sched.N)
        ct_emp.to_csv(run_dir / "forward_autocorr_from_T.csv")
        forward_autocorr_closed_form(sched, fwd.record_steps, "from_T").to_csv(
            run_dir / "forward_autocorr_from_T_closed.csv"
        )
        rev_ct = diag.reverse_autocorr(rev, sched.N)
        rev_ct.to_csv(run_dir / "reverse_autocorr_from_T.csv")
        series_for_plot = [ct_emp, rev_ct]
    anchors = cfg.diagnostics.anchors
    if anchors is None:
        quarters = [sched.N // 4, sched.N // 2, (3 * sched.N) // 4, sched.N]
        anchors = sorted({int(grid[int(np.argmin(np.abs(np.asarray(grid) - q)))]) for q in quarters})
        anchors = [a for a in anchors if a > 0]
    if "half_decay" in selection:
        curves = [diag.reverse_autocorr(rev, a) for a in anchors]
        delta = diag.half_decay_time(curves)
        delta.to_csv(run_dir / "half_decay.csv")
        summary["half_decay_censored"] = delta.metadata["censored"]
    if "score_norms" in selection:
        norms = diag.score_norm_curves(score_fn, fwd)
        norms["S"].to_csv(run_dir / "score_norm_S.csv")
        norms["M"].to_csv(run_dir / "score_norm_M.csv")
    if "ks" in selection:
        report = diag.ks_ratio(fwd.state_at(sched.N), alpha=cfg.diagnostics.alpha)
        report.pop("p_values")
        summary["ks_forward_at_T"] = report
    if "kid" in selection:
        holdout = _build_dataset(cfg, cfg.seeds.holdout, M=cfg.sim.M, which="holdout")[0]
        fm = cfg.diagnostics
        ref = diag.feature_map(holdout.samples, fm.feature_mode, fm.feature_dim, fm.feature_seed,
                               fm.feature_path)
        gen = diag.feature_map(rev.kept_state_at(0), fm.feature_mode, fm.feature_dim,
                               fm.feature_seed, fm.feature_path)
        report = diag.kid(ref, gen, n_boot=fm.kid_boot, boot_seed=cfg.seeds.scan)
        summary["kid_generated_vs_holdout"] = report.as_dict()
    with open(run_dir / "diagnostics.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if plots and series_for_plot:
        from .plots import plot_series

        plot_series(series_for_plot, run_dir / "autocorr_compare.svg",
                    title=f"{sched.kind} forward vs reverse correlation")
    return summary


def cmd_kid(cfg, run_dir, plots, x_path, y_path):
    from . import data as data_mod
    from . import diagnostics as diag

    def _load(path):
        p = Path(path)
        if p.suffix == ".csv":
            return data_mod.load_csv(p)
        return data_mod.load_binary(p)

    X = _load(x_path)
    Y = _load(y_path)
    fm = cfg.diagnostics
    fx = diag.feature_map(X, fm.feature_mode, fm.feature_dim, fm.feature_seed, fm.feature_path)
    fy = diag.feature_map(Y, fm.feature_mode, fm.feature_dim, fm.feature_seed, fm.feature_path)
    report = diag.kid(fx, fy, n_boot=fm.kid_boot, boot_seed=cfg.seeds.scan)
    payload = report.as_dict()
    payload["x"] = str(x_path)
    payload["y"] = str(y_path)
    with open(run_dir / "kid.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"kid: {report.mmd2:.6g} +- {report.stderr:.3g} (M_x={report.M_x}, M_y={report.M_y})")
    return payload


def cmd_uturn_scan(cfg, run_dir, plots):
    from .schedule import make_schedule
    from .uturn import scan_summary, uturn_scan

    sched = make_schedule(**asdict(cfg.schedule))
    dataset, spec = _build_dataset(cfg, cfg.seeds.data)
    holdout, _ = _build_dataset(cfg, cfg.seeds.holdout, M=cfg.uturn.holdout_M, which="holdout")
    score_fn, _, _ = _build_score(cfg, dataset, spec, sched, run_dir)
    scan = uturn_scan(
        dataset, holdout, sched, score_fn,
        turn_steps=cfg.uturn.turn_steps,
        M=cfg.uturn.M or min(cfg.sim.M, dataset.M),
        seed=cfg.seeds.scan,
        feature_mode=cfg.diagnostics.feature_mode,
        feature_dim=cfg.diagnostics.feature_dim,
        feature_seed=cfg.diagnostics.feature_seed,
        n_boot=cfg.diagnostics.kid_boot,
        sampler=cfg.sim.sampler,
        substeps=cfg.sim.substeps,
    )
    scan.to_csv(run_dir / "scan.csv")
    summary = scan_summary(scan, sched)
    payload = scan.as_dict()
    payload["judgement"] = summary
    with open(run_dir / "scan.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if plots:
        from .plots import plot_scan

        plot_scan(scan, run_dir / "scan.svg", title=f"{sched.kind} turn-step scan")
    return summary


def cmd_report(out_dir):
    out = Path(out_dir)
    if not out.is_dir():
        raise ConfigError(f"--out directory does not exist: {out}")
    rows = []
    bad = 0
    for manifest_path in sorted(out.glob("*/manifest.json")):
        run_dir = manifest_path.parent
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        verified = 0
        mismatched = []
        for rel, digest in manifest.get("artifacts", {}).items():
            target = run_dir / rel
            if not target.is_file() or _sha256(target) != digest:
                mismatched.append(rel)
            else:
                verified += 1
        rows.append({
            "run": run_dir.name,
            "subcommand": manifest.get("subcommand"),
            "status": manifest.get("status"),
            "verified": verified,
            "mismatched": mismatched,
            "summary": manifest.get("summary", {}),
        })
        bad += len(mismatched)
        if manifest.get("status") != "complete":
            bad += 1
    report = {"out": str(out), "runs": rows, "problems": bad}
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for row in rows:
        state = "ok" if not row["mismatched"] and row["status"] == "complete" else "PROBLEM"
        print(f"{row['run']}: {row['subcommand']} [{row['status']}] "
              f"{row['verified']} artifacts verified {state}")
    print(f"report: {len(rows)} runs, {bad} problems")
    return 3 if bad else 0


# ------------------------------------------------------------------- selftest


def _selftest_suites():
    import numpy as np

    from . import data as data_mod
    from . import diagnostics as diag
    from . import score as score_mod
    from .forward import jump_sample, simulate_chain
    from .reverse import simulate_reverse
    from .schedule import cosine_schedule, linear_schedule, sigmoid_schedule

    def suite_schedule():
        checks = 0
        lin = linear_schedule()
        assert abs(lin.beta_at(500) - 0.0100501) < 1e-7
        checks += 1
        ph = lin.phi(1000, 0)
        assert abs(ph - lin.phi(1000, 400) * lin.phi(400, 0)) <= 1e-18
        checks += 1
        for sched in (lin, sigmoid_schedule(), cosine_schedule()):
            curves = sched.mean_std_curves()
            assert np.all(np.abs(curves.mean_coeff**2 + curves.std_coeff**2 - 1.0) < 1e-12)
            checks += 1
        return checks

    def suite_forward_kernel():
        rng = np.random.default_rng(0)
        lin = linear_schedule()
        x0 = np.ones((20000, 2))
        xt = jump_sample(x0, 500, lin, rng)
        ph = lin.phi(500, 0)
        assert abs(xt.mean() - np.sqrt(ph)) < 5.0 * np.sqrt((1 - ph) / xt.size)
        assert abs(xt.var() - (1 - ph)) < 5.0 * (1 - ph) * np.sqrt(2.0 / xt.size)
        vals = simulate_chain(x0[:200], lin, [0, 1000], seed=1)
        assert np.allclose(vals[:, 0, :], 1.0)
        assert abs(vals[:, 1, :].var() - 1.0) < 0.2
        return 4

    def suite_dsm_identity():
        rng = np.random.default_rng(1)
        lin = linear_schedule()
        spec = data_mod.symmetric_pair_gm(2, 0.9)
        x0 = spec.sample(4000, rng)
        ns = rng.integers(1, 1001, 4000)
        z = rng.standard_normal(x0.shape)
        ph = lin._P[ns][:, None]
        xt = np.sqrt(ph) * x0 + np.sqrt(1 - ph) * z
        target = score_mod.dsm_target(xt, x0, ns, lin)
        lam = (1.0 - ph.ravel())[:, None]
        assert np.allclose(lam * np.sum(target**2, axis=1, keepdims=True),
                           np.sum(z**2, axis=1, keepdims=True), rtol=1e-9, atol=1e-9)
        mean_weighted = float(np.mean(lam.ravel() * np.sum(target**2, axis=1)))
        assert abs(mean_weighted - 2.0) < 0.15
        return 2

    def suite_score_oracle():
        lin = linear_schedule()
        spec = data_mod.symmetric_pair_gm(2, 0.9)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((20, 2))

        def logp(pts, n):
            ph = lin.phi(n, 0)
            m = np.sqrt(ph) * spec.means
            v = ph * spec.variances + (1 - ph)
            comp = []
            for k in range(spec.K):
                sq = np.sum((pts - m[k]) ** 2, axis=1)
                comp.append(np.log(spec.weights[k]) - 0.5 * sq / v[k] - np.log(2 * np.pi * v[k]))
            comp = np.stack(comp)
            mx = comp.max(axis=0)
            return mx + np.log(np.exp(comp - mx).sum(axis=0))

        for n in (100, 600):
            s = score_mod.gm_score(spec, x, n, lin)
            h = 1e-6
            for j in range(2):
                dx = np.zeros(2)
                dx[j] = h
                fd = (logp(x + dx, n) - logp(x - dx, n)) / (2 * h)
                assert np.max(np.abs(fd - s[:, j])) < 1e-5 * max(1.0, np.max(np.abs(s)))
        return 4

    def suite_kid():
        rng = np.random.default_rng(3)
        X = rng.standard_normal((30, 4))
        Y = rng.standard_normal((35, 4))
        rep = diag.kid(X, Y, n_boot=3, boot_seed=0)
        d = 4
        kxx = kyy = kxy = 0.0
        for i in range(30):
            for j in range(30):
                if i != j:
                    kxx += (X[i] @ X[j] / d + 1) ** 3
        for i in range(35):
            for j in range(35):
                if i != j:
                    kyy += (Y[i] @ Y[j] / d + 1) ** 3
        for i in range(30):
            for j in range(35):
                kxy += (X[i] @ Y[j] / d + 1) ** 3
        brute = kxx / (30 * 29) + kyy / (35 * 34) - 2 * kxy / (30 * 35)
        assert abs(rep.mmd2 - brute) < 1e-10
        rep2 = diag.kid(Y, X, n_boot=3, boot_seed=0)
        assert rep.mmd2 == rep2.mmd2 and rep.stderr == rep2.stderr
        return 2

    def suite_ks():
        rng = np.random.default_rng(4)
        X = rng.standard_normal((2000, 32))
        out = diag.ks_ratio(X)
        assert out["ratio"] <= 0.05 + 3 * np.sqrt(0.05 * 0.95 / 32)
        shifted = X + 1.0
        assert diag.ks_ratio(shifted)["ratio"] == 1.0
        return 2

    def suite_reverse():
        lin = linear_schedule()
        spec = data_mod.symmetric_pair_gm(2, 0.9)
        fn = score_mod.gm_score_fn(spec, lin)
        ens = simulate_reverse(fn, lin, [0, 500, 1000], seed=5, M=300, d=2)
        x0 = ens.state_at(0)
        assert np.all(np.isfinite(x0))
        assert abs(float(np.mean(x0**2)) - 1.0) < 0.2
        assert not ens.excluded
        return 3

    def suite_checkpoint(tmp=None):
        import tempfile

        model = score_mod.MlpScoreModel(2, hidden=16, features=4, seed=0)
        with tempfile.TemporaryDirectory() as td:
            path = Path(td) / "m.bin"
            score_mod.save_checkpoint(model, path)
            loaded = score_mod.load_checkpoint(path)
        for key in model.params:
            assert np.allclose(model.params[key], loaded.params[key], atol=1e-6)
        return 1

    return {
        "schedule": suite_schedule,
        "forward_kernel": suite_forward_kernel,
        "dsm_identity": suite_dsm_identity,
        "score_oracle": suite_score_oracle,
        "kid": suite_kid,
        "ks": suite_ks,
        "reverse": suite_reverse,
        "checkpoint": suite_checkpoint,
    }


def cmd_selftest():
    failures = 0
    for name, fn in _selftest_suites().items():
        try:
            count = fn()
            print(f"selftest {name}: {count} checks ok")
        except AssertionError as e:
            failures += 1
            print(f"selftest {name}: FAILED {e!r}")
        except Exception as e:  # noqa: BLE001 - report, continue, fail the run
            failures += 1
            print(f"selftest {name}: ERROR {e!r}")
    if failures:
        print(f"selftest: {failures} suite(s) failed")
        return 4
    print("selftest: all suites passed")
    return 0


# ----------------------------------------------------------------- entrypoint


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", dest="overrides", metavar="KEY=VALUE",
                        help="dotted config override, value parsed as JSON when possible")
    parser.add_argument("--out", help="output root (default from config, 'runs')")
    parser.add_argument("--threads", type=int, help="cap BLAS thread pools")
    parser.add_argument("--plots", action="store_true", help="also emit SVG charts")


def build_parser():
    parser = argparse.ArgumentParser(prog="vpdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("forward", "train-score", "reverse", "diagnose", "uturn-scan"):
        p = sub.add_parser(name)
        _add_common(p)
    p = sub.add_parser("kid")
    _add_common(p)
    p.add_argument("x", help="first sample file (.csv or .utd1)")
    p.add_argument("y", help="second sample file (.csv or .utd1)")
    p = sub.add_parser("report")
    p.add_argument("--out", required=True, help="output root holding run directories")
    p = sub.add_parser("selftest")
    p.add_argument("--threads", type=int, help="cap BLAS thread pools")
    return parser


def _set_threads(k):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(k)


_HANDLERS = {
    "forward": cmd_forward,
    "train-score": cmd_train_score,
    "reverse": cmd_reverse,
    "diagnose": cmd_diagnose,
    "uturn-scan": cmd_uturn_scan,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None):
        _set_threads(args.threads)
    try:
        if args.command == "selftest":
            return cmd_selftest()
        if args.command == "report":
            return cmd_report(args.out)
        cfg = load_config(args.config, args.overrides)
        out_root = args.out or cfg.out
        run_dir = _make_run_dir(out_root, args.command)
        manifest = {
            "status": "incomplete",
            "subcommand": args.command,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "config": asdict(cfg),
            "versions": _versions(),
        }
        _write_manifest(run_dir, manifest)
        if args.command == "kid":
            summary = cmd_kid(cfg, run_dir, args.plots, args.x, args.y)
        else:
            summary = _HANDLERS[args.command](cfg, run_dir, args.plots)
        _finalize_manifest(run_dir, manifest, summary)
        print(f"run complete: {run_dir}")
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (VpdiffError, RuntimeError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
