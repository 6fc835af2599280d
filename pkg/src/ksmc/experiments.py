"""Campaign orchestration: scenario builders, paired-truth multi-filter runs,
rate sweeps and the persisted outputs (run CSVs, summary, manifest)."""

from __future__ import annotations

import csv
import hashlib
import importlib
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .baselines import abs_run, enkf_run, kalman_run, linear_gaussian_matrices
from .config import ExperimentConfig, campaign_text
from .diagnostics import RateFit, convergence_time, rate_fit, rmse
from .errors import ConfigError, InsufficientDataError, KsmcError, OutputError
from .ksfilter import KsConfig, Prior, filter_run
from .models import (ObservationModel, ProcessModel, cubic_interstory_field, harmonic_forcing,
                     make_duffing, make_linear_gaussian, make_shear_frame, make_tracker)
from .records import RunRecord
from .sde import RngStream, Trajectory, config_hash, generate_truth, save_trajectory

log = logging.getLogger(__name__)


# -- scenarios ------------------------------------------------------------------------


@dataclass
class Scenario:
    """Everything a campaign needs to know about one benchmark problem."""

    name: str
    process: ProcessModel
    truth_process: ProcessModel
    x0: np.ndarray
    prior: Prior
    observation: Optional[ObservationModel]
    algebraic_observation: Optional[ObservationModel]
    state_names: tuple
    refine: int = 8
    reference_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    parameter_slice: slice = slice(0, 0)
    position_idx: Optional[tuple] = None
    ks_defaults: dict = field(default_factory=dict)
    kalman: Optional[tuple] = None

    @property
    def gain_observation(self) -> ObservationModel:
        """Observation used by the gain-based filters (KS, EnKF)."""
        return self.observation if self.observation is not None else self.algebraic_observation


def _take(params: dict, key: str, default):
    return params.pop(key, default)


def _vec(value, n: int, what: str) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1 and n > 1:
        arr = np.full(n, float(arr[0]))
    if arr.shape != (n,):
        raise ConfigError(f"{what} needs {n} values")
    return arr


def _reject_leftovers(problem: str, params: dict):
    if params:
        raise ConfigError(f"unknown {problem} parameters: {sorted(params)}")


def build_duffing(params: dict, cfg: ExperimentConfig) -> Scenario:
    p = dict(params)
    model = make_duffing(eps1=_take(p, "eps1", 0.25), eps2=_take(p, "eps2", 1.0),
                         eps3=_take(p, "eps3", 5.0), f_intensity=_take(p, "f_intensity", 1.0),
                         sigma_m=_take(p, "sigma_m", 0.05),
                         f_mu=_vec(_take(p, "f_mu", (0.1, 0.01, 0.1)), 3, "f_mu"))
    ref = model.reference_values
    x0 = _vec(_take(p, "x0", (0.0, 0.0)), 2, "x0")
    var = float(_take(p, "prior_state_var", 0.1))
    lo, hi = float(_take(p, "prior_low", 0.5)), float(_take(p, "prior_high", 1.5))
    _reject_leftovers("duffing", p)
    return Scenario("duffing", model.process, model.truth_process(), np.r_[x0, ref],
                    Prior(x0, var * np.eye(2), lo * ref, hi * ref), model.observation,
                    model.algebraic_observation, model.state_names, 8, ref,
                    model.parameter_slice, ks_defaults={"final_correction": True})


def build_shear_frame(params: dict, cfg: ExperimentConfig) -> Scenario:
    p = dict(params)
    K = _vec(_take(p, "K", 100.0), 5, "K")
    C = _vec(_take(p, "C", 3.0), 5, "C")
    amps = _vec(_take(p, "amplitudes", 10.0), 5, "amplitudes")
    omegas = _vec(_take(p, "omegas", tuple(np.pi * np.array([1.0, 1.7, 2.3, 2.9, 3.7]))),
                  5, "omegas")
    model = make_shear_frame(K, C, cubic_interstory_field(float(_take(p, "kappa_nl", 100.0))),
                             harmonic_forcing(amps, omegas), sigma=float(_take(p, "sigma", 0.3)),
                             sigma_m=float(_take(p, "sigma_m", 0.01)),
                             f_mu=_vec(_take(p, "f_mu", 0.0), 10, "f_mu"))
    ref = model.reference_values
    var = float(_take(p, "prior_state_var", 1e-4))
    lo, hi = float(_take(p, "prior_low", 0.7)), float(_take(p, "prior_high", 1.3))
    _reject_leftovers("shear_frame", p)
    return Scenario("shear_frame", model.process, model.truth_process(), np.r_[np.zeros(10), ref],
                    Prior(np.zeros(10), var * np.eye(10), lo * ref, hi * ref), model.observation,
                    model.algebraic_observation, model.state_names, 8, ref,
                    model.parameter_slice, ks_defaults={"final_correction": True})


def build_tracker(params: dict, cfg: ExperimentConfig) -> Scenario:
    p = dict(params)
    noise = {"kind": str(_take(p, "noise", "gaussian")),
             "fraction": float(_take(p, "noise_fraction", 0.05)),
             "floor": float(_take(p, "noise_floor", 1e-6)),
             "scale": float(_take(p, "glint_scale", 100.0)),
             "gamma": float(_take(p, "glint_gamma", 0.5))}
    x0 = _vec(_take(p, "x0", (0.5, 3.0, 1.0, 1.0)), 4, "x0")
    tm = make_tracker(dt=cfg.dt, x0=x0,
                      process_noise_intensity=float(_take(p, "process_noise_intensity", 1.0)),
                      observer=_vec(_take(p, "observer", (0.0, 0.0)), 2, "observer"),
                      noise_cfg=noise)
    var = float(_take(p, "prior_var", 0.1))
    _reject_leftovers("tracker", p)
    names = ("x", "vx", "y", "vy")
    return Scenario("tracker", tm.process, tm.truth_process, np.asarray(tm.x0, dtype=float),
                    Prior(np.asarray(tm.x0, dtype=float), var * np.eye(4)), None, tm.observation,
                    names, refine=1, position_idx=(0, 2), ks_defaults={"substep_limit": 0.5})


def build_linear_gaussian(params: dict, cfg: ExperimentConfig) -> Scenario:
    p = dict(params)
    a, q, r = float(_take(p, "a", -1.0)), float(_take(p, "q", 1.0)), float(_take(p, "r", 1.0))
    x0, P0 = float(_take(p, "x0", 0.0)), float(_take(p, "P0", 1.0))
    _reject_leftovers("linear_gaussian", p)
    model = make_linear_gaussian(a, q, r)
    return Scenario("linear_gaussian", model.process, model.process, np.array([x0]),
                    Prior([x0], [[P0]]), model.observation, model.algebraic_observation,
                    model.state_names, 8, kalman=(a, q, r, x0, P0))


def build_custom(params: dict, cfg: ExperimentConfig) -> Scenario:
    p = dict(params)
    target = p.pop("factory", None)
    if not isinstance(target, str) or ":" not in target:
        raise ConfigError("custom problems need problem.factory = module:function")
    module, _, attr = target.partition(":")
    try:
        factory = getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load custom factory {target!r}: {exc}") from exc
    scenario = factory(p, cfg)
    if not isinstance(scenario, Scenario):
        raise ConfigError("custom factory must return a Scenario")
    return scenario


BUILDERS: dict = {
    "duffing": build_duffing,
    "shear_frame": build_shear_frame,
    "tracker": build_tracker,
    "linear_gaussian": build_linear_gaussian,
    "custom": build_custom,
}


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    return BUILDERS[cfg.problem](cfg.problem_params, cfg)


# -- single runs ----------------------------------------------------------------------

_KS_FIELDS = {f.name for f in fields(KsConfig)}


def ks_config(scenario: Scenario, params: dict) -> KsConfig:
    merged = {**scenario.ks_defaults, **params}
    unknown = set(merged) - _KS_FIELDS
    if unknown:
        raise ConfigError(f"unknown ks parameters: {sorted(unknown)}")
    if "rho_range" in merged:
        merged["rho_range"] = tuple(float(v) for v in merged["rho_range"])
    return KsConfig(**merged)


def _particle_count(name: str, params: dict, default: int = 200) -> int:
    extra = set(params) - {"N"}
    if extra:
        raise ConfigError(f"unknown {name} parameters: {sorted(extra)}")
    N = params.get("N", default)
    if isinstance(N, bool) or not isinstance(N, int) or N < 2:
        raise ConfigError(f"{name}.N must be an integer >= 2")
    return N


def make_truth(scenario: Scenario, cfg: ExperimentConfig, seed: int) -> Trajectory:
    refine = cfg.refine if cfg.refine is not None else scenario.refine
    return generate_truth(scenario.truth_process, scenario.x0, cfg.T, cfg.dt, refine,
                          RngStream(seed), scenario.observation, scenario.algebraic_observation)


def run_filter(name: str, scenario: Scenario, traj: Trajectory, params: dict,
               seed: int) -> RunRecord:
    rng = RngStream(seed)
    names = scenario.state_names
    if name == "ks":
        return filter_run(traj, scenario.process, scenario.gain_observation,
                          ks_config(scenario, params), scenario.prior, rng, "ks", names)
    if name == "enkf":
        return enkf_run(traj, scenario.process, scenario.gain_observation,
                        _particle_count(name, params), scenario.prior, rng, names)
    if name in ("abs1", "abs2"):
        obs = scenario.algebraic_observation if name == "abs1" else scenario.observation
        if obs is None:
            raise ConfigError(f"{name} is not available for the {scenario.name} problem")
        return abs_run(traj, scenario.process, obs, _particle_count(name, params),
                       scenario.prior, rng, name, names)
    if name == "kalman":
        if scenario.kalman is None:
            raise ConfigError("the Kalman filter is only available for linear_gaussian")
        if params:
            raise ConfigError("the Kalman filter takes no parameters")
        a, q, r, x0, P0 = scenario.kalman
        A, H, Q, R = linear_gaussian_matrices(a, q, r, traj.dt)
        rec = kalman_run(traj, A, H, Q, R, [x0], [[P0]], names)
        rec.seed = seed
        return rec
    raise ConfigError(f"unknown filter {name!r}")


# -- campaign -------------------------------------------------------------------------


@dataclass
class SummaryRow:
    filter_name: str
    seed: int
    state_rmse: float
    position_rmse: float
    param_final_rel_error: tuple
    convergence_times: tuple
    degenerate_steps: int
    ks_pass_fraction: float


@dataclass
class CampaignSummary:
    problem: str
    filters: tuple
    seeds: tuple
    parameter_names: tuple
    rel_tol: float
    rows: list = field(default_factory=list)
    rate_fits: dict = field(default_factory=dict)

    def rows_for(self, filter_name: str) -> list:
        return [r for r in self.rows if r.filter_name == filter_name]

    def median(self, filter_name: str, metric: str = "state_rmse") -> float:
        return float(np.median([getattr(r, metric) for r in self.rows_for(filter_name)]))

    def degeneracy(self, filter_name: str) -> int:
        return int(sum(r.degenerate_steps for r in self.rows_for(filter_name)))

    def table(self) -> str:
        """Human-readable per-filter block."""
        metric = "position_rmse" if not math.isnan(self.rows[0].position_rmse) else "state_rmse"
        lines = [f"problem {self.problem}, seeds {list(self.seeds)}",
                 f"{'filter':<8} {'median ' + metric:>22} {'degenerate':>11}"]
        for f in self.filters:
            lines.append(f"{f:<8} {self.median(f, metric):>22.6g} {self.degeneracy(f):>11d}")
        for name, fit in self.rate_fits.items():
            lines.append(f"rate[{name}] slope {fit.slope:.4f} r2 {fit.r_squared:.4f}")
        return "\n".join(lines)


def summarize_run(rec: RunRecord, scenario: Scenario, rel_tol: float) -> SummaryRow:
    nb = scenario.parameter_slice.start if scenario.reference_values.size else rec.dim_state
    est, truth = rec.estimates[1:], rec.truth[1:]
    state_rmse = float(rmse(est[:, :nb], truth[:, :nb])) if np.all(np.isfinite(truth)) else math.nan
    pos = math.nan
    if scenario.position_idx is not None:
        pos = rec.position_rmse(scenario.position_idx)
    ref = scenario.reference_values
    final_rel, conv = (), ()
    if ref.size:
        sl = scenario.parameter_slice
        final_rel = tuple(float(v) for v in np.abs(rec.estimates[-1, sl] / ref - 1.0))
        conv = tuple(convergence_time(rec.times, rec.estimates[:, sl][:, k], ref[k], rel_tol)
                     for k in range(ref.size))
    degenerate = int(rec.events.get("degenerate_steps", rec.events.get("regularised", 0)))
    valid = np.isfinite(rec.ks_stat)
    ks_frac = float(np.mean(rec.ks_pass[valid])) if np.any(valid) else math.nan
    return SummaryRow(rec.filter_name, rec.seed, state_rmse, pos, final_rel, conv,
                      degenerate, ks_frac)


def _run_seed(cfg: ExperimentConfig, seed: int):
    scenario = build_scenario(cfg)
    traj = make_truth(scenario, cfg, seed)
    out = []
    for name in cfg.filters:
        try:
            out.append(run_filter(name, scenario, traj, cfg.params_for(name), seed))
        except KsmcError as exc:
            raise type(exc)(f"{name} filter, seed {seed}: {exc}") from exc
    return out


def run_experiment(cfg: ExperimentConfig, jobs: int = 1):
    """Run every filter on the truth of every seed; returns ``(records, summary)``.

    Seeds may be spread over ``jobs`` worker processes; results are collected
    in seed order, so outputs do not depend on the job count.
    """
    scenario = build_scenario(cfg)
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        per_seed = [_run_seed(cfg, s) for s in cfg.seeds]
    records = [rec for batch in per_seed for rec in batch]
    rel_tol = float(cfg.extra.get("summary.rel_tol", 0.15))
    pnames = tuple(scenario.state_names[scenario.parameter_slice]) if scenario.reference_values.size else ()
    summary = CampaignSummary(cfg.problem, cfg.filters, cfg.seeds, pnames, rel_tol,
                              [summarize_run(r, scenario, rel_tol) for r in records])
    return records, summary


def generate_truths(cfg: ExperimentConfig) -> dict:
    scenario = build_scenario(cfg)
    return {seed: make_truth(scenario, cfg, seed) for seed in cfg.seeds}


# -- rate sweeps ----------------------------------------------------------------------


@dataclass
class RateSweep:
    kind: str
    levels: tuple
    errors: tuple
    per_seed: np.ndarray
    fit: RateFit


def _require_linear(cfg: ExperimentConfig) -> Scenario:
    if cfg.problem != "linear_gaussian":
        raise ConfigError("rate sweeps need the linear_gaussian problem (exact reference filter)")
    return build_scenario(cfg)


def _kalman_means(traj: Trajectory, scenario: Scenario, exact: bool) -> np.ndarray:
    a, q, r, x0, P0 = scenario.kalman
    A, H, Q, R = linear_gaussian_matrices(a, q, r, traj.dt, exact=exact)
    return kalman_run(traj, A, H, Q, R, [x0], [[P0]]).estimates


def monte_carlo_sweep(cfg: ExperimentConfig, levels, ks_params: Optional[dict] = None) -> RateSweep:
    """Ensemble-size sweep: RMSE over time of the KS mean against the Kalman
    mean, root-mean-squared over seeds, for each ``N`` in ``levels``."""
    scenario = _require_linear(cfg)
    levels = tuple(int(n) for n in levels)
    errs = np.empty((len(levels), len(cfg.seeds)))
    for j, seed in enumerate(cfg.seeds):
        traj = make_truth(scenario, cfg, seed)
        ref = _kalman_means(traj, scenario, exact=False)
        for i, N in enumerate(levels):
            params = {**(ks_params or {}), "N": N}
            rec = filter_run(traj, scenario.process, scenario.observation,
                             ks_config(scenario, params), scenario.prior, RngStream(seed))
            errs[i, j] = rmse(rec.estimates[1:], ref[1:])
    level_err = np.sqrt(np.mean(errs ** 2, axis=1))
    return RateSweep("N", levels, tuple(level_err.tolist()), errs, rate_fit(levels, level_err))


def time_step_sweep(cfg: ExperimentConfig, levels, refine: int = 32,
                    ks_params: Optional[dict] = None) -> RateSweep:
    """Step-size sweep against the exact filter on a grid ``refine`` times
    finer than the smallest level.

    The truth and its observation record live on the fine grid; each level
    filters the subsampled record, and errors are taken at the times of the
    coarsest level.
    """
    scenario = _require_linear(cfg)
    levels = tuple(float(v) for v in levels)
    finest = min(levels)
    ratios = [lv / finest for lv in levels]
    if any(abs(r - round(r)) > 1e-9 for r in ratios):
        raise ConfigError("step levels must be integer multiples of the smallest one")
    fine_dt = finest / refine
    coarse_every = int(round(max(levels) / fine_dt))
    errs = np.empty((len(levels), len(cfg.seeds)))
    for j, seed in enumerate(cfg.seeds):
        fine = generate_truth(scenario.truth_process, scenario.x0, cfg.T, fine_dt, 1,
                              RngStream(seed), scenario.observation)
        ref = _kalman_means(fine, scenario, exact=True)[::coarse_every]
        for i, lv in enumerate(levels):
            every = int(round(lv / fine_dt))
            traj = fine.subsample(every)
            rec = filter_run(traj, scenario.process, scenario.observation,
                             ks_config(scenario, dict(ks_params or {})), scenario.prior,
                             RngStream(seed))
            est = rec.estimates[::coarse_every // every]
            errs[i, j] = rmse(est[1:], ref[1:])
    level_err = np.sqrt(np.mean(errs ** 2, axis=1))
    return RateSweep("dt", levels, tuple(level_err.tolist()), errs, rate_fit(levels, level_err))


def run_rates(cfg: ExperimentConfig) -> RateSweep:
    kind = str(cfg.extra.get("rates.kind", "N"))
    levels = cfg.extra.get("rates.levels")
    if levels is None or not isinstance(levels, tuple):
        raise ConfigError("rates.levels must list at least three levels")
    ks_params = cfg.params_for("ks")
    if kind == "N":
        ks_params.pop("N", None)
        return monte_carlo_sweep(cfg, levels, ks_params)
    if kind == "dt":
        return time_step_sweep(cfg, levels, int(cfg.extra.get("rates.refine", 32)), ks_params)
    raise ConfigError(f"rates.kind must be 'N' or 'dt', got {kind!r}")


# -- outputs --------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_rows(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


def write_summary_csv(summary: CampaignSummary, path: Path) -> Path:
    pn = summary.parameter_names
    header = (["filter", "seed", "state_rmse", "position_rmse"]
              + [f"final_rel_error_{p}" for p in pn] + [f"convergence_time_{p}" for p in pn]
              + ["degenerate_steps", "ks_pass_fraction"])
    rows = [[r.filter_name, r.seed, _fmt(r.state_rmse), _fmt(r.position_rmse),
             *(_fmt(v) for v in r.param_final_rel_error), *(_fmt(v) for v in r.convergence_times),
             r.degenerate_steps, _fmt(r.ks_pass_fraction)] for r in summary.rows]
    _write_rows(path, header, rows)
    return path


def write_rates_csv(sweep: RateSweep, path: Path) -> Path:
    rows = [[_fmt(lv), _fmt(e), *(_fmt(v) for v in sweep.per_seed[i])]
            for i, (lv, e) in enumerate(zip(sweep.levels, sweep.errors))]
    header = ["level", "rms_error"] + [f"seed_{k}" for k in range(sweep.per_seed.shape[1])]
    rows.append(["slope", _fmt(sweep.fit.slope)])
    rows.append(["r_squared", _fmt(sweep.fit.r_squared)])
    _write_rows(path, header, rows)
    return path


def _versions() -> dict:
    return {"ksmc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": ".".join(platform.python_version_tuple()[:2])}


def write_manifest(out: Path, cfg: ExperimentConfig, files, seed_source: str = "config",
                   kind: str = "run") -> tuple:
    """Line-oriented ``key=value`` manifest; returns ``(path, manifest_hash)``."""
    lines = [f"kind={kind}", f"config_hash={config_hash(campaign_text(cfg))}",
             "seeds=" + ",".join(str(s) for s in cfg.seeds), f"seed_source={seed_source}"]
    lines += [f"version.{k}={v}" for k, v in _versions().items()]
    for f in sorted(files, key=lambda p: p.relative_to(out).as_posix()):
        lines.append(f"file.{f.relative_to(out).as_posix()}={_sha256(f)}")
    body = "\n".join(lines) + "\n"
    digest = hashlib.sha256(body.encode()).hexdigest()
    path = out / "manifest.txt"
    path.write_text(body + f"manifest_hash={digest}\n")
    return path, digest


def _prepare(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OutputError(f"output directory {out} is not writable: {exc}") from exc
    return out


def emit_outputs(records, summary: CampaignSummary, out_dir, cfg: ExperimentConfig,
                 seed_source: str = "config") -> dict:
    """Write run CSVs, ``summary.csv``, ``config.txt`` and ``manifest.txt``.

    Returns a manifest dict with the written paths and the manifest hash.
    """
    records = list(records)
    if not records:
        raise InsufficientDataError("no run records to write")
    out = _prepare(out_dir)
    try:
        runs = out / "runs"
        runs.mkdir(exist_ok=True)
        files = [rec.to_csv(runs / f"{rec.filter_name}_seed{rec.seed}.csv") for rec in records]
        files.append(write_summary_csv(summary, out / "summary.csv"))
        cfg_path = out / "config.txt"
        cfg_path.write_text(campaign_text(cfg))
        files.append(cfg_path)
        path, digest = write_manifest(out, cfg, files, seed_source)
    except OSError as exc:
        raise OutputError(f"cannot write outputs under {out}: {exc}") from exc
    return {"files": files, "manifest": path, "manifest_hash": digest}


def emit_truths(truths: dict, out_dir, cfg: ExperimentConfig, seed_source: str = "config") -> dict:
    if not truths:
        raise InsufficientDataError("no trajectories to write")
    out = _prepare(out_dir)
    h = config_hash(campaign_text(cfg))
    files = []
    try:
        for seed, traj in sorted(truths.items()):
            p = save_trajectory(traj, out / f"truth_seed{seed}.csv", seed, h)
            files += [p, p.with_suffix(".meta")]
        path, digest = write_manifest(out, cfg, files, seed_source, kind="generate")
    except OSError as exc:
        raise OutputError(f"cannot write outputs under {out}: {exc}") from exc
    return {"files": files, "manifest": path, "manifest_hash": digest}


def emit_rates(sweep: RateSweep, out_dir, cfg: ExperimentConfig, seed_source: str = "config") -> dict:
    out = _prepare(out_dir)
    try:
        files = [write_rates_csv(sweep, out / f"rates_{sweep.kind}.csv")]
        path, digest = write_manifest(out, cfg, files, seed_source, kind="rates")
    except OSError as exc:
        raise OutputError(f"cannot write outputs under {out}: {exc}") from exc
    return {"files": files, "manifest": path, "manifest_hash": digest}
