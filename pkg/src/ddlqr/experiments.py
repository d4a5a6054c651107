"""Configuration-driven studies: one JSON config, one deterministic report.

A config describes either one explicit plant or a random ensemble, plus the
observer spectrum, cost, exploration input, sampling and solver settings.
Every instance runs the full pipeline (collect, project, solve, verify
against the model-based oracle) in isolation; failures are recorded per
instance and never averaged in.
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import oracle, solvers
from .errors import ConfigInvalid, DDLQRError
from .lti_sim import (CostSpec, LtiPlant, SinusoidInput, cost_from_dict, cost_to_dict,
                      plant_from_dict, plant_to_dict, random_plant,
                      satisfies_standing_assumption)
from .substitute_state import (FilterBank, ProjectedData, RawDataset, build_filter_bank,
                               collect_data, project)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
IDENTITY_TOL = 1e-6  # scale-relative residual for the model identities


@dataclass(frozen=True)
class EnsembleSpec:
    count: int
    n: int
    m: int
    p: int
    eigenvalue_interval: tuple = (-2.0, 0.0)


@dataclass(frozen=True)
class Sampling:
    t0: float = 0.0
    dt: float = 0.2
    T: int | None = None
    dt_integration: float = 1e-3


@dataclass(frozen=True)
class ViSettings:
    """VI options as stored in a config; ``Sigma0 = sigma0_scale * I``."""

    epsilon: float = 0.01
    max_iterations: int = 3000
    step_numerator: float = 10.0
    step_offset: float = 1000.0
    set_growth: float = 1e5
    sigma0_scale: float = 1.0

    def build(self, r: int) -> solvers.ViConfig:
        return solvers.ViConfig(self.sigma0_scale * np.eye(r), self.epsilon,
                                self.max_iterations, self.step_numerator,
                                self.step_offset, self.set_growth)


@dataclass(frozen=True)
class PiSettings:
    epsilon: float = 0.01
    max_iterations: int = 100

    def build(self) -> solvers.PiConfig:
        return solvers.PiConfig(None, self.epsilon, self.max_iterations)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    observer_eigenvalues: tuple
    cost: CostSpec
    input: SinusoidInput
    plant: LtiPlant | None = None
    ensemble: EnsembleSpec | None = None
    x0: tuple | None = None
    eta0_eps: tuple | None = None
    sampling: Sampling = field(default_factory=Sampling)
    pi: PiSettings | None = field(default_factory=PiSettings)
    vi: ViSettings | None = None
    evaluate_cost: bool = False
    cost_horizon: float = 40.0
    rank_tol: float = 1e-9
    name: str = "study"
    workers: int | None = None

    @property
    def count(self) -> int:
        return 1 if self.plant is not None else self.ensemble.count

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return _config_from_dict(d)
        except ConfigInvalid:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid(f"invalid config: {exc}\n{SCHEMA_HELP}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "seed": self.seed,
            "observer_eigenvalues": list(self.observer_eigenvalues),
            "cost": cost_to_dict(self.cost),
            "input": self.input.to_dict(),
            "sampling": vars(self.sampling).copy(),
            "pi": None if self.pi is None else vars(self.pi).copy(),
            "vi": None if self.vi is None else vars(self.vi).copy(),
            "evaluate_cost": self.evaluate_cost,
            "cost_horizon": self.cost_horizon,
            "rank_tol": self.rank_tol,
        }
        if self.plant is not None:
            d["plant"] = plant_to_dict(self.plant)
        else:
            e = self.ensemble
            d["ensemble"] = {"count": e.count, "n": e.n, "m": e.m, "p": e.p,
                             "eigenvalue_interval": list(e.eigenvalue_interval)}
        if self.x0 is not None:
            d["x0"] = list(self.x0)
        if self.eta0_eps is not None:
            d["eta0_eps"] = list(self.eta0_eps)
        return d


SCHEMA_HELP = """config schema 1 (JSON object):
  schema: 1                      name: str (optional)
  seed: int                      observer_eigenvalues: [n distinct negative reals]
  cost: {Q: [[..]], R: [[..]]}   input: {channels: [[[amp, omega, phase], ..], ..], offsets: [..]}
  plant: {A, B, C}  or  ensemble: {count, n, m, p, eigenvalue_interval: [lo, hi]}
  x0, eta0_eps: [..] (optional; default uniform on [-1, 1])
  sampling: {t0, dt, T, dt_integration} (optional)
  pi: {epsilon, max_iterations} or null
  vi: {epsilon, max_iterations, step_numerator, step_offset, set_growth, sigma0_scale} or null
  evaluate_cost: bool, cost_horizon: float, rank_tol: float, workers: int (optional)"""


def _config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigInvalid("config must be a JSON object")
    if d.get("schema") != SCHEMA_VERSION:
        raise ConfigInvalid(f"unsupported schema {d.get('schema')!r}; expected {SCHEMA_VERSION}")
    known = {"schema", "name", "seed", "observer_eigenvalues", "cost", "input", "plant",
             "ensemble", "x0", "eta0_eps", "sampling", "pi", "vi", "evaluate_cost",
             "cost_horizon", "rank_tol", "workers", "description"}
    extra = set(d) - known
    if extra:
        raise ConfigInvalid(f"unknown config keys: {sorted(extra)}")
    if ("plant" in d) == ("ensemble" in d):
        raise ConfigInvalid("exactly one of 'plant' or 'ensemble' is required")
    plant = plant_from_dict(d["plant"]) if "plant" in d else None
    ens = None
    if "ensemble" in d:
        e = d["ensemble"]
        ens = EnsembleSpec(int(e["count"]), int(e["n"]), int(e["m"]), int(e["p"]),
                           tuple(float(v) for v in e.get("eigenvalue_interval", (-2, 0))))
        if ens.count < 0 or min(ens.n, ens.m, ens.p) < 1:
            raise ConfigInvalid("ensemble needs count >= 0 and n, m, p >= 1")
    n = plant.n if plant is not None else ens.n
    m = plant.m if plant is not None else ens.m
    eigs = tuple(float(v) for v in d["observer_eigenvalues"])
    if len(eigs) != n:
        raise ConfigInvalid(f"need {n} observer eigenvalues, got {len(eigs)}")
    inp = SinusoidInput.from_dict(d["input"])
    if inp.m != m:
        raise ConfigInvalid(f"input has {inp.m} channels, plant has {m}")
    samp = Sampling(**d.get("sampling", {}))
    pi = d.get("pi", {})
    vi = d.get("vi")
    for key in ("x0", "eta0_eps"):
        if key in d and len(d[key]) != n:
            raise ConfigInvalid(f"{key} must have length {n}")
    return ExperimentConfig(
        seed=int(d["seed"]),
        observer_eigenvalues=eigs,
        cost=cost_from_dict(d["cost"]),
        input=inp,
        plant=plant,
        ensemble=ens,
        x0=tuple(float(v) for v in d["x0"]) if "x0" in d else None,
        eta0_eps=tuple(float(v) for v in d["eta0_eps"]) if "eta0_eps" in d else None,
        sampling=samp,
        pi=None if pi is None else PiSettings(**pi),
        vi=None if vi is None else ViSettings(**vi),
        evaluate_cost=bool(d.get("evaluate_cost", False)),
        cost_horizon=float(d.get("cost_horizon", 40.0)),
        rank_tol=float(d.get("rank_tol", 1e-9)),
        name=str(d.get("name", "study")),
        workers=d.get("workers"),
    )


# -- one instance ----------------------------------------------------------

@dataclass
class Instance:
    """Everything the pipeline builds for one plant before solving."""

    plant: LtiPlant
    bank: FilterBank
    x0: np.ndarray
    raw: RawDataset
    projected: ProjectedData


def instance_seeds(cfg: ExperimentConfig) -> list:
    return np.random.SeedSequence(cfg.seed).spawn(cfg.count)


def build_instance(cfg: ExperimentConfig, seed_seq) -> Instance:
    """Draw (or load) the plant, initial conditions and data; then project."""
    rng = np.random.default_rng(seed_seq)
    if cfg.plant is not None:
        plant = cfg.plant
    else:
        e = cfg.ensemble
        plant = random_plant(rng, e.n, e.m, e.p, e.eigenvalue_interval, cfg.cost)
    n = plant.n
    x0 = np.array(cfg.x0) if cfg.x0 is not None else rng.uniform(-1.0, 1.0, n)
    eta0 = np.array(cfg.eta0_eps) if cfg.eta0_eps is not None else "random"
    bank = build_filter_bank(cfg.observer_eigenvalues, plant.m, plant.p, eta0, rng)
    s = cfg.sampling
    raw = collect_data(plant, bank, cfg.input, x0, s.t0, s.dt, s.T, s.dt_integration)
    return Instance(plant, bank, x0, raw, project(raw, bank, cfg.rank_tol))


def _relative_curve(report: solvers.SolveReport, K_ref) -> list:
    return [solvers.relative_error(K, K_ref) for K in report.gain_history[1:]]


def run_instance(cfg: ExperimentConfig, index: int, seed_seq) -> dict:
    """Pipeline for one instance; returns a JSON-ready record.

    Wall times go under ``"timing"`` and are split off before the report is
    written so that reports stay byte-for-byte reproducible.
    """
    rec: dict = {"index": index, "ok": False}
    timing: dict = {}
    try:
        inst = build_instance(cfg, seed_seq)
    except DDLQRError as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
        return rec | {"timing": timing}
    plant, bank, pd = inst.plant, inst.bank, inst.projected
    rec.update({
        "plant": plant_to_dict(plant),
        "x0": inst.x0.tolist(),
        "eta0_eps": bank.eta0_eps.tolist(),
        "standing_assumption": satisfies_standing_assumption(plant, cfg.cost),
        "rank_r": pd.rank_r,
        "order_estimate": pd.order_estimate,
        "phi0_full_row_rank": True,
        "phi0_min_singular": pd.min_singular_Phi0,
        "singular_values_E0": pd.singular_values_E0.tolist(),
    })
    try:
        param = oracle.parameterize(plant, bank, inst.x0)
        are = oracle.kleinman_solve(plant, cfg.cost)
        K_ref = are.K_star @ param.S @ pd.F1.T
        rec["identity_residuals"] = oracle.verify_identities(param, bank, pd.F1, plant)
        stab, det = oracle.verify_regularity(bank, param, pd.F1, plant, cfg.cost)
        rec["regularity"] = {"stabilizable": stab, "detectable": det}
        worst = max(v for k, v in rec["identity_residuals"].items() if k.endswith("_relative"))
        rec["identities_ok"] = bool(worst <= IDENTITY_TOL and stab and det)
        rec["optimal_cost"] = float(inst.x0 @ are.P_star @ inst.x0)
    except DDLQRError as exc:
        rec["error"] = f"oracle: {type(exc).__name__}: {exc}"
        return rec | {"timing": timing}
    phi0 = pd.F1 @ bank.eta0
    failed = not rec["identities_ok"]
    for method in ("pi", "vi"):
        settings = getattr(cfg, method)
        if settings is None:
            continue
        t_start = time.perf_counter()
        try:
            if method == "pi":
                rep = solvers.policy_iteration(pd, cfg.cost, settings.build())
            else:
                rep = solvers.value_iteration(pd, cfg.cost, settings.build(pd.rank_r))
        except DDLQRError as exc:
            rec[method] = {"error": f"{type(exc).__name__}: {exc}",
                           "termination": type(exc).__name__}
            failed = True
            continue
        timing[method] = time.perf_counter() - t_start
        entry = {
            "iterations": rep.iterations_run,
            "termination": rep.termination,
            "resets": rep.resets,
            "relative_error": solvers.relative_error(rep.final_gain, K_ref),
            "learned_cost": float(phi0 @ rep.final_sigma @ phi0),
            "relative_error_curve": _relative_curve(rep, K_ref),
        }
        if method == "pi":
            entry["monotone"] = _pi_monotone(rep)
            entry["all_hurwitz"] = all(r.closed_loop_spectral_abscissa < 0
                                       for r in rep.per_iteration)
        if cfg.evaluate_cost:
            try:
                entry["realized_cost"] = solvers.evaluate_controller(
                    plant, bank, pd.F1, rep.final_gain, cfg.cost, inst.x0,
                    cfg.cost_horizon, cfg.sampling.dt_integration)
            except DDLQRError as exc:
                entry["realized_cost_error"] = f"{type(exc).__name__}: {exc}"
        failed |= rep.termination != "Converged"
        rec[method] = entry
    rec["ok"] = not failed
    return rec | {"timing": timing}


def _pi_monotone(rep: solvers.SolveReport, slack: float = 1e-8) -> bool:
    S = rep.sigma_history
    for a, b in zip(S, S[1:]):
        if np.linalg.eigvalsh(b - a).max() > slack:
            return False
    return True


# -- study -----------------------------------------------------------------

@dataclass
class StudyReport:
    config: dict
    records: list
    aggregate: dict
    timings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"config": self.config, "aggregate": self.aggregate, "records": self.records}

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(out / "timings.json", "w") as fh:
            json.dump(self.timings, fh, indent=1)
        _write_instances_csv(out / "instances.csv", self.records)
        _write_singular_values_csv(out / "singular_values.csv", self.records)
        _write_curves_csv(out / "relative_error_curves.csv", self.records)
        return out


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def aggregate(records: list) -> dict:
    built = [r for r in records if "rank_r" in r]
    agg = {
        "instances": len(records),
        "phi0_full_row_rank": sum(1 for r in built if r.get("phi0_full_row_rank")),
        "failed_instances": [r["index"] for r in records if not r["ok"]],
        "min_phi0_singular": min((r["phi0_min_singular"] for r in built), default=None),
    }
    for method in ("pi", "vi"):
        done = [r[method] for r in records if method in r and "iterations" in r[method]]
        if not done and not any(method in r for r in records):
            continue
        conv = [e for e in done if e["termination"] == "Converged"]
        # runs stopped at the iteration cap still return a gain; they count
        # in the means and are reported separately through "converged"
        agg[method] = {
            "runs": len(done),
            "converged": len(conv),
            "errors": sum(1 for r in records if "error" in r.get(method, {})),
            "mean_iterations": _mean([e["iterations"] for e in done]),
            "mean_relative_error": _mean([e["relative_error"] for e in done]),
            "max_relative_error": max((e["relative_error"] for e in done), default=None),
            "mean_iterations_converged": _mean([e["iterations"] for e in conv]),
            "mean_relative_error_converged": _mean([e["relative_error"] for e in conv]),
        }
    return agg


def _run_one(args):
    cfg, index, ss = args
    return run_instance(cfg, index, ss)


def run_study(cfg: ExperimentConfig, workers: int | None = None) -> StudyReport:
    """Run every instance (in a bounded process pool when ``workers > 1``)."""
    seeds = instance_seeds(cfg)
    jobs = [(cfg, i, ss) for i, ss in enumerate(seeds)]
    workers = workers or cfg.workers or os.cpu_count() or 1
    workers = max(1, min(int(workers), len(jobs) or 1))
    if workers == 1:
        out = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_run_one, jobs))
    timings = [{"index": r["index"], **r.pop("timing")} for r in out]
    for r in out:
        if not r["ok"]:
            log.warning("instance %d failed: %s", r["index"],
                        r.get("error") or {k: r[k].get("error", r[k].get("termination"))
                                           for k in ("pi", "vi") if k in r})
    return StudyReport(cfg.to_dict(), out, aggregate(out), timings)


# -- CSV exports -----------------------------------------------------------

def _write_instances_csv(path, records):
    cols = ["index", "ok", "rank_r", "phi0_min_singular", "optimal_cost",
            "pi_iterations", "pi_relative_error", "pi_termination",
            "vi_iterations", "vi_relative_error", "vi_termination", "vi_resets"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            row = [r["index"], r["ok"], r.get("rank_r", ""), r.get("phi0_min_singular", ""),
                   r.get("optimal_cost", "")]
            for method in ("pi", "vi"):
                e = r.get(method, {})
                row += [e.get("iterations", ""), e.get("relative_error", ""),
                        e.get("termination", "")]
            row.append(r.get("vi", {}).get("resets", ""))
            w.writerow(row)


def _write_singular_values_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "k", "singular_value"])
        for r in records:
            for k, s in enumerate(r.get("singular_values_E0", [])):
                w.writerow([r["index"], k, s])


def _write_curves_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance", "method", "iter", "relative_error"])
        for r in records:
            for method in ("pi", "vi"):
                for i, v in enumerate(r.get(method, {}).get("relative_error_curve", [])):
                    w.writerow([r["index"], method, i + 1, v])
