"""Command-line interface: ``ddlqr <subcommand> --config CFG [--out DIR]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import oracle, solvers, trajgen
from .errors import ConfigInvalid, NumericalError, ValidationError
from .lti_sim import CostSpec, SinusoidInput, cost_from_dict, cost_to_dict, simulate
from .substitute_state import (FilterBank, ProjectedData, RawDataset, cosimulate,
                               gamma_eta_rank_demo, project, write_matrix_csv)

log = logging.getLogger("ddlqr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n\n{ex.SCHEMA_HELP}\n")
        raise SystemExit(1)


def fixture_path(name: str) -> Path:
    """Path of a bundled config (``mimo``, ``siso_ensemble``, ...)."""
    stem = name[:-5] if name.endswith(".json") else name
    return Path(str(resources.files("ddlqr") / "fixtures" / f"{stem}.json"))


def load_config(arg: str | None, seed: int | None) -> ex.ExperimentConfig:
    if arg is None:
        raise ConfigInvalid("--config is required for this subcommand\n" + ex.SCHEMA_HELP)
    path = Path(arg)
    if not path.exists():
        path = fixture_path(arg)
        if not path.exists():
            raise ConfigInvalid(f"config {arg!r} not found (neither a file nor a bundled fixture)")
    cfg = ex.ExperimentConfig.load(path)
    return cfg if seed is None else replace(cfg, seed=seed)


def _dump(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _instance(cfg: ex.ExperimentConfig, k: int) -> ex.Instance:
    seeds = ex.instance_seeds(cfg)
    if not 0 <= k < len(seeds):
        raise ValidationError(f"instance {k} out of range (config has {len(seeds)})")
    return ex.build_instance(cfg, seeds[k])


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc


# -- subcommands -----------------------------------------------------------

def cmd_simulate(args, cfg):
    inst = _instance(cfg, args.instance)
    tr = simulate(inst.plant, cfg.input, inst.x0, args.t_end, cfg.sampling.dt_integration)
    path = args.out / "trajectory.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    tr.to_csv(path)
    print(f"wrote {path} ({tr.t.size} rows)")


def cmd_collect(args, cfg):
    inst = _instance(cfg, args.instance)
    path = _dump({"raw": inst.raw.to_dict(), "bank": inst.bank.to_dict(),
                  "cost": cost_to_dict(cfg.cost), "rank_tol": cfg.rank_tol},
                 args.out / "dataset.json")
    print(f"wrote {path} (T={inst.raw.T})")


def cmd_project(args, cfg):
    if args.dataset:
        d = _load_json(args.dataset)
        raw = RawDataset.from_dict(d["raw"])
        bank = FilterBank.from_dict(d["bank"])
        cost = cost_from_dict(d["cost"])
        rank_tol = float(d.get("rank_tol", 1e-9))
        pd = project(raw, bank, rank_tol)
    else:
        inst = _instance(cfg, args.instance)
        raw, bank, cost, pd = inst.raw, inst.bank, cfg.cost, inst.projected
    n = bank.n
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # reported below as gamma_eta_capped_by_T
        g_rank, g_bound = gamma_eta_rank_demo(raw, n)
    report = {
        "rank_E0": pd.rank_r,
        "rows_E0": raw.E0.shape[0],
        "order_estimate": pd.order_estimate,
        "min_singular_Phi0": pd.min_singular_Phi0,
        "singular_values_E0": pd.singular_values_E0.tolist(),
        "rank_gamma_eta": g_rank,
        "gamma_eta_bound": g_bound,
        "gamma_eta_rows": raw.E0.shape[0] ** 2,
        "gamma_eta_capped_by_T": raw.T < g_bound,
    }
    _dump({"projected": pd.to_dict(), "cost": cost_to_dict(cost)}, args.out / "projected.json")
    _dump(report, args.out / "rank_report.json")
    write_matrix_csv(args.out / "E0.csv", raw.E0)
    write_matrix_csv(args.out / "Phi0.csv", pd.Phi0)
    print(f"rank(E0) = {pd.rank_r} of {raw.E0.shape[0]} rows, order estimate "
          f"{pd.order_estimate}, min sv(Phi0) = {pd.min_singular_Phi0:.3e}")


def _projected(args, cfg) -> tuple[ProjectedData, CostSpec]:
    if args.data:
        d = _load_json(args.data)
        return ProjectedData.from_dict(d["projected"]), cost_from_dict(d["cost"])
    if cfg is None:
        raise ConfigInvalid("pass --data PROJECTED_JSON or --config CFG")
    return _instance(cfg, args.instance).projected, cfg.cost


def _solve(args, cfg, method):
    pd, cost = _projected(args, cfg)
    if method == "pi":
        settings = (cfg.pi if cfg is not None and cfg.pi is not None else ex.PiSettings())
        rep = solvers.policy_iteration(pd, cost, settings.build())
    else:
        settings = (cfg.vi if cfg is not None and cfg.vi is not None else ex.ViSettings())
        rep = solvers.value_iteration(pd, cost, settings.build(pd.rank_r))
    _dump(rep.to_dict(), args.out / f"{method}_report.json")
    rep.trace_to_csv(args.out / f"{method}_trace.csv")
    print(f"{method.upper()}: {rep.termination} after {rep.iterations_run} iterations"
          + (f", {rep.resets} resets" if method == "vi" else ""))
    return 0 if rep.termination == "Converged" else 2


def cmd_pi(args, cfg):
    return _solve(args, cfg, "pi")


def cmd_vi(args, cfg):
    return _solve(args, cfg, "vi")


def cmd_oracle(args, cfg):
    inst = _instance(cfg, args.instance)
    plant, bank, pd = inst.plant, inst.bank, inst.projected
    param = oracle.parameterize(plant, bank, inst.x0)
    are = oracle.kleinman_solve(plant, cfg.cost)
    SF = param.S @ pd.F1.T
    stab, det = oracle.verify_regularity(bank, param, pd.F1, plant, cfg.cost)
    out = {
        "P_star": are.P_star.tolist(),
        "K_star": are.K_star.tolist(),
        "are_residual": are.residual,
        "kleinman_iterations": are.iterations,
        "optimal_cost": float(inst.x0 @ are.P_star @ inst.x0),
        "K_oracle_phi": (are.K_star @ SF).tolist(),
        "observer_gain": param.L.tolist(),
        "S": param.S.tolist(),
        "SF1t_rank": int(np.linalg.matrix_rank(SF)),
        "identity_residuals": oracle.verify_identities(param, bank, pd.F1, plant),
        "regularity": {"stabilizable": stab, "detectable": det},
    }
    path = _dump(out, args.out / "oracle.json")
    print(f"wrote {path}; optimal cost {out['optimal_cost']:.6f}")


def cmd_trajgen(args, cfg):
    inst = _instance(cfg, args.instance)
    s = cfg.sampling
    T = inst.raw.T
    t_rec = s.t0 + (T - 1) * s.dt + args.t_end
    sim = cosimulate(inst.plant, inst.bank, cfg.input, inst.x0, t_rec, s.dt_integration)
    with_pe = dict(input=cfg.input, n=inst.plant.n)
    data = trajgen.trajgen_data(sim, inst.projected.F1, s.t0, s.dt, T, **with_pe)
    e1 = np.zeros(T)
    e1[0] = 1.0
    if args.mode == "a":
        rng = np.random.default_rng(cfg.seed)
        direction = rng.standard_normal(T - data.r)
        direction /= np.linalg.norm(direction)
        amp = args.amplitude
        w = trajgen.generate_trajectory_a(
            data, e1, lambda t: amp * np.sin(2 * np.pi * t) * direction, args.t_end)
    else:
        if args.u_bar:
            u_bar = SinusoidInput.from_dict(_load_json(args.u_bar))
            alpha0 = trajgen.initial_weights(data, sim.eta[data.anchor_index],
                                             u_bar(s.t0).ravel())
        else:
            # the stored input reproduces the stored output from alpha0 = e1
            u_bar, alpha0 = cfg.input, e1
        w = trajgen.generate_output_b(data, u_bar, alpha0, args.t_end)
    path = args.out / f"trajgen_{args.mode}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    w.to_csv(path)
    print(f"wrote {path} ({w.t.size} rows)")


def cmd_study(args, cfg):
    rep = ex.run_study(cfg, workers=args.workers)
    out = rep.write(args.out)
    agg = rep.aggregate
    print(f"{cfg.name}: {agg['instances']} instances, Phi0 full row rank in "
          f"{agg['phi0_full_row_rank']}, failed {len(agg['failed_instances'])}")
    for method in ("pi", "vi"):
        if method in agg:
            a = agg[method]
            print(f"  {method.upper()}: converged {a['converged']}/{a['runs']}, mean iterations "
                  f"{a['mean_iterations']}, mean relative error {a['mean_relative_error']}")
    if cfg.count == 1 and rep.records and "optimal_cost" in rep.records[0]:
        r = rep.records[0]
        for method in ("pi", "vi"):
            if "learned_cost" in r.get(method, {}):
                print(f"  {method.upper()} learned cost {r[method]['learned_cost']:.4f} "
                      f"(optimal {r['optimal_cost']:.4f})")
    print(f"report written to {out}")


COMMANDS = {
    "simulate": (cmd_simulate, "plant + input -> trajectory CSV"),
    "collect": (cmd_collect, "co-simulate and sample -> dataset JSON"),
    "project": (cmd_project, "rank-revealing projection -> projected data + rank report"),
    "pi": (cmd_pi, "model-free policy iteration -> report JSON"),
    "vi": (cmd_vi, "model-free value iteration -> report JSON"),
    "oracle": (cmd_oracle, "model-based ARE solution and identity checks -> JSON"),
    "trajgen": (cmd_trajgen, "data-driven trajectory synthesis -> CSV"),
    "study": (cmd_study, "run a full configured study -> report directory"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config JSON path or bundled fixture name")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--instance", type=int, default=0,
                        help="ensemble member for single-instance commands")
    parser = _Parser(prog="ddlqr", description="Data-driven output-feedback LQR: "
                     "simulation, data collection, solvers and studies.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=helptext, description=helptext)
        if name == "simulate":
            p.add_argument("--t-end", type=float, default=10.0)
        elif name == "project":
            p.add_argument("--dataset", help="dataset JSON from 'collect'")
        elif name in ("pi", "vi"):
            p.add_argument("--data", help="projected-data JSON from 'project'")
        elif name == "trajgen":
            p.add_argument("--mode", choices=("a", "b"), default="a")
            p.add_argument("--t-end", type=float, default=2.0)
            p.add_argument("--amplitude", type=float, default=0.1)
            p.add_argument("--u-bar", help="JSON input spec for mode b")
        elif name == "study":
            p.add_argument("--workers", type=int)
    return parser


NEEDS_CONFIG = {"simulate", "collect", "oracle", "trajgen", "study"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        needs = args.command in NEEDS_CONFIG or (
            args.command == "project" and not args.dataset)
        cfg = load_config(args.config, args.seed) if (needs or args.config) else None
        code = func(args, cfg)
    except ValidationError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
