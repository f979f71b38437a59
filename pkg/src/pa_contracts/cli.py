"""Batch driver: ``pa-contracts run --config FILE --out DIR``.

Exit codes: 0 success, 2 invalid configuration (nothing written),
3 numerical failure, 4 a verification check failed (outputs still written).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import warnings
from fractions import Fraction

import numpy as np

from . import __version__
from .agent import (cara_value_check, compare_deviations, deviation_family, incentive_residual,
                    principal_value_mc, stationarity_check, sufficient_condition_check)
from .config import ConfigError, Experiment, config_hash, load_experiment
from .contract import (build_optimal_contract, contract_payoff, fbsde_residuals, first_best_toy,
                       forward_Y, principal_value_closed_form)
from .filter import format_paths_csv, simulate_filter, solve_riccati
from .mfg import (ClampingWarning, mfg_deterministic_oracle, mfg_equilibrium, mfg_fixed_point_residual,
                  mfg_ode_residuals, mfg_optimal_effort_midpoints)
from .model import DomainError
from .numerics import IntegrationError, McConfig, Path

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
ORACLE_TOL = 1e-4


class Outputs:
    """Files of one run, held in memory until the run completes."""

    def __init__(self, exp: Experiment):
        self.digest = config_hash(exp.config)
        self.files: dict[str, str] = {}

    @property
    def meta(self) -> dict:
        return {"tool": "pa-contracts", "version": __version__, "config_sha256": self.digest}

    @property
    def header(self) -> list[str]:
        return [f"pa-contracts {__version__} config_sha256={self.digest}"]

    def table(self, name: str, columns: dict[str, np.ndarray]) -> None:
        buf = io.StringIO()
        for line in self.header:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(columns))
        for row in zip(*columns.values()):
            w.writerow([f"{float(v):.17g}" for v in row])
        self.files[name] = buf.getvalue()

    def json(self, name: str, payload: dict) -> None:
        self.files[name] = json.dumps({"_meta": self.meta, **payload}, indent=2) + "\n"

    def write(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for name, text in self.files.items():
            with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as fh:
                fh.write(text)


def _check(value: float, limit: float) -> dict:
    return {"value": value, "limit": limit, "pass": bool(value <= limit)}


def mode_riccati(exp: Experiment, out: Outputs) -> bool:
    V = solve_riccati(exp.model, exp.grid)
    out.table("riccati.csv", {"t": exp.grid.nodes, "V": V.values})
    out.json("report.json", {"mode": exp.mode, "V_T": float(V[-1]), "passed": True})
    return True


def mode_first_best(exp: Experiment, out: Outputs) -> bool:
    # exact rational arithmetic on the binary values of the inputs
    r = first_best_toy(Fraction(exp.model.m0), Fraction(exp.R), Fraction(exp.grid.T))
    out.json("report.json", {
        "mode": exp.mode, "second_best": float(r.second_best), "first_best": float(r.first_best),
        "gap": float(r.gap), "linear_contract": [float(x) for x in r.linear_contract], "passed": True,
    })
    return True


def _contract_paths(exp, contract, out, threads):
    n = min(exp.config["output"]["paths_csv"], exp.mc.n_paths)
    if n == 0:
        return None
    ens = simulate_filter(exp.model, contract.V, contract.beta, McConfig(n, exp.mc.master_seed), exp.grid,
                          lambda_path=contract.lambda_path, threads=threads)
    Y = forward_Y(contract, np.diff(ens.I, axis=1))
    out.files["paths.csv"] = format_paths_csv(exp.grid, ens.X, ens.B, ens.I, Y, out.header)
    return float(np.max(np.abs(Y[:, -1] - contract_payoff(contract, ens.B))))


def mode_contract(exp: Experiment, out: Outputs, threads=None) -> bool:
    g = exp.grid
    contract, sol = build_optimal_contract(exp.R, exp.model, exp.cost, exp.controls, g)
    out.files["contract.json"] = json.dumps({"_meta": out.meta, **contract.to_dict()}, indent=2) + "\n"
    out.table("contract.csv", {"t": g.nodes, "beta": contract.beta.values, "Z": sol.Z.values,
                               "P": sol.P.values, "Q": sol.Q.values, "V": contract.V.values})
    checks = {
        "incentive_residual": _check(incentive_residual(sol, contract.beta, exp.model, exp.cost, contract.V, g),
                                     1e-8),
        "adjoint_terminal": _check(fbsde_residuals(exp.model, exp.cost, sol, contract.beta, contract.V, g)
                                   ["terminal"], 1e-12),
    }
    band = sufficient_condition_check(sol.Q, exp.model, exp.cost, exp.controls, g)
    checks["sufficient_band"] = {"worst_margin": band.worst_margin, "worst_node": band.worst_node,
                                 "pass": band.ok}
    identity = _contract_paths(exp, contract, out, threads)
    if identity is not None:
        checks["pathwise_identity"] = _check(identity, 1e-10)
    passed = all(c["pass"] for c in checks.values())
    out.json("report.json", {"mode": exp.mode, "Y0": sol.Y0, "checks": checks, "passed": passed})
    return passed


def mode_verify_agent(exp: Experiment, out: Outputs, threads=None) -> bool:
    g, mc = exp.grid, exp.mc
    contract, sol = build_optimal_contract(exp.R, exp.model, exp.cost, exp.controls, g)
    beta = contract.beta
    base, devs = compare_deviations(contract, beta, deviation_family(beta, exp.controls),
                                    exp.model, exp.cost, mc, g, threads)
    participation = abs(base.mean - exp.R) <= 3 * base.std_error
    verify = exp.config["verify"]
    # agent value is concave with curvature kappa*T along a constant direction
    slope = 1.2 * 0.5 * exp.cost.params["kappa"] * g.T
    ones = np.ones(g.N + 1)
    stat = stationarity_check(contract, beta, ones, verify["epsilons"], exp.model, exp.cost, mc, g,
                              exp.controls, threads)
    stat_ok = [abs(p.derivative) <= slope * p.eps + 3 * p.std_error for p in stat]
    probe_beta = exp.controls.clamp(np.asarray(beta.values) + verify["probe_shift"])
    probe = stationarity_check(contract, probe_beta, ones, verify["epsilons"][-1:], exp.model, exp.cost, mc,
                               g, exp.controls, threads)[0]
    sign = 1.0 if verify["probe_shift"] < 0 else -1.0
    probe_ok = sign * probe.derivative > 3 * probe.std_error
    band = sufficient_condition_check(sol.Q, exp.model, exp.cost, exp.controls, g)
    passed = bool(participation and all(d.significant for d in devs) and all(stat_ok) and probe_ok and band.ok)
    out.json("report.json", {
        "mode": exp.mode,
        "participation": {**base.to_dict(), "R": exp.R, "pass": bool(participation)},
        "deviations": [d.to_dict() for d in devs],
        "stationarity": [{**p.to_dict(), "bound": slope * p.eps + 3 * p.std_error, "pass": ok}
                         for p, ok in zip(stat, stat_ok)],
        "suboptimal_probe": {**probe.to_dict(), "shift": verify["probe_shift"], "pass": bool(probe_ok)},
        "sufficient_band": {"worst_margin": band.worst_margin, "pass": band.ok},
        "passed": passed,
    })
    return passed


def mode_principal(exp: Experiment, out: Outputs, threads=None) -> bool:
    contract, _ = build_optimal_contract(exp.R, exp.model, exp.cost, exp.controls, exp.grid)
    est = principal_value_mc(contract, contract.beta, exp.model, exp.cost, exp.mc, exp.grid, threads)
    closed = principal_value_closed_form(exp.R, exp.model, exp.cost, exp.controls, exp.grid)
    passed = abs(est.mean - closed) <= 3 * est.std_error
    out.json("report.json", {"mode": exp.mode, "monte_carlo": est.to_dict(), "closed_form": closed,
                             "passed": bool(passed)})
    return bool(passed)


def mode_mfg(exp: Experiment, out: Outputs, threads=None) -> bool:
    g = exp.grid
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ClampingWarning)
        eq = mfg_equilibrium(exp.model, exp.cost, exp.controls, exp.R, g)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out.files["mfg_equilibrium.json"] = json.dumps({"_meta": out.meta, **eq.to_dict()}, indent=2) + "\n"
    out.table("mfg.csv", {"t": g.nodes, "k": eq.k.values, "rho": eq.rho.values, "beta_star": eq.beta_star.values,
                          "B_bar": eq.B_bar.values, "V": eq.V.values, "P_bar": eq.P_bar.values})
    fp = mfg_fixed_point_residual(eq, exp.model, exp.cost, exp.mc, g, threads=threads)
    band = sufficient_condition_check(eq.fbsde.Q, exp.model, exp.cost, exp.controls, g, lambda_path=eq.B_bar)
    report = {
        "mode": exp.mode,
        "clamped": eq.clamped,
        "ode_residuals": mfg_ode_residuals(eq, exp.model, exp.cost),
        "fixed_point": {"sup_residual": fp.sup_residual, "max_std_error": fp.max_std_error,
                        "pass": fp.consistent},
        "sufficient_band": {"worst_margin": band.worst_margin, "pass": band.ok},
    }
    passed = fp.consistent and band.ok
    if g.N <= 200:
        oracle = mfg_deterministic_oracle(exp.model, exp.cost, exp.controls, g)
        gap = float(np.max(np.abs(oracle.beta - mfg_optimal_effort_midpoints(exp.model, exp.cost, exp.controls, g))))
        ok = oracle.converged and gap <= ORACLE_TOL
        report["oracle"] = {"sup_gap": gap, "limit": ORACLE_TOL, "iterations": oracle.iterations,
                            "converged": oracle.converged, "pass": ok}
        passed = passed and ok
    report["passed"] = bool(passed)
    out.json("report.json", report)
    return bool(passed)


def mode_cara(exp: Experiment, out: Outputs, threads=None) -> bool:
    cara = exp.config["cara"]
    g = exp.grid
    V = solve_riccati(exp.model, g)
    beta = Path.constant(g, float(exp.controls.clamp(exp.cost.d1_inverse(0.0, 1.0))))
    est = cara_value_check(Path.constant(g, cara["Z"]), cara["Y0"], exp.cost, beta, exp.cara, exp.model, V,
                           exp.mc, g, threads)
    passed = est.mean <= 3 * est.std_error
    out.json("report.json", {"mode": exp.mode, "risk_aversion": cara["risk_aversion"], "Z": cara["Z"],
                             "Y0": cara["Y0"], "defect": est.to_dict(), "passed": bool(passed)})
    return bool(passed)


MODES = {
    "riccati": lambda e, o, t: mode_riccati(e, o),
    "first-best": lambda e, o, t: mode_first_best(e, o),
    "contract": mode_contract,
    "verify-agent": mode_verify_agent,
    "principal": mode_principal,
    "mfg": mode_mfg,
    "cara-check": mode_cara,
}


def run(config_path: str, out_dir: str, seed: int | None = None, paths: int | None = None,
        grid_steps: int | None = None, threads: int | None = None) -> int:
    try:
        with open(config_path, encoding="utf-8") as fh:
            text = fh.read()
        exp = load_experiment(text, seed, paths, grid_steps)
    except (OSError, UnicodeDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, DomainError) as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Outputs(exp)
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            passed = MODES[exp.mode](exp, out, threads)
    except (IntegrationError, OverflowError, FloatingPointError, DomainError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    out.write(out_dir)
    if not passed:
        print(f"verification FAILED; see {os.path.join(out_dir, 'report.json')}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pa-contracts", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=_u64)
    r.add_argument("--paths", type=int)
    r.add_argument("--grid-steps", type=int)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.config, args.out, args.seed, args.paths, args.grid_steps)


if __name__ == "__main__":
    sys.exit(main())
