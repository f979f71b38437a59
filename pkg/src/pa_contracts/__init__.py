"""Optimal contracts for partially observed linear principal-agent problems."""

__version__ = "0.1.0"

from .agent import (McEstimate, agent_value_mc, cara_value_check, compare_deviations, deviation_family,
                    incentive_residual, principal_value_mc, stationarity_check, sufficient_condition_check)
from .contract import (Contract, FbsdeSolution, build_optimal_contract, contract_payoff, first_best_toy,
                       principal_value_closed_form)
from .filter import reconstruct_filter, simulate_filter, solve_riccati
from .mfg import MfgEquilibrium, mfg_deterministic_oracle, mfg_equilibrium, mfg_fixed_point_residual
from .model import CaraParams, ControlSet, CostFunction, LinearModel, TimeGrid, quadratic_cost
from .numerics import McConfig, Path

__all__ = [
    "CaraParams", "Contract", "ControlSet", "CostFunction", "FbsdeSolution", "LinearModel", "McConfig",
    "McEstimate", "MfgEquilibrium", "Path", "TimeGrid", "agent_value_mc", "build_optimal_contract",
    "cara_value_check", "compare_deviations", "contract_payoff", "deviation_family", "first_best_toy",
    "incentive_residual", "mfg_deterministic_oracle", "mfg_equilibrium", "mfg_fixed_point_residual",
    "principal_value_closed_form", "principal_value_mc", "quadratic_cost", "reconstruct_filter",
    "simulate_filter", "solve_riccati", "stationarity_check", "sufficient_condition_check",
]
