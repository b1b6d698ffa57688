"""nl2lft: nonlinear state-space systems to uncertain LFT models.

Pipeline: PNLSS identification over a declared envelope, exact LPV
factorization and LFT realization, scheduling-parameter reduction with a
cascade feedforward network, falsification-based error bounds, and a
small-gain trade-off report.
"""

__version__ = "0.1.0"

from .envelope import (Hyperrectangle, ParameterSet, halton_sample,
                       ml2_discrepancy, normalize_to_unit)
from .dynamics import (DiscreteLinearModel, NonlinearSystem, discretize_zoh,
                       linearize, lqr_state_feedback, simulate_nonlinear)
from .sysid import (BasisSpec, MonomialBasis, PnlssModel, build_basis,
                    evaluate_pnlss, fit_coefficients, pareto_sweep)
from .lpvlft import (LftSystem, LpvModel, PolyTerm, default_priority,
                     evaluate_lft, factorize, lft_realize, reduced_lpv,
                     simulate_lft, simulate_lpv)
from .cfnn import Cfnn, TrainingSet, export_maps, init_cfnn, train
from .falsify import (FalsificationTask, SearchSpace,
                      bound_dynamic_uncertainty, generate_coverage_data,
                      optimize)
from .analysis import (GainReport, hinf_norm, robust_gain_upper_bound,
                       tradeoff_report)

__all__ = [
    "__version__",
    "Hyperrectangle", "ParameterSet", "halton_sample", "ml2_discrepancy",
    "normalize_to_unit",
    "DiscreteLinearModel", "NonlinearSystem", "discretize_zoh", "linearize",
    "lqr_state_feedback", "simulate_nonlinear",
    "BasisSpec", "MonomialBasis", "PnlssModel", "build_basis",
    "evaluate_pnlss", "fit_coefficients", "pareto_sweep",
    "LftSystem", "LpvModel", "PolyTerm", "default_priority", "evaluate_lft",
    "factorize", "lft_realize", "reduced_lpv", "simulate_lft", "simulate_lpv",
    "Cfnn", "TrainingSet", "export_maps", "init_cfnn", "train",
    "FalsificationTask", "SearchSpace", "bound_dynamic_uncertainty",
    "generate_coverage_data", "optimize",
    "GainReport", "hinf_norm", "robust_gain_upper_bound", "tradeoff_report",
]
