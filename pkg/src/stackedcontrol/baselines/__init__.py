"""Independent oracles used to score learned policies."""
from .energy_dp import ValueTable, assemble_control, energy_dp_lookup, table_policy_evaluate
from .execution_dp import ExecutionOracle, QuadraticValue, execution_optimal
from .riccati import RiccatiSolution, lq_riccati

__all__ = [
    "ExecutionOracle", "QuadraticValue", "RiccatiSolution", "ValueTable", "assemble_control",
    "energy_dp_lookup", "execution_optimal", "lq_riccati", "table_policy_evaluate",
]
