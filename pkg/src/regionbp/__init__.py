"""Region-based belief propagation, domain decomposition and LDPC decoding on discrete factor graphs."""

from .bethe import BPOptions, bethe_free_energy, bp_run
from .dd import DDOptions, consistency_gap, dd_run, soundness_check
from .errors import (
    CapacityError,
    DegeneracyError,
    ErgodicityError,
    GraphParseError,
    GraphValidationError,
    InputError,
    PartitionError,
    RegionBPError,
)
from .graph import EnergyTable, FactorGraph, VariableSpec, load_graph, parse_graph, serialize_graph
from .oracle import helmholtz_free_energy, partition_function, variable_marginals
from .regions import auto_partition, build_decomposition, regional_bp_run, regional_free_energy
from .results import InferenceResult
from .solvers import RegionProblem, SamplerOptions, solve_region_exact, solve_region_gibbs

__version__ = "0.1.0"
