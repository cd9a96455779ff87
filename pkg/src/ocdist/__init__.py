"""Distributed optimization from an optimal-control formulation.

Library, synchronous multi-agent simulator and measurement harness for
DOCMC (parameter server) and DOAOC (peer-to-peer), with the Riccati and
averaging machinery they rest on and a DGD baseline.
"""

from .algorithms import AlgorithmConfig, StepSchedule
from .consensus import ConsensusConfig
from .control import CostWeights, NumericalError, RiccatiSolution, solve_riccati
from .graph import DirectedGraph, GraphError, incidence, laplacian, mixing_matrix, validate
from .objective import LogisticObjective, ObjectiveSet, QuadraticObjective, reference_minimizer
from .rates import RateReport, fit_rate
from .simulator import ConvergenceTrace, run_dgd, run_doaoc, run_docmc

__version__ = "0.1.0"
