"""ctlin: constant-time hardening of a small SSA IR.

Control-flow linearization folds secret-dependent branches and loops
into straight-line code driven by a taken predicate; data-flow
linearization replaces secret-indexed memory accesses with wrappers
that touch every candidate location.  A differential trace verifier
checks the result.
"""

__version__ = "0.1.0"
