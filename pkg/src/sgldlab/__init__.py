"""Numerical laboratory for stochastic gradient Langevin dynamics.

Subpackages cover certified loss families, the SGLD engine, derived
theoretical constants, generalization-bound calculators, Monte Carlo
estimators, a closed-form Gaussian oracle, and a one-dimensional
Fokker-Planck grid solver, plus a command line front end.
"""

__version__ = "0.1.0"
