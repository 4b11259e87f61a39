"""Stochastic geometric mechanics: diffusions on manifolds, second-order
Hamiltonian mechanics, Bernstein bridges and symmetry checks."""

__version__ = "0.1.0"
