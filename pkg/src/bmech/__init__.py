"""Boundary phase space mechanics and boundary quantum mechanics for
finite-dimensional systems: variational two-point boundary solving, the
classical action and its Green-function structure, Poisson brackets on the
boundary phase space, grid quantization of position/momentum observables on
complex-weight densities, and the physical state (propagator) with its
constraint diagnostics."""

__version__ = "0.1.0"
